#pragma once

// Run configuration shared by the command-line tool: JSON schema with strict
// keys, per-rank defaults, and conversion into the experiment structs.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <optional>
#include <string>

#include <json.hpp>

#include "femseg/pipeline.hpp"

namespace femseg {

/// Malformed or inconsistent configuration; the tool maps it to a usage error.
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

enum class Precision { f32, f64 };

inline std::string to_string(Precision p) { return p == Precision::f32 ? "f32" : "f64"; }

inline Precision parse_precision(const std::string& s) {
    if (s == "f32") return Precision::f32;
    if (s == "f64") return Precision::f64;
    throw ConfigError(cat("precision must be f32 or f64, got '", s, "'"));
}

struct RunConfig {
    std::optional<std::filesystem::path> manifest;
    UNetConfig model = UNetConfig::volumetric();
    TrainConfig train;
    PreprocessConfig preprocess;
    std::size_t folds = 4;
    std::uint64_t seed = 1;
    std::size_t threads = 1;
    bool postprocess = false;
    Precision precision = Precision::f32;

    /// Default for a rank: 3D F32 L4 without post-processing, 2D F64 L4 with it.
    static RunConfig for_rank(int rank) {
        RunConfig c;
        c.model = rank == 2 ? UNetConfig::planar() : UNetConfig::volumetric();
        c.postprocess = rank == 2;
        return c;
    }

    ExperimentConfig experiment() const {
        ExperimentConfig ex;
        ex.model = model;
        ex.train = train;
        ex.folds = folds;
        ex.seed = seed;
        ex.threads = threads;
        ex.postprocess = postprocess;
        return ex;
    }

    void validate() const {
        try {
            model.validate();
            train.validate();
        } catch (const std::invalid_argument& e) {
            throw ConfigError(e.what());
        }
        if (folds < 2) throw ConfigError("folds must be >= 2");
        if (threads < 1) throw ConfigError("threads must be >= 1");
        if (preprocess.slab && *preprocess.slab < 1) throw ConfigError("preprocess.slab must be >= 1");
        if (preprocess.resample && ((*preprocess.resample)[0] < 1 || (*preprocess.resample)[1] < 1))
            throw ConfigError("preprocess.resample extents must be >= 1");
    }
};

namespace detail {

inline void check_keys(const nlohmann::json& j, const std::string& where, std::initializer_list<const char*> allowed) {
    if (!j.is_object()) throw ConfigError(cat(where.empty() ? "config" : where, " must be a JSON object"));
    for (const auto& [key, _] : j.items()) {
        bool ok = false;
        for (const char* a : allowed) ok = ok || key == a;
        if (!ok) throw ConfigError(cat("unknown config key '", where.empty() ? "" : where + ".", key, "'"));
    }
}

template <class V>
void read_key(const nlohmann::json& j, const char* key, const std::string& where, V& dst) {
    if (!j.contains(key)) return;
    try {
        dst = j.at(key).get<V>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigError(cat("config key '", where.empty() ? "" : where + ".", key, "' has the wrong type"));
    }
}

}  // namespace detail

/// Parses a run configuration; relative paths resolve against `base`. Missing
/// keys keep the defaults of the chosen rank.
inline RunConfig run_config_from_json(const nlohmann::json& j, const std::filesystem::path& base = {}) {
    using detail::read_key;
    detail::check_keys(j, "", {"manifest", "model", "train", "preprocess", "folds", "seed", "threads", "postprocess",
                               "precision"});
    int rank = 3;
    if (j.contains("model")) {
        detail::check_keys(j["model"], "model", {"rank", "features", "levels"});
        read_key(j["model"], "rank", "model", rank);
    }
    if (rank != 2 && rank != 3) throw ConfigError(cat("model.rank must be 2 or 3, got ", rank));
    RunConfig c = RunConfig::for_rank(rank);
    if (j.contains("model")) {
        read_key(j["model"], "features", "model", c.model.initial_features);
        read_key(j["model"], "levels", "model", c.model.levels);
    }
    if (j.contains("manifest")) {
        std::string m;
        read_key(j, "manifest", "", m);
        c.manifest = std::filesystem::path(m).is_absolute() ? std::filesystem::path(m) : base / m;
    }
    if (j.contains("train")) {
        const auto& t = j["train"];
        detail::check_keys(t, "train", {"learning_rate", "beta1", "beta2", "epsilon", "batch_size", "max_epochs",
                                        "augment", "early_stop"});
        read_key(t, "learning_rate", "train", c.train.adam.learning_rate);
        read_key(t, "beta1", "train", c.train.adam.beta1);
        read_key(t, "beta2", "train", c.train.adam.beta2);
        read_key(t, "epsilon", "train", c.train.adam.epsilon);
        read_key(t, "batch_size", "train", c.train.batch_size);
        read_key(t, "max_epochs", "train", c.train.max_epochs);
        read_key(t, "augment", "train", c.train.augment);
        if (t.contains("early_stop")) {
            const auto& e = t["early_stop"];
            detail::check_keys(e, "train.early_stop", {"warmup", "window", "tolerance"});
            read_key(e, "warmup", "train.early_stop", c.train.early_stop.warmup);
            read_key(e, "window", "train.early_stop", c.train.early_stop.window);
            read_key(e, "tolerance", "train.early_stop", c.train.early_stop.tolerance);
        }
    }
    if (j.contains("preprocess")) {
        const auto& p = j["preprocess"];
        detail::check_keys(p, "preprocess", {"slab", "resample"});
        if (p.contains("slab") && !p["slab"].is_null()) {
            std::size_t n = 0;
            read_key(p, "slab", "preprocess", n);
            c.preprocess.slab = n;
        }
        if (p.contains("resample") && !p["resample"].is_null()) {
            std::array<std::size_t, 2> r{};
            read_key(p, "resample", "preprocess", r);
            c.preprocess.resample = r;
        }
    }
    read_key(j, "folds", "", c.folds);
    read_key(j, "seed", "", c.seed);
    read_key(j, "threads", "", c.threads);
    read_key(j, "postprocess", "", c.postprocess);
    if (j.contains("precision")) {
        std::string p;
        read_key(j, "precision", "", p);
        c.precision = parse_precision(p);
    }
    c.validate();
    return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError(cat("cannot open config ", path.string()));
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(cat("config ", path.string(), ": ", e.what()));
    }
    return run_config_from_json(j, path.parent_path());
}

inline nlohmann::json to_json(const RunConfig& c) {
    nlohmann::json j;
    if (c.manifest) j["manifest"] = c.manifest->generic_string();
    j["model"] = {{"rank", c.model.rank}, {"features", c.model.initial_features}, {"levels", c.model.levels}};
    j["train"] = {{"learning_rate", c.train.adam.learning_rate},
                  {"beta1", c.train.adam.beta1},
                  {"beta2", c.train.adam.beta2},
                  {"epsilon", c.train.adam.epsilon},
                  {"batch_size", c.train.batch_size},
                  {"max_epochs", c.train.max_epochs},
                  {"augment", c.train.augment},
                  {"early_stop",
                   {{"warmup", c.train.early_stop.warmup},
                    {"window", c.train.early_stop.window},
                    {"tolerance", c.train.early_stop.tolerance}}}};
    j["preprocess"] = {{"slab", nullptr}, {"resample", nullptr}};
    if (c.preprocess.slab) j["preprocess"]["slab"] = *c.preprocess.slab;
    if (c.preprocess.resample) j["preprocess"]["resample"] = *c.preprocess.resample;
    j["folds"] = c.folds;
    j["seed"] = c.seed;
    j["threads"] = c.threads;
    j["postprocess"] = c.postprocess;
    j["precision"] = to_string(c.precision);
    return j;
}

/// Thread count from FEMSEG_THREADS, or nullopt when unset.
inline std::optional<std::size_t> threads_from_env() {
    const char* v = std::getenv("FEMSEG_THREADS");
    if (!v || !*v) return std::nullopt;
    char* end = nullptr;
    const unsigned long n = std::strtoul(v, &end, 10);
    if (*end || n < 1) throw ConfigError(cat("FEMSEG_THREADS must be a positive integer, got '", v, "'"));
    return static_cast<std::size_t>(n);
}

}  // namespace femseg
