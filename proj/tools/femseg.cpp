// femseg: phantom generation, training, inference, evaluation, cross-validation
// and curve rendering from the command line.
//
// Exit status: 0 on success, 2 on usage or configuration errors, 1 when a run fails.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "femseg/config.hpp"
#include "femseg/phantom.hpp"

namespace fs = std::filesystem;
using namespace femseg;

namespace {

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::optional<std::size_t> threads;
    std::string precision;
    std::string log_level = "info";
};

// Defaults < config file < command-line flags. FEMSEG_THREADS applies only
// when neither the config nor the flags set a thread count.
RunConfig resolve(const Common& c, bool need_config, int default_rank = 3) {
    RunConfig rc = RunConfig::for_rank(default_rank);
    bool threads_set = false;
    if (!c.config.empty()) {
        std::ifstream in(c.config);
        if (!in) throw ConfigError(cat("cannot open config ", c.config));
        nlohmann::json j;
        try {
            in >> j;
        } catch (const nlohmann::json::parse_error& e) {
            throw ConfigError(cat("config ", c.config, ": ", e.what()));
        }
        threads_set = j.is_object() && j.contains("threads");
        rc = run_config_from_json(j, fs::path(c.config).parent_path());
    } else if (need_config) {
        throw ConfigError("--config is required for this command");
    }
    if (c.seed) rc.seed = *c.seed;
    if (c.threads) rc.threads = *c.threads;
    else if (!threads_set)
        if (auto env = threads_from_env()) rc.threads = *env;
    if (!c.precision.empty()) rc.precision = parse_precision(c.precision);
    rc.validate();
    return rc;
}

fs::path require_out(const Common& c) {
    if (c.out.empty()) throw ConfigError("--out is required for this command");
    fs::create_directories(c.out);
    return c.out;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << text;
    if (!out) throw std::runtime_error(cat("cannot write ", path.string()));
}

// run.json records what produced the directory; outputs.json lists every file in it.
void finish_run(const fs::path& out, const std::string& command, const nlohmann::json& config, std::uint64_t seed) {
    nlohmann::json run = {{"command", command}, {"version", std::string(kVersion)}, {"seed", seed}, {"config", config}};
    write_text(out / "run.json", run.dump(2) + "\n");
    std::vector<std::string> files;
    for (const auto& e : fs::recursive_directory_iterator(out))
        if (e.is_regular_file() && e.path().filename() != "outputs.json")
            files.push_back(fs::relative(e.path(), out).generic_string());
    std::sort(files.begin(), files.end());
    files.push_back("outputs.json");
    write_text(out / "outputs.json", nlohmann::json{{"files", files}}.dump(2) + "\n");
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------------------
// phantom

struct PhantomArgs {
    std::size_t count = 20;
    std::vector<std::size_t> extents{64, 64, 32};
    double difficulty = 1.0;
};

int cmd_phantom(const Common& c, const PhantomArgs& a) {
    const fs::path out = require_out(c);
    if (a.extents.size() != 3) throw ConfigError("--extents takes three values: x,y,slices");
    if (a.count < 1) throw ConfigError("--count must be >= 1");
    const std::uint64_t seed = c.seed.value_or(1);
    PhantomOptions opt;
    std::copy(a.extents.begin(), a.extents.end(), opt.extents.begin());
    opt.difficulty = a.difficulty;
    Manifest m;
    for (std::size_t i = 0; i < a.count; ++i) {
        const std::string id = cat("subj", i < 10 ? "00" : i < 100 ? "0" : "", i);
        const Phantom p = generate_phantom(derive_seed(seed, i), opt);
        fs::create_directories(out / id);
        write_volume(p.image, out / id / "image.vol");
        write_volume(p.mask, out / id / "mask.vol");
        m.push_back({id, p.laterality, out / id / "image.vol", out / id / "mask.vol", std::nullopt});
    }
    save_manifest(m, out / "manifest.json");
    finish_run(out, "phantom",
               {{"count", a.count}, {"extents", a.extents}, {"difficulty", a.difficulty}}, seed);
    std::printf("wrote %zu phantoms to %s\n", a.count, out.string().c_str());
    return 0;
}

// ---------------------------------------------------------------------------
// train and cv

Manifest manifest_of(const RunConfig& rc) {
    if (!rc.manifest) throw ConfigError("config has no manifest");
    return load_manifest(*rc.manifest);
}

FoldSplit split_of(const Manifest& m, const RunConfig& rc) {
    return fold_split(m, rc.folds, rc.seed);
}

template <class T>
int run_train(const RunConfig& rc, int fold, const fs::path& out) {
    const Manifest m = manifest_of(rc);
    const FoldSplit split = split_of(m, rc);
    if (fold < 0 || static_cast<std::size_t>(fold) >= split.k())
        throw ConfigError(cat("--fold must lie in [0, ", split.k(), ")"));
    const auto data = load_dataset(m, rc.preprocess);
    ExperimentConfig ex = rc.experiment();
    ex.out_dir = out;
    const auto t0 = std::chrono::steady_clock::now();
    const FoldOutcome<T> f = run_fold<T>(data, split, fold, ex);
    std::vector<EvalReport> reports{{rc.model.label(), f.eval.plain, {f.eval.curves}}};
    if (rc.postprocess) reports.push_back({rc.model.label(true), f.eval.post, {f.eval.curves}});
    write_reports(reports, out);
    std::printf("fold %d: best epoch %zu of %zu, threshold %.3f (%.1f s)\n", fold, f.training.best_epoch,
                f.training.history.size(), f.eval.curves.threshold, seconds_since(t0));
    std::fputs(format_table(reports).c_str(), stdout);
    return 0;
}

template <class T>
int run_cv(const RunConfig& rc, const fs::path& out) {
    const Manifest m = manifest_of(rc);
    const FoldSplit split = split_of(m, rc);
    const auto data = load_dataset(m, rc.preprocess);
    ExperimentConfig ex = rc.experiment();
    ex.out_dir = out;
    const auto t0 = std::chrono::steady_clock::now();
    const CvResult<T> r = run_cross_validation<T>(data, split, ex);
    write_reports(r.reports, out);
    std::fputs(format_table(r.reports).c_str(), stdout);
    std::printf("cross-validation finished in %.1f s\n", seconds_since(t0));
    return 0;
}

int cmd_train(const Common& c, int fold) {
    const RunConfig rc = resolve(c, true);
    const fs::path out = require_out(c);
    const int rv = rc.precision == Precision::f32 ? run_train<float>(rc, fold, out) : run_train<double>(rc, fold, out);
    nlohmann::json cfg = to_json(rc);
    cfg["fold"] = fold;
    finish_run(out, "train", cfg, rc.seed);
    return rv;
}

int cmd_cv(const Common& c) {
    const RunConfig rc = resolve(c, true);
    const fs::path out = require_out(c);
    const int rv = rc.precision == Precision::f32 ? run_cv<float>(rc, out) : run_cv<double>(rc, out);
    finish_run(out, "cv", to_json(rc), rc.seed);
    return rv;
}

// ---------------------------------------------------------------------------
// infer

struct InferArgs {
    std::string model;
    std::string manifest;
    std::vector<std::string> inputs;
    std::optional<double> threshold;
    bool postprocess = false;
};

template <class T>
int run_infer(const RunConfig& rc, const InferArgs& a, const fs::path& out) {
    const Checkpoint<T> ck = load_checkpoint<T>(a.model);
    std::vector<std::pair<std::string, fs::path>> items;
    if (!a.manifest.empty())
        for (const auto& e : load_manifest(a.manifest, false)) items.emplace_back(e.subject, e.image);
    for (const auto& p : a.inputs) items.emplace_back(fs::path(p).stem().string(), p);
    if (items.empty()) throw ConfigError("infer needs --manifest or at least one --input");
    std::set<std::string> seen;
    for (const auto& [id, _] : items)
        if (!seen.insert(id).second) throw ConfigError(cat("two inputs map to the output name '", id, "'"));
    for (const auto& [id, path] : items) {
        const auto t0 = std::chrono::steady_clock::now();
        const Volume image = read_volume<float>(path);
        const Subject s = prepare_subject(id, Laterality::left, image, MaskVolume(image.grid), rc.preprocess);
        const ProbabilityMap map = to_truth_grid(predict_volume(ck.params, ck.config, s.input), s);
        write_volume(map, out / (id + ".vol"));
        if (a.threshold) {
            MaskVolume mask = binarize(map, *a.threshold);
            if (a.postprocess) mask = largest_component(mask);
            write_volume(mask, out / (id + "_mask.vol"));
        }
        std::printf("%s: %.2f s\n", id.c_str(), seconds_since(t0));
    }
    return 0;
}

int cmd_infer(const Common& c, const InferArgs& a) {
    const RunConfig rc = resolve(c, false);
    const fs::path out = require_out(c);
    const int rv = rc.precision == Precision::f32 ? run_infer<float>(rc, a, out) : run_infer<double>(rc, a, out);
    nlohmann::json cfg = {{"model", a.model}, {"preprocess", to_json(rc)["preprocess"]}, {"precision", to_string(rc.precision)}};
    if (a.threshold) cfg["threshold"] = *a.threshold;
    cfg["postprocess"] = a.postprocess;
    finish_run(out, "infer", cfg, rc.seed);
    return rv;
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
    std::string pred;
    std::string truth;
    std::string label = "model";
    bool postprocess = false;
};

// Truth is either a directory of <subject>.vol masks or a manifest.
std::vector<std::pair<std::string, fs::path>> truth_masks(const fs::path& truth) {
    std::vector<std::pair<std::string, fs::path>> out;
    if (fs::is_directory(truth)) {
        for (const auto& e : fs::directory_iterator(truth))
            if (e.is_regular_file() && e.path().extension() == ".vol") out.emplace_back(e.path().stem().string(), e.path());
        std::sort(out.begin(), out.end());
    } else {
        for (const auto& e : load_manifest(truth)) out.emplace_back(e.subject, e.mask);
    }
    if (out.empty()) throw ConfigError(cat("no truth masks found in ", truth.string()));
    return out;
}

int cmd_eval(const Common& c, const EvalArgs& a) {
    const RunConfig rc = resolve(c, false);
    const fs::path out = require_out(c);
    std::vector<Subject> subjects;
    std::vector<ProbabilityMap> maps;
    for (const auto& [id, path] : truth_masks(a.truth)) {
        const fs::path pred = fs::path(a.pred) / (id + ".vol");
        if (!fs::exists(pred)) throw std::runtime_error(cat("no prediction for subject ", id, " (expected ", pred.string(), ")"));
        MaskVolume truth = read_volume<std::uint8_t>(path);
        if (rc.preprocess.slab) truth = central_slab(truth, *rc.preprocess.slab);
        ProbabilityMap map = read_volume<float>(pred);
        if (!map.grid.same_extents(truth.grid))
            throw ShapeError(cat("subject ", id, ": prediction ", to_string(map.grid), " vs truth ", to_string(truth.grid)));
        Subject s;
        s.id = id;
        s.truth = std::move(truth);
        for (auto& v : s.truth.values) v = v ? 1 : 0;
        subjects.push_back(std::move(s));
        maps.push_back(std::move(map));
    }
    std::vector<const Subject*> ptrs;
    for (const auto& s : subjects) ptrs.push_back(&s);
    const bool pp = a.postprocess || rc.postprocess;
    const FoldEval ev = evaluate_fold(0, ptrs, maps, pp);
    std::vector<EvalReport> reports{{a.label, ev.plain, {ev.curves}}};
    if (pp) reports.push_back({a.label + " PP", ev.post, {ev.curves}});
    write_reports(reports, out);
    std::printf("optimal threshold %.6f (AUC %.4f, AP %.4f)\n", ev.curves.threshold, ev.curves.auc, ev.curves.ap);
    std::fputs(format_table(reports).c_str(), stdout);
    finish_run(out, "eval", {{"pred", a.pred}, {"truth", a.truth}, {"label", a.label}, {"postprocess", pp}}, rc.seed);
    return 0;
}

// ---------------------------------------------------------------------------
// curves

int cmd_curves(const Common& c, const std::vector<std::string>& inputs) {
    const fs::path out = require_out(c);
    if (inputs.empty()) throw ConfigError("curves needs at least one curve CSV");
    std::vector<Series> roc, pr;
    for (const auto& p : inputs) {
        std::ifstream in(p);
        if (!in) throw std::runtime_error(cat("cannot open ", p));
        const auto pts = parse_curve_csv(in);
        const std::string name = fs::path(p).stem().string();
        roc.push_back(roc_series(name, pts));
        pr.push_back(pr_series(name, pts));
    }
    write_text(out / "roc.svg", render_svg("ROC curve", "False positive rate", "True positive rate", roc));
    write_text(out / "prc.svg", render_svg("Precision-recall curve", "Recall", "Precision", pr));
    finish_run(out, "curves", {{"inputs", inputs}}, 0);
    std::printf("wrote %s and %s\n", (out / "roc.svg").string().c_str(), (out / "prc.svg").string().c_str());
    return 0;
}

LogLevel parse_log_level(const std::string& s) {
    static const std::map<std::string, LogLevel> levels{{"debug", LogLevel::debug}, {"info", LogLevel::info},
                                                        {"warn", LogLevel::warn},   {"error", LogLevel::error},
                                                        {"off", LogLevel::off}};
    const auto it = levels.find(s);
    if (it == levels.end()) throw ConfigError(cat("unknown log level '", s, "'"));
    return it->second;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"U-net femur segmentation engine", "femseg"};
    app.set_version_flag("--version", std::string(kVersion));
    app.fallthrough();
    Common c;
    app.add_option("--config", c.config, "run configuration (JSON)");
    app.add_option("--seed", c.seed, "master seed");
    app.add_option("--out", c.out, "output directory");
    app.add_option("--threads", c.threads, "worker threads (default: FEMSEG_THREADS or 1)");
    app.add_option("--precision", c.precision, "f32 or f64")->check(CLI::IsMember({"f32", "f64"}));
    app.add_option("--log-level", c.log_level, "debug, info, warn, error or off");

    PhantomArgs pa;
    auto* phantom = app.add_subcommand("phantom", "generate a synthetic femur dataset");
    phantom->add_option("--count", pa.count, "number of subjects");
    phantom->add_option("--extents", pa.extents, "x,y,slices")->delimiter(',')->expected(3);
    phantom->add_option("--difficulty", pa.difficulty, "noise and inhomogeneity scale");

    int fold = 0;
    auto* trainc = app.add_subcommand("train", "train one fold and evaluate its held-out subjects");
    trainc->add_option("--fold", fold, "held-out fold");

    InferArgs ia;
    auto* infer = app.add_subcommand("infer", "write probability maps for new volumes");
    infer->add_option("--model", ia.model, "checkpoint")->required();
    infer->add_option("--manifest", ia.manifest, "manifest listing the images");
    infer->add_option("--input", ia.inputs, "image volume (repeatable)");
    infer->add_option("--threshold", ia.threshold, "also write binary masks at this threshold")->check(CLI::Range(0.0, 1.0));
    infer->add_flag("--postprocess", ia.postprocess, "keep only the largest component of each mask");

    EvalArgs ea;
    auto* eval = app.add_subcommand("eval", "score probability maps against ground truth");
    eval->add_option("--pred", ea.pred, "directory of <subject>.vol probability maps")->required();
    eval->add_option("--truth", ea.truth, "directory of <subject>.vol masks, or a manifest")->required();
    eval->add_option("--label", ea.label, "row label in the report");
    eval->add_flag("--postprocess", ea.postprocess, "also report largest-component results");

    auto* cv = app.add_subcommand("cv", "full k-fold cross-validation experiment");

    std::vector<std::string> curve_inputs;
    auto* curves = app.add_subcommand("curves", "render mean-curve CSVs as ROC and PR plots");
    curves->add_option("inputs", curve_inputs, "curve CSV files");

    app.require_subcommand(0, 1);
    if (argc <= 1) {
        std::cerr << app.help();
        return 2;
    }
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rv = app.exit(e);
        return rv == 0 ? 0 : 2;
    }
    try {
        logger().level = parse_log_level(c.log_level);
        if (phantom->parsed()) return cmd_phantom(c, pa);
        if (trainc->parsed()) return cmd_train(c, fold);
        if (infer->parsed()) return cmd_infer(c, ia);
        if (eval->parsed()) return cmd_eval(c, ea);
        if (cv->parsed()) return cmd_cv(c);
        if (curves->parsed()) return cmd_curves(c, curve_inputs);
        std::cerr << app.help();
        return 2;
    } catch (const ConfigError& e) {
        std::cerr << "femseg: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "femseg: " << e.what() << "\n";
        return 1;
    }
}
