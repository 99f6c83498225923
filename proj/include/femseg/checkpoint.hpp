#pragma once

// Model checkpoints.
//
//   8 bytes   magic "FEMSEGCK"
//   header    one line of UTF-8 JSON terminated by '\n':
//             {"format":1,"config":{...},"scalar_type":"float32"|"float64","byte_order":"little",
//              "arrays":[{"name":"enc0.conv1.weight","shape":[8,1,3,3,3],"offset":0,"count":216},...]}
//   payload   the arrays back to back; offsets and counts are in elements

#include <json.hpp>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>

#include "femseg/unet.hpp"

namespace femseg {

inline constexpr char kCheckpointMagic[8] = {'F', 'E', 'M', 'S', 'E', 'G', 'C', 'K'};

inline nlohmann::json to_json(const UNetConfig& c) {
    return {{"rank", c.rank},
            {"in_channels", c.in_channels},
            {"initial_features", c.initial_features},
            {"levels", c.levels},
            {"padding", c.padding == Padding::valid ? "valid" : "same"},
            {"classes", c.classes}};
}

inline UNetConfig unet_config_from_json(const nlohmann::json& j) {
    UNetConfig c;
    c.rank = j.at("rank").get<int>();
    c.in_channels = j.at("in_channels").get<std::size_t>();
    c.initial_features = j.at("initial_features").get<std::size_t>();
    c.levels = j.at("levels").get<std::size_t>();
    const auto pad = j.at("padding").get<std::string>();
    if (pad != "valid" && pad != "same") throw FormatError(cat("unet config: unknown padding '", pad, "'"));
    c.padding = pad == "valid" ? Padding::valid : Padding::same_zero;
    c.classes = j.at("classes").get<std::size_t>();
    c.validate();
    return c;
}

template <class T>
struct Checkpoint {
    UNetConfig config;
    ModelParams<T> params;
};

template <class T>
void save_checkpoint(const ModelParams<T>& params, const UNetConfig& cfg, const std::filesystem::path& path) {
    validate(params, cfg);
    nlohmann::json h;
    h["format"] = 1;
    h["config"] = to_json(cfg);
    h["scalar_type"] = sizeof(T) == 4 ? "float32" : "float64";
    h["byte_order"] = "little";
    h["arrays"] = nlohmann::json::array();
    std::size_t offset = 0;
    for (const auto& [name, t] : params.tensors) {
        h["arrays"].push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}, {"count", t.size()}});
        offset += t.size();
    }
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError(cat("checkpoint: cannot open ", path.string(), " for writing"));
    out.write(kCheckpointMagic, sizeof kCheckpointMagic);
    const std::string line = h.dump() + "\n";
    out.write(line.data(), static_cast<std::streamsize>(line.size()));
    for (const auto& [name, t] : params.tensors)
        out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(T)));
    if (!out) throw FormatError(cat("checkpoint: write failed for ", path.string()));
}

namespace detail {

template <class Stored, class T>
void read_arrays(std::istream& in, const nlohmann::json& arrays, std::size_t total, ModelParams<T>& params,
                 const std::string& where) {
    std::vector<Stored> payload(total);
    const auto bytes = static_cast<std::streamsize>(total * sizeof(Stored));
    in.read(reinterpret_cast<char*>(payload.data()), bytes);
    if (in.gcount() != bytes) throw FormatError(cat("checkpoint: truncated payload in ", where));
    if (in.peek() != std::ifstream::traits_type::eof())
        throw FormatError(cat("checkpoint: trailing bytes after payload in ", where));
    for (const auto& a : arrays) {
        const auto shape = a.at("shape").get<Shape>();
        const auto offset = a.at("offset").get<std::size_t>();
        const auto count = a.at("count").get<std::size_t>();
        if (count != numel(shape) || offset + count > total)
            throw FormatError(cat("checkpoint: array '", a.at("name").get<std::string>(), "' is inconsistent in ", where));
        std::vector<T> values(count);
        for (std::size_t i = 0; i < count; ++i) values[i] = static_cast<T>(payload[offset + i]);
        params.tensors.emplace(a.at("name").get<std::string>(), Tensor<T>(shape, std::move(values)));
    }
}

}  // namespace detail

/// Loads a checkpoint, converting the stored scalars to T.
template <class T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path) {
    const std::string where = path.string();
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError(cat("checkpoint: cannot open ", where));
    char magic[8] = {};
    in.read(magic, sizeof magic);
    if (in.gcount() != sizeof magic || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0)
        throw FormatError(cat("checkpoint: bad magic in ", where));
    std::string line;
    if (!std::getline(in, line)) throw FormatError(cat("checkpoint: missing header in ", where));
    Checkpoint<T> ck;
    try {
        const auto h = nlohmann::json::parse(line);
        if (h.at("byte_order") != "little") throw FormatError("checkpoint: only little-endian payloads are supported");
        ck.config = unet_config_from_json(h.at("config"));
        std::size_t total = 0;
        for (const auto& a : h.at("arrays")) total = std::max(total, a.at("offset").get<std::size_t>() + a.at("count").get<std::size_t>());
        const auto scalar = h.at("scalar_type").get<std::string>();
        if (scalar == "float32") detail::read_arrays<float>(in, h.at("arrays"), total, ck.params, where);
        else if (scalar == "float64") detail::read_arrays<double>(in, h.at("arrays"), total, ck.params, where);
        else throw FormatError(cat("checkpoint: unsupported scalar_type '", scalar, "'"));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(cat("checkpoint: invalid header in ", where, ": ", e.what()));
    } catch (const std::invalid_argument& e) {
        throw FormatError(cat("checkpoint: ", where, ": ", e.what()));
    }
    validate(ck.params, ck.config);
    return ck;
}

}  // namespace femseg
