#pragma once

// The two U-net variants: an unpadded 2D network whose output is the center
// area of its input, and a zero-padded 3D network whose output matches its input.

#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "femseg/autodiff.hpp"

namespace femseg {

struct UNetConfig {
    int rank = 3;
    std::size_t in_channels = 1;
    std::size_t initial_features = 32;  // F
    std::size_t levels = 4;             // L: pooling / up-conv stages
    Padding padding = Padding::same_zero;
    std::size_t classes = 2;

    /// Slice-triplet network with unpadded convolutions.
    static UNetConfig planar(std::size_t features = 64, std::size_t levels = 4) {
        return {2, 3, features, levels, Padding::valid, 2};
    }
    /// Volumetric network with zero-padded convolutions.
    static UNetConfig volumetric(std::size_t features = 32, std::size_t levels = 4) {
        return {3, 1, features, levels, Padding::same_zero, 2};
    }

    std::size_t features_at(std::size_t level) const { return initial_features << level; }

    void validate() const {
        if (rank != 2 && rank != 3) throw std::invalid_argument(cat("unet: rank must be 2 or 3, got ", rank));
        if (initial_features < 1) throw std::invalid_argument("unet: initial_features must be >= 1");
        if (levels < 1) throw std::invalid_argument("unet: levels must be >= 1");
        if (in_channels < 1) throw std::invalid_argument("unet: in_channels must be >= 1");
        if (classes != 2) throw std::invalid_argument("unet: exactly 2 classes are supported");
        if (rank == 2 && padding != Padding::valid)
            throw std::invalid_argument("unet: the 2D network uses unpadded (valid) convolutions");
        if (rank == 3 && padding != Padding::same_zero)
            throw std::invalid_argument("unet: the 3D network uses padded (same) convolutions");
    }

    /// Table row name, e.g. "3D CNN, F:32, L:4" or "2D CNN PP, F:64, L:4" with post-processing.
    std::string label(bool postprocessed = false) const {
        return cat(rank == 2 ? "2D CNN" : "3D CNN", postprocessed ? " PP" : "", ", F:", initial_features, ", L:", levels);
    }

    friend bool operator==(const UNetConfig&, const UNetConfig&) = default;
};

/// Learned weights keyed by layer path, e.g. "enc1.conv2.weight" or "dec0.upconv.weight".
template <class T>
struct ModelParams {
    std::map<std::string, Tensor<T>> tensors;

    Tensor<T>& at(const std::string& key) { return lookup(*this, key); }
    const Tensor<T>& at(const std::string& key) const { return lookup(*this, key); }

    std::size_t count() const {
        std::size_t n = 0;
        for (const auto& [k, t] : tensors) n += t.size();
        return n;
    }

    template <class U>
    ModelParams<U> cast() const {
        ModelParams<U> out;
        for (const auto& [k, t] : tensors) out.tensors.emplace(k, t.template cast<U>());
        return out;
    }

    friend bool operator==(const ModelParams&, const ModelParams&) = default;

private:
    template <class Self>
    static auto& lookup(Self& self, const std::string& key) {
        auto it = self.tensors.find(key);
        if (it == self.tensors.end()) throw std::out_of_range(cat("model params: no layer '", key, "'"));
        return it->second;
    }
};

/// One learned tensor demanded by a configuration.
struct LayerSpec {
    std::string name;
    Shape shape;
    bool is_bias = false;
    std::size_t fan_in = 0, fan_out = 0;
};

inline std::vector<LayerSpec> layer_specs(const UNetConfig& cfg) {
    cfg.validate();
    const std::size_t k3 = cfg.rank == 3 ? 27 : 9;
    const std::size_t k2 = cfg.rank == 3 ? 8 : 4;
    auto kshape = [&](std::size_t out, std::size_t in, std::size_t extent) {
        Shape s{out, in};
        for (int i = 0; i < cfg.rank; ++i) s.push_back(extent);
        return s;
    };
    std::vector<LayerSpec> specs;
    auto add_conv = [&](const std::string& path, std::size_t in, std::size_t out) {
        specs.push_back({path + ".weight", kshape(out, in, 3), false, in * k3, out * k3});
        specs.push_back({path + ".bias", {out}, true, 0, 0});
    };
    std::size_t in = cfg.in_channels;
    for (std::size_t k = 0; k <= cfg.levels; ++k) {
        const std::size_t f = cfg.features_at(k);
        add_conv(cat("enc", k, ".conv1"), in, f);
        add_conv(cat("enc", k, ".conv2"), f, f);
        in = f;
    }
    for (std::size_t k = cfg.levels; k-- > 0;) {
        const std::size_t f = cfg.features_at(k);
        specs.push_back({cat("dec", k, ".upconv.weight"), kshape(f, 2 * f, 2), false, 2 * f * k2, f * k2});
        add_conv(cat("dec", k, ".conv1"), 2 * f, f);
        add_conv(cat("dec", k, ".conv2"), f, f);
    }
    specs.push_back({"head.weight", kshape(cfg.classes, cfg.initial_features, 1), false, cfg.initial_features,
                     cfg.classes});
    specs.push_back({"head.bias", {cfg.classes}, true, 0, 0});
    return specs;
}

inline std::size_t parameter_count(const UNetConfig& cfg) {
    std::size_t n = 0;
    for (const auto& s : layer_specs(cfg)) n += numel(s.shape);
    return n;
}

inline constexpr double kInitialBias = 0.10;

/// Xavier-uniform kernels in +-sqrt(6/(fan_in+fan_out)) and constant 0.10 biases.
template <class T>
ModelParams<T> build(const UNetConfig& cfg, std::uint64_t seed) {
    ModelParams<T> params;
    std::uint64_t tag = 0;
    for (const auto& spec : layer_specs(cfg)) {
        Tensor<T> t(spec.shape);
        if (spec.is_bias) {
            t.fill(static_cast<T>(kInitialBias));
        } else {
            Rng rng(derive_seed(seed, tag));
            const double limit = std::sqrt(6.0 / static_cast<double>(spec.fan_in + spec.fan_out));
            for (auto& v : t.values()) v = static_cast<T>(rng.uniform(-limit, limit));
        }
        ++tag;
        params.tensors.emplace(spec.name, std::move(t));
    }
    return params;
}

/// Checks that `params` holds exactly the tensors `cfg` demands, with matching shapes and finite values.
template <class T>
void validate(const ModelParams<T>& params, const UNetConfig& cfg) {
    const auto specs = layer_specs(cfg);
    if (params.tensors.size() != specs.size())
        throw ShapeError(cat("model params: expected ", specs.size(), " tensors, found ", params.tensors.size()));
    for (const auto& s : specs) {
        const auto& t = params.at(s.name);
        if (t.shape() != s.shape)
            throw ShapeError(cat("model params: '", s.name, "' has shape ", to_string(t.shape()), ", expected ",
                                 to_string(s.shape)));
        if (!t.all_finite()) throw NonFiniteError(cat("model params: '", s.name, "' holds non-finite values"));
    }
}

// ---------------------------------------------------------------------------
// Size algebra of the unpadded network, per spatial axis.

/// Output extent of the unpadded network for one axis, or nothing when some
/// pre-pool extent is odd or an intermediate extent vanishes.
inline std::optional<std::size_t> output_size(std::size_t input, std::size_t levels) {
    long s = static_cast<long>(input);
    for (std::size_t k = 0; k < levels; ++k) {
        s -= 4;
        if (s < 1 || s % 2 != 0) return std::nullopt;
        s /= 2;
    }
    s -= 4;
    if (s < 1) return std::nullopt;
    for (std::size_t k = 0; k < levels; ++k) {
        s = 2 * s - 4;
        if (s < 1) return std::nullopt;
    }
    return static_cast<std::size_t>(s);
}

struct SizePair {
    std::size_t input = 0;
    std::size_t output = 0;
    friend bool operator==(const SizePair&, const SizePair&) = default;
};

/// Smallest admissible input whose output covers `target_output`.
inline SizePair valid_sizes(std::size_t levels, std::size_t target_output) {
    if (levels < 1) throw std::invalid_argument("valid_sizes: levels must be >= 1");
    for (std::size_t in = 1;; ++in) {
        const auto out = output_size(in, levels);
        if (out && *out >= target_output) return {in, *out};
    }
}

/// Admissible inputs bracketing `input` (either side may be absent below the smallest).
inline std::pair<std::optional<std::size_t>, std::size_t> nearest_admissible(std::size_t input, std::size_t levels) {
    std::optional<std::size_t> below;
    for (std::size_t in = input; in-- > 1;)
        if (output_size(in, levels)) {
            below = in;
            break;
        }
    std::size_t above = input + 1;
    while (!output_size(above, levels)) ++above;
    return {below, above};
}

namespace detail {

template <class T>
void check_admissible(const Tensor<T>& x, const UNetConfig& cfg) {
    if (x.rank() != static_cast<std::size_t>(cfg.rank) + 2)
        throw ShapeError(cat("unet forward: expected rank ", cfg.rank + 2, " input, got ", to_string(x.shape())));
    if (x.extent(1) != cfg.in_channels)
        throw ShapeError(cat("unet forward: channel axis (1) has ", x.extent(1), ", network expects ",
                             cfg.in_channels));
    const std::size_t unit = std::size_t{1} << cfg.levels;
    for (std::size_t ax = 2; ax < x.rank(); ++ax) {
        const std::size_t e = x.extent(ax);
        if (cfg.rank == 2) {
            if (!output_size(e, cfg.levels)) {
                const auto [lo, hi] = nearest_admissible(e, cfg.levels);
                throw ShapeError(cat("unet forward: spatial axis ", ax, " extent ", e,
                                     " is inadmissible for L=", cfg.levels, "; nearest admissible: ",
                                     lo ? std::to_string(*lo) + " or " : std::string{}, hi));
            }
        } else if (e % unit != 0 || e == 0) {
            const std::size_t lo = e / unit * unit, hi = lo + unit;
            throw ShapeError(cat("unet forward: spatial axis ", ax, " extent ", e, " is not divisible by 2^L=", unit,
                                 "; nearest admissible: ", lo ? std::to_string(lo) + " or " : std::string{}, hi));
        }
    }
}

}  // namespace detail

/// Tape handles of the parameters bound during forward, keyed like ModelParams.
using BoundParams = std::map<std::string, Var>;

/// Records the network on `tape` and returns per-voxel class probabilities
/// (channel 1 is the foreground). `bound`, when given, receives the parameter handles.
template <class T>
Var forward(Tape<T>& tape, const ModelParams<T>& params, const UNetConfig& cfg, Var x, BoundParams* bound = nullptr) {
    cfg.validate();
    detail::check_admissible(tape.value(x), cfg);
    const ConvSpec c3 = ConvSpec::conv(cfg.rank, cfg.padding);
    auto p = [&](const std::string& key) {
        const Var v = tape.param(params.at(key));
        if (bound) (*bound)[key] = v;
        return v;
    };
    auto block = [&](Var h, const std::string& path) {
        h = relu(tape, conv(tape, h, p(path + ".conv1.weight"), p(path + ".conv1.bias"), c3));
        return relu(tape, conv(tape, h, p(path + ".conv2.weight"), p(path + ".conv2.bias"), c3));
    };
    std::vector<Var> skips;
    Var h = x;
    for (std::size_t k = 0; k < cfg.levels; ++k) {
        h = block(h, cat("enc", k));
        skips.push_back(h);
        h = max_pool(tape, h, ConvSpec::pool(cfg.rank));
    }
    h = block(h, cat("enc", cfg.levels));
    for (std::size_t k = cfg.levels; k-- > 0;) {
        h = up_conv(tape, h, p(cat("dec", k, ".upconv.weight")), ConvSpec::up(cfg.rank));
        h = crop_concat(tape, skips[k], h);
        h = block(h, cat("dec", k));
    }
    Var logits = conv(tape, h, p("head.weight"), p("head.bias"), ConvSpec::pointwise(cfg.rank));
    return channel_softmax(tape, logits);
}

/// Inference-only forward pass.
template <class T>
Tensor<T> predict(const ModelParams<T>& params, const UNetConfig& cfg, const Tensor<T>& x) {
    Tape<T> tape(false);
    Var out = forward(tape, params, cfg, tape.constant(x));
    return tape.value(out);
}

}  // namespace femseg
