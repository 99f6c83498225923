#pragma once

// Class-rebalanced cross-entropy, Adam, flip augmentation, early stopping,
// stratified fold assignment and the per-fold training loop.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "femseg/data.hpp"
#include "femseg/unet.hpp"

namespace femseg {

// ---------------------------------------------------------------------------
// Loss

inline constexpr double kProbClamp = 1e-7;

/// Voxel counts that weight the two loss terms of one sample.
struct LossWeights {
    std::size_t n = 0;   // all voxels
    std::size_t np = 0;  // foreground
    std::size_t nb = 0;  // background

    double foreground_weight() const { return n ? static_cast<double>(nb) / static_cast<double>(n) : 0.0; }
    double background_weight() const { return n ? static_cast<double>(np) / static_cast<double>(n) : 0.0; }
};

template <class Label>
LossWeights loss_weights(std::span<const Label> target) {
    LossWeights w;
    w.n = target.size();
    for (const Label y : target) w.np += y != Label{0};
    w.nb = w.n - w.np;
    return w;
}

namespace detail {

template <class P, class Label>
double weighted_cross_entropy(std::span<const P> p, std::span<const Label> target, const LossWeights& w) {
    const double wf = w.foreground_weight(), wb = w.background_weight();
    double s = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double q = static_cast<double>(p[i]);
        s += target[i] ? wf * std::log(std::max(q, kProbClamp)) : wb * std::log(std::max(1.0 - q, kProbClamp));
    }
    return -s / static_cast<double>(w.n);
}

}  // namespace detail

/// -(1/N) sum [ (Nb/N) y log p + (Np/N) (1-y) log(1-p) ]; each log argument is
/// clamped below at 1e-7, so a perfect prediction scores exactly 0.
/// Without foreground voxels both weights on the background term vanish; a warning is logged.
template <class P, class Label>
double weighted_cross_entropy(std::span<const P> p, std::span<const Label> target) {
    if (p.size() != target.size())
        throw ShapeError(cat("weighted_cross_entropy: ", p.size(), " probabilities for ", target.size(), " labels"));
    if (p.empty()) throw ShapeError("weighted_cross_entropy: empty sample");
    const LossWeights w = loss_weights(target);
    if (w.np == 0) log(LogLevel::warn, "weighted_cross_entropy: sample has no foreground voxels; the loss is zero");
    return detail::weighted_cross_entropy(p, target, w);
}

/// Differentiable loss on the foreground channel of softmax output `probs`
/// (shape (1, 2, spatial...)); `target` holds one label per spatial voxel.
template <class T>
Var weighted_cross_entropy(Tape<T>& tape, Var probs, std::vector<std::uint8_t> target) {
    const auto& pv = tape.value(probs);
    if (pv.rank() < 3 || pv.extent(0) != 1 || pv.extent(1) != 2)
        throw ShapeError(cat("weighted_cross_entropy: expected (1, 2, spatial...) probabilities, got ",
                             to_string(pv.shape())));
    const std::size_t n = pv.size() / 2;
    if (target.size() != n)
        throw ShapeError(cat("weighted_cross_entropy: ", n, " voxels but ", target.size(), " labels"));
    const std::span<const T> fg(pv.data() + n, n);
    const LossWeights w = loss_weights(std::span<const std::uint8_t>(target));
    const double loss = detail::weighted_cross_entropy(fg, std::span<const std::uint8_t>(target), w);
    if (!std::isfinite(loss)) throw NonFiniteError("weighted_cross_entropy: non-finite loss");
    return tape.push(Tensor<T>({1}, std::vector<T>{static_cast<T>(loss)}), tape.requires_grad(probs),
                     [probs, target = std::move(target), w, n](Tape<T>& t, const Tensor<T>& g) {
                         const auto& p = t.value(probs);
                         auto& gp = t.grad_buffer(probs);
                         const double scale = static_cast<double>(g[0]) / static_cast<double>(n);
                         const double wf = w.foreground_weight(), wb = w.background_weight();
                         for (std::size_t i = 0; i < n; ++i) {
                             const double q = static_cast<double>(p[n + i]);
                             const double arg = target[i] ? q : 1.0 - q;
                             if (arg < kProbClamp) continue;
                             gp[n + i] += static_cast<T>(scale * (target[i] ? -wf / q : wb / (1.0 - q)));
                         }
                     });
}

// ---------------------------------------------------------------------------
// Optimizer

struct AdamConfig {
    double learning_rate = 5e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

/// One bias-corrected Adam update at step t (1-based).
template <class T>
void adam_update(std::span<T> w, std::span<const T> g, std::span<T> m, std::span<T> v, std::size_t t,
                 const AdamConfig& cfg) {
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = g[i];
        const double mi = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
        const double vi = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
        m[i] = static_cast<T>(mi);
        v[i] = static_cast<T>(vi);
        w[i] = static_cast<T>(w[i] - cfg.learning_rate * (mi / c1) / (std::sqrt(vi / c2) + cfg.epsilon));
    }
}

template <class T>
class Adam {
public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

    std::size_t steps() const { return t_; }
    const AdamConfig& config() const { return cfg_; }

    /// Applies one step. Every gradient is checked before any parameter changes.
    void step(ModelParams<T>& params, const std::map<std::string, Tensor<T>>& grads) {
        for (const auto& [key, g] : grads) {
            if (g.shape() != params.at(key).shape())
                throw ShapeError(cat("adam: gradient for '", key, "' has shape ", to_string(g.shape())));
            if (!g.all_finite()) throw NonFiniteError(cat("adam: non-finite gradient for '", key, "'"));
        }
        ++t_;
        for (const auto& [key, g] : grads) {
            auto& w = params.at(key);
            auto [it, fresh] = moments_.try_emplace(key);
            if (fresh) it->second = {Tensor<T>(w.shape()), Tensor<T>(w.shape())};
            adam_update(w.values(), std::span<const T>(g.data(), g.size()), it->second.first.values(),
                        it->second.second.values(), t_, cfg_);
        }
    }

private:
    AdamConfig cfg_;
    std::size_t t_ = 0;
    std::map<std::string, std::pair<Tensor<T>, Tensor<T>>> moments_;
};

// ---------------------------------------------------------------------------
// Augmentation

enum class FlipMode { random, always, never };

/// Deterministic coin for sample `index` under `seed`.
inline bool flip_coin(std::uint64_t seed, std::uint64_t index) { return (derive_seed(seed, index) >> 63) != 0; }

/// Reverses the last (left-right) axis of a tensor in place.
template <class T>
void flip_last_axis(Tensor<T>& t) {
    const std::size_t w = t.extent(t.rank() - 1);
    for (std::size_t r = 0; r < t.size() / w; ++r) std::reverse(t.data() + r * w, t.data() + (r + 1) * w);
}

/// Flips image and mask together along x with probability 1/2 (per seed and index).
template <class V, class M>
std::pair<VolumeOf<V>, VolumeOf<M>> augment_flip(const VolumeOf<V>& image, const VolumeOf<M>& mask,
                                                 std::uint64_t seed, std::uint64_t index = 0,
                                                 FlipMode mode = FlipMode::random) {
    if (!image.grid.same_extents(mask.grid))
        throw ShapeError(cat("augment_flip: image ", to_string(image.grid), " and mask ", to_string(mask.grid)));
    const bool flip = mode == FlipMode::always || (mode == FlipMode::random && flip_coin(seed, index));
    if (!flip) return {image, mask};
    return {flip_x(image), flip_x(mask)};
}

// ---------------------------------------------------------------------------
// Early stopping

struct EarlyStopConfig {
    std::size_t warmup = 30;
    std::size_t window = 10;
    double tolerance = 1e-4;
};

/// True once a full window after the warmup has passed without the best
/// accuracy improving on the best before the window by at least the tolerance.
inline bool early_stop(std::span<const double> history, const EarlyStopConfig& cfg = {}) {
    const std::size_t n = history.size();
    if (n < cfg.warmup + cfg.window || n <= cfg.window) return false;
    const auto split = history.end() - static_cast<std::ptrdiff_t>(cfg.window);
    const double before = *std::max_element(history.begin(), split);
    const double recent = *std::max_element(split, history.end());
    return recent - before < cfg.tolerance;
}

// ---------------------------------------------------------------------------
// Folds

struct FoldSplit {
    std::vector<std::vector<std::string>> folds;  // subject ids per validation fold

    std::size_t k() const { return folds.size(); }
    int fold_of(const std::string& subject) const {
        for (std::size_t f = 0; f < folds.size(); ++f)
            if (std::find(folds[f].begin(), folds[f].end(), subject) != folds[f].end()) return static_cast<int>(f);
        throw std::out_of_range(cat("fold split: unknown subject '", subject, "'"));
    }
};

/// Laterality strata are shuffled by seed, concatenated (left first) and dealt
/// round-robin from the last fold down, so larger folds come last.
inline FoldSplit stratified_kfold(const Manifest& m, std::size_t k, std::uint64_t seed) {
    if (k < 2) throw std::invalid_argument(cat("stratified_kfold: cross-validation requires k >= 2, got ", k));
    if (m.size() < k) throw std::invalid_argument(cat("stratified_kfold: ", m.size(), " subjects for ", k, " folds"));
    std::vector<std::string> order;
    for (const Laterality side : {Laterality::left, Laterality::right}) {
        std::vector<std::string> stratum;
        for (const auto& e : m)
            if (e.laterality == side) stratum.push_back(e.subject);
        Rng rng(derive_seed(seed, side == Laterality::left ? 1 : 2));
        shuffle(stratum, rng);
        order.insert(order.end(), stratum.begin(), stratum.end());
    }
    FoldSplit split;
    split.folds.resize(k);
    for (std::size_t i = 0; i < order.size(); ++i) split.folds[k - 1 - i % k].push_back(order[i]);
    return split;
}

/// Uses the manifest's fold ids when every entry carries one, else a stratified split.
inline FoldSplit fold_split(const Manifest& m, std::size_t k, std::uint64_t seed) {
    const bool preset = !m.empty() && std::all_of(m.begin(), m.end(), [](const auto& e) { return e.fold.has_value(); });
    if (!preset) return stratified_kfold(m, k, seed);
    FoldSplit split;
    split.folds.resize(k);
    for (const auto& e : m) {
        if (*e.fold < 0 || static_cast<std::size_t>(*e.fold) >= k)
            throw FormatError(cat("manifest: subject '", e.subject, "' has fold ", *e.fold, " outside [0, ", k, ")"));
        split.folds[static_cast<std::size_t>(*e.fold)].push_back(e.subject);
    }
    for (std::size_t f = 0; f < k; ++f)
        if (split.folds[f].empty()) throw FormatError(cat("manifest: fold ", f, " has no subjects"));
    return split;
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainConfig {
    AdamConfig adam;
    std::size_t batch_size = 1;
    std::size_t max_epochs = 100;
    EarlyStopConfig early_stop;
    bool augment = true;
    std::uint64_t seed = 1;

    void validate() const {
        if (!(adam.learning_rate > 0)) throw std::invalid_argument("train config: learning_rate must be positive");
        if (!(adam.beta1 > 0 && adam.beta1 < 1 && adam.beta2 > 0 && adam.beta2 < 1))
            throw std::invalid_argument("train config: Adam betas must lie in (0, 1)");
        if (!(adam.epsilon > 0)) throw std::invalid_argument("train config: epsilon must be positive");
        if (batch_size < 1) throw std::invalid_argument("train config: batch_size must be >= 1");
        if (max_epochs < 1) throw std::invalid_argument("train config: max_epochs must be >= 1");
        if (early_stop.window < 1) throw std::invalid_argument("train config: early-stop window must be >= 1");
        if (!(early_stop.tolerance >= 0)) throw std::invalid_argument("train config: tolerance must be >= 0");
    }
};

/// One network input with labels for every output voxel (flattened in output order).
template <class T>
struct Sample {
    Tensor<T> input;
    std::vector<std::uint8_t> target;
};

struct EpochRecord {
    std::size_t epoch = 0;
    double train_loss = 0;
    double val_accuracy = 0;
    double seconds = 0;
};

template <class T>
struct TrainResult {
    ModelParams<T> best;
    std::size_t best_epoch = 0;
    double best_accuracy = 0;
    std::vector<EpochRecord> history;
    bool stopped_early = false;
};

/// Voxel accuracy at threshold 0.5 pooled over the samples.
template <class T>
double voxel_accuracy(const ModelParams<T>& params, const UNetConfig& cfg, const std::vector<Sample<T>>& samples) {
    std::size_t correct = 0, total = 0;
    for (const auto& s : samples) {
        const auto probs = predict(params, cfg, s.input);
        const std::size_t n = probs.size() / 2;
        if (n != s.target.size()) throw ShapeError("voxel_accuracy: target does not match the network output");
        for (std::size_t i = 0; i < n; ++i) correct += (probs[n + i] > T(0.5)) == (s.target[i] != 0);
        total += n;
    }
    return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
}

/// Loss and gradients of one sample.
template <class T>
double loss_and_grads(const ModelParams<T>& params, const UNetConfig& cfg, const Sample<T>& s, bool flip,
                      std::map<std::string, Tensor<T>>& grads) {
    Tape<T> tape;
    Tensor<T> input = s.input;
    std::vector<std::uint8_t> target = s.target;
    if (flip) flip_last_axis(input);
    BoundParams bound;
    const Var probs = forward(tape, params, cfg, tape.constant(std::move(input)), &bound);
    if (flip) {
        const auto& pv = tape.value(probs);
        const std::size_t w = pv.extent(pv.rank() - 1);
        for (std::size_t r = 0; r < target.size() / w; ++r)
            std::reverse(target.begin() + static_cast<std::ptrdiff_t>(r * w),
                         target.begin() + static_cast<std::ptrdiff_t>((r + 1) * w));
    }
    const Var loss = weighted_cross_entropy(tape, probs, std::move(target));
    tape.backward(loss);
    for (const auto& [key, v] : bound) {
        auto g = tape.grad(v);
        auto [it, fresh] = grads.try_emplace(key, std::move(g));
        if (!fresh)
            for (std::size_t i = 0; i < g.size(); ++i) it->second[i] += g[i];
    }
    return static_cast<double>(tape.value(loss)[0]);
}

/// Trains from `init` and keeps the parameters of the best validation epoch.
/// `on_epoch` sees each record as it completes.
template <class T>
TrainResult<T> train(ModelParams<T> init, const UNetConfig& cfg, const TrainConfig& tc,
                     const std::vector<Sample<T>>& training, const std::vector<Sample<T>>& validation,
                     const std::function<void(const EpochRecord&)>& on_epoch = {}) {
    tc.validate();
    if (training.empty()) throw std::invalid_argument("train: no training samples");
    const auto empty = std::count_if(training.begin(), training.end(), [](const Sample<T>& s) {
        return std::none_of(s.target.begin(), s.target.end(), [](std::uint8_t v) { return v != 0; });
    });
    if (empty > 0)
        log(LogLevel::warn, cat("train: ", empty, " of ", training.size(),
                                " samples have no foreground voxels; their weighted loss is zero"));
    using clock = std::chrono::steady_clock;
    TrainResult<T> result;
    ModelParams<T> params = std::move(init);
    Adam<T> adam(tc.adam);
    std::vector<double> accuracies;
    std::vector<std::size_t> order(training.size());
    for (std::size_t epoch = 1; epoch <= tc.max_epochs; ++epoch) {
        const auto t0 = clock::now();
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng rng(derive_seed(tc.seed, epoch));
        shuffle(order, rng);
        const std::uint64_t flip_seed = derive_seed(tc.seed, 0xF11F0000 + epoch);
        double loss_sum = 0;
        std::map<std::string, Tensor<T>> grads;
        std::size_t pending = 0;
        for (std::size_t i = 0; i < order.size(); ++i) {
            const bool flip = tc.augment && flip_coin(flip_seed, order[i]);
            const double loss = loss_and_grads(params, cfg, training[order[i]], flip, grads);
            if (!std::isfinite(loss)) throw NonFiniteError(cat("train: non-finite loss in epoch ", epoch));
            loss_sum += loss;
            if (++pending == tc.batch_size || i + 1 == order.size()) {
                if (pending > 1) {
                    const T inv = T(1) / static_cast<T>(pending);
                    for (auto& [key, g] : grads)
                        for (auto& v : g.values()) v *= inv;
                }
                adam.step(params, grads);
                grads.clear();
                pending = 0;
            }
        }
        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = loss_sum / static_cast<double>(order.size());
        rec.val_accuracy = validation.empty() ? 0.0 : voxel_accuracy(params, cfg, validation);
        rec.seconds = std::chrono::duration<double>(clock::now() - t0).count();
        result.history.push_back(rec);
        accuracies.push_back(rec.val_accuracy);
        if (epoch == 1 || rec.val_accuracy > result.best_accuracy) {
            result.best = params;
            result.best_accuracy = rec.val_accuracy;
            result.best_epoch = epoch;
        }
        if (on_epoch) on_epoch(rec);
        if (early_stop(accuracies, tc.early_stop)) {
            result.stopped_early = true;
            break;
        }
    }
    return result;
}

}  // namespace femseg
