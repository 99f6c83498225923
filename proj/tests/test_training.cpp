#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "femseg/training.hpp"
#include "gradcheck.hpp"

using namespace femseg;

namespace {

// Straight-line evaluation of the class-rebalanced loss, counting classes itself.
double loss_oracle(const std::vector<double>& p, const std::vector<int>& y) {
    const double n = static_cast<double>(p.size());
    double np = 0;
    for (int v : y) np += v;
    const double nb = n - np;
    double total = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (y[i]) total += (nb / n) * std::log(std::max(p[i], 1e-7));
        else total += (np / n) * std::log(std::max(1 - p[i], 1e-7));
    }
    return -total / n;
}

Manifest subjects(std::size_t left, std::size_t right) {
    Manifest m;
    for (std::size_t i = 0; i < left + right; ++i)
        m.push_back({cat("s", i), i < left ? Laterality::left : Laterality::right, {}, {}, std::nullopt});
    return m;
}

std::vector<double> flat_history(std::size_t n, std::size_t flat_from, double step = 1e-3) {
    std::vector<double> h;
    for (std::size_t e = 1; e <= n; ++e) h.push_back(0.5 + step * static_cast<double>(std::min(e, flat_from)));
    return h;
}

// Epoch (1-based) at which the rule first fires when fed the history one epoch at a time.
std::size_t stop_epoch(const std::vector<double>& h) {
    for (std::size_t n = 1; n <= h.size(); ++n)
        if (early_stop(std::span<const double>(h.data(), n))) return n;
    return 0;
}

}  // namespace

// --- loss -------------------------------------------------------------------

TEST(WeightedCrossEntropy, MatchesScalarLoopOracle) {
    Rng rng(101);
    for (int c = 0; c < 100; ++c) {
        const std::size_t n = 1 + rng.index(40);
        std::vector<double> p(n);
        std::vector<int> y(n);
        std::vector<std::uint8_t> y8(n);
        for (std::size_t i = 0; i < n; ++i) {
            p[i] = rng.uniform();
            y[i] = rng.uniform() < 0.3 ? 1 : 0;
            y8[i] = static_cast<std::uint8_t>(y[i]);
        }
        if (c % 10 == 0) p[0] = c % 20 == 0 ? 0.0 : 1.0;  // exercise the clamp
        const double got = weighted_cross_entropy(std::span<const double>(p), std::span<const std::uint8_t>(y8));
        EXPECT_NEAR(got, loss_oracle(p, y), 1e-12) << "case " << c;
    }
}

TEST(WeightedCrossEntropy, SymmetricCaseIsHalfLnTwo) {
    const std::vector<double> p{0.5, 0.5};
    const std::vector<std::uint8_t> y{1, 0};
    EXPECT_NEAR(weighted_cross_entropy(std::span<const double>(p), std::span<const std::uint8_t>(y)), std::log(2.0) / 2,
                1e-15);
}

TEST(WeightedCrossEntropy, PerfectPredictionIsZero) {
    const std::vector<double> p{1, 0, 0, 1, 0};
    const std::vector<std::uint8_t> y{1, 0, 0, 1, 0};
    EXPECT_EQ(weighted_cross_entropy(std::span<const double>(p), std::span<const std::uint8_t>(y)), 0.0);
}

TEST(WeightedCrossEntropy, WeightsAreOppositeClassFractions) {
    const std::vector<std::uint8_t> y{1, 0, 0, 0};
    const auto w = loss_weights(std::span<const std::uint8_t>(y));
    EXPECT_EQ(w.np, 1u);
    EXPECT_EQ(w.nb, 3u);
    EXPECT_DOUBLE_EQ(w.foreground_weight(), 0.75);
    EXPECT_DOUBLE_EQ(w.background_weight(), 0.25);
}

TEST(WeightedCrossEntropy, RejectsLengthMismatch) {
    const std::vector<double> p{0.5};
    const std::vector<std::uint8_t> y{1, 0};
    EXPECT_THROW(weighted_cross_entropy(std::span<const double>(p), std::span<const std::uint8_t>(y)), ShapeError);
}

TEST(WeightedCrossEntropy, TapeOpMatchesScalarAndFiniteDifferences) {
    Rng rng(5);
    const auto logits = oracle::random_tensor({1, 2, 3, 4}, rng, -2, 2);
    std::vector<std::uint8_t> y(12);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = i % 3 == 0;

    Tape<double> tape(false);
    const Var probs = channel_softmax(tape, tape.constant(logits));
    const auto& pv = tape.value(probs);
    const std::vector<double> fg(pv.data() + 12, pv.data() + 24);
    const double expected = weighted_cross_entropy(std::span<const double>(fg), std::span<const std::uint8_t>(y));
    EXPECT_NEAR(tape.value(weighted_cross_entropy(tape, probs, y))[0], expected, 1e-14);

    const auto r = oracle::grad_check({logits}, [&](Tape<double>& t, const std::vector<Var>& v) {
        return weighted_cross_entropy(t, channel_softmax(t, v[0]), y);
    });
    EXPECT_LT(r.max_rel, 1e-6);
}

// --- Adam -------------------------------------------------------------------

TEST(Adam, FirstUnitGradientStepMovesByLearningRate) {
    std::vector<double> w{1.0, -2.0, 0.5}, g(3, 1.0), m(3, 0.0), v(3, 0.0);
    AdamConfig cfg;
    adam_update(std::span<double>(w), std::span<const double>(g), std::span<double>(m), std::span<double>(v), 1, cfg);
    EXPECT_NEAR(w[0], 1.0 - cfg.learning_rate, 1e-12);
    EXPECT_NEAR(w[1], -2.0 - cfg.learning_rate, 1e-12);
    EXPECT_NEAR(w[2], 0.5 - cfg.learning_rate, 1e-12);
}

TEST(Adam, ZeroGradientKeepsParametersAndDecaysMoments) {
    std::vector<double> w{1.0, 2.0}, g(2, 0.0), m{0.4, -0.2}, v{0.0, 0.0};
    adam_update(std::span<double>(w), std::span<const double>(g), std::span<double>(m), std::span<double>(v), 3, {});
    EXPECT_NEAR(m[0], 0.36, 1e-15);
    EXPECT_NEAR(m[1], -0.18, 1e-15);
    // A zero second moment with a nonzero first moment still moves w; use zero m to check invariance.
    std::vector<double> w2{1.0, 2.0}, m2(2, 0.0), v2{0.5, 0.25};
    adam_update(std::span<double>(w2), std::span<const double>(g), std::span<double>(m2), std::span<double>(v2), 3, {});
    EXPECT_EQ(w2, (std::vector<double>{1.0, 2.0}));
    EXPECT_NEAR(v2[0], 0.5 * 0.999, 1e-15);
}

TEST(Adam, ConvergesOnConvexQuadratic) {
    // f(w) = |w|^2 / 2 has gradient w.
    AdamConfig cfg;
    cfg.learning_rate = 0.1;
    std::vector<double> w{1.0, -0.7, 0.3, 2.0}, m(4, 0.0), v(4, 0.0);
    auto norm = [](const std::vector<double>& x) {
        double s = 0;
        for (double e : x) s += e * e;
        return std::sqrt(s);
    };
    const double initial = norm(w);
    for (std::size_t t = 1; t <= 200; ++t) {
        const std::vector<double> g = w;
        adam_update(std::span<double>(w), std::span<const double>(g), std::span<double>(m), std::span<double>(v), t, cfg);
    }
    EXPECT_LT(norm(w), 1e-3 * initial);
}

TEST(Adam, NonFiniteGradientLeavesParametersUntouched) {
    ModelParams<double> p;
    p.tensors.emplace("a", Tensor<double>({2}, 1.0));
    p.tensors.emplace("b", Tensor<double>({2}, 1.0));
    std::map<std::string, Tensor<double>> g;
    g.emplace("a", Tensor<double>({2}, 1.0));
    g.emplace("b", Tensor<double>({2}, std::vector<double>{1.0, std::nan("")}));
    Adam<double> adam;
    EXPECT_THROW(adam.step(p, g), NonFiniteError);
    EXPECT_EQ(p.at("a")[0], 1.0);
    EXPECT_EQ(adam.steps(), 0u);
}

// --- augmentation -----------------------------------------------------------

TEST(AugmentFlip, ForcedFlipTwiceIsIdentity) {
    Grid g;
    g.extents = {5, 3, 2};
    Volume img(g);
    MaskVolume mask(g);
    for (std::size_t i = 0; i < img.values.size(); ++i) {
        img.values[i] = static_cast<float>(i);
        mask.values[i] = i % 4 == 0;
    }
    const auto once = augment_flip(img, mask, 1, 0, FlipMode::always);
    EXPECT_NE(once.first, img);
    const auto twice = augment_flip(once.first, once.second, 1, 0, FlipMode::always);
    EXPECT_EQ(twice.first, img);
    EXPECT_EQ(twice.second, mask);
}

TEST(AugmentFlip, ImageAndMaskStayPaired) {
    Grid g;
    g.extents = {6, 2, 1};
    Volume img(g);
    MaskVolume mask(g);
    for (std::size_t y = 0; y < 2; ++y)
        for (std::size_t x = 0; x < 6; ++x) {
            img.at(x, y, 0) = static_cast<float>(x);
            mask.at(x, y, 0) = x < 2;
        }
    for (std::uint64_t i = 0; i < 200; ++i) {
        const auto [a, m] = augment_flip(img, mask, 9, i);
        for (std::size_t k = 0; k < a.values.size(); ++k) ASSERT_EQ(m.values[k], a.values[k] < 2 ? 1 : 0);
    }
}

TEST(AugmentFlip, RateIsOneHalf) {
    std::size_t flips = 0;
    for (std::uint64_t i = 0; i < 10000; ++i) flips += flip_coin(2024, i);
    EXPECT_NEAR(flips / 10000.0, 0.5, 0.02);
}

// --- early stopping ---------------------------------------------------------

TEST(EarlyStop, SteadyImprovementNeverStops) { EXPECT_EQ(stop_epoch(flat_history(200, 1000)), 0u); }

TEST(EarlyStop, ConstantFromEpochTwentyFiveStopsAtForty) { EXPECT_EQ(stop_epoch(flat_history(100, 25)), 40u); }

TEST(EarlyStop, ShortHistoryIsFalse) { EXPECT_FALSE(early_stop(std::vector<double>(5, 0.9))); }

TEST(EarlyStop, NeverBeforeEpochThirtyOne) {
    Rng rng(3);
    for (int c = 0; c < 200; ++c) {
        std::vector<double> h(30);
        for (auto& v : h) v = c % 2 ? 0.7 : rng.uniform();
        for (std::size_t n = 1; n <= 30; ++n) EXPECT_FALSE(early_stop(std::span<const double>(h.data(), n)));
    }
}

TEST(EarlyStop, ImprovementBelowToleranceCountsAsFlat) {
    EXPECT_EQ(stop_epoch(flat_history(100, 25, 1e-6)), 40u);
    auto h = flat_history(100, 25);
    h[44] += 0.01;  // epoch 45 improves after a flat stretch
    EXPECT_EQ(stop_epoch(h), 40u);
}

// --- folds ------------------------------------------------------------------

TEST(StratifiedKFold, EightySixSubjectsGiveTwentyOneAndTwentyTwo) {
    const auto split = stratified_kfold(subjects(45, 41), 4, 7);
    std::vector<std::size_t> sizes;
    for (const auto& f : split.folds) sizes.push_back(f.size());
    std::sort(sizes.begin(), sizes.end());
    EXPECT_EQ(sizes, (std::vector<std::size_t>{21, 21, 22, 22}));
}

TEST(StratifiedKFold, BalancedStrataSpreadEvenly) {
    const Manifest m = subjects(4, 4);
    const auto split = stratified_kfold(m, 4, 11);
    for (const auto& f : split.folds) {
        ASSERT_EQ(f.size(), 2u);
        int left = 0;
        for (const auto& id : f) left += std::stoi(id.substr(1)) < 4;
        EXPECT_EQ(left, 1);
    }
}

TEST(StratifiedKFold, FoldsPartitionTheSubjects) {
    const Manifest m = subjects(13, 7);
    const auto split = stratified_kfold(m, 4, 3);
    std::multiset<std::string> all;
    for (const auto& f : split.folds) all.insert(f.begin(), f.end());
    ASSERT_EQ(all.size(), m.size());
    for (const auto& e : m) EXPECT_EQ(all.count(e.subject), 1u);
    EXPECT_EQ(stratified_kfold(m, 4, 3).folds, split.folds);
}

TEST(StratifiedKFold, SingleFoldIsRejected) { EXPECT_THROW(stratified_kfold(subjects(3, 3), 1, 1), std::invalid_argument); }

TEST(FoldSplit, ManifestFoldsTakePrecedence) {
    Manifest m = subjects(2, 2);
    for (std::size_t i = 0; i < m.size(); ++i) m[i].fold = static_cast<int>(i % 2);
    const auto split = fold_split(m, 2, 1);
    EXPECT_EQ(split.folds[0], (std::vector<std::string>{"s0", "s2"}));
    m[0].fold = 5;
    EXPECT_THROW(fold_split(m, 2, 1), FormatError);
}

// --- training loop ----------------------------------------------------------

namespace {

std::vector<Sample<double>> toy_samples(std::uint64_t seed, std::size_t count) {
    // 2D valid network, L=1: input 20x20 -> output 4x4. Foreground where the
    // center pixel of the first channel is bright.
    Rng rng(seed);
    std::vector<Sample<double>> out;
    for (std::size_t s = 0; s < count; ++s) {
        Sample<double> sm{Tensor<double>({1, 3, 20, 20}), std::vector<std::uint8_t>(16)};
        for (auto& v : sm.input.values()) v = rng.normal() * 0.1;
        for (std::size_t y = 0; y < 4; ++y)
            for (std::size_t x = 0; x < 4; ++x) {
                const bool fg = rng.uniform() < 0.4;
                sm.target[y * 4 + x] = fg;
                for (std::size_t dy = 0; dy < 4; ++dy)
                    for (std::size_t dx = 0; dx < 4; ++dx)
                        for (std::size_t c = 0; c < 3; ++c)
                            sm.input[(c * 20 + 8 + y + dy / 4) * 20 + 8 + x + dx / 4] += fg ? 1.0 : -1.0;
            }
        out.push_back(std::move(sm));
    }
    return out;
}

}  // namespace

TEST(Train, DeterministicAndKeepsBestEpoch) {
    const UNetConfig cfg = UNetConfig::planar(2, 1);
    ASSERT_EQ(output_size(20, 1), std::optional<std::size_t>(4));
    TrainConfig tc;
    tc.adam.learning_rate = 1e-2;
    tc.max_epochs = 6;
    tc.seed = 4;
    const auto data = toy_samples(1, 6);
    const std::vector<Sample<double>> val(data.begin(), data.begin() + 2);
    const auto a = train(build<double>(cfg, 1), cfg, tc, data, val);
    const auto b = train(build<double>(cfg, 1), cfg, tc, data, val);
    EXPECT_EQ(a.best, b.best);
    ASSERT_EQ(a.history.size(), 6u);
    double best = 0;
    for (const auto& r : a.history) best = std::max(best, r.val_accuracy);
    EXPECT_EQ(a.best_accuracy, best);
    EXPECT_EQ(a.history[a.best_epoch - 1].val_accuracy, best);
    EXPECT_DOUBLE_EQ(voxel_accuracy(a.best, cfg, val), best);
    EXPECT_LT(a.history.back().train_loss, a.history.front().train_loss);
}

TEST(Train, BatchGradientIsTheMeanOfSampleGradients) {
    const UNetConfig cfg = UNetConfig::planar(2, 1);
    const auto data = toy_samples(2, 2);
    const auto params = build<double>(cfg, 3);
    std::map<std::string, Tensor<double>> g0, g1, both;
    loss_and_grads(params, cfg, data[0], false, g0);
    loss_and_grads(params, cfg, data[1], false, g1);
    loss_and_grads(params, cfg, data[0], false, both);
    loss_and_grads(params, cfg, data[1], false, both);
    for (const auto& [key, g] : both)
        for (std::size_t i = 0; i < g.size(); ++i) EXPECT_NEAR(g[i], g0.at(key)[i] + g1.at(key)[i], 1e-12);
}

TEST(Train, FlippedSampleEqualsMirroredInputs) {
    const UNetConfig cfg = UNetConfig::planar(2, 1);
    const auto data = toy_samples(3, 1);
    const auto params = build<double>(cfg, 5);
    Sample<double> mirrored = data[0];
    flip_last_axis(mirrored.input);
    for (std::size_t r = 0; r < 4; ++r) std::reverse(mirrored.target.begin() + r * 4, mirrored.target.begin() + r * 4 + 4);
    std::map<std::string, Tensor<double>> a, b;
    const double la = loss_and_grads(params, cfg, data[0], true, a);
    const double lb = loss_and_grads(params, cfg, mirrored, false, b);
    EXPECT_EQ(la, lb);
    for (const auto& [key, g] : a) EXPECT_EQ(g, b.at(key));
}

TEST(TrainConfig, RejectsInvalidSettings) {
    TrainConfig tc;
    tc.batch_size = 0;
    EXPECT_THROW(tc.validate(), std::invalid_argument);
    tc = {};
    tc.adam.beta1 = 1.0;
    EXPECT_THROW(tc.validate(), std::invalid_argument);
}
