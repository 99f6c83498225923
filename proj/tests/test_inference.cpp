#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <deque>

#include "femseg/inference.hpp"
#include "femseg/phantom.hpp"

using namespace femseg;

namespace {

Grid cube(std::size_t n) {
    Grid g;
    g.extents = {n, n, n};
    return g;
}

MaskVolume random_mask(std::uint64_t seed, std::size_t n, double density) {
    Rng rng(seed);
    MaskVolume m(cube(n));
    for (auto& v : m.values) v = rng.uniform() < density;
    return m;
}

// Breadth-first 26-connected labelling written independently of the library.
std::vector<std::size_t> flood_fill_sizes(const MaskVolume& m, std::vector<int>& label) {
    const int n = static_cast<int>(m.grid.nx());
    label.assign(m.values.size(), 0);
    std::vector<std::size_t> sizes;
    for (int z = 0; z < n; ++z)
        for (int y = 0; y < n; ++y)
            for (int x = 0; x < n; ++x) {
                const auto at = [n](int a, int b, int c) { return static_cast<std::size_t>((c * n + b) * n + a); };
                if (!m.values[at(x, y, z)] || label[at(x, y, z)]) continue;
                const int id = static_cast<int>(sizes.size()) + 1;
                std::deque<std::array<int, 3>> queue{{x, y, z}};
                label[at(x, y, z)] = id;
                std::size_t size = 0;
                while (!queue.empty()) {
                    const auto [a, b, c] = queue.front();
                    queue.pop_front();
                    ++size;
                    for (int dz = -1; dz <= 1; ++dz)
                        for (int dy = -1; dy <= 1; ++dy)
                            for (int dx = -1; dx <= 1; ++dx) {
                                const int p = a + dx, q = b + dy, r = c + dz;
                                if (p < 0 || q < 0 || r < 0 || p >= n || q >= n || r >= n) continue;
                                if (m.values[at(p, q, r)] && !label[at(p, q, r)]) {
                                    label[at(p, q, r)] = id;
                                    queue.push_back({p, q, r});
                                }
                            }
                }
                sizes.push_back(size);
            }
    return sizes;
}

struct ConstantNet {
    using scalar = double;
    SizePair sizes;
    double p;
    Tensor<double> operator()(const Tensor<double>& x) const {
        EXPECT_EQ(x.extent(2), sizes.input);
        Tensor<double> out({1, 2, sizes.output, sizes.output}, p);
        std::fill(out.data(), out.data() + sizes.output * sizes.output, 1 - p);
        return out;
    }
};

// Reports which input pixel each output pixel of a patch came from.
struct WhereNet {
    using scalar = double;
    SizePair sizes;
    Tensor<double> operator()(const Tensor<double>& x) const {
        const std::size_t m = (sizes.input - sizes.output) / 2, o = sizes.output;
        Tensor<double> out({1, 2, o, o});
        for (std::size_t y = 0; y < o; ++y)
            for (std::size_t i = 0; i < o; ++i) out[o * o + y * o + i] = x[(y + m) * sizes.input + i + m];
        return out;
    }
};

}  // namespace

// --- mirror padding ---------------------------------------------------------

TEST(MirrorPad, ReflectsWithoutRepeatingTheBorder) {
    Tensor<double> x({1, 1, 3}, std::vector<double>{1, 2, 3});
    const auto p = mirror_pad(x, {{2, 0}});
    EXPECT_EQ(std::vector<double>(p.values().begin(), p.values().end()), (std::vector<double>{3, 2, 1, 2, 3}));
    const auto q = mirror_pad(x, {{1, 2}});
    EXPECT_EQ(std::vector<double>(q.values().begin(), q.values().end()), (std::vector<double>{2, 1, 2, 3, 2, 1}));
}

TEST(MirrorPad, ZeroMarginIsIdentity) {
    Tensor<double> x({1, 2, 3, 4});
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = static_cast<double>(i);
    EXPECT_EQ(mirror_pad(x, {{0, 0}, {0, 0}}), x);
}

TEST(MirrorPad, MatchesReflectionDefinitionIn2D) {
    const std::size_t H = 5, W = 4;
    Tensor<double> x({1, 2, H, W});
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = static_cast<double>(i * 7 % 13);
    const Margin my{3, 2}, mx{1, 3};
    const auto p = mirror_pad(x, {my, mx});
    ASSERT_EQ(p.shape(), (Shape{1, 2, H + 5, W + 4}));
    auto reflect = [](long i, long n) {
        while (i < 0 || i >= n) i = i < 0 ? -i : 2 * (n - 1) - i;
        return i;
    };
    for (std::size_t c = 0; c < 2; ++c)
        for (std::size_t y = 0; y < H + 5; ++y)
            for (std::size_t i = 0; i < W + 4; ++i) {
                const long sy = reflect(static_cast<long>(y) - 3, H), sx = reflect(static_cast<long>(i) - 1, W);
                EXPECT_EQ(p[(c * (H + 5) + y) * (W + 4) + i], x[(c * H + sy) * W + sx]);
            }
    // The original window is untouched.
    for (std::size_t c = 0; c < 2; ++c)
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t i = 0; i < W; ++i)
                EXPECT_EQ(p[(c * (H + 5) + y + 3) * (W + 4) + i + 1], x[(c * H + y) * W + i]);
}

TEST(MirrorPad, MarginMustBeSmallerThanExtent) {
    Tensor<double> x({1, 1, 3});
    EXPECT_THROW(mirror_pad(x, {{3, 0}}), ShapeError);
}

// --- tiling -----------------------------------------------------------------

TEST(Tiling, ThreeOverlappingWindowsCover512) {
    const auto plan = plan_tiles({512, 512}, {396, 380});
    EXPECT_EQ(plan.starts[0], (std::vector<std::size_t>{0, 66, 132}));
    std::vector<int> covered(512, 0);
    for (std::size_t s : plan.starts[0])
        for (std::size_t i = s; i < s + 380; ++i) ++covered[i];
    for (int c : covered) EXPECT_GE(c, 1);
    EXPECT_EQ(*std::max_element(covered.begin(), covered.end()), 3);
    EXPECT_EQ(plan.count[256 * 512 + 256], 9);
    EXPECT_EQ(plan.count[0], 1);
}

TEST(Tiling, RefusesImagesBeyondThreeOutputs) {
    EXPECT_THROW(plan_tiles({100, 40}, {48, 32}), ShapeError);
    EXPECT_THROW(plan_tiles({10, 10}, {48, 32}), ShapeError);
}

TEST(Tiling, OutputCoveringImageGivesOneTile) {
    const SizePair s = valid_sizes(2, 64);
    const auto plan = plan_tiles({64, 64}, s);
    EXPECT_EQ(plan.patches(), 1u);
    for (auto c : plan.count) EXPECT_EQ(c, 1);
}

TEST(Tiling, RandomAdmissiblePlansCoverEveryPixel) {
    Rng rng(77);
    std::size_t checked = 0;
    for (int c = 0; c < 300; ++c) {
        // Smallest image whose mirror margins stay inside it, up to three outputs.
        std::size_t L, half, lo;
        SizePair s;
        do {
            L = 1 + rng.index(3);
            s = valid_sizes(L, 4 + rng.index(60));
            half = (s.input - s.output) / 2;
            lo = std::max(half + 1, (s.input - half) / 2 + 1);
        } while (lo > 3 * s.output);
        auto extent = [&] { return lo + rng.index(3 * s.output - lo + 1); };
        const std::array<std::size_t, 2> image{extent(), extent()};
        const TilingPlan plan = plan_tiles(image, s);
        ++checked;
        std::vector<int> hits(image[0] * image[1], 0);
        for (std::size_t sy : plan.starts[0])
            for (std::size_t sx : plan.starts[1])
                for (std::size_t y = sy; y < std::min(image[0], sy + s.output); ++y)
                    for (std::size_t x = sx; x < std::min(image[1], sx + s.output); ++x) ++hits[y * image[1] + x];
        for (std::size_t i = 0; i < hits.size(); ++i) {
            ASSERT_GE(hits[i], 1);
            ASSERT_EQ(hits[i], plan.count[i]);
        }
        EXPECT_LE(plan.patches(), 9u);
    }
    EXPECT_EQ(checked, 300u);
}

TEST(Tiling, ConstantNetworkAveragesToConstant) {
    const SizePair s = valid_sizes(2, 20);
    const auto plan = plan_tiles({50, 37}, s);
    EXPECT_GT(plan.patches(), 1u);
    Tensor<double> img({1, 3, 50, 37}, 0.3);
    const auto map = predict_tiled(ConstantNet{s, 0.625}, img, plan);
    for (double v : map) EXPECT_NEAR(v, 0.625, 1e-15);
}

TEST(Tiling, PatchesLandOnTheirOwnPixels) {
    const SizePair s = valid_sizes(1, 16);
    const auto plan = plan_tiles({40, 29}, s);
    Tensor<double> img({1, 3, 40, 29});
    for (std::size_t i = 0; i < 40 * 29; ++i) img[i] = static_cast<double>(i);
    const auto map = predict_tiled(WhereNet{s}, img, plan);
    for (std::size_t i = 0; i < map.size(); ++i) EXPECT_DOUBLE_EQ(map[i], static_cast<double>(i));
}

// --- whole-volume prediction ------------------------------------------------

TEST(Predict3d, PreservesGridAndIsDeterministic) {
    const UNetConfig cfg = UNetConfig::volumetric(2, 3);
    const auto params = build<double>(cfg, 1);
    Grid g;
    g.extents = {64, 64, 32};
    Volume v(g);
    Rng rng(2);
    for (auto& x : v.values) x = static_cast<float>(rng.normal());
    const auto a = predict_3d(params, cfg, v);
    EXPECT_EQ(a.grid, v.grid);
    EXPECT_EQ(predict_3d(params, cfg, v), a);
}

TEST(Predict3d, PadsAndCropsOddExtents) {
    const UNetConfig cfg = UNetConfig::volumetric(2, 2);
    const auto params = build<double>(cfg, 4);
    Grid g;
    g.extents = {13, 10, 7};
    Volume v(g, 0.5f);
    const auto map = predict_3d(params, cfg, v);
    EXPECT_EQ(map.grid, g);
    for (float p : map.values) {
        EXPECT_TRUE(std::isfinite(p));
        EXPECT_GE(p, 0.0f);
        EXPECT_LE(p, 1.0f);
    }
}

TEST(Predict2d, PhantomMapIsProbabilityOnSourceGrid) {
    PhantomOptions o;
    o.extents = {48, 40, 4};
    const auto ph = generate_phantom(3, o);
    const UNetConfig cfg = UNetConfig::planar(2, 1);
    const auto params = build<double>(cfg, 6);
    const auto map = predict_2d(params, cfg, normalize(ph.image));
    EXPECT_EQ(map.grid, ph.image.grid);
    for (float p : map.values) {
        EXPECT_GE(p, 0.0f);
        EXPECT_LE(p, 1.0f);
    }
    EXPECT_THROW(predict_3d(params, cfg, ph.image), std::invalid_argument);
}

// --- binarize and components ------------------------------------------------

TEST(Binarize, StrictThreshold) {
    Grid g;
    g.extents = {4, 1, 1};
    ProbabilityMap m(g, std::vector<float>{0.0f, 0.2f, 0.6f, 1.0f});
    EXPECT_EQ(binarize(m, 0).values, (std::vector<std::uint8_t>{0, 1, 1, 1}));
    EXPECT_EQ(binarize(m, 1).values, (std::vector<std::uint8_t>{0, 0, 0, 0}));
    ProbabilityMap one(g, 0.1f);
    one.values[2] = 0.6f;
    EXPECT_EQ(binarize(one, 0.5).values, (std::vector<std::uint8_t>{0, 0, 1, 0}));
    EXPECT_THROW(binarize(m, 1.5), std::invalid_argument);
}

TEST(LargestComponent, KeepsOnlyTheHundredVoxelCluster) {
    MaskVolume m(cube(16));
    for (std::size_t z = 0; z < 4; ++z)
        for (std::size_t y = 0; y < 5; ++y)
            for (std::size_t x = 0; x < 5; ++x) m.at(x, y, z) = 1;  // 100
    for (std::size_t x = 9; x < 14; ++x) m.at(x, 12, 12) = 1;     // 5
    for (std::size_t z = 0; z < 3; ++z) m.at(15, 15, 10 + z) = 1;  // 3
    const auto c = label_components(m);
    auto sizes = c.sizes;
    std::sort(sizes.begin(), sizes.end());
    EXPECT_EQ(sizes, (std::vector<std::size_t>{3, 5, 100}));
    const auto kept = largest_component(m);
    std::size_t n = 0;
    for (std::size_t z = 0; z < 16; ++z)
        for (std::size_t y = 0; y < 16; ++y)
            for (std::size_t x = 0; x < 16; ++x) {
                n += kept.at(x, y, z);
                if (kept.at(x, y, z)) EXPECT_TRUE(x < 5 && y < 5 && z < 4);
            }
    EXPECT_EQ(n, 100u);
}

TEST(LargestComponent, SingleComponentAndEmptyAreUnchanged) {
    MaskVolume m(cube(6));
    for (std::size_t i = 0; i < 6; ++i) m.at(i, i, i) = 1;  // diagonal: 26-connected
    EXPECT_EQ(largest_component(m), m);
    const MaskVolume empty(cube(4));
    EXPECT_EQ(largest_component(empty), empty);
}

TEST(LargestComponent, AgreesWithFloodFillOracle) {
    for (std::uint64_t s = 0; s < 100; ++s) {
        const auto m = random_mask(s, 16, 0.05 + 0.2 * static_cast<double>(s % 5) / 4);
        std::vector<int> label;
        const auto oracle_sizes = flood_fill_sizes(m, label);
        const auto c = label_components(m);
        ASSERT_EQ(c.sizes, oracle_sizes) << "seed " << s;
        if (oracle_sizes.empty()) continue;
        const int best = static_cast<int>(std::max_element(oracle_sizes.begin(), oracle_sizes.end()) - oracle_sizes.begin()) + 1;
        const auto kept = largest_component(m);
        for (std::size_t i = 0; i < m.values.size(); ++i) ASSERT_EQ(kept.values[i], label[i] == best ? 1 : 0);
    }
}
