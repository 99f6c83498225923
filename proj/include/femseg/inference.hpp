#pragma once

// Full-image probability maps: mirrored 9-patch averaging for the unpadded
// 2D network, a single padded pass for the 3D network, thresholding and
// largest-component filtering.

#include <algorithm>
#include <array>
#include <cstdint>
#include <vector>

#include "femseg/data.hpp"
#include "femseg/unet.hpp"

namespace femseg {

/// Reflection about the border voxel without repeating it: index -1 maps to 1.
inline std::size_t reflect_index(long i, std::size_t n) {
    const long m = static_cast<long>(n);
    if (i < 0) i = -i;
    if (i >= m) i = 2 * (m - 1) - i;
    return static_cast<std::size_t>(i);
}

struct Margin {
    std::size_t before = 0, after = 0;
};

/// Mirror-pads the spatial axes of a (batch, channels, spatial...) tensor.
template <class T>
Tensor<T> mirror_pad(const Tensor<T>& x, const std::vector<Margin>& margins) {
    if (x.rank() < 3) throw ShapeError(cat("mirror_pad: expected (batch, channels, spatial...), got ", to_string(x.shape())));
    const std::size_t spatial = x.rank() - 2;
    if (margins.size() != spatial)
        throw ShapeError(cat("mirror_pad: ", margins.size(), " margins for ", spatial, " spatial axes"));
    Shape out_shape = x.shape();
    for (std::size_t a = 0; a < spatial; ++a) {
        const std::size_t n = x.extent(2 + a);
        if (margins[a].before >= n || margins[a].after >= n)
            throw ShapeError(cat("mirror_pad: margin ", std::max(margins[a].before, margins[a].after),
                                 " must be smaller than extent ", n, " on spatial axis ", 2 + a));
        out_shape[2 + a] = n + margins[a].before + margins[a].after;
    }
    Tensor<T> out(out_shape);
    // Source index per output position, per spatial axis.
    std::vector<std::vector<std::size_t>> src(spatial);
    for (std::size_t a = 0; a < spatial; ++a) {
        src[a].resize(out_shape[2 + a]);
        for (std::size_t i = 0; i < src[a].size(); ++i)
            src[a][i] = reflect_index(static_cast<long>(i) - static_cast<long>(margins[a].before), x.extent(2 + a));
    }
    const std::size_t planes = x.extent(0) * x.extent(1);
    const std::size_t in_plane = numel(Shape(x.shape().begin() + 2, x.shape().end()));
    const std::size_t out_plane = numel(Shape(out_shape.begin() + 2, out_shape.end()));
    std::vector<std::size_t> idx(spatial, 0);
    for (std::size_t o = 0; o < out_plane; ++o) {
        std::size_t s = 0;
        for (std::size_t a = 0; a < spatial; ++a) s = s * x.extent(2 + a) + src[a][idx[a]];
        for (std::size_t p = 0; p < planes; ++p) out[p * out_plane + o] = x[p * in_plane + s];
        for (std::size_t a = spatial; a-- > 0;) {
            if (++idx[a] < out_shape[2 + a]) break;
            idx[a] = 0;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Tiling

/// Overlapping patches of an unpadded network over a mirrored 2D image.
struct TilingPlan {
    SizePair net;                                  // network input / output extent per axis
    std::array<std::size_t, 2> image{};            // (rows, columns)
    std::array<Margin, 2> margin{};                // mirror margins per axis
    std::array<std::vector<std::size_t>, 2> starts;  // patch starts on the mirrored image
    std::vector<std::uint16_t> count;              // patches covering each image pixel

    std::size_t patches() const { return starts[0].size() * starts[1].size(); }
};

/// Three sorted starts per axis (0, the midpoint, the last), deduplicated. A
/// network whose output is at least the image extent gives one tile.
inline TilingPlan plan_tiles(std::array<std::size_t, 2> image, SizePair net) {
    if (net.output == 0 || net.input < net.output || (net.input - net.output) % 2 != 0)
        throw ShapeError(cat("plan_tiles: inconsistent network sizes ", net.input, " -> ", net.output));
    TilingPlan plan;
    plan.net = net;
    plan.image = image;
    const std::size_t half = (net.input - net.output) / 2;
    for (int a = 0; a < 2; ++a) {
        const std::size_t n = image[a];
        if (n == 0) throw ShapeError("plan_tiles: empty image axis");
        auto& st = plan.starts[a];
        if (net.output >= n) {
            plan.margin[a] = {half, net.input - n - half};
            st = {0};
        } else {
            if (n > 3 * net.output)
                throw ShapeError(cat("plan_tiles: image extent ", n, " needs more than 3 patches of output ", net.output));
            plan.margin[a] = {half, half};
            const std::size_t last = n - net.output;
            st = {0, last / 2, last};
            st.erase(std::unique(st.begin(), st.end()), st.end());
        }
        if (plan.margin[a].before >= n || plan.margin[a].after >= n)
            throw ShapeError(cat("plan_tiles: mirror margin ", std::max(plan.margin[a].before, plan.margin[a].after),
                                 " exceeds image extent ", n));
    }
    plan.count.assign(image[0] * image[1], 0);
    for (std::size_t sy : plan.starts[0])
        for (std::size_t sx : plan.starts[1])
            for (std::size_t y = sy; y < std::min(image[0], sy + net.output); ++y)
                for (std::size_t x = sx; x < std::min(image[1], sx + net.output); ++x) ++plan.count[y * image[1] + x];
    return plan;
}

/// Per-axis plan for a 2D network of depth L on an image: patches whose output
/// covers about half the image, so that three per axis overlap.
inline TilingPlan plan_for_network(std::array<std::size_t, 2> image, std::size_t levels) {
    const std::size_t longest = std::max(image[0], image[1]);
    return plan_tiles(image, valid_sizes(levels, (longest + 1) / 2));
}

/// Copies a (1, C, in, in) window starting at (y0, x0) out of a (1, C, H, W) tensor.
template <class T>
Tensor<T> crop_window(const Tensor<T>& x, std::size_t y0, std::size_t x0, std::size_t h, std::size_t w) {
    const std::size_t c = x.extent(1), H = x.extent(2), W = x.extent(3);
    if (y0 + h > H || x0 + w > W) throw ShapeError("crop_window: window outside the image");
    Tensor<T> out({1, c, h, w});
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < h; ++y)
            std::copy_n(x.data() + (ch * H + y0 + y) * W + x0, w, out.data() + (ch * h + y) * w);
    return out;
}

/// Foreground probability of a slice-triplet input, averaged over the plan's patches.
template <class Net>
std::vector<double> predict_tiled(const Net& net, const Tensor<typename Net::scalar>& triplet, const TilingPlan& plan) {
    using T = typename Net::scalar;
    const auto padded = mirror_pad(triplet, {plan.margin[0], plan.margin[1]});
    const std::size_t H = plan.image[0], W = plan.image[1], out = plan.net.output;
    std::vector<double> sum(H * W, 0.0);
    for (std::size_t sy : plan.starts[0])
        for (std::size_t sx : plan.starts[1]) {
            const Tensor<T> probs = net(crop_window(padded, sy, sx, plan.net.input, plan.net.input));
            const T* fg = probs.data() + out * out;
            for (std::size_t y = 0; y < out && sy + y < H; ++y)
                for (std::size_t x = 0; x < out && sx + x < W; ++x) sum[(sy + y) * W + sx + x] += fg[y * out + x];
        }
    for (std::size_t i = 0; i < sum.size(); ++i) sum[i] /= plan.count[i];
    return sum;
}

/// A trained network bound to its configuration.
template <class T>
struct Network {
    using scalar = T;
    const ModelParams<T>* params;
    UNetConfig cfg;
    Tensor<T> operator()(const Tensor<T>& x) const { return predict(*params, cfg, x); }
};

/// Slice-triplet network over every slice of a (normalized) volume.
template <class T>
ProbabilityMap predict_2d(const ModelParams<T>& params, const UNetConfig& cfg, const Volume& vol) {
    if (cfg.rank != 2) throw std::invalid_argument(cat("predict_2d: model rank is ", cfg.rank, ", expected 2"));
    if (vol.grid.slices() < 3) throw ShapeError("predict_2d: volume needs at least 3 slices");
    const TilingPlan plan = plan_for_network({vol.grid.ny(), vol.grid.nx()}, cfg.levels);
    const Network<T> net{&params, cfg};
    ProbabilityMap map(vol.grid);
    const std::size_t plane = vol.grid.nx() * vol.grid.ny();
    for (std::size_t s = 0; s < vol.grid.slices(); ++s) {
        const auto p = predict_tiled(net, slice_triplets<T>(vol, s), plan);
        std::transform(p.begin(), p.end(), map.values.begin() + static_cast<std::ptrdiff_t>(s * plane),
                       [](double v) { return static_cast<float>(v); });
    }
    return map;
}

/// Single pass of the padded 3D network; extents that are not multiples of
/// 2^L are zero-padded at the far end and the map is cropped back.
template <class T>
ProbabilityMap predict_3d(const ModelParams<T>& params, const UNetConfig& cfg, const Volume& vol) {
    if (cfg.rank != 3) throw std::invalid_argument(cat("predict_3d: model rank is ", cfg.rank, ", expected 3"));
    const std::size_t unit = std::size_t{1} << cfg.levels;
    auto up = [unit](std::size_t n) { return (n + unit - 1) / unit * unit; };
    const std::size_t nx = vol.grid.nx(), ny = vol.grid.ny(), ns = vol.grid.slices();
    const std::size_t px = up(nx), py = up(ny), ps = up(ns);
    Tensor<T> x({1, 1, ps, py, px});
    for (std::size_t z = 0; z < ns; ++z)
        for (std::size_t y = 0; y < ny; ++y)
            for (std::size_t i = 0; i < nx; ++i) x[(z * py + y) * px + i] = static_cast<T>(vol.at(i, y, z));
    const Tensor<T> probs = predict(params, cfg, x);
    const T* fg = probs.data() + ps * py * px;
    ProbabilityMap map(vol.grid);
    for (std::size_t z = 0; z < ns; ++z)
        for (std::size_t y = 0; y < ny; ++y)
            for (std::size_t i = 0; i < nx; ++i) map.at(i, y, z) = static_cast<float>(fg[(z * py + y) * px + i]);
    return map;
}

template <class T>
ProbabilityMap predict_volume(const ModelParams<T>& params, const UNetConfig& cfg, const Volume& vol) {
    return cfg.rank == 2 ? predict_2d(params, cfg, vol) : predict_3d(params, cfg, vol);
}

/// Voxel is set iff its probability exceeds the threshold.
inline MaskVolume binarize(const ProbabilityMap& map, double threshold) {
    if (!(threshold >= 0 && threshold <= 1)) throw std::invalid_argument(cat("binarize: threshold ", threshold, " outside [0, 1]"));
    MaskVolume out(map.grid);
    for (std::size_t i = 0; i < map.values.size(); ++i) out.values[i] = map.values[i] > threshold ? 1 : 0;
    return out;
}

/// 26-connected component labels in scan order (0 = background) and the size of each label.
struct Components {
    std::vector<std::uint32_t> labels;
    std::vector<std::size_t> sizes;  // sizes[l - 1] for label l
};

inline Components label_components(const MaskVolume& mask) {
    const Grid& g = mask.grid;
    const long nx = static_cast<long>(g.nx()), ny = static_cast<long>(g.ny()), ns = static_cast<long>(g.slices());
    Components c;
    c.labels.assign(mask.values.size(), 0);
    std::vector<std::size_t> stack;
    for (std::size_t start = 0; start < mask.values.size(); ++start) {
        if (!mask.values[start] || c.labels[start]) continue;
        const auto label = static_cast<std::uint32_t>(c.sizes.size() + 1);
        std::size_t size = 0;
        c.labels[start] = label;
        stack.push_back(start);
        while (!stack.empty()) {
            const std::size_t v = stack.back();
            stack.pop_back();
            ++size;
            const long x = static_cast<long>(v) % nx, y = static_cast<long>(v) / nx % ny, z = static_cast<long>(v) / (nx * ny);
            for (long dz = -1; dz <= 1; ++dz)
                for (long dy = -1; dy <= 1; ++dy)
                    for (long dx = -1; dx <= 1; ++dx) {
                        const long xx = x + dx, yy = y + dy, zz = z + dz;
                        if (xx < 0 || yy < 0 || zz < 0 || xx >= nx || yy >= ny || zz >= ns) continue;
                        const auto u = static_cast<std::size_t>((zz * ny + yy) * nx + xx);
                        if (mask.values[u] && !c.labels[u]) {
                            c.labels[u] = label;
                            stack.push_back(u);
                        }
                    }
        }
        c.sizes.push_back(size);
    }
    return c;
}

/// Keeps only the largest 26-connected component (the first in scan order on ties).
inline MaskVolume largest_component(const MaskVolume& mask) {
    const Components c = label_components(mask);
    if (c.sizes.empty()) return mask;
    const auto best = static_cast<std::uint32_t>(std::max_element(c.sizes.begin(), c.sizes.end()) - c.sizes.begin() + 1);
    MaskVolume out(mask.grid);
    for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] = c.labels[i] == best ? 1 : 0;
    return out;
}

}  // namespace femseg
