#pragma once

// Forward and backward kernels for the layer primitives. Tensors use the
// (batch, channels, spatial...) layout; 2D spatial data is handled as 3D data
// with a unit depth axis so that one set of loops covers both ranks.
//
// Backward kernels accumulate into the gradient buffers they are given.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <vector>

#include "femseg/tensor.hpp"

namespace femseg {

enum class Padding { valid, same_zero };

/// Geometry of a sliding-window primitive.
struct ConvSpec {
    int rank = 2;    // spatial rank, 2 or 3
    int kernel = 3;  // extent per spatial axis
    int stride = 1;
    Padding padding = Padding::valid;

    static ConvSpec conv(int rank, Padding padding) { return {rank, 3, 1, padding}; }
    static ConvSpec pointwise(int rank) { return {rank, 1, 1, Padding::valid}; }
    static ConvSpec pool(int rank) { return {rank, 2, 2, Padding::valid}; }
    static ConvSpec up(int rank) { return {rank, 2, 2, Padding::valid}; }

    void validate() const {
        if (rank != 2 && rank != 3) throw ShapeError(cat("conv spec: spatial rank must be 2 or 3, got ", rank));
        if (kernel == 2) {
            if (stride != 2) throw ShapeError("conv spec: 2-kernels (pool, up-conv) require stride 2");
        } else if (kernel % 2 == 1 && kernel >= 1) {
            if (stride != 1) throw ShapeError("conv spec: odd kernels require stride 1");
        } else {
            throw ShapeError(cat("conv spec: unsupported kernel extent ", kernel));
        }
    }

    int pad() const { return padding == Padding::same_zero ? (kernel - 1) / 2 : 0; }

    friend bool operator==(const ConvSpec&, const ConvSpec&) = default;
};

namespace detail {

struct Vol3 {
    std::size_t d = 1, h = 1, w = 1;
    std::size_t size() const { return d * h * w; }
};

inline void check_layout(const Shape& s, int rank, const char* op, const char* what) {
    if (s.size() != static_cast<std::size_t>(rank) + 2)
        throw ShapeError(cat(op, ": ", what, " must have rank ", rank + 2, " (batch, channels, ", rank,
                             " spatial axes), got shape ", to_string(s)));
}

inline Vol3 spatial3(const Shape& s) {
    if (s.size() == 4) return {1, s[2], s[3]};
    if (s.size() == 5) return {s[2], s[3], s[4]};
    throw ShapeError(cat("expected 2 or 3 spatial axes, got shape ", to_string(s)));
}

inline Shape with_spatial(std::size_t n, std::size_t c, Vol3 v, int rank) {
    if (rank == 2) return {n, c, v.h, v.w};
    return {n, c, v.d, v.h, v.w};
}

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class T>
T* scratch(std::size_t n, int slot) {
    thread_local std::vector<T> buffers[3];
    auto& b = buffers[slot];
    if (b.size() < n) b.resize(n);
    return b.data();
}

struct ConvGeom {
    std::size_t cin = 0, cout = 0;
    Vol3 in, out;
    std::size_t kd = 1, kh = 1, kw = 1;
    long pd = 0, ph = 0, pw = 0;
    std::size_t rows() const { return cin * kd * kh * kw; }
};

// Unfolds input positions [p0, p0 + len) of one batch item into a
// (cin*kd*kh*kw) x len matrix.
template <class T>
void im2col(const T* x, const ConvGeom& g, std::size_t p0, std::size_t len, T* cols) {
    const std::size_t hw_out = g.out.h * g.out.w;
    std::size_t r = 0;
    for (std::size_t ci = 0; ci < g.cin; ++ci)
        for (std::size_t a = 0; a < g.kd; ++a)
            for (std::size_t b = 0; b < g.kh; ++b)
                for (std::size_t c = 0; c < g.kw; ++c, ++r) {
                    T* dst = cols + r * len;
                    std::size_t od = p0 / hw_out, oh = (p0 % hw_out) / g.out.w, ow = p0 % g.out.w;
                    std::size_t t = 0;
                    while (t < len) {
                        const std::size_t run = std::min(g.out.w - ow, len - t);
                        const long id = static_cast<long>(od + a) - g.pd;
                        const long ih = static_cast<long>(oh + b) - g.ph;
                        T* out = dst + t;
                        if (id < 0 || id >= static_cast<long>(g.in.d) || ih < 0 || ih >= static_cast<long>(g.in.h)) {
                            std::fill(out, out + run, T{0});
                        } else {
                            const T* src = x + ((ci * g.in.d + static_cast<std::size_t>(id)) * g.in.h +
                                                static_cast<std::size_t>(ih)) * g.in.w;
                            const long off = static_cast<long>(ow + c) - g.pw;
                            const long lo = std::clamp(-off, 0L, static_cast<long>(run));
                            const long hi = std::clamp(static_cast<long>(g.in.w) - off, lo, static_cast<long>(run));
                            std::fill(out, out + lo, T{0});
                            std::copy(src + off + lo, src + off + hi, out + lo);
                            std::fill(out + hi, out + run, T{0});
                        }
                        t += run;
                        ow += run;
                        if (ow == g.out.w) {
                            ow = 0;
                            if (++oh == g.out.h) {
                                oh = 0;
                                ++od;
                            }
                        }
                    }
                }
}

inline std::size_t chunk_len(std::size_t rows, std::size_t positions) {
    constexpr std::size_t budget = std::size_t{1} << 17;
    return std::clamp<std::size_t>(budget / std::max<std::size_t>(rows, 1), 1, positions);
}

// Fixed-width register block for the direct convolution.
template <class T>
struct Lanes {
    static constexpr int width = 64 / static_cast<int>(sizeof(T));
#if defined(__GNUC__) || defined(__clang__)
    typedef T vec __attribute__((vector_size(64)));
#else
    struct vec {
        T v[width] = {};
        vec& operator+=(const vec& o) {
            for (int i = 0; i < width; ++i) v[i] += o.v[i];
            return *this;
        }
        friend vec operator*(T s, const vec& a) {
            vec r;
            for (int i = 0; i < width; ++i) r.v[i] = s * a.v[i];
            return r;
        }
    };
#endif
};

inline constexpr std::size_t kChannelBlock = 8;

template <class T>
constexpr std::size_t slack(std::size_t kw) {
    return 2 * static_cast<std::size_t>(Lanes<T>::width) + kw;
}

// Copies `c` channel volumes into a zeroed buffer with `lo` leading pad per axis.
// `slack` trailing elements let the vector loads run past the last row.
template <class T>
T* padded_copy(const T* src, std::size_t c, Vol3 in, Vol3 lo, Vol3 padded, std::size_t slack, int slot) {
    const std::size_t total = c * padded.size() + slack;
    T* dst = scratch<T>(total, slot);
    std::fill(dst, dst + total, T{0});
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t z = 0; z < in.d; ++z)
            for (std::size_t y = 0; y < in.h; ++y)
                std::copy_n(src + ((ch * in.d + z) * in.h + y) * in.w, in.w,
                            dst + ((ch * padded.d + z + lo.d) * padded.h + y + lo.h) * padded.w + lo.w);
    return dst;
}

// Rearranges a [cout][cin][taps] kernel into [cout/CB][cin][taps][CB] blocks.
// With `adjoint` set the result is the kernel of the transposed operation:
// channel roles swapped and taps reversed.
template <class T>
T* pack_kernel(const T* k, std::size_t cout, std::size_t cin, std::size_t taps, bool adjoint, int slot) {
    constexpr std::size_t CB = kChannelBlock;
    const std::size_t eo = adjoint ? cin : cout, ei = adjoint ? cout : cin;
    const std::size_t total = (eo + CB - 1) / CB * CB * ei * taps;
    T* dst = scratch<T>(total, slot);
    std::fill(dst, dst + total, T{0});
    for (std::size_t o = 0; o < eo; ++o)
        for (std::size_t i = 0; i < ei; ++i)
            for (std::size_t q = 0; q < taps; ++q) {
                const T v = adjoint ? k[(i * cin + o) * taps + (taps - 1 - q)] : k[(o * cin + i) * taps + q];
                dst[((o / CB) * ei * taps + i * taps + q) * CB + o % CB] = v;
            }
    return dst;
}

// Unpadded cross-correlation of a padded input with a packed kernel. Each
// step holds CB output channels by 2 vectors of output columns in registers.
template <class T>
void direct_conv(const T* xp, std::size_t cin, Vol3 padded, const T* kpack, std::size_t cout, std::size_t kd,
                 std::size_t kh, std::size_t kw, Vol3 out, const T* bias, bool accumulate, T* y) {
    using L = Lanes<T>;
    using vec = typename L::vec;
    constexpr std::size_t CB = kChannelBlock;
    constexpr int NV = 2;
    constexpr std::size_t WB = NV * L::width;
    const std::size_t taps = kd * kh * kw;
    for (std::size_t cb = 0; cb < cout; cb += CB) {
        const T* kb = kpack + (cb / CB) * cin * taps * CB;
        const std::size_t nco = std::min(CB, cout - cb);
        for (std::size_t od = 0; od < out.d; ++od)
            for (std::size_t oh = 0; oh < out.h; ++oh)
                for (std::size_t w0 = 0; w0 < out.w; w0 += WB) {
                    vec acc[CB][NV];
                    for (auto& row : acc)
                        for (auto& v : row) v = vec{};
                    const T* kp = kb;
                    for (std::size_t ci = 0; ci < cin; ++ci)
                        for (std::size_t a = 0; a < kd; ++a)
                            for (std::size_t b = 0; b < kh; ++b) {
                                const T* src = xp + ((ci * padded.d + od + a) * padded.h + oh + b) * padded.w + w0;
                                for (std::size_t c = 0; c < kw; ++c, kp += CB) {
                                    vec sv[NV];
                                    for (int j = 0; j < NV; ++j)
                                        std::memcpy(&sv[j], src + c + j * L::width, sizeof(vec));
                                    for (std::size_t co = 0; co < CB; ++co) {
                                        const T kv = kp[co];
                                        for (int j = 0; j < NV; ++j) acc[co][j] += kv * sv[j];
                                    }
                                }
                            }
                    const std::size_t nw = std::min(WB, out.w - w0);
                    for (std::size_t co = 0; co < nco; ++co) {
                        T lanes[WB];
                        std::memcpy(lanes, acc[co], sizeof(lanes));
                        T* o = y + (((cb + co) * out.d + od) * out.h + oh) * out.w + w0;
                        if (accumulate) {
                            for (std::size_t j = 0; j < nw; ++j) o[j] += lanes[j];
                        } else {
                            const T bv = bias ? bias[cb + co] : T{0};
                            for (std::size_t j = 0; j < nw; ++j) o[j] = lanes[j] + bv;
                        }
                    }
                }
    }
}

template <class T>
ConvGeom conv_geometry(const Tensor<T>& x, const Tensor<T>& k, const Tensor<T>* bias, const ConvSpec& spec) {
    spec.validate();
    if (spec.stride != 1) throw ShapeError("conv: stride must be 1");
    check_layout(x.shape(), spec.rank, "conv", "input");
    check_layout(k.shape(), spec.rank, "conv", "kernel");
    ConvGeom g;
    g.cin = x.extent(1);
    g.cout = k.extent(0);
    if (k.extent(1) != g.cin)
        throw ShapeError(cat("conv: input channel axis (1) has ", g.cin, " channels but kernel axis 1 expects ",
                             k.extent(1)));
    for (int ax = 0; ax < spec.rank; ++ax)
        if (k.extent(2 + ax) != static_cast<std::size_t>(spec.kernel))
            throw ShapeError(cat("conv: kernel spatial axis ", 2 + ax, " has extent ", k.extent(2 + ax),
                                 " but spec expects ", spec.kernel));
    if (bias && (bias->rank() != 1 || bias->extent(0) != g.cout))
        throw ShapeError(cat("conv: bias must have shape [", g.cout, "], got ", to_string(bias->shape())));
    g.in = spatial3(x.shape());
    const std::size_t ke = static_cast<std::size_t>(spec.kernel);
    g.kd = spec.rank == 3 ? ke : 1;
    g.kh = g.kw = ke;
    const long p = spec.pad();
    g.pd = spec.rank == 3 ? p : 0;
    g.ph = g.pw = p;
    const std::size_t dims_in[3] = {g.in.d, g.in.h, g.in.w};
    const std::size_t dims_k[3] = {g.kd, g.kh, g.kw};
    const long pads[3] = {g.pd, g.ph, g.pw};
    std::size_t dims_out[3];
    for (int ax = 0; ax < 3; ++ax) {
        const long padded = static_cast<long>(dims_in[ax]) + 2 * pads[ax];
        if (padded < static_cast<long>(dims_k[ax])) {
            const int axis = spec.rank == 3 ? 2 + ax : 1 + ax;
            throw ShapeError(cat("conv: input spatial axis ", axis, " has extent ", dims_in[ax],
                                 ", smaller than the kernel extent ", dims_k[ax]));
        }
        dims_out[ax] = static_cast<std::size_t>(padded - static_cast<long>(dims_k[ax]) + 1);
    }
    g.out = {dims_out[0], dims_out[1], dims_out[2]};
    return g;
}

}  // namespace detail

namespace kernels {

/// Cross-correlation with per-output-channel bias.
template <class T>
Tensor<T> conv_forward(const Tensor<T>& x, const Tensor<T>& k, const Tensor<T>& bias, const ConvSpec& spec) {
    const auto g = detail::conv_geometry(x, k, &bias, spec);
    if (!x.all_finite()) throw NonFiniteError("conv: input contains non-finite values");
    const std::size_t n = x.extent(0), taps = g.kd * g.kh * g.kw;
    Tensor<T> out(detail::with_spatial(n, g.cout, g.out, spec.rank));
    const detail::Vol3 lo{static_cast<std::size_t>(g.pd), static_cast<std::size_t>(g.ph),
                          static_cast<std::size_t>(g.pw)};
    const detail::Vol3 padded{g.in.d + 2 * lo.d, g.in.h + 2 * lo.h, g.in.w + 2 * lo.w};
    const T* kp = detail::pack_kernel(k.data(), g.cout, g.cin, taps, false, 1);
    for (std::size_t b = 0; b < n; ++b) {
        const T* xp = detail::padded_copy(x.data() + b * g.cin * g.in.size(), g.cin, g.in, lo, padded,
                                          detail::slack<T>(g.kw), 0);
        detail::direct_conv(xp, g.cin, padded, kp, g.cout, g.kd, g.kh, g.kw, g.out, bias.data(), false,
                            out.data() + b * g.cout * g.out.size());
    }
    return out;
}

template <class T>
void conv_backward(const Tensor<T>& x, const Tensor<T>& k, const ConvSpec& spec, const Tensor<T>& gout,
                   Tensor<T>* gx, Tensor<T>* gk, Tensor<T>* gb) {
    const auto g = detail::conv_geometry(x, k, static_cast<const Tensor<T>*>(nullptr), spec);
    const std::size_t n = x.extent(0), rows = g.rows(), positions = g.out.size();
    const std::size_t len_max = detail::chunk_len(rows, positions);
    T* cols = detail::scratch<T>(rows * len_max, 0);
    using Mat = detail::RowMat<T>;
    for (std::size_t b = 0; b < n; ++b) {
        const T* xb = x.data() + b * g.cin * g.in.size();
        const T* gob = gout.data() + b * g.cout * positions;
        for (std::size_t p0 = 0; gk && p0 < positions; p0 += len_max) {
            const std::size_t len = std::min(len_max, positions - p0);
            Eigen::Map<const Mat, 0, Eigen::OuterStride<>> go(
                gob + p0, static_cast<Eigen::Index>(g.cout), static_cast<Eigen::Index>(len),
                Eigen::OuterStride<>(static_cast<Eigen::Index>(positions)));
            detail::im2col(xb, g, p0, len, cols);
            Eigen::Map<const Mat> c(cols, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(len));
            Eigen::Map<Mat> gw(gk->data(), static_cast<Eigen::Index>(g.cout), static_cast<Eigen::Index>(rows));
            gw.noalias() += go * c.transpose();
        }
        if (gx) {
            // The input gradient is a full correlation of gout with the adjoint kernel.
            const detail::Vol3 lo{g.kd - 1 - static_cast<std::size_t>(g.pd), g.kh - 1 - static_cast<std::size_t>(g.ph),
                                  g.kw - 1 - static_cast<std::size_t>(g.pw)};
            const detail::Vol3 padded{g.out.d + 2 * lo.d, g.out.h + 2 * lo.h, g.out.w + 2 * lo.w};
            const T* kp = detail::pack_kernel(k.data(), g.cout, g.cin, g.kd * g.kh * g.kw, true, 1);
            const T* gp = detail::padded_copy(gob, g.cout, g.out, lo, padded, detail::slack<T>(g.kw), 2);
            detail::direct_conv(gp, g.cout, padded, kp, g.cin, g.kd, g.kh, g.kw, g.in, static_cast<const T*>(nullptr),
                                true, gx->data() + b * g.cin * g.in.size());
        }
        if (gb) {
            for (std::size_t co = 0; co < g.cout; ++co) {
                const T* row = gob + co * positions;
                T s{0};
                for (std::size_t p = 0; p < positions; ++p) s += row[p];
                (*gb)[co] += s;
            }
        }
    }
}

/// Plain nested-loop convolution. Slow; kept as the reference for tests.
template <class T>
Tensor<T> conv_direct(const Tensor<T>& x, const Tensor<T>& k, const Tensor<T>& bias, const ConvSpec& spec) {
    const auto g = detail::conv_geometry(x, k, &bias, spec);
    const std::size_t n = x.extent(0);
    Tensor<T> out(detail::with_spatial(n, g.cout, g.out, spec.rank));
    std::size_t o = 0;
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t co = 0; co < g.cout; ++co)
            for (std::size_t od = 0; od < g.out.d; ++od)
                for (std::size_t oh = 0; oh < g.out.h; ++oh)
                    for (std::size_t ow = 0; ow < g.out.w; ++ow, ++o) {
                        T acc = bias[co];
                        for (std::size_t ci = 0; ci < g.cin; ++ci)
                            for (std::size_t a = 0; a < g.kd; ++a)
                                for (std::size_t bb = 0; bb < g.kh; ++bb)
                                    for (std::size_t c = 0; c < g.kw; ++c) {
                                        const long id = static_cast<long>(od + a) - g.pd;
                                        const long ih = static_cast<long>(oh + bb) - g.ph;
                                        const long iw = static_cast<long>(ow + c) - g.pw;
                                        if (id < 0 || ih < 0 || iw < 0 || id >= static_cast<long>(g.in.d) ||
                                            ih >= static_cast<long>(g.in.h) || iw >= static_cast<long>(g.in.w))
                                            continue;
                                        const T xv = x[(((b * g.cin + ci) * g.in.d + id) * g.in.h + ih) * g.in.w + iw];
                                        const T kv = k[(((co * g.cin + ci) * g.kd + a) * g.kh + bb) * g.kw + c];
                                        acc += xv * kv;
                                    }
                        out[o] = acc;
                    }
    return out;
}

/// Non-overlapping 2-window max pooling. `argmax` receives the flat input
/// index feeding each output; ties go to the first voxel in row-major window order.
template <class T>
Tensor<T> max_pool_forward(const Tensor<T>& x, const ConvSpec& spec, std::vector<std::size_t>& argmax) {
    spec.validate();
    if (spec.kernel != 2) throw ShapeError("max_pool: kernel extent must be 2");
    detail::check_layout(x.shape(), spec.rank, "max_pool", "input");
    for (std::size_t ax = 2; ax < x.rank(); ++ax)
        if (x.extent(ax) % 2 != 0)
            throw ShapeError(cat("max_pool: spatial axis ", ax, " has odd extent ", x.extent(ax)));
    const auto in = detail::spatial3(x.shape());
    const std::size_t kd = spec.rank == 3 ? 2 : 1;
    const detail::Vol3 out{in.d / kd, in.h / 2, in.w / 2};
    const std::size_t planes = x.extent(0) * x.extent(1);
    Tensor<T> y(detail::with_spatial(x.extent(0), x.extent(1), out, spec.rank));
    argmax.resize(y.size());
    std::size_t o = 0;
    for (std::size_t pl = 0; pl < planes; ++pl) {
        const std::size_t base = pl * in.size();
        for (std::size_t od = 0; od < out.d; ++od)
            for (std::size_t oh = 0; oh < out.h; ++oh)
                for (std::size_t ow = 0; ow < out.w; ++ow, ++o) {
                    std::size_t best = base + ((od * kd) * in.h + oh * 2) * in.w + ow * 2;
                    T bv = x[best];
                    for (std::size_t a = 0; a < kd; ++a)
                        for (std::size_t b = 0; b < 2; ++b)
                            for (std::size_t c = 0; c < 2; ++c) {
                                const std::size_t idx = base + ((od * kd + a) * in.h + oh * 2 + b) * in.w + ow * 2 + c;
                                if (x[idx] > bv) {
                                    bv = x[idx];
                                    best = idx;
                                }
                            }
                    y[o] = bv;
                    argmax[o] = best;
                }
    }
    return y;
}

template <class T>
void max_pool_backward(const std::vector<std::size_t>& argmax, const Tensor<T>& gout, Tensor<T>& gx) {
    for (std::size_t i = 0; i < argmax.size(); ++i) gx[argmax[i]] += gout[i];
}

namespace detail_up {

struct UpGeom {
    std::size_t cin = 0, cout = 0, kd = 1, taps = 4;
    femseg::detail::Vol3 in, out;
};

template <class T>
UpGeom geometry(const Tensor<T>& x, const Tensor<T>& k, const ConvSpec& spec) {
    spec.validate();
    if (spec.kernel != 2 || spec.stride != 2) throw ShapeError("up_conv: requires kernel extent 2 and stride 2");
    femseg::detail::check_layout(x.shape(), spec.rank, "up_conv", "input");
    femseg::detail::check_layout(k.shape(), spec.rank, "up_conv", "kernel");
    UpGeom g;
    g.cin = x.extent(1);
    g.cout = k.extent(0);
    if (k.extent(1) != g.cin)
        throw ShapeError(cat("up_conv: input channel axis (1) has ", g.cin, " channels but kernel axis 1 expects ",
                             k.extent(1)));
    for (std::size_t ax = 2; ax < k.rank(); ++ax)
        if (k.extent(ax) != 2)
            throw ShapeError(cat("up_conv: kernel spatial axis ", ax, " must have extent 2, got ", k.extent(ax)));
    g.kd = spec.rank == 3 ? 2 : 1;
    g.taps = g.kd * 4;
    g.in = femseg::detail::spatial3(x.shape());
    g.out = {g.in.d * g.kd, g.in.h * 2, g.in.w * 2};
    return g;
}

// Kernel [cout][cin][taps] rearranged to a (cout*taps) x cin matrix.
template <class T>
femseg::detail::RowMat<T> tap_matrix(const Tensor<T>& k, const UpGeom& g) {
    femseg::detail::RowMat<T> m(static_cast<Eigen::Index>(g.cout * g.taps), static_cast<Eigen::Index>(g.cin));
    for (std::size_t co = 0; co < g.cout; ++co)
        for (std::size_t ci = 0; ci < g.cin; ++ci)
            for (std::size_t q = 0; q < g.taps; ++q)
                m(static_cast<Eigen::Index>(co * g.taps + q), static_cast<Eigen::Index>(ci)) =
                    k[(co * g.cin + ci) * g.taps + q];
    return m;
}

// Visits (row of the tap matrix, input position, output flat offset) for one batch item.
template <class F>
void for_each_tap(const UpGeom& g, F&& f) {
    for (std::size_t co = 0; co < g.cout; ++co)
        for (std::size_t a = 0; a < g.kd; ++a)
            for (std::size_t b = 0; b < 2; ++b)
                for (std::size_t c = 0; c < 2; ++c) {
                    const std::size_t row = co * g.taps + (a * 2 + b) * 2 + c;
                    std::size_t p = 0;
                    for (std::size_t d = 0; d < g.in.d; ++d)
                        for (std::size_t h = 0; h < g.in.h; ++h) {
                            const std::size_t obase =
                                ((co * g.out.d + d * g.kd + a) * g.out.h + h * 2 + b) * g.out.w + c;
                            for (std::size_t w = 0; w < g.in.w; ++w, ++p) f(row, p, obase + w * 2);
                        }
                }
}

}  // namespace detail_up

/// Stride-2 transposed convolution: every input voxel paints a disjoint 2-per-axis block.
template <class T>
Tensor<T> up_conv_forward(const Tensor<T>& x, const Tensor<T>& k, const ConvSpec& spec) {
    const auto g = detail_up::geometry(x, k, spec);
    const std::size_t n = x.extent(0), positions = g.in.size();
    Tensor<T> out(femseg::detail::with_spatial(n, g.cout, g.out, spec.rank));
    const auto wt = detail_up::tap_matrix(k, g);
    using Mat = femseg::detail::RowMat<T>;
    Mat y(static_cast<Eigen::Index>(g.cout * g.taps), static_cast<Eigen::Index>(positions));
    for (std::size_t b = 0; b < n; ++b) {
        Eigen::Map<const Mat> xb(x.data() + b * g.cin * positions, static_cast<Eigen::Index>(g.cin),
                                 static_cast<Eigen::Index>(positions));
        y.noalias() = wt * xb;
        T* ob = out.data() + b * g.cout * g.out.size();
        const T* yd = y.data();
        detail_up::for_each_tap(g, [&](std::size_t row, std::size_t p, std::size_t o) {
            ob[o] = yd[row * positions + p];
        });
    }
    return out;
}

template <class T>
void up_conv_backward(const Tensor<T>& x, const Tensor<T>& k, const ConvSpec& spec, const Tensor<T>& gout,
                      Tensor<T>* gx, Tensor<T>* gk) {
    const auto g = detail_up::geometry(x, k, spec);
    const std::size_t n = x.extent(0), positions = g.in.size();
    using Mat = femseg::detail::RowMat<T>;
    const auto wt = detail_up::tap_matrix(k, g);
    Mat dy(static_cast<Eigen::Index>(g.cout * g.taps), static_cast<Eigen::Index>(positions));
    Mat dwt = Mat::Zero(wt.rows(), wt.cols());
    for (std::size_t b = 0; b < n; ++b) {
        const T* gob = gout.data() + b * g.cout * g.out.size();
        T* dyd = dy.data();
        detail_up::for_each_tap(g, [&](std::size_t row, std::size_t p, std::size_t o) {
            dyd[row * positions + p] = gob[o];
        });
        Eigen::Map<const Mat> xb(x.data() + b * g.cin * positions, static_cast<Eigen::Index>(g.cin),
                                 static_cast<Eigen::Index>(positions));
        if (gx) {
            Eigen::Map<Mat> gxb(gx->data() + b * g.cin * positions, static_cast<Eigen::Index>(g.cin),
                                static_cast<Eigen::Index>(positions));
            gxb.noalias() += wt.transpose() * dy;
        }
        if (gk) dwt.noalias() += dy * xb.transpose();
    }
    if (gk) {
        for (std::size_t co = 0; co < g.cout; ++co)
            for (std::size_t ci = 0; ci < g.cin; ++ci)
                for (std::size_t q = 0; q < g.taps; ++q)
                    (*gk)[(co * g.cin + ci) * g.taps + q] +=
                        dwt(static_cast<Eigen::Index>(co * g.taps + q), static_cast<Eigen::Index>(ci));
    }
}

template <class T>
Tensor<T> relu_forward(const Tensor<T>& x) {
    Tensor<T> y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > T{0} ? x[i] : T{0};
    return y;
}

/// The gradient at exactly zero is zero.
template <class T>
void relu_backward(const Tensor<T>& x, const Tensor<T>& gout, Tensor<T>& gx) {
    for (std::size_t i = 0; i < x.size(); ++i)
        if (x[i] > T{0}) gx[i] += gout[i];
}

/// Softmax across the channel axis, stabilized by the per-voxel channel max.
template <class T>
Tensor<T> softmax_forward(const Tensor<T>& x) {
    if (x.rank() < 2) throw ShapeError("channel_softmax: input needs a channel axis");
    const std::size_t n = x.extent(0), c = x.extent(1), s = x.size() / (n * c);
    Tensor<T> y(x.shape());
    for (std::size_t b = 0; b < n; ++b) {
        const T* xb = x.data() + b * c * s;
        T* yb = y.data() + b * c * s;
        for (std::size_t p = 0; p < s; ++p) {
            T m = xb[p];
            for (std::size_t k = 1; k < c; ++k) m = std::max(m, xb[k * s + p]);
            T sum{0};
            for (std::size_t k = 0; k < c; ++k) {
                const T e = std::exp(xb[k * s + p] - m);
                yb[k * s + p] = e;
                sum += e;
            }
            for (std::size_t k = 0; k < c; ++k) yb[k * s + p] /= sum;
        }
    }
    return y;
}

template <class T>
void softmax_backward(const Tensor<T>& y, const Tensor<T>& gout, Tensor<T>& gx) {
    const std::size_t n = y.extent(0), c = y.extent(1), s = y.size() / (n * c);
    for (std::size_t b = 0; b < n; ++b) {
        const std::size_t base = b * c * s;
        for (std::size_t p = 0; p < s; ++p) {
            T dot{0};
            for (std::size_t k = 0; k < c; ++k) dot += gout[base + k * s + p] * y[base + k * s + p];
            for (std::size_t k = 0; k < c; ++k) {
                const std::size_t i = base + k * s + p;
                gx[i] += y[i] * (gout[i] - dot);
            }
        }
    }
}

namespace detail_crop {

struct CropGeom {
    femseg::detail::Vol3 enc, dec, off;
    std::size_t ce = 0, cd = 0;
};

template <class T>
CropGeom geometry(const Tensor<T>& enc, const Tensor<T>& dec) {
    if (enc.rank() != dec.rank() || enc.rank() < 4 || enc.rank() > 5)
        throw ShapeError(cat("crop_concat: rank mismatch between ", to_string(enc.shape()), " and ",
                             to_string(dec.shape())));
    if (enc.extent(0) != dec.extent(0))
        throw ShapeError(cat("crop_concat: batch axis (0) differs: ", enc.extent(0), " vs ", dec.extent(0)));
    CropGeom g;
    for (std::size_t ax = 2; ax < enc.rank(); ++ax) {
        if (enc.extent(ax) < dec.extent(ax))
            throw ShapeError(cat("crop_concat: encoder spatial axis ", ax, " (", enc.extent(ax),
                                 ") is smaller than decoder (", dec.extent(ax), ")"));
        if ((enc.extent(ax) - dec.extent(ax)) % 2 != 0)
            throw ShapeError(cat("crop_concat: odd crop margin on spatial axis ", ax, " (", enc.extent(ax), " vs ",
                                 dec.extent(ax), ")"));
    }
    g.enc = femseg::detail::spatial3(enc.shape());
    g.dec = femseg::detail::spatial3(dec.shape());
    g.off = {(g.enc.d - g.dec.d) / 2, (g.enc.h - g.dec.h) / 2, (g.enc.w - g.dec.w) / 2};
    g.ce = enc.extent(1);
    g.cd = dec.extent(1);
    return g;
}

}  // namespace detail_crop

/// Center-crops `enc` to `dec`'s spatial extents and stacks [enc, dec] on the channel axis.
template <class T>
Tensor<T> crop_concat_forward(const Tensor<T>& enc, const Tensor<T>& dec) {
    const auto g = detail_crop::geometry(enc, dec);
    Shape shape = dec.shape();
    shape[1] = g.ce + g.cd;
    Tensor<T> out(shape);
    const std::size_t n = enc.extent(0), s = g.dec.size();
    for (std::size_t b = 0; b < n; ++b) {
        T* ob = out.data() + b * (g.ce + g.cd) * s;
        for (std::size_t c = 0; c < g.ce; ++c) {
            const T* eb = enc.data() + (b * g.ce + c) * g.enc.size();
            T* oc = ob + c * s;
            for (std::size_t d = 0; d < g.dec.d; ++d)
                for (std::size_t h = 0; h < g.dec.h; ++h) {
                    const T* src = eb + ((d + g.off.d) * g.enc.h + h + g.off.h) * g.enc.w + g.off.w;
                    std::copy(src, src + g.dec.w, oc + (d * g.dec.h + h) * g.dec.w);
                }
        }
        const T* db = dec.data() + b * g.cd * s;
        std::copy(db, db + g.cd * s, ob + g.ce * s);
    }
    return out;
}

template <class T>
void crop_concat_backward(const Tensor<T>& enc, const Tensor<T>& dec, const Tensor<T>& gout, Tensor<T>* genc,
                          Tensor<T>* gdec) {
    const auto g = detail_crop::geometry(enc, dec);
    const std::size_t n = enc.extent(0), s = g.dec.size();
    for (std::size_t b = 0; b < n; ++b) {
        const T* gb = gout.data() + b * (g.ce + g.cd) * s;
        if (genc) {
            for (std::size_t c = 0; c < g.ce; ++c) {
                T* eb = genc->data() + (b * g.ce + c) * g.enc.size();
                const T* gc = gb + c * s;
                for (std::size_t d = 0; d < g.dec.d; ++d)
                    for (std::size_t h = 0; h < g.dec.h; ++h) {
                        T* dst = eb + ((d + g.off.d) * g.enc.h + h + g.off.h) * g.enc.w + g.off.w;
                        const T* src = gc + (d * g.dec.h + h) * g.dec.w;
                        for (std::size_t w = 0; w < g.dec.w; ++w) dst[w] += src[w];
                    }
            }
        }
        if (gdec) {
            T* db = gdec->data() + b * g.cd * s;
            const T* src = gb + g.ce * s;
            for (std::size_t i = 0; i < g.cd * s; ++i) db[i] += src[i];
        }
    }
}

}  // namespace kernels
}  // namespace femseg
