#pragma once

// Synthetic proximal-femur phantoms with exact labels.
//
// The foreground is a union of a spherical head, a neck capsule, a trochanter
// bump and a tapered shaft, all in a coordinate frame where one slice spans
// several in-plane voxels. Trabecular texture fills the foreground, a dark
// cortical shell wraps it, and the background mixes soft tissue with bright
// fat bands. Gaussian noise and a smooth multiplicative field scale with
// `difficulty`.

#include <algorithm>
#include <array>
#include <cmath>
#include <vector>

#include "femseg/data.hpp"

namespace femseg {

struct Phantom {
    Volume image;
    MaskVolume mask;
    Laterality laterality = Laterality::left;
};

struct PhantomOptions {
    std::array<std::size_t, 3> extents{64, 64, 32};
    std::array<double, 3> spacing{0.9375, 0.9375, 1.5};
    double difficulty = 1.0;
};

namespace detail {

struct Vec3 {
    double x = 0, y = 0, z = 0;
};

inline Vec3 operator-(Vec3 a, Vec3 b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
inline double dot3(Vec3 a, Vec3 b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
inline double norm3(Vec3 a) { return std::sqrt(dot3(a, a)); }

// Signed distance to a capsule whose radius varies linearly from ra (at a) to rb (at b).
inline double tapered_capsule(Vec3 p, Vec3 a, Vec3 b, double ra, double rb) {
    const Vec3 ab = b - a;
    const double t = std::clamp(dot3(p - a, ab) / dot3(ab, ab), 0.0, 1.0);
    const Vec3 q{a.x + t * ab.x, a.y + t * ab.y, a.z + t * ab.z};
    return norm3(p - q) - (ra + t * (rb - ra));
}

// Sum of random plane waves, scaled to roughly unit amplitude.
class WaveField {
public:
    WaveField(Rng& rng, int waves, double min_period, double max_period) {
        for (int i = 0; i < waves; ++i) {
            const double theta = rng.uniform(0, 6.283185307179586), phi = std::acos(rng.uniform(-1, 1));
            const double k = 6.283185307179586 / rng.uniform(min_period, max_period);
            waves_.push_back({k * std::sin(phi) * std::cos(theta), k * std::sin(phi) * std::sin(theta),
                              k * std::cos(phi), rng.uniform(0, 6.283185307179586)});
        }
        scale_ = std::sqrt(2.0 / static_cast<double>(std::max(waves, 1)));
    }

    double operator()(Vec3 p) const {
        double s = 0;
        for (const auto& w : waves_) s += std::sin(w[0] * p.x + w[1] * p.y + w[2] * p.z + w[3]);
        return s * scale_;
    }

private:
    std::vector<std::array<double, 4>> waves_;
    double scale_ = 1;
};

}  // namespace detail

inline Phantom generate_phantom(std::uint64_t seed, const PhantomOptions& opt = {}) {
    const auto [nx, ny, ns] = opt.extents;
    if (nx < 32 || ny < 32) throw ShapeError(cat("generate_phantom: in-plane extents must be >= 32, got ", nx, "x", ny));
    if (ns < 1) throw ShapeError("generate_phantom: need at least one slice");
    if (!(opt.difficulty >= 0)) throw std::invalid_argument("generate_phantom: difficulty must be >= 0");
    using detail::Vec3;
    Rng rng(derive_seed(seed, 0x9a47));
    const double S = static_cast<double>(std::min(nx, ny));
    const double jitter = 0.03 * S;
    auto jit = [&] { return rng.uniform(-jitter, jitter); };

    Phantom ph;
    ph.laterality = rng.uniform() < 0.5 ? Laterality::left : Laterality::right;

    // Canonical frame: head toward low x. One slice spans kz in-plane voxel widths.
    const double kz = 0.8 * S / static_cast<double>(ns);
    const double zc = 0.5 * static_cast<double>(ns) * kz + rng.uniform(-0.05, 0.05) * S;
    const double scale = rng.uniform(0.9, 1.1);
    const Vec3 head{0.32 * S + jit(), 0.30 * S + jit(), zc};
    const Vec3 neck_end{0.58 * S + jit(), 0.46 * S + jit(), zc};
    const Vec3 troch{0.74 * S + jit(), 0.38 * S + jit(), zc + jit()};
    const Vec3 shaft_top{0.64 * S + jit(), 0.48 * S + jit(), zc};
    const Vec3 shaft_bottom{0.70 * S + jit(), static_cast<double>(ny) + 0.2 * S, zc + jit()};
    const double r_head = 0.15 * S * scale, r_neck = 0.085 * S * scale, r_troch = 0.08 * S * scale;
    const double r_shaft_top = 0.125 * S * scale, r_shaft_bottom = 0.10 * S * scale;
    const double rim = 0.035 * S;

    auto sdf = [&](Vec3 p) {
        double d = detail::norm3(p - head) - r_head;
        d = std::min(d, detail::tapered_capsule(p, head, neck_end, r_neck, r_neck * 1.15));
        d = std::min(d, detail::norm3(p - troch) - r_troch);
        d = std::min(d, detail::tapered_capsule(p, shaft_top, shaft_bottom, r_shaft_top, r_shaft_bottom));
        return d;
    };

    const detail::WaveField texture(rng, 24, 2.5, 5.0);
    const detail::WaveField field(rng, 3, 1.5 * S, 3.0 * S);
    std::array<double, 3> band_offset{}, band_amp{}, band_freq{}, band_phase{};
    for (int b = 0; b < 3; ++b) {
        band_offset[b] = rng.uniform(0.1, 0.9) * static_cast<double>(ny);
        band_amp[b] = rng.uniform(0.02, 0.08) * S;
        band_freq[b] = 6.283185307179586 / rng.uniform(0.5 * S, 1.5 * S);
        band_phase[b] = rng.uniform(0, 6.283185307179586);
    }
    const double band_width = 0.035 * S;
    const double gain = rng.uniform(0.9, 1.1);
    const double noise_sd = 0.04 * opt.difficulty;
    const double field_amp = 0.15 * opt.difficulty;

    Grid grid;
    grid.extents = opt.extents;
    grid.spacing = opt.spacing;
    ph.image = Volume(grid);
    ph.mask = MaskVolume(grid);
    const bool mirrored = ph.laterality == Laterality::left;
    for (std::size_t z = 0; z < ns; ++z)
        for (std::size_t y = 0; y < ny; ++y)
            for (std::size_t x = 0; x < nx; ++x) {
                const double cx = mirrored ? static_cast<double>(nx - 1 - x) : static_cast<double>(x);
                const Vec3 p{cx, static_cast<double>(y), (static_cast<double>(z) + 0.5) * kz};
                const double d = sdf(p);
                double v;
                if (d < 0) {
                    v = 0.62 + 0.12 * texture(p);
                    ph.mask.at(x, y, z) = 1;
                } else if (d < rim) {
                    v = 0.12;
                } else {
                    v = 0.40;
                    for (int b = 0; b < 3; ++b) {
                        const double centre = band_offset[b] + band_amp[b] * std::sin(band_freq[b] * cx + band_phase[b]);
                        if (std::abs(static_cast<double>(y) - centre) < band_width) v = 0.85;
                    }
                }
                v *= gain * (1.0 + field_amp * field(p));
                v += noise_sd * rng.normal();
                ph.image.at(x, y, z) = static_cast<float>(v);
            }
    return ph;
}

inline double foreground_fraction(const MaskVolume& m) {
    std::size_t n = 0;
    for (auto v : m.values) n += v != 0;
    return static_cast<double>(n) / static_cast<double>(m.values.size());
}

}  // namespace femseg
