#pragma once

// Volumes on a voxel grid, their on-disk format, the dataset manifest and the
// preprocessing steps (slab crop, in-plane resampling, slice triplets).
//
// Volume file layout:
//   8 bytes   magic "FEMSEGV1"
//   header    one line of UTF-8 JSON terminated by '\n':
//             {"extents":[x,y,slices],"spacing":[sx,sy,sz],"scalar_type":"float32"|"uint8",
//              "axis_order":"x,y,slice","values":count}
//   payload   little-endian voxels, x fastest, then y, then slice

#include <json.hpp>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "femseg/tensor.hpp"

namespace femseg {

namespace fs = std::filesystem;

struct Grid {
    std::array<std::size_t, 3> extents{1, 1, 1};  // x, y, slices
    std::array<double, 3> spacing{1.0, 1.0, 1.0};  // mm

    std::size_t nx() const { return extents[0]; }
    std::size_t ny() const { return extents[1]; }
    std::size_t slices() const { return extents[2]; }
    std::size_t size() const { return extents[0] * extents[1] * extents[2]; }
    std::size_t index(std::size_t x, std::size_t y, std::size_t z) const { return (z * ny() + y) * nx() + x; }

    void validate() const {
        for (int a = 0; a < 3; ++a) {
            if (extents[a] == 0) throw ShapeError(cat("grid: extent ", a, " must be positive"));
            if (!(spacing[a] > 0) || !std::isfinite(spacing[a]))
                throw ShapeError(cat("grid: spacing ", a, " must be positive and finite"));
        }
    }

    bool same_extents(const Grid& o) const { return extents == o.extents; }
    friend bool operator==(const Grid&, const Grid&) = default;
};

inline std::string to_string(const Grid& g) { return cat(g.nx(), "x", g.ny(), "x", g.slices()); }

template <class V>
struct VolumeOf {
    Grid grid;
    std::vector<V> values;

    VolumeOf() = default;
    explicit VolumeOf(Grid g, V fill = V{}) : grid(g), values(g.size(), fill) { grid.validate(); }
    VolumeOf(Grid g, std::vector<V> v) : grid(g), values(std::move(v)) {
        grid.validate();
        if (values.size() != grid.size())
            throw ShapeError(cat("volume: ", values.size(), " values for grid ", to_string(grid)));
    }

    V& at(std::size_t x, std::size_t y, std::size_t z) { return values[grid.index(x, y, z)]; }
    const V& at(std::size_t x, std::size_t y, std::size_t z) const { return values[grid.index(x, y, z)]; }

    friend bool operator==(const VolumeOf&, const VolumeOf&) = default;
};

using Volume = VolumeOf<float>;
using MaskVolume = VolumeOf<std::uint8_t>;
using ProbabilityMap = VolumeOf<float>;

/// Records a grid change so that no preprocessing step alters a grid silently.
inline void log_grid_change(const char* step, const Grid& before, const Grid& after) {
    log(LogLevel::debug, cat(step, ": grid ", to_string(before), " -> ", to_string(after)));
}

// ---------------------------------------------------------------------------
// Volume I/O

enum class VolumeErrorKind { io, bad_magic, bad_header, truncated_payload, length_mismatch, scalar_type };

class VolumeFormatError : public FormatError {
public:
    VolumeFormatError(VolumeErrorKind kind, const std::string& msg) : FormatError(msg), kind_(kind) {}
    VolumeErrorKind kind() const noexcept { return kind_; }

private:
    VolumeErrorKind kind_;
};

inline constexpr char kVolumeMagic[8] = {'F', 'E', 'M', 'S', 'E', 'G', 'V', '1'};

namespace detail {

template <class V>
constexpr const char* scalar_name() {
    if constexpr (std::is_same_v<V, float>) return "float32";
    else if constexpr (std::is_same_v<V, std::uint8_t>) return "uint8";
    else if constexpr (std::is_same_v<V, double>) return "float64";
    else static_assert(sizeof(V) == 0, "unsupported voxel type");
}

static_assert(std::endian::native == std::endian::little, "payloads are written in native (little-endian) order");

}  // namespace detail

template <class V>
void write_volume(const VolumeOf<V>& vol, const fs::path& path) {
    vol.grid.validate();
    if (vol.values.size() != vol.grid.size())
        throw ShapeError(cat("write_volume: ", vol.values.size(), " values for grid ", to_string(vol.grid)));
    nlohmann::json h;
    h["extents"] = vol.grid.extents;
    h["spacing"] = vol.grid.spacing;
    h["scalar_type"] = detail::scalar_name<V>();
    h["axis_order"] = "x,y,slice";
    h["values"] = vol.values.size();
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw VolumeFormatError(VolumeErrorKind::io, cat("write_volume: cannot open ", path.string()));
    out.write(kVolumeMagic, sizeof kVolumeMagic);
    const std::string line = h.dump() + "\n";
    out.write(line.data(), static_cast<std::streamsize>(line.size()));
    out.write(reinterpret_cast<const char*>(vol.values.data()),
              static_cast<std::streamsize>(vol.values.size() * sizeof(V)));
    if (!out) throw VolumeFormatError(VolumeErrorKind::io, cat("write_volume: write failed for ", path.string()));
}

template <class V>
VolumeOf<V> read_volume(const fs::path& path) {
    const std::string where = path.string();
    std::ifstream in(path, std::ios::binary);
    if (!in) throw VolumeFormatError(VolumeErrorKind::io, cat("read_volume: cannot open ", where));
    char magic[8] = {};
    in.read(magic, sizeof magic);
    if (in.gcount() != sizeof magic || std::memcmp(magic, kVolumeMagic, sizeof magic) != 0)
        throw VolumeFormatError(VolumeErrorKind::bad_magic, cat("read_volume: bad magic in ", where));
    std::string line;
    if (!std::getline(in, line))
        throw VolumeFormatError(VolumeErrorKind::bad_header, cat("read_volume: missing header in ", where));
    Grid grid;
    std::size_t count = 0;
    std::string scalar;
    try {
        const auto h = nlohmann::json::parse(line);
        grid.extents = h.at("extents").get<std::array<std::size_t, 3>>();
        grid.spacing = h.at("spacing").get<std::array<double, 3>>();
        scalar = h.at("scalar_type").get<std::string>();
        count = h.at("values").get<std::size_t>();
        if (h.contains("axis_order") && h.at("axis_order") != "x,y,slice")
            throw VolumeFormatError(VolumeErrorKind::bad_header, "unsupported axis_order");
    } catch (const nlohmann::json::exception& e) {
        throw VolumeFormatError(VolumeErrorKind::bad_header, cat("read_volume: invalid header in ", where, ": ", e.what()));
    }
    if (scalar != detail::scalar_name<V>())
        throw VolumeFormatError(VolumeErrorKind::scalar_type, cat("read_volume: ", where, " holds ", scalar,
                                                                  ", expected ", detail::scalar_name<V>()));
    try {
        grid.validate();
    } catch (const ShapeError& e) {
        throw VolumeFormatError(VolumeErrorKind::bad_header, cat("read_volume: ", where, ": ", e.what()));
    }
    if (count != grid.size())
        throw VolumeFormatError(VolumeErrorKind::length_mismatch,
                                cat("read_volume: length mismatch in ", where, ": header declares ", count,
                                    " values for extents ", to_string(grid), " (", grid.size(), ")"));
    std::vector<V> values(count);
    const auto bytes = static_cast<std::streamsize>(count * sizeof(V));
    in.read(reinterpret_cast<char*>(values.data()), bytes);
    if (in.gcount() != bytes)
        throw VolumeFormatError(VolumeErrorKind::truncated_payload,
                                cat("read_volume: truncated payload in ", where, ": expected ", bytes, " bytes, got ",
                                    in.gcount()));
    if (in.peek() != std::ifstream::traits_type::eof())
        throw VolumeFormatError(VolumeErrorKind::length_mismatch,
                                cat("read_volume: length mismatch in ", where, ": trailing bytes after ", count,
                                    " values"));
    return VolumeOf<V>(grid, std::move(values));
}

// ---------------------------------------------------------------------------
// Manifest: a JSON array of {"subject", "laterality", "image", "mask", "fold"?}.
// Relative paths resolve against the manifest's directory.

enum class Laterality { left, right };

inline std::string to_string(Laterality l) { return l == Laterality::left ? "left" : "right"; }

inline Laterality parse_laterality(const std::string& s) {
    if (s == "left") return Laterality::left;
    if (s == "right") return Laterality::right;
    throw FormatError(cat("laterality must be 'left' or 'right', got '", s, "'"));
}

struct ManifestEntry {
    std::string subject;
    Laterality laterality = Laterality::left;
    fs::path image;
    fs::path mask;
    std::optional<int> fold;
};

using Manifest = std::vector<ManifestEntry>;

inline void validate_manifest(const Manifest& m, bool check_files) {
    std::set<std::string> seen;
    for (const auto& e : m) {
        if (e.subject.empty()) throw FormatError("manifest: empty subject id");
        if (!seen.insert(e.subject).second) throw FormatError(cat("manifest: duplicate subject '", e.subject, "'"));
        if (check_files) {
            if (!fs::exists(e.image)) throw FormatError(cat("manifest: missing image ", e.image.string()));
            if (!fs::exists(e.mask)) throw FormatError(cat("manifest: missing mask ", e.mask.string()));
        }
    }
}

inline Manifest load_manifest(const fs::path& path, bool check_files = true) {
    std::ifstream in(path);
    if (!in) throw FormatError(cat("manifest: cannot open ", path.string()));
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(cat("manifest: invalid JSON in ", path.string(), ": ", e.what()));
    }
    if (!j.is_array()) throw FormatError("manifest: top level must be an array");
    const fs::path base = path.parent_path();
    Manifest m;
    for (const auto& item : j) {
        try {
            ManifestEntry e;
            e.subject = item.at("subject").get<std::string>();
            e.laterality = parse_laterality(item.at("laterality").get<std::string>());
            e.image = base / item.at("image").get<std::string>();
            e.mask = base / item.at("mask").get<std::string>();
            if (item.contains("fold") && !item.at("fold").is_null()) e.fold = item.at("fold").get<int>();
            m.push_back(std::move(e));
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(cat("manifest: bad entry ", item.dump(), ": ", e.what()));
        }
    }
    validate_manifest(m, check_files);
    return m;
}

/// Writes paths relative to the manifest's directory where possible.
inline void save_manifest(const Manifest& m, const fs::path& path) {
    validate_manifest(m, false);
    const fs::path base = path.parent_path().empty() ? fs::path(".") : path.parent_path();
    auto rel = [&](const fs::path& p) { return fs::relative(p, base).generic_string(); };
    nlohmann::json j = nlohmann::json::array();
    for (const auto& e : m) {
        nlohmann::json item{{"subject", e.subject},
                            {"laterality", to_string(e.laterality)},
                            {"image", rel(e.image)},
                            {"mask", rel(e.mask)}};
        if (e.fold) item["fold"] = *e.fold;
        j.push_back(std::move(item));
    }
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::trunc);
    out << j.dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// Preprocessing

/// Keeps the centered `n` slices. An odd remainder leaves the extra slice in front.
template <class V>
VolumeOf<V> central_slab(const VolumeOf<V>& vol, std::size_t n) {
    const std::size_t s = vol.grid.slices();
    if (n == 0 || n > s) throw ShapeError(cat("central_slab: cannot keep ", n, " of ", s, " slices"));
    const std::size_t start = (s - n + 1) / 2;
    Grid g = vol.grid;
    g.extents[2] = n;
    const std::size_t plane = g.nx() * g.ny();
    std::vector<V> values(vol.values.begin() + static_cast<std::ptrdiff_t>(start * plane),
                          vol.values.begin() + static_cast<std::ptrdiff_t>((start + n) * plane));
    log_grid_change("central_slab", vol.grid, g);
    return VolumeOf<V>(g, std::move(values));
}

namespace detail {

// Catmull-Rom weights (a = -0.5) for fractional offset t in [0, 1).
inline std::array<double, 4> cubic_weights(double t) {
    constexpr double a = -0.5;
    auto k = [](double x) {
        x = std::abs(x);
        if (x <= 1) return (a + 2) * x * x * x - (a + 3) * x * x + 1;
        if (x < 2) return a * x * x * x - 5 * a * x * x + 8 * a * x - 4 * a;
        return 0.0;
    };
    return {k(1 + t), k(t), k(1 - t), k(2 - t)};
}

struct CubicTap {
    std::array<std::size_t, 4> src;
    std::array<double, 4> w;
};

// Center-aligned sampling positions with edge clamping.
inline std::vector<CubicTap> cubic_taps(std::size_t src, std::size_t dst) {
    std::vector<CubicTap> taps(dst);
    const double scale = static_cast<double>(src) / static_cast<double>(dst);
    for (std::size_t i = 0; i < dst; ++i) {
        const double pos = (static_cast<double>(i) + 0.5) * scale - 0.5;
        const double fl = std::floor(pos);
        taps[i].w = cubic_weights(pos - fl);
        for (int k = 0; k < 4; ++k) {
            const long j = std::clamp(static_cast<long>(fl) - 1 + k, 0L, static_cast<long>(src) - 1);
            taps[i].src[k] = static_cast<std::size_t>(j);
        }
    }
    return taps;
}

}  // namespace detail

/// Per-slice separable bicubic resampling to `nx` x `ny`; spacing scales with the extents.
inline Volume bicubic_resample(const Volume& vol, std::size_t nx, std::size_t ny) {
    if (nx < 2 || ny < 2) throw ShapeError(cat("bicubic_resample: target ", nx, "x", ny, " must be >= 2 per axis"));
    Grid g = vol.grid;
    g.extents = {nx, ny, vol.grid.slices()};
    g.spacing[0] = vol.grid.spacing[0] * static_cast<double>(vol.grid.nx()) / static_cast<double>(nx);
    g.spacing[1] = vol.grid.spacing[1] * static_cast<double>(vol.grid.ny()) / static_cast<double>(ny);
    const auto tx = detail::cubic_taps(vol.grid.nx(), nx);
    const auto ty = detail::cubic_taps(vol.grid.ny(), ny);
    Volume out(g);
    std::vector<double> rows(vol.grid.ny() * nx);
    for (std::size_t z = 0; z < g.slices(); ++z) {
        for (std::size_t y = 0; y < vol.grid.ny(); ++y)
            for (std::size_t x = 0; x < nx; ++x) {
                double s = 0;
                for (int k = 0; k < 4; ++k) s += tx[x].w[k] * vol.at(tx[x].src[k], y, z);
                rows[y * nx + x] = s;
            }
        for (std::size_t y = 0; y < ny; ++y)
            for (std::size_t x = 0; x < nx; ++x) {
                double s = 0;
                for (int k = 0; k < 4; ++k) s += ty[y].w[k] * rows[ty[y].src[k] * nx + x];
                out.at(x, y, z) = static_cast<float>(s);
            }
    }
    log_grid_change("bicubic_resample", vol.grid, g);
    return out;
}

/// Nearest-neighbour resampling of the in-plane axes.
template <class V>
VolumeOf<V> resample_nearest(const VolumeOf<V>& vol, std::size_t nx, std::size_t ny) {
    if (nx == 0 || ny == 0) throw ShapeError("resample_nearest: target extents must be positive");
    Grid g = vol.grid;
    g.extents = {nx, ny, vol.grid.slices()};
    g.spacing[0] = vol.grid.spacing[0] * static_cast<double>(vol.grid.nx()) / static_cast<double>(nx);
    g.spacing[1] = vol.grid.spacing[1] * static_cast<double>(vol.grid.ny()) / static_cast<double>(ny);
    auto nearest = [](std::size_t i, std::size_t src, std::size_t dst) {
        return std::min(src - 1, (2 * i + 1) * src / (2 * dst));
    };
    VolumeOf<V> out(g);
    for (std::size_t z = 0; z < g.slices(); ++z)
        for (std::size_t y = 0; y < ny; ++y)
            for (std::size_t x = 0; x < nx; ++x)
                out.at(x, y, z) = vol.at(nearest(x, vol.grid.nx(), nx), nearest(y, vol.grid.ny(), ny), z);
    log_grid_change("resample_nearest", vol.grid, g);
    return out;
}

/// Label upsampling back to a ground-truth grid; labels stay binary.
inline MaskVolume upsample_mask_nearest(const MaskVolume& mask, std::size_t nx, std::size_t ny) {
    MaskVolume out = resample_nearest(mask, nx, ny);
    for (auto& v : out.values) v = v ? 1 : 0;
    return out;
}

/// Zero-mean, unit-variance intensities (a constant volume maps to zeros).
inline Volume normalize(const Volume& vol) {
    double mean = 0;
    for (float v : vol.values) mean += v;
    mean /= static_cast<double>(vol.values.size());
    double var = 0;
    for (float v : vol.values) var += (v - mean) * (v - mean);
    const double sd = std::sqrt(var / static_cast<double>(vol.values.size()));
    Volume out = vol;
    for (auto& v : out.values) v = sd > 0 ? static_cast<float>((v - mean) / sd) : 0.0f;
    return out;
}

/// Slices (s-1, s, s+1) as a (1, 3, y, x) tensor; the edge slice is replicated at the borders.
template <class T>
Tensor<T> slice_triplets(const Volume& vol, std::size_t s) {
    const std::size_t n = vol.grid.slices();
    if (s >= n) throw ShapeError(cat("slice_triplets: slice ", s, " outside [0, ", n, ")"));
    const std::size_t plane = vol.grid.nx() * vol.grid.ny();
    Tensor<T> out({1, 3, vol.grid.ny(), vol.grid.nx()});
    const std::size_t picks[3] = {s == 0 ? 0 : s - 1, s, std::min(s + 1, n - 1)};
    for (std::size_t c = 0; c < 3; ++c)
        std::transform(vol.values.begin() + static_cast<std::ptrdiff_t>(picks[c] * plane),
                       vol.values.begin() + static_cast<std::ptrdiff_t>((picks[c] + 1) * plane),
                       out.data() + c * plane, [](float v) { return static_cast<T>(v); });
    return out;
}

/// Whole volume as a (1, 1, slices, y, x) tensor.
template <class T, class V>
Tensor<T> volume_tensor(const VolumeOf<V>& vol) {
    Tensor<T> out({1, 1, vol.grid.slices(), vol.grid.ny(), vol.grid.nx()});
    std::transform(vol.values.begin(), vol.values.end(), out.data(), [](V v) { return static_cast<T>(v); });
    return out;
}

/// Reverses the left-right (x) axis.
template <class V>
VolumeOf<V> flip_x(const VolumeOf<V>& vol) {
    VolumeOf<V> out = vol;
    const std::size_t nx = vol.grid.nx();
    for (std::size_t r = 0; r < vol.grid.ny() * vol.grid.slices(); ++r)
        std::reverse(out.values.begin() + static_cast<std::ptrdiff_t>(r * nx),
                     out.values.begin() + static_cast<std::ptrdiff_t>((r + 1) * nx));
    return out;
}

}  // namespace femseg
