#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include <unistd.h>

#include "femseg/data.hpp"
#include "femseg/phantom.hpp"

using namespace femseg;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
    const fs::path d = fs::temp_directory_path() / cat("femseg_test_", name, "_", ::getpid());
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

Grid grid(std::size_t x, std::size_t y, std::size_t z, std::array<double, 3> sp = {1, 1, 1}) {
    Grid g;
    g.extents = {x, y, z};
    g.spacing = sp;
    return g;
}

Volume ramp_volume(std::size_t x, std::size_t y, std::size_t z) {
    Volume v(grid(x, y, z));
    for (std::size_t i = 0; i < v.values.size(); ++i) v.values[i] = static_cast<float>(i % 97) * 0.25f;
    return v;
}

template <class V>
VolumeErrorKind read_error_kind(const fs::path& p) {
    try {
        read_volume<V>(p);
    } catch (const VolumeFormatError& e) {
        return e.kind();
    }
    ADD_FAILURE() << "no error for " << p;
    return VolumeErrorKind::io;
}

void write_raw(const fs::path& p, const std::string& header, std::size_t payload_bytes) {
    std::ofstream out(p, std::ios::binary);
    out.write(kVolumeMagic, 8);
    out << header << '\n';
    const std::string zeros(payload_bytes, '\0');
    out.write(zeros.data(), static_cast<std::streamsize>(zeros.size()));
}

}  // namespace

// --- volume files -----------------------------------------------------------

TEST(VolumeIo, RoundTripIsExact) {
    const auto dir = scratch_dir("roundtrip");
    Volume v = ramp_volume(5, 4, 3);
    v.grid.spacing = {0.234, 0.234, 1.5};
    write_volume(v, dir / "a.vol");
    const Volume back = read_volume<float>(dir / "a.vol");
    EXPECT_EQ(back.grid, v.grid);
    EXPECT_EQ(back.values, v.values);

    MaskVolume m(grid(3, 3, 2));
    m.values[4] = 1;
    write_volume(m, dir / "m.vol");
    EXPECT_EQ(read_volume<std::uint8_t>(dir / "m.vol"), m);
    fs::remove_all(dir);
}

TEST(VolumeIo, TruncatedPayloadIsReported) {
    const auto dir = scratch_dir("trunc");
    write_volume(ramp_volume(4, 4, 4), dir / "a.vol");
    fs::resize_file(dir / "a.vol", fs::file_size(dir / "a.vol") - 5);
    EXPECT_EQ(read_error_kind<float>(dir / "a.vol"), VolumeErrorKind::truncated_payload);
    fs::remove_all(dir);
}

TEST(VolumeIo, DeclaredCountMustMatchExtents) {
    const auto dir = scratch_dir("mismatch");
    write_raw(dir / "a.vol",
              R"({"extents":[2,2,2],"spacing":[1,1,1],"scalar_type":"float32","axis_order":"x,y,slice","values":7})",
              7 * 4);
    EXPECT_EQ(read_error_kind<float>(dir / "a.vol"), VolumeErrorKind::length_mismatch);
    try {
        read_volume<float>(dir / "a.vol");
    } catch (const VolumeFormatError& e) {
        EXPECT_NE(std::string(e.what()).find("length mismatch"), std::string::npos);
    }
    fs::remove_all(dir);
}

TEST(VolumeIo, DistinctDiagnostics) {
    const auto dir = scratch_dir("diag");
    {
        std::ofstream out(dir / "magic.vol", std::ios::binary);
        out << "NOTAVOL!{}\n";
    }
    EXPECT_EQ(read_error_kind<float>(dir / "magic.vol"), VolumeErrorKind::bad_magic);
    write_raw(dir / "header.vol", "{not json", 0);
    EXPECT_EQ(read_error_kind<float>(dir / "header.vol"), VolumeErrorKind::bad_header);
    write_raw(dir / "trailing.vol",
              R"({"extents":[1,1,2],"spacing":[1,1,1],"scalar_type":"uint8","axis_order":"x,y,slice","values":2})", 3);
    EXPECT_EQ(read_error_kind<std::uint8_t>(dir / "trailing.vol"), VolumeErrorKind::length_mismatch);
    write_volume(ramp_volume(2, 2, 2), dir / "f.vol");
    EXPECT_EQ(read_error_kind<std::uint8_t>(dir / "f.vol"), VolumeErrorKind::scalar_type);
    EXPECT_EQ(read_error_kind<float>(dir / "missing.vol"), VolumeErrorKind::io);
    fs::remove_all(dir);
}

// --- manifest ---------------------------------------------------------------

TEST(Manifest, RoundTripKeepsOrderAndResolvesPaths) {
    const auto dir = scratch_dir("manifest");
    Manifest m;
    for (int i = 0; i < 3; ++i) {
        const auto img = dir / cat("s", i) / "image.vol", msk = dir / cat("s", i) / "mask.vol";
        write_volume(ramp_volume(2, 2, 1), img);
        write_volume(MaskVolume(grid(2, 2, 1)), msk);
        m.push_back({cat("s", 2 - i), i % 2 ? Laterality::right : Laterality::left, img, msk,
                     i == 1 ? std::optional<int>(3) : std::nullopt});
    }
    save_manifest(m, dir / "manifest.json");
    const Manifest back = load_manifest(dir / "manifest.json");
    ASSERT_EQ(back.size(), 3u);
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_EQ(back[i].subject, m[i].subject);
        EXPECT_EQ(back[i].laterality, m[i].laterality);
        EXPECT_EQ(back[i].fold, m[i].fold);
        EXPECT_TRUE(fs::equivalent(back[i].image, m[i].image));
    }
    fs::remove_all(dir);
}

TEST(Manifest, RejectsDuplicatesAndMissingFiles) {
    const auto dir = scratch_dir("manifest_bad");
    {
        std::ofstream out(dir / "dup.json");
        out << R"([{"subject":"a","laterality":"left","image":"x","mask":"y"},
                   {"subject":"a","laterality":"right","image":"x","mask":"y"}])";
    }
    EXPECT_THROW(load_manifest(dir / "dup.json", false), FormatError);
    {
        std::ofstream out(dir / "missing.json");
        out << R"([{"subject":"a","laterality":"left","image":"nope.vol","mask":"nope.vol"}])";
    }
    EXPECT_THROW(load_manifest(dir / "missing.json"), FormatError);
    EXPECT_NO_THROW(load_manifest(dir / "missing.json", false));
    {
        std::ofstream out(dir / "side.json");
        out << R"([{"subject":"a","laterality":"up","image":"x","mask":"y"}])";
    }
    EXPECT_THROW(load_manifest(dir / "side.json", false), FormatError);
    fs::remove_all(dir);
}

// --- preprocessing ----------------------------------------------------------

TEST(CentralSlab, SixtySlicesKeepSixThroughFiftyThree) {
    Volume v(grid(2, 2, 60, {0.2, 0.2, 1.5}));
    for (std::size_t z = 0; z < 60; ++z)
        for (std::size_t i = 0; i < 4; ++i) v.values[z * 4 + i] = static_cast<float>(z);
    const Volume s = central_slab(v, 48);
    ASSERT_EQ(s.grid.slices(), 48u);
    EXPECT_EQ(s.at(0, 0, 0), 6.0f);
    EXPECT_EQ(s.at(1, 1, 47), 53.0f);
    EXPECT_EQ(s.grid.spacing, v.grid.spacing);
}

TEST(CentralSlab, OddRemainderAndIdentity) {
    Volume v(grid(1, 1, 7));
    for (std::size_t z = 0; z < 7; ++z) v.values[z] = static_cast<float>(z);
    EXPECT_EQ(central_slab(v, 4).values, (std::vector<float>{2, 3, 4, 5}));
    EXPECT_EQ(central_slab(v, 7), v);
    EXPECT_THROW(central_slab(v, 8), ShapeError);
}

TEST(Bicubic, ConstantSliceStaysConstant) {
    Volume v(grid(9, 7, 2), 3.25f);
    const Volume r = bicubic_resample(v, 16, 5);
    ASSERT_EQ(r.grid.extents, (std::array<std::size_t, 3>{16, 5, 2}));
    for (float x : r.values) EXPECT_NEAR(x, 3.25f, 1e-6);
}

TEST(Bicubic, LinearRampIsReproduced) {
    // Center-aligned sampling: output i maps to source (i + 0.5) * n/m - 0.5.
    // Points that need an edge-clamped tap are excluded.
    const std::size_t n = 32, m = 16;
    Volume v(grid(n, n, 1));
    for (std::size_t y = 0; y < n; ++y)
        for (std::size_t x = 0; x < n; ++x) v.at(x, y, 0) = static_cast<float>(0.01 * x - 0.02 * y);
    const Volume r = bicubic_resample(v, m, m);
    const double s = static_cast<double>(n) / m;
    for (std::size_t y = 1; y + 1 < m; ++y)
        for (std::size_t x = 1; x + 1 < m; ++x) {
            const double sx = (x + 0.5) * s - 0.5, sy = (y + 0.5) * s - 0.5;
            EXPECT_NEAR(r.at(x, y, 0), 0.01 * sx - 0.02 * sy, 1e-6);
        }
}

TEST(Bicubic, SpacingScalesWithExtents) {
    const Volume r = bicubic_resample(Volume(grid(512, 256, 1, {0.234, 0.5, 1.5})), 256, 256);
    EXPECT_DOUBLE_EQ(r.grid.spacing[0], 0.468);
    EXPECT_DOUBLE_EQ(r.grid.spacing[1], 0.5);
    EXPECT_DOUBLE_EQ(r.grid.spacing[2], 1.5);
}

TEST(Bicubic, DownThenNearestUpBoundedOnSmoothField) {
    const std::size_t n = 128;
    Volume v(grid(n, n, 1));
    for (std::size_t y = 0; y < n; ++y)
        for (std::size_t x = 0; x < n; ++x)
            v.at(x, y, 0) = static_cast<float>(std::sin(x * 0.05) * std::cos(y * 0.04));
    const Volume back = resample_nearest(bicubic_resample(v, n / 2, n / 2), n, n);
    // Nearest upsampling shifts by at most half a coarse voxel (one fine voxel);
    // the field's slope is below 0.05 per voxel.
    double worst = 0;
    for (std::size_t i = 0; i < v.values.size(); ++i)
        worst = std::max(worst, static_cast<double>(std::abs(back.values[i] - v.values[i])));
    EXPECT_LT(worst, 0.1);
}

TEST(UpsampleMask, SingleVoxelBecomesBlock) {
    MaskVolume m(grid(3, 3, 1));
    m.at(1, 2, 0) = 1;
    const MaskVolume u = upsample_mask_nearest(m, 6, 6);
    for (std::size_t y = 0; y < 6; ++y)
        for (std::size_t x = 0; x < 6; ++x)
            EXPECT_EQ(u.at(x, y, 0), (x / 2 == 1 && y / 2 == 2) ? 1 : 0) << x << "," << y;
}

TEST(UpsampleMask, SameExtentsIsIdentityAndLabelsStayBinary) {
    MaskVolume m(grid(5, 4, 2));
    for (std::size_t i = 0; i < m.values.size(); ++i) m.values[i] = i % 3 == 0 ? 7 : 0;
    const MaskVolume same = upsample_mask_nearest(m, 5, 4);
    for (std::size_t i = 0; i < m.values.size(); ++i) EXPECT_EQ(same.values[i], m.values[i] ? 1 : 0);
    for (auto v : upsample_mask_nearest(m, 13, 9).values) EXPECT_TRUE(v == 0 || v == 1);
}

TEST(SliceTriplets, EdgesReplicateAndInteriorIsExact) {
    Volume v(grid(2, 3, 5));
    for (std::size_t z = 0; z < 5; ++z)
        for (std::size_t i = 0; i < 6; ++i) v.values[z * 6 + i] = static_cast<float>(10 * z + i);
    auto channel_slice = [](const Tensor<double>& t, std::size_t c) { return t[c * 6] / 10; };
    const auto first = slice_triplets<double>(v, 0);
    ASSERT_EQ(first.shape(), (Shape{1, 3, 3, 2}));
    EXPECT_EQ(channel_slice(first, 0), 0);
    EXPECT_EQ(channel_slice(first, 1), 0);
    EXPECT_EQ(channel_slice(first, 2), 1);
    const auto mid = slice_triplets<double>(v, 2);
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(mid[c * 6 + i], v.values[(1 + c) * 6 + i]);
    const auto last = slice_triplets<double>(v, 4);
    EXPECT_EQ(last.extent(1), 3u);
    EXPECT_EQ(channel_slice(last, 0), 3);
    EXPECT_EQ(channel_slice(last, 2), 4);
    EXPECT_THROW(slice_triplets<double>(v, 5), ShapeError);
}

TEST(Normalize, ZeroMeanUnitVariance) {
    const Volume n = normalize(ramp_volume(8, 8, 4));
    double mean = 0, var = 0;
    for (float v : n.values) mean += v;
    mean /= n.values.size();
    for (float v : n.values) var += (v - mean) * (v - mean);
    EXPECT_NEAR(mean, 0, 1e-6);
    EXPECT_NEAR(var / n.values.size(), 1, 1e-5);
}

// --- phantoms ---------------------------------------------------------------

TEST(Phantom, SameSeedIsBitIdentical) {
    const auto a = generate_phantom(17), b = generate_phantom(17), c = generate_phantom(18);
    EXPECT_EQ(a.image, b.image);
    EXPECT_EQ(a.mask, b.mask);
    EXPECT_EQ(a.laterality, b.laterality);
    EXPECT_NE(a.image, c.image);
}

TEST(Phantom, ForegroundFractionOverHundredSeeds) {
    for (std::uint64_t s = 0; s < 100; ++s) {
        const double f = foreground_fraction(generate_phantom(s).mask);
        EXPECT_GE(f, 0.03) << "seed " << s;
        EXPECT_LE(f, 0.25) << "seed " << s;
    }
}

TEST(Phantom, LateralityMatchesShaftSide) {
    // The shaft leaves the bottom rows; its columns sit right of center for a
    // right femur and left of center for a left femur.
    int seen[2] = {0, 0};
    for (std::uint64_t s = 0; s < 20; ++s) {
        const auto p = generate_phantom(s);
        const std::size_t nx = p.mask.grid.nx(), y = p.mask.grid.ny() - 1;
        double sum = 0, n = 0;
        for (std::size_t z = 0; z < p.mask.grid.slices(); ++z)
            for (std::size_t x = 0; x < nx; ++x)
                if (p.mask.at(x, y, z)) sum += x, ++n;
        ASSERT_GT(n, 0) << "seed " << s;
        const bool right_of_center = sum / n > nx / 2.0;
        EXPECT_EQ(right_of_center, p.laterality == Laterality::right) << "seed " << s;
        ++seen[p.laterality == Laterality::right];
    }
    EXPECT_GT(seen[0], 0);
    EXPECT_GT(seen[1], 0);
}

TEST(Phantom, RejectsSmallExtents) {
    PhantomOptions o;
    o.extents = {16, 64, 8};
    EXPECT_THROW(generate_phantom(1, o), ShapeError);
}
