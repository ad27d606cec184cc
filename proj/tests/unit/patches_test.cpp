#include <cmath>
#include <filesystem>
#include <numbers>
#include <set>

#include <gtest/gtest.h>

#include "sarwsl/patches.hpp"
#include "sarwsl/synth.hpp"

using namespace sarwsl;

namespace {

struct Scene {
    Raster sar;
    ClassMap truth;
};

Scene make_scene(std::size_t h, std::size_t w, std::uint64_t seed = 7)
{
    SceneSpec spec;
    spec.seed = seed;
    spec.height = h;
    spec.width = w;
    spec.blob_scale = 4;
    Scene s;
    s.truth = generate_truth(spec);
    s.sar = render_sar(s.truth, spec);
    return s;
}

// Single sample whose input channel 0 is a ramp and whose labels split the patch
// into forest (x < w/2) and non-forest.
PatchSet half_plane(std::size_t side)
{
    PatchSet p(1, side, side, 2);
    for (std::size_t y = 0; y < side; ++y)
        for (std::size_t x = 0; x < side; ++x) {
            const std::size_t i = y * side + x;
            p.labels[i] = x < side / 2 ? kForest : kNonForest;
            p.inputs[2 * i] = static_cast<float>(y * side + x);
            p.inputs[2 * i + 1] = -static_cast<float>(x);
        }
    return p;
}

std::set<std::size_t> retained(const PatchSet& p, std::size_t i)
{
    std::set<std::size_t> out;
    for (std::size_t k = 0; k < p.plane(); ++k)
        if (p.mask[i * p.plane() + k])
            out.insert(k);
    return out;
}

} // namespace

TEST(ExtractPatches, ShapesFollowPatchAndCount)
{
    const Scene s = make_scene(512, 512);
    const PatchSet p = extract_patches(s.sar, s.truth, 64, 100, 1);
    EXPECT_EQ(p.count, 100u);
    EXPECT_EQ(p.height, 64u);
    EXPECT_EQ(p.width, 64u);
    EXPECT_EQ(p.channels, 2u);
    EXPECT_EQ(p.inputs.size(), 100u * 64 * 64 * 2);
    EXPECT_EQ(p.labels.size(), 100u * 64 * 64);
    EXPECT_TRUE(p.mask_all_set());
}

TEST(ExtractPatches, ContentMatchesSourceAtCorner)
{
    const Scene s = make_scene(128, 96);
    const PatchSet p = extract_patches(s.sar, s.truth, 16, 20, 2);
    for (std::size_t i = 0; i < p.count; ++i) {
        const auto [r0, c0] = p.corners[i];
        ASSERT_LE(r0 + 16, 128u);
        ASSERT_LE(c0 + 16, 96u);
        for (std::size_t y = 0; y < 16; y += 5)
            for (std::size_t x = 0; x < 16; x += 3) {
                const std::size_t q = (i * 16 + y) * 16 + x;
                EXPECT_EQ(p.labels[q], s.truth.at(r0 + y, c0 + x));
                EXPECT_EQ(p.inputs[2 * q + 1], s.sar.at(1, r0 + y, c0 + x));
            }
    }
}

TEST(ExtractPatches, PatchLargerThanRasterIsError)
{
    const Scene s = make_scene(32, 32);
    EXPECT_THROW(extract_patches(s.sar, s.truth, 64, 1, 1), std::invalid_argument);
    EXPECT_THROW(extract_patches(s.sar, ClassMap(32, 31), 8, 1, 1), std::invalid_argument);
}

TEST(ExtractPatches, SameSeedSameCorners)
{
    const Scene s = make_scene(128, 128);
    const PatchSet a = extract_patches(s.sar, s.truth, 32, 50, 9), b = extract_patches(s.sar, s.truth, 32, 50, 9);
    EXPECT_EQ(a.corners, b.corners);
    EXPECT_NE(a.corners, extract_patches(s.sar, s.truth, 32, 50, 10).corners);
}

TEST(ExtractPatches, AvoidsUnlabeledAndNodataWindows)
{
    Scene s = make_scene(64, 64);
    for (std::size_t y = 0; y < 64; ++y)
        for (std::size_t x = 0; x < 32; ++x)
            s.truth.at(y, x) = kUnlabeled;
    s.sar.at(0, 10, 60) = std::numeric_limits<float>::quiet_NaN();
    const PatchSet p = extract_patches(s.sar, s.truth, 16, 40, 3);
    for (const auto& [r, c] : p.corners) {
        EXPECT_GE(c, 32u);
        EXPECT_FALSE(r <= 10 && r + 16 > 10 && c + 16 > 60);
    }
    for (std::size_t y = 0; y < 64; ++y)
        s.truth.at(y, 40) = kUnlabeled;
    EXPECT_THROW(extract_patches(s.sar, s.truth, 32, 1, 3), std::runtime_error);
}

TEST(MaskLabels, ExactlyRoundedCountPerPatch)
{
    const Scene s = make_scene(256, 256);
    const PatchSet p = extract_patches(s.sar, s.truth, 64, 10, 1);
    const PatchSet m = mask_labels(p, 0.02, 5);
    for (std::size_t i = 0; i < m.count; ++i)
        EXPECT_EQ(m.mask_count(i), 82u);
    EXPECT_EQ(m.labels, p.labels);
    EXPECT_EQ(m.inputs, p.inputs);
}

TEST(MaskLabels, FullKeepIsIdentity)
{
    const Scene s = make_scene(128, 128);
    const PatchSet p = extract_patches(s.sar, s.truth, 32, 5, 1);
    EXPECT_EQ(mask_labels(p, 1.0, 5), p);
}

TEST(MaskLabels, PatchesDrawIndependentSets)
{
    const Scene s = make_scene(128, 128);
    const PatchSet m = mask_labels(extract_patches(s.sar, s.truth, 64, 2, 1), 0.02, 5);
    EXPECT_NE(retained(m, 0), retained(m, 1));
    EXPECT_EQ(retained(m, 0), retained(mask_labels(m, 0.02, 5), 0));
}

TEST(MaskLabels, RejectsNonPositiveFraction)
{
    PatchSet p(1, 4, 4, 2);
    EXPECT_THROW(mask_labels(p, 0.0, 1), std::invalid_argument);
    EXPECT_THROW(mask_labels(p, -0.1, 1), std::invalid_argument);
    EXPECT_THROW(mask_labels(p, 1.5, 1), std::invalid_argument);
}

TEST(Augment, DoubleFlipAtZeroAngleIsIdentity)
{
    const Scene s = make_scene(128, 128);
    const PatchSet p = mask_labels(extract_patches(s.sar, s.truth, 32, 3, 1), 0.3, 2);
    PatchSet q = p;
    for (std::size_t i = 0; i < q.count; ++i) {
        transform_sample(q, i, true, 0.0);
        transform_sample(q, i, true, 0.0);
    }
    EXPECT_EQ(q, p);
    PatchSet once = p;
    transform_sample(once, 0, true, 0.0);
    EXPECT_NE(once, p);
    EXPECT_EQ(once.labels[0], p.labels[31 * 32]);
}

TEST(Augment, RotatedHalfPlaneKeepsClasses)
{
    const std::size_t side = 32;
    const double c = (side - 1) / 2.0;
    for (double angle : {-20.0, -7.5, 13.0, 20.0}) {
        PatchSet p = half_plane(side);
        transform_sample(p, 0, false, angle);
        const double t = angle * std::numbers::pi / 180.0;
        std::size_t checked = 0;
        for (std::size_t y = 0; y < side; ++y)
            for (std::size_t x = 0; x < side; ++x) {
                const std::size_t i = y * side + x;
                if (!p.mask[i])
                    continue;
                // Source column of this output pixel under the inverse rotation.
                const double sx = c + std::cos(t) * (x - c) + std::sin(t) * (y - c);
                if (std::abs(sx - (side / 2.0 - 0.5)) < 1.0)
                    continue;
                EXPECT_EQ(p.labels[i], sx < side / 2.0 ? kForest : kNonForest) << angle << " " << y << "," << x;
                ++checked;
            }
        EXPECT_GT(checked, side * side / 2);
    }
}

TEST(Augment, OutOfBoundsSourcesAreMaskedOut)
{
    const std::size_t side = 32;
    PatchSet p = half_plane(side);
    transform_sample(p, 0, false, 20.0);
    const double t = 20.0 * std::numbers::pi / 180.0, c = (side - 1) / 2.0;
    std::size_t masked = 0;
    for (std::size_t y = 0; y < side; ++y)
        for (std::size_t x = 0; x < side; ++x) {
            const double sx = c + std::cos(t) * (x - c) + std::sin(t) * (y - c);
            const double sy = c - std::sin(t) * (x - c) + std::cos(t) * (y - c);
            const bool outside = std::round(sx) < 0 || std::round(sx) > side - 1 || std::round(sy) < 0 ||
                                 std::round(sy) > side - 1;
            if (outside) {
                EXPECT_EQ(p.mask[y * side + x], 0) << y << "," << x;
                ++masked;
            }
        }
    EXPECT_GT(masked, 0u);
    EXPECT_EQ(p.mask[0], 0);
}

TEST(Augment, MaskNeverGrowsAndCodesStayBinary)
{
    const Scene s = make_scene(128, 128);
    const PatchSet p = mask_labels(extract_patches(s.sar, s.truth, 32, 40, 1), 0.5, 2);
    const PatchSet a = augment(p, 17);
    EXPECT_EQ(a.count, p.count);
    EXPECT_EQ(a.height, p.height);
    std::size_t before = 0, after = 0;
    for (std::size_t i = 0; i < a.labels.size(); ++i) {
        ASSERT_TRUE(a.labels[i] == kForest || a.labels[i] == kNonForest);
        before += p.mask[i];
        after += a.mask[i];
    }
    EXPECT_LE(after, before);
    EXPECT_EQ(a, augment(p, 17));
}

TEST(Augment, SampleDependsOnlyOnSeedAndIndex)
{
    const Scene s = make_scene(128, 128);
    const PatchSet p = extract_patches(s.sar, s.truth, 32, 6, 1);
    const PatchSet full = augment(p, 3);
    const PatchSet part = augment(p.gather({0, 1, 2}), 3);
    const std::size_t n = 3 * p.plane();
    EXPECT_TRUE(std::equal(part.labels.begin(), part.labels.end(), full.labels.begin()));
    EXPECT_TRUE(std::equal(part.mask.begin(), part.mask.begin() + static_cast<std::ptrdiff_t>(n), full.mask.begin()));
}

TEST(SplitScene, FloorArithmetic)
{
    const auto [train, val] = split_scene(full_extent(512, 512), 0.8, 64);
    EXPECT_EQ(train.col, 0u);
    EXPECT_EQ(train.col_end() - 1, 409u);
    EXPECT_EQ(val.col, 410u);
    EXPECT_EQ(val.col_end() - 1, 511u);
    EXPECT_EQ(train.height, 512u);
}

TEST(SplitScene, NarrowSideIsError)
{
    EXPECT_THROW(split_scene(full_extent(128, 128), 0.99, 64), std::invalid_argument);
    EXPECT_THROW(split_scene(full_extent(128, 128), 0.0, 8), std::invalid_argument);
    EXPECT_THROW(split_scene(full_extent(128, 128), 1.0, 8), std::invalid_argument);
}

TEST(SplitScene, TrainWindowsNeverEnterValidation)
{
    const Scene s = make_scene(128, 160);
    const std::size_t patch = 16;
    const auto [train, val] = split_scene(full_extent(128, 160), 0.7, patch);
    const PatchSet t = extract_patches(s.sar, s.truth, train, patch, 2000, 4);
    const PatchSet v = extract_patches(s.sar, s.truth, val, patch, 500, 5);
    std::set<std::size_t> cols;
    for (const auto& [r, c] : t.corners) {
        ASSERT_LT(c + patch - 1, val.col);
        cols.insert(c);
    }
    EXPECT_EQ(cols.size(), train.width - patch + 1); // every legal corner column was drawn
    for (const auto& [r, c] : v.corners)
        ASSERT_GE(c, val.col);
}

TEST(SampleTrainVal, SetsComeFromDisjointStrips)
{
    const Scene s = make_scene(128, 128);
    const SamplingConfig cfg{16, 30, 10, 0.75};
    const TrainValPatches tv = sample_train_val(s.sar, s.truth, cfg, 1);
    EXPECT_EQ(tv.train.count, 30u);
    EXPECT_EQ(tv.val.count, 10u);
    for (const auto& [r, c] : tv.train.corners)
        EXPECT_LE(c + 16, 97u);
    for (const auto& [r, c] : tv.val.corners)
        EXPECT_GE(c, 97u);
}

TEST(PatchSetIo, RoundTripIncludingMaskAndCorners)
{
    const Scene s = make_scene(96, 96);
    const PatchSet p = mask_labels(extract_patches(s.sar, s.truth, 16, 7, 1), 0.1, 2);
    const auto dir = std::filesystem::temp_directory_path() / "sarwsl_patchset";
    std::filesystem::remove_all(dir);
    save_patch_set(p, dir, 1);
    for (const char* f : {"inputs.wslr", "labels.wslr", "mask.wslr", "manifest.txt"})
        EXPECT_TRUE(std::filesystem::exists(dir / f)) << f;
    EXPECT_EQ(read_raster(dir / "inputs.wslr").bands, 14u);
    EXPECT_EQ(load_patch_set(dir), p);
    std::filesystem::remove(dir / "manifest.txt");
    EXPECT_THROW(load_patch_set(dir), FormatError);
}
