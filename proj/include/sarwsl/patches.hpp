#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "sarwsl/random.hpp"
#include "sarwsl/raster.hpp"

namespace sarwsl {

/// Rectangular window of a scene, in pixels.
struct Extent {
    std::size_t row = 0;
    std::size_t col = 0;
    std::size_t height = 0;
    std::size_t width = 0;

    std::size_t col_end() const { return col + width; }
    std::size_t row_end() const { return row + height; }
    bool operator==(const Extent&) const = default;
};

inline Extent full_extent(std::size_t height, std::size_t width) { return {0, 0, height, width}; }

/// Aligned input, label and loss-mask stacks. Inputs are N x H x W x C (NHWC),
/// labels and mask are N x H x W with mask 1 where the pixel contributes to the loss.
struct PatchSet {
    std::size_t count = 0;
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t channels = 2;
    std::vector<float> inputs;
    std::vector<std::uint8_t> labels;
    std::vector<std::uint8_t> mask;
    std::vector<std::pair<std::size_t, std::size_t>> corners; // (row, col) per patch in the source scene

    PatchSet() = default;
    PatchSet(std::size_t n, std::size_t h, std::size_t w, std::size_t c)
        : count(n), height(h), width(w), channels(c), inputs(n * h * w * c, 0.0f), labels(n * h * w, kNonForest),
          mask(n * h * w, 1), corners(n)
    {}

    std::size_t plane() const { return height * width; }

    bool mask_all_set() const
    {
        return std::all_of(mask.begin(), mask.end(), [](std::uint8_t m) { return m == 1; });
    }

    std::size_t mask_count(std::size_t i) const
    {
        return static_cast<std::size_t>(std::count(mask.begin() + static_cast<std::ptrdiff_t>(i * plane()),
                                                   mask.begin() + static_cast<std::ptrdiff_t>((i + 1) * plane()), 1));
    }

    /// Copies the listed samples, in order, into a new set.
    PatchSet gather(const std::vector<std::size_t>& indices) const
    {
        PatchSet out(indices.size(), height, width, channels);
        const std::size_t in_stride = plane() * channels;
        for (std::size_t k = 0; k < indices.size(); ++k) {
            const std::size_t i = indices[k];
            std::copy_n(inputs.begin() + static_cast<std::ptrdiff_t>(i * in_stride), in_stride,
                        out.inputs.begin() + static_cast<std::ptrdiff_t>(k * in_stride));
            std::copy_n(labels.begin() + static_cast<std::ptrdiff_t>(i * plane()), plane(),
                        out.labels.begin() + static_cast<std::ptrdiff_t>(k * plane()));
            std::copy_n(mask.begin() + static_cast<std::ptrdiff_t>(i * plane()), plane(),
                        out.mask.begin() + static_cast<std::ptrdiff_t>(k * plane()));
            out.corners[k] = corners[i];
        }
        return out;
    }

    bool operator==(const PatchSet&) const = default;
};

/// Samples `count` windows of side `patch` with uniform random top-left
/// corners inside `extent`. Windows touching nodata or unlabeled pixels are
/// redrawn, up to a retry cap per patch.
inline PatchSet extract_patches(const Raster& raster, const ClassMap& labels, const Extent& extent, std::size_t patch,
                                std::size_t count, std::uint64_t seed, std::size_t retry_cap = 1000)
{
    if (raster.height != labels.height || raster.width != labels.width)
        throw std::invalid_argument("extract_patches: raster and labels differ in size");
    if (patch == 0)
        throw std::invalid_argument("extract_patches: patch size must be positive");
    if (extent.row_end() > raster.height || extent.col_end() > raster.width)
        throw std::invalid_argument("extract_patches: extent exceeds raster");
    if (extent.height < patch || extent.width < patch)
        throw std::invalid_argument("extract_patches: region " + std::to_string(extent.height) + "x" +
                                    std::to_string(extent.width) + " is smaller than patch " + std::to_string(patch));

    PatchSet out(count, patch, patch, raster.bands);
    Rng rng(substream(seed, "patches.corners"));
    const std::size_t rows = extent.height - patch + 1;
    const std::size_t cols = extent.width - patch + 1;

    const auto window_ok = [&](std::size_t r0, std::size_t c0) {
        for (std::size_t y = r0; y < r0 + patch; ++y)
            for (std::size_t x = c0; x < c0 + patch; ++x) {
                if (labels.at(y, x) == kUnlabeled)
                    return false;
                for (std::size_t b = 0; b < raster.bands; ++b)
                    if (raster.is_nodata(raster.at(b, y, x)))
                        return false;
            }
        return true;
    };

    for (std::size_t i = 0; i < count; ++i) {
        std::size_t r0 = 0, c0 = 0, attempt = 0;
        for (;; ++attempt) {
            if (attempt == retry_cap)
                throw std::runtime_error("extract_patches: no valid window found after " + std::to_string(retry_cap) +
                                         " draws (too many nodata/unlabeled pixels)");
            r0 = extent.row + rng.below(rows);
            c0 = extent.col + rng.below(cols);
            if (window_ok(r0, c0))
                break;
        }
        out.corners[i] = {r0, c0};
        for (std::size_t y = 0; y < patch; ++y)
            for (std::size_t x = 0; x < patch; ++x) {
                const std::size_t p = (i * patch + y) * patch + x;
                out.labels[p] = labels.at(r0 + y, c0 + x);
                for (std::size_t b = 0; b < raster.bands; ++b)
                    out.inputs[p * raster.bands + b] = raster.at(b, r0 + y, c0 + x);
            }
    }
    return out;
}

inline PatchSet extract_patches(const Raster& raster, const ClassMap& labels, std::size_t patch, std::size_t count,
                                std::uint64_t seed)
{
    return extract_patches(raster, labels, full_extent(raster.height, raster.width), patch, count, seed);
}

/// Keeps exactly round(keep_fraction * H * W) uniformly chosen pixels per
/// patch in the loss mask; labels are left untouched.
inline PatchSet mask_labels(PatchSet patches, double keep_fraction, std::uint64_t seed)
{
    if (!(keep_fraction > 0.0 && keep_fraction <= 1.0))
        throw std::invalid_argument("mask_labels: keep_fraction must lie in (0, 1]");
    const std::size_t plane = patches.plane();
    const auto keep = static_cast<std::size_t>(std::llround(keep_fraction * static_cast<double>(plane)));
    std::vector<std::size_t> order(plane);
    for (std::size_t i = 0; i < patches.count; ++i) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng rng(substream(seed, {i}));
        // Partial Fisher-Yates: the first `keep` slots are a uniform sample.
        for (std::size_t k = 0; k < keep; ++k)
            std::swap(order[k], order[k + rng.below(plane - k)]);
        std::uint8_t* m = patches.mask.data() + i * plane;
        std::fill(m, m + plane, std::uint8_t{0});
        for (std::size_t k = 0; k < keep; ++k)
            m[order[k]] = 1;
    }
    return patches;
}

/// Vertical flip (row reversal) followed by rotation about the patch centre.
/// Inputs are resampled bilinearly with clamped edges; labels and mask use
/// nearest neighbour, and pixels whose source falls outside the patch get mask 0.
inline void transform_sample(PatchSet& set, std::size_t index, bool flip, double angle_deg)
{
    const std::size_t h = set.height, w = set.width, c = set.channels;
    float* in = set.inputs.data() + index * h * w * c;
    std::uint8_t* lab = set.labels.data() + index * h * w;
    std::uint8_t* msk = set.mask.data() + index * h * w;

    if (flip) {
        for (std::size_t y = 0; y < h / 2; ++y) {
            const std::size_t o = h - 1 - y;
            std::swap_ranges(in + y * w * c, in + (y + 1) * w * c, in + o * w * c);
            std::swap_ranges(lab + y * w, lab + (y + 1) * w, lab + o * w);
            std::swap_ranges(msk + y * w, msk + (y + 1) * w, msk + o * w);
        }
    }
    if (angle_deg == 0.0)
        return;

    const std::vector<float> src_in(in, in + h * w * c);
    const std::vector<std::uint8_t> src_lab(lab, lab + h * w);
    const std::vector<std::uint8_t> src_msk(msk, msk + h * w);
    const double theta = angle_deg * std::numbers::pi / 180.0;
    const double cs = std::cos(theta), sn = std::sin(theta);
    const double cy = (static_cast<double>(h) - 1.0) / 2.0, cx = (static_cast<double>(w) - 1.0) / 2.0;
    const double max_x = static_cast<double>(w - 1), max_y = static_cast<double>(h - 1);

    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
            const double sx = cx + cs * dx + sn * dy;
            const double sy = cy - sn * dx + cs * dy;
            const double nx = std::round(sx), ny = std::round(sy);
            const bool inside = nx >= 0.0 && nx <= max_x && ny >= 0.0 && ny <= max_y;
            const auto ix = static_cast<std::size_t>(std::clamp(nx, 0.0, max_x));
            const auto iy = static_cast<std::size_t>(std::clamp(ny, 0.0, max_y));
            const std::size_t p = y * w + x;
            lab[p] = src_lab[iy * w + ix];
            msk[p] = inside ? src_msk[iy * w + ix] : std::uint8_t{0};

            const double bx = std::clamp(sx, 0.0, max_x), by = std::clamp(sy, 0.0, max_y);
            const auto x0 = static_cast<std::size_t>(std::floor(bx)), y0 = static_cast<std::size_t>(std::floor(by));
            const std::size_t x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
            const double fx = bx - static_cast<double>(x0), fy = by - static_cast<double>(y0);
            for (std::size_t ch = 0; ch < c; ++ch) {
                const double v00 = src_in[(y0 * w + x0) * c + ch], v01 = src_in[(y0 * w + x1) * c + ch];
                const double v10 = src_in[(y1 * w + x0) * c + ch], v11 = src_in[(y1 * w + x1) * c + ch];
                const double top = v00 + fx * (v01 - v00);
                const double bottom = v10 + fx * (v11 - v10);
                in[p * c + ch] = static_cast<float>(top + fy * (bottom - top));
            }
        }
}

inline constexpr double kMaxRotationDeg = 20.0;

/// Random vertical flip (p = 0.5) and rotation in [-20, +20] degrees per
/// sample; sample i draws from its own substream of `seed`.
inline PatchSet augment(PatchSet batch, std::uint64_t seed)
{
    for (std::size_t i = 0; i < batch.count; ++i) {
        Rng rng(substream(seed, {i}));
        const bool flip = rng.bernoulli(0.5);
        const double angle = rng.uniform(-kMaxRotationDeg, kMaxRotationDeg);
        transform_sample(batch, i, flip, angle);
    }
    return batch;
}

/// Splits the scene by columns: training takes columns [0, floor(width*fraction)],
/// validation the rest. Both parts must hold at least one patch.
inline std::pair<Extent, Extent> split_scene(const Extent& scene, double fraction, std::size_t patch)
{
    if (!(fraction > 0.0 && fraction < 1.0))
        throw std::invalid_argument("split_scene: fraction must lie in (0, 1)");
    const auto last_train = static_cast<std::size_t>(std::floor(static_cast<double>(scene.width) * fraction));
    const std::size_t train_width = std::min(last_train + 1, scene.width);
    const Extent train{scene.row, scene.col, scene.height, train_width};
    const Extent val{scene.row, scene.col + train_width, scene.height, scene.width - train_width};
    if (train.width < patch || val.width < patch || scene.height < patch)
        throw std::invalid_argument("split_scene: split leaves a region narrower than one patch (train " +
                                    std::to_string(train.width) + ", validation " + std::to_string(val.width) +
                                    ", patch " + std::to_string(patch) + ")");
    return {train, val};
}

/// How training and validation patches are drawn from one labelled scene.
struct SamplingConfig {
    std::size_t patch = 64;
    std::size_t train_count = 500;
    std::size_t val_count = 128;
    double split_fraction = 0.8;

    bool operator==(const SamplingConfig&) const = default;
};

struct TrainValPatches {
    PatchSet train;
    PatchSet val;
};

/// Column split of the scene followed by independent sampling of each side.
inline TrainValPatches sample_train_val(const Raster& raster, const ClassMap& labels, const SamplingConfig& sampling,
                                        std::uint64_t seed)
{
    const auto [train_ext, val_ext] =
        split_scene(full_extent(raster.height, raster.width), sampling.split_fraction, sampling.patch);
    return {extract_patches(raster, labels, train_ext, sampling.patch, sampling.train_count, substream(seed, "train")),
            extract_patches(raster, labels, val_ext, sampling.patch, sampling.val_count, substream(seed, "val"))};
}

// PatchSet directory: inputs.wslr (N*C bands, sample-major), labels.wslr and
// mask.wslr (N bands each), manifest.txt with shapes and seed.
inline void save_patch_set(const PatchSet& set, const std::filesystem::path& dir, std::uint64_t seed)
{
    if (set.count == 0)
        throw std::invalid_argument("save_patch_set: empty patch set");
    if (set.count * set.channels > 0xffff)
        throw std::invalid_argument("save_patch_set: too many patches for the WSLR band field");
    std::filesystem::create_directories(dir);
    const std::size_t h = set.height, w = set.width, c = set.channels;
    Raster inputs(set.count * c, h, w);
    Raster labels(set.count, h, w), mask(set.count, h, w);
    for (std::size_t n = 0; n < set.count; ++n)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) {
                const std::size_t p = (n * h + y) * w + x;
                for (std::size_t ch = 0; ch < c; ++ch)
                    inputs.at(n * c + ch, y, x) = set.inputs[p * c + ch];
                labels.at(n, y, x) = set.labels[p];
                mask.at(n, y, x) = set.mask[p];
            }
    write_raster(inputs, dir / "inputs.wslr");
    write_raster(labels, dir / "labels.wslr");
    write_raster(mask, dir / "mask.wslr");

    std::ofstream manifest(dir / "manifest.txt", std::ios::trunc);
    manifest << "count=" << set.count << "\nheight=" << h << "\nwidth=" << w << "\nchannels=" << c
             << "\nseed=" << seed << "\ncorners=";
    for (std::size_t n = 0; n < set.count; ++n)
        manifest << (n ? ";" : "") << set.corners[n].first << "," << set.corners[n].second;
    manifest << "\n";
    if (!manifest)
        throw std::runtime_error("save_patch_set: cannot write manifest in " + dir.string());
}

inline PatchSet load_patch_set(const std::filesystem::path& dir)
{
    std::ifstream manifest(dir / "manifest.txt");
    if (!manifest)
        throw FormatError("load_patch_set: missing manifest.txt in " + dir.string());
    std::map<std::string, std::string> kv;
    for (std::string line; std::getline(manifest, line);) {
        const auto eq = line.find('=');
        if (eq != std::string::npos)
            kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    const auto field = [&](const char* key) -> std::size_t {
        const auto it = kv.find(key);
        if (it == kv.end())
            throw FormatError(std::string("load_patch_set: manifest lacks ") + key);
        return std::stoull(it->second);
    };
    const std::size_t n = field("count"), h = field("height"), w = field("width"), c = field("channels");
    const Raster inputs = read_raster(dir / "inputs.wslr");
    const Raster labels = read_raster(dir / "labels.wslr");
    const Raster mask = read_raster(dir / "mask.wslr");
    if (inputs.bands != n * c || labels.bands != n || mask.bands != n || inputs.height != h || inputs.width != w ||
        !labels.same_shape(mask) || labels.height != h || labels.width != w)
        throw FormatError("load_patch_set: raster shapes disagree with manifest in " + dir.string());

    PatchSet set(n, h, w, c);
    for (std::size_t k = 0; k < n; ++k)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) {
                const std::size_t p = (k * h + y) * w + x;
                for (std::size_t ch = 0; ch < c; ++ch)
                    set.inputs[p * c + ch] = inputs.at(k * c + ch, y, x);
                const float l = labels.at(k, y, x), m = mask.at(k, y, x);
                if ((l != 0.0f && l != 1.0f) || (m != 0.0f && m != 1.0f))
                    throw FormatError("load_patch_set: invalid label or mask code");
                set.labels[p] = static_cast<std::uint8_t>(l);
                set.mask[p] = static_cast<std::uint8_t>(m);
            }
    if (const auto it = kv.find("corners"); it != kv.end() && !it->second.empty()) {
        std::stringstream ss(it->second);
        std::string item;
        for (std::size_t k = 0; k < n && std::getline(ss, item, ';'); ++k) {
            const auto comma = item.find(',');
            set.corners[k] = {std::stoull(item.substr(0, comma)), std::stoull(item.substr(comma + 1))};
        }
    }
    return set;
}

} // namespace sarwsl
