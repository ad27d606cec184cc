#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "sarwsl/random.hpp"
#include "sarwsl/raster.hpp"

namespace sarwsl {

/// Synthetic forest scene parameters.
struct SceneSpec {
    std::uint64_t seed = 0;
    std::size_t height = 256;
    std::size_t width = 256;
    double forest_fraction = 0.5;
    std::size_t blob_scale = 8;  // number of 3x3 box-blur passes over white noise
    std::size_t looks = 10;      // speckle averaging factor
    // [class][band] mean backscatter in dB; class 0 = non-forest, 1 = forest; band 0 = VV, 1 = VH.
    std::array<std::array<double, 2>, 2> class_means_db{{{-12.0, -18.0}, {-7.0, -12.0}}};

    void validate() const
    {
        if (height == 0 || width == 0)
            throw std::invalid_argument("scene dimensions must be positive");
        if (!(forest_fraction > 0.0 && forest_fraction < 1.0))
            throw std::invalid_argument("forest_fraction must lie in (0, 1)");
        if (blob_scale < 1)
            throw std::invalid_argument("blob_scale must be >= 1");
        if (looks < 1)
            throw std::invalid_argument("looks must be >= 1");
    }
};

/// Degradation applied to the true map to mimic a coarse, noisy global product.
struct NoiseSpec {
    std::size_t coarse_factor = 1;
    double flip_rate = 0.0;
    std::size_t jitter_radius = 0;
    std::uint64_t seed = 0;

    void validate() const
    {
        if (coarse_factor < 1)
            throw std::invalid_argument("coarse_factor must be >= 1");
        if (!(flip_rate >= 0.0 && flip_rate < 1.0))
            throw std::invalid_argument("flip_rate must lie in [0, 1)");
    }
};

namespace detail {

// One pass of a 3x3 mean filter, separable, edges clamped.
inline void box_blur3(std::vector<double>& field, std::size_t h, std::size_t w, std::vector<double>& scratch)
{
    scratch.resize(field.size());
    for (std::size_t y = 0; y < h; ++y) {
        const double* row = &field[y * w];
        double* dst = &scratch[y * w];
        for (std::size_t x = 0; x < w; ++x) {
            const std::size_t l = x == 0 ? 0 : x - 1;
            const std::size_t r = x + 1 == w ? x : x + 1;
            dst[x] = (row[l] + row[x] + row[r]) / 3.0;
        }
    }
    for (std::size_t y = 0; y < h; ++y) {
        const std::size_t u = y == 0 ? 0 : y - 1;
        const std::size_t d = y + 1 == h ? y : y + 1;
        for (std::size_t x = 0; x < w; ++x)
            field[y * w + x] = (scratch[u * w + x] + scratch[y * w + x] + scratch[d * w + x]) / 3.0;
    }
}

} // namespace detail

/// Smooth random field used by generate_truth (exposed for quantile checks).
inline std::vector<double> smooth_field(const SceneSpec& spec)
{
    spec.validate();
    if (spec.height < 2 * spec.blob_scale + 1 || spec.width < 2 * spec.blob_scale + 1)
        throw std::invalid_argument("scene too small for blob_scale (need >= 2*blob_scale+1 pixels per side)");
    Rng rng(substream(spec.seed, "truth.field"));
    std::vector<double> field(spec.height * spec.width);
    for (double& v : field)
        v = rng.normal();
    std::vector<double> scratch;
    for (std::size_t i = 0; i < spec.blob_scale; ++i)
        detail::box_blur3(field, spec.height, spec.width, scratch);
    return field;
}

/// Forest/non-forest ground truth: the smoothed field thresholded at its
/// empirical (1 - forest_fraction) quantile.
inline ClassMap generate_truth(const SceneSpec& spec)
{
    const std::vector<double> field = smooth_field(spec);
    const std::size_t n = field.size();
    const auto target = static_cast<std::size_t>(std::llround(spec.forest_fraction * static_cast<double>(n)));
    std::vector<double> sorted = field;
    const std::size_t k = std::min(n - 1, n - std::min(target, n));
    std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(k), sorted.end());
    const double threshold = sorted[k];

    ClassMap map(spec.height, spec.width);
    for (std::size_t i = 0; i < n; ++i)
        map.codes[i] = field[i] >= threshold ? kForest : kNonForest;
    return map;
}

/// Dual-polarization backscatter in dB with multiplicative mean-1 gamma speckle.
inline Raster render_sar(const ClassMap& truth, const SceneSpec& spec)
{
    spec.validate();
    if (truth.height != spec.height || truth.width != spec.width)
        throw std::invalid_argument("render_sar: truth dimensions do not match scene spec");
    if (!truth.dense())
        throw std::invalid_argument("render_sar: truth contains unlabeled (255) pixels");

    Raster out(2, truth.height, truth.width);
    const double looks = static_cast<double>(spec.looks);
    for (std::size_t b = 0; b < 2; ++b) {
        Rng rng(substream(spec.seed, {0x5a5a, b}));
        std::span<float> band = out.band(b);
        for (std::size_t i = 0; i < truth.pixels(); ++i) {
            const double mean_db = spec.class_means_db[truth.codes[i]][b];
            const double speckle = rng.gamma(looks) / looks;
            band[i] = static_cast<float>(mean_db + 10.0 * std::log10(speckle));
        }
    }
    return out;
}

namespace detail {

// Block-majority downsample then nearest upsample; partial edge blocks vote
// over the pixels they contain; ties go to non-forest.
inline ClassMap coarsen(const ClassMap& in, std::size_t factor)
{
    if (factor == 1)
        return in;
    ClassMap out(in.height, in.width);
    for (std::size_t by = 0; by < in.height; by += factor) {
        for (std::size_t bx = 0; bx < in.width; bx += factor) {
            const std::size_t ey = std::min(by + factor, in.height);
            const std::size_t ex = std::min(bx + factor, in.width);
            std::size_t forest = 0, total = 0;
            for (std::size_t y = by; y < ey; ++y)
                for (std::size_t x = bx; x < ex; ++x) {
                    forest += in.at(y, x) == kForest;
                    ++total;
                }
            const std::uint8_t code = 2 * forest > total ? kForest : kNonForest;
            for (std::size_t y = by; y < ey; ++y)
                for (std::size_t x = bx; x < ex; ++x)
                    out.at(y, x) = code;
        }
    }
    return out;
}

// Square-window morphology on the forest class; dilate=true grows forest.
inline ClassMap morph(const ClassMap& in, std::size_t radius, bool dilate)
{
    const std::uint8_t seek = dilate ? kForest : kNonForest;
    const long r = static_cast<long>(radius);
    const long h = static_cast<long>(in.height), w = static_cast<long>(in.width);
    ClassMap out = in;
    for (long y = 0; y < h; ++y)
        for (long x = 0; x < w; ++x) {
            bool hit = false;
            for (long dy = -r; dy <= r && !hit; ++dy)
                for (long dx = -r; dx <= r && !hit; ++dx) {
                    const long yy = y + dy, xx = x + dx;
                    if (yy >= 0 && yy < h && xx >= 0 && xx < w && in.codes[yy * w + xx] == seek)
                        hit = true;
                }
            if (hit)
                out.codes[y * w + x] = seek;
        }
    return out;
}

} // namespace detail

/// Coarse, boundary-jittered, randomly flipped copy of the truth.
/// Jitter picks, per coarse block, a signed radius in [-jitter, +jitter]:
/// positive dilates the forest class there, negative erodes it.
inline ClassMap degrade_labels(const ClassMap& truth, const NoiseSpec& noise)
{
    noise.validate();
    if (!truth.dense())
        throw std::invalid_argument("degrade_labels: truth contains unlabeled (255) pixels");
    ClassMap out = detail::coarsen(truth, noise.coarse_factor);

    if (noise.jitter_radius > 0) {
        const std::size_t r = noise.jitter_radius;
        std::vector<ClassMap> grown, shrunk;
        for (std::size_t k = 1; k <= r; ++k) {
            grown.push_back(detail::morph(out, k, true));
            shrunk.push_back(detail::morph(out, k, false));
        }
        const std::size_t block = std::max<std::size_t>(noise.coarse_factor, 8);
        Rng rng(substream(noise.seed, "labels.jitter"));
        ClassMap jittered = out;
        for (std::size_t by = 0; by < out.height; by += block)
            for (std::size_t bx = 0; bx < out.width; bx += block) {
                const long signed_r = static_cast<long>(rng.below(2 * r + 1)) - static_cast<long>(r);
                if (signed_r == 0)
                    continue;
                const ClassMap& src = signed_r > 0 ? grown[signed_r - 1] : shrunk[-signed_r - 1];
                for (std::size_t y = by; y < std::min(by + block, out.height); ++y)
                    for (std::size_t x = bx; x < std::min(bx + block, out.width); ++x)
                        jittered.at(y, x) = src.at(y, x);
            }
        out = std::move(jittered);
    }

    if (noise.flip_rate > 0.0) {
        Rng rng(substream(noise.seed, "labels.flip"));
        for (std::uint8_t& c : out.codes)
            if (rng.bernoulli(noise.flip_rate))
                c = c == kForest ? kNonForest : kForest;
    }
    return out;
}

} // namespace sarwsl
