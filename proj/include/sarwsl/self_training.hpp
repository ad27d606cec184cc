#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "sarwsl/metrics.hpp"
#include "sarwsl/patches.hpp"
#include "sarwsl/raster.hpp"
#include "sarwsl/training.hpp"
#include "sarwsl/unet.hpp"

namespace sarwsl {

struct MapPrediction {
    Raster probability; // one band, forest probability
    ClassMap classes;
};

namespace detail {

// Tile origins along one axis: a regular stride of (tile - overlap), with the
// last tile flush against the far edge.
inline std::vector<std::size_t> tile_origins(std::size_t extent, std::size_t tile, std::size_t overlap)
{
    std::vector<std::size_t> out{0};
    const std::size_t stride = tile - overlap;
    while (out.back() + tile < extent)
        out.push_back(std::min(out.back() + stride, extent - tile));
    return out;
}

// For every coordinate, the tile that sees it furthest from a cropped edge.
// Scene borders count as infinitely far, so edge tiles keep their outer rim.
inline std::vector<std::size_t> tile_owners(std::size_t extent, std::size_t tile, const std::vector<std::size_t>& origins)
{
    constexpr std::size_t far = std::numeric_limits<std::size_t>::max();
    std::vector<std::size_t> owner(extent, 0);
    for (std::size_t y = 0; y < extent; ++y) {
        std::size_t best = 0;
        bool found = false;
        for (std::size_t t = 0; t < origins.size(); ++t) {
            const std::size_t o = origins[t];
            if (y < o || y >= o + tile)
                continue;
            const std::size_t lead = o == 0 ? far : y - o;
            const std::size_t trail = o + tile == extent ? far : o + tile - 1 - y;
            const std::size_t margin = std::min(lead, trail);
            if (!found || margin > best) {
                best = margin;
                owner[y] = t;
                found = true;
            }
        }
    }
    return owner;
}

} // namespace detail

/// Tiled inference over a whole scene. Each tile contributes only the pixels
/// it sees furthest from its cropped edges (an overlap/2 margin for interior
/// seams); the stitched probabilities are thresholded at 0.5.
inline MapPrediction predict_map(const Model<float>& model, const Raster& raster, std::size_t tile,
                                 std::size_t overlap, std::size_t tiles_per_batch = 8)
{
    const UnetConfig& cfg = model.config;
    if (raster.bands != cfg.input_channels)
        throw std::invalid_argument("predict_map: raster has " + std::to_string(raster.bands) +
                                    " bands, model expects " + std::to_string(cfg.input_channels));
    if (tile == 0 || tile % cfg.side_multiple() != 0)
        throw std::invalid_argument("predict_map: tile side " + std::to_string(tile) +
                                    " must be a positive multiple of " + std::to_string(cfg.side_multiple()));
    if (overlap >= tile)
        throw std::invalid_argument("predict_map: overlap must be smaller than the tile side");
    if (raster.height < tile || raster.width < tile)
        throw std::invalid_argument("predict_map: raster " + std::to_string(raster.height) + "x" +
                                    std::to_string(raster.width) + " is smaller than tile " + std::to_string(tile));

    const auto rows = detail::tile_origins(raster.height, tile, overlap);
    const auto cols = detail::tile_origins(raster.width, tile, overlap);
    const auto row_owner = detail::tile_owners(raster.height, tile, rows);
    const auto col_owner = detail::tile_owners(raster.width, tile, cols);

    MapPrediction out{Raster(1, raster.height, raster.width), ClassMap(raster.height, raster.width)};
    const std::size_t c = raster.bands;
    std::vector<std::pair<std::size_t, std::size_t>> jobs;
    for (std::size_t tr = 0; tr < rows.size(); ++tr)
        for (std::size_t tc = 0; tc < cols.size(); ++tc)
            jobs.emplace_back(tr, tc);

    for (std::size_t start = 0; start < jobs.size(); start += tiles_per_batch) {
        const std::size_t n = std::min(tiles_per_batch, jobs.size() - start);
        ad::Tensor<float> batch({n, tile, tile, c});
        for (std::size_t k = 0; k < n; ++k) {
            const auto [tr, tc] = jobs[start + k];
            for (std::size_t y = 0; y < tile; ++y)
                for (std::size_t x = 0; x < tile; ++x)
                    for (std::size_t b = 0; b < c; ++b)
                        batch[((k * tile + y) * tile + x) * c + b] = raster.at(b, rows[tr] + y, cols[tc] + x);
        }
        const ad::Tensor<float> probs = predict(model, batch);
        for (std::size_t k = 0; k < n; ++k) {
            const auto [tr, tc] = jobs[start + k];
            for (std::size_t y = 0; y < tile; ++y) {
                const std::size_t gy = rows[tr] + y;
                if (row_owner[gy] != tr)
                    continue;
                for (std::size_t x = 0; x < tile; ++x) {
                    const std::size_t gx = cols[tc] + x;
                    if (col_owner[gx] == tc)
                        out.probability.at(0, gy, gx) = probs[(k * tile + y) * tile + x];
                }
            }
        }
    }
    for (std::size_t i = 0; i < out.classes.pixels(); ++i)
        out.classes.codes[i] = out.probability.data[i] >= kDecisionThreshold ? kForest : kNonForest;
    return out;
}

/// Share of pixels whose class differs between two dense maps.
inline double change_fraction(const ClassMap& prev, const ClassMap& next)
{
    if (prev.height != next.height || prev.width != next.width)
        throw std::invalid_argument("change_fraction: maps differ in size (" + std::to_string(prev.height) + "x" +
                                    std::to_string(prev.width) + " vs " + std::to_string(next.height) + "x" +
                                    std::to_string(next.width) + ")");
    if (prev.pixels() == 0)
        throw std::invalid_argument("change_fraction: empty maps");
    if (!prev.dense() || !next.dense())
        throw std::invalid_argument("change_fraction: maps must not contain unlabeled (255) pixels");
    std::size_t changed = 0;
    for (std::size_t i = 0; i < prev.pixels(); ++i)
        changed += prev.codes[i] != next.codes[i];
    return static_cast<double>(changed) / static_cast<double>(prev.pixels());
}

struct RefineConfig {
    double stop_threshold = 0.10;
    std::size_t max_rounds = 8;
    TrainConfig train;
    SamplingConfig sampling;
    UnetConfig unet = UnetConfig::tiny();
    std::size_t tile = 64;
    std::size_t overlap = 32;
    bool fine_tune = false; // start each round from the previous round's weights
    std::uint64_t seed = 0;
    std::filesystem::path run_dir; // artifacts are written only when set

    void validate() const
    {
        if (!(stop_threshold > 0.0 && stop_threshold <= 1.0))
            throw std::invalid_argument("refine: stop_threshold must lie in (0, 1]");
        if (max_rounds < 1)
            throw std::invalid_argument("refine: max_rounds must be >= 1");
    }
};

struct RoundRecord {
    std::size_t round = 0;
    double change_fraction = 0.0;
    std::size_t nonforest_pixels = 0;
    std::size_t forest_pixels = 0;
    std::size_t epochs = 0;
    std::size_t best_epoch = 0;
    std::string checkpoint;
    std::optional<Prf> forest_vs_truth; // when truth for the training area is supplied
};

/// What one round hands back to the loop.
struct RoundOutput {
    Model<float> model;
    ClassMap prediction;
    std::size_t epochs = 0;
    std::size_t best_epoch = 0;
};

/// Trains one round on the current pseudo-labels and predicts the full map.
/// `previous` is the prior round's model (null in round 1).
using RoundRunner =
    std::function<RoundOutput(std::size_t round, const ClassMap& pseudo_labels, const Model<float>* previous)>;

struct RefineResult {
    ClassMap final_map;
    Model<float> model;
    Model<float> first_model; // trained once on the initial labels
    ClassMap first_prediction;
    std::vector<RoundRecord> rounds;
    bool converged = false;
    std::size_t adopted = 0; // prediction -> pseudo-label updates
};

/// Samples patches against the pseudo-labels with a per-round seed, trains a
/// model (fresh unless fine-tuning) and predicts the whole scene.
inline RoundRunner training_round_runner(const Raster& raster, const RefineConfig& config)
{
    return [&raster, config](std::size_t round, const ClassMap& labels, const Model<float>* previous) {
        const std::uint64_t rs = substream(config.seed, {round});
        const TrainValPatches patches = sample_train_val(raster, labels, config.sampling, substream(rs, "sampling"));
        const Model<float> start = config.fine_tune && previous ? *previous
                                                                : build<float>(config.unet, substream(rs, "init"));
        TrainConfig tc = config.train;
        tc.seed = substream(rs, "train");
        TrainResult trained = train(start, patches.train, patches.val, tc, TrainMode::dense);
        MapPrediction map = predict_map(trained.model, raster, config.tile, config.overlap);
        return RoundOutput{std::move(trained.model), std::move(map.classes), trained.history.size(),
                           trained.best_epoch};
    };
}

inline nlohmann::ordered_json to_json(const RoundRecord& r)
{
    const auto opt = [](const std::optional<double>& v) {
        return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
    };
    nlohmann::ordered_json j;
    j["round"] = r.round;
    j["change_fraction"] = r.change_fraction;
    j["nonforest_pixels"] = r.nonforest_pixels;
    j["forest_pixels"] = r.forest_pixels;
    j["epochs"] = r.epochs;
    j["best_epoch"] = r.best_epoch;
    j["checkpoint"] = r.checkpoint;
    if (r.forest_vs_truth) {
        j["forest_precision"] = opt(r.forest_vs_truth->precision);
        j["forest_recall"] = opt(r.forest_vs_truth->recall);
        j["forest_f1"] = opt(r.forest_vs_truth->f1);
    }
    return j;
}

inline std::string rounds_json(const std::vector<RoundRecord>& rounds, bool converged)
{
    nlohmann::ordered_json doc;
    doc["converged"] = converged;
    doc["rounds"] = nlohmann::ordered_json::array();
    for (const auto& r : rounds)
        doc["rounds"].push_back(to_json(r));
    return doc.dump(2) + "\n";
}

/// Iterative pseudo-label refinement. Round r trains on the current labels
/// and predicts the scene; if fewer than `stop_threshold` of the pixels
/// change, the loop stops, otherwise the prediction becomes the next labels.
/// Reaching max_rounds ends the loop unconverged.
inline RefineResult refine_loop(const ClassMap& initial_labels, const RefineConfig& config, const RoundRunner& runner,
                                const ClassMap* truth = nullptr)
{
    config.validate();
    if (!initial_labels.dense())
        throw std::invalid_argument("refine_loop: initial labels must be dense (no 255 codes)");
    if (truth && (truth->height != initial_labels.height || truth->width != initial_labels.width))
        throw std::invalid_argument("refine_loop: truth map size differs from the labels");
    if (!config.run_dir.empty())
        std::filesystem::create_directories(config.run_dir);

    RefineResult result;
    ClassMap labels = initial_labels;
    const Model<float>* previous = nullptr;
    for (std::size_t round = 1; round <= config.max_rounds; ++round) {
        RoundOutput out = runner(round, labels, previous);
        if (out.prediction.height != labels.height || out.prediction.width != labels.width || !out.prediction.dense())
            throw std::runtime_error("refine_loop: round " + std::to_string(round) +
                                     " produced a map of the wrong size or with unlabeled pixels");

        RoundRecord rec;
        rec.round = round;
        rec.change_fraction = change_fraction(labels, out.prediction);
        rec.nonforest_pixels = out.prediction.count(kNonForest);
        rec.forest_pixels = out.prediction.count(kForest);
        rec.epochs = out.epochs;
        rec.best_epoch = out.best_epoch;
        if (truth)
            rec.forest_vs_truth = prf(confusion(out.prediction, *truth), kForest);
        if (!config.run_dir.empty()) {
            const std::string n = std::to_string(round);
            write_class_map(out.prediction, config.run_dir / ("pseudo_labels_r" + n + ".wslr"));
            if (out.model.params.size() > 0) {
                rec.checkpoint = "checkpoint_r" + n + ".wslm";
                save_checkpoint(out.model, config.run_dir / rec.checkpoint);
            }
        }
        result.rounds.push_back(rec);

        if (round == 1) {
            result.first_model = out.model;
            result.first_prediction = out.prediction;
        }
        result.model = std::move(out.model);
        result.final_map = std::move(out.prediction);
        previous = &result.model;

        if (rec.change_fraction < config.stop_threshold) {
            result.converged = true;
            break;
        }
        if (round < config.max_rounds) {
            labels = result.final_map;
            ++result.adopted;
        }
    }

    if (!config.run_dir.empty()) {
        std::ofstream f(config.run_dir / "rounds.json", std::ios::trunc);
        f << rounds_json(result.rounds, result.converged);
        if (!f)
            throw std::runtime_error("refine_loop: cannot write rounds.json in " + config.run_dir.string());
    }
    return result;
}

/// refine_loop with the standard train-and-predict round on `raster`.
inline RefineResult refine_loop(const Raster& raster, const ClassMap& initial_labels, const RefineConfig& config,
                                const ClassMap* truth = nullptr)
{
    if (raster.height != initial_labels.height || raster.width != initial_labels.width)
        throw std::invalid_argument("refine_loop: raster and labels differ in size");
    return refine_loop(initial_labels, config, training_round_runner(raster, config), truth);
}

} // namespace sarwsl
