#include <bit>
#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>

#include "sarwsl/self_training.hpp"
#include "sarwsl/synth.hpp"

using namespace sarwsl;

namespace {

Raster random_raster(std::size_t bands, std::size_t h, std::size_t w, std::uint64_t seed)
{
    Raster r(bands, h, w);
    Rng rng(seed);
    for (float& v : r.data)
        v = static_cast<float>(rng.uniform(-20.0, -4.0));
    return r;
}

ad::Tensor<float> whole_image(const Raster& r)
{
    ad::Tensor<float> t({1, r.height, r.width, r.bands});
    for (std::size_t y = 0; y < r.height; ++y)
        for (std::size_t x = 0; x < r.width; ++x)
            for (std::size_t b = 0; b < r.bands; ++b)
                t[(y * r.width + x) * r.bands + b] = r.at(b, y, x);
    return t;
}

UnetConfig shallow_unet()
{
    UnetConfig c;
    c.depth = 1;
    c.base_filters = 4;
    c.width_multipliers = {1};
    c.bottleneck_multiplier = 2;
    return c;
}

ClassMap map_from(std::size_t h, std::size_t w, std::vector<std::uint8_t> codes)
{
    ClassMap m(h, w);
    m.codes = std::move(codes);
    return m;
}

// Flips the first k pixels of the incoming labels, k taken from a schedule.
RoundRunner flipping_stub(std::vector<std::size_t> schedule, std::vector<bool>* saw_previous = nullptr)
{
    return [schedule, saw_previous](std::size_t round, const ClassMap& labels, const Model<float>* previous) {
        if (saw_previous)
            saw_previous->push_back(previous != nullptr);
        ClassMap next = labels;
        const std::size_t k = schedule.at(std::min(round - 1, schedule.size() - 1));
        for (std::size_t i = 0; i < k; ++i)
            next.codes[i] = next.codes[i] == kForest ? kNonForest : kForest;
        return RoundOutput{Model<float>{}, next, 0, 0};
    };
}

std::filesystem::path temp_dir(const std::string& name)
{
    const auto dir = std::filesystem::temp_directory_path() / ("sarwsl_refine_" + name);
    std::filesystem::remove_all(dir);
    return dir;
}

} // namespace

TEST(ChangeFraction, Examples)
{
    const ClassMap a = map_from(2, 2, {0, 1, 1, 0});
    EXPECT_EQ(change_fraction(a, a), 0.0);
    EXPECT_EQ(change_fraction(a, map_from(2, 2, {0, 1, 1, 1})), 0.25);
    EXPECT_EQ(change_fraction(ClassMap(3, 5, kNonForest), ClassMap(3, 5, kForest)), 1.0);
}

TEST(ChangeFraction, RejectsMismatchAndUnlabeled)
{
    EXPECT_THROW(change_fraction(ClassMap(2, 2), ClassMap(2, 3)), std::invalid_argument);
    EXPECT_THROW(change_fraction(ClassMap(2, 2), map_from(2, 2, {0, 255, 1, 0})), std::invalid_argument);
}

TEST(PredictMap, TileOwnershipCropsHalfTheOverlap)
{
    const auto origins = detail::tile_origins(96, 64, 32);
    ASSERT_EQ(origins, (std::vector<std::size_t>{0, 32}));
    const auto owner = detail::tile_owners(96, 64, origins);
    for (std::size_t y = 0; y < 96; ++y)
        EXPECT_EQ(owner[y], y < 48 ? 0u : 1u) << y;

    const auto ragged = detail::tile_origins(100, 32, 8);
    EXPECT_EQ(ragged.back(), 68u);
    for (std::size_t i = 1; i < ragged.size(); ++i)
        EXPECT_LE(ragged[i] - ragged[i - 1], 24u);
}

TEST(PredictMap, SingleTileEqualsDirectForward)
{
    const auto model = build<float>(UnetConfig::tiny(), 3);
    const Raster r = random_raster(2, 32, 32, 4);
    const auto direct = predict(model, whole_image(r));
    const MapPrediction pm = predict_map(model, r, 32, 16);
    ASSERT_EQ(pm.probability.data.size(), direct.size());
    for (std::size_t i = 0; i < direct.size(); ++i)
        ASSERT_EQ(pm.probability.data[i], direct[i]);
}

TEST(PredictMap, StitchedTilesMatchWholeImageForward)
{
    const auto model = build<float>(shallow_unet(), 8);
    const Raster r = random_raster(2, 96, 96, 9);
    const auto whole = predict(model, whole_image(r));
    const MapPrediction pm = predict_map(model, r, 64, 32);
    double worst = 0.0;
    for (std::size_t i = 0; i < whole.size(); ++i)
        worst = std::max(worst, std::abs(static_cast<double>(pm.probability.data[i]) - whole[i]));
    EXPECT_LT(worst, 1e-6);
    for (std::size_t i = 0; i < whole.size(); ++i)
        ASSERT_EQ(pm.classes.codes[i], whole[i] >= 0.5f ? kForest : kNonForest);
}

TEST(PredictMap, EveryPixelIsAProbabilityOnRaggedScenes)
{
    const auto model = build<float>(UnetConfig::tiny(), 3);
    const Raster r = random_raster(2, 100, 72, 5);
    const MapPrediction pm = predict_map(model, r, 32, 8, 3);
    for (float p : pm.probability.data) {
        ASSERT_GT(p, 0.0f);
        ASSERT_LT(p, 1.0f);
    }
    EXPECT_TRUE(pm.classes.dense());
}

TEST(PredictMap, RejectsBadGeometry)
{
    const auto model = build<float>(UnetConfig::tiny(), 3);
    EXPECT_THROW(predict_map(model, random_raster(2, 24, 64, 1), 32, 8), std::invalid_argument);
    EXPECT_THROW(predict_map(model, random_raster(2, 64, 64, 1), 36, 8), std::invalid_argument);
    EXPECT_THROW(predict_map(model, random_raster(2, 64, 64, 1), 32, 32), std::invalid_argument);
    EXPECT_THROW(predict_map(model, random_raster(3, 64, 64, 1), 32, 8), std::invalid_argument);
}

TEST(RefineLoop, StopsOnTheRoundBelowThreshold)
{
    RefineConfig cfg;
    const auto result = refine_loop(ClassMap(10, 10), cfg, flipping_stub({40, 20, 8, 5}));
    ASSERT_EQ(result.rounds.size(), 3u);
    EXPECT_DOUBLE_EQ(result.rounds[0].change_fraction, 0.4);
    EXPECT_DOUBLE_EQ(result.rounds[1].change_fraction, 0.2);
    EXPECT_DOUBLE_EQ(result.rounds[2].change_fraction, 0.08);
    EXPECT_TRUE(result.converged);
    EXPECT_EQ(result.adopted, 2u);
}

TEST(RefineLoop, ThresholdOfOneStopsAfterFirstRound)
{
    RefineConfig cfg;
    cfg.stop_threshold = 1.0;
    const auto result = refine_loop(ClassMap(10, 10), cfg, flipping_stub({90}));
    EXPECT_EQ(result.rounds.size(), 1u);
    EXPECT_TRUE(result.converged);
    EXPECT_EQ(result.adopted, 0u);
}

TEST(RefineLoop, ConstantPredictorStopsAtRoundTwo)
{
    RefineConfig cfg;
    const ClassMap constant(6, 6, kForest);
    const RoundRunner stub = [&](std::size_t, const ClassMap&, const Model<float>*) {
        return RoundOutput{Model<float>{}, constant, 0, 0};
    };
    const auto result = refine_loop(ClassMap(6, 6, kNonForest), cfg, stub);
    ASSERT_EQ(result.rounds.size(), 2u);
    EXPECT_EQ(result.rounds[1].change_fraction, 0.0);
    EXPECT_TRUE(result.converged);
    EXPECT_EQ(result.final_map, constant);
}

TEST(RefineLoop, MaxRoundsEndsUnconvergedWithOneMorePredictionThanAdoption)
{
    RefineConfig cfg;
    cfg.max_rounds = 4;
    std::vector<bool> saw_previous;
    const auto result = refine_loop(ClassMap(10, 10), cfg, flipping_stub({50}, &saw_previous));
    EXPECT_EQ(result.rounds.size(), 4u);
    EXPECT_FALSE(result.converged);
    EXPECT_EQ(result.adopted + 1, result.rounds.size());
    EXPECT_EQ(saw_previous, (std::vector<bool>{false, true, true, true}));
    EXPECT_TRUE(result.final_map.dense());
}

TEST(RefineLoop, RejectsBadInputs)
{
    RefineConfig cfg;
    ClassMap holes(4, 4);
    holes.codes[3] = kUnlabeled;
    EXPECT_THROW(refine_loop(holes, cfg, flipping_stub({1})), std::invalid_argument);
    cfg.max_rounds = 0;
    EXPECT_THROW(refine_loop(ClassMap(4, 4), cfg, flipping_stub({1})), std::invalid_argument);
    cfg.max_rounds = 3;
    cfg.stop_threshold = 0.0;
    EXPECT_THROW(refine_loop(ClassMap(4, 4), cfg, flipping_stub({1})), std::invalid_argument);
    cfg.stop_threshold = 0.1;
    const RoundRunner wrong_size = [](std::size_t, const ClassMap&, const Model<float>*) {
        return RoundOutput{Model<float>{}, ClassMap(3, 3), 0, 0};
    };
    EXPECT_THROW(refine_loop(ClassMap(4, 4), cfg, wrong_size), std::runtime_error);
}

TEST(RefineLoop, WritesRoundArtifacts)
{
    RefineConfig cfg;
    cfg.run_dir = temp_dir("stub");
    refine_loop(ClassMap(10, 10), cfg, flipping_stub({40, 20, 8}));
    for (int r = 1; r <= 3; ++r)
        EXPECT_TRUE(std::filesystem::exists(cfg.run_dir / ("pseudo_labels_r" + std::to_string(r) + ".wslr")));
    std::ifstream f(cfg.run_dir / "rounds.json");
    const auto doc = nlohmann::json::parse(f);
    EXPECT_TRUE(doc["converged"].get<bool>());
    ASSERT_EQ(doc["rounds"].size(), 3u);
    EXPECT_DOUBLE_EQ(doc["rounds"][1]["change_fraction"].get<double>(), 0.2);
    const ClassMap r2 = read_class_map(cfg.run_dir / "pseudo_labels_r2.wslr");
    EXPECT_EQ(r2.count(kForest), 40u - 20u);
}

TEST(RefineLoop, TrueLabelsOnEasySceneConvergeQuicklyAndReproducibly)
{
    SceneSpec scene;
    scene.seed = 5;
    scene.height = 96;
    scene.width = 96;
    scene.blob_scale = 8;
    scene.looks = 30;
    const ClassMap truth = generate_truth(scene);
    const Raster sar = render_sar(truth, scene);

    RefineConfig cfg;
    cfg.unet.depth = 2;
    cfg.unet.base_filters = 4;
    cfg.unet.width_multipliers = {1, 2};
    cfg.unet.bottleneck_multiplier = 4;
    cfg.sampling = {16, 64, 16, 0.75};
    cfg.train.max_epochs = 6;
    cfg.train.patience = 6;
    cfg.train.batch_size = 8;
    cfg.train.learning_rate = 3e-3;
    cfg.tile = 32;
    cfg.overlap = 8;
    cfg.seed = 12;
    cfg.run_dir = temp_dir("real");

    const auto a = refine_loop(sar, truth, cfg, &truth);
    EXPECT_TRUE(a.converged);
    EXPECT_LE(a.rounds.size(), 2u);
    ASSERT_TRUE(a.rounds[0].forest_vs_truth && a.rounds[0].forest_vs_truth->f1);
    EXPECT_TRUE(std::filesystem::exists(cfg.run_dir / "checkpoint_r1.wslm"));
    EXPECT_EQ(load_checkpoint(cfg.run_dir / "checkpoint_r1.wslm").params, a.first_model.params);

    cfg.run_dir.clear();
    const auto b = refine_loop(sar, truth, cfg, &truth);
    ASSERT_EQ(a.rounds.size(), b.rounds.size());
    for (std::size_t i = 0; i < a.rounds.size(); ++i)
        EXPECT_EQ(std::bit_cast<std::uint64_t>(a.rounds[i].change_fraction),
                  std::bit_cast<std::uint64_t>(b.rounds[i].change_fraction));
    EXPECT_EQ(a.final_map, b.final_map);
}
