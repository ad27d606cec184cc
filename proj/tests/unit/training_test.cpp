#include <algorithm>
#include <bit>
#include <cmath>
#include <numbers>

#include <gtest/gtest.h>

#include "sarwsl/autodiff/gradcheck.hpp"
#include "sarwsl/synth.hpp"
#include "sarwsl/training.hpp"

using namespace sarwsl;
using ad::Tape;
using ad::Tensor;
using ad::Var;

namespace {

struct BceCase {
    Tensor<float> p, y, m;
};

BceCase random_case(std::size_t n, std::uint64_t seed)
{
    BceCase c{Tensor<float>({n}), Tensor<float>({n}), Tensor<float>({n})};
    Rng rng(seed);
    for (std::size_t i = 0; i < n; ++i) {
        c.p[i] = static_cast<float>(rng.uniform(0.01, 0.99));
        c.y[i] = rng.bernoulli(0.5) ? 1.0f : 0.0f;
        c.m[i] = rng.bernoulli(0.3) ? 1.0f : 0.0f;
    }
    c.m[0] = 1.0f;
    return c;
}

std::pair<float, Tensor<float>> loss_and_grad(const BceCase& c)
{
    Tape<float> tape;
    const Var p = tape.variable(c.p);
    const Var loss = masked_bce(tape, p, c.y, c.m);
    tape.backward(loss);
    return {tape.value(loss)[0], tape.grad(p)};
}

ParameterSet<float> scalar_params(float value, ParamKind kind = ParamKind::kernel)
{
    ParameterSet<float> ps;
    ps.add("theta", kind, Tensor<float>({1}, value));
    return ps;
}

struct Scene {
    Raster sar;
    ClassMap truth;
};

const Scene& small_scene()
{
    static const Scene scene = [] {
        SceneSpec s;
        s.seed = 11;
        s.height = 128;
        s.width = 128;
        s.blob_scale = 10;
        s.looks = 10;
        const ClassMap truth = generate_truth(s);
        return Scene{render_sar(truth, s), truth};
    }();
    return scene;
}

UnetConfig small_unet()
{
    UnetConfig c;
    c.depth = 2;
    c.base_filters = 4;
    c.width_multipliers = {1, 2};
    c.bottleneck_multiplier = 4;
    return c;
}

TrainConfig short_run(std::size_t epochs)
{
    TrainConfig c;
    c.max_epochs = epochs;
    c.patience = epochs;
    c.batch_size = 8;
    c.learning_rate = 3e-3;
    c.seed = 21;
    return c;
}

// Loss of `batch` under training-mode statistics, without touching the model.
double batch_loss(const Model<float>& model, const PatchSet& batch, std::uint64_t dropout_seed)
{
    Tape<float> tape;
    const auto bound = bind_parameters(model.params, tape, false);
    const Var in = tape.constant(Tensor<float>({batch.count, batch.height, batch.width, batch.channels}, batch.inputs));
    const Var probs = forward_graph(model.config, model.params, bound, tape, in, true, dropout_seed);
    Tensor<float> y({batch.count, batch.height, batch.width, 1}), m(y.shape);
    for (std::size_t i = 0; i < y.size(); ++i) {
        y[i] = batch.labels[i];
        m[i] = batch.mask[i];
    }
    return tape.value(masked_bce(tape, probs, y, m))[0];
}

} // namespace

TEST(MaskedBce, HalfProbabilityOnPositiveIsLn2WithinOneUlp)
{
    Tape<float> tape;
    const Var p = tape.variable(Tensor<float>({1}, 0.5f));
    const float loss = tape.value(masked_bce(tape, p, Tensor<float>({1}, 1.0f), Tensor<float>({1}, 1.0f)))[0];
    const float ln2 = std::numbers::ln2_v<float>;
    EXPECT_GE(loss, std::nextafter(ln2, 0.0f));
    EXPECT_LE(loss, std::nextafter(ln2, 1.0f));
    EXPECT_NEAR(loss, 0.693147, 1e-6);
}

TEST(MaskedBce, AllMaskedBatchIsAnError)
{
    Tape<float> tape;
    const Var p = tape.variable(Tensor<float>({3}, 0.4f));
    EXPECT_THROW(masked_bce(tape, p, Tensor<float>({3}, 1.0f), Tensor<float>({3}, 0.0f)), std::invalid_argument);
}

TEST(MaskedBce, TwoPixelOracleAndExactZeroGradient)
{
    BceCase c{Tensor<float>({2}), Tensor<float>({2}, 1.0f), Tensor<float>({2})};
    c.p[0] = 0.9f;
    c.p[1] = 0.1f;
    c.m[0] = 1.0f;
    const auto [loss, grad] = loss_and_grad(c);
    EXPECT_NEAR(loss, -std::log(0.9), 1e-6);
    EXPECT_NEAR(loss, 0.105361, 1e-6);
    EXPECT_NEAR(grad[0], -1.0 / 0.9, 1e-5);
    EXPECT_EQ(std::bit_cast<std::uint32_t>(grad[1]), 0u);
}

TEST(MaskedBce, RejectsShapeMismatchAndNonBinaryMask)
{
    Tape<float> tape;
    const Var p = tape.variable(Tensor<float>({2}, 0.5f));
    EXPECT_THROW(masked_bce(tape, p, Tensor<float>({3}, 1.0f), Tensor<float>({2}, 1.0f)), std::invalid_argument);
    EXPECT_THROW(masked_bce(tape, p, Tensor<float>({2}, 1.0f), Tensor<float>({2}, 0.5f)), std::invalid_argument);
}

TEST(MaskedBce, MaskedOutValuesNeverAffectLossOrGradient)
{
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        BceCase a = random_case(64, seed);
        BceCase b = a;
        Rng rng(seed + 1000);
        for (std::size_t i = 0; i < 64; ++i)
            if (a.m[i] == 0.0f) {
                b.p[i] = static_cast<float>(rng.uniform());
                b.y[i] = 1.0f - b.y[i];
            }
        const auto [la, ga] = loss_and_grad(a);
        const auto [lb, gb] = loss_and_grad(b);
        ASSERT_EQ(std::bit_cast<std::uint32_t>(la), std::bit_cast<std::uint32_t>(lb));
        for (std::size_t i = 0; i < 64; ++i) {
            ASSERT_EQ(std::bit_cast<std::uint32_t>(ga[i]), std::bit_cast<std::uint32_t>(gb[i]));
            if (a.m[i] == 0.0f) {
                ASSERT_EQ(std::bit_cast<std::uint32_t>(ga[i]), 0u);
            }
        }
    }
}

TEST(MaskedBce, NonNegativeAndShrinksTowardLabels)
{
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        BceCase c = random_case(32, seed);
        const float far = loss_and_grad(c).first;
        EXPECT_GE(far, 0.0f);
        for (std::size_t i = 0; i < 32; ++i)
            c.p[i] = c.y[i] == 1.0f ? 0.999f : 0.001f;
        const float near = loss_and_grad(c).first;
        EXPECT_GE(near, 0.0f);
        EXPECT_LT(near, 0.0011f);
        EXPECT_LT(near, far);
    }
}

TEST(MaskedBce, ClampKeepsSaturatedProbabilitiesFinite)
{
    BceCase c{Tensor<float>({2}), Tensor<float>({2}), Tensor<float>({2}, 1.0f)};
    c.p[0] = 0.0f;
    c.y[0] = 1.0f;
    c.p[1] = 1.0f;
    c.y[1] = 0.0f;
    const auto [loss, grad] = loss_and_grad(c);
    EXPECT_NEAR(loss, -std::log(1e-7), 1e-4);
    EXPECT_TRUE(std::isfinite(grad[0]) && std::isfinite(grad[1]));
}

TEST(MaskedBce, GradientMatchesFiniteDifferences)
{
    const BceCase c = random_case(40, 5);
    std::vector<Tensor<double>> inputs{c.p.cast<double>()};
    const auto fn = [&]<typename U>(Tape<U>& tape, const std::vector<Var>& v) {
        return masked_bce(tape, v[0], c.y.cast<U>(), c.m.cast<U>());
    };
    EXPECT_LT(ad::finite_diff_check(fn, inputs, {.analytic = ad::Precision::f32}).max_relative_error, 1e-3);
    EXPECT_LT(ad::finite_diff_check(fn, inputs, {.analytic = ad::Precision::f64}).max_relative_error, 1e-6);
}

TEST(Adam, FirstStepMovesByLearningRate)
{
    auto ps = scalar_params(1.0f);
    AdamState state;
    TrainConfig cfg;
    cfg.weight_decay = 0.0;
    adam_step(ps, {Tensor<float>({1}, 0.5f)}, state, cfg);
    EXPECT_NEAR(ps[0].tensor[0] - 1.0f, -1e-3, 1e-7);
    EXPECT_EQ(state.t, 1u);
}

TEST(Adam, ZeroGradientLeavesParameterAndCountsStep)
{
    auto ps = scalar_params(0.75f);
    AdamState state;
    TrainConfig cfg;
    cfg.weight_decay = 0.0;
    adam_step(ps, {Tensor<float>({1}, 0.0f)}, state, cfg);
    EXPECT_EQ(ps[0].tensor[0], 0.75f);
    EXPECT_EQ(state.t, 1u);
}

TEST(Adam, QuadraticDescentIsStrictlyMonotone)
{
    auto ps = scalar_params(1.0f);
    AdamState state;
    TrainConfig cfg;
    cfg.weight_decay = 0.0;
    cfg.learning_rate = 0.1;
    float prev = 1.0f;
    for (int i = 0; i < 10; ++i) {
        adam_step(ps, {Tensor<float>({1}, 2.0f * ps[0].tensor[0])}, state, cfg);
        const float now = std::abs(ps[0].tensor[0]);
        EXPECT_LT(now, prev) << "step " << i;
        prev = now;
    }
}

TEST(Adam, ZeroLearningRateIsIdentity)
{
    auto model = build<float>(small_unet(), 3);
    const auto before = model.params;
    std::vector<Tensor<float>> grads;
    Rng rng(4);
    for (const auto& p : model.params) {
        Tensor<float> g(p.tensor.shape);
        for (float& v : g.values)
            v = static_cast<float>(rng.normal());
        grads.push_back(p.trainable() ? g : Tensor<float>{});
    }
    AdamState state;
    TrainConfig cfg;
    cfg.learning_rate = 0.0;
    adam_step(model.params, grads, state, cfg);
    EXPECT_TRUE(model.params == before);
}

TEST(Adam, WeightDecayTouchesKernelsOnly)
{
    ParameterSet<float> ps;
    ps.add("k", ParamKind::kernel, Tensor<float>({1}, 2.0f));
    ps.add("g", ParamKind::bn_gamma, Tensor<float>({1}, 2.0f));
    ps.add("b", ParamKind::bias, Tensor<float>({1}, 2.0f));
    AdamState state;
    TrainConfig cfg;
    cfg.weight_decay = 0.1;
    adam_step(ps, {Tensor<float>({1}, 0.0f), Tensor<float>({1}, 0.0f), Tensor<float>({1}, 0.0f)}, state, cfg);
    EXPECT_LT(ps[0].tensor[0], 2.0f);
    EXPECT_EQ(ps[1].tensor[0], 2.0f);
    EXPECT_EQ(ps[2].tensor[0], 2.0f);
}

TEST(Adam, NonFiniteGradientNamesTheParameter)
{
    auto ps = scalar_params(1.0f);
    AdamState state;
    try {
        adam_step(ps, {Tensor<float>({1}, std::numeric_limits<float>::quiet_NaN())}, state, TrainConfig{});
        FAIL() << "expected an error";
    } catch (const std::runtime_error& e) {
        EXPECT_NE(std::string(e.what()).find("theta"), std::string::npos);
    }
    EXPECT_EQ(state.t, 0u);
    EXPECT_EQ(ps[0].tensor[0], 1.0f);
}

TEST(Train, TrainingLossDecreasesOnFiftyPatches)
{
    const Scene& s = small_scene();
    const PatchSet tr = extract_patches(s.sar, s.truth, 16, 50, 1);
    const PatchSet va = extract_patches(s.sar, s.truth, 16, 16, 2);
    const auto result = train(build<float>(small_unet(), 5), tr, va, short_run(5), TrainMode::dense);
    ASSERT_EQ(result.history.size(), 5u);
    EXPECT_LT(result.history.back().train_loss, result.history.front().train_loss);
    EXPECT_GE(result.best_epoch, 1u);
}

TEST(Train, SameSeedsGiveIdenticalHistoryAndParameters)
{
    const Scene& s = small_scene();
    const PatchSet tr = extract_patches(s.sar, s.truth, 16, 24, 1);
    const PatchSet va = extract_patches(s.sar, s.truth, 16, 8, 2);
    const auto a = train(build<float>(small_unet(), 5), tr, va, short_run(3), TrainMode::dense);
    const auto b = train(build<float>(small_unet(), 5), tr, va, short_run(3), TrainMode::dense);
    EXPECT_EQ(a.history, b.history);
    EXPECT_TRUE(a.model.params == b.model.params);
    EXPECT_EQ(history_jsonl(a.history), history_jsonl(b.history));

    TrainConfig other = short_run(3);
    other.seed = 22;
    const auto c = train(build<float>(small_unet(), 5), tr, va, other, TrainMode::dense);
    EXPECT_NE(history_jsonl(a.history), history_jsonl(c.history));
}

TEST(Train, SparseModeWithFullMaskEqualsDense)
{
    const Scene& s = small_scene();
    const PatchSet tr = extract_patches(s.sar, s.truth, 16, 24, 1);
    const PatchSet va = extract_patches(s.sar, s.truth, 16, 8, 2);
    const PatchSet kept = mask_labels(tr, 1.0, 9);
    ASSERT_TRUE(kept.mask_all_set());
    const auto dense = train(build<float>(small_unet(), 5), tr, va, short_run(2), TrainMode::dense);
    const auto sparse = train(build<float>(small_unet(), 5), kept, va, short_run(2), TrainMode::sparse);
    EXPECT_EQ(dense.history, sparse.history);
    EXPECT_TRUE(dense.model.params == sparse.model.params);
}

TEST(Train, SparseLabelsStillTrain)
{
    const Scene& s = small_scene();
    const PatchSet tr = mask_labels(extract_patches(s.sar, s.truth, 16, 32, 1), 0.05, 3);
    const PatchSet va = extract_patches(s.sar, s.truth, 16, 8, 2);
    EXPECT_THROW(train(build<float>(small_unet(), 5), tr, va, short_run(1), TrainMode::dense), std::invalid_argument);
    const auto result = train(build<float>(small_unet(), 5), tr, va, short_run(2), TrainMode::sparse);
    EXPECT_EQ(result.history.size(), 2u);
    EXPECT_TRUE(std::isfinite(result.history.back().train_loss));
}

TEST(Train, EarlyStoppingReturnsBestEpoch)
{
    const Scene& s = small_scene();
    const PatchSet tr = extract_patches(s.sar, s.truth, 16, 16, 1);
    const PatchSet va = extract_patches(s.sar, s.truth, 16, 8, 2);
    TrainConfig cfg = short_run(12);
    cfg.patience = 2;
    const auto result = train(build<float>(small_unet(), 5), tr, va, cfg, TrainMode::dense);
    double best = -1.0;
    std::size_t best_epoch = 0;
    for (const auto& r : result.history)
        if (r.val.f1.value_or(-1.0) > best || best_epoch == 0) {
            best = r.val.f1.value_or(-1.0);
            best_epoch = r.epoch;
        }
    EXPECT_EQ(result.best_epoch, best_epoch);
    EXPECT_EQ(validate(result.model, va).f1, result.history[best_epoch - 1].val.f1);
    if (result.early_stopped) {
        EXPECT_EQ(result.history.size(), best_epoch + cfg.patience);
    }
}

TEST(Train, RejectsEmptySetsAndBadConfig)
{
    const Scene& s = small_scene();
    const PatchSet va = extract_patches(s.sar, s.truth, 16, 4, 2);
    const auto model = build<float>(small_unet(), 5);
    EXPECT_THROW(train(model, PatchSet{}, va, short_run(1), TrainMode::dense), std::invalid_argument);
    EXPECT_THROW(train(model, va, PatchSet{}, short_run(1), TrainMode::dense), std::invalid_argument);
    TrainConfig bad = short_run(1);
    bad.learning_rate = 0.0;
    EXPECT_THROW(train(model, va, va, bad, TrainMode::dense), std::invalid_argument);
    bad = short_run(1);
    bad.batch_size = 0;
    EXPECT_THROW(train(model, va, va, bad, TrainMode::dense), std::invalid_argument);
}

TEST(Train, NonFiniteLossAbortsWithEpochIndex)
{
    const Scene& s = small_scene();
    PatchSet tr = extract_patches(s.sar, s.truth, 16, 8, 1);
    std::fill(tr.inputs.begin(), tr.inputs.end(), std::numeric_limits<float>::quiet_NaN());
    const PatchSet va = extract_patches(s.sar, s.truth, 16, 4, 2);
    try {
        train(build<float>(small_unet(), 5), tr, va, short_run(3), TrainMode::dense);
        FAIL() << "expected divergence error";
    } catch (const std::runtime_error& e) {
        EXPECT_NE(std::string(e.what()).find("epoch 1"), std::string::npos) << e.what();
    }
}

TEST(Train, SingleSmallStepReducesBatchLoss)
{
    const Scene& s = small_scene();
    const PatchSet pool = extract_patches(s.sar, s.truth, 16, 40 * 4, 8);
    TrainConfig cfg;
    cfg.learning_rate = 1e-4;
    int failures = 0;
    for (std::size_t trial = 0; trial < 40; ++trial) {
        auto model = build<float>(small_unet(), 100 + trial);
        const PatchSet batch = pool.gather({4 * trial, 4 * trial + 1, 4 * trial + 2, 4 * trial + 3});
        const std::uint64_t dseed = 7 + trial;
        const double before = batch_loss(model, batch, dseed);
        AdamState state;
        train_step(model, batch, state, cfg, dseed);
        if (!(batch_loss(model, batch, dseed) < before))
            ++failures;
    }
    EXPECT_LE(failures, 1) << "failure rate must stay below 5%";
}

TEST(History, JsonLinesCarryOneRecordPerEpoch)
{
    std::vector<EpochRecord> h(2);
    h[0].epoch = 1;
    h[0].train_loss = 0.5;
    h[0].val.precision = 0.8;
    h[0].val.recall = 0.6;
    h[0].val.f1 = f1_score(0.8, 0.6);
    h[1].epoch = 2;
    h[1].train_loss = 0.25;
    const std::string text = history_jsonl(h);
    const auto nl = text.find('\n');
    const auto first = nlohmann::json::parse(text.substr(0, nl));
    const auto second = nlohmann::json::parse(text.substr(nl + 1));
    EXPECT_EQ(first["epoch"], 1);
    EXPECT_DOUBLE_EQ(first["val_f1"].get<double>(), 2 * 0.8 * 0.6 / 1.4);
    EXPECT_TRUE(second["val_f1"].is_null());
    EXPECT_EQ(text.back(), '\n');
    EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 2);
}
