#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "sarwsl/metrics.hpp"
#include "sarwsl/patches.hpp"
#include "sarwsl/unet.hpp"

namespace sarwsl {

inline constexpr double kBceClamp = 1e-7;
inline constexpr double kDecisionThreshold = 0.5;

/// Mean binary cross-entropy over pixels with mask == 1. Probabilities are
/// clamped to [1e-7, 1 - 1e-7] inside the logarithms; masked-out pixels are
/// never read, so their gradient stays exactly zero.
template <typename T>
ad::Var masked_bce(ad::Tape<T>& tape, ad::Var probs, const ad::Tensor<T>& labels, const ad::Tensor<T>& mask)
{
    const ad::Tensor<T>& p = tape.value(probs);
    if (labels.shape != p.shape || mask.shape != p.shape)
        throw std::invalid_argument("masked_bce: shape mismatch between probabilities " + ad::to_string(p.shape) +
                                    ", labels " + ad::to_string(labels.shape) + " and mask " +
                                    ad::to_string(mask.shape));
    std::size_t m = 0;
    double sum = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (mask[i] == T(0))
            continue;
        if (mask[i] != T(1))
            throw std::invalid_argument("masked_bce: mask values must be 0 or 1");
        ++m;
        const double pi = static_cast<double>(p[i]);
        const double y = static_cast<double>(labels[i]);
        sum += y * std::log(std::max(pi, kBceClamp)) + (1.0 - y) * std::log(std::max(1.0 - pi, kBceClamp));
    }
    if (m == 0)
        throw std::invalid_argument("masked_bce: batch has no labelled pixels (mask is all zero)");
    const double count = static_cast<double>(m);
    ad::Tensor<T> out({1}, static_cast<T>(-sum / count));
    return tape.record(std::move(out), {probs}, [=](ad::Tape<T>& t, const ad::Tensor<T>& g) {
        ad::Tensor<T>* dp = t.grad_sink(probs);
        if (!dp)
            return;
        const ad::Tensor<T>& pv = t.value(probs);
        const double scale = static_cast<double>(g[0]) / count;
        for (std::size_t i = 0; i < pv.size(); ++i) {
            if (mask[i] == T(0))
                continue;
            const double pi = static_cast<double>(pv[i]);
            const double y = static_cast<double>(labels[i]);
            const double d = -(y / std::max(pi, kBceClamp) - (1.0 - y) / std::max(1.0 - pi, kBceClamp));
            (*dp)[i] += static_cast<T>(scale * d);
        }
    });
}

struct TrainConfig {
    double learning_rate = 1e-3;
    std::size_t batch_size = 16;
    double weight_decay = 5e-4;
    std::size_t max_epochs = 50;
    std::size_t patience = 10;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::uint64_t seed = 0;

    void validate() const
    {
        if (!(learning_rate > 0.0))
            throw std::invalid_argument("train: learning_rate must be > 0");
        if (batch_size < 1)
            throw std::invalid_argument("train: batch_size must be >= 1");
        if (!(weight_decay >= 0.0))
            throw std::invalid_argument("train: weight_decay must be >= 0");
        if (max_epochs < 1 || patience < 1)
            throw std::invalid_argument("train: max_epochs and patience must be >= 1");
        if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0 && epsilon > 0.0))
            throw std::invalid_argument("train: Adam constants out of range");
    }

    bool operator==(const TrainConfig&) const = default;
};

/// Adam moments per parameter slot; slots of non-trainable parameters stay empty.
struct AdamState {
    std::vector<ad::Tensor<float>> m;
    std::vector<ad::Tensor<float>> v;
    std::uint64_t t = 0;
};

/// One Adam update with L2 decay folded into the gradient of kernel tensors.
/// `grads[i]` pairs with `params[i]`; an empty tensor skips that parameter.
inline void adam_step(ParameterSet<float>& params, const std::vector<ad::Tensor<float>>& grads, AdamState& state,
                      const TrainConfig& config)
{
    if (grads.size() != params.size())
        throw std::invalid_argument("adam_step: expected one gradient slot per parameter");
    if (state.m.empty()) {
        state.m.resize(params.size());
        state.v.resize(params.size());
    }
    if (state.m.size() != params.size() || state.v.size() != params.size())
        throw std::invalid_argument("adam_step: optimizer state does not match the parameter set");

    for (std::size_t i = 0; i < params.size(); ++i) {
        if (grads[i].size() == 0)
            continue;
        if (grads[i].shape != params[i].tensor.shape)
            throw std::invalid_argument("adam_step: gradient shape mismatch for " + params[i].name);
        for (float g : grads[i].values)
            if (!std::isfinite(g))
                throw std::runtime_error("adam_step: non-finite gradient for parameter " + params[i].name);
    }

    ++state.t;
    const double t = static_cast<double>(state.t);
    const double c1 = 1.0 - std::pow(config.beta1, t);
    const double c2 = 1.0 - std::pow(config.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (grads[i].size() == 0)
            continue;
        Parameter<float>& p = params[i];
        if (state.m[i].size() == 0) {
            state.m[i] = ad::Tensor<float>(p.tensor.shape);
            state.v[i] = ad::Tensor<float>(p.tensor.shape);
        }
        const double decay = p.decays() ? config.weight_decay : 0.0;
        for (std::size_t k = 0; k < p.tensor.size(); ++k) {
            const double w = p.tensor[k];
            const double g = static_cast<double>(grads[i][k]) + decay * w;
            const double m = config.beta1 * state.m[i][k] + (1.0 - config.beta1) * g;
            const double v = config.beta2 * state.v[i][k] + (1.0 - config.beta2) * g * g;
            state.m[i][k] = static_cast<float>(m);
            state.v[i][k] = static_cast<float>(v);
            p.tensor[k] = static_cast<float>(w - config.learning_rate * (m / c1) / (std::sqrt(v / c2) + config.epsilon));
        }
    }
}

enum class TrainMode { dense, sparse };

struct EpochRecord {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    Prf val;

    bool operator==(const EpochRecord& o) const
    {
        return epoch == o.epoch && train_loss == o.train_loss && val.precision == o.val.precision &&
               val.recall == o.val.recall && val.f1 == o.val.f1;
    }
};

struct TrainResult {
    Model<float> model; // parameters from the best validation epoch
    std::vector<EpochRecord> history;
    std::size_t best_epoch = 0;
    bool early_stopped = false;
};

inline nlohmann::ordered_json to_json(const EpochRecord& r)
{
    const auto opt = [](const std::optional<double>& v) {
        return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
    };
    nlohmann::ordered_json j;
    j["epoch"] = r.epoch;
    j["train_loss"] = r.train_loss;
    j["val_precision"] = opt(r.val.precision);
    j["val_recall"] = opt(r.val.recall);
    j["val_f1"] = opt(r.val.f1);
    return j;
}

/// One JSON object per line, in epoch order.
inline std::string history_jsonl(const std::vector<EpochRecord>& history)
{
    std::string out;
    for (const auto& r : history)
        out += to_json(r).dump() + "\n";
    return out;
}

namespace detail {

inline ad::Tensor<float> batch_inputs(const PatchSet& set)
{
    return ad::Tensor<float>({set.count, set.height, set.width, set.channels}, set.inputs);
}

inline ad::Tensor<float> plane_tensor(const PatchSet& set, const std::vector<std::uint8_t>& codes)
{
    ad::Tensor<float> t({set.count, set.height, set.width, 1});
    for (std::size_t i = 0; i < codes.size(); ++i)
        t[i] = static_cast<float>(codes[i]);
    return t;
}

inline std::vector<std::size_t> shuffled(std::size_t n, std::uint64_t seed)
{
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(seed);
    for (std::size_t i = n; i > 1; --i)
        std::swap(order[i - 1], order[rng.below(i)]);
    return order;
}

} // namespace detail

/// Class decisions (forest where p >= 0.5) for every pixel of `set`.
inline std::vector<std::uint8_t> classify(const Model<float>& model, const PatchSet& set, std::size_t chunk = 32)
{
    std::vector<std::uint8_t> out(set.count * set.plane());
    for (std::size_t start = 0; start < set.count; start += chunk) {
        std::vector<std::size_t> idx(std::min(chunk, set.count - start));
        std::iota(idx.begin(), idx.end(), start);
        const ad::Tensor<float> probs = predict(model, detail::batch_inputs(set.gather(idx)));
        for (std::size_t k = 0; k < probs.size(); ++k)
            out[start * set.plane() + k] = probs[k] >= kDecisionThreshold ? kForest : kNonForest;
    }
    return out;
}

/// Forest-class precision/recall/F1 over the labelled (mask == 1) pixels of `set`.
inline Prf validate(const Model<float>& model, const PatchSet& set)
{
    return prf(confusion(classify(model, set), set.labels, set.mask), kForest);
}

/// Mean masked loss of one optimisation step's batch, evaluated in training mode.
struct StepOutcome {
    double loss = 0.0;
    bool skipped = false;
};

inline StepOutcome train_step(Model<float>& model, const PatchSet& batch, AdamState& state, const TrainConfig& config,
                              std::uint64_t dropout_seed)
{
    if (std::none_of(batch.mask.begin(), batch.mask.end(), [](std::uint8_t m) { return m == 1; }))
        return {0.0, true};
    ad::Tape<float> tape;
    const auto bound = bind_parameters(model.params, tape, true);
    const ad::Var input = tape.constant(detail::batch_inputs(batch));
    const ad::Var probs =
        forward_graph(model.config, model.params, bound, tape, input, true, dropout_seed, &model.params);
    const ad::Var loss =
        masked_bce(tape, probs, detail::plane_tensor(batch, batch.labels), detail::plane_tensor(batch, batch.mask));
    const double value = tape.value(loss)[0];
    if (!std::isfinite(value))
        return {value, false};
    tape.backward(loss);
    std::vector<ad::Tensor<float>> grads(model.params.size());
    for (std::size_t i = 0; i < model.params.size(); ++i)
        if (bound[i].valid())
            grads[i] = tape.grad(bound[i]);
    adam_step(model.params, grads, state, config);
    return {value, false};
}

/// Epoch loop shared by the dense, incomplete and per-round inaccurate
/// regimes. Batches are reshuffled and augmented from per-epoch substreams
/// of `config.seed`; training stops after `patience` epochs without a
/// validation F1 gain and the best epoch's parameters are returned.
inline TrainResult train(const Model<float>& initial, const PatchSet& train_set, const PatchSet& val_set,
                         const TrainConfig& config, TrainMode mode)
{
    config.validate();
    if (train_set.count == 0)
        throw std::invalid_argument("train: training PatchSet is empty");
    if (val_set.count == 0)
        throw std::invalid_argument("train: validation PatchSet is empty");
    if (mode == TrainMode::dense && !train_set.mask_all_set())
        throw std::invalid_argument("train: dense mode requires every label to be present (mask all 1)");
    if (train_set.channels != initial.config.input_channels || val_set.channels != initial.config.input_channels)
        throw std::invalid_argument("train: patch channel count does not match the model input");

    const std::uint64_t shuffle_seed = substream(config.seed, "shuffle");
    const std::uint64_t augment_seed = substream(config.seed, "augment");
    const std::uint64_t dropout_seed = substream(config.seed, "dropout");

    TrainResult result{initial, {}, 0, false};
    Model<float> model = initial;
    AdamState state;
    double best_f1 = -1.0;
    std::size_t stale = 0;

    for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
        const auto order = detail::shuffled(train_set.count, substream(shuffle_seed, {epoch}));
        double loss_sum = 0.0;
        std::size_t steps = 0;
        for (std::size_t b = 0; b * config.batch_size < order.size(); ++b) {
            const auto first = order.begin() + static_cast<std::ptrdiff_t>(b * config.batch_size);
            const auto last = order.begin() + static_cast<std::ptrdiff_t>(
                                                  std::min(order.size(), (b + 1) * config.batch_size));
            const PatchSet batch =
                augment(train_set.gather(std::vector<std::size_t>(first, last)), substream(augment_seed, {epoch, b}));
            StepOutcome step;
            try {
                step = train_step(model, batch, state, config, substream(dropout_seed, {epoch, b}));
            } catch (const std::runtime_error& e) {
                throw std::runtime_error("train: diverged in epoch " + std::to_string(epoch) + ": " + e.what());
            }
            if (step.skipped)
                continue;
            if (!std::isfinite(step.loss))
                throw std::runtime_error("train: loss diverged (non-finite) in epoch " + std::to_string(epoch));
            loss_sum += step.loss;
            ++steps;
        }
        if (steps == 0)
            throw std::invalid_argument("train: no batch in epoch " + std::to_string(epoch) +
                                        " contained a labelled pixel");

        EpochRecord record{epoch, loss_sum / static_cast<double>(steps), validate(model, val_set)};
        result.history.push_back(record);
        const double f1 = record.val.f1.value_or(-1.0);
        if (f1 > best_f1 || result.best_epoch == 0) {
            best_f1 = f1;
            result.model = model;
            result.best_epoch = epoch;
            stale = 0;
        } else if (++stale >= config.patience) {
            result.early_stopped = true;
            break;
        }
    }
    return result;
}

} // namespace sarwsl
