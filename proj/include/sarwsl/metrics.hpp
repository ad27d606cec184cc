#pragma once

#include <array>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "sarwsl/raster.hpp"

namespace sarwsl {

/// counts[truth][prediction] over classes {non-forest, forest}.
struct ConfusionMatrix {
    std::array<std::array<std::uint64_t, 2>, 2> counts{};

    std::uint64_t total() const { return counts[0][0] + counts[0][1] + counts[1][0] + counts[1][1]; }

    void add(std::uint8_t truth, std::uint8_t pred) { ++counts[truth][pred]; }

    ConfusionMatrix& operator+=(const ConfusionMatrix& o)
    {
        for (int t = 0; t < 2; ++t)
            for (int p = 0; p < 2; ++p)
                counts[t][p] += o.counts[t][p];
        return *this;
    }

    bool operator==(const ConfusionMatrix&) const = default;
};

/// Pixel-wise confusion; truth pixels coded 255 are skipped.
inline ConfusionMatrix confusion(const ClassMap& pred, const ClassMap& truth)
{
    if (pred.height != truth.height || pred.width != truth.width)
        throw std::invalid_argument("confusion: prediction and truth differ in size");
    ConfusionMatrix cm;
    for (std::size_t i = 0; i < truth.pixels(); ++i) {
        const std::uint8_t t = truth.codes[i];
        if (t == kUnlabeled)
            continue;
        const std::uint8_t p = pred.codes[i];
        if (p > 1 || t > 1)
            throw std::invalid_argument("confusion: invalid class code");
        cm.add(t, p);
    }
    return cm;
}

/// Confusion restricted to pixels with mask == 1.
inline ConfusionMatrix confusion(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth,
                                 std::span<const std::uint8_t> mask)
{
    if (pred.size() != truth.size() || mask.size() != truth.size())
        throw std::invalid_argument("confusion: length mismatch");
    ConfusionMatrix cm;
    for (std::size_t i = 0; i < truth.size(); ++i)
        if (mask[i] == 1 && truth[i] != kUnlabeled)
            cm.add(truth[i], pred[i]);
    return cm;
}

/// Precision, recall and F1 for one class; nullopt marks a 0/0 quantity.
struct Prf {
    std::optional<double> precision;
    std::optional<double> recall;
    std::optional<double> f1;
    std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;
};

inline std::optional<double> ratio(std::uint64_t num, std::uint64_t den)
{
    if (den == 0)
        return std::nullopt;
    return static_cast<double>(num) / static_cast<double>(den);
}

/// Harmonic mean of precision and recall; undefined when both are zero.
inline std::optional<double> f1_score(std::optional<double> precision, std::optional<double> recall)
{
    if (!precision || !recall || *precision + *recall == 0.0)
        return std::nullopt;
    return 2.0 * *precision * *recall / (*precision + *recall);
}

inline Prf prf(const ConfusionMatrix& cm, std::uint8_t positive_class)
{
    if (positive_class > 1)
        throw std::invalid_argument("prf: positive class must be 0 or 1");
    const int pos = positive_class, neg = 1 - positive_class;
    Prf r;
    r.tp = cm.counts[pos][pos];
    r.fp = cm.counts[neg][pos];
    r.fn = cm.counts[pos][neg];
    r.tn = cm.counts[neg][neg];
    r.precision = ratio(r.tp, r.tp + r.fp);
    r.recall = ratio(r.tp, r.tp + r.fn);
    r.f1 = f1_score(r.precision, r.recall);
    return r;
}

inline const char* class_name(std::uint8_t c) { return c == kForest ? "forest" : "non-forest"; }

/// One row of evaluation.json.
struct MetricRecord {
    std::string method;
    std::uint8_t class_code = kForest;
    Prf metrics;
    std::uint64_t seed = 0;
    std::string config_hash;
};

inline std::vector<MetricRecord> evaluate_method(const std::string& method, const ClassMap& pred,
                                                 const ClassMap& truth, std::uint64_t seed,
                                                 const std::string& config_hash)
{
    const ConfusionMatrix cm = confusion(pred, truth);
    std::vector<MetricRecord> out;
    for (std::uint8_t c : {kNonForest, kForest})
        out.push_back({method, c, prf(cm, c), seed, config_hash});
    return out;
}

inline nlohmann::ordered_json to_json(const MetricRecord& r)
{
    const auto opt = [](const std::optional<double>& v) -> nlohmann::ordered_json {
        return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
    };
    nlohmann::ordered_json j;
    j["method"] = r.method;
    j["class"] = class_name(r.class_code);
    j["precision"] = opt(r.metrics.precision);
    j["recall"] = opt(r.metrics.recall);
    j["f1"] = opt(r.metrics.f1);
    j["tp"] = r.metrics.tp;
    j["fp"] = r.metrics.fp;
    j["fn"] = r.metrics.fn;
    j["tn"] = r.metrics.tn;
    j["seed"] = r.seed;
    j["config_hash"] = r.config_hash;
    return j;
}

/// evaluation.json contents: an array of records in the given order.
inline std::string evaluation_json(const std::vector<MetricRecord>& records)
{
    nlohmann::ordered_json arr = nlohmann::ordered_json::array();
    for (const auto& r : records)
        arr.push_back(to_json(r));
    return arr.dump(2) + "\n";
}

/// Comparison table: method, class, precision, recall, F1 to three decimals.
inline std::string format_table(const std::vector<MetricRecord>& records)
{
    const auto cell = [](const std::optional<double>& v) {
        if (!v)
            return std::string("  undef");
        char buf[32];
        std::snprintf(buf, sizeof buf, "%7.3f", *v);
        return std::string(buf);
    };
    std::string out = "method        class       precision  recall     f1\n";
    for (const auto& r : records) {
        char buf[160];
        std::snprintf(buf, sizeof buf, "%-13s %-11s %s    %s    %s\n", r.method.c_str(), class_name(r.class_code),
                      cell(r.metrics.precision).c_str(), cell(r.metrics.recall).c_str(), cell(r.metrics.f1).c_str());
        out += buf;
    }
    return out;
}

} // namespace sarwsl
