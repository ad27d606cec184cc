#pragma once

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include <json.hpp>

#include "sarwsl/metrics.hpp"
#include "sarwsl/patches.hpp"
#include "sarwsl/raster.hpp"
#include "sarwsl/self_training.hpp"
#include "sarwsl/synth.hpp"
#include "sarwsl/training.hpp"
#include "sarwsl/unet.hpp"

namespace sarwsl {

inline constexpr const char* kVersion = "sarwsl 0.1.0";

/// Malformed or unknown configuration input; maps to a usage error.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Everything a run depends on besides code: one flat key=value namespace.
struct ExperimentConfig {
    std::uint64_t seed = 7;
    SceneSpec scene;
    NoiseSpec noise{8, 0.08, 2, 0};
    SamplingConfig sampling;
    double keep_fraction = 0.02;
    UnetConfig unet;
    TrainConfig train;
    double stop_threshold = 0.10;
    std::size_t max_rounds = 8;
    std::size_t tile = 64;
    std::size_t overlap = 32;
    bool fine_tune = false;
    std::string out = "runs/default";

    static ExperimentConfig profile(std::string_view name);

    void set(std::string_view key, std::string_view value);
    std::string get(std::string_view key) const;
    static std::vector<std::string> keys();

    /// Applies "key = value" lines; '#' starts a comment.
    void apply_text(std::string_view text, std::string_view origin = "config");
    void apply_file(const std::filesystem::path& path);

    /// Canonical text: every key in fixed order. Parsing it back yields an equal config.
    std::string to_text() const;
    /// FNV-1a over the canonical text minus the output directory, hex encoded.
    std::string hash() const;

    void validate() const;

    RefineConfig refine_config() const
    {
        RefineConfig r;
        r.stop_threshold = stop_threshold;
        r.max_rounds = max_rounds;
        r.train = train;
        r.sampling = sampling;
        r.unet = unet;
        r.tile = tile;
        r.overlap = overlap;
        r.fine_tune = fine_tune;
        r.seed = substream(seed, "refine");
        return r;
    }
};

namespace detail {

inline std::string trim(std::string_view s)
{
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos)
        return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

template <typename N>
N parse_number(std::string_view key, std::string_view text)
{
    N v{};
    const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc{} || ptr != text.data() + text.size() || text.empty())
        throw ConfigError("config key '" + std::string(key) + "': cannot parse '" + std::string(text) + "' as a number");
    return v;
}

inline bool parse_bool(std::string_view key, std::string_view text)
{
    if (text == "true" || text == "1")
        return true;
    if (text == "false" || text == "0")
        return false;
    throw ConfigError("config key '" + std::string(key) + "': expected true or false, got '" + std::string(text) + "'");
}

inline std::string format_double(double v)
{
    char buf[64];
    const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, ptr);
}

struct ConfigField {
    const char* key;
    std::function<std::string(const ExperimentConfig&)> get;
    std::function<void(ExperimentConfig&, std::string_view)> set;
};

template <typename N>
ConfigField number_field(const char* key, N ExperimentConfig::*member)
{
    return {key, [member](const ExperimentConfig& c) { return std::to_string(c.*member); },
            [key, member](ExperimentConfig& c, std::string_view v) { c.*member = parse_number<N>(key, v); }};
}

template <typename Get>
ConfigField size_field(const char* key, Get get)
{
    return {key, [get](const ExperimentConfig& c) { return std::to_string(get(c)); },
            [key, get](ExperimentConfig& c, std::string_view v) { get(c) = parse_number<std::size_t>(key, v); }};
}

template <typename Get>
ConfigField real_field(const char* key, Get get)
{
    return {key, [get](const ExperimentConfig& c) { return format_double(get(c)); },
            [key, get](ExperimentConfig& c, std::string_view v) { get(c) = parse_number<double>(key, v); }};
}

inline void apply_model_preset(ExperimentConfig& c, std::string_view name)
{
    const ad::InitScheme init = c.unet.init;
    if (name == "tiny")
        c.unet = UnetConfig::tiny();
    else if (name == "full")
        c.unet = UnetConfig::full();
    else
        throw ConfigError("config key 'model.preset': expected tiny or full, got '" + std::string(name) + "'");
    c.unet.init = init;
}

inline const std::vector<ConfigField>& config_fields()
{
    using C = ExperimentConfig;
    static const std::vector<ConfigField> fields = {
        number_field("seed", &C::seed),
        {"out", [](const C& c) { return c.out; }, [](C& c, std::string_view v) { c.out = std::string(v); }},
        size_field("scene.height", [](auto& c) -> auto& { return c.scene.height; }),
        size_field("scene.width", [](auto& c) -> auto& { return c.scene.width; }),
        real_field("scene.forest_fraction", [](auto& c) -> auto& { return c.scene.forest_fraction; }),
        size_field("scene.blob_scale", [](auto& c) -> auto& { return c.scene.blob_scale; }),
        size_field("scene.looks", [](auto& c) -> auto& { return c.scene.looks; }),
        real_field("scene.nonforest_vv_db", [](auto& c) -> auto& { return c.scene.class_means_db[0][0]; }),
        real_field("scene.nonforest_vh_db", [](auto& c) -> auto& { return c.scene.class_means_db[0][1]; }),
        real_field("scene.forest_vv_db", [](auto& c) -> auto& { return c.scene.class_means_db[1][0]; }),
        real_field("scene.forest_vh_db", [](auto& c) -> auto& { return c.scene.class_means_db[1][1]; }),
        size_field("noise.coarse_factor", [](auto& c) -> auto& { return c.noise.coarse_factor; }),
        real_field("noise.flip_rate", [](auto& c) -> auto& { return c.noise.flip_rate; }),
        size_field("noise.jitter_radius", [](auto& c) -> auto& { return c.noise.jitter_radius; }),
        size_field("sampling.patch", [](auto& c) -> auto& { return c.sampling.patch; }),
        size_field("sampling.train_count", [](auto& c) -> auto& { return c.sampling.train_count; }),
        size_field("sampling.val_count", [](auto& c) -> auto& { return c.sampling.val_count; }),
        real_field("sampling.split_fraction", [](auto& c) -> auto& { return c.sampling.split_fraction; }),
        real_field("sampling.keep_fraction", [](auto& c) -> auto& { return c.keep_fraction; }),
        {"model.preset", [](const C&) { return std::string{}; }, [](C& c, std::string_view v) { apply_model_preset(c, v); }},
        size_field("model.depth", [](auto& c) -> auto& { return c.unet.depth; }),
        size_field("model.base_filters", [](auto& c) -> auto& { return c.unet.base_filters; }),
        {"model.width_multipliers",
         [](const C& c) {
             std::string s;
             for (std::size_t i = 0; i < c.unet.width_multipliers.size(); ++i)
                 s += (i ? "," : "") + std::to_string(c.unet.width_multipliers[i]);
             return s;
         },
         [](C& c, std::string_view v) {
             std::vector<std::size_t> m;
             std::size_t start = 0;
             while (start <= v.size()) {
                 const auto comma = v.find(',', start);
                 const auto end = comma == std::string_view::npos ? v.size() : comma;
                 m.push_back(parse_number<std::size_t>("model.width_multipliers", trim(v.substr(start, end - start))));
                 start = end + 1;
             }
             c.unet.width_multipliers = std::move(m);
         }},
        size_field("model.bottleneck_multiplier", [](auto& c) -> auto& { return c.unet.bottleneck_multiplier; }),
        real_field("model.dropout_rate", [](auto& c) -> auto& { return c.unet.dropout_rate; }),
        {"model.skip_mode", [](const C& c) { return std::string(c.unet.skip_mode == SkipMode::add ? "add" : "concat"); },
         [](C& c, std::string_view v) {
             if (v != "concat" && v != "add")
                 throw ConfigError("config key 'model.skip_mode': expected concat or add");
             c.unet.skip_mode = v == "add" ? SkipMode::add : SkipMode::concat;
         }},
        {"model.init", [](const C& c) { return std::string(c.unet.init == ad::InitScheme::xavier ? "xavier" : "he"); },
         [](C& c, std::string_view v) {
             if (v != "he" && v != "xavier")
                 throw ConfigError("config key 'model.init': expected he or xavier");
             c.unet.init = v == "xavier" ? ad::InitScheme::xavier : ad::InitScheme::he;
         }},
        real_field("train.learning_rate", [](auto& c) -> auto& { return c.train.learning_rate; }),
        size_field("train.batch_size", [](auto& c) -> auto& { return c.train.batch_size; }),
        real_field("train.weight_decay", [](auto& c) -> auto& { return c.train.weight_decay; }),
        size_field("train.max_epochs", [](auto& c) -> auto& { return c.train.max_epochs; }),
        size_field("train.patience", [](auto& c) -> auto& { return c.train.patience; }),
        real_field("train.beta1", [](auto& c) -> auto& { return c.train.beta1; }),
        real_field("train.beta2", [](auto& c) -> auto& { return c.train.beta2; }),
        real_field("train.epsilon", [](auto& c) -> auto& { return c.train.epsilon; }),
        real_field("refine.stop_threshold", [](auto& c) -> auto& { return c.stop_threshold; }),
        size_field("refine.max_rounds", [](auto& c) -> auto& { return c.max_rounds; }),
        size_field("refine.tile", [](auto& c) -> auto& { return c.tile; }),
        size_field("refine.overlap", [](auto& c) -> auto& { return c.overlap; }),
        {"refine.fine_tune", [](const C& c) { return std::string(c.fine_tune ? "true" : "false"); },
         [](C& c, std::string_view v) { c.fine_tune = parse_bool("refine.fine_tune", v); }},
    };
    return fields;
}

inline const ConfigField& find_field(std::string_view key)
{
    for (const auto& f : config_fields())
        if (key == f.key)
            return f;
    throw ConfigError("unknown config key '" + std::string(key) + "'");
}

} // namespace detail

inline ExperimentConfig ExperimentConfig::profile(std::string_view name)
{
    ExperimentConfig c;
    if (name == "tiny") {
        c.scene.height = c.scene.width = 256;
        c.scene.blob_scale = 12;
        c.sampling = {32, 512, 128, 0.8};
        c.unet = UnetConfig::tiny();
        c.train.max_epochs = 20;
        c.train.patience = 5;
        c.out = "runs/tiny";
    } else if (name == "full") {
        c.scene.height = c.scene.width = 2048;
        c.scene.blob_scale = 24;
        c.sampling = {64, 11995, 1990, 0.8};
        c.unet = UnetConfig::full();
        c.tile = 256;
        c.out = "runs/full";
    } else {
        throw ConfigError("unknown profile '" + std::string(name) + "' (expected tiny or full)");
    }
    return c;
}

inline std::vector<std::string> ExperimentConfig::keys()
{
    std::vector<std::string> out;
    for (const auto& f : detail::config_fields())
        out.emplace_back(f.key);
    return out;
}

inline void ExperimentConfig::set(std::string_view key, std::string_view value)
{
    detail::find_field(key).set(*this, detail::trim(value));
}

inline std::string ExperimentConfig::get(std::string_view key) const { return detail::find_field(key).get(*this); }

inline void ExperimentConfig::apply_text(std::string_view text, std::string_view origin)
{
    std::size_t line_no = 0, start = 0;
    while (start < text.size()) {
        const auto nl = text.find('\n', start);
        std::string_view line = text.substr(start, nl == std::string_view::npos ? std::string_view::npos : nl - start);
        start = nl == std::string_view::npos ? text.size() : nl + 1;
        ++line_no;
        if (const auto hash_pos = line.find('#'); hash_pos != std::string_view::npos)
            line = line.substr(0, hash_pos);
        const std::string trimmed = detail::trim(line);
        if (trimmed.empty())
            continue;
        const auto eq = trimmed.find('=');
        if (eq == std::string::npos)
            throw ConfigError(std::string(origin) + ":" + std::to_string(line_no) + ": expected key = value");
        try {
            set(detail::trim(std::string_view(trimmed).substr(0, eq)), std::string_view(trimmed).substr(eq + 1));
        } catch (const ConfigError& e) {
            throw ConfigError(std::string(origin) + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
}

inline void ExperimentConfig::apply_file(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in)
        throw ConfigError("cannot read config file " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    apply_text(ss.str(), path.string());
}

inline std::string ExperimentConfig::to_text() const
{
    std::string out;
    for (const auto& f : detail::config_fields()) {
        if (std::string_view(f.key) == "model.preset")
            continue;
        out += std::string(f.key) + " = " + f.get(*this) + "\n";
    }
    return out;
}

inline std::string ExperimentConfig::hash() const
{
    std::string text;
    for (const auto& f : detail::config_fields()) {
        const std::string_view key = f.key;
        if (key == "model.preset" || key == "out")
            continue;
        text += std::string(key) + "=" + f.get(*this) + "\n";
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(text)));
    return buf;
}

inline void ExperimentConfig::validate() const
{
    try {
        scene.validate();
        noise.validate();
        unet.validate();
        train.validate();
        refine_config().validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("invalid configuration: ") + e.what());
    }
    if (!(keep_fraction > 0.0 && keep_fraction <= 1.0))
        throw ConfigError("invalid configuration: sampling.keep_fraction must lie in (0, 1]");
    if (sampling.patch == 0 || sampling.patch % unet.side_multiple() != 0)
        throw ConfigError("invalid configuration: sampling.patch must be a positive multiple of 2^model.depth");
    if (tile % unet.side_multiple() != 0 || overlap >= tile)
        throw ConfigError("invalid configuration: refine.tile must be a multiple of 2^model.depth and exceed refine.overlap");
    if (sampling.train_count == 0 || sampling.val_count == 0)
        throw ConfigError("invalid configuration: sampling counts must be positive");
}

/// Writes the resolved config, headed by the version string, into `dir`.
/// The output path itself is left out so a run reproduces bytes wherever it lands.
inline void freeze_config(const ExperimentConfig& cfg, const std::filesystem::path& dir)
{
    std::filesystem::create_directories(dir);
    std::ofstream f(dir / "config.txt", std::ios::trunc);
    f << "# " << kVersion << "\n# config_hash " << cfg.hash() << "\n";
    std::istringstream lines(cfg.to_text());
    for (std::string line; std::getline(lines, line);)
        if (!line.starts_with("out ="))
            f << line << "\n";
    if (!f)
        throw std::runtime_error("cannot write " + (dir / "config.txt").string());
}

inline void write_text(const std::filesystem::path& path, std::string_view text)
{
    if (path.has_parent_path())
        std::filesystem::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    f.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!f)
        throw std::runtime_error("cannot write " + path.string());
}

// ---------------------------------------------------------------------------
// Pipeline stages shared by the CLI subcommands and the benchmark.

struct SceneBundle {
    ClassMap truth;
    Raster sar;
    ClassMap noisy;
    ClassMap test_truth;
    Raster test_sar;
};

/// Training scene (truth, SAR, degraded labels) and an independent test scene.
inline SceneBundle make_scenes(const ExperimentConfig& cfg)
{
    SceneSpec train_spec = cfg.scene;
    train_spec.seed = substream(cfg.seed, "scene");
    SceneSpec test_spec = cfg.scene;
    test_spec.seed = substream(cfg.seed, "scene.test");
    NoiseSpec noise = cfg.noise;
    noise.seed = substream(cfg.seed, "noise");

    SceneBundle b;
    b.truth = generate_truth(train_spec);
    b.sar = render_sar(b.truth, train_spec);
    b.noisy = degrade_labels(b.truth, noise);
    b.test_truth = generate_truth(test_spec);
    b.test_sar = render_sar(b.test_truth, test_spec);
    return b;
}

inline void save_scenes(const SceneBundle& b, const std::filesystem::path& dir)
{
    std::filesystem::create_directories(dir);
    write_class_map(b.truth, dir / "truth.wslr");
    write_raster(b.sar, dir / "sar.wslr");
    write_class_map(b.noisy, dir / "noisy_labels.wslr");
    write_class_map(b.test_truth, dir / "test_truth.wslr");
    write_raster(b.test_sar, dir / "test_sar.wslr");
}

inline SceneBundle load_scenes(const std::filesystem::path& dir)
{
    for (const char* name : {"truth.wslr", "sar.wslr", "noisy_labels.wslr", "test_truth.wslr", "test_sar.wslr"})
        if (!std::filesystem::exists(dir / name))
            throw std::runtime_error("scene directory " + dir.string() + " lacks " + name + " (run `synth` first)");
    return {read_class_map(dir / "truth.wslr"), read_raster(dir / "sar.wslr"), read_class_map(dir / "noisy_labels.wslr"),
            read_class_map(dir / "test_truth.wslr"), read_raster(dir / "test_sar.wslr")};
}

enum class Supervision { dense, incomplete, inaccurate };

inline const char* supervision_name(Supervision s)
{
    switch (s) {
    case Supervision::dense: return "dense";
    case Supervision::incomplete: return "incomplete";
    case Supervision::inaccurate: return "inaccurate";
    }
    return "?";
}

/// Patches drawn from the accurate labels; dense and incomplete runs share them.
inline TrainValPatches supervised_patches(const ExperimentConfig& cfg, const SceneBundle& b, Supervision mode)
{
    TrainValPatches p = sample_train_val(b.sar, b.truth, cfg.sampling, substream(cfg.seed, "sampling"));
    if (mode == Supervision::incomplete) {
        p.train = mask_labels(std::move(p.train), cfg.keep_fraction, substream(cfg.seed, "mask.train"));
        p.val = mask_labels(std::move(p.val), cfg.keep_fraction, substream(cfg.seed, "mask.val"));
    }
    return p;
}

struct ModeOutcome {
    Model<float> model;
    std::vector<EpochRecord> history;   // dense / incomplete
    std::optional<RefineResult> refine; // inaccurate
};

/// Trains one supervision regime. Inaccurate runs the refinement loop on the
/// degraded labels and writes round artifacts under `run_dir`.
inline ModeOutcome run_mode(const ExperimentConfig& cfg, const SceneBundle& b, Supervision mode,
                            const std::filesystem::path& run_dir, std::ostream* log = nullptr)
{
    std::filesystem::create_directories(run_dir);
    ModeOutcome out;
    if (mode == Supervision::inaccurate) {
        RefineConfig rc = cfg.refine_config();
        rc.run_dir = run_dir;
        RoundRunner base = training_round_runner(b.sar, rc);
        RoundRunner logged = [&](std::size_t round, const ClassMap& labels, const Model<float>* prev) {
            RoundOutput o = base(round, labels, prev);
            if (log)
                *log << "  inaccurate round " << round << ": change fraction "
                     << change_fraction(labels, o.prediction) << "\n";
            return o;
        };
        out.refine = refine_loop(b.noisy, rc, logged, &b.truth);
        out.model = out.refine->model;
    } else {
        const TrainValPatches p = supervised_patches(cfg, b, mode);
        TrainConfig tc = cfg.train;
        tc.seed = substream(cfg.seed, "train");
        TrainResult r = train(build<float>(cfg.unet, substream(cfg.seed, "init")), p.train, p.val, tc,
                              mode == Supervision::dense ? TrainMode::dense : TrainMode::sparse);
        write_text(run_dir / "history.jsonl", history_jsonl(r.history));
        out.model = std::move(r.model);
        out.history = std::move(r.history);
        if (log)
            *log << "  " << supervision_name(mode) << ": " << out.history.size() << " epochs\n";
    }
    save_checkpoint(out.model, run_dir / "checkpoint.wslm");
    return out;
}

/// Prediction written as probability.wslr, classes.wslr and classes.png.
inline MapPrediction predict_to(const Model<float>& model, const Raster& raster, const ExperimentConfig& cfg,
                                const std::filesystem::path& dir)
{
    MapPrediction p = predict_map(model, raster, cfg.tile, cfg.overlap);
    std::filesystem::create_directories(dir);
    write_raster(p.probability, dir / "probability.wslr");
    write_class_map(p.classes, dir / "classes.wslr");
    export_png(p.classes, dir / "classes.png");
    return p;
}

struct BenchResult {
    std::vector<MetricRecord> records;
    double dense_f1 = 0.0;
    double incomplete_f1 = 0.0;
    double inaccurate_f1 = 0.0;
    double inaccurate_round1_f1 = 0.0; // model trained once on the degraded labels
    std::size_t rounds = 0;
    bool converged = false;
    double final_change_fraction = 1.0;
};

inline double forest_f1(const std::vector<MetricRecord>& records, const std::string& method)
{
    for (const auto& r : records)
        if (r.method == method && r.class_code == kForest)
            return r.metrics.f1.value_or(0.0);
    throw std::logic_error("no forest record for " + method);
}

/// Synthesises the scene pair, trains all three regimes on the training
/// scene, predicts the test scene and writes the comparison under `out`.
inline BenchResult run_bench(const ExperimentConfig& cfg, const std::filesystem::path& out, std::ostream* log = nullptr)
{
    cfg.validate();
    std::filesystem::create_directories(out);
    freeze_config(cfg, out);
    const std::string hash = cfg.hash();
    if (log)
        *log << "bench: config " << hash << ", seed " << cfg.seed << "\n";

    const SceneBundle scenes = make_scenes(cfg);
    save_scenes(scenes, out / "scene");
    export_png(scenes.test_truth, out / "scene" / "test_truth.png");
    export_png(scenes.noisy, out / "scene" / "noisy_labels.png");

    BenchResult result;
    nlohmann::ordered_json report;
    report["version"] = kVersion;
    report["seed"] = cfg.seed;
    report["config_hash"] = hash;

    for (Supervision mode : {Supervision::dense, Supervision::incomplete, Supervision::inaccurate}) {
        const std::string name = supervision_name(mode);
        const ModeOutcome o = run_mode(cfg, scenes, mode, out / name, log);
        const MapPrediction pred = predict_to(o.model, scenes.test_sar, cfg, out / name / "test_prediction");
        for (auto& r : evaluate_method(name, pred.classes, scenes.test_truth, cfg.seed, hash))
            result.records.push_back(std::move(r));

        nlohmann::ordered_json entry;
        if (o.refine) {
            const RefineResult& rr = *o.refine;
            const MapPrediction first =
                predict_to(rr.first_model, scenes.test_sar, cfg, out / name / "round1_test_prediction");
            const Prf first_prf = prf(confusion(first.classes, scenes.test_truth), kForest);
            result.inaccurate_round1_f1 = first_prf.f1.value_or(0.0);
            result.rounds = rr.rounds.size();
            result.converged = rr.converged;
            result.final_change_fraction = rr.rounds.back().change_fraction;
            write_class_map(rr.final_map, out / name / "final_labels.wslr");
            entry["rounds"] = nlohmann::ordered_json::parse(rounds_json(rr.rounds, rr.converged))["rounds"];
            entry["converged"] = rr.converged;
            entry["round1_test_forest_f1"] = result.inaccurate_round1_f1;
        } else {
            entry["history"] = nlohmann::ordered_json::array();
            for (const auto& h : o.history)
                entry["history"].push_back(to_json(h));
        }
        report[name] = entry;
    }

    result.dense_f1 = forest_f1(result.records, "dense");
    result.incomplete_f1 = forest_f1(result.records, "incomplete");
    result.inaccurate_f1 = forest_f1(result.records, "inaccurate");
    report["test_forest_f1"] = {{"dense", result.dense_f1},
                                {"incomplete", result.incomplete_f1},
                                {"inaccurate", result.inaccurate_f1}};

    write_text(out / "evaluation.json", evaluation_json(result.records));
    write_text(out / "table.txt", format_table(result.records));
    write_text(out / "report.json", report.dump(2) + "\n");
    if (log)
        *log << format_table(result.records);
    return result;
}

} // namespace sarwsl
