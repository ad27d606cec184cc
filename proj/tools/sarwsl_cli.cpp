// sarwsl: synthetic SAR forest mapping with weakly supervised U-Nets.
//
//   sarwsl synth   --seed 7 --size 512 --forest-fraction 0.5 --out scene/
//   sarwsl sample  --scene scene/ --mode incomplete --out patches/
//   sarwsl train   --scene scene/ --mode dense|incomplete|inaccurate --out run/
//   sarwsl predict --model run/checkpoint.wslm --input scene/test_sar.wslr --out pred/
//   sarwsl eval    --pred pred/classes.wslr --truth scene/test_truth.wslr --out eval/
//   sarwsl bench   --profile tiny --seed 7 --out runs/tiny
//
// Exit status: 0 success, 1 usage or configuration error, 2 runtime failure.

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "sarwsl/experiment.hpp"

namespace {

using namespace sarwsl;
namespace fs = std::filesystem;

class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct CommonOptions {
    std::string profile = "tiny";
    std::string config_file;
    std::vector<std::string> overrides;
    std::optional<std::uint64_t> seed;
    std::string out;
};

void add_common(CLI::App* cmd, CommonOptions& o)
{
    cmd->add_option("--profile", o.profile, "Base profile: tiny or full")->capture_default_str();
    cmd->add_option("--config", o.config_file, "key = value configuration file")->check(CLI::ExistingFile);
    cmd->add_option("--set", o.overrides, "Override one key, e.g. --set train.max_epochs=5")->take_all();
    cmd->add_option("--seed", o.seed, "Global seed");
    cmd->add_option("--out", o.out, "Output directory");
}

// profile < config file < --set < dedicated flags.
ExperimentConfig resolve(const CommonOptions& o)
{
    ExperimentConfig cfg = ExperimentConfig::profile(o.profile);
    if (!o.config_file.empty())
        cfg.apply_file(o.config_file);
    for (const auto& kv : o.overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos)
            throw ConfigError("--set expects key=value, got '" + kv + "'");
        cfg.set(detail::trim(std::string_view(kv).substr(0, eq)), detail::trim(std::string_view(kv).substr(eq + 1)));
    }
    if (o.seed)
        cfg.seed = *o.seed;
    if (!o.out.empty())
        cfg.out = o.out;
    return cfg;
}

Supervision parse_mode(const std::string& m)
{
    if (m == "dense")
        return Supervision::dense;
    if (m == "incomplete")
        return Supervision::incomplete;
    if (m == "inaccurate")
        return Supervision::inaccurate;
    throw UsageError("--mode must be dense, incomplete or inaccurate (got '" + m + "')");
}

SceneBundle scenes_for(const ExperimentConfig& cfg, const std::string& scene_dir)
{
    return scene_dir.empty() ? make_scenes(cfg) : load_scenes(scene_dir);
}

int run(int argc, char** argv)
{
    CLI::App app{"Weakly supervised forest mapping on synthetic SAR scenes", "sarwsl"};
    app.set_version_flag("--version", kVersion);
    app.require_subcommand(1);

    CommonOptions common;
    std::string scene_dir, mode = "dense", model_path, input_path, truth_path, method = "model";
    std::vector<std::string> preds;
    std::optional<std::size_t> size;
    std::optional<double> forest_fraction, keep_fraction;

    auto* synth = app.add_subcommand("synth", "Generate training and test scenes with degraded labels");
    add_common(synth, common);
    synth->add_option("--size", size, "Scene side length in pixels");
    synth->add_option("--forest-fraction", forest_fraction, "Target forest share in (0, 1)");

    auto* sample = app.add_subcommand("sample", "Sample train/validation patch sets from a scene");
    add_common(sample, common);
    sample->add_option("--scene", scene_dir, "Directory written by synth (default: synthesise from config)");
    sample->add_option("--mode", mode, "dense or incomplete")->capture_default_str();
    sample->add_option("--keep-fraction", keep_fraction, "Labelled share per patch for incomplete mode");

    auto* trn = app.add_subcommand("train", "Train one supervision regime");
    add_common(trn, common);
    trn->add_option("--scene", scene_dir, "Directory written by synth (default: synthesise from config)");
    trn->add_option("--mode", mode, "dense, incomplete or inaccurate")->capture_default_str();
    trn->add_option("--keep-fraction", keep_fraction, "Labelled share per patch for incomplete mode");

    auto* pred = app.add_subcommand("predict", "Predict a forest map with a checkpoint");
    add_common(pred, common);
    pred->add_option("--model", model_path, "WSLM checkpoint")->required()->check(CLI::ExistingFile);
    pred->add_option("--input", input_path, "Two-band WSLR raster")->required()->check(CLI::ExistingFile);

    auto* eval = app.add_subcommand("eval", "Score class maps against a reference");
    add_common(eval, common);
    eval->add_option("--pred", preds, "Class map WSLR, optionally as method=path; repeatable")->required();
    eval->add_option("--truth", truth_path, "Reference class map WSLR")->required()->check(CLI::ExistingFile);
    eval->add_option("--method", method, "Method name for an unnamed --pred")->capture_default_str();

    auto* bench = app.add_subcommand("bench", "Dense vs incomplete vs inaccurate comparison");
    add_common(bench, common);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    ExperimentConfig cfg;
    try {
        cfg = resolve(common);
        if (size)
            cfg.scene.height = cfg.scene.width = *size;
        if (forest_fraction)
            cfg.scene.forest_fraction = *forest_fraction;
        if (keep_fraction)
            cfg.keep_fraction = *keep_fraction;
        cfg.validate();
    } catch (const ConfigError& e) {
        std::cerr << "sarwsl: " << e.what() << "\n";
        return 1;
    }
    const fs::path out = cfg.out;

    try {
        if (*synth) {
            const SceneBundle b = make_scenes(cfg);
            save_scenes(b, out);
            export_png(b.truth, out / "truth.png");
            export_png(b.noisy, out / "noisy_labels.png");
            freeze_config(cfg, out);
            std::cout << "wrote scenes to " << out.string() << "\n";
        } else if (*sample) {
            const Supervision m = parse_mode(mode);
            if (m == Supervision::inaccurate)
                throw UsageError("sample --mode must be dense or incomplete");
            const SceneBundle b = scenes_for(cfg, scene_dir);
            const TrainValPatches p = supervised_patches(cfg, b, m);
            save_patch_set(p.train, out / "train", substream(cfg.seed, "sampling"));
            save_patch_set(p.val, out / "val", substream(cfg.seed, "sampling"));
            freeze_config(cfg, out);
            std::cout << "wrote " << p.train.count << " train and " << p.val.count << " validation patches to "
                      << out.string() << "\n";
        } else if (*trn) {
            const Supervision m = parse_mode(mode);
            const SceneBundle b = scenes_for(cfg, scene_dir);
            fs::create_directories(out);
            freeze_config(cfg, out);
            const ModeOutcome o = run_mode(cfg, b, m, out, &std::cerr);
            if (o.refine)
                write_class_map(o.refine->final_map, out / "final_labels.wslr");
            std::cout << "wrote " << (out / "checkpoint.wslm").string() << "\n";
        } else if (*pred) {
            const Model<float> model = load_checkpoint(model_path);
            const Raster raster = read_raster(input_path);
            const MapPrediction p = predict_to(model, raster, cfg, out);
            std::cout << "forest pixels " << p.classes.count(kForest) << " of " << p.classes.pixels() << "\n";
        } else if (*eval) {
            const ClassMap truth = read_class_map(truth_path);
            std::vector<MetricRecord> records;
            for (const auto& entry : preds) {
                const auto eq = entry.find('=');
                const std::string name = eq == std::string::npos ? method : entry.substr(0, eq);
                const std::string path = eq == std::string::npos ? entry : entry.substr(eq + 1);
                if (!fs::exists(path))
                    throw std::runtime_error("prediction file not found: " + path);
                for (auto& r : evaluate_method(name, read_class_map(path), truth, cfg.seed, cfg.hash()))
                    records.push_back(std::move(r));
            }
            write_text(out / "evaluation.json", evaluation_json(records));
            std::cout << format_table(records);
        } else if (*bench) {
            const BenchResult r = run_bench(cfg, out, &std::cerr);
            std::cout << "forest F1: dense " << r.dense_f1 << ", incomplete " << r.incomplete_f1 << ", inaccurate "
                      << r.inaccurate_f1 << " (round 1 " << r.inaccurate_round1_f1 << ", " << r.rounds << " rounds"
                      << (r.converged ? "" : ", not converged") << ")\n";
        }
    } catch (const UsageError& e) {
        std::cerr << "sarwsl: " << e.what() << "\n";
        return 1;
    } catch (const ConfigError& e) {
        std::cerr << "sarwsl: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "sarwsl: " << e.what() << "\n";
        return 2;
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) { return run(argc, argv); }
