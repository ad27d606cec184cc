// Library walk-through: synthesise a small scene, train on 2% of the labels,
// map the test scene and score it.

#include <iostream>

#include "sarwsl/experiment.hpp"

int main()
{
    using namespace sarwsl;

    ExperimentConfig cfg = ExperimentConfig::profile("tiny");
    cfg.scene.height = cfg.scene.width = 128;
    cfg.scene.blob_scale = 8;
    cfg.sampling = {32, 128, 32, 0.7};
    cfg.train.max_epochs = 8;
    cfg.validate();

    const SceneBundle scenes = make_scenes(cfg);
    const TrainValPatches patches = supervised_patches(cfg, scenes, Supervision::incomplete);
    std::cout << "labelled pixels per patch: " << patches.train.mask_count(0) << " of " << patches.train.plane()
              << "\n";

    TrainConfig tc = cfg.train;
    tc.seed = substream(cfg.seed, "train");
    const TrainResult trained =
        train(build<float>(cfg.unet, substream(cfg.seed, "init")), patches.train, patches.val, tc, TrainMode::sparse);
    for (const EpochRecord& e : trained.history)
        std::cout << to_json(e).dump() << "\n";

    const MapPrediction map = predict_map(trained.model, scenes.test_sar, cfg.tile, cfg.overlap);
    const auto records = evaluate_method("incomplete", map.classes, scenes.test_truth, cfg.seed, cfg.hash());
    std::cout << format_table(records);
}
