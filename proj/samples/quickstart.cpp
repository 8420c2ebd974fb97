// Generates a small synthetic dataset, trains a narrow model for a few
// hundred steps and prints validation metrics.
//
//   sample_quickstart [work_dir] [steps]

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <string>

#include "lcanet/lcanet.hpp"

int main(int argc, char** argv) {
  namespace fs = std::filesystem;
  using namespace lcanet;
  const fs::path work = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "lcanet-quickstart";
  const int steps = argc > 2 ? std::atoi(argv[2]) : 200;

  gen_synthetic(work / "train", 64, 64, 1);
  gen_synthetic(work / "val", 16, 64, 2);
  const Dataset train_set = load_dataset(work / "train");
  const Dataset val_set = load_dataset(work / "val");

  RunConfig cfg = parse_config(
      "model.stage_channels=8,16,32,32,32\n"
      "optim.base_lr=0.01\n"
      "optim.batch_size=4\n"
      "loss.lambda=1,1,0.5,0.5\n");
  cfg.optim.max_iter = steps;
  cfg = resolve_mean(cfg, train_set);

  TrainOptions opts;
  opts.on_step = [&](int iter, double lr, const LossBreakdown<float>& br) {
    if (iter % 50 == 0) std::printf("iter %4d lr %.4f loss %.4f\n", iter, lr, br.total);
  };
  const TrainResult result = train(cfg, train_set, opts);
  const MetricReport rep = evaluate_model(cfg.model, result.params, val_set, cfg.augment.mean);
  std::printf("validation: %s\n", rep.summary().c_str());
  return 0;
}
