#pragma once

// Training loop, checkpoint/log plumbing and dataset evaluation.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "lcanet/config.hpp"
#include "lcanet/data.hpp"
#include "lcanet/evaluation.hpp"
#include "lcanet/network.hpp"
#include "lcanet/objectives.hpp"
#include "lcanet/serialize.hpp"

namespace lcanet {

/// Loss became NaN or infinite.
class NumericFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr const char* kCsvHeader = "iter,lr,l_cs,l_rf,l_cs_bd,l_rf_bd,total";

template <typename T>
std::string csv_row(int iter, double lr, const LossBreakdown<T>& br) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g", iter, lr, br.l_cs, br.l_rf, br.l_cs_bd,
                br.l_rf_bd, br.total);
  return buf;
}

struct TrainOptions {
  std::filesystem::path checkpoint;  // empty: no checkpoints
  std::filesystem::path log;         // empty: no CSV
  std::function<void(int, double, const LossBreakdown<float>&)> on_step;
  int inject_nan_at = -1;  // test hook: poison the loss at this step
};

struct TrainResult {
  ParameterSet<float> params;
  LossBreakdown<float> last;
  int steps = 0;
};

/// Gives parameters the backward pass never reached an explicit zero gradient.
template <typename T>
void fill_missing_grads(ParameterSet<T>& params) {
  for (auto& p : params.all())
    if (!p.tensor.has_grad()) p.tensor.grad_buffer();
}

/// Mean colour used for subtraction: explicit in the config, or the dataset's stats.
inline RunConfig resolve_mean(RunConfig cfg, const Dataset& ds) {
  if (cfg.mean_from_data) {
    cfg.augment.mean = ds.stats.mean;
    cfg.mean_from_data = false;
  }
  return cfg;
}

/**
 * Runs cfg.optim.max_iter SGD steps from a fresh initialisation. Checkpoints
 * are written atomically every cfg.checkpoint_every steps and at the end; a
 * non-finite loss throws NumericFailure before the step is applied, so the
 * last checkpoint on disk is the last good one.
 */
inline TrainResult train(const RunConfig& config, const Dataset& ds, const TrainOptions& opts = {}) {
  const RunConfig cfg = resolve_mean(config, ds);
  cfg.validate();
  TrainResult result{build_parameters<float>(cfg.model, cfg.seed), {}, 0};
  auto& params = result.params;
  BatchSampler sampler(ds, cfg.augment, cfg.seed, cfg.augment_enabled);

  std::ofstream log;
  if (!opts.log.empty()) {
    log.open(opts.log);
    if (!log) throw std::runtime_error("cannot write " + opts.log.string());
    log << kCsvHeader << '\n';
  }
  for (int iter = 0; iter < cfg.optim.max_iter; ++iter) {
    const Batch batch = sampler.next(cfg.optim.batch_size);
    const auto outputs = model_forward(batch.images, cfg.model, params);
    auto br = total_loss(outputs, batch.masks, cfg.loss);
    if (iter == opts.inject_nan_at) br.total = std::nan("");
    if (!std::isfinite(br.total)) {
      if (log) log.flush();
      throw NumericFailure("non-finite loss at step " + std::to_string(iter));
    }
    backward(br.objective);
    fill_missing_grads(params);
    const double lr = poly_lr(iter, cfg.optim);
    sgd_update(params, lr, cfg.optim.momentum, cfg.optim.weight_decay);
    if (log) log << csv_row(iter, lr, br) << '\n';
    if (opts.on_step) opts.on_step(iter, lr, br);
    result.last = br;
    result.steps = iter + 1;
    const bool last_step = iter + 1 == cfg.optim.max_iter;
    if (!opts.checkpoint.empty() && ((iter + 1) % cfg.checkpoint_every == 0 || last_step))
      save_checkpoint(opts.checkpoint, params);
  }
  return result;
}

// Files a training run leaves in its output directory.
inline constexpr const char* kRunConfigFile = "run.cfg";
inline constexpr const char* kCheckpointFile = "model.lcam";
inline constexpr const char* kLogFile = "train.csv";

struct LoadedModel {
  RunConfig config;
  ParameterSet<float> params;
};

/// Rebuilds a trained model from its checkpoint and run config (default: run.cfg next to the checkpoint).
inline LoadedModel load_model(const std::filesystem::path& checkpoint, std::filesystem::path config_path = {}) {
  if (config_path.empty()) config_path = checkpoint.parent_path() / kRunConfigFile;
  if (!std::filesystem::exists(checkpoint)) throw std::runtime_error("missing checkpoint " + checkpoint.string());
  LoadedModel m{load_config(config_path), {}};
  m.params = build_parameters<float>(m.config.model, m.config.seed);
  load_checkpoint(checkpoint, m.params);
  return m;
}

/// Saliency map (1 x H x W) for one unnormalised 3 x H x W image.
inline Tensor predict(const ModelConfig& model, const ParameterSet<float>& params, const Tensor& image,
                      const std::array<double, 3>& mean, ForwardOutputs<float>* outputs_out = nullptr) {
  NoGradGuard guard;
  Sample s{image, Tensor({1, image.dim(1), image.dim(2)}), ""};
  const Batch b = stack_batch({normalized(s, mean)});
  auto outputs = model_forward(b.images, model, params, nullptr, outputs_out != nullptr);
  Tensor pred = reshape(outputs.prediction(), {1, image.dim(1), image.dim(2)}).detach();
  if (outputs_out) *outputs_out = std::move(outputs);
  return pred;
}

/// "acf_scale_0.3.pgm" style file name for one attention scale.
inline std::string attention_file_name(double scale) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "acf_scale_%g.pgm", scale);
  return buf;
}

/**
 * Writes coarse.pgm, refined.pgm (when the model has a refine head) and one
 * acf_scale_<s>.pgm per configured scale into `out_dir`. Attention maps come
 * from the shallowest decoder stage that has an LCB and keep its resolution.
 * Returns the written paths.
 */
inline std::vector<std::filesystem::path> dump_attention(const ModelConfig& model, const ParameterSet<float>& params,
                                                         const Tensor& image, const std::array<double, 3>& mean,
                                                         const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  ForwardOutputs<float> outputs;
  predict(model, params, image, mean, &outputs);
  std::vector<std::filesystem::path> written;
  auto emit = [&](const std::string& name, const Tensor& map) {
    NoGradGuard guard;
    const auto path = out_dir / name;
    write_pgm(path, reshape(map.detach(), {1, map.dim(2), map.dim(3)}));
    written.push_back(path);
  };
  emit("coarse.pgm", outputs.coarse);
  if (outputs.refined.defined()) emit("refined.pgm", outputs.refined);
  if (outputs.attention.empty()) return written;
  int stage = outputs.attention.front().stage;
  for (const auto& a : outputs.attention) stage = std::min(stage, a.stage);
  for (const auto& a : outputs.attention)
    if (a.stage == stage) emit(attention_file_name(a.scale), a.map);
  return written;
}

/// Runs the model over every sample and aggregates the metrics.
inline MetricReport evaluate_model(const ModelConfig& model, const ParameterSet<float>& params, const Dataset& ds,
                                   const std::array<double, 3>& mean, const EvalConfig& eval = {}) {
  MetricAccumulator acc(eval);
  for (const auto& s : ds.samples) {
    const Tensor pred = predict(model, params, s.image, mean);
    acc.add<float>(pred.data(), s.mask.data());
  }
  return acc.report();
}

/// Metrics of precomputed maps (one per sample, same order) against the dataset masks.
inline MetricReport evaluate_predictions(const std::vector<Tensor>& predictions, const Dataset& ds,
                                         const EvalConfig& eval = {}) {
  if (predictions.size() != ds.size()) throw std::invalid_argument("evaluate: prediction count mismatch");
  MetricAccumulator acc(eval);
  for (std::size_t i = 0; i < predictions.size(); ++i)
    acc.add<float>(predictions[i].data(), ds.samples[i].mask.data());
  return acc.report();
}

}  // namespace lcanet
