// lcanet command-line driver.
//
// Exit codes: 0 success, 1 self-test failure, 2 usage or configuration error,
// 3 numeric failure during training.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lcanet/lcanet.hpp"
#include "lcanet/testing/self_test.hpp"

namespace fs = std::filesystem;
using namespace lcanet;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitCheckFailed = 1;
constexpr int kExitUsage = 2;
constexpr int kExitNumeric = 3;

/// Error that maps to exit code 2.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void require_exists(const fs::path& p, const char* what) {
  if (p.empty() || !fs::exists(p)) throw UsageError(std::string(what) + " not found: " + p.string());
}

RunConfig config_with_overrides(const fs::path& path, const std::vector<std::string>& overrides) {
  require_exists(path, "config");
  RunConfig cfg = load_config(path);
  for (const auto& kv : overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    set_config_value(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  cfg.validate();
  return cfg;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

int cmd_gen_data(const fs::path& out, int count, int size, std::uint64_t seed) {
  if (count < 1) throw UsageError("--count must be positive");
  if (size < 32 || size % 32) throw UsageError("--size must be a positive multiple of 32");
  gen_synthetic(out, count, size, seed);
  std::cout << "wrote " << count << " samples to " << out.string() << "\n";
  return kExitOk;
}

int cmd_train(const fs::path& config_path, const std::vector<std::string>& overrides, int inject_nan_at) {
  RunConfig cfg = config_with_overrides(config_path, overrides);
  require_exists(cfg.data_dir, "data_dir");
  const Dataset ds = load_dataset(cfg.data_dir);
  cfg = resolve_mean(cfg, ds);
  const fs::path out = cfg.out_dir;
  fs::create_directories(out);
  write_text(out / kRunConfigFile, format_config(cfg));

  TrainOptions opts;
  opts.checkpoint = out / kCheckpointFile;
  opts.log = out / kLogFile;
  opts.inject_nan_at = inject_nan_at;
  const int every = std::max(1, cfg.optim.max_iter / 20);
  opts.on_step = [&](int iter, double lr, const LossBreakdown<float>& br) {
    if (iter % every == 0 || iter + 1 == cfg.optim.max_iter)
      std::printf("iter %5d  lr %.3e  total %.5f  cs %.4f  rf %.4f\n", iter, lr, br.total, br.l_cs, br.l_rf);
    std::fflush(stdout);
  };
  try {
    const TrainResult r = train(cfg, ds, opts);
    std::cout << "trained " << r.steps << " steps; checkpoint " << opts.checkpoint.string() << "\n";
  } catch (const NumericFailure& e) {
    std::cerr << "error: " << e.what() << "\n";
    if (fs::exists(opts.checkpoint)) std::cerr << "last good checkpoint: " << opts.checkpoint.string() << "\n";
    return kExitNumeric;
  }
  return kExitOk;
}

int cmd_eval(const fs::path& model, const fs::path& config, const fs::path& data, const fs::path& predictions,
             const fs::path& out) {
  require_exists(data, "data");
  const Dataset ds = load_dataset(data);
  MetricReport rep;
  if (!predictions.empty()) {
    require_exists(predictions, "predictions");
    std::vector<Tensor> maps;
    for (const auto& s : ds.samples) {
      const fs::path p = predictions / (s.id + ".pgm");
      require_exists(p, "prediction");
      maps.push_back(read_pgm(p));
    }
    rep = evaluate_predictions(maps, ds);
  } else {
    require_exists(model, "model");
    if (!config.empty()) require_exists(config, "config");
    const LoadedModel m = load_model(model, config);
    rep = evaluate_model(m.config.model, m.params, ds, m.config.augment.mean);
  }
  if (!out.empty()) write_text(out, rep.to_json().dump(2) + "\n");
  std::cout << rep.summary() << "\n";
  return kExitOk;
}

int cmd_ablate(const fs::path& config_path, const std::vector<std::string>& overrides, const std::string& variant_list,
               const fs::path& val_dir, const fs::path& out) {
  const auto variants = parse_variants(variant_list);
  const RunConfig cfg = config_with_overrides(config_path, overrides);
  require_exists(cfg.data_dir, "data_dir");
  const Dataset train_set = load_dataset(cfg.data_dir);
  if (!val_dir.empty()) require_exists(val_dir, "validation data");
  const Dataset val_set = val_dir.empty() ? train_set : load_dataset(val_dir);
  if (val_dir.empty()) std::cerr << "warning: no --val given, scoring on the training set\n";

  const int every = std::max(1, cfg.optim.max_iter / 4);
  const auto rows = run_ablation(cfg, train_set, val_set, variants, [&](const std::string& v, int iter, double loss) {
    if (iter % every == 0) std::printf("[%s] iter %d total %.5f\n", v.c_str(), iter, loss);
    std::fflush(stdout);
  });
  const std::string table = format_ablation_table(rows);
  std::cout << table;
  if (!out.empty()) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& r : rows)
      j.push_back({{"variant", r.variant}, {"max_f", r.max_f}, {"mae", r.mae}, {"final_loss", r.final_loss},
                   {"seconds", r.seconds}});
    write_text(out, j.dump(2) + "\n");
  }
  return kExitOk;
}

int cmd_dump_attention(const fs::path& model, const fs::path& config, const fs::path& image, const fs::path& out) {
  require_exists(model, "model");
  require_exists(image, "image");
  if (!config.empty()) require_exists(config, "config");
  const LoadedModel m = load_model(model, config);
  const Tensor img = read_ppm(image);
  if (img.dim(1) % 32 || img.dim(2) % 32) throw UsageError("image size must be a multiple of 32");
  for (const auto& p : dump_attention(m.config.model, m.params, img, m.config.augment.mean, out))
    std::cout << p.string() << "\n";
  return kExitOk;
}

int cmd_self_test(const fs::path& scratch, double fault_scale, const std::string& filter) {
  detail::sigmoid_grad_scale() = fault_scale;
  fs::create_directories(scratch);
  int failed = 0, run = 0;
  double total = 0.0;
  for (const auto& check : testing::all_checks(scratch)) {
    if (!filter.empty() && check.name.find(filter) == std::string::npos) continue;
    const auto r = testing::run_check(check);
    std::cout << testing::format_result(r) << std::endl;
    failed += !r.passed;
    ++run;
    total += r.seconds;
  }
  std::printf("%d checks, %d failed, %.2fs\n", run, failed, total);
  return failed == 0 && run > 0 ? kExitOk : kExitCheckFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"lcanet: local context attention network for salient object segmentation"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic segmentation dataset");
  fs::path gen_out;
  int gen_count = 0, gen_size = 64;
  std::uint64_t gen_seed = 0;
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--count", gen_count, "Number of samples")->required();
  gen->add_option("--size", gen_size, "Image side length")->capture_default_str();
  gen->add_option("--seed", gen_seed, "Generator seed")->capture_default_str();

  std::vector<std::string> overrides;
  auto* tr = app.add_subcommand("train", "Train a model from a run config");
  fs::path train_cfg;
  int inject_nan = -1;
  tr->add_option("--config", train_cfg, "Run config (key=value)")->required();
  tr->add_option("--set", overrides, "Override a config key, key=value (repeatable)");
  tr->add_option("--inject-nan-at", inject_nan, "Test hook: poison the loss at this step")->group("");

  auto* ev = app.add_subcommand("eval", "Score a checkpoint or precomputed maps on a dataset");
  fs::path eval_model, eval_cfg, eval_data, eval_preds, eval_out;
  ev->add_option("--model", eval_model, "Checkpoint (.lcam)");
  ev->add_option("--config", eval_cfg, "Run config; default: run.cfg next to the checkpoint");
  ev->add_option("--data", eval_data, "Dataset directory")->required();
  ev->add_option("--predictions", eval_preds, "Directory of <id>.pgm maps to score instead of a model");
  ev->add_option("--out", eval_out, "JSON report path");

  auto* ab = app.add_subcommand("ablate", "Train and compare model variants");
  fs::path ab_cfg, ab_val, ab_out;
  std::string ab_variants;
  ab->add_option("--config", ab_cfg, "Base run config")->required();
  ab->add_option("--variants", ab_variants, "Comma list of: " + detail::join(variant_names()))->required();
  ab->add_option("--val", ab_val, "Validation dataset directory");
  ab->add_option("--out", ab_out, "JSON table path");
  ab->add_option("--set", overrides, "Override a config key, key=value (repeatable)");

  auto* da = app.add_subcommand("dump-attention", "Write coarse, refined and ACF maps for one image as PGM");
  fs::path da_model, da_cfg, da_image, da_out;
  da->add_option("--model", da_model, "Checkpoint (.lcam)")->required();
  da->add_option("--config", da_cfg, "Run config; default: run.cfg next to the checkpoint");
  da->add_option("--image", da_image, "Input PPM")->required();
  da->add_option("--out", da_out, "Output directory")->required();

  auto* st = app.add_subcommand("self-test", "Run gradient checks and reference comparisons");
  fs::path st_scratch = fs::temp_directory_path() / "lcanet-self-test";
  double st_fault = 1.0;
  std::string st_filter;
  st->add_option("--scratch", st_scratch, "Directory for round-trip files")->capture_default_str();
  st->add_option("--filter", st_filter, "Only run checks whose name contains this text");
  st->add_option("--inject-fault", st_fault, "Test hook: scale the sigmoid gradient by this factor")->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*gen) return cmd_gen_data(gen_out, gen_count, gen_size, gen_seed);
    if (*tr) return cmd_train(train_cfg, overrides, inject_nan);
    if (*ev) {
      if (eval_model.empty() && eval_preds.empty()) throw UsageError("eval needs --model or --predictions");
      return cmd_eval(eval_model, eval_cfg, eval_data, eval_preds, eval_out);
    }
    if (*ab) return cmd_ablate(ab_cfg, overrides, ab_variants, ab_val, ab_out);
    if (*da) return cmd_dump_attention(da_model, da_cfg, da_image, da_out);
    if (*st) return cmd_self_test(st_scratch, st_fault, st_filter);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const UnknownVariant& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const NumericFailure& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    // Unreadable or malformed inputs.
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitUsage;
}
