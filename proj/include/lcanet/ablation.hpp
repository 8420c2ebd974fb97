#pragma once

// Named model variants for ablation runs and the harness that trains and
// scores them on a shared seed.
//
//   coarse          plain encoder + coarse head
//   grb             coarse + global refinement block
//   srb             grb + side-refinement decoder
//   acf             srb + single-scale ACF (scale 0.5, no LCC)
//   bl              acf + boundary loss
//   baseline        srb + boundary loss, no attention
//   lcb             baseline + multi-scale ACF + LCC from the base config
//   se, nonlocal, local_affinity
//                   baseline + the corresponding attention block

#include <algorithm>
#include <chrono>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "lcanet/config.hpp"
#include "lcanet/training.hpp"

namespace lcanet {

class UnknownVariant : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline const std::vector<std::string>& variant_names() {
  static const std::vector<std::string> names{"coarse", "grb",    "srb", "acf",      "bl",
                                              "baseline", "lcb", "se",  "nonlocal", "local_affinity"};
  return names;
}

/// Boundary-loss weights used when a variant switches the boundary terms on
/// and the base config has them off.
inline constexpr double kDefaultBoundaryWeight = 0.5;

/// `base` with the architecture and loss toggles of `name`; everything else is kept.
inline RunConfig variant_config(const std::string& name, RunConfig base) {
  auto& m = base.model;
  auto& l = base.loss;
  const double bd_c = l.lambda[2] > 0 ? l.lambda[2] : kDefaultBoundaryWeight;
  const double bd_r = l.lambda[3] > 0 ? l.lambda[3] : kDefaultBoundaryWeight;
  auto boundary = [&](bool on) {
    l.lambda[2] = on ? bd_c : 0.0;
    l.lambda[3] = on ? bd_r : 0.0;
  };
  auto coarse_only = [&](bool grb) {
    m.heads = Heads::kCoarseOnly;
    m.use_grb = grb;
    m.attention_kind = AttentionKind::kNone;
    boundary(false);
  };
  auto decoder = [&](AttentionKind kind, bool bl) {
    m.heads = Heads::kCoarseAndRefine;
    m.use_grb = true;
    m.attention_kind = kind;
    boundary(bl);
  };

  if (name == "coarse") {
    coarse_only(false);
  } else if (name == "grb") {
    coarse_only(true);
  } else if (name == "srb") {
    decoder(AttentionKind::kNone, false);
  } else if (name == "acf" || name == "bl") {
    decoder(AttentionKind::kAcf, name == "bl");
    m.lcb.scales = {0.5};
    m.lcb.use_lcc = false;
  } else if (name == "baseline") {
    decoder(AttentionKind::kNone, true);
  } else if (name == "lcb") {
    decoder(AttentionKind::kAcf, true);
  } else if (name == "se") {
    decoder(AttentionKind::kSe, true);
  } else if (name == "nonlocal") {
    decoder(AttentionKind::kNonlocal, true);
  } else if (name == "local_affinity") {
    decoder(AttentionKind::kLocalAffinity, true);
  } else {
    throw UnknownVariant("unknown variant '" + name + "'; valid: " + detail::join(variant_names()));
  }
  // Coarse-only models have no refined output to supervise.
  if (m.heads == Heads::kCoarseOnly) l.lambda[1] = 0.0;
  else if (l.lambda[1] == 0.0) l.lambda[1] = 1.0;
  if (l.lambda[0] == 0.0) l.lambda[0] = 1.0;
  base.validate();
  return base;
}

/// Splits a comma list and checks every name; duplicates are rejected.
inline std::vector<std::string> parse_variants(const std::string& list) {
  const auto names = detail::split_list(list);
  if (names.empty()) throw UnknownVariant("no variants given; valid: " + detail::join(variant_names()));
  std::vector<std::string> seen;
  for (const auto& n : names) {
    if (std::find(variant_names().begin(), variant_names().end(), n) == variant_names().end())
      throw UnknownVariant("unknown variant '" + n + "'; valid: " + detail::join(variant_names()));
    if (std::find(seen.begin(), seen.end(), n) != seen.end()) throw UnknownVariant("duplicate variant '" + n + "'");
    seen.push_back(n);
  }
  return seen;
}

struct AblationRow {
  std::string variant;
  double max_f = 0;
  double mae = 0;
  double final_loss = 0;
  double seconds = 0;
};

/**
 * Trains each variant from `base.seed` on `train_set` and scores the final
 * weights on `val_set`. The mean colour comes from the training set unless
 * the config fixes it.
 */
inline std::vector<AblationRow> run_ablation(
    const RunConfig& base, const Dataset& train_set, const Dataset& val_set, const std::vector<std::string>& variants,
    const std::function<void(const std::string&, int, double)>& progress = {}) {
  std::vector<AblationRow> rows;
  for (const auto& name : variants) {
    const RunConfig cfg = resolve_mean(variant_config(name, base), train_set);
    const auto start = std::chrono::steady_clock::now();
    TrainOptions opts;
    if (progress) opts.on_step = [&](int iter, double, const LossBreakdown<float>& br) { progress(name, iter, br.total); };
    const TrainResult tr = train(cfg, train_set, opts);
    const MetricReport rep = evaluate_model(cfg.model, tr.params, val_set, cfg.augment.mean);
    AblationRow row{name, rep.max_f, rep.mae, tr.last.total, 0.0};
    row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    rows.push_back(row);
  }
  return rows;
}

inline std::string format_ablation_table(const std::vector<AblationRow>& rows) {
  std::string out = "variant          max_f   mae     loss     seconds\n";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%-16s %.4f  %.4f  %.5f  %.1f\n", r.variant.c_str(), r.max_f, r.mae, r.final_loss,
                  r.seconds);
    out += buf;
  }
  return out;
}

struct DirectionCheck {
  bool ordered = true;               // every step is non-decreasing in max_f
  std::vector<std::string> flagged;  // steps that improved by less than min_step
  std::vector<std::string> steps;    // "a->b +0.0123" per consecutive pair
};

/// Checks that max_f does not decrease along `order` (rows looked up by variant name).
inline DirectionCheck check_direction(const std::vector<AblationRow>& rows, const std::vector<std::string>& order,
                                      double min_step = 0.005) {
  auto find = [&](const std::string& n) -> const AblationRow& {
    for (const auto& r : rows)
      if (r.variant == n) return r;
    throw std::invalid_argument("check_direction: no row for " + n);
  };
  DirectionCheck dc;
  for (std::size_t i = 1; i < order.size(); ++i) {
    const double delta = find(order[i]).max_f - find(order[i - 1]).max_f;
    char buf[96];
    std::snprintf(buf, sizeof buf, "%s->%s %+.4f", order[i - 1].c_str(), order[i].c_str(), delta);
    dc.steps.push_back(buf);
    if (delta < 0) dc.ordered = false;
    if (delta < min_step) dc.flagged.push_back(buf);
  }
  return dc;
}

}  // namespace lcanet
