#pragma once

#include <cmath>
#include <stdexcept>
#include <string>

#include "lcanet/network.hpp"
#include "lcanet/ops.hpp"
#include "lcanet/parameter.hpp"

namespace lcanet {

inline constexpr double kLogClamp = 1e-7;

struct LossConfig {
  double lambda[4] = {1.0, 1.0, 0.5, 0.5};  // coarse, refined, coarse boundary, refined boundary
  double ohem_keep = 0.5;
  std::size_t ohem_min_pixels = 256;
  double edge_threshold = 0.3;

  void validate() const {
    bool any = false;
    for (double l : lambda) {
      if (!(l >= 0.0)) throw std::invalid_argument("loss.lambda entries must be non-negative");
      any = any || l > 0.0;
    }
    if (!any) throw std::invalid_argument("loss.lambda: at least one weight must be positive");
    if (!(ohem_keep > 0.0 && ohem_keep <= 1.0)) throw std::invalid_argument("loss.ohem_keep must be in (0, 1]");
    if (!(edge_threshold > 0.0 && edge_threshold < 1.0))
      throw std::invalid_argument("loss.edge_threshold must be in (0, 1)");
  }
};

template <typename T>
struct LossBreakdown {
  double l_cs = 0, l_rf = 0, l_cs_bd = 0, l_rf_bd = 0;
  double total = 0;           // lambda-weighted sum of the four terms above
  BasicTensor<T> objective;   // differentiable total
};

template <typename T>
BasicTensor<T> bce_loss(const BasicTensor<T>& pred, const BasicTensor<T>& target) {
  return mean(bce_map(pred, target, kLogClamp));
}

template <typename T>
BasicTensor<T> ohem_bce(const BasicTensor<T>& pred, const BasicTensor<T>& target, double keep,
                        std::size_t min_pixels) {
  return ohem_mean(bce_map(pred, target, kLogClamp), keep, min_pixels);
}

/// Binary edge map of a target: normalised Sobel magnitude above the threshold.
template <typename T>
BasicTensor<T> edge_target(const BasicTensor<T>& target, double edge_threshold) {
  NoGradGuard guard;
  BasicTensor<T> edges = sobel_magnitude(target.detach());
  for (auto& v : edges.data()) v = v > static_cast<T>(edge_threshold) ? T(1) : T(0);
  return edges;
}

/// Cross-entropy between the prediction's Sobel magnitude and the target's binary edges.
template <typename T>
BasicTensor<T> boundary_loss(const BasicTensor<T>& pred, const BasicTensor<T>& target, double edge_threshold) {
  const auto pred_edges = clamp(sobel_magnitude(pred), kLogClamp, 1.0 - kLogClamp);
  return bce_loss(pred_edges, edge_target(target, edge_threshold));
}

/// Weighted sum of the coarse/refined cross-entropy (OHEM) and boundary terms.
template <typename T>
LossBreakdown<T> total_loss(const ForwardOutputs<T>& outputs, const BasicTensor<T>& target, const LossConfig& cfg) {
  cfg.validate();
  LossBreakdown<T> br;
  BasicTensor<T> objective;
  auto accumulate = [&](const BasicTensor<T>& term, double weight, double& slot) {
    slot = static_cast<double>(term.item());
    if (weight == 0.0) return;
    const auto weighted = scale(term, weight);
    objective = objective.defined() ? add(objective, weighted) : weighted;
  };
  accumulate(ohem_bce(outputs.coarse, target, cfg.ohem_keep, cfg.ohem_min_pixels), cfg.lambda[0], br.l_cs);
  if (outputs.refined.defined())
    accumulate(ohem_bce(outputs.refined, target, cfg.ohem_keep, cfg.ohem_min_pixels), cfg.lambda[1], br.l_rf);
  accumulate(boundary_loss(outputs.coarse, target, cfg.edge_threshold), cfg.lambda[2], br.l_cs_bd);
  if (outputs.refined.defined())
    accumulate(boundary_loss(outputs.refined, target, cfg.edge_threshold), cfg.lambda[3], br.l_rf_bd);
  br.total = cfg.lambda[0] * br.l_cs + cfg.lambda[1] * br.l_rf + cfg.lambda[2] * br.l_cs_bd +
             cfg.lambda[3] * br.l_rf_bd;
  br.objective = objective.defined() ? objective : BasicTensor<T>::scalar(T(0));
  return br;
}

struct OptimizerConfig {
  double base_lr = 1e-4;
  double momentum = 0.9;
  double weight_decay = 1e-5;
  double power = 0.9;
  int max_iter = 2000;
  int batch_size = 8;

  void validate() const {
    if (!(base_lr > 0) || !(momentum >= 0) || !(weight_decay >= 0) || !(power > 0) || max_iter < 1 || batch_size < 1)
      throw std::invalid_argument("optim: all settings must be positive");
  }
};

/// base_lr * (1 - iter / max_iter)^power, zero once iter reaches max_iter.
inline double poly_lr(int iter, const OptimizerConfig& cfg) {
  if (iter >= cfg.max_iter) return 0.0;
  if (iter <= 0) return cfg.base_lr;
  return cfg.base_lr * std::pow(1.0 - static_cast<double>(iter) / cfg.max_iter, cfg.power);
}

/// Heavy-ball step v = m v + (g + wd w); w -= lr v. Gradients are cleared afterwards.
template <typename T>
void sgd_update(ParameterSet<T>& params, double lr, double momentum, double weight_decay) {
  for (auto& p : params.all()) {
    if (!p.tensor.has_grad()) throw std::logic_error("sgd_update: parameter " + p.name + " has no gradient");
  }
  const T m = static_cast<T>(momentum), wd = static_cast<T>(weight_decay), step = static_cast<T>(lr);
  for (auto& p : params.all()) {
    auto w = p.tensor.data();
    auto g = p.tensor.grad();
    for (std::size_t i = 0; i < w.size(); ++i) {
      p.momentum[i] = m * p.momentum[i] + (g[i] + wd * w[i]);
      w[i] -= step * p.momentum[i];
    }
    p.tensor.zero_grad();
  }
}

}  // namespace lcanet
