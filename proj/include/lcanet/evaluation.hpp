#pragma once

#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lcanet/tensor.hpp"

namespace lcanet {

class EmptyGroundTruth : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline constexpr int kThresholds = 256;

struct EvalConfig {
  double beta2 = 0.3;
  int n_thresholds = kThresholds;
  bool per_image_f = false;  // average F per image instead of P and R
};

struct MetricReport {
  double max_f = 0;
  double mae = 0;
  std::vector<double> per_threshold_f;
  int n_images = 0;

  nlohmann::json to_json() const {
    return {{"max_f", max_f}, {"mae", mae}, {"per_threshold_f", per_threshold_f}, {"n_images", n_images}};
  }

  std::string summary() const {
    char buf[128];
    std::snprintf(buf, sizeof buf, "images=%d max_f=%.4f mae=%.4f", n_images, max_f, mae);
    return buf;
  }
};

inline double f_measure(double precision, double recall, double beta2) {
  const double denom = beta2 * precision + recall;
  return denom > 0.0 ? (1.0 + beta2) * precision * recall / denom : 0.0;
}

template <typename T>
double mae(std::span<const T> pred, std::span<const T> gt) {
  if (pred.size() != gt.size()) throw ShapeError("mae: size mismatch");
  if (pred.empty()) throw ShapeError("mae: empty input");
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) acc += std::abs(static_cast<double>(pred[i]) - gt[i]);
  return acc / static_cast<double>(pred.size());
}

/// Precision and recall of `pred > i / n` against binary `gt` for every threshold index i.
struct PrCurve {
  std::vector<double> precision;
  std::vector<double> recall;
};

/**
 * One pass histogram over n_thresholds levels: a pixel with value p counts as
 * positive for every threshold i / n strictly below p. Empty predictions have
 * precision 0.
 */
template <typename T>
PrCurve pr_curve(std::span<const T> pred, std::span<const T> gt, int n_thresholds = kThresholds) {
  if (pred.size() != gt.size()) throw ShapeError("max_f: size mismatch");
  std::vector<long> pos(n_thresholds + 1, 0), neg(n_thresholds + 1, 0);
  long total_pos = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double p = pred[i];
    // Number of thresholds t_j = j / n with t_j < p.
    int above = static_cast<int>(std::ceil(p * n_thresholds));
    above = std::clamp(above, 0, n_thresholds);
    const bool positive = gt[i] > T(0.5);
    total_pos += positive;
    (positive ? pos : neg)[above] += 1;
  }
  if (total_pos == 0) throw EmptyGroundTruth("max_f: ground truth has no positive pixel");
  PrCurve curve;
  curve.precision.assign(n_thresholds, 0.0);
  curve.recall.assign(n_thresholds, 0.0);
  long tp = 0, fp = 0;
  // Pixels with `above` = a are predicted positive for thresholds 0 .. a-1.
  for (int j = n_thresholds - 1; j >= 0; --j) {
    tp += pos[j + 1];
    fp += neg[j + 1];
    curve.precision[j] = tp + fp > 0 ? static_cast<double>(tp) / (tp + fp) : 0.0;
    curve.recall[j] = static_cast<double>(tp) / total_pos;
  }
  return curve;
}

struct MaxF {
  double max_f = 0;
  std::vector<double> per_threshold_f;
};

template <typename T>
MaxF max_f(std::span<const T> pred, std::span<const T> gt, double beta2 = 0.3, int n_thresholds = kThresholds) {
  const PrCurve curve = pr_curve(pred, gt, n_thresholds);
  MaxF out;
  out.per_threshold_f.resize(n_thresholds);
  for (int j = 0; j < n_thresholds; ++j) {
    out.per_threshold_f[j] = f_measure(curve.precision[j], curve.recall[j], beta2);
    out.max_f = std::max(out.max_f, out.per_threshold_f[j]);
  }
  return out;
}

/**
 * Streams (prediction, ground truth) pairs and reduces them in insertion
 * order: MAE is the mean of per-image MAEs, and F is computed from precision
 * and recall averaged over images (or averaged per image when configured).
 */
class MetricAccumulator {
 public:
  explicit MetricAccumulator(EvalConfig cfg = {})
      : cfg_(cfg), precision_(cfg.n_thresholds, 0.0), recall_(cfg.n_thresholds, 0.0), f_(cfg.n_thresholds, 0.0) {}

  template <typename T>
  void add(std::span<const T> pred, std::span<const T> gt) {
    const PrCurve curve = pr_curve(pred, gt, cfg_.n_thresholds);
    for (int j = 0; j < cfg_.n_thresholds; ++j) {
      precision_[j] += curve.precision[j];
      recall_[j] += curve.recall[j];
      f_[j] += f_measure(curve.precision[j], curve.recall[j], cfg_.beta2);
    }
    mae_sum_ += mae(pred, gt);
    ++count_;
  }

  MetricReport report() const {
    if (count_ == 0) throw std::invalid_argument("evaluate: empty dataset");
    MetricReport r;
    r.n_images = count_;
    r.mae = mae_sum_ / count_;
    r.per_threshold_f.resize(cfg_.n_thresholds);
    for (int j = 0; j < cfg_.n_thresholds; ++j) {
      r.per_threshold_f[j] = cfg_.per_image_f ? f_[j] / count_
                                              : f_measure(precision_[j] / count_, recall_[j] / count_, cfg_.beta2);
      r.max_f = std::max(r.max_f, r.per_threshold_f[j]);
    }
    return r;
  }

 private:
  EvalConfig cfg_;
  std::vector<double> precision_, recall_, f_;
  double mae_sum_ = 0.0;
  int count_ = 0;
};

}  // namespace lcanet
