#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "lcanet/bbox.hpp"
#include "lcanet/ops.hpp"
#include "lcanet/parameter.hpp"
#include "lcanet/tensor.hpp"

namespace lcanet {

/// Normalised local feature used as correlation weights.
template <typename T>
struct LocalKernel {
  BasicTensor<T> weights;    // C x k x k, unit L2 norm (or all zero)
  double source_scale = 0;   // bbox expansion ratio it was cropped with
  double norm = 0;           // L2 norm of the crop before normalisation
};

struct LcbConfig {
  int kernel_size = 5;
  std::vector<double> scales{0.1, 0.3, 0.5};
  bool use_lcc = true;
  std::vector<int> stages{4, 3};  // decoder stages that get a block

  void validate() const {
    if (kernel_size < 1 || kernel_size % 2 == 0) throw std::invalid_argument("lcb.kernel_size must be odd");
    if (scales.empty()) throw std::invalid_argument("lcb.scales must not be empty");
    for (double s : scales)
      if (!(s >= 0.0)) throw std::invalid_argument("lcb.scales must be non-negative");
  }
};

/**
 * Hard bbox decisions of one forward pass, recorded once and replayed on
 * later passes. Finite-difference checks replay so that perturbations see the
 * same crops the analytic gradient assumed.
 */
class BoxTape {
 public:
  enum class Mode { kRecord, kReplay };

  Mode mode() const { return mode_; }
  void replay() {
    mode_ = Mode::kReplay;
    cursor_ = 0;
  }

  template <typename Compute>
  std::vector<BBox> next(Compute&& compute) {
    if (mode_ == Mode::kRecord) {
      entries_.push_back(compute());
      return entries_.back();
    }
    if (cursor_ >= entries_.size()) throw std::logic_error("BoxTape: replay past the recorded decisions");
    return entries_[cursor_++];
  }

  std::size_t size() const { return entries_.size(); }

 private:
  Mode mode_ = Mode::kRecord;
  std::vector<std::vector<BBox>> entries_;
  std::size_t cursor_ = 0;
};

template <typename T>
struct AttentionMap {
  int stage = 0;
  double scale = 0;
  BasicTensor<T> map;  // sigmoid(Corr), N x 1 x H x W
};

/// Optional side channels threaded through a forward pass.
template <typename T>
struct ForwardContext {
  BoxTape* tape = nullptr;
  std::vector<AttentionMap<T>>* attention = nullptr;
  int stage = 0;
};

/// Per-item bbox of all pixels >= threshold; items with none get the full image.
template <typename T>
std::vector<BBox> binarize_bbox(const BasicTensor<T>& pred, double threshold = 0.5) {
  detail::require_rank("binarize_bbox", pred.shape(), 4);
  detail::require(pred.dim(1) == 1, "binarize_bbox: expected a single-channel map, got " + shape_str(pred.shape()));
  const int n = pred.dim(0), h = pred.dim(2), w = pred.dim(3);
  std::vector<BBox> boxes;
  boxes.reserve(n);
  for (int b = 0; b < n; ++b) {
    BBox box{w, h, -1, -1};
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        if (pred.at(b, 0, y, x) >= static_cast<T>(threshold)) {
          box.x_min = std::min(box.x_min, x);
          box.y_min = std::min(box.y_min, y);
          box.x_max = std::max(box.x_max, x);
          box.y_max = std::max(box.y_max, y);
        }
    boxes.push_back(box.x_max < 0 ? BBox::full(h, w) : box);
  }
  return boxes;
}

/// Grows each side by ratio * extent / 2 (rounded) on both ends, then clamps to the image.
inline BBox expand_bbox(const BBox& box, double ratio, int height, int width) {
  if (ratio < 0.0) throw std::invalid_argument("expand_bbox: ratio must be non-negative");
  const int gx = static_cast<int>(std::lround(ratio * box.width() / 2.0));
  const int gy = static_cast<int>(std::lround(ratio * box.height() / 2.0));
  return BBox{box.x_min - gx, box.y_min - gy, box.x_max + gx, box.y_max + gy}.clamped(height, width);
}

template <typename T>
LocalKernel<T> extract_local_kernel(const BasicTensor<T>& feature, const BBox& box, double ratio, int k) {
  detail::require_rank("extract_local_kernel", feature.shape(), 4);
  detail::require(feature.dim(0) == 1, "extract_local_kernel: expected a single item, got " + shape_str(feature.shape()));
  if (k < 1 || k % 2 == 0) throw std::invalid_argument("extract_local_kernel: kernel size must be odd");
  const BBox region = expand_bbox(box, ratio, feature.dim(2), feature.dim(3));
  BasicTensor<T> crop = crop_resize(feature, region, k, k);
  LocalKernel<T> kernel;
  kernel.norm = l2_norm(crop);
  kernel.source_scale = ratio;
  kernel.weights = reshape(l2_normalize(crop), {feature.dim(1), k, k});
  return kernel;
}

/// Sliding dot product of the kernel over every position, summed over channels; same-size output.
template <typename T>
BasicTensor<T> correlation_map(const BasicTensor<T>& feature, const LocalKernel<T>& kernel) {
  detail::require_rank("correlation_map", feature.shape(), 4);
  const auto& ks = kernel.weights.shape();
  detail::require(ks.size() == 3 && ks[0] == feature.dim(1),
                  "correlation_map: kernel " + shape_str(ks) + " does not match feature " + shape_str(feature.shape()));
  const BasicTensor<T> weight = reshape(kernel.weights, {1, ks[0], ks[1], ks[2]});
  return conv2d(feature, weight, BasicTensor<T>{}, 1, ks[1] / 2);
}

/// feature * sigmoid(Corr(feature, kernel)), broadcast over channels.
template <typename T>
BasicTensor<T> acf_apply(const BasicTensor<T>& feature, const LocalKernel<T>& kernel,
                         BasicTensor<T>* attention_out = nullptr) {
  BasicTensor<T> attention = sigmoid(correlation_map(feature, kernel));
  if (attention_out) *attention_out = attention;
  return mul(feature, attention);
}

/**
 * Local coordinate planes: plane 0 is 1 - |row - center_row| / H and plane 1
 * is 1 - |col - center_col| / W.
 */
template <typename T>
BasicTensor<T> lcc_planes(double center_row, double center_col, int height, int width) {
  if (height < 1 || width < 1) throw std::invalid_argument("lcc_planes: empty grid");
  if (center_row < 0 || center_row > height - 1 || center_col < 0 || center_col > width - 1) {
    throw std::out_of_range("lcc_planes: center (" + std::to_string(center_row) + ", " + std::to_string(center_col) +
                            ") outside " + std::to_string(height) + "x" + std::to_string(width));
  }
  BasicTensor<T> out({1, 2, height, width});
  for (int r = 0; r < height; ++r)
    for (int c = 0; c < width; ++c) {
      out.at(0, 0, r, c) = static_cast<T>(1.0 - std::abs(r - center_row) / height);
      out.at(0, 1, r, c) = static_cast<T>(1.0 - std::abs(c - center_col) / width);
    }
  return out;
}

/// Boxes of the coarse prediction at the feature's resolution (no gradient).
template <typename T>
std::vector<BBox> coarse_boxes(const BasicTensor<T>& coarse_pred, int height, int width, BoxTape* tape) {
  auto compute = [&] {
    NoGradGuard guard;
    return binarize_bbox(bilinear_resize(coarse_pred.detach(), height, width), 0.5);
  };
  return tape ? tape->next(compute) : compute();
}

inline int lcb_fused_channels(int channels, const LcbConfig& cfg) {
  return static_cast<int>(cfg.scales.size()) * channels + (cfg.use_lcc ? 2 : 0) + channels;
}

/// 1x1 fuse conv that starts by copying the raw-feature slice through unchanged.
template <typename T>
void add_lcb_parameters(ParameterSet<T>& params, const std::string& prefix, int channels, const LcbConfig& cfg) {
  const int in = lcb_fused_channels(channels, cfg);
  BasicTensor<T> w({channels, in, 1, 1});
  for (int c = 0; c < channels; ++c) w[static_cast<std::size_t>(c) * in + (in - channels) + c] = T(1);
  params.add(prefix + ".fuse.w", w);
  params.add(prefix + ".fuse.b", BasicTensor<T>::zeros({channels}));
}

/**
 * Local context block: per scale, an ACF-gated copy of the feature; then the
 * local coordinate planes (optional) and the raw feature; all concatenated
 * in that order and fused back to C channels by a 1x1 conv.
 */
template <typename T>
BasicTensor<T> lcb_forward(const BasicTensor<T>& feature, const BasicTensor<T>& coarse_pred, const LcbConfig& cfg,
                           const BasicTensor<T>& fuse_w, const BasicTensor<T>& fuse_b,
                           const ForwardContext<T>* ctx = nullptr) {
  detail::require_rank("lcb_forward", feature.shape(), 4);
  const int n = feature.dim(0), h = feature.dim(2), w = feature.dim(3);
  const std::vector<BBox> boxes = coarse_boxes(coarse_pred, h, w, ctx ? ctx->tape : nullptr);

  std::vector<BasicTensor<T>> items;
  for (int b = 0; b < n; ++b) items.push_back(n == 1 ? feature : slice_batch(feature, b));

  std::vector<BasicTensor<T>> parts;
  for (double scale : cfg.scales) {
    std::vector<BasicTensor<T>> gated, maps;
    for (int b = 0; b < n; ++b) {
      const LocalKernel<T> kernel = extract_local_kernel(items[b], boxes[b], scale, cfg.kernel_size);
      BasicTensor<T> attention;
      gated.push_back(acf_apply(items[b], kernel, &attention));
      maps.push_back(attention);
    }
    parts.push_back(n == 1 ? gated[0] : concat_batch(gated));
    if (ctx && ctx->attention) {
      NoGradGuard guard;
      ctx->attention->push_back({ctx->stage, scale, (n == 1 ? maps[0] : concat_batch(maps)).detach()});
    }
  }
  if (cfg.use_lcc) {
    std::vector<BasicTensor<T>> planes;
    for (int b = 0; b < n; ++b) planes.push_back(lcc_planes<T>(boxes[b].center_y(), boxes[b].center_x(), h, w));
    parts.push_back(n == 1 ? planes[0] : concat_batch(planes));
  }
  parts.push_back(feature);
  return conv2d(concat_channels(parts), fuse_w, fuse_b);
}

}  // namespace lcanet
