#pragma once

// Comparison attention blocks that plug into the same decoder slots as the
// local context block: squeeze-and-excitation, non-local affinity and local
// affinity.

#include <stdexcept>
#include <string>
#include <vector>

#include "lcanet/local_context.hpp"
#include "lcanet/ops.hpp"
#include "lcanet/parameter.hpp"

namespace lcanet {

enum class BaselineKind { kSe, kNonlocal, kLocalAffinity };

struct BaselineConfig {
  int reduction = 4;       // SE bottleneck ratio
  int embed_channels = 0;  // non-local theta/phi/g width; 0 means C / 2
  int kernel_size = 5;     // local affinity crop size
  double scale = 0.5;      // local affinity bbox expansion

  int embed_for(int channels) const { return embed_channels > 0 ? embed_channels : std::max(1, channels / 2); }

  void validate(int channels) const {
    if (reduction < 1 || channels % reduction != 0)
      throw std::invalid_argument("baseline.reduction must divide the channel count");
    if (embed_channels < 0) throw std::invalid_argument("baseline.embed_channels must be >= 1");
    if (kernel_size < 1 || kernel_size % 2 == 0) throw std::invalid_argument("baseline.kernel_size must be odd");
  }
};

template <typename T>
void add_se_parameters(ParameterSet<T>& params, const std::string& prefix, int channels, const BaselineConfig& cfg) {
  params.add_conv(prefix + ".fc1", channels / cfg.reduction, channels, 1);
  params.add_zero_conv(prefix + ".fc2", channels, channels / cfg.reduction, 1);
}

/// f * sigmoid(W2 relu(W1 gap(f))), gate broadcast over space.
template <typename T>
BasicTensor<T> se_forward(const BasicTensor<T>& feature, const ParameterSet<T>& params, const std::string& prefix) {
  const auto squeezed = global_avg_pool(feature);
  const auto hidden = relu(conv2d(squeezed, params[prefix + ".fc1.w"], params[prefix + ".fc1.b"]));
  const auto gate = sigmoid(conv2d(hidden, params[prefix + ".fc2.w"], params[prefix + ".fc2.b"]));
  return mul(feature, gate);
}

template <typename T>
void add_nonlocal_parameters(ParameterSet<T>& params, const std::string& prefix, int channels,
                             const BaselineConfig& cfg) {
  const int e = cfg.embed_for(channels);
  params.add_conv(prefix + ".theta", e, channels, 1);
  params.add_conv(prefix + ".phi", e, channels, 1);
  params.add_conv(prefix + ".g", e, channels, 1);
  params.add_zero_conv(prefix + ".proj", channels, e, 1);
}

/// Row-stochastic (HW x HW) affinity between all positions.
template <typename T>
BasicTensor<T> nonlocal_affinity(const BasicTensor<T>& feature, const ParameterSet<T>& params,
                                 const std::string& prefix) {
  const int n = feature.dim(0), hw = feature.dim(2) * feature.dim(3);
  const auto theta = conv2d(feature, params[prefix + ".theta.w"], params[prefix + ".theta.b"]);
  const auto phi = conv2d(feature, params[prefix + ".phi.w"], params[prefix + ".phi.b"]);
  const int e = theta.dim(1);
  const auto theta_t = transpose_last2(reshape(theta, {n, e, hw}));  // N x HW x E
  return softmax_last(bmm(theta_t, reshape(phi, {n, e, hw})));
}

/// f + proj(g(f) A^T), A = row-softmax(theta(f)^T phi(f)).
template <typename T>
BasicTensor<T> nonlocal_forward(const BasicTensor<T>& feature, const ParameterSet<T>& params,
                                const std::string& prefix) {
  const int n = feature.dim(0), h = feature.dim(2), w = feature.dim(3);
  const auto affinity = nonlocal_affinity(feature, params, prefix);
  const auto g = conv2d(feature, params[prefix + ".g.w"], params[prefix + ".g.b"]);
  const int e = g.dim(1);
  const auto y = bmm(reshape(g, {n, e, h * w}), transpose_last2(affinity));
  return add(feature, conv2d(reshape(y, {n, e, h, w}), params[prefix + ".proj.w"], params[prefix + ".proj.b"]));
}

template <typename T>
void add_local_affinity_parameters(ParameterSet<T>& params, const std::string& prefix, int channels) {
  params.add_zero_conv(prefix + ".proj", channels, channels, 1);
}

/// Unnormalised k x k crop around the coarse bbox, flattened to C x k^2 per item.
template <typename T>
BasicTensor<T> local_affinity_crop(const BasicTensor<T>& item, const BBox& box, const BaselineConfig& cfg) {
  const int c = item.dim(1), k = cfg.kernel_size;
  const BBox region = expand_bbox(box, cfg.scale, item.dim(2), item.dim(3));
  return reshape(crop_resize(item, region, k, k), {1, c, k * k});
}

/**
 * Each global position attends over the k^2 local positions by channel dot
 * product; the attended local features are projected and added back.
 */
template <typename T>
BasicTensor<T> local_affinity_forward(const BasicTensor<T>& feature, const BasicTensor<T>& coarse_pred,
                                      const ParameterSet<T>& params, const std::string& prefix,
                                      const BaselineConfig& cfg, const ForwardContext<T>* ctx = nullptr) {
  detail::require_rank("local_affinity_forward", feature.shape(), 4);
  const int n = feature.dim(0), c = feature.dim(1), h = feature.dim(2), w = feature.dim(3);
  const auto boxes = coarse_boxes(coarse_pred, h, w, ctx ? ctx->tape : nullptr);
  std::vector<BasicTensor<T>> outs;
  for (int b = 0; b < n; ++b) {
    const auto item = n == 1 ? feature : slice_batch(feature, b);
    const auto local = local_affinity_crop(item, boxes[b], cfg);                 // 1 x C x k2
    const auto global_t = transpose_last2(reshape(item, {1, c, h * w}));        // 1 x HW x C
    const auto affinity = softmax_last(bmm(global_t, local));                   // 1 x HW x k2
    const auto y = bmm(local, transpose_last2(affinity));                       // 1 x C x HW
    outs.push_back(reshape(y, {1, c, h, w}));
  }
  const auto attended = n == 1 ? outs[0] : concat_batch(outs);
  return add(feature, conv2d(attended, params[prefix + ".proj.w"], params[prefix + ".proj.b"]));
}

}  // namespace lcanet
