#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "lcanet/bbox.hpp"
#include "lcanet/tensor.hpp"

namespace lcanet {

enum class Activation { kSigmoid, kRelu };

namespace detail {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

inline void require(bool ok, const std::string& message) {
  if (!ok) throw ShapeError(message);
}

inline void require_rank(const char* op, const Shape& s, std::size_t rank) {
  require(s.size() == rank, std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_str(s));
}

/// Test hook: multiplies the sigmoid backward pass. Must stay 1 outside fault-injection checks.
inline double& sigmoid_grad_scale() {
  static double scale = 1.0;
  return scale;
}

template <typename T>
void im2col(const T* x, int channels, int height, int width, int kh, int kw, int stride, int pad, int out_h,
            int out_w, T* col) {
  for (int c = 0; c < channels; ++c) {
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        T* row = col + static_cast<std::size_t>((c * kh + ki) * kw + kj) * out_h * out_w;
        for (int oh = 0; oh < out_h; ++oh) {
          const int ih = oh * stride - pad + ki;
          T* dst = row + static_cast<std::size_t>(oh) * out_w;
          if (ih < 0 || ih >= height) {
            std::fill(dst, dst + out_w, T(0));
            continue;
          }
          const T* src = x + (static_cast<std::size_t>(c) * height + ih) * width;
          for (int ow = 0; ow < out_w; ++ow) {
            const int iw = ow * stride - pad + kj;
            dst[ow] = (iw >= 0 && iw < width) ? src[iw] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* col, int channels, int height, int width, int kh, int kw, int stride, int pad, int out_h,
            int out_w, T* x) {
  for (int c = 0; c < channels; ++c) {
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        const T* row = col + static_cast<std::size_t>((c * kh + ki) * kw + kj) * out_h * out_w;
        for (int oh = 0; oh < out_h; ++oh) {
          const int ih = oh * stride - pad + ki;
          if (ih < 0 || ih >= height) continue;
          const T* src = row + static_cast<std::size_t>(oh) * out_w;
          T* dst = x + (static_cast<std::size_t>(c) * height + ih) * width;
          for (int ow = 0; ow < out_w; ++ow) {
            const int iw = ow * stride - pad + kj;
            if (iw >= 0 && iw < width) dst[iw] += src[ow];
          }
        }
      }
    }
  }
}

/// Bilinear taps along one axis for sampling the inclusive source range [lo, hi].
struct AxisTaps {
  std::vector<int> first;
  std::vector<int> second;
  std::vector<double> frac;  // weight of `second`
};

inline AxisTaps make_taps(int lo, int hi, int out) {
  AxisTaps taps;
  const int len = hi - lo + 1;
  const double scale = static_cast<double>(len) / out;
  taps.first.resize(out);
  taps.second.resize(out);
  taps.frac.resize(out);
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * scale - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(len - 1));
    const int f = static_cast<int>(std::floor(src));
    taps.first[o] = lo + f;
    taps.second[o] = lo + std::min(f + 1, len - 1);
    taps.frac[o] = src - f;
  }
  return taps;
}

template <typename T>
BasicTensor<T> resample(const BasicTensor<T>& input, const BBox& box, int out_h, int out_w) {
  const int n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const AxisTaps ty = make_taps(box.y_min, box.y_max, out_h);
  const AxisTaps tx = make_taps(box.x_min, box.x_max, out_w);
  BasicTensor<T> out({n, c, out_h, out_w});
  const T* src = input.data().data();
  T* dst = out.data().data();
  const std::size_t planes = static_cast<std::size_t>(n) * c;
  for (std::size_t p = 0; p < planes; ++p) {
    const T* plane = src + p * h * w;
    T* oplane = dst + p * out_h * out_w;
    for (int oy = 0; oy < out_h; ++oy) {
      const T* r0 = plane + static_cast<std::size_t>(ty.first[oy]) * w;
      const T* r1 = plane + static_cast<std::size_t>(ty.second[oy]) * w;
      const T fy = static_cast<T>(ty.frac[oy]);
      for (int ox = 0; ox < out_w; ++ox) {
        const int x0 = tx.first[ox], x1 = tx.second[ox];
        const T fx = static_cast<T>(tx.frac[ox]);
        const T top = r0[x0] * (T(1) - fx) + r0[x1] * fx;
        const T bottom = r1[x0] * (T(1) - fx) + r1[x1] * fx;
        oplane[static_cast<std::size_t>(oy) * out_w + ox] = top * (T(1) - fy) + bottom * fy;
      }
    }
  }
  return record(std::move(out), {input}, [input, ty, tx, planes, h, w, out_h, out_w](const TensorImpl<T>& o) {
    T* gin = grad_ptr(input);
    if (!gin) return;
    const T* g = o.grad.data();
    for (std::size_t p = 0; p < planes; ++p) {
      T* gplane = gin + p * h * w;
      const T* gout = g + p * out_h * out_w;
      for (int oy = 0; oy < out_h; ++oy) {
        const T fy = static_cast<T>(ty.frac[oy]);
        T* r0 = gplane + static_cast<std::size_t>(ty.first[oy]) * w;
        T* r1 = gplane + static_cast<std::size_t>(ty.second[oy]) * w;
        for (int ox = 0; ox < out_w; ++ox) {
          const T fx = static_cast<T>(tx.frac[ox]);
          const T v = gout[static_cast<std::size_t>(oy) * out_w + ox];
          r0[tx.first[ox]] += v * (T(1) - fy) * (T(1) - fx);
          r0[tx.second[ox]] += v * (T(1) - fy) * fx;
          r1[tx.first[ox]] += v * fy * (T(1) - fx);
          r1[tx.second[ox]] += v * fy * fx;
        }
      }
    }
  });
}

/// Index helper for two-operand broadcasting over rank-4-padded shapes.
struct Broadcast {
  std::array<int, 4> out{1, 1, 1, 1};
  std::array<std::size_t, 4> stride_a{}, stride_b{};
  Shape out_shape;
};

inline Broadcast make_broadcast(const char* op, const Shape& a, const Shape& b) {
  Broadcast bc;
  const std::size_t rank = std::max(a.size(), b.size());
  std::array<int, 4> pa{1, 1, 1, 1}, pb{1, 1, 1, 1};
  for (std::size_t i = 0; i < a.size(); ++i) pa[4 - a.size() + i] = a[i];
  for (std::size_t i = 0; i < b.size(); ++i) pb[4 - b.size() + i] = b[i];
  std::size_t sa = 1, sb = 1;
  for (int d = 3; d >= 0; --d) {
    require(pa[d] == pb[d] || pa[d] == 1 || pb[d] == 1,
            std::string(op) + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    bc.out[d] = std::max(pa[d], pb[d]);
    bc.stride_a[d] = pa[d] == 1 ? 0 : sa;
    bc.stride_b[d] = pb[d] == 1 ? 0 : sb;
    sa *= pa[d];
    sb *= pb[d];
  }
  for (std::size_t i = 4 - rank; i < 4; ++i) bc.out_shape.push_back(bc.out[i]);
  return bc;
}

template <typename Fn>
void for_each_broadcast(const Broadcast& bc, Fn&& fn) {
  std::size_t o = 0;
  for (int i0 = 0; i0 < bc.out[0]; ++i0)
    for (int i1 = 0; i1 < bc.out[1]; ++i1)
      for (int i2 = 0; i2 < bc.out[2]; ++i2)
        for (int i3 = 0; i3 < bc.out[3]; ++i3, ++o) {
          const std::size_t ia = i0 * bc.stride_a[0] + i1 * bc.stride_a[1] + i2 * bc.stride_a[2] + i3 * bc.stride_a[3];
          const std::size_t ib = i0 * bc.stride_b[0] + i1 * bc.stride_b[1] + i2 * bc.stride_b[2] + i3 * bc.stride_b[3];
          fn(o, ia, ib);
        }
}

}  // namespace detail

/**
 * 2-D cross-correlation (no kernel flip) over NCHW input with OIkhkw weights.
 * Out-of-range taps read zero. Lowered to im2col + GEMM per batch item.
 */
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& weight, const BasicTensor<T>& bias = {},
                      int stride = 1, int padding = 0) {
  using detail::require;
  detail::require_rank("conv2d input", input.shape(), 4);
  detail::require_rank("conv2d weight", weight.shape(), 4);
  require(stride >= 1 && padding >= 0, "conv2d: stride must be positive and padding non-negative");
  const int n = input.dim(0), ic = input.dim(1), h = input.dim(2), w = input.dim(3);
  const int oc = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  require(weight.dim(1) == ic, "conv2d: input has " + std::to_string(ic) + " channels but weight " +
                                   shape_str(weight.shape()) + " expects " + std::to_string(weight.dim(1)));
  require(kh <= h + 2 * padding && kw <= w + 2 * padding,
          "conv2d: kernel " + shape_str(weight.shape()) + " larger than padded input " + shape_str(input.shape()));
  if (bias.defined()) {
    require(bias.numel() == static_cast<std::size_t>(oc),
            "conv2d: bias " + shape_str(bias.shape()) + " does not match " + std::to_string(oc) + " output channels");
  }
  const int oh = (h + 2 * padding - kh) / stride + 1;
  const int ow = (w + 2 * padding - kw) / stride + 1;
  const int k = ic * kh * kw;
  const int p = oh * ow;
  const bool direct = kh == 1 && kw == 1 && stride == 1 && padding == 0;

  BasicTensor<T> out({n, oc, oh, ow});
  std::vector<T> col(direct ? 0 : static_cast<std::size_t>(k) * p);
  detail::ConstMatrixMap<T> wmat(weight.data().data(), oc, k);
  for (int b = 0; b < n; ++b) {
    const T* x = input.data().data() + static_cast<std::size_t>(b) * ic * h * w;
    const T* cols = x;
    if (!direct) {
      detail::im2col(x, ic, h, w, kh, kw, stride, padding, oh, ow, col.data());
      cols = col.data();
    }
    detail::MatrixMap<T> omat(out.data().data() + static_cast<std::size_t>(b) * oc * p, oc, p);
    omat.noalias() = wmat * detail::ConstMatrixMap<T>(cols, k, p);
    if (bias.defined()) {
      for (int o = 0; o < oc; ++o) omat.row(o).array() += bias[o];
    }
  }

  std::vector<BasicTensor<T>> inputs{input, weight};
  if (bias.defined()) inputs.push_back(bias);
  return detail::record(std::move(out), inputs,
                        [input, weight, bias, n, ic, h, w, oc, kh, kw, stride, padding, oh, ow, k, p,
                         direct](const detail::TensorImpl<T>& o) {
                          T* gx = detail::grad_ptr(input);
                          T* gw = detail::grad_ptr(weight);
                          T* gb = bias.defined() ? detail::grad_ptr(bias) : nullptr;
                          detail::ConstMatrixMap<T> wmat(weight.data().data(), oc, k);
                          std::vector<T> col(direct ? 0 : static_cast<std::size_t>(k) * p);
                          std::vector<T> dcol(gx && !direct ? static_cast<std::size_t>(k) * p : 0);
                          for (int b = 0; b < n; ++b) {
                            detail::ConstMatrixMap<T> gout(o.grad.data() + static_cast<std::size_t>(b) * oc * p, oc, p);
                            const T* x = input.data().data() + static_cast<std::size_t>(b) * ic * h * w;
                            if (gw) {
                              const T* cols = x;
                              if (!direct) {
                                detail::im2col(x, ic, h, w, kh, kw, stride, padding, oh, ow, col.data());
                                cols = col.data();
                              }
                              detail::MatrixMap<T> gwmat(gw, oc, k);
                              gwmat.noalias() += gout * detail::ConstMatrixMap<T>(cols, k, p).transpose();
                            }
                            if (gb) {
                              for (int c = 0; c < oc; ++c) gb[c] += gout.row(c).sum();
                            }
                            if (gx) {
                              T* gxb = gx + static_cast<std::size_t>(b) * ic * h * w;
                              if (direct) {
                                detail::MatrixMap<T> gxmat(gxb, k, p);
                                gxmat.noalias() += wmat.transpose() * gout;
                              } else {
                                detail::MatrixMap<T> dmat(dcol.data(), k, p);
                                dmat.noalias() = wmat.transpose() * gout;
                                detail::col2im(dcol.data(), ic, h, w, kh, kw, stride, padding, oh, ow, gxb);
                              }
                            }
                          }
                        });
}

/// Bilinear resize, align-corners-false, source coordinates clamped to the image.
template <typename T>
BasicTensor<T> bilinear_resize(const BasicTensor<T>& input, int out_h, int out_w) {
  detail::require_rank("bilinear_resize", input.shape(), 4);
  detail::require(out_h >= 1 && out_w >= 1, "bilinear_resize: target size must be at least 1x1");
  detail::require(input.dim(2) >= 1 && input.dim(3) >= 1, "bilinear_resize: empty input");
  return detail::resample(input, BBox::full(input.dim(2), input.dim(3)), out_h, out_w);
}

/// Axis-aligned crop of `box` (clamped to the image first) resampled to out_h x out_w.
template <typename T>
BasicTensor<T> crop_resize(const BasicTensor<T>& input, const BBox& box, int out_h, int out_w) {
  detail::require_rank("crop_resize", input.shape(), 4);
  detail::require(out_h >= 1 && out_w >= 1, "crop_resize: target size must be at least 1x1");
  return detail::resample(input, box.clamped(input.dim(2), input.dim(3)), out_h, out_w);
}

template <typename T>
BasicTensor<T> max_pool2x2(const BasicTensor<T>& input) {
  detail::require_rank("max_pool2x2", input.shape(), 4);
  const int n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  detail::require(h >= 2 && w >= 2, "max_pool2x2: input " + shape_str(input.shape()) + " too small");
  const int oh = h / 2, ow = w / 2;
  BasicTensor<T> out({n, c, oh, ow});
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.numel());
  const T* x = input.data().data();
  std::size_t o = 0;
  for (int pl = 0; pl < n * c; ++pl) {
    const std::size_t base = static_cast<std::size_t>(pl) * h * w;
    for (int y = 0; y < oh; ++y) {
      for (int xw = 0; xw < ow; ++xw, ++o) {
        std::size_t best = base + static_cast<std::size_t>(2 * y) * w + 2 * xw;
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx) {
            const std::size_t idx = base + static_cast<std::size_t>(2 * y + dy) * w + 2 * xw + dx;
            if (x[idx] > x[best]) best = idx;
          }
        (*argmax)[o] = best;
        out[o] = x[best];
      }
    }
  }
  return detail::record(std::move(out), {input}, [input, argmax](const detail::TensorImpl<T>& r) {
    T* g = detail::grad_ptr(input);
    if (!g) return;
    for (std::size_t i = 0; i < argmax->size(); ++i) g[(*argmax)[i]] += r.grad[i];
  });
}

template <typename T>
BasicTensor<T> global_avg_pool(const BasicTensor<T>& input) {
  detail::require_rank("global_avg_pool", input.shape(), 4);
  const int n = input.dim(0), c = input.dim(1);
  const std::size_t hw = static_cast<std::size_t>(input.dim(2)) * input.dim(3);
  detail::require(hw >= 1, "global_avg_pool: empty spatial extent");
  BasicTensor<T> out({n, c, 1, 1});
  for (std::size_t pl = 0; pl < static_cast<std::size_t>(n) * c; ++pl) {
    double acc = 0.0;
    for (std::size_t i = 0; i < hw; ++i) acc += input[pl * hw + i];
    out[pl] = static_cast<T>(acc / static_cast<double>(hw));
  }
  return detail::record(std::move(out), {input}, [input, hw](const detail::TensorImpl<T>& r) {
    T* g = detail::grad_ptr(input);
    if (!g) return;
    for (std::size_t pl = 0; pl < r.grad.size(); ++pl) {
      const T v = r.grad[pl] / static_cast<T>(hw);
      for (std::size_t i = 0; i < hw; ++i) g[pl * hw + i] += v;
    }
  });
}

template <typename T>
BasicTensor<T> activation(const BasicTensor<T>& input, Activation kind) {
  BasicTensor<T> out(input.shape());
  const std::size_t count = input.numel();
  if (kind == Activation::kRelu) {
    for (std::size_t i = 0; i < count; ++i) out[i] = input[i] > T(0) ? input[i] : T(0);
    return detail::record(std::move(out), {input}, [input](const detail::TensorImpl<T>& r) {
      T* g = detail::grad_ptr(input);
      if (!g) return;
      for (std::size_t i = 0; i < r.grad.size(); ++i)
        if (input[i] > T(0)) g[i] += r.grad[i];
    });
  }
  // Outputs stay strictly inside (0, 1) even where exp saturates.
  constexpr T lo = std::numeric_limits<T>::min();
  constexpr T hi = T(1) - std::numeric_limits<T>::epsilon() / 2;
  for (std::size_t i = 0; i < count; ++i) {
    const T x = input[i];
    T y;
    if (x >= T(0)) {
      y = T(1) / (T(1) + std::exp(-x));
    } else {
      const T e = std::exp(x);
      y = e / (T(1) + e);
    }
    out[i] = std::clamp(y, lo, hi);
  }
  return detail::record(std::move(out), {input}, [input](const detail::TensorImpl<T>& r) {
    T* g = detail::grad_ptr(input);
    if (!g) return;
    const T scale = static_cast<T>(detail::sigmoid_grad_scale());
    for (std::size_t i = 0; i < r.grad.size(); ++i) {
      const T y = r.data[i];
      g[i] += r.grad[i] * y * (T(1) - y) * scale;
    }
  });
}

template <typename T>
BasicTensor<T> sigmoid(const BasicTensor<T>& x) {
  return activation(x, Activation::kSigmoid);
}

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x) {
  return activation(x, Activation::kRelu);
}

/// Channel concatenation in the given order.
template <typename T>
BasicTensor<T> concat_channels(const std::vector<BasicTensor<T>>& inputs) {
  detail::require(!inputs.empty(), "concat_channels: no inputs");
  const Shape& s0 = inputs[0].shape();
  detail::require_rank("concat_channels", s0, 4);
  int channels = 0;
  for (const auto& t : inputs) {
    detail::require_rank("concat_channels", t.shape(), 4);
    detail::require(t.dim(0) == s0[0] && t.dim(2) == s0[2] && t.dim(3) == s0[3],
                    "concat_channels: " + shape_str(t.shape()) + " does not match " + shape_str(s0) +
                        " in batch/spatial extents");
    channels += t.dim(1);
  }
  const int n = s0[0];
  const std::size_t hw = static_cast<std::size_t>(s0[2]) * s0[3];
  BasicTensor<T> out({n, channels, s0[2], s0[3]});
  for (int b = 0; b < n; ++b) {
    T* dst = out.data().data() + static_cast<std::size_t>(b) * channels * hw;
    for (const auto& t : inputs) {
      const std::size_t len = static_cast<std::size_t>(t.dim(1)) * hw;
      const T* src = t.data().data() + static_cast<std::size_t>(b) * len;
      dst = std::copy(src, src + len, dst);
    }
  }
  return detail::record(std::move(out), inputs, [inputs, n, channels, hw](const detail::TensorImpl<T>& r) {
    for (int b = 0; b < n; ++b) {
      const T* src = r.grad.data() + static_cast<std::size_t>(b) * channels * hw;
      for (const auto& t : inputs) {
        const std::size_t len = static_cast<std::size_t>(t.dim(1)) * hw;
        if (T* g = detail::grad_ptr(t)) {
          T* dst = g + static_cast<std::size_t>(b) * len;
          for (std::size_t i = 0; i < len; ++i) dst[i] += src[i];
        }
        src += len;
      }
    }
  });
}

template <typename T>
BasicTensor<T> slice_channels(const BasicTensor<T>& input, int begin, int count) {
  detail::require_rank("slice_channels", input.shape(), 4);
  const int n = input.dim(0), c = input.dim(1);
  detail::require(begin >= 0 && count >= 1 && begin + count <= c, "slice_channels: range out of bounds");
  const std::size_t hw = static_cast<std::size_t>(input.dim(2)) * input.dim(3);
  BasicTensor<T> out({n, count, input.dim(2), input.dim(3)});
  for (int b = 0; b < n; ++b) {
    const T* src = input.data().data() + (static_cast<std::size_t>(b) * c + begin) * hw;
    std::copy(src, src + count * hw, out.data().data() + static_cast<std::size_t>(b) * count * hw);
  }
  return detail::record(std::move(out), {input}, [input, n, c, begin, count, hw](const detail::TensorImpl<T>& r) {
    T* g = detail::grad_ptr(input);
    if (!g) return;
    for (int b = 0; b < n; ++b) {
      T* dst = g + (static_cast<std::size_t>(b) * c + begin) * hw;
      const T* src = r.grad.data() + static_cast<std::size_t>(b) * count * hw;
      for (std::size_t i = 0; i < count * hw; ++i) dst[i] += src[i];
    }
  });
}

template <typename T>
BasicTensor<T> slice_batch(const BasicTensor<T>& input, int index) {
  detail::require(input.rank() >= 1 && index >= 0 && index < input.dim(0), "slice_batch: index out of range");
  Shape shape = input.shape();
  shape[0] = 1;
  const std::size_t len = shape_numel(shape);
  const T* src = input.data().data() + static_cast<std::size_t>(index) * len;
  BasicTensor<T> out(shape, std::vector<T>(src, src + len));
  return detail::record(std::move(out), {input}, [input, index, len](const detail::TensorImpl<T>& r) {
    T* g = detail::grad_ptr(input);
    if (!g) return;
    T* dst = g + static_cast<std::size_t>(index) * len;
    for (std::size_t i = 0; i < len; ++i) dst[i] += r.grad[i];
  });
}

template <typename T>
BasicTensor<T> concat_batch(const std::vector<BasicTensor<T>>& inputs) {
  detail::require(!inputs.empty(), "concat_batch: no inputs");
  Shape shape = inputs[0].shape();
  int total = 0;
  for (const auto& t : inputs) {
    Shape a = t.shape(), b = shape;
    detail::require(a.size() == b.size() && !a.empty(), "concat_batch: rank mismatch");
    a[0] = b[0] = 0;
    detail::require(a == b, "concat_batch: " + shape_str(t.shape()) + " vs " + shape_str(shape));
    total += t.dim(0);
  }
  shape[0] = total;
  std::vector<T> data;
  data.reserve(shape_numel(shape));
  for (const auto& t : inputs) data.insert(data.end(), t.data().begin(), t.data().end());
  BasicTensor<T> out(shape, std::move(data));
  return detail::record(std::move(out), inputs, [inputs](const detail::TensorImpl<T>& r) {
    std::size_t offset = 0;
    for (const auto& t : inputs) {
      if (T* g = detail::grad_ptr(t)) {
        for (std::size_t i = 0; i < t.numel(); ++i) g[i] += r.grad[offset + i];
      }
      offset += t.numel();
    }
  });
}

/// a + b with size-1 broadcasting (dimensions aligned from the right).
template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  const auto bc = detail::make_broadcast("add", a.shape(), b.shape());
  BasicTensor<T> out(bc.out_shape);
  detail::for_each_broadcast(bc, [&](std::size_t o, std::size_t ia, std::size_t ib) { out[o] = a[ia] + b[ib]; });
  return detail::record(std::move(out), {a, b}, [a, b, bc](const detail::TensorImpl<T>& r) {
    T* ga = detail::grad_ptr(a);
    T* gb = detail::grad_ptr(b);
    detail::for_each_broadcast(bc, [&](std::size_t o, std::size_t ia, std::size_t ib) {
      if (ga) ga[ia] += r.grad[o];
      if (gb) gb[ib] += r.grad[o];
    });
  });
}

template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  const auto bc = detail::make_broadcast("sub", a.shape(), b.shape());
  BasicTensor<T> out(bc.out_shape);
  detail::for_each_broadcast(bc, [&](std::size_t o, std::size_t ia, std::size_t ib) { out[o] = a[ia] - b[ib]; });
  return detail::record(std::move(out), {a, b}, [a, b, bc](const detail::TensorImpl<T>& r) {
    T* ga = detail::grad_ptr(a);
    T* gb = detail::grad_ptr(b);
    detail::for_each_broadcast(bc, [&](std::size_t o, std::size_t ia, std::size_t ib) {
      if (ga) ga[ia] += r.grad[o];
      if (gb) gb[ib] -= r.grad[o];
    });
  });
}

/// Elementwise product with size-1 broadcasting (e.g. NCHW * N1HW, NCHW * NC11).
template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  const auto bc = detail::make_broadcast("mul", a.shape(), b.shape());
  BasicTensor<T> out(bc.out_shape);
  detail::for_each_broadcast(bc, [&](std::size_t o, std::size_t ia, std::size_t ib) { out[o] = a[ia] * b[ib]; });
  return detail::record(std::move(out), {a, b}, [a, b, bc](const detail::TensorImpl<T>& r) {
    T* ga = detail::grad_ptr(a);
    T* gb = detail::grad_ptr(b);
    detail::for_each_broadcast(bc, [&](std::size_t o, std::size_t ia, std::size_t ib) {
      if (ga) ga[ia] += r.grad[o] * b[ib];
      if (gb) gb[ib] += r.grad[o] * a[ia];
    });
  });
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& x, double factor) {
  const T f = static_cast<T>(factor);
  BasicTensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = x[i] * f;
  return detail::record(std::move(out), {x}, [x, f](const detail::TensorImpl<T>& r) {
    if (T* g = detail::grad_ptr(x))
      for (std::size_t i = 0; i < r.grad.size(); ++i) g[i] += r.grad[i] * f;
  });
}

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x) {
  double acc = 0.0;
  for (T v : x.data()) acc += v;
  return detail::record(BasicTensor<T>::scalar(static_cast<T>(acc)), {x}, [x](const detail::TensorImpl<T>& r) {
    if (T* g = detail::grad_ptr(x))
      for (std::size_t i = 0; i < x.numel(); ++i) g[i] += r.grad[0];
  });
}

template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& x) {
  detail::require(x.numel() > 0, "mean: empty tensor");
  double acc = 0.0;
  for (T v : x.data()) acc += v;
  const double count = static_cast<double>(x.numel());
  return detail::record(BasicTensor<T>::scalar(static_cast<T>(acc / count)), {x},
                        [x, count](const detail::TensorImpl<T>& r) {
                          if (T* g = detail::grad_ptr(x)) {
                            const T v = static_cast<T>(r.grad[0] / count);
                            for (std::size_t i = 0; i < x.numel(); ++i) g[i] += v;
                          }
                        });
}

/// Clamp into [lo, hi]; gradient passes only where the input was inside the range.
template <typename T>
BasicTensor<T> clamp(const BasicTensor<T>& x, double lo, double hi) {
  const T l = static_cast<T>(lo), h = static_cast<T>(hi);
  BasicTensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = std::clamp(x[i], l, h);
  return detail::record(std::move(out), {x}, [x, l, h](const detail::TensorImpl<T>& r) {
    if (T* g = detail::grad_ptr(x))
      for (std::size_t i = 0; i < r.grad.size(); ++i)
        if (x[i] >= l && x[i] <= h) g[i] += r.grad[i];
  });
}

/**
 * Sobel gradient magnitude of a single-channel map, zero padded, scaled by
 * 1/(4*sqrt(2)) so [0,1] inputs give [0,1] outputs. The gradient at a zero
 * magnitude is taken as 0.
 */
template <typename T>
BasicTensor<T> sobel_magnitude(const BasicTensor<T>& input) {
  detail::require_rank("sobel_magnitude", input.shape(), 4);
  detail::require(input.dim(1) == 1, "sobel_magnitude: expected 1 channel, got " + shape_str(input.shape()));
  static constexpr int kx[3][3] = {{-1, 0, 1}, {-2, 0, 2}, {-1, 0, 1}};
  static constexpr int ky[3][3] = {{-1, -2, -1}, {0, 0, 0}, {1, 2, 1}};
  const int n = input.dim(0), h = input.dim(2), w = input.dim(3);
  const T norm = static_cast<T>(1.0 / (4.0 * std::sqrt(2.0)));
  BasicTensor<T> out(input.shape());
  std::vector<T> gx(out.numel()), gy(out.numel());
  for (int b = 0; b < n; ++b) {
    const T* x = input.data().data() + static_cast<std::size_t>(b) * h * w;
    for (int y = 0; y < h; ++y)
      for (int xw = 0; xw < w; ++xw) {
        T sx = 0, sy = 0;
        for (int i = 0; i < 3; ++i) {
          const int yy = y + i - 1;
          if (yy < 0 || yy >= h) continue;
          for (int j = 0; j < 3; ++j) {
            const int xx = xw + j - 1;
            if (xx < 0 || xx >= w) continue;
            const T v = x[yy * w + xx];
            sx += kx[i][j] * v;
            sy += ky[i][j] * v;
          }
        }
        const std::size_t o = (static_cast<std::size_t>(b) * h + y) * w + xw;
        gx[o] = sx;
        gy[o] = sy;
        out[o] = std::sqrt(sx * sx + sy * sy) * norm;
      }
  }
  return detail::record(std::move(out), {input},
                        [input, gx = std::move(gx), gy = std::move(gy), n, h, w, norm](const detail::TensorImpl<T>& r) {
                          T* g = detail::grad_ptr(input);
                          if (!g) return;
                          for (int b = 0; b < n; ++b)
                            for (int y = 0; y < h; ++y)
                              for (int xw = 0; xw < w; ++xw) {
                                const std::size_t o = (static_cast<std::size_t>(b) * h + y) * w + xw;
                                const T mag = std::sqrt(gx[o] * gx[o] + gy[o] * gy[o]);
                                if (mag == T(0)) continue;
                                const T dgx = r.grad[o] * norm * gx[o] / mag;
                                const T dgy = r.grad[o] * norm * gy[o] / mag;
                                T* gb = g + static_cast<std::size_t>(b) * h * w;
                                for (int i = 0; i < 3; ++i) {
                                  const int yy = y + i - 1;
                                  if (yy < 0 || yy >= h) continue;
                                  for (int j = 0; j < 3; ++j) {
                                    const int xx = xw + j - 1;
                                    if (xx < 0 || xx >= w) continue;
                                    gb[yy * w + xx] += kx[i][j] * dgx + ky[i][j] * dgy;
                                  }
                                }
                              }
                        });
}

/// Global L2 norm of all elements.
template <typename T>
double l2_norm(const BasicTensor<T>& x) {
  double acc = 0.0;
  for (T v : x.data()) acc += static_cast<double>(v) * v;
  return std::sqrt(acc);
}

/// x / ||x||_2 over all elements; an all-zero input maps to zeros with zero gradient.
template <typename T>
BasicTensor<T> l2_normalize(const BasicTensor<T>& x) {
  const double norm = l2_norm(x);
  BasicTensor<T> out(x.shape());
  if (norm > 0.0) {
    for (std::size_t i = 0; i < x.numel(); ++i) out[i] = static_cast<T>(x[i] / norm);
  }
  return detail::record(std::move(out), {x}, [x, norm](const detail::TensorImpl<T>& r) {
    T* g = detail::grad_ptr(x);
    if (!g || norm == 0.0) return;
    double dot = 0.0;
    for (std::size_t i = 0; i < r.grad.size(); ++i) dot += static_cast<double>(r.grad[i]) * r.data[i];
    for (std::size_t i = 0; i < r.grad.size(); ++i)
      g[i] += static_cast<T>((r.grad[i] - r.data[i] * dot) / norm);
  });
}

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape) {
  detail::require(shape_numel(shape) == x.numel(),
                  "reshape: " + shape_str(x.shape()) + " cannot become " + shape_str(shape));
  BasicTensor<T> out(std::move(shape), x.storage());
  return detail::record(std::move(out), {x}, [x](const detail::TensorImpl<T>& r) {
    if (T* g = detail::grad_ptr(x))
      for (std::size_t i = 0; i < r.grad.size(); ++i) g[i] += r.grad[i];
  });
}

/// Swaps the last two axes of a rank-3 tensor.
template <typename T>
BasicTensor<T> transpose_last2(const BasicTensor<T>& x) {
  detail::require_rank("transpose_last2", x.shape(), 3);
  const int b = x.dim(0), m = x.dim(1), n = x.dim(2);
  BasicTensor<T> out({b, n, m});
  for (int i = 0; i < b; ++i) {
    detail::MatrixMap<T> dst(out.data().data() + static_cast<std::size_t>(i) * m * n, n, m);
    dst = detail::ConstMatrixMap<T>(x.data().data() + static_cast<std::size_t>(i) * m * n, m, n).transpose();
  }
  return detail::record(std::move(out), {x}, [x, b, m, n](const detail::TensorImpl<T>& r) {
    T* g = detail::grad_ptr(x);
    if (!g) return;
    for (int i = 0; i < b; ++i) {
      detail::MatrixMap<T> dst(g + static_cast<std::size_t>(i) * m * n, m, n);
      dst += detail::ConstMatrixMap<T>(r.grad.data() + static_cast<std::size_t>(i) * m * n, n, m).transpose();
    }
  });
}

/// Batched matrix product: (B x M x K) * (B x K x N) -> (B x M x N).
template <typename T>
BasicTensor<T> bmm(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_rank("bmm lhs", a.shape(), 3);
  detail::require_rank("bmm rhs", b.shape(), 3);
  const int batch = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  detail::require(b.dim(0) == batch && b.dim(1) == k,
                  "bmm: " + shape_str(a.shape()) + " incompatible with " + shape_str(b.shape()));
  BasicTensor<T> out({batch, m, n});
  const std::size_t sa = static_cast<std::size_t>(m) * k, sb = static_cast<std::size_t>(k) * n,
                    so = static_cast<std::size_t>(m) * n;
  for (int i = 0; i < batch; ++i) {
    detail::MatrixMap<T>(out.data().data() + i * so, m, n).noalias() =
        detail::ConstMatrixMap<T>(a.data().data() + i * sa, m, k) *
        detail::ConstMatrixMap<T>(b.data().data() + i * sb, k, n);
  }
  return detail::record(std::move(out), {a, b}, [a, b, batch, m, k, n, sa, sb, so](const detail::TensorImpl<T>& r) {
    T* ga = detail::grad_ptr(a);
    T* gb = detail::grad_ptr(b);
    for (int i = 0; i < batch; ++i) {
      detail::ConstMatrixMap<T> g(r.grad.data() + i * so, m, n);
      if (ga)
        detail::MatrixMap<T>(ga + i * sa, m, k).noalias() +=
            g * detail::ConstMatrixMap<T>(b.data().data() + i * sb, k, n).transpose();
      if (gb)
        detail::MatrixMap<T>(gb + i * sb, k, n).noalias() +=
            detail::ConstMatrixMap<T>(a.data().data() + i * sa, m, k).transpose() * g;
    }
  });
}

/// Numerically stable softmax along the last axis.
template <typename T>
BasicTensor<T> softmax_last(const BasicTensor<T>& x) {
  detail::require(x.rank() >= 1, "softmax_last: scalar input");
  const std::size_t len = static_cast<std::size_t>(x.dim(-1));
  const std::size_t rows = x.numel() / len;
  BasicTensor<T> out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* src = x.data().data() + r * len;
    T* dst = out.data().data() + r * len;
    const T peak = *std::max_element(src, src + len);
    double total = 0.0;
    for (std::size_t i = 0; i < len; ++i) {
      dst[i] = std::exp(src[i] - peak);
      total += dst[i];
    }
    for (std::size_t i = 0; i < len; ++i) dst[i] = static_cast<T>(dst[i] / total);
  }
  return detail::record(std::move(out), {x}, [x, rows, len](const detail::TensorImpl<T>& res) {
    T* g = detail::grad_ptr(x);
    if (!g) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const T* y = res.data.data() + r * len;
      const T* gy = res.grad.data() + r * len;
      double dot = 0.0;
      for (std::size_t i = 0; i < len; ++i) dot += static_cast<double>(gy[i]) * y[i];
      for (std::size_t i = 0; i < len; ++i) g[r * len + i] += static_cast<T>(y[i] * (gy[i] - dot));
    }
  });
}

/**
 * Per-element binary cross-entropy of predictions against constant targets,
 * with predictions clamped to [eps, 1 - eps] before the logs.
 */
template <typename T>
BasicTensor<T> bce_map(const BasicTensor<T>& pred, const BasicTensor<T>& target, double eps = 1e-7) {
  detail::require(pred.shape() == target.shape(),
                  "bce: prediction " + shape_str(pred.shape()) + " vs target " + shape_str(target.shape()));
  const T lo = static_cast<T>(eps), hi = static_cast<T>(1.0 - eps);
  BasicTensor<T> out(pred.shape());
  for (std::size_t i = 0; i < pred.numel(); ++i) {
    const T p = std::clamp(pred[i], lo, hi);
    const T t = target[i];
    out[i] = -(t * std::log(p) + (T(1) - t) * std::log(T(1) - p));
  }
  return detail::record(std::move(out), {pred}, [pred, target, lo, hi](const detail::TensorImpl<T>& r) {
    T* g = detail::grad_ptr(pred);
    if (!g) return;
    for (std::size_t i = 0; i < r.grad.size(); ++i) {
      const T p = pred[i];
      if (p < lo || p > hi) continue;
      g[i] += r.grad[i] * (p - target[i]) / (p * (T(1) - p));
    }
  });
}

/// Number of elements kept by hard-example mining over `count` elements.
inline std::size_t ohem_keep_count(std::size_t count, double keep, std::size_t min_pixels) {
  auto k = static_cast<std::size_t>(std::floor(keep * static_cast<double>(count)));
  k = std::max({k, min_pixels, std::size_t{1}});
  return std::min(k, count);
}

/**
 * Mean of the `ohem_keep_count` largest elements. Ties break toward lower
 * indices; the selected values are summed in index order, so keeping every
 * element reproduces mean() exactly.
 */
template <typename T>
BasicTensor<T> ohem_mean(const BasicTensor<T>& x, double keep, std::size_t min_pixels) {
  detail::require(x.numel() > 0, "ohem_mean: empty tensor");
  detail::require(keep > 0.0 && keep <= 1.0, "ohem_mean: keep must be in (0, 1]");
  const std::size_t count = x.numel();
  const std::size_t k = ohem_keep_count(count, keep, min_pixels);
  auto selected = std::make_shared<std::vector<char>>(count, 1);
  if (k < count) {
    std::vector<std::size_t> idx(count);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::nth_element(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                     [&](std::size_t a, std::size_t b) { return x[a] > x[b] || (x[a] == x[b] && a < b); });
    std::fill(selected->begin(), selected->end(), 0);
    for (std::size_t i = 0; i < k; ++i) (*selected)[idx[i]] = 1;
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < count; ++i)
    if ((*selected)[i]) acc += x[i];
  const double denom = static_cast<double>(k);
  return detail::record(BasicTensor<T>::scalar(static_cast<T>(acc / denom)), {x},
                        [x, selected, denom](const detail::TensorImpl<T>& r) {
                          T* g = detail::grad_ptr(x);
                          if (!g) return;
                          const T v = static_cast<T>(r.grad[0] / denom);
                          for (std::size_t i = 0; i < selected->size(); ++i)
                            if ((*selected)[i]) g[i] += v;
                        });
}

}  // namespace lcanet
