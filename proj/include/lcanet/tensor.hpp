#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace lcanet {

/// Raised on incompatible tensor extents. The message names the op and both shapes.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Tensor extents, outermost first. Rank is at most 4 with (N, C, H, W) meaning.
using Shape = std::vector<int>;

inline std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

template <typename T>
class BasicTensor;

namespace detail {

template <typename T>
struct TensorImpl;

template <typename T>
struct GradFn {
  std::vector<std::shared_ptr<TensorImpl<T>>> inputs;
  // Receives the finished output node; pushes its grad into the inputs.
  std::function<void(const TensorImpl<T>&)> apply;
};

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until first written
  bool requires_grad = false;
  std::shared_ptr<GradFn<T>> grad_fn;

  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Disables graph recording for its lifetime (evaluation, finite differences).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/**
 * Dense row-major array of rank <= 4 with an optional gradient buffer.
 *
 * A BasicTensor is a shared handle: copies alias the same storage and graph
 * node, which is what lets ops record their inputs for the backward pass.
 * Use clone() for an independent deep copy and detach() to cut the graph.
 */
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;

  explicit BasicTensor(Shape shape, T fill = T(0)) : impl_(std::make_shared<detail::TensorImpl<T>>()) {
    check_shape(shape);
    impl_->data.assign(shape_numel(shape), fill);
    impl_->shape = std::move(shape);
  }

  BasicTensor(Shape shape, std::vector<T> data) : impl_(std::make_shared<detail::TensorImpl<T>>()) {
    check_shape(shape);
    if (data.size() != shape_numel(shape)) {
      throw ShapeError("tensor: data length " + std::to_string(data.size()) + " does not match shape " +
                       shape_str(shape));
    }
    impl_->data = std::move(data);
    impl_->shape = std::move(shape);
  }

  static BasicTensor zeros(Shape shape) { return BasicTensor(std::move(shape), T(0)); }
  static BasicTensor full(Shape shape, T value) { return BasicTensor(std::move(shape), value); }
  static BasicTensor scalar(T value) { return BasicTensor(Shape{}, std::vector<T>{value}); }

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  int dim(int i) const { return impl_->shape.at(static_cast<std::size_t>(i < 0 ? rank() + i : i)); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<T> data() { return impl_->data; }
  std::span<const T> data() const { return impl_->data; }
  std::vector<T>& storage() { return impl_->data; }
  const std::vector<T>& storage() const { return impl_->data; }

  T& operator[](std::size_t i) { return impl_->data[i]; }
  const T& operator[](std::size_t i) const { return impl_->data[i]; }

  /// NCHW element access; requires rank 4.
  T& at(int n, int c, int h, int w) { return impl_->data[offset(n, c, h, w)]; }
  const T& at(int n, int c, int h, int w) const { return impl_->data[offset(n, c, h, w)]; }

  T item() const {
    if (numel() != 1) throw ShapeError("item: tensor " + shape_str(shape()) + " is not a scalar");
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  BasicTensor& set_requires_grad(bool on = true) {
    impl_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return impl_ && !impl_->grad.empty(); }
  std::span<const T> grad() const { return impl_->grad; }
  std::span<T> grad() { return impl_->grad; }
  std::vector<T>& grad_buffer() { return impl_->grad_buffer(); }
  void zero_grad() { impl_->grad.clear(); }

  BasicTensor detach() const { return BasicTensor(shape(), impl_->data); }
  BasicTensor clone() const {
    BasicTensor out(shape(), impl_->data);
    out.impl_->requires_grad = impl_->requires_grad;
    return out;
  }

  bool is_leaf() const { return !impl_->grad_fn; }
  const std::shared_ptr<detail::TensorImpl<T>>& impl() const { return impl_; }

 private:
  static void check_shape(const Shape& shape) {
    if (shape.size() > 4) throw ShapeError("tensor: rank " + std::to_string(shape.size()) + " exceeds 4");
    for (int d : shape) {
      if (d < 0) throw ShapeError("tensor: negative extent in " + shape_str(shape));
    }
  }

  std::size_t offset(int n, int c, int h, int w) const {
    const Shape& s = impl_->shape;
    return ((static_cast<std::size_t>(n) * s[1] + c) * s[2] + h) * s[3] + w;
  }

  std::shared_ptr<detail::TensorImpl<T>> impl_;
};

using Tensor = BasicTensor<float>;

namespace detail {

/// Attaches a backward closure to `out` when any input requires grad.
template <typename T, typename Fn>
BasicTensor<T> record(BasicTensor<T> out, const std::vector<BasicTensor<T>>& inputs, Fn&& backward_fn) {
  if (!grad_enabled()) return out;
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (!any) return out;
  auto node = std::make_shared<GradFn<T>>();
  for (const auto& in : inputs) node->inputs.push_back(in.impl());
  node->apply = std::forward<Fn>(backward_fn);
  out.impl()->requires_grad = true;
  out.impl()->grad_fn = std::move(node);
  return out;
}

/// Grad buffer of an input, or nullptr if it does not take gradients.
template <typename T>
T* grad_ptr(const BasicTensor<T>& t) {
  if (!t.requires_grad()) return nullptr;
  return t.impl()->grad_buffer().data();
}

}  // namespace detail

/**
 * Reverse-mode sweep from a scalar. Leaf gradients accumulate across calls
 * until zero_grad(); intermediate gradients are reset at the start of each sweep.
 */
template <typename T>
void backward(const BasicTensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ShapeError("backward: loss must be a scalar, got " + (loss.defined() ? shape_str(loss.shape()) : "undefined"));
  }
  using Impl = detail::TensorImpl<T>;
  std::vector<Impl*> order;
  std::unordered_set<Impl*> seen;
  std::vector<std::pair<Impl*, std::size_t>> stack{{loss.impl().get(), 0}};
  seen.insert(loss.impl().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    const auto* fn = node->grad_fn.get();
    if (fn && next < fn->inputs.size()) {
      Impl* child = fn->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (Impl* node : order) {
    if (node->grad_fn) node->grad.clear();
  }
  loss.impl()->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Impl* node = *it;
    if (node->grad_fn && !node->grad.empty()) node->grad_fn->apply(*node);
  }
}

}  // namespace lcanet
