#pragma once

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "lcanet/random.hpp"
#include "lcanet/tensor.hpp"

namespace lcanet {

/// Trainable tensor plus its SGD momentum state.
template <typename T>
struct Parameter {
  std::string name;
  BasicTensor<T> tensor;
  std::vector<T> momentum;
};

/**
 * Named parameters in insertion order. Each parameter's initial values are
 * drawn from its own stream seeded by (seed, name), so adding or removing a
 * module never perturbs the initialisation of the others.
 */
template <typename T>
class ParameterSet {
 public:
  ParameterSet() = default;
  explicit ParameterSet(std::uint64_t seed) : seed_(seed) {}

  std::uint64_t seed() const { return seed_; }

  BasicTensor<T>& add(const std::string& name, BasicTensor<T> tensor) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
    tensor.set_requires_grad(true);
    index_[name] = params_.size();
    params_.push_back({name, tensor, std::vector<T>(tensor.numel(), T(0))});
    return params_.back().tensor;
  }

  /// Kaiming-normal conv weight (fan-in scaling) and zero bias.
  void add_conv(const std::string& name, int out_ch, int in_ch, int k) {
    const double stddev = std::sqrt(2.0 / (static_cast<double>(in_ch) * k * k));
    Rng rng(seed_, fnv1a(name + ".w"));
    add(name + ".w", random_normal<T>({out_ch, in_ch, k, k}, rng, stddev));
    add(name + ".b", BasicTensor<T>::zeros({out_ch}));
  }

  void add_zero_conv(const std::string& name, int out_ch, int in_ch, int k) {
    add(name + ".w", BasicTensor<T>::zeros({out_ch, in_ch, k, k}));
    add(name + ".b", BasicTensor<T>::zeros({out_ch}));
  }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  const BasicTensor<T>& operator[](const std::string& name) const { return params_[lookup(name)].tensor; }
  BasicTensor<T>& operator[](const std::string& name) { return params_[lookup(name)].tensor; }

  std::vector<Parameter<T>>& all() { return params_; }
  const std::vector<Parameter<T>>& all() const { return params_; }
  std::size_t size() const { return params_.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.tensor.numel();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

 private:
  std::size_t lookup(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
    return it->second;
  }

  std::uint64_t seed_ = 0;
  std::vector<Parameter<T>> params_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace lcanet
