#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "cobit/random.hpp"
#include "cobit/tensor.hpp"

namespace cobit {

/// Named trainable tensors. Iteration is lexicographic by canonical name.
/// An alias is a second name for an existing physical tensor: reads and writes
/// through either name hit the same storage, and counts only see it once.
template <class T>
class ParameterStore {
 public:
  Tensor<T> add(const std::string& name, Tensor<T> init) {
    if (params_.count(name) || aliases_.count(name)) throw Error("duplicate parameter name '" + name + "'");
    init.set_requires_grad(true);
    params_.emplace(name, init);
    return init;
  }

  /// N(0, stddev^2) initialized parameter.
  Tensor<T> add_normal(const std::string& name, Shape shape, double stddev, Pcg32& rng) {
    std::vector<T> v(numel(shape));
    for (auto& x : v) x = T(stddev * rng.normal());
    return add(name, Tensor<T>(std::move(shape), std::move(v)));
  }

  Tensor<T> add_constant(const std::string& name, Shape shape, T value) {
    return add(name, Tensor<T>::full(std::move(shape), value));
  }

  Tensor<T> alias(const std::string& alias_name, const std::string& target) {
    if (params_.count(alias_name) || aliases_.count(alias_name))
      throw Error("duplicate parameter name '" + alias_name + "'");
    const std::string canon = canonical_name(target);
    aliases_.emplace(alias_name, canon);
    return params_.at(canon);
  }

  bool contains(const std::string& name) const { return params_.count(name) || aliases_.count(name); }
  bool is_alias(const std::string& name) const { return aliases_.count(name) != 0; }

  std::string canonical_name(const std::string& name) const {
    if (auto it = aliases_.find(name); it != aliases_.end()) return it->second;
    if (!params_.count(name)) throw Error("unknown parameter '" + name + "'");
    return name;
  }

  Tensor<T> get(const std::string& name) const { return params_.at(canonical_name(name)); }

  const std::map<std::string, Tensor<T>>& tensors() const { return params_; }
  const std::map<std::string, std::string>& aliases() const { return aliases_; }

  /// Scalar count over physical tensors.
  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : params_) n += t.numel();
    return n;
  }

  /// Scalar count over the distinct physical tensors among `names`.
  std::size_t parameter_count(const std::vector<std::string>& names) const {
    std::set<std::string> seen;
    std::size_t n = 0;
    for (const auto& name : names)
      if (seen.insert(canonical_name(name)).second) n += get(name).numel();
    return n;
  }

  void zero_grads() {
    for (auto& [name, t] : params_) const_cast<Tensor<T>&>(t).zero_grad();
  }
  /// Gives every parameter a (zero) gradient buffer if it has none.
  void materialize_grads() {
    for (auto& [name, t] : params_) const_cast<Tensor<T>&>(t).ensure_grad();
  }
  void clear_grads() {
    for (auto& [name, t] : params_) const_cast<Tensor<T>&>(t).clear_grad();
  }

 private:
  std::map<std::string, Tensor<T>> params_;
  std::map<std::string, std::string> aliases_;
};

}  // namespace cobit
