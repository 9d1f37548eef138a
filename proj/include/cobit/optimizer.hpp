#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "cobit/parameters.hpp"

namespace cobit {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.96;
  double weight_decay = 0.045;  // decoupled, applied to every parameter
  double eps = 1e-8;
};

/// Linear warmup to the peak rate, then cosine (or linear) decay to zero at
/// total_steps. `step` is 0-based.
struct LrSchedule {
  double peak = 3e-4;
  std::uint64_t warmup = 500;
  std::uint64_t total = 2500;
  bool cosine = true;

  double at(std::uint64_t step) const {
    if (warmup > 0 && step < warmup) return peak * double(step + 1) / double(warmup);
    if (total <= warmup) return peak;
    const double progress = std::min(1.0, double(step - warmup) / double(total - warmup));
    if (cosine) return peak * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
    return peak * (1.0 - progress);
  }
};

/// First/second moments keyed by canonical parameter name.
template <class T>
struct OptimizerState {
  AdamConfig hyper;
  LrSchedule schedule;
  std::map<std::string, std::vector<T>> m, v;
  std::uint64_t step = 0;  // completed updates
};

/// One AdamW update over every physical parameter:
///   m = b1 m + (1-b1) g,  v = b2 v + (1-b2) g^2,
///   p -= lr * m_hat / (sqrt(v_hat) + eps), then p -= lr * wd * p.
/// Every parameter must carry a gradient; gradients are zeroed afterwards.
template <class T>
void optimizer_step(ParameterStore<T>& store, OptimizerState<T>& state, double lr) {
  const AdamConfig& cfg = state.hyper;
  for (const auto& [name, tensor] : store.tensors())
    if (!tensor.has_grad()) throw Error("optimizer_step: parameter '" + name + "' has no gradient");
  const std::uint64_t t = state.step + 1;
  const double c1 = 1.0 - std::pow(cfg.beta1, double(t));
  const double c2 = 1.0 - std::pow(cfg.beta2, double(t));
  for (const auto& [name, tensor] : store.tensors()) {
    Tensor<T> p = tensor;
    auto& m = state.m[name];
    auto& v = state.v[name];
    if (m.empty()) m.assign(p.numel(), T(0));
    if (v.empty()) v.assign(p.numel(), T(0));
    if (m.size() != p.numel() || v.size() != p.numel())
      throw ShapeError("optimizer state for '" + name + "' does not match the parameter size");
    auto values = p.mutable_values();
    auto grad = p.grad();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double g = grad[i];
      const double mi = cfg.beta1 * double(m[i]) + (1.0 - cfg.beta1) * g;
      const double vi = cfg.beta2 * double(v[i]) + (1.0 - cfg.beta2) * g * g;
      m[i] = T(mi);
      v[i] = T(vi);
      double x = double(values[i]) - lr * (mi / c1) / (std::sqrt(vi / c2) + cfg.eps);
      x -= lr * cfg.weight_decay * x;
      values[i] = T(x);
    }
  }
  state.step = t;
  store.zero_grads();
}

/// Update at the schedule's rate for the current step.
template <class T>
void optimizer_step(ParameterStore<T>& store, OptimizerState<T>& state) {
  optimizer_step(store, state, state.schedule.at(state.step));
}

}  // namespace cobit
