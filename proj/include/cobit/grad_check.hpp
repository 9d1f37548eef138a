#pragma once

// Central finite-difference gradient checking in double precision.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "cobit/parameters.hpp"
#include "cobit/random.hpp"
#include "cobit/tensor.hpp"

namespace cobit {

struct GradCheckResult {
  double max_rel_error = 0;
  std::size_t checked = 0;
  std::size_t total = 0;  // scalars across all inputs
  std::string worst;  // "name[index]" of the worst coordinate
};

struct NamedTensor {
  std::string name;
  Tensor<double> tensor;
};

/// Compares tape gradients of `loss` with (f(x+h) - f(x-h)) / 2h at up to
/// `samples` coordinates drawn uniformly over all inputs (every coordinate
/// when there are fewer). Relative error is |a - n| / max(|a|, |n|, 1e-8).
/// `loss` must rebuild its graph from the current input values on each call;
/// it is evaluated twice first to confirm it is deterministic.
inline GradCheckResult grad_check(const std::vector<NamedTensor>& inputs,
                                  const std::function<Tensor<double>()>& loss, double h = 1e-5,
                                  std::size_t samples = 64, std::uint64_t seed = 7) {
  for (const auto& in : inputs) {
    Tensor<double> t = in.tensor;
    t.set_requires_grad(true);
    t.clear_grad();
  }
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    tape.backward(loss());
  }
  {
    const double a = loss().item(), b = loss().item();
    if (a != b) throw Error("grad_check: loss is not deterministic");
  }

  struct Coord {
    std::size_t input, index;
  };
  std::vector<Coord> coords;
  std::size_t total = 0;
  for (const auto& in : inputs) total += in.tensor.numel();
  if (total <= samples) {
    for (std::size_t i = 0; i < inputs.size(); ++i)
      for (std::size_t j = 0; j < inputs[i].tensor.numel(); ++j) coords.push_back({i, j});
  } else {
    Pcg32 rng(seed, 0x9c);
    for (std::size_t s = 0; s < samples; ++s) {
      std::size_t flat = static_cast<std::size_t>(rng.uniform() * double(total));
      std::size_t i = 0;
      while (flat >= inputs[i].tensor.numel()) flat -= inputs[i++].tensor.numel();
      coords.push_back({i, flat});
    }
  }

  GradCheckResult result;
  result.total = total;
  for (const auto& c : coords) {
    Tensor<double> t = inputs[c.input].tensor;
    const double analytic = t.has_grad() ? t.grad()[c.index] : 0.0;
    const double x0 = t.values()[c.index];
    t.mutable_values()[c.index] = x0 + h;
    const double fp = loss().item();
    t.mutable_values()[c.index] = x0 - h;
    const double fm = loss().item();
    t.mutable_values()[c.index] = x0;
    const double numeric = (fp - fm) / (2 * h);
    const double rel =
        std::fabs(analytic - numeric) / std::max({std::fabs(analytic), std::fabs(numeric), 1e-8});
    ++result.checked;
    if (rel >= result.max_rel_error) {
      result.max_rel_error = rel;
      result.worst = inputs[c.input].name + "[" + std::to_string(c.index) + "]";
    }
  }
  return result;
}

/// Checks every physical parameter of a store.
inline GradCheckResult grad_check(const ParameterStore<double>& store,
                                  const std::function<Tensor<double>()>& loss, double h = 1e-5,
                                  std::size_t samples = 64, std::uint64_t seed = 7) {
  std::vector<NamedTensor> inputs;
  for (const auto& [name, t] : store.tensors()) inputs.push_back({name, t});
  return grad_check(inputs, loss, h, samples, seed);
}

}  // namespace cobit
