#pragma once

// Dense tensors and the gradient tape.
//
// A Tensor is a shared handle to a node holding shape, row-major values and an
// optional gradient buffer. Ops record themselves on the thread's active Tape
// (installed with TapeScope) when any input requires a gradient; without an
// active tape, ops run in pure inference mode.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <type_traits>
#include <utility>
#include <vector>

namespace cobit {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible shapes, extents or axes.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A forward op produced NaN or Inf.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Malformed or incompatible file.
class FormatError : public Error {
 public:
  using Error::Error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

template <class T>
struct TensorNode {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty means "no gradient"
  bool requires_grad = false;
};

template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false)
      : node_(std::make_shared<TensorNode<T>>()) {
    for (auto d : shape)
      if (d == 0) throw ShapeError("tensor extents must be positive, got " + to_string(shape));
    if (cobit::numel(shape) != values.size())
      throw ShapeError("shape " + to_string(shape) + " does not match " +
                       std::to_string(values.size()) + " values");
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = cobit::numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }
  static Tensor full(Shape shape, T v) {
    const auto n = cobit::numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, v));
  }
  static Tensor scalar(T v, bool requires_grad = false) { return Tensor({1}, {v}, requires_grad); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<const T> values() const { return node_->value; }
  /// Direct write access; used for parameter updates outside the tape.
  std::span<T> mutable_values() { return node_->value; }
  T item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
    return node_->value[0];
  }
  T operator[](std::size_t i) const { return node_->value[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->grad; }
  void ensure_grad() {
    if (node_->grad.empty()) node_->grad.assign(numel(), T(0));
  }
  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }
  void clear_grad() { std::vector<T>().swap(node_->grad); }

  bool same_storage(const Tensor& other) const { return node_ == other.node_; }
  const std::shared_ptr<TensorNode<T>>& node() const { return node_; }

  /// Deep copy of values (no gradient, no tape history).
  Tensor clone() const { return Tensor(shape(), node_->value, false); }

 private:
  std::shared_ptr<TensorNode<T>> node_;
};

/// Ordered record of the ops executed while it was active.
template <class T>
class Tape {
 public:
  using Backward = std::function<void(const TensorNode<T>& out)>;

  struct Record {
    std::string_view op;
    std::vector<std::shared_ptr<TensorNode<T>>> inputs;
    std::shared_ptr<TensorNode<T>> output;
    Backward backward;
  };

  void record(std::string_view op, std::vector<std::shared_ptr<TensorNode<T>>> inputs,
              std::shared_ptr<TensorNode<T>> output, Backward backward) {
    records_.push_back({op, std::move(inputs), std::move(output), std::move(backward)});
  }

  std::size_t size() const { return records_.size(); }
  const std::vector<Record>& records() const { return records_; }
  void clear() { records_.clear(); }

  /// Seeds d(loss)/d(loss) = 1 and runs every record in reverse order once.
  /// Gradients accumulate (+=); records whose output received no gradient
  /// are skipped, so tensors unreachable from the loss keep an absent grad.
  void backward(const Tensor<T>& loss) {
    if (loss.numel() != 1)
      throw ShapeError("backward needs a scalar loss, got shape " + to_string(loss.shape()));
    auto& g = loss.node()->grad;
    if (g.empty()) g.assign(1, T(0));
    g[0] += T(1);
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
      if (it->output->grad.empty()) continue;
      it->backward(*it->output);
    }
  }

  static Tape*& active() {
    thread_local Tape* current = nullptr;
    return current;
  }

 private:
  std::vector<Record> records_;
};

/// Installs a tape as the thread's recording target for its lifetime.
template <class T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape) : previous_(Tape<T>::active()) { Tape<T>::active() = &tape; }
  ~TapeScope() { Tape<T>::active() = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* previous_;
};

/// Suspends recording (inference inside a training scope).
template <class T>
class NoGradScope {
 public:
  NoGradScope() : previous_(Tape<T>::active()) { Tape<T>::active() = nullptr; }
  ~NoGradScope() { Tape<T>::active() = previous_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape<T>* previous_;
};

namespace detail {

/// Gradient buffer of an input node, allocated on first use; nullptr when the
/// node does not take gradients.
template <class T>
T* grad_buffer(TensorNode<T>& node) {
  if (!node.requires_grad) return nullptr;
  if (node.grad.empty()) node.grad.assign(node.value.size(), T(0));
  return node.grad.data();
}

/// A value is finite iff its exponent field is not all ones; testing the bits
/// keeps the scan vectorized.
template <class T>
bool all_finite(const T* x, std::size_t n) {
  using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  constexpr U exp_mask = sizeof(T) == 4 ? U(0x7f800000u) : U(0x7ff0000000000000ull);
  U worst = 0;
  for (std::size_t i = 0; i < n; ++i) worst = std::max(worst, U(std::bit_cast<U>(x[i]) & exp_mask));
  return worst != exp_mask;
}

template <class T>
void check_finite(std::string_view op, const std::vector<T>& values) {
  if (!all_finite(values.data(), values.size())) throw NumericError("non-finite value produced by op '" + std::string(op) + "'");
}

/// Wraps a freshly computed value as an op result and records it on the
/// active tape when any input requires a gradient.
template <class T>
Tensor<T> finish(std::string_view op, Shape shape, std::vector<T> values,
                 std::initializer_list<const Tensor<T>*> inputs, typename Tape<T>::Backward backward) {
  check_finite(op, values);
  Tensor<T> out(std::move(shape), std::move(values));
  Tape<T>* tape = Tape<T>::active();
  bool needs = false;
  for (const auto* in : inputs) needs |= in->requires_grad();
  if (tape && needs) {
    out.set_requires_grad(true);
    std::vector<std::shared_ptr<TensorNode<T>>> nodes;
    nodes.reserve(inputs.size());
    for (const auto* in : inputs) nodes.push_back(in->node());
    tape->record(op, std::move(nodes), out.node(), std::move(backward));
  }
  return out;
}

}  // namespace detail
}  // namespace cobit
