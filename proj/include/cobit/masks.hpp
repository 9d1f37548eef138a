#pragma once

#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <memory>
#include <string>
#include <vector>

#include "cobit/tensor.hpp"

namespace cobit {

enum class MaskKind { bidirectional, causal, conv_shaped };

/// Square 0/1 matrix; allowed(q, k) means query q may attend to key k.
struct AttentionMask {
  MaskKind kind = MaskKind::bidirectional;
  std::size_t length = 0;
  std::shared_ptr<const std::vector<std::uint8_t>> bits;

  bool allowed(std::size_t q, std::size_t k) const { return (*bits)[q * length + k] != 0; }
  std::size_t row_count(std::size_t q) const {
    std::size_t n = 0;
    for (std::size_t k = 0; k < length; ++k) n += allowed(q, k);
    return n;
  }
  /// Every allowed entry of this mask is allowed by `other`.
  bool subset_of(const AttentionMask& other) const {
    if (other.length != length) return false;
    for (std::size_t i = 0; i < length * length; ++i)
      if ((*bits)[i] && !(*other.bits)[i]) return false;
    return true;
  }
  bool same_pattern(const AttentionMask& other) const { return length == other.length && *bits == *other.bits; }
};

namespace detail {
template <class Pred>
AttentionMask build_mask(MaskKind kind, std::size_t length, Pred&& pred) {
  if (length == 0) throw ShapeError("attention mask length must be at least 1");
  auto bits = std::make_shared<std::vector<std::uint8_t>>(length * length);
  for (std::size_t q = 0; q < length; ++q)
    for (std::size_t k = 0; k < length; ++k) (*bits)[q * length + k] = pred(q, k) ? 1 : 0;
  return {kind, length, std::move(bits)};
}
}  // namespace detail

inline AttentionMask make_bidirectional(std::size_t length) {
  return detail::build_mask(MaskKind::bidirectional, length, [](std::size_t, std::size_t) { return true; });
}

inline AttentionMask make_causal(std::size_t length) {
  return detail::build_mask(MaskKind::causal, length, [](std::size_t q, std::size_t k) { return k <= q; });
}

/// Causal k x k window over a g x g raster: key (r', c') is visible from
/// query (r, c) iff it precedes or equals the query in raster order,
/// 0 <= r - r' < k and |c - c'| <= (k - 1) / 2.
inline AttentionMask make_conv_shaped(std::size_t grid, std::size_t kernel) {
  if (grid == 0) throw ShapeError("conv-shaped mask: grid side must be at least 1");
  if (kernel % 2 == 0) throw ShapeError("conv-shaped mask: kernel " + std::to_string(kernel) + " is even");
  if (kernel < 1 || kernel > 2 * grid - 1)
    throw ShapeError("conv-shaped mask: kernel " + std::to_string(kernel) + " outside [1, " +
                     std::to_string(2 * grid - 1) + "]");
  const long half = static_cast<long>(kernel - 1) / 2;
  return detail::build_mask(MaskKind::conv_shaped, grid * grid, [&](std::size_t q, std::size_t k) {
    if (k > q) return false;
    const long r = long(q / grid), c = long(q % grid), r2 = long(k / grid), c2 = long(k % grid);
    return r - r2 >= 0 && r - r2 < long(kernel) && std::labs(c - c2) <= half;
  });
}

/// True iff changing the input at every position after t leaves output rows
/// 0..t bit-identical. forward(input) returns a tensor whose leading axis (after
/// an optional batch axis of 1) has `length` positions; perturb(input, pos)
/// returns the input with position pos altered.
template <class Input, class Forward, class Perturb>
bool validate_causality(const Input& input, std::size_t length, std::size_t t, Forward&& forward,
                        Perturb&& perturb) {
  if (t >= length) throw ShapeError("validate_causality: position outside the sequence");
  const auto base = forward(input);
  Input changed = input;
  for (std::size_t p = t + 1; p < length; ++p) changed = perturb(changed, p);
  const auto after = forward(changed);
  const std::size_t width = base.numel() / length;
  return std::memcmp(base.values().data(), after.values().data(),
                     (t + 1) * width * sizeof(base.values()[0])) == 0;
}

}  // namespace cobit
