#pragma once

// PCG32 generator (O'Neill, XSH-RR variant). The full state is 16 bytes, which
// is what checkpoints persist. Distribution helpers are implemented here
// rather than with <random> distributions so sampled values do not depend on
// the standard library implementation.

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>

namespace cobit {

class Pcg32 {
 public:
  using result_type = std::uint32_t;

  explicit Pcg32(std::uint64_t seed = 0x853c49e6748fea9bULL, std::uint64_t stream = 0xda3e39cb94b95bdbULL) {
    reseed(seed, stream);
  }

  void reseed(std::uint64_t seed, std::uint64_t stream) {
    state_ = 0;
    inc_ = (stream << 1u) | 1u;
    next();
    state_ += seed;
    next();
  }

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }
  result_type operator()() { return next(); }

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform() {
    const std::uint64_t hi = next() >> 5, lo = next() >> 6;
    return static_cast<double>((hi << 26) | lo) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Unbiased integer in [0, n) (Lemire's multiply-shift with rejection).
  std::uint32_t below(std::uint32_t n) {
    std::uint64_t m = std::uint64_t(next()) * n;
    auto low = static_cast<std::uint32_t>(m);
    if (low < n) {
      const std::uint32_t threshold = static_cast<std::uint32_t>(-n) % n;
      while (low < threshold) {
        m = std::uint64_t(next()) * n;
        low = static_cast<std::uint32_t>(m);
      }
    }
    return static_cast<std::uint32_t>(m >> 32);
  }

  /// Standard normal via Box-Muller (one value per call, no caching).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  std::array<std::uint8_t, 16> state_bytes() const {
    std::array<std::uint8_t, 16> out{};
    for (int i = 0; i < 8; ++i) {
      out[i] = static_cast<std::uint8_t>(state_ >> (8 * i));
      out[8 + i] = static_cast<std::uint8_t>(inc_ >> (8 * i));
    }
    return out;
  }

  static Pcg32 from_state_bytes(const std::array<std::uint8_t, 16>& bytes) {
    Pcg32 g;
    g.state_ = 0;
    g.inc_ = 0;
    for (int i = 0; i < 8; ++i) {
      g.state_ |= std::uint64_t(bytes[i]) << (8 * i);
      g.inc_ |= std::uint64_t(bytes[8 + i]) << (8 * i);
    }
    return g;
  }

  bool operator==(const Pcg32&) const = default;

 private:
  std::uint32_t next() {
    const std::uint64_t old = state_;
    state_ = old * 6364136223846793005ULL + inc_;
    const auto xorshifted = static_cast<std::uint32_t>(((old >> 18u) ^ old) >> 27u);
    const auto rot = static_cast<std::uint32_t>(old >> 59u);
    return (xorshifted >> rot) | (xorshifted << ((32u - rot) & 31u));
  }

  std::uint64_t state_ = 0;
  std::uint64_t inc_ = 0;
};

}  // namespace cobit
