#pragma once

// Dense numeric kernels shared by the autodiff ops and the incremental
// decoder. Every kernel computes an output element with a fixed operation
// sequence that does not depend on how many rows are processed together, so
// a row computed alone is bit-identical to the same row computed in a batch.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <limits>
#include <type_traits>
#include <vector>

#if defined(__AVX512F__)
#include <immintrin.h>
#endif

namespace cobit::kernels {

namespace detail {

#if defined(__AVX512F__)
template <class T>
struct Simd;
template <>
struct Simd<float> {
  using V = __m512;
  using M = __mmask16;
  static constexpr std::size_t kLanes = 16;
  static M mask(std::size_t n) { return n >= 16 ? M(0xffff) : M((1u << n) - 1); }
  static V zero() { return _mm512_setzero_ps(); }
  static V load(const float* p, M m) { return _mm512_maskz_loadu_ps(m, p); }
  static void store(float* p, V v, M m) { _mm512_mask_storeu_ps(p, m, v); }
  static V splat(float x) { return _mm512_set1_ps(x); }
  static V fma(V a, V b, V c) { return _mm512_fmadd_ps(a, b, c); }
};
template <>
struct Simd<double> {
  using V = __m512d;
  using M = __mmask8;
  static constexpr std::size_t kLanes = 8;
  static M mask(std::size_t n) { return n >= 8 ? M(0xff) : M((1u << n) - 1); }
  static V zero() { return _mm512_setzero_pd(); }
  static V load(const double* p, M m) { return _mm512_maskz_loadu_pd(m, p); }
  static void store(double* p, V v, M m) { _mm512_mask_storeu_pd(p, m, v); }
  static V splat(double x) { return _mm512_set1_pd(x); }
  static V fma(V a, V b, V c) { return _mm512_fmadd_pd(a, b, c); }
};

/// kRows x (kVecs vectors) tile of C over p in [p0, p1); the last vector is
/// restricted to `last` lanes. `load` says whether to start from stored C.
template <class T, std::size_t kRows, std::size_t kVecs>
inline void gemm_tile(const T* a, std::size_t a_rs, std::size_t a_cs, const T* b, T* c, std::size_t n,
                      std::size_t i, std::size_t j0, std::size_t p0, std::size_t p1, bool load,
                      typename Simd<T>::M last) {
  using S = Simd<T>;
  typename S::M masks[kVecs];
  #pragma GCC unroll 8
  for (std::size_t v = 0; v < kVecs; ++v) masks[v] = v + 1 == kVecs ? last : S::mask(S::kLanes);
  typename S::V acc[kRows][kVecs];
  #pragma GCC unroll 8
  for (std::size_t r = 0; r < kRows; ++r)
    #pragma GCC unroll 8
    for (std::size_t v = 0; v < kVecs; ++v)
      acc[r][v] = load ? S::load(c + (i + r) * n + j0 + v * S::kLanes, masks[v]) : S::zero();
  for (std::size_t p = p0; p < p1; ++p) {
    const T* brow = b + p * n + j0;
    typename S::V bv[kVecs];
    #pragma GCC unroll 8
    for (std::size_t v = 0; v < kVecs; ++v) bv[v] = S::load(brow + v * S::kLanes, masks[v]);
    #pragma GCC unroll 8
    for (std::size_t r = 0; r < kRows; ++r) {
      const typename S::V av = S::splat(a[(i + r) * a_rs + p * a_cs]);
      #pragma GCC unroll 8
      for (std::size_t v = 0; v < kVecs; ++v) acc[r][v] = S::fma(av, bv[v], acc[r][v]);
    }
  }
  #pragma GCC unroll 8
  for (std::size_t r = 0; r < kRows; ++r)
    #pragma GCC unroll 8
    for (std::size_t v = 0; v < kVecs; ++v) S::store(c + (i + r) * n + j0 + v * S::kLanes, acc[r][v], masks[v]);
}

template <class T, std::size_t kRows, std::size_t kVecs>
inline void gemm_rows(const T* a, std::size_t a_rs, std::size_t a_cs, const T* b, T* c, std::size_t n,
                      std::size_t i, std::size_t j0, std::size_t p0, std::size_t p1, bool load,
                      typename Simd<T>::M last, std::size_t rows) {
  switch (rows) {
    case 1: return gemm_tile<T, 1, kVecs>(a, a_rs, a_cs, b, c, n, i, j0, p0, p1, load, last);
    case 2: return gemm_tile<T, 2, kVecs>(a, a_rs, a_cs, b, c, n, i, j0, p0, p1, load, last);
    case 3: return gemm_tile<T, 3, kVecs>(a, a_rs, a_cs, b, c, n, i, j0, p0, p1, load, last);
    case 4: return gemm_tile<T, 4, kVecs>(a, a_rs, a_cs, b, c, n, i, j0, p0, p1, load, last);
    case 5: return gemm_tile<T, 5, kVecs>(a, a_rs, a_cs, b, c, n, i, j0, p0, p1, load, last);
    case 6: return gemm_tile<T, 6, kVecs>(a, a_rs, a_cs, b, c, n, i, j0, p0, p1, load, last);
    case 7: return gemm_tile<T, 7, kVecs>(a, a_rs, a_cs, b, c, n, i, j0, p0, p1, load, last);
    default: return gemm_tile<T, 8, kVecs>(a, a_rs, a_cs, b, c, n, i, j0, p0, p1, load, last);
  }
}

/// Row blocks outermost so each block of A is reused from L1 across every
/// column panel while B stays in L2.
template <class T>
inline void gemm_block(const T* a, std::size_t a_rs, std::size_t a_cs, const T* b, T* c, std::size_t m,
                       std::size_t n, std::size_t p0, std::size_t p1, bool load) {
  using S = Simd<T>;
  constexpr std::size_t L = S::kLanes;
  const std::size_t full = n / (3 * L), rest = n - full * 3 * L;
  const auto last_full = S::mask(L), last_rest = S::mask(rest - (rest == 0 ? 0 : (rest - 1) / L * L));
  for (std::size_t i = 0; i < m; i += 8) {
    const std::size_t rows = std::min<std::size_t>(8, m - i);
    for (std::size_t jp = 0; jp < full; ++jp)
      gemm_rows<T, 8, 3>(a, a_rs, a_cs, b, c, n, i, jp * 3 * L, p0, p1, load, last_full, rows);
    const std::size_t j0 = full * 3 * L;
    if (rest > 2 * L) gemm_rows<T, 8, 3>(a, a_rs, a_cs, b, c, n, i, j0, p0, p1, load, last_rest, rows);
    else if (rest > L) gemm_rows<T, 8, 2>(a, a_rs, a_cs, b, c, n, i, j0, p0, p1, load, last_rest, rows);
    else if (rest > 0) gemm_rows<T, 8, 1>(a, a_rs, a_cs, b, c, n, i, j0, p0, p1, load, last_rest, rows);
  }
}
#else
template <class T>
inline void gemm_block(const T* a, std::size_t a_rs, std::size_t a_cs, const T* b, T* c, std::size_t m,
                       std::size_t n, std::size_t p0, std::size_t p1, bool load) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      T acc = load ? c[i * n + j] : T(0);
      for (std::size_t p = p0; p < p1; ++p) acc = std::fma(a[i * a_rs + p * a_cs], b[p * n + j], acc);
      c[i * n + j] = acc;
    }
}
#endif

}  // namespace detail

/// C[m,n] (+)= A * B[k,n] where A(i,p) = a[i*a_rs + p*a_cs]; B and C row-major.
/// Each C element is a left-to-right fma chain over p starting from 0 (or from
/// the previous C value when accumulating). Blocking over p stores and reloads
/// the partial sums, which leaves the chain unchanged.
template <class T>
void gemm_strided(const T* a, std::size_t a_rs, std::size_t a_cs, const T* b, T* c, std::size_t m, std::size_t k,
                  std::size_t n, bool accumulate) {
  constexpr std::size_t kDepth = 256;
  if (k == 0) {
    if (!accumulate) std::fill(c, c + m * n, T(0));
    return;
  }
  for (std::size_t p0 = 0; p0 < k; p0 += kDepth)
    detail::gemm_block(a, a_rs, a_cs, b, c, m, n, p0, std::min(k, p0 + kDepth), accumulate || p0 > 0);
}

/// C[m,n] (+)= A[m,k] * B[k,n], all row-major.
template <class T>
void gemm(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool accumulate = false) {
  gemm_strided(a, k, 1, b, c, m, k, n, accumulate);
}

/// y[rows, n] = x[rows, k] * w[k, n] + b: each chain starts from the bias.
template <class T>
void linear(const T* x, const T* w, const T* b, T* y, std::size_t rows, std::size_t k, std::size_t n) {
  for (std::size_t r = 0; r < rows; ++r) std::copy_n(b, n, y + r * n);
  gemm(x, w, y, rows, k, n, true);
}

/// out[cols, rows] = in[rows, cols]^T
template <class T>
void transpose(const T* in, T* out, std::size_t rows, std::size_t cols) {
  constexpr std::size_t kBlock = 32;
  for (std::size_t i0 = 0; i0 < rows; i0 += kBlock)
    for (std::size_t j0 = 0; j0 < cols; j0 += kBlock) {
      const std::size_t i1 = std::min(rows, i0 + kBlock), j1 = std::min(cols, j0 + kBlock);
      for (std::size_t i = i0; i < i1; ++i)
        for (std::size_t j = j0; j < j1; ++j) out[j * rows + i] = in[i * cols + j];
    }
}

/// C[m,n] (+)= A[m,k] * B[n,k]^T
template <class T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate = false) {
  std::vector<T> bt(k * n);
  transpose(b, bt.data(), n, k);
  gemm(a, bt.data(), c, m, k, n, accumulate);
}

/// C[m,n] (+)= A[k,m]^T * B[k,n]
template <class T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate = false) {
  gemm_strided(a, 1, m, b, c, m, k, n, accumulate);
}

/// Sum with eight interleaved partial accumulators (deterministic, vectorizable).
template <class T>
T sum(const T* x, std::size_t n) {
  T lanes[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (std::size_t l = 0; l < 8; ++l) lanes[l] += x[i + l];
  for (std::size_t l = 0; i < n; ++i, ++l) lanes[l] += x[i];
  return ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) +
         ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]));
}

template <class T>
T dot(const T* x, const T* y, std::size_t n) {
  T lanes[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (std::size_t l = 0; l < 8; ++l) lanes[l] = std::fma(x[i + l], y[i + l], lanes[l]);
  for (std::size_t l = 0; i < n; ++i, ++l) lanes[l] = std::fma(x[i], y[i], lanes[l]);
  return ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) +
         ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]));
}

/// exp for single precision: Cody-Waite range reduction plus a degree-6
/// polynomial, branch-free so loops over it vectorize. Relative error ~2e-7.
/// Double precision goes through std::exp.
inline float exp_approx(float x) {
  x = std::min(std::max(x, -87.0f), 88.0f);
  // round-to-nearest via the 1.5 * 2^23 shifter
  const float n = (x * 1.44269504088896341f + 12582912.0f) - 12582912.0f;
  float r = std::fma(n, -0.693359375f, x);
  r = std::fma(n, 2.12194440e-4f, r);
  float p = 1.9875691500e-4f;
  p = std::fma(p, r, 1.3981999507e-3f);
  p = std::fma(p, r, 8.3334519073e-3f);
  p = std::fma(p, r, 4.1665795894e-2f);
  p = std::fma(p, r, 1.6666665459e-1f);
  p = std::fma(p, r, 5.0000001201e-1f);
  p = std::fma(p * r, r, r) + 1.0f;
  const std::int32_t bits = (static_cast<std::int32_t>(n) + 127) << 23;
  return p * std::bit_cast<float>(bits);
}

template <class T>
inline T exp(T x) {
  if constexpr (std::is_same_v<T, float>) return exp_approx(x);
  else return std::exp(x);
}

template <class T>
inline T tanh(T x) {
  if constexpr (std::is_same_v<T, float>) {
    const float e = exp_approx(-2.0f * std::fabs(x));
    const float t = (1.0f - e) / (1.0f + e);
    return std::copysign(t, x);
  } else {
    return std::tanh(x);
  }
}

inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
inline constexpr double kGeluA = 0.044715;

/// Tanh-approximated GELU; also writes the tanh term for the backward pass.
template <class T>
void gelu(const T* x, T* y, T* t, std::size_t n) {
  const T c = T(kGeluC), a = T(kGeluA);
  for (std::size_t i = 0; i < n; ++i) {
    const T v = x[i];
    const T th = kernels::tanh<T>(c * (v + a * v * v * v));
    t[i] = th;
    y[i] = T(0.5) * v * (T(1) + th);
  }
}

template <class T>
void gelu_backward(const T* x, const T* t, const T* gy, T* gx, std::size_t n) {
  const T c = T(kGeluC), a = T(kGeluA);
  for (std::size_t i = 0; i < n; ++i) {
    const T v = x[i], th = t[i];
    const T d = T(0.5) * (T(1) + th) + T(0.5) * v * (T(1) - th * th) * c * (T(1) + T(3) * a * v * v);
    gx[i] += gy[i] * d;
  }
}

/// Layer norm over rows of length n. Stores mean and inverse std per row.
template <class T>
void layer_norm(const T* x, const T* gain, const T* bias, T* y, T* mean, T* rstd,
                std::size_t rows, std::size_t n, T eps) {
  std::vector<T> centered(n);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x + r * n;
    const T mu = kernels::sum(xr, n) / T(n);
    for (std::size_t i = 0; i < n; ++i) centered[i] = xr[i] - mu;
    const T var = kernels::dot(centered.data(), centered.data(), n) / T(n);
    const T inv = T(1) / std::sqrt(var + eps);
    T* yr = y + r * n;
    for (std::size_t i = 0; i < n; ++i) yr[i] = centered[i] * inv * gain[i] + bias[i];
    mean[r] = mu;
    rstd[r] = inv;
  }
}

/// Row softmax restricted to allowed entries (allowed == nullptr: all).
/// Disallowed entries come out exactly zero; this equals adding a large
/// negative bias to them whenever at least one entry is allowed. A row with no
/// allowed entry falls back to the plain softmax of the row.
template <class T>
void masked_softmax_row(const T* logits, const std::uint8_t* allowed, T* p, std::size_t n) {
  bool any = allowed == nullptr;
  for (std::size_t j = 0; !any && j < n; ++j) any = allowed[j] != 0;
  if (!any) allowed = nullptr;
  T mx = -std::numeric_limits<T>::infinity();
  for (std::size_t j = 0; j < n; ++j)
    if (!allowed || allowed[j]) mx = std::max(mx, logits[j]);
  T total = 0;
  for (std::size_t j = 0; j < n; ++j) {
    const T e = (!allowed || allowed[j]) ? kernels::exp<T>(logits[j] - mx) : T(0);
    p[j] = e;
    total += e;
  }
  const T inv = T(1) / total;
  for (std::size_t j = 0; j < n; ++j) p[j] *= inv;
}

}  // namespace cobit::kernels

namespace cobit::kernels {

/// One attention head: P = softmax_masked(scale * Q K^T), O = P V.
/// q: [lq, dh], kt: [dh, lk] (keys transposed), v: [lk, dh].
/// allowed_row(i, buf) fills buf[0..lk) with 0/1 for query row i.
template <class T, class AllowedRow>
void attention_head(const T* q, const T* kt, const T* v, T* p, T* o, std::size_t lq,
                    std::size_t lk, std::size_t dh, T scale, AllowedRow&& allowed_row) {
  std::vector<T> scores(lq * lk);
  gemm(q, kt, scores.data(), lq, dh, lk);
  std::vector<std::uint8_t> allowed(lk);
  for (std::size_t i = 0; i < lq; ++i) {
    T* row = scores.data() + i * lk;
    for (std::size_t j = 0; j < lk; ++j) row[j] *= scale;
    allowed_row(i, allowed.data());
    masked_softmax_row(row, allowed.data(), p + i * lk, lk);
  }
  gemm(p, v, o, lq, lk, dh);
}

}  // namespace cobit::kernels
