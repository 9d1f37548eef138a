#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "cobit/grad_suite.hpp"
#include "test_util.hpp"

using namespace cobit;
using cobit::testing::random_double;
using cobit::testing::random_float;

namespace {

/// c[i][j] = fma chain over p = 0..k-1, the order the kernels promise.
std::vector<float> naive_fma_gemm(const std::vector<float>& a, const std::vector<float>& b, std::size_t m,
                                  std::size_t k, std::size_t n) {
  std::vector<float> c(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      float acc = 0;
      for (std::size_t p = 0; p < k; ++p) acc = std::fma(a[i * k + p], b[p * n + j], acc);
      c[i * n + j] = acc;
    }
  return c;
}

}  // namespace

TEST(Kernels, GemmMatchesScalarFmaChainBitForBit) {
  Pcg32 rng(1, 2);
  for (auto [m, k, n] : std::vector<std::array<std::size_t, 3>>{
           {1, 1, 1}, {3, 5, 7}, {8, 48, 48}, {9, 257, 50}, {17, 300, 130}, {64, 32, 64}, {2, 600, 3}}) {
    std::vector<float> a(m * k), b(k * n), c(m * n);
    for (auto& x : a) x = float(rng.normal());
    for (auto& x : b) x = float(rng.normal());
    kernels::gemm(a.data(), b.data(), c.data(), m, k, n);
    const auto want = naive_fma_gemm(a, b, m, k, n);
    EXPECT_EQ(0, std::memcmp(c.data(), want.data(), c.size() * 4)) << m << "x" << k << "x" << n;
  }
}

TEST(Kernels, GemmRowIsIndependentOfBatch) {
  Pcg32 rng(3, 4);
  const std::size_t m = 13, k = 70, n = 37;
  std::vector<float> a(m * k), b(k * n), c(m * n), row(n);
  for (auto& x : a) x = float(rng.normal());
  for (auto& x : b) x = float(rng.normal());
  kernels::gemm(a.data(), b.data(), c.data(), m, k, n);
  for (std::size_t i = 0; i < m; ++i) {
    kernels::gemm(a.data() + i * k, b.data(), row.data(), 1, k, n);
    EXPECT_EQ(0, std::memcmp(row.data(), c.data() + i * n, n * 4)) << "row " << i;
  }
}

TEST(Kernels, ExpApproxRelativeError) {
  double worst = 0;
  for (double x = -80; x < 80; x += 0.0137) {
    const float xf = float(x);
    const double want = std::exp(double(xf));
    worst = std::max(worst, std::fabs(double(kernels::exp_approx(xf)) - want) / want);
  }
  EXPECT_LT(worst, 1e-6);
}

TEST(Ops, MatmulMatchesDoubleOracle) {
  Pcg32 rng(5, 6);
  const Tensor<double> a = random_double({2, 3, 4}, rng), b = random_double({2, 4, 5}, rng);
  const Tensor<double> c = matmul(a, b);
  ASSERT_EQ(c.shape(), (Shape{2, 3, 5}));
  for (std::size_t bt = 0; bt < 2; ++bt)
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 5; ++j) {
        long double s = 0;
        for (std::size_t p = 0; p < 4; ++p) s += (long double)a[(bt * 3 + i) * 4 + p] * b[(bt * 4 + p) * 5 + j];
        EXPECT_NEAR(c[(bt * 3 + i) * 5 + j], double(s), 1e-12);
      }
}

TEST(Ops, SoftmaxAndLayerNormMatchDirectFormulas) {
  Pcg32 rng(7, 8);
  const Tensor<double> x = random_double({3, 6}, rng);
  const Tensor<double> s = softmax(x, -1);
  const Tensor<double> g = Tensor<double>::full({6}, 1.5), b = Tensor<double>::full({6}, -0.25);
  const Tensor<double> ln = layer_norm(x, g, b);
  for (std::size_t r = 0; r < 3; ++r) {
    double z = 0, mu = 0, var = 0;
    for (std::size_t i = 0; i < 6; ++i) z += std::exp(x[r * 6 + i]), mu += x[r * 6 + i] / 6;
    for (std::size_t i = 0; i < 6; ++i) var += (x[r * 6 + i] - mu) * (x[r * 6 + i] - mu) / 6;
    for (std::size_t i = 0; i < 6; ++i) {
      EXPECT_NEAR(s[r * 6 + i], std::exp(x[r * 6 + i]) / z, 1e-14);
      EXPECT_NEAR(ln[r * 6 + i], 1.5 * (x[r * 6 + i] - mu) / std::sqrt(var + 1e-5) - 0.25, 1e-12);
    }
  }
}

TEST(Ops, GeluMatchesTanhFormula) {
  for (double v : {-4.0, -1.0, -0.1, 0.0, 0.3, 2.5}) {
    const double want = 0.5 * v * (1 + std::tanh(std::sqrt(2 / M_PI) * (v + 0.044715 * v * v * v)));
    EXPECT_NEAR(gelu(Tensor<double>::scalar(v)).item(), want, 1e-15);
    EXPECT_NEAR(gelu(Tensor<float>::scalar(float(v))).item(), want, 2e-6);
  }
}

TEST(Ops, CrossEntropyMatchesLogSumExp) {
  Pcg32 rng(9, 10);
  const Tensor<double> logits = random_double({4, 5}, rng);
  const std::vector<int> t{1, 4, 0, 2};
  double want = 0;
  for (std::size_t r = 0; r < 4; ++r) {
    double z = 0;
    for (std::size_t j = 0; j < 5; ++j) z += std::exp(logits[r * 5 + j]);
    want += (std::log(z) - logits[r * 5 + std::size_t(t[r])]) / 4;
  }
  EXPECT_NEAR(softmax_cross_entropy(logits, t).item(), want, 1e-12);
}

TEST(Ops, AttentionMatchesPerHeadOracle) {
  Pcg32 rng(11, 12);
  const std::size_t B = 2, Lq = 3, Lk = 4, D = 6, H = 2, dh = 3;
  const Tensor<double> q = random_double({B, Lq, D}, rng), k = random_double({B, Lk, D}, rng),
                       v = random_double({B, Lk, D}, rng);
  auto allowed = std::make_shared<std::vector<std::uint8_t>>(Lq * Lk, 1);
  (*allowed)[0 * Lk + 2] = 0;
  auto valid = std::make_shared<std::vector<std::uint8_t>>(B * Lk, 1);
  (*valid)[1 * Lk + 3] = 0;
  const Tensor<double> o = attention(q, k, v, H, allowed, valid);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t i = 0; i < Lq; ++i) {
        std::vector<double> w(Lk, 0);
        double z = 0;
        for (std::size_t j = 0; j < Lk; ++j) {
          if (!(*allowed)[i * Lk + j] || !(*valid)[b * Lk + j]) continue;
          double s = 0;
          for (std::size_t e = 0; e < dh; ++e) s += q[(b * Lq + i) * D + h * dh + e] * k[(b * Lk + j) * D + h * dh + e];
          w[j] = std::exp(s / std::sqrt(double(dh)));
          z += w[j];
        }
        for (std::size_t e = 0; e < dh; ++e) {
          double want = 0;
          for (std::size_t j = 0; j < Lk; ++j) want += w[j] / z * v[(b * Lk + j) * D + h * dh + e];
          EXPECT_NEAR(o[(b * Lq + i) * D + h * dh + e], want, 1e-12);
        }
      }
}

TEST(Autodiff, UnreachableInputsKeepNoGradient) {
  Pcg32 rng(13, 14);
  Tensor<double> a = random_double({3}, rng, true), b = random_double({3}, rng, true);
  Tape<double> tape;
  {
    TapeScope<double> scope(tape);
    const Tensor<double> l = sum(mul(a, a));
    (void)exp(b);
    tape.backward(l);
  }
  ASSERT_TRUE(a.has_grad());
  for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(a.grad()[i], 2 * a[i]);
  EXPECT_FALSE(b.has_grad());
}

TEST(Autodiff, SharedInputAccumulatesBothPaths) {
  Tensor<double> x = Tensor<double>::scalar(1.5, true);
  Tape<double> tape;
  {
    TapeScope<double> scope(tape);
    tape.backward(add(mul(x, x), scale(x, 3.0)));  // d/dx (x^2 + 3x) = 2x + 3
  }
  EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);
}

TEST(Autodiff, NoGradScopeRecordsNothing) {
  Tensor<double> x = Tensor<double>::scalar(2.0, true);
  Tape<double> tape;
  TapeScope<double> scope(tape);
  {
    NoGradScope<double> ng;
    (void)mul(x, x);
  }
  EXPECT_EQ(tape.size(), 0u);
}

TEST(Autodiff, NonFiniteForwardNamesTheOp) {
  const Tensor<float> big = Tensor<float>::scalar(1e30f);
  try {
    (void)mul(big, big);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("mul"), std::string::npos);
  }
}

TEST(Autodiff, ShapeErrorsAreReported) {
  Pcg32 rng(15, 16);
  EXPECT_THROW(matmul(random_double({2, 3}, rng), random_double({4, 2}, rng)), ShapeError);
  EXPECT_THROW(add(random_double({2, 3}, rng), random_double({2}, rng)), ShapeError);
  EXPECT_THROW(Tensor<double>({2, 2}, {1, 2, 3}), ShapeError);
}

TEST(GradCheck, EveryCaseOfTheSuitePasses) {
  for (const auto& c : run_grad_suite(1e-4, 64)) {
    EXPECT_LT(c.result.max_rel_error, 1e-3) << c.name << " worst " << c.result.worst;
    EXPECT_GT(c.result.checked, 0u) << c.name;
  }
}

TEST(GradCheck, DetectsAWrongGradient) {
  // exp's tape entry is right, so fake a wrong one: f(x) = x^2 computed as
  // mul(x, stop(x)) where the second factor carries no gradient.
  Tensor<double> x = Tensor<double>({2}, {0.7, -1.3}, true);
  auto f = [x] {
    Tensor<double> frozen = x.clone();
    return sum(mul(x, frozen));
  };
  const auto r = grad_check({{"x", x}}, f, 1e-4, 2);
  EXPECT_GT(r.max_rel_error, 0.4);  // analytic x vs true 2x
}
