#include <gtest/gtest.h>

#include "cobit/grad_suite.hpp"
#include "test_util.hpp"

using namespace cobit;
using cobit::testing::random_double;

namespace {

Tensor<double> log_tau(double tau) { return Tensor<double>::scalar(std::log(tau)); }

/// Symmetric InfoNCE summed term by term in long double.
long double contrastive_oracle(const Tensor<double>& x, const Tensor<double>& y, double tau) {
  const std::size_t n = x.dim(0), d = x.dim(1);
  auto normed = [&](const Tensor<double>& t) {
    std::vector<long double> out(n * d);
    for (std::size_t i = 0; i < n; ++i) {
      long double s = 0;
      for (std::size_t e = 0; e < d; ++e) s += (long double)t[i * d + e] * t[i * d + e];
      for (std::size_t e = 0; e < d; ++e) out[i * d + e] = t[i * d + e] / std::sqrt(s);
    }
    return out;
  };
  const auto a = normed(x), b = normed(y);
  std::vector<long double> s(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      long double dot = 0;
      for (std::size_t e = 0; e < d; ++e) dot += a[i * d + e] * b[j * d + e];
      s[i * n + j] = dot / tau;
    }
  long double rows = 0, cols = 0;
  for (std::size_t i = 0; i < n; ++i) {
    long double zr = 0, zc = 0;
    for (std::size_t j = 0; j < n; ++j) zr += std::exp(s[i * n + j]), zc += std::exp(s[j * n + i]);
    rows += std::log(zr) - s[i * n + i];
    cols += std::log(zc) - s[i * n + i];
  }
  return (rows + cols) / (2 * n);
}

struct Sample {
  RawImage image;
  TextTokenSeq enc, dec;
  ImageTokenGrid grid;
};

std::vector<Sample> samples(const ModelConfig& c, std::size_t n, std::uint64_t seed) {
  const CaptionGrammar g;
  const TextVocab vocab = build_text_vocab(g.enumerate());
  Pcg32 rng(seed, 3);
  std::vector<Sample> out;
  for (std::size_t i = 0; i < n; ++i) {
    ShapeScene s = generate_scene(rng);
    const std::string cap = caption_scene(s, g, rng);
    Sample smp;
    smp.image = RawImage(c.image_size, c.image_size);
    for (auto& p : smp.image.pixels) p = float(rng.uniform());
    smp.enc = encode_text(vocab, cap, true, c.max_text_len);
    smp.dec = encode_text(vocab, cap, false, c.max_text_len);
    smp.grid = ImageTokenGrid{c.grid(), std::vector<int>(c.grid() * c.grid())};
    for (int& id : smp.grid.ids) id = int(rng.below(std::uint32_t(c.codebook_size)));
    out.push_back(std::move(smp));
  }
  return out;
}

}  // namespace

TEST(Contrastive, IndistinguishablePairsGiveLogN) {
  // Every similarity equal: each softmax row is uniform over N = 4.
  const Tensor<double> e = Tensor<double>::full({4, 6}, 0.3);
  EXPECT_NEAR(contrastive_loss(e, e, log_tau(0.07)).item(), std::log(4.0), 1e-12);
}

TEST(Contrastive, SinglePairIsZero) {
  Pcg32 rng(1, 1);
  EXPECT_NEAR(contrastive_loss(random_double({1, 5}, rng), random_double({1, 5}, rng), log_tau(0.1)).item(), 0.0,
              1e-15);
}

TEST(Contrastive, MatchesDirectSumForEightPairs) {
  Pcg32 rng(2, 2);
  for (double tau : {0.07, 0.5, 1.0}) {
    const Tensor<double> x = random_double({8, 16}, rng), y = random_double({8, 16}, rng);
    EXPECT_NEAR(contrastive_loss(x, y, log_tau(tau)).item(), double(contrastive_oracle(x, y, tau)), 1e-11) << tau;
  }
}

TEST(Contrastive, SymmetricInItsArguments) {
  Pcg32 rng(3, 3);
  const Tensor<double> x = random_double({5, 7}, rng), y = random_double({5, 7}, rng);
  EXPECT_NEAR(contrastive_loss(x, y, log_tau(0.2)).item(), contrastive_loss(y, x, log_tau(0.2)).item(), 1e-13);
  EXPECT_THROW(contrastive_loss(x, random_double({4, 7}, rng), log_tau(0.2)), ShapeError);
}

TEST(Contrastive, AlignedPairsScoreBelowShuffledOnes) {
  Pcg32 rng(4, 4);
  const Tensor<double> x = random_double({6, 12}, rng);
  const Tensor<double> shuffled = concat(std::vector<Tensor<double>>{slice(x, 0, 1, 5), slice(x, 0, 0, 1)}, 0);
  EXPECT_LT(contrastive_loss(x, x, log_tau(0.07)).item(), 0.01);
  EXPECT_GT(contrastive_loss(x, shuffled, log_tau(0.07)).item(), std::log(6.0));
}

TEST(Objectives, ShiftedTargetsDropTheFirstIdAndMaskPad) {
  const TokenBatch tb = make_token_batch({TextTokenSeq{{kBos, 7, 8, kEos, kPad}}, TextTokenSeq{{kBos, 9, kEos, kPad, kPad}}});
  ASSERT_EQ(tb.length, 4u);
  const auto [targets, valid] = shifted_targets(tb);
  EXPECT_EQ(targets, (std::vector<int>{7, 8, kEos, kPad, 9, kEos, kPad, kPad}));
  EXPECT_EQ(valid, (std::vector<std::uint8_t>{1, 1, 1, 0, 1, 1, 0, 0}));
}

TEST(Objectives, UntrainedLossesSitNearUniform) {
  ModelConfig c = cobit::testing::small_run().model;
  c.text_vocab = 26;
  CobitModel<float> m(c);
  const auto s = samples(c, 4, 5);
  std::vector<const RawImage*> imgs;
  std::vector<const ImageTokenGrid*> grids;
  std::vector<TextTokenSeq> enc, dec;
  for (const auto& x : s) imgs.push_back(&x.image), grids.push_back(&x.grid), enc.push_back(x.enc), dec.push_back(x.dec);
  NoGradScope<float> ng;
  const Tensor<float> feats = m.image_encode(m.patch_tensor(imgs));
  const TokenBatch tb = make_token_batch(enc);
  const auto te = m.text_encode(tb);
  EXPECT_NEAR(i2t_loss(m, feats, decode_batch(dec)).item(), std::log(26.0), 0.15);
  EXPECT_NEAR(t2i_loss(m, te.features, tb.valid, grids).item(), std::log(double(c.codebook_size)), 0.15);
}

TEST(Objectives, BatchedLossesAverageThePerSampleLosses) {
  const ModelConfig c = tiny_model_config();
  CobitModel<double> m(c);
  const auto s = samples(c, 3, 6);
  NoGradScope<double> ng;
  std::vector<TextTokenSeq> dec;
  std::vector<TextTokenSeq> enc;
  std::vector<const RawImage*> imgs;
  std::vector<const ImageTokenGrid*> grids;
  double i2t_sum = 0, t2i_sum = 0;
  CfgConfig never{0.0};
  Pcg32 rng(1, 1);
  for (const auto& x : s) {
    dec.push_back(x.dec), enc.push_back(x.enc), imgs.push_back(&x.image), grids.push_back(&x.grid);
    i2t_sum += i2t_loss(m, x.image, x.dec).item();
    t2i_sum += t2i_loss(m, x.enc, x.grid, never, rng).item();
  }
  const TokenBatch tb = make_token_batch(enc);
  EXPECT_NEAR(i2t_loss(m, m.image_encode(m.patch_tensor(imgs)), decode_batch(dec)).item(), i2t_sum / 3, 1e-12);
  EXPECT_NEAR(t2i_loss(m, m.text_encode(tb).features, tb.valid, grids).item(), t2i_sum / 3, 1e-12);
}

TEST(Objectives, FullyMaskedConditioningIgnoresTheWords) {
  const ModelConfig c = tiny_model_config();
  CobitModel<double> m(c);
  const TextVocab v = build_text_vocab(CaptionGrammar{}.enumerate());
  const auto s = samples(c, 1, 7);
  const CfgConfig always{1.0};
  Pcg32 r1(1, 1), r2(2, 2);
  NoGradScope<double> ng;
  const double a = t2i_loss(m, encode_text(v, "the red square", true, c.max_text_len), s[0].grid, always, r1).item();
  const double b = t2i_loss(m, encode_text(v, "the blue cross", true, c.max_text_len), s[0].grid, always, r2).item();
  EXPECT_EQ(a, b);
  const CfgConfig never{0.0};
  const double u = t2i_loss(m, encode_text(v, "the red square", true, c.max_text_len), s[0].grid, never, r1).item();
  const double w = t2i_loss(m, encode_text(v, "the blue cross", true, c.max_text_len), s[0].grid, never, r2).item();
  EXPECT_NE(u, w);
}

TEST(Objectives, CombinedLossIsTheWeightedSum) {
  const LossWeights w{0.1, 0.2, 1.0};
  const auto con = Tensor<double>::scalar(1.5), i2t = Tensor<double>::scalar(2.0), t2i = Tensor<double>::scalar(4.0);
  EXPECT_NEAR(combined_loss<double>(w, con, i2t, t2i).item(), 0.15 + 0.4 + 4.0, 1e-15);
  EXPECT_NEAR(combined_loss<double>(LossWeights{0, 0.2, 1.0}, std::nullopt, i2t, t2i).item(), 4.4, 1e-15);
  EXPECT_THROW(combined_loss<double>(w, std::nullopt, i2t, t2i), Error);
  EXPECT_THROW(combined_loss<double>(LossWeights{0, 0, 0}, con, i2t, t2i), Error);
  EXPECT_THROW(combined_loss<double>(LossWeights{-1, 0, 1}, con, i2t, t2i), Error);
}

TEST(Objectives, CombinedGradientIsTheWeightedSumOfGradients) {
  const ModelConfig c = tiny_model_config();
  CobitModel<double> m(c);
  const auto s = samples(c, 3, 8);
  std::vector<const RawImage*> imgs;
  std::vector<const ImageTokenGrid*> grids;
  std::vector<TextTokenSeq> enc, dec;
  for (const auto& x : s) imgs.push_back(&x.image), grids.push_back(&x.grid), enc.push_back(x.enc), dec.push_back(x.dec);
  const LossWeights w{0.1, 0.2, 1.0};

  // which: 0 con, 1 i2t, 2 t2i, 3 combined.
  auto grads = [&](int which) {
    m.params().clear_grads();
    {
      Tape<double> tape;
      TapeScope<double> scope(tape);
      const Tensor<double> feats = m.image_encode(m.patch_tensor(imgs));
      const TokenBatch tb = make_token_batch(enc);
      const auto te = m.text_encode(tb);
      const Tensor<double> lc = contrastive_loss(m, feats, te.cls);
      const Tensor<double> li = i2t_loss(m, feats, decode_batch(dec));
      const Tensor<double> lt = t2i_loss(m, te.features, tb.valid, grids);
      const Tensor<double> pick[] = {lc, li, lt, combined_loss<double>(w, lc, li, lt)};
      tape.backward(pick[which]);
    }
    m.params().materialize_grads();
    std::map<std::string, std::vector<double>> out;
    for (const auto& [n, t] : m.params().tensors()) out[n].assign(t.grad().begin(), t.grad().end());
    return out;
  };
  const auto gc = grads(0), gi = grads(1), gt = grads(2), all = grads(3);
  std::size_t nonzero = 0;
  for (const auto& [n, g] : all)
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double want = 0.1 * gc.at(n)[i] + 0.2 * gi.at(n)[i] + 1.0 * gt.at(n)[i];
      EXPECT_NEAR(g[i], want, 1e-12 * (1 + std::fabs(want))) << n << "[" << i << "]";
      nonzero += g[i] != 0;
    }
  EXPECT_GT(nonzero, m.params().parameter_count() / 2);
}
