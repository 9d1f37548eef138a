#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace cobit;
using cobit::testing::bit_equal;
using cobit::testing::random_double;
using cobit::testing::random_float;

namespace {

ModelConfig small_model() {
  ModelConfig c = cobit::testing::small_run().model;
  c.text_vocab = 26;
  c.init_std = 0.2;
  return c;
}

/// Scalars in one transformer stack, counted tensor by tensor.
std::size_t stack_scalars(std::size_t layers, std::size_t d, std::size_t f, bool cross) {
  const std::size_t attn = 4 * (d * d + d);
  std::size_t layer = 2 * d + attn + 2 * d + (d * f + f) + (f * d + d);
  if (cross) layer += 2 * d + attn;
  return layers * layer + 2 * d;
}

double max_grad(const ParameterStore<float>& p, const std::string& name) {
  const Tensor<float> t = p.get(name);
  double m = 0;
  for (float g : t.grad()) m = std::max(m, double(std::fabs(g)));
  return m;
}

/// Runs backward on one loss term of a two-sample batch.
void backward_single_loss(CobitModel<float>& m, const char* which) {
  const CaptionGrammar g;
  const TextVocab vocab = build_text_vocab(g.enumerate());
  Pcg32 rng(9, 9);
  std::vector<RawImage> imgs;
  std::vector<TextTokenSeq> enc, dec;
  std::vector<ImageTokenGrid> grids;
  for (int i = 0; i < 2; ++i) {
    const ShapeScene s = generate_scene(rng);
    imgs.push_back(render_scene(s));
    const std::string cap = caption_scene(s, g, rng);
    enc.push_back(encode_text(vocab, cap, true, m.config().max_text_len));
    dec.push_back(encode_text(vocab, cap, false, m.config().max_text_len));
    ImageTokenGrid grid{m.config().grid(), std::vector<int>(m.config().grid() * m.config().grid())};
    for (int& id : grid.ids) id = int(rng.below(std::uint32_t(m.config().codebook_size)));
    grids.push_back(grid);
  }
  m.params().clear_grads();
  Tape<float> tape;
  TapeScope<float> scope(tape);
  Tensor<float> loss;
  if (std::string(which) == "i2t") {
    loss = i2t_loss(m, m.image_encode(m.patch_tensor({&imgs[0], &imgs[1]})), decode_batch(dec));
  } else {
    const TokenBatch tb = make_token_batch(enc);
    loss = t2i_loss(m, m.text_encode(tb).features, tb.valid, {&grids[0], &grids[1]});
  }
  tape.backward(loss);
}

}  // namespace

TEST(Model, DefaultParameterCountFromFirstPrinciples) {
  const ModelConfig c;
  const std::size_t d = c.dim, f = d * c.ffn_mult, P = c.grid() * c.grid(), K = c.codebook_size, V = c.text_vocab;
  const std::size_t image = c.patch_dim() * d + d + P * d + K * d + d + P * d + stack_scalars(c.image_layers, d, f, false);
  const std::size_t text = V * d + c.max_text_len * d + stack_scalars(c.text_layers, d, f, false);
  const std::size_t decoder = stack_scalars(c.decoder_layers, d, f, true) + d * V + V + d * K + K;
  const std::size_t head = d + 4 * (d * d + d) + 1;
  CobitModel<float> m(c);
  EXPECT_EQ(m.params().parameter_count(), image + text + decoder + head);
  EXPECT_EQ(m.params().parameter_count(), 2880667u);
}

TEST(Model, UnicodersShareOneStackPerModality) {
  const ModelConfig c = small_model();
  CobitModel<float> shared(c);
  const auto& p = shared.params();
  for (const char* alias : {"image.decode_stack.layer0.attn.wq", "text.decode_stack.layer0.ffn.w1",
                            "decoder.image_stack.layer0.cross.wk"}) {
    EXPECT_TRUE(p.is_alias(alias)) << alias;
  }
  EXPECT_TRUE(p.get("image.decode_stack.layer0.attn.wq").same_storage(p.get("image.stack.layer0.attn.wq")));
  EXPECT_TRUE(shared.image().decode_stack.layers[0].w1.same_storage(shared.image().stack.layers[0].w1));
  EXPECT_TRUE(shared.text().decode_stack.layers[0].w1.same_storage(shared.text().stack.layers[0].w1));

  const std::size_t f = c.dim * c.ffn_mult;
  auto count_with = [&](auto&& tweak) {
    ModelConfig v = c;
    tweak(v);
    return CobitModel<float>(v).params().parameter_count();
  };
  const std::size_t base = p.parameter_count();
  EXPECT_EQ(count_with([](ModelConfig& v) { v.image_unicoder = false; }),
            base + stack_scalars(c.image_layers, c.dim, f, false));
  EXPECT_EQ(count_with([](ModelConfig& v) { v.text_unicoder = false; }),
            base + stack_scalars(c.text_layers, c.dim, f, false));
  EXPECT_EQ(count_with([](ModelConfig& v) { v.split_decoder = true; }),
            base + stack_scalars(c.decoder_layers, c.dim, f, true));

  ModelConfig sep = c;
  sep.image_unicoder = false;
  CobitModel<float> separate(sep);
  EXPECT_FALSE(separate.params().is_alias("image.decode_stack.layer0.attn.wq"));
}

TEST(Model, SharedStackLearnsFromBothModes) {
  // T2I only touches the image stack through decode mode; with a unicoder
  // that is the same stack the encoder uses.
  ModelConfig c = small_model();
  CobitModel<float> shared(c);
  backward_single_loss(shared, "t2i");
  EXPECT_GT(max_grad(shared.params(), "image.stack.layer0.attn.wq"), 0);
  backward_single_loss(shared, "i2t");
  EXPECT_GT(max_grad(shared.params(), "text.stack.layer0.attn.wq"), 0);

  c.image_unicoder = c.text_unicoder = false;
  CobitModel<float> separate(c);
  backward_single_loss(separate, "t2i");
  EXPECT_EQ(max_grad(separate.params(), "image.stack.layer0.attn.wq"), 0);
  EXPECT_GT(max_grad(separate.params(), "image.decode_stack.layer0.attn.wq"), 0);
  backward_single_loss(separate, "i2t");
  EXPECT_EQ(max_grad(separate.params(), "text.stack.layer0.attn.wq"), 0);
  EXPECT_GT(max_grad(separate.params(), "text.decode_stack.layer0.attn.wq"), 0);
}

TEST(Model, InitialisationIsSeeded) {
  ModelConfig c = small_model();
  CobitModel<float> a(c), b(c);
  c.init_seed = 2;
  CobitModel<float> other(c);
  EXPECT_TRUE(bit_equal(a.params().get("text.stack.layer0.ffn.w2").values(),
                        b.params().get("text.stack.layer0.ffn.w2").values()));
  EXPECT_FALSE(bit_equal(a.params().get("text.stack.layer0.ffn.w2").values(),
                         other.params().get("text.stack.layer0.ffn.w2").values()));
  EXPECT_NEAR(a.temperature(), 0.07, 1e-6);
}

TEST(Transformer, IncrementalDecodingEqualsFullPassBitForBit) {
  Pcg32 rng(1, 1);
  ParameterStore<float> store;
  const std::size_t D = 32, B = 3, Lk = 5;
  const StackParams<float> plain = register_stack(store, "plain", StackConfig{2, D, 4, 2, 0, false}, rng, 0.2);
  const StackParams<float> cross = register_stack(store, "cross", StackConfig{2, D, 4, 2, 0, true}, rng, 0.2);
  auto valid = std::make_shared<std::vector<std::uint8_t>>(B * Lk, 1);
  (*valid)[1 * Lk + 4] = (*valid)[2 * Lk + 3] = (*valid)[2 * Lk + 4] = 0;
  const Tensor<float> kv = random_float({B, Lk, D}, rng);

  for (const AttentionMask& mask : {make_causal(9), make_conv_shaped(3, 3)}) {
    const std::size_t L = mask.length;
    const Tensor<float> x = random_float({B, L, D}, rng);
    for (const bool with_cross : {false, true}) {
      const StackParams<float>& s = with_cross ? cross : plain;
      const Tensor<float> full =
          with_cross ? stack_forward(s, x, &mask, nullptr, &kv, valid) : stack_forward(s, x, &mask);
      IncrementalStack<float> inc(s, B, mask, with_cross ? &kv : nullptr, with_cross ? valid : nullptr);
      for (std::size_t t = 0; t < L; ++t) {
        std::vector<float> in(B * D);
        for (std::size_t b = 0; b < B; ++b)
          std::copy_n(x.values().data() + (b * L + t) * D, D, in.data() + b * D);
        const std::vector<float> out = inc.step(in);
        for (std::size_t b = 0; b < B; ++b)
          EXPECT_TRUE(bit_equal(std::span<const float>(out.data() + b * D, D),
                                full.values().subspan((b * L + t) * D, D)))
              << "pos " << t << " row " << b << " cross " << with_cross;
      }
      EXPECT_THROW(inc.step(std::vector<float>(B * D)), ShapeError);
    }
  }
}

TEST(Transformer, IncrementalRowsCanShareOneCrossContext) {
  Pcg32 rng(2, 2);
  ParameterStore<float> store;
  const std::size_t D = 16, B = 2, L = 6;
  const StackParams<float> s = register_stack(store, "c", StackConfig{1, D, 2, 2, 0, true}, rng, 0.3);
  const Tensor<float> kv = random_float({1, 4, D}, rng), x = random_float({B, L, D}, rng);
  const AttentionMask mask = make_causal(L);
  IncrementalStack<float> inc(s, B, mask, &kv);
  std::vector<std::vector<float>> steps;
  for (std::size_t t = 0; t < L; ++t) {
    std::vector<float> in(B * D);
    for (std::size_t b = 0; b < B; ++b) std::copy_n(x.values().data() + (b * L + t) * D, D, in.data() + b * D);
    steps.push_back(inc.step(in));
  }
  for (std::size_t b = 0; b < B; ++b) {
    const Tensor<float> row = slice(x, 0, b, 1);
    const Tensor<float> full = stack_forward(s, row, &mask, nullptr, &kv);
    for (std::size_t t = 0; t < L; ++t)
      EXPECT_TRUE(bit_equal(std::span<const float>(steps[t].data() + b * D, D), full.values().subspan(t * D, D)));
  }
}

TEST(Transformer, CrossAttentionConfigurationIsChecked) {
  Pcg32 rng(3, 3);
  ParameterStore<float> store;
  const StackParams<float> plain = register_stack(store, "p", StackConfig{1, 8, 2, 2, 0, false}, rng);
  const StackParams<float> cross = register_stack(store, "c", StackConfig{1, 8, 2, 2, 0, true}, rng);
  const Tensor<float> x = random_float({1, 3, 8}, rng);
  const AttentionMask m = make_causal(3);
  EXPECT_THROW(stack_forward(plain, x, &m, nullptr, &x), ShapeError);
  EXPECT_THROW(stack_forward(cross, x, &m), ShapeError);
  EXPECT_THROW(register_stack(store, "bad", StackConfig{1, 10, 3, 2, 0, false}, rng), ShapeError);
  EXPECT_THROW(register_stack(store, "p", StackConfig{1, 8, 2, 2, 0, false}, rng), Error);
}

TEST(Unicoder, AttentionPoolOverOneKeyIsTheValuePath) {
  ModelConfig c = small_model();
  CobitModel<double> m(c);
  Pcg32 rng(4, 4);
  const Tensor<double> f = random_double({1, 1, c.dim}, rng);
  const auto& a = m.head().attn;
  const Tensor<double> want = linear(linear(f, a.wv, a.bv), a.wo, a.bo);
  const Tensor<double> got = m.attention_pool(f);
  ASSERT_EQ(got.shape(), (Shape{1, c.dim}));
  for (std::size_t i = 0; i < c.dim; ++i) EXPECT_NEAR(got[i], want[i], 1e-12);
}

TEST(Unicoder, AttentionPoolIgnoresDuplicatedFeatures) {
  ModelConfig c = small_model();
  CobitModel<double> m(c);
  Pcg32 rng(5, 5);
  const Tensor<double> f = random_double({2, 3, c.dim}, rng);
  const Tensor<double> twice = concat(std::vector<Tensor<double>>{f, f}, 1);
  const Tensor<double> a = m.attention_pool(f), b = m.attention_pool(twice);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}

TEST(Unicoder, InputsAreValidated) {
  const ModelConfig c = small_model();
  CobitModel<float> m(c);
  const RawImage wrong(16, 16);
  EXPECT_THROW(m.patch_tensor({&wrong}), ShapeError);
  ImageTokenGrid g{c.grid(), std::vector<int>(c.grid() * c.grid(), 0)};
  g.ids[3] = int(c.codebook_size);
  EXPECT_THROW(m.image_decode_features({&g}), ShapeError);
  TextTokenSeq no_cls{{kBos, kReservedCount, kEos}};
  EXPECT_THROW(m.text_encode(make_token_batch({no_cls})), ShapeError);
  TextTokenSeq long_seq{std::vector<int>(c.max_text_len + 1, kReservedCount)};
  EXPECT_THROW(m.text_decode_features(make_token_batch({long_seq})), ShapeError);
  ModelConfig bad = c;
  bad.patch_size = 5;
  EXPECT_THROW(CobitModel<float>{bad}, ShapeError);
}

TEST(Unicoder, NullMaskKeepsControlTokensAndLength) {
  const TextVocab v = build_text_vocab(CaptionGrammar{}.enumerate());
  const TextTokenSeq s = encode_text(v, "the blue cross", true, 10);
  const TextTokenSeq n = null_mask_caption(s);
  EXPECT_EQ(n.ids, (std::vector<int>{kBos, kNull, kNull, kNull, kEos, kCls, kPad, kPad, kPad, kPad}));
  EXPECT_EQ(n.length(), s.length());
}

TEST(CrossModalDecoder, LogitShapesAndPaddedKeysAreIgnored) {
  const ModelConfig c = small_model();
  CobitModel<float> m(c);
  Pcg32 rng(6, 6);
  ImageTokenGrid g{c.grid(), std::vector<int>(c.grid() * c.grid())};
  for (int& id : g.ids) id = int(rng.below(std::uint32_t(c.codebook_size)));
  const TextTokenSeq a{{kBos, 7, 8, kEos, kCls, kPad, kPad}};
  TokenBatch ta = make_token_batch({a}, false), tb = make_token_batch({a}, false);
  tb.ids = {kBos, 7, 8, kEos, kCls, 9, 10};  // same validity mask, different PAD-slot ids
  const auto ea = m.text_encode(ta), eb = m.text_encode(tb);
  const Tensor<float> feats = m.image_decode_features({&g});
  const Tensor<float> la = m.decode_image_logits(feats, ea.features, ta.valid);
  const Tensor<float> lb = m.decode_image_logits(feats, eb.features, tb.valid);
  EXPECT_EQ(la.shape(), (Shape{1, c.grid() * c.grid(), c.codebook_size}));
  EXPECT_TRUE(bit_equal(la.values(), lb.values()));
  const RawImage scene = render_scene(ShapeScene{});
  const Tensor<float> img = m.image_encode(m.patch_tensor({&scene}));
  EXPECT_EQ(m.decode_text_logits(m.text_decode_features(ta), img).shape(), (Shape{1, 7, c.text_vocab}));
}
