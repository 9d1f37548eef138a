#pragma once

// Finite-difference checks of every differentiable op and of the combined
// training loss on a small double-precision model.

#include <chrono>
#include <functional>
#include <string>
#include <vector>

#include "cobit/grad_check.hpp"
#include "cobit/objectives.hpp"
#include "cobit/ops.hpp"
#include "cobit/synthetic.hpp"

namespace cobit {

struct GradCase {
  std::string name;
  GradCheckResult result;
};

/// Tiny geometry for the end-to-end check: 8x8 images, 2x2 token grid.
inline ModelConfig tiny_model_config() {
  ModelConfig m;
  m.image_size = 8;
  m.patch_size = 4;
  m.codebook_size = 16;
  m.max_text_len = 12;
  m.dim = 8;
  m.heads = 2;
  m.ffn_mult = 2;
  m.image_layers = m.text_layers = m.decoder_layers = 1;
  m.conv_kernel = 3;
  m.init_std = 0.5;
  m.init_tau = 0.5;
  return m;
}

namespace detail {

inline Tensor<double> random_tensor(Shape s, Pcg32& rng, double scale = 1.0, double shift = 0.0) {
  std::vector<double> v(numel(s));
  for (auto& x : v) x = shift + scale * rng.normal();
  return Tensor<double>(std::move(s), std::move(v), true);
}

/// sum(out * r) for a fixed random r, so every output element matters.
inline Tensor<double> project_scalar(const Tensor<double>& out, std::uint64_t seed) {
  Pcg32 rng(seed, 0x51);
  std::vector<double> r(out.numel());
  for (auto& x : r) x = rng.normal();
  return sum(mul(out, Tensor<double>(out.shape(), std::move(r))));
}

}  // namespace detail

/// Runs every case with step h and `samples` coordinates each.
inline std::vector<GradCase> run_grad_suite(double h = 1e-4, std::size_t samples = 64) {
  using detail::project_scalar;
  using detail::random_tensor;
  using T = Tensor<double>;
  std::vector<GradCase> out;
  Pcg32 rng(2024, 0x6c);
  auto check = [&](const std::string& name, std::vector<NamedTensor> inputs, std::function<T()> f) {
    out.push_back({name, grad_check(inputs, f, h, samples, out.size() + 1)});
  };

  {
    T a = random_tensor({3, 4}, rng), b = random_tensor({4}, rng), c = random_tensor({3, 4}, rng);
    check("add", {{"a", a}, {"b", b}}, [=] { return project_scalar(add(a, b), 1); });
    check("mul", {{"a", a}, {"c", c}}, [=] { return project_scalar(mul(a, c), 2); });
    check("scale", {{"a", a}}, [=] { return project_scalar(scale(a, 1.7), 3); });
    check("exp", {{"a", a}}, [=] { return project_scalar(exp(a), 4); });
    check("gelu", {{"a", a}}, [=] { return project_scalar(gelu(a), 5); });
    check("softmax", {{"a", a}}, [=] { return project_scalar(softmax(a, -1), 6); });
    check("softmax_axis0", {{"a", a}}, [=] { return project_scalar(softmax(a, 0), 7); });
    check("reshape", {{"a", a}}, [=] { return project_scalar(reshape(a, {2, 6}), 8); });
    check("transpose", {{"a", a}}, [=] { return project_scalar(transpose(a, 0, 1), 9); });
    check("slice", {{"a", a}}, [=] { return project_scalar(slice(a, 1, 1, 2), 10); });
    check("concat", {{"a", a}, {"c", c}}, [=] { return project_scalar(concat(std::vector<T>{a, c}, 0), 11); });
    check("l2_normalize", {{"a", a}}, [=] { return project_scalar(l2_normalize(a, -1), 12); });
    check("sum", {{"a", a}}, [=] { return scale(sum(mul(a, a)), 0.5); });
    check("mean", {{"a", a}}, [=] { return mean(exp(a)); });
  }
  {
    T x = random_tensor({2, 3, 6}, rng), g = random_tensor({6}, rng, 0.3, 1.0), b = random_tensor({6}, rng, 0.3);
    check("layer_norm", {{"x", x}, {"gain", g}, {"bias", b}}, [=] { return project_scalar(layer_norm(x, g, b), 13); });
  }
  {
    T table = random_tensor({5, 3}, rng);
    check("embedding_lookup", {{"table", table}},
          [=] { return project_scalar(embedding_lookup(table, {4, 0, 4, 2}), 14); });
  }
  {
    T a = random_tensor({2, 3, 4}, rng), b = random_tensor({2, 4, 5}, rng), w = random_tensor({4, 5}, rng),
      bias = random_tensor({5}, rng);
    check("matmul", {{"a", a}, {"b", b}}, [=] { return project_scalar(matmul(a, b), 15); });
    check("linear", {{"x", a}, {"w", w}, {"b", bias}}, [=] { return project_scalar(linear(a, w, bias), 16); });
  }
  {
    T q = random_tensor({2, 4, 6}, rng), k = random_tensor({2, 5, 6}, rng), v = random_tensor({2, 5, 6}, rng);
    auto allowed = std::make_shared<std::vector<std::uint8_t>>(4 * 5, 1);
    (*allowed)[0 * 5 + 3] = (*allowed)[1 * 5 + 0] = (*allowed)[3 * 5 + 4] = 0;
    auto valid = std::make_shared<std::vector<std::uint8_t>>(2 * 5, 1);
    (*valid)[1 * 5 + 2] = 0;
    check("attention", {{"q", q}, {"k", k}, {"v", v}},
          [=] { return project_scalar(attention(q, k, v, 2, allowed, valid), 17); });
    T q1 = random_tensor({1, 1, 6}, rng);
    check("attention_shared_query", {{"q", q1}, {"k", k}, {"v", v}},
          [=] { return project_scalar(attention(q1, k, v, 3, nullptr, nullptr), 18); });
  }
  {
    T logits = random_tensor({6, 7}, rng);
    const std::vector<int> t{0, 6, 3, 3, 1, 2};
    check("softmax_cross_entropy", {{"logits", logits}}, [=] { return softmax_cross_entropy(logits, t); });
    check("masked_cross_entropy", {{"logits", logits}},
          [=] { return softmax_cross_entropy(logits, t, std::vector<std::uint8_t>{1, 0, 1, 1, 0, 1}); });
    check("grouped_cross_entropy", {{"logits", logits}},
          [=] { return grouped_cross_entropy(logits, t, std::vector<std::uint8_t>{1, 1, 0, 1, 0, 1}, 2); });
  }
  {
    T x = random_tensor({4, 5}, rng), y = random_tensor({4, 5}, rng), lt = random_tensor({1}, rng, 0.1, -1.0);
    check("contrastive_loss", {{"img", x}, {"txt", y}, {"log_tau", lt}}, [=] { return contrastive_loss(x, y, lt); });
  }

  // Combined loss through the whole model.
  {
    const ModelConfig mc = tiny_model_config();
    auto model = std::make_shared<CobitModel<double>>(mc);
    const CaptionGrammar g;
    const TextVocab vocab = build_text_vocab(g.enumerate());
    std::vector<RawImage> imgs;
    std::vector<TextTokenSeq> enc, dec, cond;
    std::vector<ImageTokenGrid> grids;
    Pcg32 data_rng(77, 0x3);
    for (std::size_t i = 0; i < 3; ++i) {
      RawImage img(mc.image_size, mc.image_size);
      for (auto& p : img.pixels) p = float(data_rng.uniform());
      imgs.push_back(img);
      const std::string cap = caption_scene(generate_scene(data_rng), g, data_rng);
      enc.push_back(encode_text(vocab, cap, true, mc.max_text_len));
      dec.push_back(encode_text(vocab, cap, false, mc.max_text_len));
      cond.push_back(i == 1 ? null_mask_caption(enc.back()) : enc.back());
      ImageTokenGrid grid{mc.grid(), {}};
      for (std::size_t t = 0; t < mc.grid() * mc.grid(); ++t) grid.ids.push_back(int(data_rng.below(16)));
      grids.push_back(grid);
    }
    auto loss = [=] {
      const CobitModel<double>& m = *model;
      std::vector<const RawImage*> ip;
      std::vector<const ImageTokenGrid*> gp;
      for (const auto& i : imgs) ip.push_back(&i);
      for (const auto& gr : grids) gp.push_back(&gr);
      const T feats = m.image_encode(m.patch_tensor(ip));
      const auto e = m.text_encode(make_token_batch(enc));
      const TokenBatch ctb = make_token_batch(cond);
      const T con = contrastive_loss(m, feats, e.cls);
      const T i2t = i2t_loss(m, feats, decode_batch(dec));
      const T t2i = t2i_loss(m, m.text_encode(ctb).features, ctb.valid, gp);
      return combined_loss<double>(LossWeights{}, con, i2t, t2i);
    };
    std::vector<NamedTensor> inputs;
    for (const auto& [name, t] : model->params().tensors()) inputs.push_back({name, t});
    out.push_back({"combined_loss", grad_check(inputs, loss, h, std::max<std::size_t>(samples, 256), 99)});
  }
  return out;
}

}  // namespace cobit
