#pragma once

#include <cmath>
#include <optional>
#include <vector>

#include "cobit/model.hpp"

namespace cobit {

struct LossWeights {
  double con = 0.1;
  double i2t = 0.2;
  double t2i = 1.0;

  void validate() const {
    if (con < 0 || i2t < 0 || t2i < 0) throw Error("loss weights must be non-negative");
  }
};

struct CfgConfig {
  double mask_prob = 0.10;
  double alpha = 2.0;
  int null_id = kNull;

  void validate() const {
    if (!(mask_prob >= 0 && mask_prob <= 1)) throw Error("cfg mask probability must lie in [0, 1]");
  }
};

/// Symmetric InfoNCE over N pairs: logits = x y^T / tau with x, y the
/// l2-normalized inputs; the loss is the mean of the row-wise and column-wise
/// cross-entropies against the diagonal.
template <class T>
Tensor<T> contrastive_loss(const Tensor<T>& img_emb, const Tensor<T>& txt_emb, const Tensor<T>& log_tau) {
  if (img_emb.rank() != 2 || img_emb.shape() != txt_emb.shape())
    throw ShapeError("contrastive_loss: embeddings " + to_string(img_emb.shape()) + " and " +
                     to_string(txt_emb.shape()) + " must both be [N, D]");
  const std::size_t n = img_emb.dim(0);
  const Tensor<T> x = l2_normalize(img_emb, -1);
  const Tensor<T> y = l2_normalize(txt_emb, -1);
  const Tensor<T> inv_tau = exp(scale(log_tau, T(-1)));
  const Tensor<T> logits = mul(matmul(x, transpose(y, 0, 1)), inv_tau);
  std::vector<int> diag(n);
  for (std::size_t i = 0; i < n; ++i) diag[i] = static_cast<int>(i);
  const Tensor<T> rows = softmax_cross_entropy(logits, diag);
  const Tensor<T> cols = softmax_cross_entropy(transpose(logits, 0, 1), diag);
  return scale(add(rows, cols), T(0.5));
}

/// Pools image features and applies the contrastive loss against CLS features.
template <class T>
Tensor<T> contrastive_loss(const CobitModel<T>& m, const Tensor<T>& img_feats, const Tensor<T>& txt_cls) {
  return contrastive_loss(m.attention_pool(img_feats), txt_cls, m.head().log_tau);
}

/// Next-token targets for BOS-led decode inputs: ids shifted left, PAD at the
/// end; PAD targets are invalid.
inline std::pair<std::vector<int>, std::vector<std::uint8_t>> shifted_targets(const TokenBatch& tb) {
  std::vector<int> targets(tb.ids.size(), kPad);
  std::vector<std::uint8_t> valid(tb.ids.size(), 0);
  for (std::size_t b = 0; b < tb.batch; ++b)
    for (std::size_t t = 0; t + 1 < tb.length; ++t) {
      targets[b * tb.length + t] = tb.ids[b * tb.length + t + 1];
      valid[b * tb.length + t] = targets[b * tb.length + t] != kPad;
    }
  return {std::move(targets), std::move(valid)};
}

/// Caption likelihood given encoded images: per-sample mean NLL over
/// non-PAD targets, averaged over the batch. `dec` carries captions without
/// CLS.
template <class T>
Tensor<T> i2t_loss(const CobitModel<T>& m, const Tensor<T>& img_feats, const TokenBatch& dec) {
  const auto [targets, valid] = shifted_targets(dec);
  const Tensor<T> logits = m.decode_text_logits(m.text_decode_features(dec), img_feats);
  return grouped_cross_entropy(logits, targets, valid, dec.batch);
}

/// Image-token likelihood given encoded (possibly NULL-masked) captions.
template <class T>
Tensor<T> t2i_loss(const CobitModel<T>& m, const Tensor<T>& txt_feats, KeyMask txt_valid,
                   const std::vector<const ImageTokenGrid*>& grids) {
  std::vector<int> targets;
  for (const auto* g : grids) targets.insert(targets.end(), g->ids.begin(), g->ids.end());
  const Tensor<T> logits =
      m.decode_image_logits(m.image_decode_features(grids), txt_feats, std::move(txt_valid));
  return softmax_cross_entropy(logits, targets);
}

/// Decode-mode batch for captions without CLS, trimmed to the longest one.
/// Trimming drops only PAD columns, which neither attend nor are targets.
inline TokenBatch decode_batch(const std::vector<TextTokenSeq>& seqs) { return make_token_batch(seqs, true); }

/// Single-sample convenience form: image and caption (without CLS).
template <class T>
Tensor<T> i2t_loss(const CobitModel<T>& m, const RawImage& img, const TextTokenSeq& caption) {
  return i2t_loss(m, m.image_encode(m.patch_tensor({&img})), decode_batch({caption}));
}

/// Single-sample convenience form: caption (with CLS) and target tokens; the
/// caption is NULL-masked with probability cfg.mask_prob.
template <class T>
Tensor<T> t2i_loss(const CobitModel<T>& m, const TextTokenSeq& caption, const ImageTokenGrid& tokens,
                   const CfgConfig& cfg, Pcg32& rng) {
  const bool masked = rng.uniform() < cfg.mask_prob;
  const TokenBatch tb = make_token_batch({masked ? null_mask_caption(caption) : caption});
  const auto enc = m.text_encode(tb);
  return t2i_loss(m, enc.features, tb.valid, {&tokens});
}

/// lambda_con l_con + lambda_i2t l_i2t + lambda_t2i l_t2i. Terms with zero
/// weight are left out of the graph (they may be absent).
template <class T>
Tensor<T> combined_loss(const LossWeights& w, const std::optional<Tensor<T>>& con, const std::optional<Tensor<T>>& i2t,
                        const std::optional<Tensor<T>>& t2i) {
  w.validate();
  std::optional<Tensor<T>> total;
  auto term = [&](double weight, const std::optional<Tensor<T>>& l, const char* what) {
    if (weight == 0) return;
    if (!l) throw Error(std::string("combined_loss: ") + what + " has positive weight but was not computed");
    const Tensor<T> part = scale(*l, T(weight));
    total = total ? add(*total, part) : part;
  };
  term(w.con, con, "contrastive loss");
  term(w.i2t, i2t, "i2t loss");
  term(w.t2i, t2i, "t2i loss");
  if (!total) throw Error("combined_loss: every loss weight is zero");
  return *total;
}

}  // namespace cobit
