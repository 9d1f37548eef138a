#pragma once

// Image unicoder, text unicoder, cross-modal decoder and contrastive head.

#include <cmath>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "cobit/codebook.hpp"
#include "cobit/masks.hpp"
#include "cobit/tokenizer.hpp"
#include "cobit/transformer.hpp"

namespace cobit {

enum class Mode { Encode, Decode };

struct ModelConfig {
  std::size_t image_size = 32;
  std::size_t patch_size = 4;
  std::size_t codebook_size = 512;
  std::size_t text_vocab = 26;
  std::size_t max_text_len = kDefaultMaxTextLen;
  std::size_t dim = 128;
  std::size_t heads = 4;
  std::size_t ffn_mult = 4;
  std::size_t image_layers = 4;
  std::size_t text_layers = 4;
  std::size_t decoder_layers = 4;
  double dropout = 0;
  std::size_t conv_kernel = 5;
  bool text_encode_causal = true;
  bool image_unicoder = true;  // false: image decode mode gets its own stack
  bool text_unicoder = true;
  bool split_decoder = false;  // true: separate cross-modal stacks per direction
  double init_std = 0.02;
  double init_tau = 0.07;
  std::uint64_t init_seed = 1;

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t patch_dim() const { return patch_size * patch_size * 3; }
  StackConfig stack(std::size_t layers, bool cross = false) const {
    return StackConfig{layers, dim, heads, ffn_mult, dropout, cross};
  }
  void validate() const {
    if (patch_size == 0 || image_size % patch_size != 0)
      throw ShapeError("image size " + std::to_string(image_size) + " is not divisible by patch size " +
                       std::to_string(patch_size));
    if (codebook_size == 0 || text_vocab <= kReservedCount) throw ShapeError("vocabulary sizes are too small");
    if (max_text_len < 3) throw ShapeError("max_text_len must leave room for BOS, EOS and CLS");
    stack(1).validate();
  }
};

inline constexpr double kMinTau = 5e-3;
inline constexpr double kMaxTau = 1.0;

template <class T>
struct ImageUnicoder {
  Tensor<T> patch_w, patch_b, enc_pos, tok_embed, boi, dec_pos;
  StackParams<T> stack, decode_stack;
  AttentionMask encode_mask, decode_mask;
  std::size_t codebook_size = 0;
};

template <class T>
struct TextUnicoder {
  Tensor<T> tok_embed, pos;
  StackParams<T> stack, decode_stack;
  bool causal_encode = true;
};

template <class T>
struct CrossModalDecoder {
  StackParams<T> text_stack, image_stack;  // aliases of one stack unless split
  Tensor<T> text_head_w, text_head_b, image_head_w, image_head_b;
};

template <class T>
struct ContrastiveHead {
  Tensor<T> query;  // [1, 1, D]
  AttentionParams<T> attn;
  std::size_t heads = 4;
  Tensor<T> log_tau;  // [1]
};

/// Token ids of a batch, trimmed to a common length, with PAD validity.
struct TokenBatch {
  std::size_t batch = 0, length = 0;
  std::vector<int> ids;  // batch x length
  KeyMask valid;         // id != PAD
};

inline TokenBatch make_token_batch(const std::vector<TextTokenSeq>& seqs, bool trim = true) {
  if (seqs.empty()) throw ShapeError("empty text batch");
  TokenBatch tb;
  tb.batch = seqs.size();
  std::size_t full = seqs[0].ids.size();
  for (const auto& s : seqs)
    if (s.ids.size() != full) throw ShapeError("text batch sequences differ in length");
  tb.length = 1;
  if (trim)
    for (const auto& s : seqs) tb.length = std::max(tb.length, s.length());
  else
    tb.length = full;
  auto valid = std::make_shared<std::vector<std::uint8_t>>(tb.batch * tb.length);
  tb.ids.resize(tb.batch * tb.length);
  for (std::size_t b = 0; b < tb.batch; ++b)
    for (std::size_t t = 0; t < tb.length; ++t) {
      const int id = t < seqs[b].ids.size() ? seqs[b].ids[t] : kPad;
      tb.ids[b * tb.length + t] = id;
      (*valid)[b * tb.length + t] = id != kPad;
    }
  tb.valid = std::move(valid);
  return tb;
}

/// The whole model over one parameter store.
template <class T>
class CobitModel {
 public:
  explicit CobitModel(const ModelConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    Pcg32 rng(cfg.init_seed, 0x1417);
    const std::size_t d = cfg.dim, g = cfg.grid(), P = g * g, K = cfg.codebook_size, V = cfg.text_vocab;
    auto normal = [&](const std::string& n, Shape s) { return params_.add_normal(n, std::move(s), cfg.init_std, rng); };
    auto zeros = [&](const std::string& n, Shape s) { return params_.add_constant(n, std::move(s), T(0)); };

    image_.patch_w = normal("image.patch_proj.w", {cfg.patch_dim(), d});
    image_.patch_b = zeros("image.patch_proj.b", {d});
    image_.enc_pos = normal("image.enc_pos", {P, d});
    image_.tok_embed = normal("image.tok_embed", {K, d});
    image_.boi = normal("image.boi", {1, d});
    image_.dec_pos = normal("image.dec_pos", {P, d});
    image_.stack = register_stack(params_, "image.stack", cfg.stack(cfg.image_layers), rng, cfg.init_std);
    image_.decode_stack = cfg.image_unicoder
                              ? alias_stack(params_, "image.decode_stack", "image.stack", cfg.stack(cfg.image_layers))
                              : register_stack(params_, "image.decode_stack", cfg.stack(cfg.image_layers), rng, cfg.init_std);
    image_.encode_mask = make_bidirectional(P);
    image_.decode_mask = make_conv_shaped(g, cfg.conv_kernel);
    image_.codebook_size = K;

    text_.tok_embed = normal("text.tok_embed", {V, d});
    text_.pos = normal("text.pos", {cfg.max_text_len, d});
    text_.stack = register_stack(params_, "text.stack", cfg.stack(cfg.text_layers), rng, cfg.init_std);
    text_.decode_stack = cfg.text_unicoder
                             ? alias_stack(params_, "text.decode_stack", "text.stack", cfg.stack(cfg.text_layers))
                             : register_stack(params_, "text.decode_stack", cfg.stack(cfg.text_layers), rng, cfg.init_std);
    text_.causal_encode = cfg.text_encode_causal;

    decoder_.text_stack = register_stack(params_, "decoder.stack", cfg.stack(cfg.decoder_layers, true), rng, cfg.init_std);
    decoder_.image_stack =
        cfg.split_decoder
            ? register_stack(params_, "decoder.image_stack", cfg.stack(cfg.decoder_layers, true), rng, cfg.init_std)
            : alias_stack(params_, "decoder.image_stack", "decoder.stack", cfg.stack(cfg.decoder_layers, true));
    decoder_.text_head_w = normal("decoder.text_head.w", {d, V});
    decoder_.text_head_b = zeros("decoder.text_head.b", {V});
    decoder_.image_head_w = normal("decoder.image_head.w", {d, K});
    decoder_.image_head_b = zeros("decoder.image_head.b", {K});

    head_.query = normal("contrastive.query", {1, 1, d});
    detail::ParamSource<T> src{params_, "contrastive", std::nullopt, &rng, cfg.init_std, &head_names_};
    head_.attn = detail::make_attention(src, "pool", d);
    head_.heads = cfg.heads;
    head_.log_tau = params_.add_constant("contrastive.log_tau", {1}, T(std::log(cfg.init_tau)));
  }

  CobitModel(const CobitModel&) = delete;
  CobitModel& operator=(const CobitModel&) = delete;

  const ModelConfig& config() const { return cfg_; }
  ParameterStore<T>& params() { return params_; }
  const ParameterStore<T>& params() const { return params_; }
  const ImageUnicoder<T>& image() const { return image_; }
  const TextUnicoder<T>& text() const { return text_; }
  const CrossModalDecoder<T>& decoder() const { return decoder_; }
  const ContrastiveHead<T>& head() const { return head_; }

  const AttentionMask& causal_mask(std::size_t length) const {
    auto it = causal_.find(length);
    if (it == causal_.end()) it = causal_.emplace(length, make_causal(length)).first;
    return it->second;
  }
  const AttentionMask& bidirectional_mask(std::size_t length) const {
    auto it = bidir_.find(length);
    if (it == bidir_.end()) it = bidir_.emplace(length, make_bidirectional(length)).first;
    return it->second;
  }

  /// Keeps tau = exp(log_tau) inside [kMinTau, kMaxTau].
  void clamp_temperature() {
    auto v = head_.log_tau.mutable_values();
    v[0] = std::clamp(v[0], T(std::log(kMinTau)), T(std::log(kMaxTau)));
  }
  T temperature() const { return std::exp(head_.log_tau.values()[0]); }

  // --- unicoders -----------------------------------------------------------

  /// patches: [B, P, patch_dim] -> features [B, P, D] (bidirectional).
  Tensor<T> image_encode(const Tensor<T>& patches) const {
    const std::size_t P = cfg_.grid() * cfg_.grid();
    if (patches.rank() != 3 || patches.dim(1) != P || patches.dim(2) != cfg_.patch_dim())
      throw ShapeError("image_encode: expected patches [B, " + std::to_string(P) + ", " +
                       std::to_string(cfg_.patch_dim()) + "], got " + to_string(patches.shape()));
    Tensor<T> x = add(linear(patches, image_.patch_w, image_.patch_b), image_.enc_pos);
    return stack_forward(image_.stack, x, &image_.encode_mask);
  }

  /// Patch tensor [B, P, patch_dim] for a list of images.
  Tensor<T> patch_tensor(const std::vector<const RawImage*>& images) const {
    const std::size_t P = cfg_.grid() * cfg_.grid(), pd = cfg_.patch_dim();
    std::vector<T> v;
    v.reserve(images.size() * P * pd);
    for (const RawImage* img : images) {
      if (img->height != cfg_.image_size || img->width != cfg_.image_size)
        throw ShapeError("image is " + std::to_string(img->height) + "x" + std::to_string(img->width) + ", expected " +
                         std::to_string(cfg_.image_size) + "x" + std::to_string(cfg_.image_size));
      for (float f : patchify(*img, cfg_.patch_size)) v.push_back(T(f));
    }
    return Tensor<T>({images.size(), P, pd}, std::move(v));
  }

  Tensor<T> image_encode(const RawImage& img) const {
    return reshape(image_encode(patch_tensor({&img})), {cfg_.grid() * cfg_.grid(), cfg_.dim});
  }

  /// Embedding table for decode inputs: codebook entries, then BOI at row K.
  Tensor<T> image_input_table() const { return concat(std::vector<Tensor<T>>{image_.tok_embed, image_.boi}, 0); }
  int boi_id() const { return static_cast<int>(cfg_.codebook_size); }

  /// Token grids -> decode-mode features [B, g^2, D]; position t sees tokens < t.
  Tensor<T> image_decode_features(const std::vector<const ImageTokenGrid*>& grids) const {
    const std::size_t P = cfg_.grid() * cfg_.grid();
    std::vector<int> ids;
    ids.reserve(grids.size() * P);
    for (const auto* g : grids) {
      if (g->ids.size() != P) throw ShapeError("image_decode_features: grid does not have " + std::to_string(P) + " tokens");
      ids.push_back(boi_id());
      for (std::size_t t = 0; t + 1 < P; ++t) {
        const int id = g->ids[t];
        if (id < 0 || static_cast<std::size_t>(id) >= cfg_.codebook_size)
          throw ShapeError("image token " + std::to_string(id) + " outside [0, " + std::to_string(cfg_.codebook_size) + ")");
        ids.push_back(id);
      }
      if (g->ids[P - 1] < 0 || static_cast<std::size_t>(g->ids[P - 1]) >= cfg_.codebook_size)
        throw ShapeError("image token outside the codebook");
    }
    Tensor<T> x = reshape(embedding_lookup(image_input_table(), ids), {grids.size(), P, cfg_.dim});
    x = add(x, image_.dec_pos);
    return stack_forward(image_.decode_stack, x, &image_.decode_mask);
  }

  struct TextEncoding {
    Tensor<T> features;  // [B, L, D]
    Tensor<T> cls;       // [B, D]
  };

  Tensor<T> text_embed(const TokenBatch& tb) const {
    if (tb.length > cfg_.max_text_len) throw ShapeError("text longer than max_text_len");
    Tensor<T> x = reshape(embedding_lookup(text_.tok_embed, tb.ids), {tb.batch, tb.length, cfg_.dim});
    return add(x, slice(text_.pos, 0, 0, tb.length));
  }

  /// Encode mode: causal (or bidirectional) self-attention with PAD keys
  /// masked; the CLS feature is the global text embedding.
  TextEncoding text_encode(const TokenBatch& tb) const {
    std::vector<int> cls_rows;
    for (std::size_t b = 0; b < tb.batch; ++b) {
      std::size_t p = tb.length;
      for (std::size_t t = 0; t < tb.length; ++t)
        if (tb.ids[b * tb.length + t] == kCls) p = t;
      if (p == tb.length) throw ShapeError("text_encode: sequence " + std::to_string(b) + " has no CLS token");
      cls_rows.push_back(static_cast<int>(b * tb.length + p));
    }
    const AttentionMask& mask = text_.causal_encode ? causal_mask(tb.length) : bidirectional_mask(tb.length);
    TextEncoding out;
    out.features = stack_forward(text_.stack, text_embed(tb), &mask, tb.valid);
    out.cls = embedding_lookup(reshape(out.features, {tb.batch * tb.length, cfg_.dim}), cls_rows);
    return out;
  }

  /// Decode mode over BOS-led sequences (the sequence itself is the
  /// right-shifted input; position t predicts id t+1). Causal mask.
  Tensor<T> text_decode_features(const TokenBatch& tb) const {
    return stack_forward(text_.decode_stack, text_embed(tb), &causal_mask(tb.length));
  }

  // --- cross-modal decoder -------------------------------------------------

  Tensor<T> decode_text_logits(const Tensor<T>& text_ar, const Tensor<T>& img_enc) const {
    const std::size_t L = text_ar.dim(text_ar.rank() - 2);
    const Tensor<T> h = stack_forward(decoder_.text_stack, text_ar, &causal_mask(L), nullptr, &img_enc);
    return linear(h, decoder_.text_head_w, decoder_.text_head_b);
  }

  Tensor<T> decode_image_logits(const Tensor<T>& img_ar, const Tensor<T>& txt_enc, KeyMask txt_valid) const {
    const Tensor<T> h = stack_forward(decoder_.image_stack, img_ar, &image_.decode_mask, nullptr, &txt_enc,
                                      std::move(txt_valid));
    return linear(h, decoder_.image_head_w, decoder_.image_head_b);
  }

  // --- contrastive head ----------------------------------------------------

  /// Single learnable query attending over feats [B, P, D] -> [B, D].
  Tensor<T> attention_pool(const Tensor<T>& feats) const {
    const bool flat = feats.rank() == 2;
    const Tensor<T> f = flat ? reshape(feats, {1, feats.dim(0), feats.dim(1)}) : feats;
    const Tensor<T> o = multi_head_attention(head_.query, f, head_.attn, head_.heads, nullptr);
    return reshape(o, flat ? Shape{cfg_.dim} : Shape{f.dim(0), cfg_.dim});
  }

  /// Names of every parameter that each module reads, aliases included.
  std::vector<std::string> names_with_prefix(const std::string& prefix) const {
    std::vector<std::string> out;
    for (const auto& [n, t] : params_.tensors())
      if (n.rfind(prefix, 0) == 0) out.push_back(n);
    for (const auto& [a, c] : params_.aliases())
      if (a.rfind(prefix, 0) == 0) out.push_back(a);
    return out;
  }

 private:
  ModelConfig cfg_;
  ParameterStore<T> params_;
  ImageUnicoder<T> image_;
  TextUnicoder<T> text_;
  CrossModalDecoder<T> decoder_;
  ContrastiveHead<T> head_;
  std::vector<std::string> head_names_;
  mutable std::map<std::size_t, AttentionMask> causal_, bidir_;
};

/// Replaces every word id with NULL, keeping control tokens.
inline TextTokenSeq null_mask_caption(TextTokenSeq seq) {
  for (int& id : seq.ids)
    if (!TextVocab::is_reserved(id)) id = kNull;
  return seq;
}

}  // namespace cobit
