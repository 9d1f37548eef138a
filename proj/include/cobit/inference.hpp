#pragma once

// Sampling, CFG, caption and image generation, reranking, zero-shot
// classification and retrieval.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "cobit/model.hpp"
#include "cobit/synthetic.hpp"

namespace cobit {

struct SamplerConfig {
  std::size_t top_k = 64;
  std::size_t num_samples = 16;
  std::uint64_t seed = 0;
  double alpha = 2.0;

  void validate(std::size_t vocab) const {
    if (top_k < 1 || top_k > vocab)
      throw Error("top_k " + std::to_string(top_k) + " outside [1, " + std::to_string(vocab) + "]");
    if (num_samples == 0) throw Error("num_samples must be positive");
  }
};

/// uncond + alpha (cond - uncond). alpha = 1 and alpha = 0 hand back the
/// corresponding branch unchanged, signed zeros included.
template <class T>
std::vector<T> cfg_interpolate(std::span<const T> cond, std::span<const T> uncond, double alpha) {
  if (cond.size() != uncond.size())
    throw ShapeError("cfg_interpolate: " + std::to_string(cond.size()) + " vs " + std::to_string(uncond.size()) +
                     " logits");
  if (alpha == 1.0) return {cond.begin(), cond.end()};
  if (alpha == 0.0) return {uncond.begin(), uncond.end()};
  std::vector<T> out(cond.size());
  const T a = T(alpha);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = uncond[i] + a * (cond[i] - uncond[i]);
  return out;
}

/// Samples among the k largest logits (ties to the lower id) from their
/// renormalized softmax. Consumes one uniform draw.
template <class T>
int top_k_sample(std::span<const T> logits, std::size_t k, Pcg32& rng) {
  if (k < 1 || k > logits.size())
    throw Error("top_k_sample: k=" + std::to_string(k) + " outside [1, " + std::to_string(logits.size()) + "]");
  std::vector<int> ids(logits.size());
  std::iota(ids.begin(), ids.end(), 0);
  auto before = [&](int a, int b) { return logits[a] > logits[b] || (logits[a] == logits[b] && a < b); };
  std::partial_sort(ids.begin(), ids.begin() + long(k), ids.end(), before);
  const double u = rng.uniform();
  if (k == 1) return ids[0];
  const double mx = double(logits[ids[0]]);
  std::vector<double> w(k);
  double total = 0;
  for (std::size_t i = 0; i < k; ++i) total += w[i] = std::exp(double(logits[ids[i]]) - mx);
  double run = 0;
  for (std::size_t i = 0; i < k; ++i) {
    run += w[i] / total;
    if (u < run) return ids[i];
  }
  return ids[k - 1];
}

template <class T>
int argmax_lowest(std::span<const T> x) {
  return int(std::max_element(x.begin(), x.end()) - x.begin());  // first maximum
}

// --- embeddings ------------------------------------------------------------

/// Pooled, l2-normalized image embeddings [N, D], computed in chunks.
template <class T>
Tensor<T> image_embeddings(const CobitModel<T>& m, const std::vector<const RawImage*>& images,
                           std::size_t chunk = 64) {
  NoGradScope<T> ng;
  std::vector<Tensor<T>> parts;
  for (std::size_t i = 0; i < images.size(); i += chunk) {
    std::vector<const RawImage*> part(images.begin() + long(i), images.begin() + long(std::min(images.size(), i + chunk)));
    parts.push_back(m.attention_pool(m.image_encode(m.patch_tensor(part))));
  }
  return l2_normalize(parts.size() == 1 ? parts[0] : concat(parts, 0), -1);
}

/// CLS embeddings of captions, l2-normalized [N, D].
template <class T>
Tensor<T> text_embeddings(const CobitModel<T>& m, const TextVocab& vocab, const std::vector<std::string>& texts,
                          std::size_t chunk = 128) {
  NoGradScope<T> ng;
  std::vector<Tensor<T>> parts;
  for (std::size_t i = 0; i < texts.size(); i += chunk) {
    std::vector<TextTokenSeq> seqs;
    for (std::size_t j = i; j < std::min(texts.size(), i + chunk); ++j)
      seqs.push_back(encode_text(vocab, texts[j], true, m.config().max_text_len));
    parts.push_back(m.text_encode(make_token_batch(seqs)).cls);
  }
  return l2_normalize(parts.size() == 1 ? parts[0] : concat(parts, 0), -1);
}

/// a [N, D] times b [M, D]^T as row-major N x M doubles.
template <class T>
std::vector<double> similarity(const Tensor<T>& a, const Tensor<T>& b) {
  const std::size_t n = a.dim(0), mm = b.dim(0), d = a.dim(1);
  if (b.dim(1) != d) throw ShapeError("similarity: embedding widths differ");
  std::vector<double> s(n * mm);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < mm; ++j) {
      double acc = 0;
      for (std::size_t e = 0; e < d; ++e) acc += double(a.values()[i * d + e]) * double(b.values()[j * d + e]);
      s[i * mm + j] = acc;
    }
  return s;
}

// --- classification, retrieval, reranking ------------------------------------

struct PromptTemplateSet {
  std::vector<std::string> templates{"a photo of a {class}", "the {class}"};

  void validate() const {
    if (templates.empty()) throw Error("prompt template set is empty");
    for (const auto& t : templates) {
      const auto p = t.find("{class}");
      if (p == std::string::npos || t.find("{class}", p + 1) != std::string::npos)
        throw Error("prompt template '" + t + "' must contain {class} exactly once");
    }
  }
  std::string fill(std::size_t t, const std::string& cls) const {
    std::string s = templates.at(t);
    return s.replace(s.find("{class}"), 7, cls);
  }
};

/// Per class: mean of the normalized prompt embeddings, renormalized. [C, D].
template <class T>
Tensor<T> class_embeddings(const CobitModel<T>& m, const TextVocab& vocab, const std::vector<std::string>& classes,
                           const PromptTemplateSet& prompts) {
  if (classes.empty()) throw Error("zero_shot_classify: no classes");
  prompts.validate();
  std::vector<std::string> texts;
  for (const auto& c : classes)
    for (std::size_t t = 0; t < prompts.templates.size(); ++t) texts.push_back(prompts.fill(t, c));
  const Tensor<T> e = text_embeddings(m, vocab, texts);
  const std::size_t nt = prompts.templates.size(), d = e.dim(1);
  std::vector<T> out(classes.size() * d);
  for (std::size_t c = 0; c < classes.size(); ++c)
    for (std::size_t e2 = 0; e2 < d; ++e2) {
      T acc = 0;
      for (std::size_t t = 0; t < nt; ++t) acc += e.values()[(c * nt + t) * d + e2];
      out[c * d + e2] = acc / T(nt);
    }
  NoGradScope<T> ng;
  return l2_normalize(Tensor<T>({classes.size(), d}, std::move(out)), -1);
}

/// Highest-scoring class per image embedding row; ties to the lowest id.
template <class T>
std::vector<std::size_t> classify_embeddings(const Tensor<T>& image_emb, const Tensor<T>& class_emb) {
  const auto s = similarity(image_emb, class_emb);
  const std::size_t c = class_emb.dim(0);
  std::vector<std::size_t> out(image_emb.dim(0));
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = std::size_t(std::max_element(s.begin() + long(i * c), s.begin() + long((i + 1) * c)) - (s.begin() + long(i * c)));
  return out;
}

template <class T>
std::size_t zero_shot_classify(const CobitModel<T>& m, const TextVocab& vocab, const RawImage& img,
                               const std::vector<std::string>& classes, const PromptTemplateSet& prompts) {
  return classify_embeddings(image_embeddings(m, {&img}), class_embeddings(m, vocab, classes, prompts))[0];
}

/// "{color} {shape}" for class shape * 4 + color.
inline std::vector<std::string> shape_color_classes() {
  std::vector<std::string> out;
  for (auto s : kShapeNames)
    for (auto c : kColorNames) out.push_back(std::string(c) + " " + s);
  return out;
}

struct RetrievalResult {
  std::vector<std::vector<std::size_t>> ranked;  // per query, gallery indices best first
  std::vector<std::size_t> first_hit;            // rank of the best-ranked true match

  /// Fraction of queries with a true match ranked < k.
  double recall_at(std::size_t k) const {
    if (first_hit.empty()) return 0;
    std::size_t hits = 0;
    for (auto r : first_hit) hits += r < k;
    return double(hits) / double(first_hit.size());
  }
};

/// Ranks the gallery for every query by cosine similarity (ties to the lower
/// index). `is_match(query, item)` is the ground truth.
template <class T>
RetrievalResult retrieve(const Tensor<T>& queries, const Tensor<T>& gallery,
                         const std::function<bool(std::size_t, std::size_t)>& is_match) {
  const std::size_t nq = queries.dim(0), ng = gallery.dim(0);
  if (nq == 0 || ng == 0) throw Error("retrieve: empty gallery");
  const auto s = similarity(queries, gallery);
  RetrievalResult r;
  for (std::size_t q = 0; q < nq; ++q) {
    std::vector<std::size_t> idx(ng);
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return s[q * ng + a] > s[q * ng + b]; });
    std::size_t hit = ng;
    for (std::size_t rank = 0; rank < ng; ++rank)
      if (is_match(q, idx[rank])) {
        hit = rank;
        break;
      }
    r.ranked.push_back(std::move(idx));
    r.first_hit.push_back(hit);
  }
  return r;
}

/// Index of the candidate with the largest x.y / tau against the caption.
template <class T>
std::size_t rerank_images(const CobitModel<T>& m, const TextVocab& vocab, const std::string& caption,
                          const std::vector<const RawImage*>& candidates) {
  if (candidates.empty()) throw Error("rerank_images: no candidates");
  const auto s = similarity(image_embeddings(m, candidates), text_embeddings(m, vocab, {caption}));
  const double inv_tau = 1.0 / double(m.temperature());
  std::size_t best = 0;
  for (std::size_t i = 1; i < s.size(); ++i)
    if (s[i] * inv_tau > s[best] * inv_tau) best = i;
  return best;
}

// --- image generation ------------------------------------------------------

struct GeneratedImage {
  ImageTokenGrid grid;
  RawImage image;
};

inline Pcg32 sample_rng(std::uint64_t seed, std::size_t sample) { return Pcg32(seed, 0x5a3e0000ull + sample); }

namespace detail {

template <class T>
struct CaptionConditions {
  typename CobitModel<T>::TextEncoding cond, uncond;
  KeyMask cond_valid, uncond_valid;
};

template <class T>
CaptionConditions<T> encode_conditions(const CobitModel<T>& m, const TextVocab& vocab, const std::string& caption) {
  const TextTokenSeq seq = encode_text(vocab, caption, true, m.config().max_text_len);
  const TokenBatch c = make_token_batch({seq}), u = make_token_batch({null_mask_caption(seq)});
  return {m.text_encode(c), m.text_encode(u), c.valid, u.valid};
}

template <class T>
std::vector<GeneratedImage> finish_images(const Codebook& cb, std::vector<ImageTokenGrid> grids) {
  std::vector<GeneratedImage> out;
  for (auto& g : grids) {
    RawImage img = dequantize(cb, g);
    out.push_back({std::move(g), std::move(img)});
  }
  return out;
}

}  // namespace detail

/// num_samples images for a caption. Each step takes cond (caption) and
/// uncond (NULL-masked caption) logits, mixes them with cfg_interpolate and
/// draws a token; sample i owns sample_rng(seed, i). The image unicoder pass
/// is shared by both branches since they see the same token prefix.
template <class T>
std::vector<GeneratedImage> generate_image(const CobitModel<T>& m, const TextVocab& vocab, const Codebook& cb,
                                           const std::string& caption, const SamplerConfig& s) {
  const ModelConfig& mc = m.config();
  s.validate(mc.codebook_size);
  if (cb.entries != mc.codebook_size) throw ShapeError("generate_image: codebook size differs from the model");
  NoGradScope<T> ng;
  const auto c = detail::encode_conditions(m, vocab, caption);
  const std::size_t S = s.num_samples, P = mc.grid() * mc.grid(), D = mc.dim, K = mc.codebook_size;
  const bool need_cond = s.alpha != 0.0, need_uncond = s.alpha != 1.0;
  IncrementalStack<T> unicoder(m.image().decode_stack, S, m.image().decode_mask);
  std::optional<IncrementalStack<T>> cond, uncond;
  if (need_cond) cond.emplace(m.decoder().image_stack, S, m.image().decode_mask, &c.cond.features, c.cond_valid);
  if (need_uncond)
    uncond.emplace(m.decoder().image_stack, S, m.image().decode_mask, &c.uncond.features, c.uncond_valid);
  std::vector<Pcg32> rngs;
  for (std::size_t i = 0; i < S; ++i) rngs.push_back(sample_rng(s.seed, i));

  const auto& tok = m.image().tok_embed.values();
  const auto& boi = m.image().boi.values();
  const auto& pos = m.image().dec_pos.values();
  const auto& hw = m.decoder().image_head_w.values();
  const auto& hb = m.decoder().image_head_b.values();
  std::vector<ImageTokenGrid> grids(S, ImageTokenGrid{mc.grid(), std::vector<int>(P, 0)});
  std::vector<T> x(S * D), lc(S * K), lu(S * K);
  for (std::size_t t = 0; t < P; ++t) {
    for (std::size_t i = 0; i < S; ++i) {
      const T* e = t == 0 ? boi.data() : tok.data() + std::size_t(grids[i].ids[t - 1]) * D;
      for (std::size_t j = 0; j < D; ++j) x[i * D + j] = e[j] + pos[t * D + j];
    }
    const auto h = unicoder.step(x);
    if (cond) kernels::linear(cond->step(h).data(), hw.data(), hb.data(), lc.data(), S, D, K);
    if (uncond) kernels::linear(uncond->step(h).data(), hw.data(), hb.data(), lu.data(), S, D, K);
    for (std::size_t i = 0; i < S; ++i) {
      std::span<const T> a(lc.data() + i * K, K), b(lu.data() + i * K, K);
      const auto mixed = cfg_interpolate(a, b, s.alpha);
      grids[i].ids[t] = top_k_sample(std::span<const T>(mixed), s.top_k, rngs[i]);
    }
  }
  return detail::finish_images<T>(cb, std::move(grids));
}

/// Reference path: re-runs the full decode over the whole prefix at every
/// step. Slow; the incremental path must match it token for token.
template <class T>
std::vector<GeneratedImage> generate_image_naive(const CobitModel<T>& m, const TextVocab& vocab, const Codebook& cb,
                                                 const std::string& caption, const SamplerConfig& s) {
  const ModelConfig& mc = m.config();
  s.validate(mc.codebook_size);
  NoGradScope<T> ng;
  const auto c = detail::encode_conditions(m, vocab, caption);
  const std::size_t P = mc.grid() * mc.grid(), K = mc.codebook_size;
  std::vector<ImageTokenGrid> grids;
  for (std::size_t i = 0; i < s.num_samples; ++i) {
    Pcg32 rng = sample_rng(s.seed, i);
    ImageTokenGrid g{mc.grid(), std::vector<int>(P, 0)};
    for (std::size_t t = 0; t < P; ++t) {
      const Tensor<T> feats = m.image_decode_features({&g});
      const Tensor<T> lc = m.decode_image_logits(feats, c.cond.features, c.cond_valid);
      const Tensor<T> lu = m.decode_image_logits(feats, c.uncond.features, c.uncond_valid);
      const auto mixed = cfg_interpolate(lc.values().subspan(t * K, K), lu.values().subspan(t * K, K), s.alpha);
      g.ids[t] = top_k_sample(std::span<const T>(mixed), s.top_k, rng);
    }
    grids.push_back(std::move(g));
  }
  return detail::finish_images<T>(cb, std::move(grids));
}

/// Best of the generated samples by self-reranking.
template <class T>
GeneratedImage generate_best_image(const CobitModel<T>& m, const TextVocab& vocab, const Codebook& cb,
                                   const std::string& caption, const SamplerConfig& s) {
  auto samples = generate_image(m, vocab, cb, caption, s);
  std::vector<const RawImage*> imgs;
  for (const auto& g : samples) imgs.push_back(&g.image);
  return std::move(samples[rerank_images(m, vocab, caption, imgs)]);
}

// --- captioning --------------------------------------------------------------

/// Token ids (BOS-led, EOS-terminated when emitted) decoded greedily for a
/// batch of images.
template <class T>
std::vector<TextTokenSeq> generate_caption_ids(const CobitModel<T>& m, const std::vector<const RawImage*>& images) {
  const ModelConfig& mc = m.config();
  NoGradScope<T> ng;
  const std::size_t B = images.size(), D = mc.dim, V = mc.text_vocab, L = mc.max_text_len;
  if (B == 0) return {};
  const Tensor<T> feats = m.image_encode(m.patch_tensor(images));
  const AttentionMask& mask = m.causal_mask(L);
  IncrementalStack<T> text(m.text().decode_stack, B, mask);
  IncrementalStack<T> dec(m.decoder().text_stack, B, mask, &feats);
  const auto& tok = m.text().tok_embed.values();
  const auto& pos = m.text().pos.values();
  const auto& hw = m.decoder().text_head_w.values();
  const auto& hb = m.decoder().text_head_b.values();
  std::vector<TextTokenSeq> out(B);
  std::vector<bool> done(B, false);
  for (auto& s : out) s.ids.push_back(kBos);
  std::vector<T> x(B * D), logits(B * V);
  for (std::size_t t = 0; t + 1 < L; ++t) {
    for (std::size_t b = 0; b < B; ++b) {
      const T* e = tok.data() + std::size_t(out[b].ids.back()) * D;
      for (std::size_t j = 0; j < D; ++j) x[b * D + j] = e[j] + pos[t * D + j];
    }
    kernels::linear(dec.step(text.step(x)).data(), hw.data(), hb.data(), logits.data(), B, D, V);
    bool all = true;
    for (std::size_t b = 0; b < B; ++b) {
      if (done[b]) continue;
      const int id = argmax_lowest(std::span<const T>(logits.data() + b * V, V));
      out[b].ids.push_back(id);
      done[b] = id == kEos;
      all = all && done[b];
    }
    if (all) break;
  }
  return out;
}

/// Reference path for one image: full decode of the prefix at every step.
template <class T>
TextTokenSeq generate_caption_ids_naive(const CobitModel<T>& m, const RawImage& img) {
  const ModelConfig& mc = m.config();
  NoGradScope<T> ng;
  const Tensor<T> feats = m.image_encode(m.patch_tensor({&img}));
  TextTokenSeq seq;
  seq.ids.push_back(kBos);
  while (seq.ids.size() < mc.max_text_len) {
    TokenBatch tb;
    tb.batch = 1;
    tb.length = seq.ids.size();
    tb.ids = seq.ids;
    const Tensor<T> logits = m.decode_text_logits(m.text_decode_features(tb), feats);
    const int id = argmax_lowest<T>(logits.values().subspan((tb.length - 1) * mc.text_vocab, mc.text_vocab));
    seq.ids.push_back(id);
    if (id == kEos) break;
  }
  return seq;
}

template <class T>
std::vector<std::string> generate_captions(const CobitModel<T>& m, const TextVocab& vocab,
                                           const std::vector<const RawImage*>& images, std::size_t chunk = 100) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < images.size(); i += chunk) {
    std::vector<const RawImage*> part(images.begin() + long(i), images.begin() + long(std::min(images.size(), i + chunk)));
    for (const auto& seq : generate_caption_ids(m, part)) out.push_back(decode_text(vocab, seq));
  }
  return out;
}

template <class T>
std::string generate_caption(const CobitModel<T>& m, const TextVocab& vocab, const RawImage& img) {
  return generate_captions(m, vocab, {&img})[0];
}

}  // namespace cobit
