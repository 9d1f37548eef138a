#pragma once

// Dataset assembly, the training loop, checkpoint/resume and evaluation.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "cobit/checkpoint.hpp"
#include "cobit/config.hpp"
#include "cobit/inference.hpp"
#include "cobit/model.hpp"
#include "cobit/objectives.hpp"
#include "cobit/optimizer.hpp"
#include "cobit/synthetic.hpp"

namespace cobit {

/// Everything fixed by the config besides the model: grammar, vocabulary and
/// the frozen codebook (rebuilt from the first training scenes, never stored).
struct World {
  CaptionGrammar grammar;
  TextVocab vocab;
  Codebook codebook;
  double codebook_mse = 0;
};

inline World make_world(const RunConfig& cfg) {
  World w;
  w.vocab = build_text_vocab(w.grammar.enumerate());
  std::vector<RawImage> images;
  for (const auto& e : make_examples(cfg.data.seed, cfg.data.codebook_images, w.grammar))
    images.push_back(render_scene(e.scene));
  auto trained = train_codebook(images, cfg.model.codebook_size, cfg.data.codebook_seed, cfg.model.patch_size,
                                cfg.data.codebook_iterations);
  w.codebook = std::move(trained.codebook);
  w.codebook_mse = trained.assignment_mse;
  return w;
}

/// Model geometry with the text vocabulary taken from the grammar.
inline ModelConfig model_config(const RunConfig& cfg, const World& w) {
  ModelConfig m = cfg.model;
  m.text_vocab = w.vocab.size();
  return m;
}

struct Dataset {
  std::vector<Example> examples;
  std::vector<RawImage> images;
  std::vector<ImageTokenGrid> grids;
  std::vector<TextTokenSeq> enc;  // with CLS
  std::vector<TextTokenSeq> dec;  // without CLS
  std::size_t size() const { return examples.size(); }
};

inline Dataset make_dataset(const World& w, const ModelConfig& m, std::uint64_t first_seed, std::size_t count) {
  Dataset d;
  d.examples = make_examples(first_seed, count, w.grammar);
  for (const auto& e : d.examples) {
    d.images.push_back(render_scene(e.scene));
    d.grids.push_back(quantize_image(w.codebook, d.images.back()));
    d.enc.push_back(encode_text(w.vocab, e.caption, true, m.max_text_len));
    d.dec.push_back(encode_text(w.vocab, e.caption, false, m.max_text_len));
  }
  return d;
}

inline Dataset training_set(const World& w, const RunConfig& cfg) {
  return make_dataset(w, model_config(cfg, w), cfg.data.seed, cfg.data.train_pairs);
}

inline Dataset heldout_set(const World& w, const RunConfig& cfg, std::size_t count) {
  return make_dataset(w, model_config(cfg, w), cfg.data.seed + cfg.data.eval_offset, count);
}

struct LossParts {
  std::optional<Tensor<float>> con, i2t, t2i;
};

namespace detail {

template <class F>
Tensor<float> named_loss(const char* what, F&& f) {
  Tensor<float> l;
  try {
    l = f();
  } catch (const NumericError& e) {
    throw NumericError(std::string(what) + ": " + e.what());
  }
  if (!std::isfinite(l.item())) throw NumericError(std::string(what) + " is not finite");
  return l;
}

}  // namespace detail

/// The losses with positive weight over batch `idx`. T2I conditions on the
/// NULL-masked caption where `masked[i]`.
inline LossParts compute_losses(const CobitModel<float>& m, const Dataset& d, const std::vector<std::size_t>& idx,
                                const std::vector<bool>& masked, const LossWeights& w) {
  std::vector<const RawImage*> imgs;
  std::vector<const ImageTokenGrid*> grids;
  std::vector<TextTokenSeq> enc, dec, cond;
  bool any_masked = false;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    imgs.push_back(&d.images[idx[i]]);
    grids.push_back(&d.grids[idx[i]]);
    enc.push_back(d.enc[idx[i]]);
    dec.push_back(d.dec[idx[i]]);
    cond.push_back(masked[i] ? null_mask_caption(d.enc[idx[i]]) : d.enc[idx[i]]);
    any_masked = any_masked || masked[i];
  }
  LossParts out;
  std::optional<Tensor<float>> img_feats;
  if (w.con > 0 || w.i2t > 0) img_feats = m.image_encode(m.patch_tensor(imgs));
  std::optional<TokenBatch> enc_tb;
  std::optional<typename CobitModel<float>::TextEncoding> enc_out;
  if (w.con > 0) {
    enc_tb = make_token_batch(enc);
    enc_out = m.text_encode(*enc_tb);
    out.con = detail::named_loss("contrastive loss", [&] { return contrastive_loss(m, *img_feats, enc_out->cls); });
  }
  if (w.i2t > 0) out.i2t = detail::named_loss("i2t loss", [&] { return i2t_loss(m, *img_feats, decode_batch(dec)); });
  if (w.t2i > 0) {
    out.t2i = detail::named_loss("t2i loss", [&] {
      if (enc_out && !any_masked) return t2i_loss(m, enc_out->features, enc_tb->valid, grids);
      const TokenBatch tb = make_token_batch(cond);
      return t2i_loss(m, m.text_encode(tb).features, tb.valid, grids);
    });
  }
  return out;
}

struct StepRecord {
  std::uint64_t step = 0;  // updates completed, this one included
  std::optional<double> con, i2t, t2i;
  double combined = 0;
  double lr = 0;
};

class Trainer {
 public:
  /// Fresh run.
  explicit Trainer(const RunConfig& cfg) : cfg_(cfg), rng_(cfg.data.seed, 0x7a11) { init(); }

  /// Resumed run; the config comes from the checkpoint.
  explicit Trainer(const Checkpoint& c) : cfg_(parse_config(c.config)) {
    init();
    restore_checkpoint(c, model_->params(), opt_, rng_);
  }

  const RunConfig& config() const { return cfg_; }
  const World& world() const { return world_; }
  const Dataset& data() const { return data_; }
  CobitModel<float>& model() { return *model_; }
  const CobitModel<float>& model() const { return *model_; }
  std::uint64_t steps_done() const { return opt_.step; }
  const Pcg32& rng() const { return rng_; }

  /// Called after backward, before the update, with every gradient present.
  std::function<void(const ParameterStore<float>&)> grad_hook;

  StepRecord step() {
    const std::size_t n = data_.size(), B = cfg_.batch_size;
    std::vector<std::size_t> idx;
    std::set<std::size_t> seen;
    while (idx.size() < B) {
      const std::size_t i = rng_.below(static_cast<std::uint32_t>(n));
      if (seen.insert(i).second) idx.push_back(i);
    }
    std::vector<bool> masked(B);
    for (std::size_t i = 0; i < B; ++i) masked[i] = rng_.uniform() < cfg_.cfg.mask_prob;

    const LossWeights w = cfg_.active_weights();
    StepRecord rec;
    rec.lr = opt_.schedule.at(opt_.step);
    Tape<float> tape;
    {
      TapeScope<float> scope(tape);
      const LossParts parts = compute_losses(*model_, data_, idx, masked, w);
      const Tensor<float> total = combined_loss(w, parts.con, parts.i2t, parts.t2i);
      if (parts.con) rec.con = parts.con->item();
      if (parts.i2t) rec.i2t = parts.i2t->item();
      if (parts.t2i) rec.t2i = parts.t2i->item();
      rec.combined = total.item();
      tape.backward(total);
    }
    tape.clear();
    model_->params().materialize_grads();
    if (grad_hook) grad_hook(model_->params());
    optimizer_step(model_->params(), opt_, rec.lr);
    model_->clamp_temperature();
    rec.step = opt_.step;
    return rec;
  }

  /// Steps until `until` updates are done (capped at total_steps).
  void run(std::uint64_t until, const std::function<void(const StepRecord&)>& on_step = {}) {
    until = std::min<std::uint64_t>(until, cfg_.schedule.total);
    while (opt_.step < until) {
      const StepRecord r = step();
      if (on_step) on_step(r);
    }
  }

  Checkpoint checkpoint() const { return make_checkpoint(cfg_, model_->params(), opt_, rng_); }
  void save(const std::string& path) const { write_checkpoint(checkpoint(), path); }

 private:
  void init() {
    cfg_.validate();
    world_ = make_world(cfg_);
    model_ = std::make_unique<CobitModel<float>>(model_config(cfg_, world_));
    data_ = training_set(world_, cfg_);
    opt_.hyper = cfg_.adam;
    opt_.schedule = cfg_.schedule;
  }

  RunConfig cfg_;
  World world_;
  std::unique_ptr<CobitModel<float>> model_;
  Dataset data_;
  OptimizerState<float> opt_;
  Pcg32 rng_{0, 0x7a11};
};

/// A model restored from a checkpoint for inference, without the training set.
struct LoadedModel {
  RunConfig config;
  World world;
  std::unique_ptr<CobitModel<float>> model;
};

inline LoadedModel load_model(const std::string& path) {
  const Checkpoint c = read_checkpoint(path);
  LoadedModel out;
  out.config = parse_config(c.config);
  out.config.validate();
  out.world = make_world(out.config);
  out.model = std::make_unique<CobitModel<float>>(model_config(out.config, out.world));
  OptimizerState<float> opt;
  Pcg32 rng;
  restore_checkpoint(c, out.model->params(), opt, rng);
  return out;
}

enum class LossKind { con, i2t, t2i };

inline LossKind parse_loss_kind(const std::string& s) {
  if (s == "con") return LossKind::con;
  if (s == "i2t") return LossKind::i2t;
  if (s == "t2i") return LossKind::t2i;
  throw Error("unknown loss '" + s + "' (expected con, i2t or t2i)");
}

inline void disable_loss(RunConfig& cfg, LossKind k) {
  (k == LossKind::con ? cfg.enable_con : k == LossKind::i2t ? cfg.enable_i2t : cfg.enable_t2i) = false;
}

/// Parameters that only the given loss reads: its head, plus decode-side
/// tensors that no other loss touches under the current sharing flags.
inline std::vector<std::string> exclusive_parameters(const CobitModel<float>& m, LossKind k) {
  const ModelConfig& c = m.config();
  std::vector<std::string> out;
  auto take = [&](const std::string& prefix) {
    for (auto& n : m.names_with_prefix(prefix))
      if (!m.params().is_alias(n)) out.push_back(n);
  };
  switch (k) {
    case LossKind::con:
      take("contrastive.");
      break;
    case LossKind::i2t:
      take("decoder.text_head.");
      if (!c.text_unicoder) take("text.decode_stack.");
      if (c.split_decoder) take("decoder.stack.");
      break;
    case LossKind::t2i:
      take("decoder.image_head.");
      take("image.tok_embed");
      take("image.boi");
      take("image.dec_pos");
      if (!c.image_unicoder) take("image.decode_stack.");
      if (c.split_decoder) take("decoder.image_stack.");
      break;
  }
  return out;
}

/// Line-oriented loss log: header, then one row per step. Disabled losses
/// are empty fields.
class MetricsLog {
 public:
  MetricsLog(const std::string& path, bool append) {
    const bool fresh = !append || !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
    out_.open(path, fresh ? std::ios::trunc : std::ios::app);
    if (!out_) throw Error("cannot write metrics file '" + path + "'");
    if (fresh) out_ << "step,l_con,l_i2t,l_t2i,combined\n";
  }
  void write(const StepRecord& r) {
    auto field = [](const std::optional<double>& v) {
      if (!v) return std::string();
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.9g", *v);
      return std::string(buf);
    };
    out_ << r.step << ',' << field(r.con) << ',' << field(r.i2t) << ',' << field(r.t2i) << ',' << field(r.combined)
         << '\n';
    out_.flush();
  }

 private:
  std::ofstream out_;
};

// --- evaluation ---------------------------------------------------------------

struct EvalMetrics {
  double zero_shot_accuracy = 0;
  double caption_accuracy = 0;  // captions containing the right color and shape word
  double recall_i2t_1 = 0, recall_i2t_5 = 0, recall_t2i_1 = 0, recall_t2i_5 = 0;
  double t2i_match = 0;
  double l_con = 0, l_i2t = 0, l_t2i = 0;
  std::size_t scenes = 0, retrieval_pairs = 0, t2i_prompts = 0;
};

struct EvalParts {
  bool zero_shot = true, captions = true, retrieval = true, t2i = true, losses = true;
};

/// Whether `caption` is one of the grammar's captions for `scene`.
inline bool describes(const CaptionGrammar& g, const std::string& caption, const ShapeScene& scene) {
  for (std::size_t t = 0; t < g.templates.size(); ++t)
    if (g.fill(t, scene) == caption) return true;
  return false;
}

inline bool caption_names(const std::string& caption, const ShapeScene& s) {
  bool color = false, shape = false;
  for (const auto& w : split_words(caption)) {
    color = color || w == name(s.color);
    shape = shape || w == name(s.shape);
  }
  return color && shape;
}

inline double eval_zero_shot(const CobitModel<float>& m, const World& w, const Dataset& d, std::size_t n) {
  std::vector<const RawImage*> imgs;
  for (std::size_t i = 0; i < n; ++i) imgs.push_back(&d.images[i]);
  const auto pred = classify_embeddings(image_embeddings(m, imgs),
                                        class_embeddings(m, w.vocab, shape_color_classes(), PromptTemplateSet{}));
  std::size_t ok = 0;
  for (std::size_t i = 0; i < n; ++i) ok += pred[i] == d.examples[i].scene.label();
  return double(ok) / double(n);
}

inline double eval_captions(const CobitModel<float>& m, const World& w, const Dataset& d, std::size_t n) {
  std::vector<const RawImage*> imgs;
  for (std::size_t i = 0; i < n; ++i) imgs.push_back(&d.images[i]);
  const auto caps = generate_captions(m, w.vocab, imgs);
  std::size_t ok = 0;
  for (std::size_t i = 0; i < n; ++i) ok += caption_names(caps[i], d.examples[i].scene);
  return double(ok) / double(n);
}

/// Image-to-text and text-to-image retrieval over the first n pairs. A text
/// matches an image when it is a grammar caption of that image's scene.
inline std::pair<RetrievalResult, RetrievalResult> eval_retrieval(const CobitModel<float>& m, const World& w,
                                                                   const Dataset& d, std::size_t n) {
  std::vector<const RawImage*> imgs;
  std::vector<std::string> caps;
  for (std::size_t i = 0; i < n; ++i) {
    imgs.push_back(&d.images[i]);
    caps.push_back(d.examples[i].caption);
  }
  const Tensor<float> ie = image_embeddings(m, imgs), te = text_embeddings(m, w.vocab, caps);
  auto match = [&](std::size_t img, std::size_t txt) { return describes(w.grammar, caps[txt], d.examples[img].scene); };
  return {retrieve(ie, te, [&](std::size_t q, std::size_t g) { return match(q, g); }),
          retrieve(te, ie, [&](std::size_t q, std::size_t g) { return match(g, q); })};
}

/// Fraction of prompts whose reranked best-of-N image renders the prompt's
/// (shape, color) according to classify_rendering.
inline double eval_t2i(const CobitModel<float>& m, const World& w, const RunConfig& cfg, const Dataset& d,
                       std::size_t n) {
  std::size_t ok = 0;
  for (std::size_t i = 0; i < n; ++i) {
    SamplerConfig s{cfg.eval.t2i_top_k, cfg.eval.t2i_samples, cfg.eval.seed * 1000003ull + i, cfg.cfg.alpha};
    const auto best = generate_best_image(m, w.vocab, w.codebook, d.examples[i].caption, s);
    const auto [shape, color] = classify_rendering(best.image);
    ok += shape == d.examples[i].scene.shape && color == d.examples[i].scene.color;
  }
  return double(ok) / double(n);
}

/// Mean per-batch loss values over the first n pairs, without CFG masking.
inline std::array<double, 3> eval_losses(const CobitModel<float>& m, const Dataset& d, std::size_t n,
                                         std::size_t batch) {
  NoGradScope<float> ng;
  std::array<double, 3> sum{};
  std::size_t batches = 0;
  for (std::size_t i = 0; i + batch <= n; i += batch, ++batches) {
    std::vector<std::size_t> idx(batch);
    std::iota(idx.begin(), idx.end(), i);
    const auto p = compute_losses(m, d, idx, std::vector<bool>(batch, false), LossWeights{1, 1, 1});
    sum[0] += p.con->item();
    sum[1] += p.i2t->item();
    sum[2] += p.t2i->item();
  }
  for (auto& s : sum) s /= double(std::max<std::size_t>(batches, 1));
  return sum;
}

/// Held-out evaluation; reads the model only.
inline EvalMetrics evaluate(const CobitModel<float>& m, const World& w, const RunConfig& cfg,
                            const EvalParts& parts = {}) {
  NoGradScope<float> ng;
  const auto& e = cfg.eval;
  const Dataset d = heldout_set(w, cfg, std::max({e.scenes, e.retrieval, e.t2i_prompts, cfg.batch_size}));
  EvalMetrics r;
  r.scenes = e.scenes;
  r.retrieval_pairs = e.retrieval;
  r.t2i_prompts = e.t2i_prompts;
  if (parts.zero_shot) r.zero_shot_accuracy = eval_zero_shot(m, w, d, e.scenes);
  if (parts.captions) r.caption_accuracy = eval_captions(m, w, d, e.scenes);
  if (parts.retrieval) {
    const auto [i2t, t2i] = eval_retrieval(m, w, d, e.retrieval);
    r.recall_i2t_1 = i2t.recall_at(1);
    r.recall_i2t_5 = i2t.recall_at(5);
    r.recall_t2i_1 = t2i.recall_at(1);
    r.recall_t2i_5 = t2i.recall_at(5);
  }
  if (parts.t2i) r.t2i_match = eval_t2i(m, w, cfg, d, e.t2i_prompts);
  if (parts.losses) {
    const auto l = eval_losses(m, d, std::max(e.retrieval, cfg.batch_size), cfg.batch_size);
    r.l_con = l[0];
    r.l_i2t = l[1];
    r.l_t2i = l[2];
  }
  return r;
}

inline std::string format_metrics(const EvalMetrics& r) {
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "zero_shot_accuracy=%.4f caption_accuracy=%.4f recall_i2t@1=%.4f recall_i2t@5=%.4f "
                "recall_t2i@1=%.4f recall_t2i@5=%.4f t2i_match=%.4f l_con=%.4f l_i2t=%.4f l_t2i=%.4f",
                r.zero_shot_accuracy, r.caption_accuracy, r.recall_i2t_1, r.recall_i2t_5, r.recall_t2i_1,
                r.recall_t2i_5, r.t2i_match, r.l_con, r.l_i2t, r.l_t2i);
  return buf;
}

}  // namespace cobit
