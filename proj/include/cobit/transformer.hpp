#pragma once

// Pre-LN transformer stacks (optionally with cross-attention) and a cached
// single-position decoder that reproduces the full forward pass bit for bit.

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "cobit/masks.hpp"
#include "cobit/ops.hpp"
#include "cobit/parameters.hpp"

namespace cobit {

/// B x L key validity (1 = attendable).
using KeyMask = std::shared_ptr<const std::vector<std::uint8_t>>;

struct StackConfig {
  std::size_t layers = 4;
  std::size_t dim = 128;
  std::size_t heads = 4;
  std::size_t ffn_mult = 4;
  double dropout = 0;
  bool cross = false;

  void validate() const {
    if (dim == 0 || heads == 0 || dim % heads != 0)
      throw ShapeError("stack width " + std::to_string(dim) + " is not divisible by " + std::to_string(heads) +
                       " heads");
    if (ffn_mult == 0) throw ShapeError("ffn multiplier must be positive");
    if (dropout != 0) throw Error("dropout is not supported; set it to 0");
  }
  /// Physical scalar count of one stack with this configuration.
  std::size_t parameter_count() const {
    const std::size_t attn = 4 * dim * dim + 4 * dim;
    const std::size_t ffn = 2 * dim * dim * ffn_mult + dim * ffn_mult + dim;
    const std::size_t per_layer = attn + ffn + 4 * dim + (cross ? attn + 2 * dim : 0);
    return layers * per_layer + 2 * dim;
  }
};

template <class T>
struct AttentionParams {
  Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
};

template <class T>
struct LayerParams {
  Tensor<T> ln1_g, ln1_b;
  AttentionParams<T> self;
  Tensor<T> lnx_g, lnx_b;  // cross-attention only
  AttentionParams<T> cross;
  Tensor<T> ln2_g, ln2_b;
  Tensor<T> w1, b1, w2, b2;
};

template <class T>
struct StackParams {
  StackConfig cfg;
  std::vector<LayerParams<T>> layers;
  Tensor<T> lnf_g, lnf_b;
  std::vector<std::string> names;  // every parameter name used, in registration order
};

namespace detail {

/// Resolves parameter names either by creating tensors or by aliasing an
/// existing prefix.
template <class T>
struct ParamSource {
  ParameterStore<T>& store;
  std::string prefix;
  std::optional<std::string> alias_of;
  Pcg32* rng;
  double stddev;
  std::vector<std::string>* names;

  Tensor<T> normal(const std::string& leaf, Shape shape) {
    const std::string full = prefix + "." + leaf;
    names->push_back(full);
    if (alias_of) return store.alias(full, *alias_of + "." + leaf);
    return store.add_normal(full, std::move(shape), stddev, *rng);
  }
  Tensor<T> constant(const std::string& leaf, Shape shape, T v) {
    const std::string full = prefix + "." + leaf;
    names->push_back(full);
    if (alias_of) return store.alias(full, *alias_of + "." + leaf);
    return store.add_constant(full, std::move(shape), v);
  }
};

template <class T>
AttentionParams<T> make_attention(ParamSource<T>& src, const std::string& p, std::size_t d) {
  AttentionParams<T> a;
  a.wq = src.normal(p + ".wq", {d, d});
  a.bq = src.constant(p + ".bq", {d}, T(0));
  a.wk = src.normal(p + ".wk", {d, d});
  a.bk = src.constant(p + ".bk", {d}, T(0));
  a.wv = src.normal(p + ".wv", {d, d});
  a.bv = src.constant(p + ".bv", {d}, T(0));
  a.wo = src.normal(p + ".wo", {d, d});
  a.bo = src.constant(p + ".bo", {d}, T(0));
  return a;
}

template <class T>
StackParams<T> make_stack(ParamSource<T>& src, const StackConfig& cfg) {
  cfg.validate();
  StackParams<T> s;
  s.cfg = cfg;
  src.names = &s.names;
  const std::size_t d = cfg.dim, f = cfg.dim * cfg.ffn_mult;
  for (std::size_t i = 0; i < cfg.layers; ++i) {
    const std::string l = "layer" + std::to_string(i);
    LayerParams<T> lp;
    lp.ln1_g = src.constant(l + ".ln1.gain", {d}, T(1));
    lp.ln1_b = src.constant(l + ".ln1.bias", {d}, T(0));
    lp.self = make_attention(src, l + ".attn", d);
    if (cfg.cross) {
      lp.lnx_g = src.constant(l + ".ln_cross.gain", {d}, T(1));
      lp.lnx_b = src.constant(l + ".ln_cross.bias", {d}, T(0));
      lp.cross = make_attention(src, l + ".cross", d);
    }
    lp.ln2_g = src.constant(l + ".ln2.gain", {d}, T(1));
    lp.ln2_b = src.constant(l + ".ln2.bias", {d}, T(0));
    lp.w1 = src.normal(l + ".ffn.w1", {d, f});
    lp.b1 = src.constant(l + ".ffn.b1", {f}, T(0));
    lp.w2 = src.normal(l + ".ffn.w2", {f, d});
    lp.b2 = src.constant(l + ".ffn.b2", {d}, T(0));
    s.layers.push_back(std::move(lp));
  }
  s.lnf_g = src.constant("final_ln.gain", {d}, T(1));
  s.lnf_b = src.constant("final_ln.bias", {d}, T(0));
  return s;
}

}  // namespace detail

/// Registers a fresh stack under `prefix` (weights N(0, stddev^2), biases 0,
/// layer-norm gains 1).
template <class T>
StackParams<T> register_stack(ParameterStore<T>& store, const std::string& prefix, const StackConfig& cfg,
                              Pcg32& rng, double stddev = 0.02) {
  detail::ParamSource<T> src{store, prefix, std::nullopt, &rng, stddev, nullptr};
  return detail::make_stack(src, cfg);
}

/// Registers `prefix` as aliases of the stack already stored under `target`.
template <class T>
StackParams<T> alias_stack(ParameterStore<T>& store, const std::string& prefix, const std::string& target,
                           const StackConfig& cfg) {
  detail::ParamSource<T> src{store, prefix, target, nullptr, 0, nullptr};
  return detail::make_stack(src, cfg);
}

/// Projects queries from q_in and keys/values from kv_in, attends per head and
/// applies the output projection. q_in: [B or 1, Lq, D], kv_in: [B, Lk, D].
template <class T>
Tensor<T> multi_head_attention(const Tensor<T>& q_in, const Tensor<T>& kv_in, const AttentionParams<T>& p,
                               std::size_t heads, const AttentionMask* mask, KeyMask key_valid = nullptr) {
  if (mask && (mask->length != q_in.dim(q_in.rank() - 2) || mask->length != kv_in.dim(kv_in.rank() - 2)))
    throw ShapeError("multi_head_attention: mask of length " + std::to_string(mask->length) + " for queries " +
                     to_string(q_in.shape()) + " and keys " + to_string(kv_in.shape()));
  const Tensor<T> q = linear(q_in, p.wq, p.bq);
  const Tensor<T> k = linear(kv_in, p.wk, p.bk);
  const Tensor<T> v = linear(kv_in, p.wv, p.bv);
  const Tensor<T> o = attention(q, k, v, heads, mask ? mask->bits : nullptr, std::move(key_valid));
  return linear(o, p.wo, p.bo);
}

/// Per layer: x += SelfAttn(LN(x)); [x += CrossAttn(LN(x), cross_kv)];
/// x += FFN(LN(x)); then a final LN. x: [B, L, D] or [L, D].
template <class T>
Tensor<T> stack_forward(const StackParams<T>& s, const Tensor<T>& x_in, const AttentionMask* mask,
                        KeyMask key_valid = nullptr, const Tensor<T>* cross_kv = nullptr,
                        KeyMask cross_valid = nullptr) {
  if (cross_kv && !s.cfg.cross) throw ShapeError("stack_forward: cross features given to a stack without cross-attention");
  if (!cross_kv && s.cfg.cross) throw ShapeError("stack_forward: cross-attention stack needs cross features");
  const bool flat = x_in.rank() == 2;
  Tensor<T> x = flat ? reshape(x_in, {1, x_in.dim(0), x_in.dim(1)}) : x_in;
  if (x.rank() != 3 || x.dim(2) != s.cfg.dim)
    throw ShapeError("stack_forward: expected [B, L, " + std::to_string(s.cfg.dim) + "], got " + to_string(x_in.shape()));
  Tensor<T> ckv;
  if (cross_kv) ckv = cross_kv->rank() == 2 ? reshape(*cross_kv, {1, cross_kv->dim(0), cross_kv->dim(1)}) : *cross_kv;
  for (const auto& l : s.layers) {
    Tensor<T> h = layer_norm(x, l.ln1_g, l.ln1_b);
    x = add(x, multi_head_attention(h, h, l.self, s.cfg.heads, mask, key_valid));
    if (cross_kv) {
      h = layer_norm(x, l.lnx_g, l.lnx_b);
      x = add(x, multi_head_attention(h, ckv, l.cross, s.cfg.heads, nullptr, cross_valid));
    }
    h = layer_norm(x, l.ln2_g, l.ln2_b);
    x = add(x, linear(gelu(linear(h, l.w1, l.b1)), l.w2, l.b2));
  }
  x = layer_norm(x, s.lnf_g, s.lnf_b);
  return flat ? reshape(x, x_in.shape()) : x;
}

/// Cached autoregressive evaluation of a stack, one position per call for a
/// batch of independent rows. Uses the same kernels and operation order as
/// stack_forward, so each step's output equals the corresponding row of a full
/// forward pass over the prefix.
template <class T>
class IncrementalStack {
 public:
  /// cross_kv: [Bc, Lk, D] with Bc == batch or 1; cross_valid: Bc x Lk.
  IncrementalStack(const StackParams<T>& s, std::size_t batch, const AttentionMask& mask,
                   const Tensor<T>* cross_kv = nullptr, KeyMask cross_valid = nullptr)
      : s_(s), batch_(batch), mask_(mask), d_(s.cfg.dim), heads_(s.cfg.heads), dh_(d_ / heads_) {
    if (cross_kv && !s.cfg.cross) throw ShapeError("IncrementalStack: cross features given to a stack without cross-attention");
    if (!cross_kv && s.cfg.cross) throw ShapeError("IncrementalStack: cross-attention stack needs cross features");
    caches_.resize(s.layers.size());
    for (auto& c : caches_) {
      c.k.assign(batch * mask.length * d_, T(0));
      c.v.assign(batch * mask.length * d_, T(0));
    }
    if (cross_kv) {
      if (cross_kv->rank() != 3 || (cross_kv->dim(0) != batch && cross_kv->dim(0) != 1) || cross_kv->dim(2) != d_)
        throw ShapeError("IncrementalStack: cross features " + to_string(cross_kv->shape()) + " do not fit batch " +
                         std::to_string(batch));
      cross_rows_ = cross_kv->dim(0);
      cross_len_ = cross_kv->dim(1);
      cross_valid_ = std::move(cross_valid);
      const std::size_t rows = cross_rows_ * cross_len_;
      for (std::size_t li = 0; li < s.layers.size(); ++li) {
        const auto& p = s.layers[li].cross;
        auto& c = caches_[li];
        c.ck = project(cross_kv->values().data(), rows, p.wk, p.bk);
        c.cv = project(cross_kv->values().data(), rows, p.wv, p.bv);
      }
    }
  }

  std::size_t position() const { return pos_; }

  /// x: [batch, D] inputs at the current position; returns [batch, D].
  std::vector<T> step(const std::vector<T>& x_in) {
    if (pos_ >= mask_.length) throw ShapeError("IncrementalStack: sequence is full");
    if (x_in.size() != batch_ * d_) throw ShapeError("IncrementalStack: step input has the wrong size");
    std::vector<T> x = x_in, h(batch_ * d_), mean(batch_), rstd(batch_);
    const std::size_t L = mask_.length;
    for (std::size_t li = 0; li < s_.layers.size(); ++li) {
      const auto& l = s_.layers[li];
      auto& c = caches_[li];
      norm(x, l.ln1_g, l.ln1_b, h, mean, rstd);
      const auto q = project(h.data(), batch_, l.self.wq, l.self.bq);
      const auto k = project(h.data(), batch_, l.self.wk, l.self.bk);
      const auto v = project(h.data(), batch_, l.self.wv, l.self.bv);
      for (std::size_t b = 0; b < batch_; ++b) {
        std::copy_n(k.data() + b * d_, d_, c.k.data() + (b * L + pos_) * d_);
        std::copy_n(v.data() + b * d_, d_, c.v.data() + (b * L + pos_) * d_);
      }
      const auto* row = mask_.bits->data() + pos_ * L;
      auto o = attend(q, c.k.data(), c.v.data(), L, pos_ + 1, 1, [&](std::size_t, std::size_t j) {
        return row[j] != 0;
      });
      residual(x, project(o.data(), batch_, l.self.wo, l.self.bo));
      if (s_.cfg.cross) {
        norm(x, l.lnx_g, l.lnx_b, h, mean, rstd);
        const auto qc = project(h.data(), batch_, l.cross.wq, l.cross.bq);
        const std::size_t stride = cross_rows_ == 1 ? 0 : 1;
        auto oc = attend(
            qc, c.ck.data(), c.cv.data(), cross_len_, cross_len_, stride,
            [&](std::size_t b, std::size_t j) { return !cross_valid_ || (*cross_valid_)[b * stride * cross_len_ + j] != 0; });
        residual(x, project(oc.data(), batch_, l.cross.wo, l.cross.bo));
      }
      norm(x, l.ln2_g, l.ln2_b, h, mean, rstd);
      auto u = project(h.data(), batch_, l.w1, l.b1);
      std::vector<T> g(u.size()), t(u.size());
      kernels::gelu(u.data(), g.data(), t.data(), u.size());
      residual(x, project(g.data(), batch_, l.w2, l.b2));
    }
    std::vector<T> out(batch_ * d_);
    norm(x, s_.lnf_g, s_.lnf_b, out, mean, rstd);
    ++pos_;
    if (!detail::all_finite(out.data(), out.size())) throw NumericError("non-finite value produced by op 'incremental_stack'");
    return out;
  }

 private:
  struct Cache {
    std::vector<T> k, v, ck, cv;
  };

  std::vector<T> project(const T* x, std::size_t rows, const Tensor<T>& w, const Tensor<T>& b) const {
    const std::size_t in = w.dim(0), out = w.dim(1);
    std::vector<T> y(rows * out);
    kernels::linear(x, w.values().data(), b.values().data(), y.data(), rows, in, out);
    return y;
  }

  void norm(const std::vector<T>& x, const Tensor<T>& g, const Tensor<T>& b, std::vector<T>& y, std::vector<T>& mean,
            std::vector<T>& rstd) const {
    kernels::layer_norm(x.data(), g.values().data(), b.values().data(), y.data(), mean.data(), rstd.data(), batch_, d_,
                        T(1e-5));
  }

  static void residual(std::vector<T>& x, const std::vector<T>& y) {
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = x[i] + y[i];
  }

  /// Single-query attention per row and head over keys 0..lk of the cache.
  /// `stride` is 1 when each row has its own keys, 0 when all rows share row 0.
  template <class Allowed>
  std::vector<T> attend(const std::vector<T>& q, const T* keys, const T* values, std::size_t cap, std::size_t lk,
                        std::size_t stride, Allowed&& allowed) const {
    std::vector<T> o(batch_ * d_), kt(dh_ * lk), vh(lk * dh_), p(lk), oh(dh_);
    const T scl = T(1) / std::sqrt(T(dh_));
    for (std::size_t b = 0; b < batch_; ++b) {
      const std::size_t kb = b * stride;
      for (std::size_t h = 0; h < heads_; ++h) {
        for (std::size_t j = 0; j < lk; ++j)
          for (std::size_t e = 0; e < dh_; ++e) {
            kt[e * lk + j] = keys[(kb * cap + j) * d_ + h * dh_ + e];
            vh[j * dh_ + e] = values[(kb * cap + j) * d_ + h * dh_ + e];
          }
        kernels::attention_head(q.data() + b * d_ + h * dh_, kt.data(), vh.data(), p.data(), oh.data(), 1, lk, dh_,
                                scl, [&](std::size_t, std::uint8_t* row) {
                                  for (std::size_t j = 0; j < lk; ++j) row[j] = allowed(b, j) ? 1 : 0;
                                });
        std::copy_n(oh.data(), dh_, o.data() + b * d_ + h * dh_);
      }
    }
    return o;
  }

  const StackParams<T>& s_;
  std::size_t batch_;
  AttentionMask mask_;
  std::size_t d_, heads_, dh_;
  std::size_t pos_ = 0;
  std::size_t cross_rows_ = 0, cross_len_ = 0;
  KeyMask cross_valid_;
  std::vector<Cache> caches_;
};

}  // namespace cobit
