#pragma once

// Differentiable primitives. Each op computes its forward value eagerly and,
// when recording, registers a closure that accumulates input gradients.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "cobit/kernels.hpp"
#include "cobit/tensor.hpp"

namespace cobit {

namespace detail {

inline std::size_t normalize_axis(long axis, std::size_t rank, const char* op) {
  const long r = static_cast<long>(rank);
  if (axis < -r || axis >= r)
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for rank " +
                     std::to_string(rank));
  return static_cast<std::size_t>(axis < 0 ? axis + r : axis);
}

/// Splits a shape around `axis` into (outer, extent, inner) counts.
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

inline AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.extent = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

/// b broadcasts onto a when shapes match, b is a trailing suffix of a, or b is
/// a single element. Returns the period of b inside a (0 for scalar).
inline std::size_t broadcast_period(const Shape& a, const Shape& b, const char* op) {
  if (a == b) return numel(a);
  if (numel(b) == 1) return 0;
  if (b.size() <= a.size() && std::equal(b.rbegin(), b.rend(), a.rbegin())) return numel(b);
  throw ShapeError(std::string(op) + ": cannot broadcast " + to_string(b) + " onto " + to_string(a));
}

template <class T>
using Node = TensorNode<T>;

}  // namespace detail

/// Elementwise a + b with suffix/scalar broadcasting of b.
template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.numel() < b.numel()) return add(b, a);
  const std::size_t period = detail::broadcast_period(a.shape(), b.shape(), "add");
  const std::size_t n = a.numel();
  std::vector<T> out(n);
  const T* av = a.values().data();
  const T* bv = b.values().data();
  if (period == 0) {
    for (std::size_t i = 0; i < n; ++i) out[i] = av[i] + bv[0];
  } else {
    for (std::size_t base = 0; base < n; base += period)
      for (std::size_t i = 0; i < period; ++i) out[base + i] = av[base + i] + bv[i];
  }
  auto* an = a.node().get();
  auto* bn = b.node().get();
  return detail::finish<T>("add", a.shape(), std::move(out), {&a, &b},
                           [an, bn, period, n](const detail::Node<T>& o) {
                             const T* g = o.grad.data();
                             if (T* ga = detail::grad_buffer(*an))
                               for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
                             if (T* gb = detail::grad_buffer(*bn)) {
                               if (period == 0) {
                                 gb[0] += kernels::sum(g, n);
                               } else {
                                 for (std::size_t base = 0; base < n; base += period)
                                   for (std::size_t i = 0; i < period; ++i) gb[i] += g[base + i];
                               }
                             }
                           });
}

/// Elementwise a * b with suffix/scalar broadcasting of b.
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.numel() < b.numel()) return mul(b, a);
  const std::size_t period = detail::broadcast_period(a.shape(), b.shape(), "mul");
  const std::size_t n = a.numel();
  std::vector<T> out(n);
  const T* av = a.values().data();
  const T* bv = b.values().data();
  for (std::size_t i = 0; i < n; ++i) out[i] = av[i] * bv[period ? i % period : 0];
  auto* an = a.node().get();
  auto* bn = b.node().get();
  return detail::finish<T>("mul", a.shape(), std::move(out), {&a, &b},
                           [an, bn, period, n](const detail::Node<T>& o) {
                             const T* g = o.grad.data();
                             const T* av = an->value.data();
                             const T* bv = bn->value.data();
                             if (T* ga = detail::grad_buffer(*an))
                               for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * bv[period ? i % period : 0];
                             if (T* gb = detail::grad_buffer(*bn))
                               for (std::size_t i = 0; i < n; ++i) gb[period ? i % period : 0] += g[i] * av[i];
                           });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  std::vector<T> out(a.values().begin(), a.values().end());
  for (auto& v : out) v *= s;
  auto* an = a.node().get();
  return detail::finish<T>("scale", a.shape(), std::move(out), {&a}, [an, s](const detail::Node<T>& o) {
    if (T* ga = detail::grad_buffer(*an))
      for (std::size_t i = 0; i < o.grad.size(); ++i) ga[i] += s * o.grad[i];
  });
}

template <class T>
Tensor<T> exp(const Tensor<T>& a) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(a.values()[i]);
  auto* an = a.node().get();
  return detail::finish<T>("exp", a.shape(), std::move(out), {&a}, [an](const detail::Node<T>& o) {
    if (T* ga = detail::grad_buffer(*an))
      for (std::size_t i = 0; i < o.grad.size(); ++i) ga[i] += o.grad[i] * o.value[i];
  });
}

template <class T>
Tensor<T> gelu(const Tensor<T>& a) {
  const std::size_t n = a.numel();
  std::vector<T> out(n);
  auto th = std::make_shared<std::vector<T>>(n);
  kernels::gelu(a.values().data(), out.data(), th->data(), n);
  auto* an = a.node().get();
  return detail::finish<T>("gelu", a.shape(), std::move(out), {&a}, [an, th, n](const detail::Node<T>& o) {
    if (T* ga = detail::grad_buffer(*an))
      kernels::gelu_backward(an->value.data(), th->data(), o.grad.data(), ga, n);
  });
}

/// Shift-stabilized softmax along `axis`.
template <class T>
Tensor<T> softmax(const Tensor<T>& a, long axis = -1) {
  const auto ax = detail::normalize_axis(axis, a.rank(), "softmax");
  const auto sp = detail::split_at(a.shape(), ax);
  std::vector<T> out(a.numel());
  std::vector<T> row(sp.extent), prow(sp.extent);
  const T* av = a.values().data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t in = 0; in < sp.inner; ++in) {
      const std::size_t base = o * sp.extent * sp.inner + in;
      for (std::size_t j = 0; j < sp.extent; ++j) row[j] = av[base + j * sp.inner];
      kernels::masked_softmax_row<T>(row.data(), nullptr, prow.data(), sp.extent);
      for (std::size_t j = 0; j < sp.extent; ++j) out[base + j * sp.inner] = prow[j];
    }
  auto* an = a.node().get();
  return detail::finish<T>("softmax", a.shape(), std::move(out), {&a}, [an, sp](const detail::Node<T>& o) {
    T* ga = detail::grad_buffer(*an);
    if (!ga) return;
    for (std::size_t ou = 0; ou < sp.outer; ++ou)
      for (std::size_t in = 0; in < sp.inner; ++in) {
        const std::size_t base = ou * sp.extent * sp.inner + in;
        T s = 0;
        for (std::size_t j = 0; j < sp.extent; ++j) {
          const std::size_t idx = base + j * sp.inner;
          s += o.grad[idx] * o.value[idx];
        }
        for (std::size_t j = 0; j < sp.extent; ++j) {
          const std::size_t idx = base + j * sp.inner;
          ga[idx] += o.value[idx] * (o.grad[idx] - s);
        }
      }
  });
}

/// Layer normalization over the last axis with learned gain and bias.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps = T(1e-5)) {
  const std::size_t n = x.shape().back();
  if (gain.numel() != n || bias.numel() != n)
    throw ShapeError("layer_norm: gain/bias " + to_string(gain.shape()) + "/" + to_string(bias.shape()) +
                     " do not match last axis of " + to_string(x.shape()));
  const std::size_t rows = x.numel() / n;
  std::vector<T> out(x.numel());
  auto stats = std::make_shared<std::vector<T>>(2 * rows);
  kernels::layer_norm(x.values().data(), gain.values().data(), bias.values().data(), out.data(),
                      stats->data(), stats->data() + rows, rows, n, eps);
  auto* xn = x.node().get();
  auto* gn = gain.node().get();
  auto* bn = bias.node().get();
  return detail::finish<T>(
      "layer_norm", x.shape(), std::move(out), {&x, &gain, &bias},
      [xn, gn, bn, stats, rows, n](const detail::Node<T>& o) {
        T* gx = detail::grad_buffer(*xn);
        T* gg = detail::grad_buffer(*gn);
        T* gb = detail::grad_buffer(*bn);
        const T* mean = stats->data();
        const T* rstd = stats->data() + rows;
        std::vector<T> xhat(n), dxhat(n);
        for (std::size_t r = 0; r < rows; ++r) {
          const T* xr = xn->value.data() + r * n;
          const T* gy = o.grad.data() + r * n;
          for (std::size_t i = 0; i < n; ++i) {
            xhat[i] = (xr[i] - mean[r]) * rstd[r];
            dxhat[i] = gy[i] * gn->value[i];
          }
          if (gg)
            for (std::size_t i = 0; i < n; ++i) gg[i] += gy[i] * xhat[i];
          if (gb)
            for (std::size_t i = 0; i < n; ++i) gb[i] += gy[i];
          if (gx) {
            const T m1 = kernels::sum(dxhat.data(), n) / T(n);
            const T m2 = kernels::dot(dxhat.data(), xhat.data(), n) / T(n);
            T* gxr = gx + r * n;
            for (std::size_t i = 0; i < n; ++i) gxr[i] += rstd[r] * (dxhat[i] - m1 - xhat[i] * m2);
          }
        }
      });
}

/// Gathers rows of table [V, D]; result is [ids.size(), D]. Backward scatters.
template <class T>
Tensor<T> embedding_lookup(const Tensor<T>& table, const std::vector<int>& ids) {
  if (table.rank() != 2) throw ShapeError("embedding_lookup: table must be rank 2, got " + to_string(table.shape()));
  if (ids.empty()) throw ShapeError("embedding_lookup: empty id list");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  std::vector<T> out(ids.size() * d);
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= vocab)
      throw ShapeError("embedding_lookup: id " + std::to_string(ids[r]) + " outside [0, " +
                       std::to_string(vocab) + ")");
    std::copy_n(table.values().data() + ids[r] * d, d, out.data() + r * d);
  }
  auto* tn = table.node().get();
  auto saved = std::make_shared<std::vector<int>>(ids);
  return detail::finish<T>("embedding_lookup", {ids.size(), d}, std::move(out), {&table},
                           [tn, saved, d](const detail::Node<T>& o) {
                             T* gt = detail::grad_buffer(*tn);
                             if (!gt) return;
                             for (std::size_t r = 0; r < saved->size(); ++r) {
                               T* dst = gt + (*saved)[r] * d;
                               const T* src = o.grad.data() + r * d;
                               for (std::size_t i = 0; i < d; ++i) dst[i] += src[i];
                             }
                           });
}

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (numel(shape) != a.numel())
    throw ShapeError("reshape: " + to_string(a.shape()) + " -> " + to_string(shape));
  std::vector<T> out(a.values().begin(), a.values().end());
  auto* an = a.node().get();
  return detail::finish<T>("reshape", std::move(shape), std::move(out), {&a}, [an](const detail::Node<T>& o) {
    if (T* ga = detail::grad_buffer(*an))
      for (std::size_t i = 0; i < o.grad.size(); ++i) ga[i] += o.grad[i];
  });
}

/// Concatenation along `axis`; all other extents must agree.
template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, long axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const auto ax = detail::normalize_axis(axis, parts[0].rank(), "concat");
  Shape shape = parts[0].shape();
  shape[ax] = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != shape.size()) throw ShapeError("concat: rank mismatch " + to_string(s));
    shape[ax] += s[ax];
    s[ax] = shape[ax];
    for (std::size_t i = 0; i < s.size(); ++i)
      if (i != ax && s[i] != shape[i])
        throw ShapeError("concat: " + to_string(p.shape()) + " vs " + to_string(parts[0].shape()));
  }
  const auto sp = detail::split_at(shape, ax);
  std::vector<T> out(numel(shape));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::size_t chunk = p.shape()[ax] * sp.inner;
    for (std::size_t o = 0; o < sp.outer; ++o)
      std::copy_n(p.values().data() + o * chunk, chunk, out.data() + o * sp.extent * sp.inner + off * sp.inner);
    off += p.shape()[ax];
  }
  std::vector<detail::Node<T>*> nodes;
  std::vector<std::size_t> extents;
  for (const auto& p : parts) {
    nodes.push_back(p.node().get());
    extents.push_back(p.shape()[ax]);
  }
  // Variable arity: record directly instead of going through finish().
  detail::check_finite("concat", out);
  Tensor<T> result(shape, std::move(out));
  Tape<T>* tape = Tape<T>::active();
  bool needs = false;
  for (const auto& p : parts) needs |= p.requires_grad();
  if (tape && needs) {
    result.set_requires_grad(true);
    std::vector<std::shared_ptr<TensorNode<T>>> in;
    for (const auto& p : parts) in.push_back(p.node());
    tape->record("concat", std::move(in), result.node(),
                 [nodes, extents, offsets, sp](const detail::Node<T>& o) {
                   for (std::size_t k = 0; k < nodes.size(); ++k) {
                     T* g = detail::grad_buffer(*nodes[k]);
                     if (!g) continue;
                     const std::size_t chunk = extents[k] * sp.inner;
                     for (std::size_t ou = 0; ou < sp.outer; ++ou) {
                       const T* src = o.grad.data() + ou * sp.extent * sp.inner + offsets[k] * sp.inner;
                       T* dst = g + ou * chunk;
                       for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
                     }
                   }
                 });
  }
  return result;
}

/// Elements [start, start + length) along `axis`.
template <class T>
Tensor<T> slice(const Tensor<T>& a, long axis, std::size_t start, std::size_t length) {
  const auto ax = detail::normalize_axis(axis, a.rank(), "slice");
  if (length == 0 || start + length > a.shape()[ax])
    throw ShapeError("slice: [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") outside axis " + std::to_string(ax) + " of " + to_string(a.shape()));
  const auto sp = detail::split_at(a.shape(), ax);
  Shape shape = a.shape();
  shape[ax] = length;
  std::vector<T> out(numel(shape));
  const std::size_t chunk = length * sp.inner;
  for (std::size_t o = 0; o < sp.outer; ++o)
    std::copy_n(a.values().data() + o * sp.extent * sp.inner + start * sp.inner, chunk, out.data() + o * chunk);
  auto* an = a.node().get();
  return detail::finish<T>("slice", std::move(shape), std::move(out), {&a},
                           [an, sp, start, chunk](const detail::Node<T>& o) {
                             T* ga = detail::grad_buffer(*an);
                             if (!ga) return;
                             for (std::size_t ou = 0; ou < sp.outer; ++ou) {
                               T* dst = ga + ou * sp.extent * sp.inner + start * sp.inner;
                               const T* src = o.grad.data() + ou * chunk;
                               for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
                             }
                           });
}

/// Swaps two axes.
template <class T>
Tensor<T> transpose(const Tensor<T>& a, long axis0 = -2, long axis1 = -1) {
  const auto a0 = detail::normalize_axis(axis0, a.rank(), "transpose");
  const auto a1 = detail::normalize_axis(axis1, a.rank(), "transpose");
  const Shape& in = a.shape();
  Shape shape = in;
  std::swap(shape[a0], shape[a1]);
  const std::size_t rank = in.size();
  std::vector<std::size_t> in_strides(rank), out_strides(rank);
  for (std::size_t i = rank, s = 1; i-- > 0;) {
    in_strides[i] = s;
    s *= in[i];
  }
  for (std::size_t i = rank, s = 1; i-- > 0;) {
    out_strides[i] = s;
    s *= shape[i];
  }
  // perm[i]: input element offset for output element i
  auto perm = std::make_shared<std::vector<std::size_t>>(a.numel());
  std::vector<std::size_t> idx(rank, 0);
  for (std::size_t flat = 0; flat < a.numel(); ++flat) {
    std::size_t src = 0;
    for (std::size_t d = 0; d < rank; ++d) {
      std::size_t src_axis = d == a0 ? a1 : (d == a1 ? a0 : d);
      src += idx[d] * in_strides[src_axis];
    }
    (*perm)[flat] = src;
    for (std::size_t d = rank; d-- > 0;) {
      if (++idx[d] < shape[d]) break;
      idx[d] = 0;
    }
  }
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[(*perm)[i]];
  auto* an = a.node().get();
  return detail::finish<T>("transpose", std::move(shape), std::move(out), {&a}, [an, perm](const detail::Node<T>& o) {
    if (T* ga = detail::grad_buffer(*an))
      for (std::size_t i = 0; i < o.grad.size(); ++i) ga[(*perm)[i]] += o.grad[i];
  });
}

/// x / max(||x||, eps) along `axis`.
template <class T>
Tensor<T> l2_normalize(const Tensor<T>& a, long axis = -1, T eps = T(1e-8)) {
  const auto ax = detail::normalize_axis(axis, a.rank(), "l2_normalize");
  const auto sp = detail::split_at(a.shape(), ax);
  std::vector<T> out(a.numel());
  auto norms = std::make_shared<std::vector<T>>(sp.outer * sp.inner);
  const T* av = a.values().data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t in = 0; in < sp.inner; ++in) {
      const std::size_t base = o * sp.extent * sp.inner + in;
      T ss = 0;
      for (std::size_t j = 0; j < sp.extent; ++j) ss += av[base + j * sp.inner] * av[base + j * sp.inner];
      const T nrm = std::sqrt(ss);
      (*norms)[o * sp.inner + in] = nrm;
      const T denom = std::max(nrm, eps);
      for (std::size_t j = 0; j < sp.extent; ++j) out[base + j * sp.inner] = av[base + j * sp.inner] / denom;
    }
  auto* an = a.node().get();
  return detail::finish<T>("l2_normalize", a.shape(), std::move(out), {&a},
                           [an, sp, norms, eps](const detail::Node<T>& o) {
                             T* ga = detail::grad_buffer(*an);
                             if (!ga) return;
                             for (std::size_t ou = 0; ou < sp.outer; ++ou)
                               for (std::size_t in = 0; in < sp.inner; ++in) {
                                 const std::size_t base = ou * sp.extent * sp.inner + in;
                                 const T nrm = (*norms)[ou * sp.inner + in];
                                 if (nrm > eps) {
                                   T yg = 0;
                                   for (std::size_t j = 0; j < sp.extent; ++j)
                                     yg += o.value[base + j * sp.inner] * o.grad[base + j * sp.inner];
                                   for (std::size_t j = 0; j < sp.extent; ++j) {
                                     const std::size_t idx = base + j * sp.inner;
                                     ga[idx] += (o.grad[idx] - o.value[idx] * yg) / nrm;
                                   }
                                 } else {
                                   for (std::size_t j = 0; j < sp.extent; ++j) {
                                     const std::size_t idx = base + j * sp.inner;
                                     ga[idx] += o.grad[idx] / eps;
                                   }
                                 }
                               }
                           });
}

/// Sum of all elements, shape [1].
template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  T total = 0;
  for (T v : a.values()) total += v;
  auto* an = a.node().get();
  return detail::finish<T>("sum", {1}, {total}, {&a}, [an](const detail::Node<T>& o) {
    if (T* ga = detail::grad_buffer(*an))
      for (std::size_t i = 0; i < an->value.size(); ++i) ga[i] += o.grad[0];
  });
}

/// Mean of all elements, shape [1].
template <class T>
Tensor<T> mean(const Tensor<T>& a) {
  T total = 0;
  for (T v : a.values()) total += v;
  const T n = T(a.numel());
  auto* an = a.node().get();
  return detail::finish<T>("mean", {1}, {total / n}, {&a}, [an, n](const detail::Node<T>& o) {
    if (T* ga = detail::grad_buffer(*an))
      for (std::size_t i = 0; i < an->value.size(); ++i) ga[i] += o.grad[0] / n;
  });
}

/// Matrix product over the last two axes. Supported batching: b of rank 2
/// (shared across all leading axes of a), a of rank 2 (shared across b's
/// batch), or identical batch extents.
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() < 2)
    throw ShapeError("matmul: operands must have rank >= 2, got " + to_string(a.shape()) + " x " +
                     to_string(b.shape()));
  const std::size_t k = a.shape().back();
  const std::size_t kb = b.shape()[b.rank() - 2];
  const std::size_t n = b.shape().back();
  if (k != kb)
    throw ShapeError("matmul: inner extents differ: " + to_string(a.shape()) + " x " + to_string(b.shape()));
  const std::size_t m = a.shape()[a.rank() - 2];
  Shape a_batch(a.shape().begin(), a.shape().end() - 2);
  Shape b_batch(b.shape().begin(), b.shape().end() - 2);
  Shape out_shape;
  std::size_t batches = 1;
  int mode;  // 0: b shared, 1: a shared, 2: paired
  if (b_batch.empty()) {
    mode = 0;
    out_shape = a.shape();
    out_shape.back() = n;
  } else if (a_batch.empty()) {
    mode = 1;
    out_shape = b_batch;
    out_shape.push_back(m);
    out_shape.push_back(n);
    batches = numel(b_batch);
  } else if (a_batch == b_batch) {
    mode = 2;
    out_shape = a_batch;
    out_shape.push_back(m);
    out_shape.push_back(n);
    batches = numel(a_batch);
  } else {
    throw ShapeError("matmul: batch extents not broadcastable: " + to_string(a.shape()) + " x " +
                     to_string(b.shape()));
  }
  std::vector<T> out(numel(out_shape));
  const T* av = a.values().data();
  const T* bv = b.values().data();
  if (mode == 0) {
    kernels::gemm(av, bv, out.data(), a.numel() / k, k, n);
  } else {
    for (std::size_t t = 0; t < batches; ++t)
      kernels::gemm(av + (mode == 2 ? t * m * k : 0), bv + t * k * n, out.data() + t * m * n, m, k, n);
  }
  auto* an = a.node().get();
  auto* bn = b.node().get();
  return detail::finish<T>(
      "matmul", std::move(out_shape), std::move(out), {&a, &b},
      [an, bn, mode, batches, m, k, n](const detail::Node<T>& o) {
        T* ga = detail::grad_buffer(*an);
        T* gb = detail::grad_buffer(*bn);
        const T* g = o.grad.data();
        const T* av = an->value.data();
        const T* bv = bn->value.data();
        if (mode == 0) {
          const std::size_t rows = an->value.size() / k;
          if (ga) kernels::gemm_nt(g, bv, ga, rows, n, k, true);
          if (gb) kernels::gemm_tn(av, g, gb, k, rows, n, true);
          return;
        }
        for (std::size_t t = 0; t < batches; ++t) {
          const std::size_t aoff = mode == 2 ? t * m * k : 0;
          if (ga) kernels::gemm_nt(g + t * m * n, bv + t * k * n, ga + aoff, m, n, k, true);
          if (gb) kernels::gemm_tn(av + aoff, g + t * m * n, gb + t * k * n, k, m, n, true);
        }
      });
}

/// x[..., k] * w[k, n] + b[n] as one op (same values as add(matmul(x, w), b)).
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  if (x.rank() < 1 || w.rank() != 2 || b.numel() != w.dim(1) || x.shape().back() != w.dim(0))
    throw ShapeError("linear: cannot apply weight " + to_string(w.shape()) + " and bias " + to_string(b.shape()) +
                     " to " + to_string(x.shape()));
  const std::size_t k = w.dim(0), n = w.dim(1), rows = x.numel() / k;
  Shape out_shape = x.shape();
  out_shape.back() = n;
  std::vector<T> out(rows * n);
  kernels::linear(x.values().data(), w.values().data(), b.values().data(), out.data(), rows, k, n);
  auto* xn = x.node().get();
  auto* wn = w.node().get();
  auto* bn = b.node().get();
  return detail::finish<T>("linear", std::move(out_shape), std::move(out), {&x, &w, &b},
                           [xn, wn, bn, rows, k, n](const detail::Node<T>& o) {
                             const T* g = o.grad.data();
                             if (T* gx = detail::grad_buffer(*xn)) kernels::gemm_nt(g, wn->value.data(), gx, rows, n, k, true);
                             if (T* gw = detail::grad_buffer(*wn)) kernels::gemm_tn(xn->value.data(), g, gw, k, rows, n, true);
                             if (T* gb = detail::grad_buffer(*bn))
                               for (std::size_t r = 0; r < rows; ++r)
                                 for (std::size_t j = 0; j < n; ++j) gb[j] += g[r * n + j];
                           });
}

/// Masked multi-head scaled dot-product attention.
///
/// q: [Bq, Lq, D] with Bq == B or 1 (a single query set shared by the batch),
/// k, v: [B, Lk, D]. `allowed` is an Lq x Lk 0/1 matrix (nullptr: all keys
/// allowed); `key_valid` is a B x Lk 0/1 matrix (nullptr: all valid). A key is
/// usable by a query iff both say so. Output: [B, Lq, D].
template <class T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t heads,
                    std::shared_ptr<const std::vector<std::uint8_t>> allowed,
                    std::shared_ptr<const std::vector<std::uint8_t>> key_valid) {
  if (q.rank() != 3 || k.rank() != 3 || v.rank() != 3 || k.shape() != v.shape())
    throw ShapeError("attention: expected q [B,Lq,D], k/v [B,Lk,D], got " + to_string(q.shape()) + ", " +
                     to_string(k.shape()) + ", " + to_string(v.shape()));
  const std::size_t batch = k.dim(0), lk = k.dim(1), d = k.dim(2);
  const std::size_t bq = q.dim(0), lq = q.dim(1);
  if (q.dim(2) != d || (bq != batch && bq != 1))
    throw ShapeError("attention: query " + to_string(q.shape()) + " incompatible with keys " + to_string(k.shape()));
  if (heads == 0 || d % heads != 0)
    throw ShapeError("attention: width " + std::to_string(d) + " not divisible by " + std::to_string(heads) +
                     " heads");
  if (allowed && allowed->size() != lq * lk)
    throw ShapeError("attention: mask is not " + std::to_string(lq) + "x" + std::to_string(lk));
  if (key_valid && key_valid->size() != batch * lk)
    throw ShapeError("attention: key validity is not " + std::to_string(batch) + "x" + std::to_string(lk));
  const std::size_t dh = d / heads;
  const T scl = T(1) / std::sqrt(T(dh));
  std::vector<T> out(batch * lq * d);
  auto probs = std::make_shared<std::vector<T>>(batch * heads * lq * lk);
  std::vector<T> qh(lq * dh), kt(dh * lk), vh(lk * dh), oh(lq * dh);
  const T* qv = q.values().data();
  const T* kv = k.values().data();
  const T* vv = v.values().data();
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t qb = bq == 1 ? 0 : b;
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < lq; ++i)
        std::copy_n(qv + (qb * lq + i) * d + h * dh, dh, qh.data() + i * dh);
      for (std::size_t j = 0; j < lk; ++j)
        for (std::size_t e = 0; e < dh; ++e) {
          kt[e * lk + j] = kv[(b * lk + j) * d + h * dh + e];
          vh[j * dh + e] = vv[(b * lk + j) * d + h * dh + e];
        }
      T* p = probs->data() + (b * heads + h) * lq * lk;
      kernels::attention_head(qh.data(), kt.data(), vh.data(), p, oh.data(), lq, lk, dh, scl,
                              [&](std::size_t i, std::uint8_t* row) {
                                for (std::size_t j = 0; j < lk; ++j)
                                  row[j] = (!allowed || (*allowed)[i * lk + j]) &&
                                           (!key_valid || (*key_valid)[b * lk + j]);
                              });
      for (std::size_t i = 0; i < lq; ++i) std::copy_n(oh.data() + i * dh, dh, out.data() + (b * lq + i) * d + h * dh);
    }
  }
  auto* qn = q.node().get();
  auto* kn = k.node().get();
  auto* vn = v.node().get();
  return detail::finish<T>(
      "attention", {batch, lq, d}, std::move(out), {&q, &k, &v},
      [qn, kn, vn, probs, batch, bq, lq, lk, d, heads, dh, scl](const detail::Node<T>& o) {
        T* gq = detail::grad_buffer(*qn);
        T* gk = detail::grad_buffer(*kn);
        T* gv = detail::grad_buffer(*vn);
        std::vector<T> qh(lq * dh), kh(lk * dh), vh(lk * dh), go(lq * dh), dp(lq * lk), tmp_q(lq * dh),
            tmp_k(lk * dh), tmp_v(lk * dh);
        for (std::size_t b = 0; b < batch; ++b) {
          const std::size_t qb = bq == 1 ? 0 : b;
          for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t i = 0; i < lq; ++i) {
              std::copy_n(qn->value.data() + (qb * lq + i) * d + h * dh, dh, qh.data() + i * dh);
              std::copy_n(o.grad.data() + (b * lq + i) * d + h * dh, dh, go.data() + i * dh);
            }
            for (std::size_t j = 0; j < lk; ++j) {
              std::copy_n(kn->value.data() + (b * lk + j) * d + h * dh, dh, kh.data() + j * dh);
              std::copy_n(vn->value.data() + (b * lk + j) * d + h * dh, dh, vh.data() + j * dh);
            }
            const T* p = probs->data() + (b * heads + h) * lq * lk;
            if (gv) {
              kernels::gemm_tn(p, go.data(), tmp_v.data(), lk, lq, dh);
              for (std::size_t j = 0; j < lk; ++j)
                for (std::size_t e = 0; e < dh; ++e) gv[(b * lk + j) * d + h * dh + e] += tmp_v[j * dh + e];
            }
            if (!gq && !gk) continue;
            kernels::gemm_nt(go.data(), vh.data(), dp.data(), lq, dh, lk);
            for (std::size_t i = 0; i < lq; ++i) {
              const T* pr = p + i * lk;
              T* dr = dp.data() + i * lk;
              T s = 0;
              for (std::size_t j = 0; j < lk; ++j) s += pr[j] * dr[j];
              for (std::size_t j = 0; j < lk; ++j) dr[j] = pr[j] * (dr[j] - s) * scl;
            }
            if (gq) {
              kernels::gemm(dp.data(), kh.data(), tmp_q.data(), lq, lk, dh);
              for (std::size_t i = 0; i < lq; ++i)
                for (std::size_t e = 0; e < dh; ++e) gq[(qb * lq + i) * d + h * dh + e] += tmp_q[i * dh + e];
            }
            if (gk) {
              kernels::gemm_tn(dp.data(), qh.data(), tmp_k.data(), lk, lq, dh);
              for (std::size_t j = 0; j < lk; ++j)
                for (std::size_t e = 0; e < dh; ++e) gk[(b * lk + j) * d + h * dh + e] += tmp_k[j * dh + e];
            }
          }
        }
      });
}

/// Weighted negative log-likelihood: sum_i w_i * (logsumexp(logits_i) - logits_i[t_i]).
/// Positions with zero weight are skipped (their targets are not checked).
template <class T>
Tensor<T> weighted_cross_entropy(const Tensor<T>& logits, const std::vector<int>& targets,
                                 const std::vector<T>& weights) {
  const std::size_t vocab = logits.shape().back();
  const std::size_t rows = logits.numel() / vocab;
  if (targets.size() != rows || weights.size() != rows)
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " + std::to_string(rows) +
                     " positions of " + to_string(logits.shape()));
  auto probs = std::make_shared<std::vector<T>>(logits.numel());
  double total = 0;
  const T* lv = logits.values().data();
  for (std::size_t r = 0; r < rows; ++r) {
    if (weights[r] == T(0)) continue;
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= vocab)
      throw ShapeError("cross_entropy: target " + std::to_string(targets[r]) + " outside [0, " +
                       std::to_string(vocab) + ")");
    const T* row = lv + r * vocab;
    T* p = probs->data() + r * vocab;
    T mx = row[0];
    for (std::size_t j = 1; j < vocab; ++j) mx = std::max(mx, row[j]);
    T s = 0;
    for (std::size_t j = 0; j < vocab; ++j) {
      p[j] = kernels::exp<T>(row[j] - mx);
      s += p[j];
    }
    const T inv = T(1) / s;
    for (std::size_t j = 0; j < vocab; ++j) p[j] *= inv;
    const T nll = mx + std::log(s) - row[targets[r]];
    total += double(weights[r]) * double(nll);
  }
  auto* ln = logits.node().get();
  auto saved_t = std::make_shared<std::vector<int>>(targets);
  auto saved_w = std::make_shared<std::vector<T>>(weights);
  return detail::finish<T>("cross_entropy", {1}, {T(total)}, {&logits},
                           [ln, probs, saved_t, saved_w, rows, vocab](const detail::Node<T>& o) {
                             T* gl = detail::grad_buffer(*ln);
                             if (!gl) return;
                             const T g = o.grad[0];
                             for (std::size_t r = 0; r < rows; ++r) {
                               const T w = (*saved_w)[r];
                               if (w == T(0)) continue;
                               const T* p = probs->data() + r * vocab;
                               T* dst = gl + r * vocab;
                               for (std::size_t j = 0; j < vocab; ++j) dst[j] += g * w * p[j];
                               dst[(*saved_t)[r]] -= g * w;
                             }
                           });
}

/// Mean negative log-likelihood over positions with valid[i] != 0.
template <class T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, const std::vector<int>& targets,
                                const std::vector<std::uint8_t>& valid) {
  std::size_t count = 0;
  for (auto f : valid) count += f != 0;
  if (count == 0) throw ShapeError("cross_entropy: every position is masked");
  std::vector<T> w(valid.size());
  for (std::size_t i = 0; i < valid.size(); ++i) w[i] = valid[i] ? T(1) / T(count) : T(0);
  return weighted_cross_entropy(logits, targets, w);
}

template <class T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, const std::vector<int>& targets) {
  return softmax_cross_entropy(logits, targets, std::vector<std::uint8_t>(targets.size(), 1));
}

/// Positions are split into `groups` equal consecutive runs; the loss is the
/// mean over groups of each group's mean NLL over its valid positions.
template <class T>
Tensor<T> grouped_cross_entropy(const Tensor<T>& logits, const std::vector<int>& targets,
                                const std::vector<std::uint8_t>& valid, std::size_t groups) {
  if (groups == 0 || valid.size() % groups != 0)
    throw ShapeError("cross_entropy: " + std::to_string(valid.size()) + " positions do not split into " +
                     std::to_string(groups) + " groups");
  const std::size_t per = valid.size() / groups;
  std::vector<T> w(valid.size(), T(0));
  for (std::size_t g = 0; g < groups; ++g) {
    std::size_t count = 0;
    for (std::size_t i = 0; i < per; ++i) count += valid[g * per + i] != 0;
    if (count == 0) throw ShapeError("cross_entropy: group " + std::to_string(g) + " is fully masked");
    for (std::size_t i = 0; i < per; ++i)
      if (valid[g * per + i]) w[g * per + i] = T(1) / (T(count) * T(groups));
  }
  return weighted_cross_entropy(logits, targets, w);
}

}  // namespace cobit
