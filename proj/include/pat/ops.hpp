#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "pat/blas.hpp"
#include "pat/errors.hpp"
#include "pat/tape.hpp"
#include "pat/tensor.hpp"

namespace pat {

namespace detail {

template <class T>
T sigmoid(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

inline std::string shapes(const Shape& a, const Shape& b) { return to_string(a) + " and " + to_string(b); }

// Elementwise binary layout: equal shapes, or one side a vector along the last axis.
struct Broadcast {
  bool a_vec = false;
  bool b_vec = false;
};

template <class T>
Broadcast broadcast_of(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() == b.shape()) return {};
  if (b.rank() == 1 && b.size() == a.last_dim()) return {false, true};
  if (a.rank() == 1 && a.size() == b.last_dim()) return {true, false};
  throw DimensionError(std::string(op) + ": non-broadcastable shapes " + shapes(a.shape(), b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

/// a[m x k] * b[k x n]
template <class T>
Tensor<T> matmul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw DimensionError("matmul: incompatible shapes " + detail::shapes(a.shape(), b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<T> out(Shape{m, n});
  blas::gemm<T>(blas::Op::None, blas::Op::None, m, n, k, T(1), a.data().data(), k, b.data().data(), n,
                T(0), out.data().data(), n);
  if (tape.tracks({&a, &b})) {
    tape.record(out, [a, b, out, m, n, k]() mutable {
      const T* g = out.grad().data();
      if (a.requires_grad())
        blas::gemm<T>(blas::Op::None, blas::Op::Trans, m, k, n, T(1), g, n, b.data().data(), n, T(1),
                      a.ensure_grad().data(), k);
      if (b.requires_grad())
        blas::gemm<T>(blas::Op::Trans, blas::Op::None, k, n, m, T(1), a.data().data(), k, g, n, T(1),
                      b.ensure_grad().data(), n);
    });
  }
  return out;
}

/// x[... x d_in] * w[d_out x d_in]^T -> [... x d_out]
template <class T>
Tensor<T> linear(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& w) {
  if (w.rank() != 2 || x.last_dim() != w.dim(1))
    throw DimensionError("linear: input " + to_string(x.shape()) + " vs weight " + to_string(w.shape()));
  const std::size_t rows = x.rows(), din = w.dim(1), dout = w.dim(0);
  Shape shape = x.shape();
  shape.back() = dout;
  Tensor<T> out(shape);
  blas::gemm<T>(blas::Op::None, blas::Op::Trans, rows, dout, din, T(1), x.data().data(), din,
                w.data().data(), din, T(0), out.data().data(), dout);
  if (tape.tracks({&x, &w})) {
    tape.record(out, [x, w, out, rows, din, dout]() mutable {
      const T* g = out.grad().data();
      if (x.requires_grad())
        blas::gemm<T>(blas::Op::None, blas::Op::None, rows, din, dout, T(1), g, dout, w.data().data(),
                      din, T(1), x.ensure_grad().data(), din);
      if (w.requires_grad())
        blas::gemm<T>(blas::Op::Trans, blas::Op::None, dout, din, rows, T(1), g, dout, x.data().data(),
                      din, T(1), w.ensure_grad().data(), din);
    });
  }
  return out;
}

template <class T>
Tensor<T> transpose(Tape<T>& tape, const Tensor<T>& a) {
  if (a.rank() != 2) throw DimensionError("transpose: expected a matrix, got " + to_string(a.shape()));
  const std::size_t m = a.dim(0), n = a.dim(1);
  Tensor<T> out(Shape{n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a[i * n + j];
  if (tape.tracks({&a})) {
    tape.record(out, [a, out, m, n]() mutable {
      auto ga = a.ensure_grad();
      auto g = out.grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
    });
  }
  return out;
}

template <class T>
Tensor<T> reshape(Tape<T>& tape, const Tensor<T>& a, Shape shape) {
  Tensor<T> out = a.reshaped(std::move(shape));
  if (tape.tracks({&a})) {
    tape.record(out, [a, out]() mutable {
      auto ga = a.ensure_grad();
      auto g = out.grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

enum class BinaryOp { Add, Sub, Mul, Div };

/// Smallest magnitude allowed for a divisor.
inline constexpr double kDivGuard = 1e-12;

template <class T>
Tensor<T> binary(Tape<T>& tape, BinaryOp op, const Tensor<T>& a, const Tensor<T>& b) {
  static constexpr const char* names[] = {"add", "sub", "mul", "div"};
  const auto bc = detail::broadcast_of(a, b, names[static_cast<int>(op)]);
  const Tensor<T>& big = bc.a_vec ? b : a;
  const std::size_t n = big.size(), width = big.last_dim();
  auto guard = [](T den) {
    const T g = static_cast<T>(kDivGuard);
    if (std::abs(den) >= g) return den;
    return den < T(0) ? -g : g;
  };
  Tensor<T> out(big.shape());
  {
    auto pa = a.data();
    auto pb = b.data();
    auto po = out.data();
    for (std::size_t i = 0; i < n; ++i) {
      const T x = pa[bc.a_vec ? i % width : i];
      const T y = pb[bc.b_vec ? i % width : i];
      switch (op) {
        case BinaryOp::Add: po[i] = x + y; break;
        case BinaryOp::Sub: po[i] = x - y; break;
        case BinaryOp::Mul: po[i] = x * y; break;
        case BinaryOp::Div: po[i] = x / guard(y); break;
      }
    }
  }
  if (tape.tracks({&a, &b})) {
    tape.record(out, [a, b, out, op, bc, n, width, guard]() mutable {
      auto g = out.grad();
      const bool need_a = a.requires_grad(), need_b = b.requires_grad();
      std::span<T> ga = need_a ? a.ensure_grad() : std::span<T>{};
      std::span<T> gb = need_b ? b.ensure_grad() : std::span<T>{};
      auto pa = a.data();
      auto pb = b.data();
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t ia = bc.a_vec ? i % width : i;
        const std::size_t ib = bc.b_vec ? i % width : i;
        const T x = pa[ia], y = pb[ib];
        T da = 0, db = 0;
        switch (op) {
          case BinaryOp::Add: da = g[i]; db = g[i]; break;
          case BinaryOp::Sub: da = g[i]; db = -g[i]; break;
          case BinaryOp::Mul: da = g[i] * y; db = g[i] * x; break;
          case BinaryOp::Div: {
            const T den = guard(y);
            da = g[i] / den;
            db = -g[i] * x / (den * den);
            break;
          }
        }
        if (need_a) ga[ia] += da;
        if (need_b) gb[ib] += db;
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  return binary(tape, BinaryOp::Add, a, b);
}
template <class T>
Tensor<T> sub(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  return binary(tape, BinaryOp::Sub, a, b);
}
template <class T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  return binary(tape, BinaryOp::Mul, a, b);
}
template <class T>
Tensor<T> div(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  return binary(tape, BinaryOp::Div, a, b);
}

namespace detail {

// Unary op with a derivative expressed in terms of (input, output).
template <class T, class F, class D>
Tensor<T> unary(Tape<T>& tape, const Tensor<T>& a, F f, D df) {
  Tensor<T> out(a.shape());
  auto pa = a.data();
  auto po = out.data();
  for (std::size_t i = 0; i < pa.size(); ++i) po[i] = f(pa[i]);
  if (tape.tracks({&a})) {
    tape.record(out, [a, out, df]() mutable {
      auto g = out.grad();
      auto ga = a.ensure_grad();
      auto pa = a.data();
      auto po = out.data();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * df(pa[i], po[i]);
    });
  }
  return out;
}

}  // namespace detail

template <class T>
Tensor<T> sigmoid(Tape<T>& tape, const Tensor<T>& a) {
  return detail::unary(
      tape, a, [](T x) { return detail::sigmoid(x); }, [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Tensor<T> silu(Tape<T>& tape, const Tensor<T>& a) {
  return detail::unary(
      tape, a, [](T x) { return x * detail::sigmoid(x); },
      [](T x, T) {
        const T s = detail::sigmoid(x);
        return s + x * s * (T(1) - s);
      });
}

template <class T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& a, T c) {
  return detail::unary(
      tape, a, [c](T x) { return c * x; }, [c](T, T) { return c; });
}

template <class T>
Tensor<T> add_scalar(Tape<T>& tape, const Tensor<T>& a, T c) {
  return detail::unary(
      tape, a, [c](T x) { return x + c; }, [](T, T) { return T(1); });
}

// ---------------------------------------------------------------------------
// Normalization and reductions
// ---------------------------------------------------------------------------

/// y_i = x_i / sqrt(mean(x^2) + eps) * gain_scale * gain_i over the last axis.
template <class T>
Tensor<T> rmsnorm(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& gain, T eps, double gain_scale = 1.0) {
  const std::size_t d = x.last_dim();
  if (d == 0) throw DimensionError("rmsnorm: empty last axis");
  if (gain.rank() != 1 || gain.size() != d)
    throw DimensionError("rmsnorm: gain " + to_string(gain.shape()) + " vs input " + to_string(x.shape()));
  if (!(eps > T(0))) throw ConfigError("rmsnorm: eps must be positive");
  if (!(gain_scale > 0.0)) throw ConfigError("rmsnorm: gain_scale must be positive");
  const std::size_t rows = x.rows();
  Tensor<T> out(x.shape());
  std::vector<T> inv_rms(rows);
  {
    auto px = x.data();
    auto pg = gain.data();
    auto po = out.data();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* xr = px.data() + r * d;
      // Everything up to the final rounding is done in double, so a sliced
      // norm (fewer channels, scaled gain) rounds to the same value as the
      // full-width one.
      double ss = 0;
      for (std::size_t i = 0; i < d; ++i) ss += static_cast<double>(xr[i]) * static_cast<double>(xr[i]);
      const double inv = gain_scale / std::sqrt(ss / static_cast<double>(d) + static_cast<double>(eps));
      inv_rms[r] = static_cast<T>(inv);
      T* yr = po.data() + r * d;
      for (std::size_t i = 0; i < d; ++i)
        yr[i] = static_cast<T>(static_cast<double>(xr[i]) * inv * static_cast<double>(pg[i]));
    }
  }
  if (tape.tracks({&x, &gain})) {
    tape.record(out, [x, gain, out, inv_rms = std::move(inv_rms), rows, d, gain_scale]() mutable {
      auto g = out.grad();
      auto px = x.data();
      auto pg = gain.data();
      const bool need_x = x.requires_grad(), need_g = gain.requires_grad();
      std::span<T> gx = need_x ? x.ensure_grad() : std::span<T>{};
      std::span<T> gg = need_g ? gain.ensure_grad() : std::span<T>{};
      for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = px.data() + r * d;
        const T* gr = g.data() + r * d;
        const T inv = inv_rms[r];
        if (need_g)
          for (std::size_t i = 0; i < d; ++i) gg[i] += gr[i] * xr[i] * inv;
        if (need_x) {
          T dot = 0;
          for (std::size_t i = 0; i < d; ++i) dot += gr[i] * pg[i] * xr[i];
          // inv carries gain_scale once; the normalizer term must not.
          const T coef = dot * inv * inv * inv / static_cast<T>(static_cast<double>(d) * gain_scale * gain_scale);
          for (std::size_t i = 0; i < d; ++i) gx[r * d + i] += gr[i] * pg[i] * inv - xr[i] * coef;
        }
      }
    });
  }
  return out;
}

/// Softmax along the last axis.
template <class T>
Tensor<T> softmax_rows(Tape<T>& tape, const Tensor<T>& x) {
  const std::size_t d = x.last_dim(), rows = x.rows();
  Tensor<T> out(x.shape());
  auto px = x.data();
  auto po = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = px.data() + r * d;
    T* yr = po.data() + r * d;
    const T mx = *std::max_element(xr, xr + d);
    T z = 0;
    for (std::size_t i = 0; i < d; ++i) z += (yr[i] = std::exp(xr[i] - mx));
    for (std::size_t i = 0; i < d; ++i) yr[i] /= z;
  }
  if (tape.tracks({&x})) {
    tape.record(out, [x, out, rows, d]() mutable {
      auto g = out.grad();
      auto py = out.data();
      auto gx = x.ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        const T* yr = py.data() + r * d;
        const T* gr = g.data() + r * d;
        T dot = 0;
        for (std::size_t i = 0; i < d; ++i) dot += gr[i] * yr[i];
        for (std::size_t i = 0; i < d; ++i) gx[r * d + i] += yr[i] * (gr[i] - dot);
      }
    });
  }
  return out;
}

/// Weighted mean of per-row cross-entropy between logits (rows over the last
/// axis) and integer targets. `weights` may be empty (all ones); rows with
/// weight 0 are ignored.
template <class T>
Tensor<T> cross_entropy_logits(Tape<T>& tape, const Tensor<T>& logits, std::span<const std::int32_t> targets,
                               std::span<const T> weights = {}) {
  const std::size_t vocab = logits.last_dim(), rows = logits.rows();
  if (targets.size() != rows)
    throw DimensionError("cross_entropy_logits: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(rows) + " rows");
  if (!weights.empty() && weights.size() != rows)
    throw DimensionError("cross_entropy_logits: weight count does not match rows");
  T total_w = 0;
  for (std::size_t r = 0; r < rows; ++r) total_w += weights.empty() ? T(1) : weights[r];
  if (!(total_w > T(0))) throw InputError("cross_entropy_logits: no weighted positions");

  std::vector<T> probs(rows * vocab);
  T loss = 0;
  auto pl = logits.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const auto t = targets[r];
    if (t < 0 || static_cast<std::size_t>(t) >= vocab)
      throw IndexError("cross_entropy_logits: target " + std::to_string(t) + " outside vocabulary of " +
                       std::to_string(vocab));
    const T* lr = pl.data() + r * vocab;
    T* pr = probs.data() + r * vocab;
    const T mx = *std::max_element(lr, lr + vocab);
    T z = 0;
    for (std::size_t i = 0; i < vocab; ++i) z += (pr[i] = std::exp(lr[i] - mx));
    for (std::size_t i = 0; i < vocab; ++i) pr[i] /= z;
    const T w = weights.empty() ? T(1) : weights[r];
    if (w != T(0)) loss += w * (std::log(z) + mx - lr[t]);
  }
  Tensor<T> out = Tensor<T>::scalar(loss / total_w);
  if (tape.tracks({&logits})) {
    std::vector<std::int32_t> tg(targets.begin(), targets.end());
    std::vector<T> wt(weights.begin(), weights.end());
    tape.record(out, [logits, out, probs = std::move(probs), tg = std::move(tg), wt = std::move(wt), rows, vocab,
                      total_w]() mutable {
      const T g = out.grad()[0] / total_w;
      auto gl = logits.ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        const T w = wt.empty() ? T(1) : wt[r];
        if (w == T(0)) continue;
        const T* pr = probs.data() + r * vocab;
        T* gr = gl.data() + r * vocab;
        for (std::size_t i = 0; i < vocab; ++i) gr[i] += g * w * pr[i];
        gr[tg[r]] -= g * w;
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& a) {
  T s = 0;
  for (T v : a.data()) s += v;
  Tensor<T> out = Tensor<T>::scalar(s);
  if (tape.tracks({&a})) {
    tape.record(out, [a, out]() mutable {
      const T g = out.grad()[0];
      for (auto& ga : a.ensure_grad()) ga += g;
    });
  }
  return out;
}

template <class T>
Tensor<T> mean(Tape<T>& tape, const Tensor<T>& a) {
  return scale(tape, sum(tape, a), T(1) / static_cast<T>(a.size()));
}

/// sqrt(sum(a^2)). The gradient at a == 0 is taken as 0.
template <class T>
Tensor<T> frobenius_norm(Tape<T>& tape, const Tensor<T>& a) {
  T ss = 0;
  for (T v : a.data()) ss += v * v;
  const T norm = std::sqrt(ss);
  Tensor<T> out = Tensor<T>::scalar(norm);
  if (tape.tracks({&a})) {
    tape.record(out, [a, out, norm]() mutable {
      if (norm == T(0)) return;
      const T g = out.grad()[0] / norm;
      auto ga = a.ensure_grad();
      auto pa = a.data();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g * pa[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Indexing and layout
// ---------------------------------------------------------------------------

/// Gathers rows `ids` of table[vocab x d] into [ids.size() x d].
template <class T>
Tensor<T> embedding_lookup(Tape<T>& tape, const Tensor<T>& table, std::span<const std::int32_t> ids) {
  if (table.rank() != 2) throw DimensionError("embedding_lookup: table must be a matrix");
  if (ids.empty()) throw InputError("embedding_lookup: no ids");
  const std::size_t rows = table.dim(0), d = table.dim(1);
  for (auto id : ids)
    if (id < 0 || static_cast<std::size_t>(id) >= rows)
      throw IndexError("embedding_lookup: id " + std::to_string(id) + " outside table of " + std::to_string(rows) +
                       " rows");
  Tensor<T> out(Shape{ids.size(), d});
  auto pt = table.data();
  auto po = out.data();
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy_n(pt.data() + static_cast<std::size_t>(ids[i]) * d, d, po.data() + i * d);
  if (tape.tracks({&table})) {
    std::vector<std::int32_t> idv(ids.begin(), ids.end());
    tape.record(out, [table, out, idv = std::move(idv), d]() mutable {
      auto g = out.grad();
      auto gt = table.ensure_grad();
      for (std::size_t i = 0; i < idv.size(); ++i)
        for (std::size_t j = 0; j < d; ++j) gt[static_cast<std::size_t>(idv[i]) * d + j] += g[i * d + j];
    });
  }
  return out;
}

template <class T>
Tensor<T> concat_last_axis(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  Shape lead_a(a.shape().begin(), a.shape().end() - 1), lead_b(b.shape().begin(), b.shape().end() - 1);
  if (lead_a != lead_b)
    throw DimensionError("concat_last_axis: leading shapes differ " + detail::shapes(a.shape(), b.shape()));
  const std::size_t da = a.last_dim(), db = b.last_dim(), rows = a.rows();
  Shape shape = a.shape();
  shape.back() = da + db;
  Tensor<T> out(shape);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(a.data().data() + r * da, da, out.data().data() + r * (da + db));
    std::copy_n(b.data().data() + r * db, db, out.data().data() + r * (da + db) + da);
  }
  if (tape.tracks({&a, &b})) {
    tape.record(out, [a, b, out, da, db, rows]() mutable {
      auto g = out.grad();
      if (a.requires_grad()) {
        auto ga = a.ensure_grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < da; ++j) ga[r * da + j] += g[r * (da + db) + j];
      }
      if (b.requires_grad()) {
        auto gb = b.ensure_grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < db; ++j) gb[r * db + j] += g[r * (da + db) + da + j];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

/// Multi-head causal self-attention over already-projected q, k, v.
///
/// q, k, v: [batch*len x heads*head_dim], rows ordered (batch, position).
/// Head h owns columns [h*head_dim, (h+1)*head_dim). Scores are scaled by
/// 1/sqrt(head_dim) and position t attends to positions <= t only.
template <class T>
Tensor<T> causal_attention(Tape<T>& tape, const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                           std::size_t batch, std::size_t len, std::size_t heads) {
  if (q.shape() != k.shape() || q.shape() != v.shape() || q.rank() != 2)
    throw DimensionError("causal_attention: q/k/v shapes differ " + detail::shapes(q.shape(), k.shape()));
  if (q.dim(0) != batch * len) throw DimensionError("causal_attention: rows != batch*len");
  const std::size_t width = q.dim(1);
  if (heads == 0 || width % heads != 0) throw DimensionError("causal_attention: width not divisible by heads");
  const std::size_t hd = width / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(hd));
  const bool track = tape.tracks({&q, &k, &v});

  Tensor<T> out(q.shape());
  std::vector<T> probs(track ? batch * heads * len * len : len * len);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t base = b * len * width + h * hd;
      T* p = probs.data() + (track ? (b * heads + h) * len * len : 0);
      blas::gemm<T>(blas::Op::None, blas::Op::Trans, len, len, hd, scale, q.data().data() + base, width,
                    k.data().data() + base, width, T(0), p, len);
      for (std::size_t i = 0; i < len; ++i) {
        T* row = p + i * len;
        const T mx = *std::max_element(row, row + i + 1);
        T z = 0;
        for (std::size_t j = 0; j <= i; ++j) z += (row[j] = std::exp(row[j] - mx));
        for (std::size_t j = 0; j <= i; ++j) row[j] /= z;
        for (std::size_t j = i + 1; j < len; ++j) row[j] = T(0);
      }
      blas::gemm<T>(blas::Op::None, blas::Op::None, len, hd, len, T(1), p, len, v.data().data() + base, width,
                    T(0), out.data().data() + base, width);
    }
  }
  if (track) {
    tape.record(out, [q, k, v, out, probs = std::move(probs), batch, len, heads, width, hd, scale]() mutable {
      const T* g = out.grad().data();
      std::vector<T> dp(len * len);
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t h = 0; h < heads; ++h) {
          const std::size_t base = b * len * width + h * hd;
          const T* p = probs.data() + (b * heads + h) * len * len;
          if (v.requires_grad())
            blas::gemm<T>(blas::Op::Trans, blas::Op::None, len, hd, len, T(1), p, len, g + base, width, T(1),
                          v.ensure_grad().data() + base, width);
          if (!q.requires_grad() && !k.requires_grad()) continue;
          blas::gemm<T>(blas::Op::None, blas::Op::Trans, len, len, hd, T(1), g + base, width,
                        v.data().data() + base, width, T(0), dp.data(), len);
          for (std::size_t i = 0; i < len; ++i) {
            T* row = dp.data() + i * len;
            const T* prow = p + i * len;
            T dot = 0;
            for (std::size_t j = 0; j <= i; ++j) dot += row[j] * prow[j];
            for (std::size_t j = 0; j < len; ++j) row[j] = j <= i ? prow[j] * (row[j] - dot) : T(0);
          }
          if (q.requires_grad())
            blas::gemm<T>(blas::Op::None, blas::Op::None, len, hd, len, scale, dp.data(), len,
                          k.data().data() + base, width, T(1), q.ensure_grad().data() + base, width);
          if (k.requires_grad())
            blas::gemm<T>(blas::Op::Trans, blas::Op::None, len, hd, len, scale, dp.data(), len,
                          q.data().data() + base, width, T(1), k.ensure_grad().data() + base, width);
        }
      }
    });
  }
  return out;
}

}  // namespace pat
