#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "pat/errors.hpp"
#include "pat/ops.hpp"
#include "pat/random.hpp"
#include "pat/tape.hpp"
#include "pat/tensor.hpp"

namespace pat {

// ---------------------------------------------------------------------------
// Gating schedule
// ---------------------------------------------------------------------------

/// Inverse temperature of the gating sigmoid at training step `s`.
///
///   s == 0         -> 0 (limit of the log schedule; the gate is then exactly 1)
///   1 <= s < s0    -> 1 / (1 - ln(s)/ln(s0))
///   s >= s0        -> 1 / eps_temp
inline double temperature(std::int64_t s, std::int64_t s0, double eps_temp) {
  if (s0 <= 1) throw ConfigError("temperature: milestone step s0 must be >= 2, got " + std::to_string(s0));
  if (!(eps_temp > 0.0)) throw ConfigError("temperature: eps_temp must be positive");
  if (s < 0) throw ConfigError("temperature: negative step");
  if (s == 0) return 0.0;
  if (s < s0) return 1.0 / (1.0 - std::log(static_cast<double>(s)) / std::log(static_cast<double>(s0)));
  return 1.0 / eps_temp;
}

/// Additive gate offset: decays linearly from 0.5 to 0 over the first half of
/// the milestone, then stays at 0.
inline double offset(std::int64_t s, std::int64_t s0) {
  if (s < 0) throw ConfigError("offset: negative step");
  if (2 * s < s0) return -static_cast<double>(s) / static_cast<double>(s0) + 0.5;
  return 0.0;
}

// ---------------------------------------------------------------------------
// Binary mask
// ---------------------------------------------------------------------------

/// Kept channel indices of a hidden dimension of width `d`.
struct BinaryMask {
  std::vector<std::size_t> kept;
  std::size_t d = 0;

  std::size_t d_kept() const { return kept.size(); }

  static BinaryMask all(std::size_t d) {
    BinaryMask m{std::vector<std::size_t>(d), d};
    std::iota(m.kept.begin(), m.kept.end(), std::size_t{0});
    return m;
  }

  void validate() const {
    if (kept.empty()) throw ConfigError("binary mask keeps no channels");
    for (std::size_t i = 0; i < kept.size(); ++i) {
      if (kept[i] >= d) throw IndexError("binary mask index " + std::to_string(kept[i]) + " >= d=" + std::to_string(d));
      if (i > 0 && kept[i] <= kept[i - 1]) throw ConfigError("binary mask indices must be unique and ascending");
    }
  }

  /// 0/1 vector of length d.
  template <class T>
  Tensor<T> indicator() const {
    Tensor<T> m(Shape{d}, T(0));
    for (auto i : kept) m[i] = T(1);
    return m;
  }

  bool operator==(const BinaryMask&) const = default;
};

// ---------------------------------------------------------------------------
// Unified sparsification mask
// ---------------------------------------------------------------------------

/// The single trainable mask shared by every sparsifier in a model.
template <class T>
struct UnifiedMask {
  Tensor<T> proxy;  ///< W_M, one proxy weight per hidden channel
  std::int64_t s0 = 2;
  double eps_temp = 1e-3;
  std::size_t n_target = 1;
  std::int64_t step = 0;

  static UnifiedMask create(std::size_t d, std::int64_t s0, double eps_temp, std::size_t n_target) {
    UnifiedMask m;
    m.proxy = Tensor<T>(Shape{d}, T(0), true);
    m.s0 = s0;
    m.eps_temp = eps_temp;
    m.n_target = n_target;
    m.validate();
    return m;
  }

  std::size_t width() const { return proxy.size(); }

  void validate() const {
    if (s0 < 2) throw ConfigError("mask: s0 must be >= 2, got " + std::to_string(s0));
    if (!(eps_temp > 0.0)) throw ConfigError("mask: eps_temp must be positive");
    if (n_target == 0 || n_target > width())
      throw ConfigError("mask: n_target must lie in [1, d], got " + std::to_string(n_target));
    if (step < 0) throw ConfigError("mask: negative step");
  }

  double tau(std::int64_t s) const { return temperature(s, s0, eps_temp); }
  double beta(std::int64_t s) const { return offset(s, s0); }

  /// Indicator count of positive proxy weights.
  std::size_t active_count() const {
    return static_cast<std::size_t>(std::count_if(proxy.data().begin(), proxy.data().end(), [](T w) { return w > T(0); }));
  }
};

/// M = sigmoid(tau(s) * W_M) + beta(s), differentiable in W_M only.
template <class T>
Tensor<T> gate(Tape<T>& tape, const UnifiedMask<T>& mask, std::int64_t s) {
  const T tau = static_cast<T>(mask.tau(s));
  const T beta = static_cast<T>(mask.beta(s));
  return add_scalar(tape, sigmoid(tape, scale(tape, mask.proxy, tau)), beta);
}

/// Gate values without recording.
template <class T>
std::vector<T> gate_values(const UnifiedMask<T>& mask, std::int64_t s) {
  Tape<T> off(false);
  return gate(off, mask, s).values();
}

/// Active-channel regularizer.
///
/// Forward: |N_target - #(W_M > 0)|.
/// Backward (straight-through): gradient of |N_target - sum_i sigmoid(tau(s) W_M,i)|.
template <class T>
Tensor<T> active_loss(Tape<T>& tape, const UnifiedMask<T>& mask, std::int64_t s) {
  const auto count = static_cast<double>(mask.active_count());
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(std::abs(static_cast<double>(mask.n_target) - count)));
  if (tape.tracks({&mask.proxy})) {
    const T tau = static_cast<T>(mask.tau(s));
    const T target = static_cast<T>(mask.n_target);
    tape.record(out, [w = mask.proxy, out, tau, target]() mutable {
      auto pw = w.data();
      T soft = 0;
      for (T x : pw) soft += detail::sigmoid(tau * x);
      const T diff = target - soft;
      const T sign = diff > T(0) ? T(1) : (diff < T(0) ? T(-1) : T(0));
      const T g = out.grad()[0];
      auto gw = w.ensure_grad();
      for (std::size_t i = 0; i < pw.size(); ++i) {
        const T sg = detail::sigmoid(tau * pw[i]);
        gw[i] += g * (-sign) * tau * sg * (T(1) - sg);
      }
    });
  }
  return out;
}

/// Result of snapping the trained mask to 0/1.
struct MaskSnap {
  BinaryMask mask;
  std::size_t disagreements = 0;  ///< gated values further than 0.01 from their snapped value
};

/// Keeps the n_target channels with the largest proxy weights (lower index
/// wins ties). Disagreements are measured against the gate at mask.step.
template <class T>
MaskSnap finalize_mask(const UnifiedMask<T>& mask) {
  const std::size_t d = mask.width();
  std::vector<std::size_t> order(d);
  std::iota(order.begin(), order.end(), std::size_t{0});
  auto w = mask.proxy.data();
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return w[a] > w[b]; });
  MaskSnap snap;
  snap.mask.d = d;
  snap.mask.kept.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(mask.n_target));
  std::sort(snap.mask.kept.begin(), snap.mask.kept.end());
  const auto indicator = snap.mask.template indicator<T>();
  const auto gated = gate_values(mask, mask.step);
  for (std::size_t i = 0; i < d; ++i)
    if (std::abs(static_cast<double>(gated[i] - indicator[i])) > 0.01) ++snap.disagreements;
  return snap;
}

// ---------------------------------------------------------------------------
// Hybrid sparsification module
// ---------------------------------------------------------------------------

/// Low-rank-plus-identity channel transform D = L1 diag(v) L0 + I, masked by
/// the shared unified mask.
template <class T>
struct HybridSparsifier {
  Tensor<T> l0;  ///< [r x d]
  Tensor<T> v;   ///< [r]
  Tensor<T> l1;  ///< [d x r]
  std::shared_ptr<UnifiedMask<T>> mask;

  static HybridSparsifier create(std::shared_ptr<UnifiedMask<T>> mask, std::size_t rank, Rng& rng) {
    if (!mask) throw ConfigError("sparsifier needs a mask");
    const std::size_t d = mask->width();
    validate_rank(rank, d);
    const double stddev = 1.0 / std::sqrt(static_cast<double>(d));
    HybridSparsifier h;
    h.l0 = normal_tensor<T>(Shape{rank, d}, stddev, rng, true);
    h.v = Tensor<T>(Shape{rank}, T(0), true);
    h.l1 = normal_tensor<T>(Shape{d, rank}, stddev, rng, true);
    h.mask = std::move(mask);
    return h;
  }

  static void validate_rank(std::size_t rank, std::size_t d) {
    if (rank < 1 || 2 * rank >= d)
      throw ConfigError("sparsifier rank must satisfy 1 <= r < d/2, got r=" + std::to_string(rank) +
                        " d=" + std::to_string(d));
  }

  std::size_t rank() const { return v.size(); }
  std::size_t width() const { return l1.dim(0); }

  static std::size_t parameter_count(std::size_t d, std::size_t r) { return 2 * d * r + r; }
  std::size_t parameter_count() const { return parameter_count(width(), rank()); }

  /// Materializes D = L1 diag(v) L0 + I as a d x d matrix.
  Tensor<T> dense_transform() const {
    const std::size_t d = width(), r = rank();
    Tensor<T> scaled(Shape{r, d});
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < d; ++j) scaled[i * d + j] = v[i] * l0[i * d + j];
    Tensor<T> dmat = Tensor<T>::identity(d);
    blas::gemm<T>(blas::Op::None, blas::Op::None, d, d, r, T(1), l1.data().data(), r, scaled.data().data(), d,
                  T(1), dmat.data().data(), d);
    return dmat;
  }
};

/// M ⊙ (L1 (v ⊙ (L0 h)) + h) over the last axis of h, with a precomputed gate M.
template <class T>
Tensor<T> hsm_forward(Tape<T>& tape, const HybridSparsifier<T>& hsm, const Tensor<T>& h, const Tensor<T>& gate_m) {
  if (h.last_dim() != hsm.width())
    throw DimensionError("hsm_forward: input " + to_string(h.shape()) + " vs width " + std::to_string(hsm.width()));
  auto low = linear(tape, h, hsm.l0);
  low = mul(tape, low, hsm.v);
  auto up = linear(tape, low, hsm.l1);
  return mul(tape, add(tape, up, h), gate_m);
}

template <class T>
Tensor<T> hsm_forward(Tape<T>& tape, const HybridSparsifier<T>& hsm, const Tensor<T>& h, std::int64_t s) {
  return hsm_forward(tape, hsm, h, gate(tape, *hsm.mask, s));
}

/// Sum over sparsifiers of ||L0 L0^T - I||_F + ||L1^T L1 - I||_F.
template <class T>
Tensor<T> identity_loss(Tape<T>& tape, std::span<const HybridSparsifier<T>* const> hsms) {
  Tensor<T> total = Tensor<T>::scalar(T(0));
  for (const auto* h : hsms) {
    const auto eye = Tensor<T>::identity(h->rank());
    auto gram0 = linear(tape, h->l0, h->l0);
    auto l1t = transpose(tape, h->l1);
    auto gram1 = linear(tape, l1t, l1t);
    auto term = add(tape, frobenius_norm(tape, sub(tape, gram0, eye)), frobenius_norm(tape, sub(tape, gram1, eye)));
    total = add(tape, total, term);
  }
  return total;
}

}  // namespace pat
