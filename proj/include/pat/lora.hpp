#pragma once

#include <cmath>
#include <cstddef>
#include <string>

#include "pat/errors.hpp"
#include "pat/ops.hpp"
#include "pat/random.hpp"
#include "pat/tape.hpp"
#include "pat/tensor.hpp"

namespace pat {

/// Low-rank adapter for a frozen linear weight W[d_out x d_in]:
/// effective weight W + (alpha / rank) * B * A.
template <class T>
struct LoraAdapter {
  Tensor<T> a;  ///< [rank x d_in]
  Tensor<T> b;  ///< [d_out x rank], zero at init
  T alpha = T(0);
  bool consumed = false;  ///< set once merged into its base weight

  static LoraAdapter create(std::size_t d_out, std::size_t d_in, std::size_t rank, T alpha, Rng& rng) {
    if (rank == 0) throw ConfigError("lora rank must be >= 1");
    LoraAdapter ad;
    ad.a = normal_tensor<T>(Shape{rank, d_in}, 1.0 / std::sqrt(static_cast<double>(d_in)), rng, true);
    ad.b = Tensor<T>(Shape{d_out, rank}, T(0), true);
    ad.alpha = alpha;
    return ad;
  }

  std::size_t rank() const { return a.dim(0); }
  std::size_t d_in() const { return a.dim(1); }
  std::size_t d_out() const { return b.dim(0); }
  T scaling() const { return alpha / static_cast<T>(rank()); }
  std::size_t parameter_count() const { return a.size() + b.size(); }

  /// (alpha / rank) * B * A
  Tensor<T> delta() const {
    Tensor<T> d(Shape{d_out(), d_in()});
    blas::gemm<T>(blas::Op::None, blas::Op::None, d_out(), d_in(), rank(), scaling(), b.data().data(), rank(),
                  a.data().data(), d_in(), T(0), d.data().data(), d_in());
    return d;
  }
};

/// x W^T + (alpha/r) (x A^T) B^T. Gradients reach A and B; W is expected to be frozen.
template <class T>
Tensor<T> lora_forward(Tape<T>& tape, const Tensor<T>& w, const LoraAdapter<T>& adapter, const Tensor<T>& x) {
  if (adapter.consumed) throw LifecycleError("lora_forward: adapter was already merged");
  if (w.rank() != 2 || adapter.d_in() != w.dim(1) || adapter.d_out() != w.dim(0))
    throw DimensionError("lora_forward: adapter " + std::to_string(adapter.d_out()) + "x" +
                         std::to_string(adapter.d_in()) + " vs weight " + to_string(w.shape()));
  auto base = linear(tape, x, w);
  auto low = linear(tape, x, adapter.a);
  auto delta = scale(tape, linear(tape, low, adapter.b), adapter.scaling());
  return add(tape, base, delta);
}

/// W + (alpha/r) B A. Marks the adapter consumed; merging twice is an error.
template <class T>
Tensor<T> merge_lora(const Tensor<T>& w, LoraAdapter<T>& adapter) {
  if (adapter.consumed) throw LifecycleError("merge_lora: adapter already merged");
  if (adapter.d_in() != w.dim(1) || adapter.d_out() != w.dim(0))
    throw DimensionError("merge_lora: adapter does not match weight " + to_string(w.shape()));
  Tensor<T> merged = w.detach();
  const auto d = adapter.delta();
  for (std::size_t i = 0; i < merged.size(); ++i) merged[i] += d[i];
  adapter.consumed = true;
  return merged;
}

}  // namespace pat
