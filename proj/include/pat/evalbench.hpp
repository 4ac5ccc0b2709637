#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "pat/data.hpp"
#include "pat/errors.hpp"
#include "pat/model.hpp"
#include "pat/ops.hpp"

namespace pat {

template <class T>
using LogitsFn = std::function<Tensor<T>(const TokenBatch&)>;

template <class T>
LogitsFn<T> logits_fn(const DecoderWeights<T>& w) {
  return [&w](const TokenBatch& b) { return infer(w, b); };
}

template <class T>
LogitsFn<T> logits_fn(const ModelState<T>& m, ForwardMode mode) {
  return [&m, mode](const TokenBatch& b) {
    ForwardOptions<T> opt;
    opt.mode = mode;
    return infer(m, b, opt);
  };
}

struct HeldoutScore {
  double mean_ce = 0;
  double perplexity = 0;
  double accuracy = 0;  ///< argmax == target over scored positions
  std::size_t scored = 0;
};

/// Scores every full window of `corpus` (batched `batch_windows` at a time).
template <class T>
HeldoutScore score_heldout(const LogitsFn<T>& fn, const TokenStream& corpus, std::size_t seq_len,
                           std::size_t batch_windows = 16) {
  const auto starts = window_starts(corpus, seq_len);
  if (starts.empty()) throw InputError("evaluation corpus is shorter than one window");
  double ce_sum = 0;
  std::size_t scored = 0, correct = 0;
  for (std::size_t i = 0; i < starts.size(); i += batch_windows) {
    const std::size_t n = std::min(batch_windows, starts.size() - i);
    const auto batch = make_batch<T>(corpus, std::span<const std::size_t>(starts.data() + i, n), seq_len);
    const auto logits = fn(batch.inputs);
    const std::size_t vocab = logits.last_dim();
    for (std::size_t r = 0; r < batch.targets.size(); ++r) {
      if (batch.weights[r] == T(0)) continue;
      const T* row = logits.data().data() + r * vocab;
      const T mx = *std::max_element(row, row + vocab);
      double z = 0;
      for (std::size_t j = 0; j < vocab; ++j) z += std::exp(static_cast<double>(row[j] - mx));
      const auto tgt = static_cast<std::size_t>(batch.targets[r]);
      ce_sum += std::log(z) + static_cast<double>(mx) - static_cast<double>(row[tgt]);
      const auto arg = static_cast<std::size_t>(std::max_element(row, row + vocab) - row);
      correct += arg == tgt;
      ++scored;
    }
  }
  if (scored == 0) throw InputError("evaluation corpus has no scored positions");
  HeldoutScore s;
  s.scored = scored;
  s.mean_ce = ce_sum / static_cast<double>(scored);
  s.perplexity = std::exp(s.mean_ce);
  s.accuracy = static_cast<double>(correct) / static_cast<double>(scored);
  return s;
}

/// exp(mean next-token cross-entropy) over held-out windows.
template <class T>
double perplexity(const LogitsFn<T>& fn, const TokenStream& corpus, std::size_t seq_len) {
  return score_heldout(fn, corpus, seq_len).perplexity;
}

/// Random token sequences for equivalence checks.
inline TokenBatch random_tokens(std::size_t vocab, std::size_t len, std::uint64_t seed, std::size_t batch = 1) {
  Rng rng(seed);
  std::uniform_int_distribution<std::int32_t> tok(0, static_cast<std::int32_t>(vocab) - 1);
  TokenBatch b{batch, len, std::vector<std::int32_t>(batch * len)};
  for (auto& id : b.ids) id = tok(rng);
  return b;
}

inline constexpr double kEquivalenceTolerance32 = 1e-4;
inline constexpr double kEquivalenceTolerance64 = 1e-8;

template <class T>
constexpr double equivalence_tolerance() {
  return sizeof(T) == sizeof(float) ? kEquivalenceTolerance32 : kEquivalenceTolerance64;
}

/// Max L-infinity logit difference between two models over `n_inputs` random
/// sequences of length `len`.
template <class T>
double max_logit_residual(const LogitsFn<T>& reference, const LogitsFn<T>& candidate, std::size_t vocab,
                          std::size_t len, std::size_t n_inputs, std::uint64_t seed) {
  if (n_inputs == 0) throw InputError("verify: n_inputs must be >= 1");
  double worst = 0;
  for (std::size_t i = 0; i < n_inputs; ++i) {
    const auto batch = random_tokens(vocab, len, seed + i);
    const auto a = reference(batch);
    const auto b = candidate(batch);
    if (a.shape() != b.shape()) throw DimensionError("verify: logit shapes differ");
    for (std::size_t j = 0; j < a.size(); ++j) {
      const double diff = std::abs(static_cast<double>(a[j]) - static_cast<double>(b[j]));
      if (!(diff <= worst)) worst = std::isnan(diff) ? INFINITY : diff;
    }
  }
  return worst;
}

/// Residual between the merged masked model and its sliced counterpart.
template <class T>
double verify_equivalence(const ModelState<T>& merged, const DecoderWeights<T>& pruned, std::size_t n_inputs,
                          std::uint64_t seed) {
  const auto& a = merged.config();
  const auto& b = pruned.config;
  if (a.vocab_size != b.vocab_size || a.max_seq_len != b.max_seq_len || a.n_layers != b.n_layers)
    throw ConfigError("verify: models disagree on vocab_size / max_seq_len / n_layers");
  return max_logit_residual<T>(logits_fn(merged, ForwardMode::Masked), logits_fn(pruned), a.vocab_size,
                               a.max_seq_len, n_inputs, seed);
}

// ---------------------------------------------------------------------------
// Latency
// ---------------------------------------------------------------------------

struct BenchResult {
  std::string model_id;
  std::size_t d = 0;
  std::size_t d_kept = 0;
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::size_t reps = 0;
  double mean_ms = 0;
  double std_ms = 0;
  double median_ms = 0;
  std::size_t params = 0;
  std::size_t alloc_bytes = 0;  ///< peak tensor bytes during a forward, weights included
};

inline void write_bench_header(std::ostream& os) {
  os << "model_id,d,d_kept,batch,seq,mean_ms,std_ms,params,alloc_bytes\n";
}

inline void write_bench_row(std::ostream& os, const BenchResult& r) {
  os << r.model_id << ',' << r.d << ',' << r.d_kept << ',' << r.batch << ',' << r.seq << ',' << r.mean_ms << ','
     << r.std_ms << ',' << r.params << ',' << r.alloc_bytes << '\n';
}

/// Times plain dense forwards: `warmup` untimed runs, then `reps` timed ones
/// per batch size.
template <class T>
std::vector<BenchResult> bench_forward(const DecoderWeights<T>& w, const std::string& model_id,
                                       const std::vector<std::size_t>& batch_sizes, std::size_t seq,
                                       std::size_t reps, std::size_t warmup = 2) {
  if (reps < 5) throw ConfigError("bench: reps must be >= 5");
  if (warmup < 2) throw ConfigError("bench: warmup must be >= 2");
  std::vector<BenchResult> out;
  for (auto bs : batch_sizes) {
    const auto batch = random_tokens(w.config.vocab_size, seq, 1234, bs);
    for (std::size_t i = 0; i < warmup; ++i) (void)infer(w, batch);
    std::vector<double> ms;
    std::size_t peak = 0;
    for (std::size_t i = 0; i < reps; ++i) {
      AllocStats::reset_peak();
      const auto t0 = std::chrono::steady_clock::now();
      (void)infer(w, batch);
      ms.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
      peak = std::max(peak, AllocStats::peak());
    }
    BenchResult r;
    r.model_id = model_id;
    r.d = w.config.attn_width();
    r.d_kept = w.hidden();
    r.batch = bs;
    r.seq = seq;
    r.reps = reps;
    double sum = 0;
    for (double x : ms) sum += x;
    r.mean_ms = sum / static_cast<double>(ms.size());
    double var = 0;
    for (double x : ms) var += (x - r.mean_ms) * (x - r.mean_ms);
    r.std_ms = std::sqrt(var / static_cast<double>(ms.size() - 1));
    std::sort(ms.begin(), ms.end());
    r.median_ms = ms.size() % 2 ? ms[ms.size() / 2] : 0.5 * (ms[ms.size() / 2 - 1] + ms[ms.size() / 2]);
    r.params = w.parameter_count();
    r.alloc_bytes = peak;
    out.push_back(r);
  }
  return out;
}

/// t_base / t_pruned on medians.
inline double speedup(const BenchResult& base, const BenchResult& pruned) { return base.median_ms / pruned.median_ms; }

}  // namespace pat
