#pragma once

#include <cmath>
#include <string>
#include <vector>

#include <json.hpp>

#include "pat/errors.hpp"
#include "pat/lora.hpp"
#include "pat/model.hpp"
#include "pat/sparsify.hpp"
#include "pat/tensor.hpp"

namespace pat {

struct LayerParams {
  std::string name;
  std::size_t before = 0;
  std::size_t after = 0;
};

/// Outcome of merge-and-slice.
struct PruneReport {
  std::size_t d = 0;
  std::size_t d_kept = 0;
  std::vector<LayerParams> layers;
  std::size_t params_before = 0;
  std::size_t params_after = 0;
  double ratio = 0.0;  ///< 1 - params_after / params_before
  std::size_t snap_disagreements = 0;
  double max_residual = 0.0;  ///< filled in by equivalence verification

  nlohmann::json to_json() const {
    return {{"d", d},
            {"d_kept", d_kept},
            {"ratio", ratio},
            {"params_before", params_before},
            {"params_after", params_after},
            {"snap_disagreements", snap_disagreements},
            {"max_residual", max_residual}};
  }
};

/// Folds every LoRA adapter into its base weight.
template <class T>
void merge_lora_all(ModelState<T>& m) {
  if (m.lora_merged) throw LifecycleError("LoRA adapters are already merged");
  for (std::size_t l = 0; l < m.base.blocks.size(); ++l)
    for (std::size_t k = 0; k < kBlockProjections; ++k)
      m.base.blocks[l].w[k] = merge_lora(m.base.blocks[l].w[k], m.lora[l][k]);
  m.base.lm_head = merge_lora(m.base.lm_head, m.lora_head);
  m.lora_merged = true;
}

/// W_D = M_snap ⊙ (D W) for an upstream weight W[d x k] whose output feeds the sparsifier.
template <class T>
Tensor<T> merge_hsm(const Tensor<T>& w, const HybridSparsifier<T>& hsm, const BinaryMask& bmask) {
  const std::size_t d = hsm.width(), r = hsm.rank();
  if (w.rank() != 2 || w.dim(0) != d || bmask.d != d)
    throw DimensionError("merge_hsm: weight " + to_string(w.shape()) + " vs sparsifier width " + std::to_string(d));
  bmask.validate();
  const std::size_t k = w.dim(1);
  // low = diag(v) L0 W  [r x k]
  Tensor<T> low(Shape{r, k});
  blas::gemm<T>(blas::Op::None, blas::Op::None, r, k, d, T(1), hsm.l0.data().data(), d, w.data().data(), k, T(0),
                low.data().data(), k);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < k; ++j) low[i * k + j] *= hsm.v[i];
  Tensor<T> out = w.detach();
  blas::gemm<T>(blas::Op::None, blas::Op::None, d, k, r, T(1), hsm.l1.data().data(), r, low.data().data(), k, T(1),
                out.data().data(), k);
  const auto keep = bmask.template indicator<T>();
  for (std::size_t i = 0; i < d; ++i)
    if (keep[i] == T(0)) std::fill_n(out.data().data() + i * k, k, T(0));
  return out;
}

/// Folds both sparsifiers of every block into W_O and W_down using the snapped mask.
template <class T>
void merge_hsm_all(ModelState<T>& m, const BinaryMask& bmask) {
  if (!m.lora_merged) throw LifecycleError("merge LoRA adapters before merging sparsifiers");
  if (m.hsm_merged) throw LifecycleError("sparsifiers are already merged");
  for (std::size_t l = 0; l < m.base.blocks.size(); ++l) {
    auto& blk = m.base.blocks[l];
    blk[Proj::O] = merge_hsm(blk[Proj::O], m.hsm[l].attn, bmask);
    blk[Proj::Down] = merge_hsm(blk[Proj::Down], m.hsm[l].ffn, bmask);
  }
  m.snap = bmask;
  m.hsm_merged = true;
}

/// sqrt(d / d_kept): the RMSNorm gain factor that keeps outputs on kept
/// channels unchanged once the zero channels are removed from the mean.
inline double norm_gain_rescale(const BinaryMask& bmask) {
  bmask.validate();
  return std::sqrt(static_cast<double>(bmask.d) / static_cast<double>(bmask.d_kept()));
}

namespace detail {

template <class T>
Tensor<T> keep_columns(const Tensor<T>& w, const std::vector<std::size_t>& cols) {
  const std::size_t rows = w.dim(0), n = w.dim(1);
  Tensor<T> out(Shape{rows, cols.size()});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < cols.size(); ++j) out[r * cols.size() + j] = w[r * n + cols[j]];
  return out;
}

template <class T>
Tensor<T> keep_rows(const Tensor<T>& w, const std::vector<std::size_t>& rows) {
  const std::size_t n = w.dim(1);
  Tensor<T> out(Shape{rows.size(), n});
  for (std::size_t i = 0; i < rows.size(); ++i) std::copy_n(w.data().data() + rows[i] * n, n, out.data().data() + i * n);
  return out;
}

}  // namespace detail

struct SliceOptions {
  /// Disable only to demonstrate that slicing without the gain correction
  /// breaks equivalence.
  bool rescale_gains = true;
};

/// Removes the hidden channels outside `bmask` from a dense decoder whose
/// masked channels are already zero in every residual contribution.
template <class T>
DecoderWeights<T> slice_weights(const DecoderWeights<T>& w, const BinaryMask& bmask, SliceOptions opt = {}) {
  bmask.validate();
  if (bmask.d != w.hidden()) throw DimensionError("slice: mask width != hidden width");
  const auto& kept = bmask.kept;
  auto gain = [&](const Tensor<T>& g) {
    Tensor<T> out(Shape{kept.size()});
    for (std::size_t j = 0; j < kept.size(); ++j) out[j] = g[kept[j]];
    return out;
  };
  DecoderWeights<T> out;
  out.config = w.config;
  out.config.d_attn = w.config.attn_width();
  out.config.d_model = bmask.d_kept();
  // RMS over d_kept channels: scaling eps by d/d_kept keeps the normalizer
  // identical to the full-width one.
  out.norm_eps = static_cast<T>(static_cast<double>(w.norm_eps) * static_cast<double>(bmask.d) /
                                static_cast<double>(bmask.d_kept()));
  out.norm_gain_scale = w.norm_gain_scale * (opt.rescale_gains ? norm_gain_rescale(bmask) : 1.0);
  out.tok_emb = detail::keep_columns(w.tok_emb, kept);
  out.pos_emb = detail::keep_columns(w.pos_emb, kept);
  for (const auto& b : w.blocks) {
    DecoderBlock<T> nb;
    nb.attn_norm = gain(b.attn_norm);
    nb[Proj::Q] = detail::keep_columns(b[Proj::Q], kept);
    nb[Proj::K] = detail::keep_columns(b[Proj::K], kept);
    nb[Proj::V] = detail::keep_columns(b[Proj::V], kept);
    nb[Proj::O] = detail::keep_rows(b[Proj::O], kept);
    nb.ffn_norm = gain(b.ffn_norm);
    nb[Proj::Up] = detail::keep_columns(b[Proj::Up], kept);
    nb[Proj::Gate] = detail::keep_columns(b[Proj::Gate], kept);
    nb[Proj::Down] = detail::keep_rows(b[Proj::Down], kept);
    out.blocks.push_back(std::move(nb));
  }
  out.final_norm = gain(w.final_norm);
  out.lm_head = detail::keep_columns(w.lm_head, kept);
  return out;
}

template <class T>
std::vector<LayerParams> layer_params(const DecoderWeights<T>& before, const DecoderWeights<T>& after) {
  std::vector<LayerParams> out;
  out.push_back({"embeddings", before.tok_emb.size() + before.pos_emb.size(), after.tok_emb.size() + after.pos_emb.size()});
  for (std::size_t l = 0; l < before.blocks.size(); ++l)
    out.push_back({"blocks." + std::to_string(l), before.block_parameter_count(l), after.block_parameter_count(l)});
  out.push_back({"final_norm", before.final_norm.size(), after.final_norm.size()});
  out.push_back({"lm_head", before.lm_head.size(), after.lm_head.size()});
  return out;
}

template <class T>
struct PruneResult {
  DecoderWeights<T> pruned;
  PruneReport report;
};

/// Slices a model whose adapters and sparsifiers have been merged.
template <class T>
PruneResult<T> slice_model(const ModelState<T>& m, const BinaryMask& bmask, SliceOptions opt = {}) {
  if (!m.lora_merged || !m.hsm_merged)
    throw LifecycleError("slice_model: LoRA adapters and sparsifiers must be merged first");
  PruneResult<T> res;
  res.pruned = slice_weights(m.base, bmask, opt);
  auto& rep = res.report;
  rep.d = bmask.d;
  rep.d_kept = bmask.d_kept();
  rep.layers = layer_params(m.base, res.pruned);
  rep.params_before = m.base.parameter_count();
  rep.params_after = res.pruned.parameter_count();
  rep.ratio = 1.0 - static_cast<double>(rep.params_after) / static_cast<double>(rep.params_before);
  return res;
}

/// Full inference-time transformation of a trained model: merge LoRA, snap
/// the mask, merge sparsifiers, slice. `m` is left in the merged state and is
/// the reference model for equivalence checks.
template <class T>
PruneResult<T> merge_and_slice(ModelState<T>& m, SliceOptions opt = {}) {
  const MaskSnap snap = finalize_mask(*m.mask);
  merge_lora_all(m);
  merge_hsm_all(m, snap.mask);
  auto res = slice_model(m, snap.mask, opt);
  res.report.snap_disagreements = snap.disagreements;
  return res;
}

}  // namespace pat
