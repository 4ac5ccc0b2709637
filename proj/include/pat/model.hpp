#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "pat/errors.hpp"
#include "pat/lora.hpp"
#include "pat/ops.hpp"
#include "pat/random.hpp"
#include "pat/sparsify.hpp"
#include "pat/tape.hpp"
#include "pat/tensor.hpp"

namespace pat {

struct ModelConfig {
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t d_ff = 128;
  std::size_t vocab_size = 256;
  std::size_t max_seq_len = 64;
  std::uint64_t seed = 1;
  /// Width of the attention projections. 0 means d_model; sliced models keep
  /// the original width here because heads are never pruned.
  std::size_t d_attn = 0;

  std::size_t attn_width() const { return d_attn ? d_attn : d_model; }
  std::size_t head_dim() const { return attn_width() / n_heads; }

  void validate() const {
    auto positive = [](std::size_t v, const char* name) {
      if (v < 1) throw ConfigError(std::string("model.") + name + " must be >= 1");
    };
    positive(d_model, "d_model");
    positive(n_layers, "n_layers");
    positive(n_heads, "n_heads");
    positive(d_ff, "d_ff");
    positive(vocab_size, "vocab_size");
    positive(max_seq_len, "max_seq_len");
    if (attn_width() % n_heads != 0)
      throw ConfigError("model.d_model (" + std::to_string(attn_width()) + ") must be divisible by n_heads (" +
                        std::to_string(n_heads) + ")");
  }

  bool operator==(const ModelConfig&) const = default;
};

/// A batch of equal-length token sequences, row-major (batch, position).
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t len = 0;
  std::vector<std::int32_t> ids;

  void validate(const ModelConfig& cfg) const {
    if (batch == 0 || len == 0 || ids.size() != batch * len) throw InputError("token batch is empty or ragged");
    if (len > cfg.max_seq_len)
      throw ConfigError("sequence length " + std::to_string(len) + " exceeds max_seq_len " +
                        std::to_string(cfg.max_seq_len));
    for (auto id : ids)
      if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab_size)
        throw IndexError("token id " + std::to_string(id) + " outside vocabulary of " +
                         std::to_string(cfg.vocab_size));
  }
};

/// The seven linear projections of a decoder block.
enum class Proj : std::size_t { Q, K, V, O, Up, Gate, Down };
inline constexpr std::size_t kBlockProjections = 7;
inline constexpr std::array<const char*, kBlockProjections> kProjNames = {"wq", "wk", "wv", "wo",
                                                                         "w_up", "w_gate", "w_down"};

template <class T>
struct DecoderBlock {
  Tensor<T> attn_norm;                          ///< [d]
  std::array<Tensor<T>, kBlockProjections> w;  ///< indexed by Proj, each [d_out x d_in]
  Tensor<T> ffn_norm;                           ///< [d]

  Tensor<T>& operator[](Proj p) { return w[static_cast<std::size_t>(p)]; }
  const Tensor<T>& operator[](Proj p) const { return w[static_cast<std::size_t>(p)]; }
};

/// Plain dense decoder weights: what remains after all adapters and
/// sparsifiers are folded in. Also the representation of a sliced model.
template <class T>
struct DecoderWeights {
  ModelConfig config;
  T norm_eps = T(1e-6);
  /// Multiplies every RMSNorm gain. Sliced models carry sqrt(d / d_kept)
  /// here rather than in the gain tensors, where rounding would perturb them.
  double norm_gain_scale = 1.0;
  Tensor<T> tok_emb;  ///< [vocab x d]
  Tensor<T> pos_emb;  ///< [max_seq_len x d]
  std::vector<DecoderBlock<T>> blocks;
  Tensor<T> final_norm;  ///< [d]
  Tensor<T> lm_head;     ///< [vocab x d]

  std::size_t hidden() const { return tok_emb.dim(1); }

  /// Embeddings and head ~ Normal(0, 0.02^2); block projections ~ Normal(0, 1/fan_in)
  /// so the frozen FFN works in SiLU's nonlinear range; gains = 1.
  static DecoderWeights init(const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    DecoderWeights w;
    w.config = cfg;
    const std::size_t d = cfg.d_model, da = cfg.attn_width(), f = cfg.d_ff;
    constexpr double s = 0.02;
    auto proj = [&](std::size_t out, std::size_t in) {
      return normal_tensor<T>(Shape{out, in}, 1.0 / std::sqrt(static_cast<double>(in)), rng);
    };
    w.tok_emb = normal_tensor<T>(Shape{cfg.vocab_size, d}, s, rng);
    w.pos_emb = normal_tensor<T>(Shape{cfg.max_seq_len, d}, s, rng);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      DecoderBlock<T> b;
      b.attn_norm = Tensor<T>::ones(Shape{d});
      b[Proj::Q] = proj(da, d);
      b[Proj::K] = proj(da, d);
      b[Proj::V] = proj(da, d);
      b[Proj::O] = proj(d, da);
      b.ffn_norm = Tensor<T>::ones(Shape{d});
      b[Proj::Up] = proj(f, d);
      b[Proj::Gate] = proj(f, d);
      b[Proj::Down] = proj(d, f);
      w.blocks.push_back(std::move(b));
    }
    w.final_norm = Tensor<T>::ones(Shape{d});
    w.lm_head = normal_tensor<T>(Shape{cfg.vocab_size, d}, s, rng);
    return w;
  }

  /// Visits every tensor with a stable name, in serialization order.
  template <class F>
  void for_each(F&& fn) {
    fn(std::string("tok_emb"), tok_emb);
    fn(std::string("pos_emb"), pos_emb);
    for (std::size_t l = 0; l < blocks.size(); ++l) {
      const std::string p = "blocks." + std::to_string(l) + ".";
      fn(p + "attn_norm", blocks[l].attn_norm);
      for (std::size_t k = 0; k < kBlockProjections; ++k) fn(p + kProjNames[k], blocks[l].w[k]);
      fn(p + "ffn_norm", blocks[l].ffn_norm);
    }
    fn(std::string("final_norm"), final_norm);
    fn(std::string("lm_head"), lm_head);
  }
  template <class F>
  void for_each(F&& fn) const {
    const_cast<DecoderWeights*>(this)->for_each(
        [&](const std::string& n, Tensor<T>& t) { fn(n, static_cast<const Tensor<T>&>(t)); });
  }

  std::size_t block_parameter_count(std::size_t l) const {
    const auto& b = blocks.at(l);
    std::size_t n = b.attn_norm.size() + b.ffn_norm.size();
    for (const auto& t : b.w) n += t.size();
    return n;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each([&](const std::string&, const Tensor<T>& t) { n += t.size(); });
    return n;
  }

  DecoderWeights clone() const {
    DecoderWeights c = *this;
    c.for_each([](const std::string&, Tensor<T>& t) { t = t.clone(); });
    return c;
  }
};

// ---------------------------------------------------------------------------
// Trainable model state
// ---------------------------------------------------------------------------

struct SparsityOptions {
  std::size_t r_hio = 4;
  double eps_temp = 1e-3;
  std::size_t n_target = 1;
  std::int64_t s0 = 2;
};

struct LoraOptions {
  std::size_t rank = 8;
  double alpha = 16.0;
};

template <class T>
struct BlockSparsifiers {
  HybridSparsifier<T> attn;  ///< after the attention output projection
  HybridSparsifier<T> ffn;   ///< after the FFN down projection
};

/// Frozen base weights plus LoRA adapters on every linear layer, two
/// sparsifiers per block, and the unified mask they all share.
template <class T>
struct ModelState {
  DecoderWeights<T> base;
  std::vector<std::array<LoraAdapter<T>, kBlockProjections>> lora;
  LoraAdapter<T> lora_head;
  std::shared_ptr<UnifiedMask<T>> mask;
  std::vector<BlockSparsifiers<T>> hsm;

  bool lora_merged = false;
  bool hsm_merged = false;
  BinaryMask snap;  ///< meaningful once hsm_merged

  const ModelConfig& config() const { return base.config; }
  std::size_t width() const { return base.hidden(); }

  std::vector<const HybridSparsifier<T>*> sparsifiers() const {
    std::vector<const HybridSparsifier<T>*> out;
    for (const auto& b : hsm) {
      out.push_back(&b.attn);
      out.push_back(&b.ffn);
    }
    return out;
  }

  std::vector<Tensor<T>> lora_parameters() const {
    std::vector<Tensor<T>> out;
    for (const auto& blk : lora)
      for (const auto& ad : blk) {
        out.push_back(ad.a);
        out.push_back(ad.b);
      }
    out.push_back(lora_head.a);
    out.push_back(lora_head.b);
    return out;
  }

  std::vector<Tensor<T>> sparsity_parameters() const {
    std::vector<Tensor<T>> out{mask->proxy};
    for (const auto& b : hsm)
      for (const auto* h : {&b.attn, &b.ffn}) {
        out.push_back(h->l0);
        out.push_back(h->v);
        out.push_back(h->l1);
      }
    return out;
  }

  /// Deep copy; the copy gets its own unified mask shared by its own sparsifiers.
  ModelState clone() const {
    ModelState c;
    c.base = base.clone();
    c.lora = lora;
    for (auto& blk : c.lora)
      for (auto& ad : blk) {
        ad.a = ad.a.clone();
        ad.b = ad.b.clone();
      }
    c.lora_head = lora_head;
    c.lora_head.a = lora_head.a.clone();
    c.lora_head.b = lora_head.b.clone();
    c.mask = std::make_shared<UnifiedMask<T>>(*mask);
    c.mask->proxy = mask->proxy.clone();
    c.hsm = hsm;
    for (auto& b : c.hsm)
      for (auto* h : {&b.attn, &b.ffn}) {
        h->l0 = h->l0.clone();
        h->v = h->v.clone();
        h->l1 = h->l1.clone();
        h->mask = c.mask;
      }
    c.lora_merged = lora_merged;
    c.hsm_merged = hsm_merged;
    c.snap = snap;
    return c;
  }
};

/// Builds a model with independent RNG streams for base weights, adapters and
/// sparsifiers, so runs that differ only in the sparsity setup share their
/// base weights and adapter initialization.
template <class T>
ModelState<T> init_model(const ModelConfig& cfg, const SparsityOptions& sp, const LoraOptions& lo) {
  cfg.validate();
  ModelState<T> m;
  Rng base_rng(cfg.seed);
  m.base = DecoderWeights<T>::init(cfg, base_rng);

  Rng lora_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  const std::size_t d = cfg.d_model, da = cfg.attn_width(), f = cfg.d_ff;
  const T alpha = static_cast<T>(lo.alpha);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    std::array<LoraAdapter<T>, kBlockProjections> blk{
        LoraAdapter<T>::create(da, d, lo.rank, alpha, lora_rng), LoraAdapter<T>::create(da, d, lo.rank, alpha, lora_rng),
        LoraAdapter<T>::create(da, d, lo.rank, alpha, lora_rng), LoraAdapter<T>::create(d, da, lo.rank, alpha, lora_rng),
        LoraAdapter<T>::create(f, d, lo.rank, alpha, lora_rng),  LoraAdapter<T>::create(f, d, lo.rank, alpha, lora_rng),
        LoraAdapter<T>::create(d, f, lo.rank, alpha, lora_rng)};
    m.lora.push_back(std::move(blk));
  }
  m.lora_head = LoraAdapter<T>::create(cfg.vocab_size, d, lo.rank, alpha, lora_rng);

  m.mask = std::make_shared<UnifiedMask<T>>(UnifiedMask<T>::create(d, sp.s0, sp.eps_temp, sp.n_target));
  Rng hsm_rng(cfg.seed ^ 0xd1b54a32d192ed03ULL);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    auto attn = HybridSparsifier<T>::create(m.mask, sp.r_hio, hsm_rng);
    auto ffn = HybridSparsifier<T>::create(m.mask, sp.r_hio, hsm_rng);
    m.hsm.push_back({std::move(attn), std::move(ffn)});
  }
  return m;
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

/// Points in the residual stream where activations can be observed.
enum class ProbePoint { Embedding, AttnInput, AttnResidual, FfnInput, FfnResidual, FinalInput };

template <class T>
using Probe = std::function<void(ProbePoint, std::size_t layer, const Tensor<T>&)>;

namespace detail {

/// Shared decoder dataflow. The policy supplies the linear maps and the
/// hooks applied to the embedding sum and to each block's output projection.
template <class T, class Policy>
Tensor<T> run_decoder(Tape<T>& tape, const DecoderWeights<T>& w, const TokenBatch& batch, Policy& policy,
                      const Probe<T>* probe) {
  const auto& cfg = w.config;
  batch.validate(cfg);
  auto observe = [&](ProbePoint p, std::size_t l, const Tensor<T>& t) {
    if (probe && *probe) (*probe)(p, l, t);
  };
  std::vector<std::int32_t> positions(batch.ids.size());
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<std::int32_t>(i % batch.len);

  auto h = add(tape, embedding_lookup(tape, w.tok_emb, std::span<const std::int32_t>(batch.ids)),
               embedding_lookup(tape, w.pos_emb, std::span<const std::int32_t>(positions)));
  h = policy.embedded(tape, h);
  observe(ProbePoint::Embedding, 0, h);

  for (std::size_t l = 0; l < w.blocks.size(); ++l) {
    const auto& blk = w.blocks[l];
    auto x = rmsnorm(tape, h, blk.attn_norm, w.norm_eps, w.norm_gain_scale);
    observe(ProbePoint::AttnInput, l, x);
    auto q = policy.linear(tape, l, Proj::Q, x);
    auto k = policy.linear(tape, l, Proj::K, x);
    auto v = policy.linear(tape, l, Proj::V, x);
    auto att = causal_attention(tape, q, k, v, batch.batch, batch.len, cfg.n_heads);
    auto o = policy.attn_out(tape, l, policy.linear(tape, l, Proj::O, att));
    h = add(tape, h, o);
    observe(ProbePoint::AttnResidual, l, h);

    x = rmsnorm(tape, h, blk.ffn_norm, w.norm_eps, w.norm_gain_scale);
    observe(ProbePoint::FfnInput, l, x);
    auto up = policy.linear(tape, l, Proj::Up, x);
    auto gt = policy.linear(tape, l, Proj::Gate, x);
    auto dn = policy.linear(tape, l, Proj::Down, mul(tape, silu(tape, gt), up));
    h = add(tape, h, policy.ffn_out(tape, l, dn));
    observe(ProbePoint::FfnResidual, l, h);
  }
  auto x = rmsnorm(tape, h, w.final_norm, w.norm_eps, w.norm_gain_scale);
  observe(ProbePoint::FinalInput, w.blocks.size(), x);
  auto logits = policy.head(tape, x);
  return reshape(tape, logits, Shape{batch.batch, batch.len, cfg.vocab_size});
}

template <class T>
struct DensePolicy {
  const DecoderWeights<T>& w;
  const Tensor<T>* embed_mask;

  Tensor<T> embedded(Tape<T>& tape, const Tensor<T>& h) { return embed_mask ? mul(tape, h, *embed_mask) : h; }
  Tensor<T> linear(Tape<T>& tape, std::size_t l, Proj p, const Tensor<T>& x) {
    return pat::linear(tape, x, w.blocks[l][p]);
  }
  Tensor<T> attn_out(Tape<T>&, std::size_t, const Tensor<T>& o) { return o; }
  Tensor<T> ffn_out(Tape<T>&, std::size_t, const Tensor<T>& o) { return o; }
  Tensor<T> head(Tape<T>& tape, const Tensor<T>& x) { return pat::linear(tape, x, w.lm_head); }
};

template <class T>
struct StatePolicy {
  const ModelState<T>& m;
  bool masked;
  Tensor<T> gate_m;  ///< mask applied to the embedding sum and inside the sparsifiers

  Tensor<T> embedded(Tape<T>& tape, const Tensor<T>& h) { return masked ? mul(tape, h, gate_m) : h; }

  Tensor<T> adapted(Tape<T>& tape, const Tensor<T>& w, const LoraAdapter<T>& ad, const Tensor<T>& x) {
    return ad.consumed ? pat::linear(tape, x, w) : lora_forward(tape, w, ad, x);
  }
  Tensor<T> linear(Tape<T>& tape, std::size_t l, Proj p, const Tensor<T>& x) {
    return adapted(tape, m.base.blocks[l][p], m.lora[l][static_cast<std::size_t>(p)], x);
  }
  Tensor<T> attn_out(Tape<T>& tape, std::size_t l, const Tensor<T>& o) {
    return masked && !m.hsm_merged ? hsm_forward(tape, m.hsm[l].attn, o, gate_m) : o;
  }
  Tensor<T> ffn_out(Tape<T>& tape, std::size_t l, const Tensor<T>& o) {
    return masked && !m.hsm_merged ? hsm_forward(tape, m.hsm[l].ffn, o, gate_m) : o;
  }
  Tensor<T> head(Tape<T>& tape, const Tensor<T>& x) { return adapted(tape, m.base.lm_head, m.lora_head, x); }
};

}  // namespace detail

enum class ForwardMode { Plain, Masked };

template <class T>
struct ForwardOptions {
  ForwardMode mode = ForwardMode::Masked;
  /// Gate step; defaults to the mask's current step.
  std::optional<std::int64_t> step;
  /// Replaces the gated mask (e.g. a snapped 0/1 vector).
  const Tensor<T>* mask_override = nullptr;
  const Probe<T>* probe = nullptr;
};

/// Logits [batch x len x vocab].
///
/// Plain mode bypasses mask and sparsifiers. Masked mode multiplies the
/// embedding sum by the mask and passes the attention-output and FFN-output
/// projections through their sparsifiers. After the sparsifiers have been
/// merged, masked mode applies the snapped mask to the embedding only.
template <class T>
Tensor<T> forward(Tape<T>& tape, const ModelState<T>& m, const TokenBatch& batch,
                  const ForwardOptions<T>& opt = {}) {
  detail::StatePolicy<T> policy{m, opt.mode == ForwardMode::Masked, {}};
  if (policy.masked) {
    if (opt.mask_override) {
      if (opt.mask_override->size() != m.width()) throw DimensionError("mask override width mismatch");
      policy.gate_m = *opt.mask_override;
    } else if (m.hsm_merged) {
      policy.gate_m = m.snap.template indicator<T>();
    } else {
      policy.gate_m = gate(tape, *m.mask, opt.step.value_or(m.mask->step));
    }
  }
  return detail::run_decoder(tape, m.base, batch, policy, opt.probe);
}

/// Logits of a plain dense decoder, optionally masking the embedding sum.
template <class T>
Tensor<T> forward(Tape<T>& tape, const DecoderWeights<T>& w, const TokenBatch& batch,
                  const Tensor<T>* embed_mask = nullptr, const Probe<T>* probe = nullptr) {
  detail::DensePolicy<T> policy{w, embed_mask};
  return detail::run_decoder(tape, w, batch, policy, probe);
}

/// Inference-only convenience wrappers.
template <class T>
Tensor<T> infer(const ModelState<T>& m, const TokenBatch& batch, const ForwardOptions<T>& opt = {}) {
  Tape<T> off(false);
  return forward(off, m, batch, opt);
}

template <class T>
Tensor<T> infer(const DecoderWeights<T>& w, const TokenBatch& batch, const Tensor<T>* embed_mask = nullptr) {
  Tape<T> off(false);
  return forward(off, w, batch, embed_mask);
}

}  // namespace pat
