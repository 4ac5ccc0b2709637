#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "pat/data.hpp"
#include "pat/errors.hpp"
#include "pat/model.hpp"
#include "pat/ops.hpp"
#include "pat/sparsify.hpp"
#include "pat/tape.hpp"

namespace pat {

enum class Method {
  Pat,   ///< masked forward, LoRA + sparsifiers + mask trained
  Lora,  ///< plain forward, LoRA only
};

inline const char* to_string(Method m) { return m == Method::Pat ? "pat" : "lora"; }

inline Method parse_method(const std::string& s) {
  if (s == "pat") return Method::Pat;
  if (s == "lora") return Method::Lora;
  throw ConfigError("train.method must be \"pat\" or \"lora\", got \"" + s + "\"");
}

/// Training schedule; defaults are sized for a toy model on a CPU.
struct TrainConfig {
  std::int64_t total_steps = 1000;
  std::size_t batch_size = 16;
  std::size_t seq_len = 64;
  double lr_max = 3e-4;
  std::int64_t s0 = 0;  ///< 0 selects floor(total_steps / 3)
  double target_prune_ratio = 0.25;
  std::uint64_t seed = 1;
  std::int64_t checkpoint_every = 0;  ///< 0 disables periodic checkpoints
  double grad_clip = 1.0;
  Method method = Method::Pat;
  /// Dense base-model steps run before tuning starts (0 skips the phase).
  std::int64_t pretrain_steps = 0;
  double pretrain_lr = 3e-3;

  std::int64_t milestone() const { return s0 > 0 ? s0 : total_steps / 3; }

  std::size_t n_target(std::size_t d) const {
    return static_cast<std::size_t>(std::llround((1.0 - target_prune_ratio) * static_cast<double>(d)));
  }

  void validate(std::size_t d) const {
    if (total_steps < 1) throw ConfigError("train.total_steps must be >= 1");
    if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
    if (seq_len < 1) throw ConfigError("train.seq_len must be >= 1");
    if (!(lr_max > 0.0)) throw ConfigError("train.lr_max must be positive");
    if (!(target_prune_ratio >= 0.0 && target_prune_ratio < 1.0))
      throw ConfigError("sparsify.target_prune_ratio must lie in [0, 1)");
    if (milestone() < 2) throw ConfigError("train.s0 must be >= 2 (total_steps too small?)");
    if (n_target(d) < 1) throw ConfigError("target_prune_ratio leaves no active channels");
    if (checkpoint_every < 0) throw ConfigError("train.checkpoint_every must be >= 0");
    if (!(grad_clip > 0.0)) throw ConfigError("train.grad_clip must be positive");
    if (pretrain_steps < 0) throw ConfigError("train.pretrain_steps must be >= 0");
    if (pretrain_steps > 0 && !(pretrain_lr > 0.0)) throw ConfigError("train.pretrain_lr must be positive");
  }
};

/// lr_max * (1 + cos(pi t / T)) / 2
inline double cosine_lr(std::int64_t t, std::int64_t total, double lr_max) {
  if (total <= 0 || t < 0 || t > total) throw ConfigError("cosine_lr: step outside [0, T]");
  return lr_max * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(t) / static_cast<double>(total)));
}

template <class T>
struct LossParts {
  Tensor<T> total;
  double instruct = 0;
  double active = 0;
  double identity = 0;
};

/// L = L_instruct + L_active + L_identity, unweighted. L_instruct is the mean
/// next-token cross-entropy over scored positions of the masked forward.
template <class T>
LossParts<T> composite_loss(Tape<T>& tape, const ModelState<T>& m, const TrainBatch<T>& batch, std::int64_t s) {
  if (batch.inputs.ids.empty() || batch.scored() == 0) throw InputError("composite_loss: empty batch");
  ForwardOptions<T> opt;
  opt.mode = ForwardMode::Masked;
  opt.step = s;
  auto logits = forward(tape, m, batch.inputs, opt);
  auto instruct = cross_entropy_logits(tape, logits, std::span<const std::int32_t>(batch.targets),
                                       std::span<const T>(batch.weights));
  auto active = active_loss(tape, *m.mask, s);
  const auto hs = m.sparsifiers();
  auto identity = identity_loss(tape, std::span<const HybridSparsifier<T>* const>(hs));
  LossParts<T> parts;
  parts.total = add(tape, add(tape, instruct, active), identity);
  parts.instruct = static_cast<double>(instruct.item());
  parts.active = static_cast<double>(active.item());
  parts.identity = static_cast<double>(identity.item());
  return parts;
}

/// Plain-forward instruction loss (LoRA baseline objective).
template <class T>
LossParts<T> instruct_loss(Tape<T>& tape, const ModelState<T>& m, const TrainBatch<T>& batch) {
  if (batch.inputs.ids.empty() || batch.scored() == 0) throw InputError("instruct_loss: empty batch");
  ForwardOptions<T> opt;
  opt.mode = ForwardMode::Plain;
  auto logits = forward(tape, m, batch.inputs, opt);
  LossParts<T> parts;
  parts.total = cross_entropy_logits(tape, logits, std::span<const std::int32_t>(batch.targets),
                                     std::span<const T>(batch.weights));
  parts.instruct = static_cast<double>(parts.total.item());
  return parts;
}

/// Adam without weight decay.
template <class T>
class Adam {
 public:
  explicit Adam(std::vector<Tensor<T>> params, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto& p : params_) {
      m_.emplace_back(p.size(), 0.0);
      v_.emplace_back(p.size(), 0.0);
    }
  }

  void zero_grad() {
    for (auto& p : params_)
      if (p.has_grad()) p.zero_grad();
  }

  /// Global L2 norm of all gradients.
  double grad_norm() const {
    double ss = 0;
    for (const auto& p : params_)
      if (p.has_grad())
        for (T g : p.grad()) ss += static_cast<double>(g) * static_cast<double>(g);
    return std::sqrt(ss);
  }

  void step(double lr, double grad_scale = 1.0) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& p = params_[k];
      if (!p.has_grad()) continue;
      auto g = p.grad();
      auto w = p.data();
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = static_cast<double>(g[i]) * grad_scale;
        m[i] = beta1_ * m[i] + (1.0 - beta1_) * gi;
        v[i] = beta2_ * v[i] + (1.0 - beta2_) * gi * gi;
        const double mh = m[i] / bc1, vh = v[i] / bc2;
        w[i] = static_cast<T>(static_cast<double>(w[i]) - lr * mh / (std::sqrt(vh) + eps_));
      }
    }
  }

  std::int64_t steps() const { return t_; }

 private:
  std::vector<Tensor<T>> params_;
  std::vector<std::vector<double>> m_, v_;
  double beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
};

struct StepMetrics {
  std::int64_t step = 0;
  double lr = 0;
  double loss_total = 0;
  double loss_instruct = 0;
  double loss_active = 0;
  double loss_identity = 0;
  double tau = 0;
  double beta = 0;
  std::size_t active_count = 0;
  double min_gate = 0;
  double max_gate = 0;
  double wall_ms = 0;
};

inline void write_metrics_header(std::ostream& os) {
  os << "step,lr,loss_total,loss_instruct,loss_active,loss_identity,tau,beta,active_count,wall_ms\n";
}

inline void write_metrics_row(std::ostream& os, const StepMetrics& m) {
  os << m.step << ',' << m.lr << ',' << m.loss_total << ',' << m.loss_instruct << ',' << m.loss_active << ','
     << m.loss_identity << ',' << m.tau << ',' << m.beta << ',' << m.active_count << ',' << m.wall_ms << '\n';
}

inline void write_mask_trace_header(std::ostream& os) { os << "step,tau,beta,min_gate,max_gate,active_count\n"; }

inline void write_mask_trace_row(std::ostream& os, const StepMetrics& m) {
  os << m.step << ',' << m.tau << ',' << m.beta << ',' << m.min_gate << ',' << m.max_gate << ',' << m.active_count
     << '\n';
}

/// Gate statistics of `mask` at step s.
template <class T>
StepMetrics mask_state(const UnifiedMask<T>& mask, std::int64_t s) {
  StepMetrics m;
  m.step = s;
  m.tau = mask.tau(s);
  m.beta = mask.beta(s);
  const auto g = gate_values(mask, s);
  m.min_gate = static_cast<double>(*std::min_element(g.begin(), g.end()));
  m.max_gate = static_cast<double>(*std::max_element(g.begin(), g.end()));
  m.active_count = mask.active_count();
  return m;
}

struct TrainHooks {
  std::function<void(const StepMetrics&)> on_step;
  /// Called after `completed` optimizer steps when a periodic checkpoint is due.
  std::function<void(std::int64_t completed)> on_checkpoint;
};

/// Configures the model's mask schedule from `cfg`.
template <class T>
void apply_schedule(ModelState<T>& m, const TrainConfig& cfg) {
  cfg.validate(m.width());
  m.mask->s0 = cfg.milestone();
  m.mask->n_target = cfg.n_target(m.width());
  m.mask->validate();
}

namespace detail {

template <class T>
void check_trainable(const ModelState<T>& m, const TrainConfig& cfg, const TokenStream& data,
                     const std::vector<std::size_t>& starts) {
  if (m.lora_merged || m.hsm_merged) throw LifecycleError("cannot train a merged model");
  if (data.vocab > m.config().vocab_size)
    throw ConfigError("data vocabulary (" + std::to_string(data.vocab) + ") exceeds model vocab_size");
  if (cfg.seq_len > m.config().max_seq_len) throw ConfigError("train.seq_len exceeds model.max_seq_len");
  if (starts.empty()) throw InputError("training data shorter than one window");
}

inline void check_finite(double v, const char* what, std::int64_t s) {
  if (!std::isfinite(v)) throw NumericalError(std::string(what) + " is not finite at step " + std::to_string(s));
}

}  // namespace detail

/// Dense plain-mode training of the base weights, used to give the frozen base
/// something worth adapting. Adapters and sparsity parameters are untouched;
/// the base is frozen again on return.
template <class T>
std::vector<StepMetrics> pretrain(ModelState<T>& m, const TrainConfig& cfg, const TokenStream& data) {
  cfg.validate(m.width());
  const auto starts = window_starts(data, cfg.seq_len);
  detail::check_trainable(m, cfg, data, starts);
  std::vector<StepMetrics> log;
  if (cfg.pretrain_steps == 0) return log;

  std::vector<Tensor<T>> params;
  m.base.for_each([&](const std::string&, Tensor<T>& t) {
    t.set_requires_grad(true);
    params.push_back(t);
  });
  Adam<T> opt(params);
  // Offset seed so the pretraining batches differ from the tuning ones.
  Rng rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  std::uniform_int_distribution<std::size_t> pick(0, starts.size() - 1);
  std::vector<std::size_t> chosen(cfg.batch_size);
  log.reserve(static_cast<std::size_t>(cfg.pretrain_steps));
  for (std::int64_t s = 0; s < cfg.pretrain_steps; ++s) {
    const auto t0 = std::chrono::steady_clock::now();
    for (auto& c : chosen) c = starts[pick(rng)];
    const auto batch = make_batch<T>(data, chosen, cfg.seq_len);
    StepMetrics row;
    row.step = s;
    row.lr = cosine_lr(s, cfg.pretrain_steps, cfg.pretrain_lr);
    Tape<T> tape;
    auto parts = instruct_loss(tape, m, batch);
    detail::check_finite(parts.instruct, "pretrain loss", s);
    opt.zero_grad();
    tape.backward(parts.total);
    const double norm = opt.grad_norm();
    detail::check_finite(norm, "pretrain gradient norm", s);
    opt.step(row.lr, norm > cfg.grad_clip ? cfg.grad_clip / norm : 1.0);
    row.loss_total = row.loss_instruct = parts.instruct;
    row.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    log.push_back(row);
  }
  for (auto& p : params) {
    p.clear_grad();
    p.set_requires_grad(false);
  }
  return log;
}

/// Pruning-aware fine-tuning (or the LoRA baseline, per cfg.method).
/// Base weights stay frozen; the mask step advances once per optimizer step
/// and ends at total_steps.
template <class T>
std::vector<StepMetrics> train(ModelState<T>& m, const TrainConfig& cfg, const TokenStream& data,
                               const TrainHooks& hooks = {}) {
  apply_schedule(m, cfg);
  const auto starts = window_starts(data, cfg.seq_len);
  detail::check_trainable(m, cfg, data, starts);

  auto params = m.lora_parameters();
  if (cfg.method == Method::Pat) {
    auto sp = m.sparsity_parameters();
    params.insert(params.end(), sp.begin(), sp.end());
  }
  Adam<T> opt(params);
  Rng rng(cfg.seed);
  std::uniform_int_distribution<std::size_t> pick(0, starts.size() - 1);
  std::vector<StepMetrics> log;
  log.reserve(static_cast<std::size_t>(cfg.total_steps));
  std::vector<std::size_t> chosen(cfg.batch_size);

  for (std::int64_t s = 0; s < cfg.total_steps; ++s) {
    const auto t0 = std::chrono::steady_clock::now();
    m.mask->step = s;
    for (auto& c : chosen) c = starts[pick(rng)];
    const auto batch = make_batch<T>(data, chosen, cfg.seq_len);

    StepMetrics row = mask_state(*m.mask, s);
    row.lr = cosine_lr(s, cfg.total_steps, cfg.lr_max);

    Tape<T> tape;
    auto parts = cfg.method == Method::Pat ? composite_loss(tape, m, batch, s) : instruct_loss(tape, m, batch);
    detail::check_finite(parts.instruct, "loss_instruct", s);
    detail::check_finite(parts.active, "loss_active", s);
    detail::check_finite(parts.identity, "loss_identity", s);
    opt.zero_grad();
    tape.backward(parts.total);
    const double norm = opt.grad_norm();
    detail::check_finite(norm, "gradient norm", s);
    opt.step(row.lr, norm > cfg.grad_clip ? cfg.grad_clip / norm : 1.0);

    row.loss_total = static_cast<double>(parts.total.item());
    row.loss_instruct = parts.instruct;
    row.loss_active = parts.active;
    row.loss_identity = parts.identity;
    row.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    log.push_back(row);
    if (hooks.on_step) hooks.on_step(row);
    if (hooks.on_checkpoint && cfg.checkpoint_every > 0 && (s + 1) % cfg.checkpoint_every == 0 &&
        s + 1 < cfg.total_steps)
      hooks.on_checkpoint(s + 1);
  }
  m.mask->step = cfg.total_steps;
  for (auto& p : params) p.clear_grad();
  return log;
}

}  // namespace pat
