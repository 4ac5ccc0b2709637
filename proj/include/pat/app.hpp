#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <iterator>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "pat/checkpoint.hpp"
#include "pat/data.hpp"
#include "pat/errors.hpp"
#include "pat/evalbench.hpp"
#include "pat/model.hpp"
#include "pat/pruner.hpp"
#include "pat/trainer.hpp"

namespace pat {

// Exit-code contract of the command layer.
inline constexpr int kExitOk = 0;
inline constexpr int kExitVerifyFailed = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitNumerical = 3;

struct SparsifyConfig {
  std::optional<std::size_t> r_hio;  ///< unset: max(4, round(0.05 d_model))
  double eps_temp = 1e-3;
  double target_prune_ratio = 0.25;

  std::size_t rank(std::size_t d) const {
    return r_hio ? *r_hio : std::max<std::size_t>(4, static_cast<std::size_t>(std::llround(0.05 * static_cast<double>(d))));
  }
  bool operator==(const SparsifyConfig&) const = default;
};

struct LoraConfig {
  std::size_t r_lora = 8;
  std::optional<double> alpha;  ///< unset: 2 * r_lora

  double scale_alpha() const { return alpha ? *alpha : 2.0 * static_cast<double>(r_lora); }
  bool operator==(const LoraConfig&) const = default;
};

struct DataConfig {
  std::string source = "copy(8,32)";  ///< file path, copy(len,vocab) or mod_add(m)
  std::size_t examples = 20000;
  std::uint64_t seed = 1;
  double train_fraction = 0.9;

  DataSpec spec() const {
    auto s = DataSpec::parse(source);
    s.examples = examples;
    s.seed = seed;
    return s;
  }
  bool operator==(const DataConfig&) const = default;
};

/// Everything a training run needs, read from one JSON file.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  SparsifyConfig sparsify;
  LoraConfig lora;
  DataConfig data;
  std::string output = "run";

  void validate() const {
    model.validate();
    if (model.d_attn != 0) throw ConfigError("model.d_attn is not configurable");
    train.validate(model.d_model);
    HybridSparsifier<double>::validate_rank(sparsify.rank(model.d_model), model.d_model);
    if (!(sparsify.eps_temp > 0.0)) throw ConfigError("sparsify.eps_temp must be positive");
    if (lora.r_lora < 1) throw ConfigError("lora.r_lora must be >= 1");
    if (!(lora.scale_alpha() > 0.0)) throw ConfigError("lora.alpha must be positive");
    if (!(data.train_fraction > 0.0 && data.train_fraction < 1.0))
      throw ConfigError("data.train_fraction must lie in (0, 1)");
    if (train.seq_len > model.max_seq_len) throw ConfigError("train.seq_len exceeds model.max_seq_len");
    if (output.empty()) throw ConfigError("output must be a non-empty directory path");
    if (data.spec().vocab() > model.vocab_size)
      throw ConfigError("data '" + data.source + "' needs vocab_size >= " + std::to_string(data.spec().vocab()));
  }

  SparsityOptions sparsity_options() const {
    return {sparsify.rank(model.d_model), sparsify.eps_temp, train.n_target(model.d_model), train.milestone()};
  }
  LoraOptions lora_options() const { return {lora.r_lora, lora.scale_alpha()}; }

  bool operator==(const RunConfig& o) const {
    return model == o.model && train.total_steps == o.train.total_steps && train.batch_size == o.train.batch_size &&
           train.seq_len == o.train.seq_len && train.lr_max == o.train.lr_max && train.s0 == o.train.s0 &&
           train.target_prune_ratio == o.train.target_prune_ratio && train.seed == o.train.seed &&
           train.checkpoint_every == o.train.checkpoint_every && train.grad_clip == o.train.grad_clip &&
           train.pretrain_steps == o.train.pretrain_steps && train.pretrain_lr == o.train.pretrain_lr &&
           train.method == o.train.method && sparsify == o.sparsify && lora == o.lora && data == o.data &&
           output == o.output;
  }
};

namespace detail {

/// Reads a JSON object field by field, rejecting keys nobody asked for.
class Section {
 public:
  Section(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  template <class V>
  void read(const char* key, V& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    const std::string where = path_.empty() ? key : path_ + "." + key;
    try {
      if constexpr (std::is_unsigned_v<V>) {
        if (!it->is_number_unsigned()) throw ConfigError(where + ": expected a non-negative integer");
      } else if constexpr (std::is_integral_v<V>) {
        if (!it->is_number_integer()) throw ConfigError(where + ": expected an integer");
      } else if constexpr (std::is_floating_point_v<V>) {
        if (!it->is_number()) throw ConfigError(where + ": expected a number");
      } else if constexpr (std::is_same_v<V, std::string>) {
        if (!it->is_string()) throw ConfigError(where + ": expected a string");
      }
      out = it->get<V>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(where + ": " + e.what());
    }
  }

  template <class V>
  void read(const char* key, std::optional<V>& out) {
    V v{};
    if (j_.contains(key)) {
      read(key, v);
      out = v;
    } else {
      seen_.insert(key);
    }
  }

  const nlohmann::json* child(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw ConfigError((path_.empty() ? "" : path_ + ".") + k + ": unknown key");
  }

 private:
  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline RunConfig parse_run_config(const nlohmann::json& j) {
  RunConfig c;
  detail::Section top(j, "");
  if (const auto* s = top.child("model")) {
    detail::Section m(*s, "model");
    m.read("d_model", c.model.d_model);
    m.read("n_layers", c.model.n_layers);
    m.read("n_heads", c.model.n_heads);
    m.read("d_ff", c.model.d_ff);
    m.read("vocab_size", c.model.vocab_size);
    m.read("max_seq_len", c.model.max_seq_len);
    m.read("seed", c.model.seed);
    m.finish();
  }
  if (const auto* s = top.child("train")) {
    detail::Section t(*s, "train");
    t.read("total_steps", c.train.total_steps);
    t.read("batch_size", c.train.batch_size);
    t.read("seq_len", c.train.seq_len);
    t.read("lr_max", c.train.lr_max);
    t.read("s0", c.train.s0);
    t.read("seed", c.train.seed);
    t.read("checkpoint_every", c.train.checkpoint_every);
    t.read("grad_clip", c.train.grad_clip);
    t.read("pretrain_steps", c.train.pretrain_steps);
    t.read("pretrain_lr", c.train.pretrain_lr);
    std::string method = to_string(c.train.method);
    t.read("method", method);
    c.train.method = parse_method(method);
    t.finish();
  }
  if (const auto* s = top.child("sparsify")) {
    detail::Section sp(*s, "sparsify");
    sp.read("r_hio", c.sparsify.r_hio);
    sp.read("eps_temp", c.sparsify.eps_temp);
    sp.read("target_prune_ratio", c.sparsify.target_prune_ratio);
    sp.finish();
  }
  c.train.target_prune_ratio = c.sparsify.target_prune_ratio;
  if (const auto* s = top.child("lora")) {
    detail::Section l(*s, "lora");
    l.read("r_lora", c.lora.r_lora);
    l.read("alpha", c.lora.alpha);
    l.finish();
  }
  if (const auto* s = top.child("data")) {
    detail::Section d(*s, "data");
    d.read("source", c.data.source);
    d.read("examples", c.data.examples);
    d.read("seed", c.data.seed);
    d.read("train_fraction", c.data.train_fraction);
    d.finish();
  }
  top.read("output", c.output);
  top.finish();
  return c;
}

inline nlohmann::json run_config_to_json(const RunConfig& c) {
  nlohmann::json sp = {{"eps_temp", c.sparsify.eps_temp}, {"target_prune_ratio", c.sparsify.target_prune_ratio}};
  if (c.sparsify.r_hio) sp["r_hio"] = *c.sparsify.r_hio;
  nlohmann::json lo = {{"r_lora", c.lora.r_lora}};
  if (c.lora.alpha) lo["alpha"] = *c.lora.alpha;
  return {{"model",
           {{"d_model", c.model.d_model},
            {"n_layers", c.model.n_layers},
            {"n_heads", c.model.n_heads},
            {"d_ff", c.model.d_ff},
            {"vocab_size", c.model.vocab_size},
            {"max_seq_len", c.model.max_seq_len},
            {"seed", c.model.seed}}},
          {"train",
           {{"total_steps", c.train.total_steps},
            {"batch_size", c.train.batch_size},
            {"seq_len", c.train.seq_len},
            {"lr_max", c.train.lr_max},
            {"s0", c.train.s0},
            {"seed", c.train.seed},
            {"checkpoint_every", c.train.checkpoint_every},
            {"grad_clip", c.train.grad_clip},
            {"pretrain_steps", c.train.pretrain_steps},
            {"pretrain_lr", c.train.pretrain_lr},
            {"method", to_string(c.train.method)}}},
          {"sparsify", sp},
          {"lora", lo},
          {"data",
           {{"source", c.data.source},
            {"examples", c.data.examples},
            {"seed", c.data.seed},
            {"train_fraction", c.data.train_fraction}}},
          {"output", c.output}};
}

inline std::string read_text_file(const std::filesystem::path& p, const char* what) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw InputError(std::string("cannot read ") + what + " '" + p.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline RunConfig parse_run_config_text(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("malformed JSON: ") + e.what());
  }
  return parse_run_config(j);
}

/// Options shared by every subcommand.
struct GlobalOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool f64 = false;
  bool quiet = false;
};

/// Runs `body` and maps library errors onto the exit-code contract.
template <class F>
int guarded(std::ostream& err, F&& body) {
  try {
    return body();
  } catch (const NumericalError& e) {
    err << "error: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const nlohmann::json::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
    return kExitConfig;
  }
}

namespace detail {

inline bool checkpoint_is_f64(const std::filesystem::path& dir) { return read_manifest(dir).value("dtype", "f32") == "f64"; }

inline bool checkpoint_is_pruned(const std::filesystem::path& dir) { return read_manifest(dir).value("pruned", false); }

/// Dispatches on the precision: --f64 forces double, otherwise the stored dtype wins.
template <class F>
int with_precision(bool force_f64, const std::filesystem::path& ckpt, F&& body) {
  if (force_f64 || checkpoint_is_f64(ckpt)) return body(double{});
  return body(float{});
}

template <class T>
int train_impl(const RunConfig& cfg, const std::string& raw_text, const GlobalOptions& g, std::ostream& out) {
  namespace fs = std::filesystem;
  const fs::path dir = cfg.output;
  const auto stream = ingest(cfg.data.spec());
  const auto split = split_stream(stream, cfg.data.train_fraction);
  fs::create_directories(dir);
  {
    std::ofstream echo(dir / "config.json", std::ios::binary | std::ios::trunc);
    echo << raw_text;
    std::ofstream resolved(dir / "config.resolved.json", std::ios::trunc);
    resolved << run_config_to_json(cfg).dump(2) << '\n';
  }

  auto m = init_model<T>(cfg.model, cfg.sparsity_options(), cfg.lora_options());
  if (cfg.train.pretrain_steps > 0) {
    const auto rows = pretrain(m, cfg.train, split.train);
    std::ofstream pre(dir / "pretrain.csv", std::ios::trunc);
    write_metrics_header(pre);
    for (const auto& r : rows) write_metrics_row(pre, r);
    if (!g.quiet) out << "pretrained base for " << rows.size() << " steps, final loss " << rows.back().loss_instruct << '\n';
  }
  const nlohmann::json extra = {{"method", to_string(cfg.train.method)}, {"data", cfg.data.source}};
  std::ofstream metrics(dir / "metrics.csv", std::ios::trunc);
  std::ofstream trace(dir / "mask_trace.csv", std::ios::trunc);
  write_metrics_header(metrics);
  write_mask_trace_header(trace);
  if (cfg.train.checkpoint_every > 0) {
    apply_schedule(m, cfg.train);
    save_state(dir / "checkpoints" / "step_0", m, extra);
  }

  TrainHooks hooks;
  const std::int64_t report_every = std::max<std::int64_t>(1, cfg.train.total_steps / 20);
  hooks.on_step = [&](const StepMetrics& r) {
    write_metrics_row(metrics, r);
    write_mask_trace_row(trace, r);
    if (!g.quiet && (r.step % report_every == 0 || r.step + 1 == cfg.train.total_steps))
      out << "step " << r.step << " loss " << r.loss_total << " (instruct " << r.loss_instruct << ", active "
          << r.loss_active << ", identity " << r.loss_identity << ") tau " << r.tau << " active_count "
          << r.active_count << '\n';
  };
  hooks.on_checkpoint = [&](std::int64_t done) {
    m.mask->step = done;
    save_state(dir / "checkpoints" / ("step_" + std::to_string(done)), m, extra);
  };
  train(m, cfg.train, split.train, hooks);
  // Final gate state, after the last optimizer step.
  write_mask_trace_row(trace, mask_state(*m.mask, cfg.train.total_steps));
  save_state(dir / "final", m, extra);

  const auto mode = cfg.train.method == Method::Pat ? ForwardMode::Masked : ForwardMode::Plain;
  const auto score = score_heldout<T>(logits_fn(m, mode), split.heldout, cfg.train.seq_len);
  const nlohmann::json summary = {{"heldout_perplexity", score.perplexity},
                                  {"heldout_accuracy", score.accuracy},
                                  {"heldout_scored", score.scored},
                                  {"active_count", m.mask->active_count()},
                                  {"n_target", m.mask->n_target}};
  std::ofstream(dir / "summary.json", std::ios::trunc) << summary.dump(2) << '\n';
  if (!g.quiet) out << "held-out perplexity " << score.perplexity << " accuracy " << score.accuracy << '\n';
  return kExitOk;
}

}  // namespace detail

/// `pat train -c run.json`
inline int cmd_train(const GlobalOptions& g, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  return guarded(err, [&] {
    if (g.config.empty()) throw ConfigError("train needs -c/--config");
    const std::string text = read_text_file(g.config, "config");
    RunConfig cfg;
    try {
      cfg = parse_run_config_text(text);
    } catch (const InputError& e) {
      throw ConfigError(e.what());
    }
    if (g.seed) cfg.model.seed = cfg.train.seed = *g.seed;
    if (!g.out.empty()) cfg.output = g.out;
    cfg.validate();
    return g.f64 ? detail::train_impl<double>(cfg, text, g, out) : detail::train_impl<float>(cfg, text, g, out);
  });
}

/// `pat prune <checkpoint> --out <dir>`: merge, snap, slice, verify, save.
inline int cmd_prune(const GlobalOptions& g, const std::string& ckpt, std::size_t n_inputs = 32,
                     std::ostream& out = std::cout, std::ostream& err = std::cerr, SliceOptions slice = {}) {
  return guarded(err, [&] {
    if (g.out.empty()) throw ConfigError("prune needs --out");
    if (detail::checkpoint_is_pruned(ckpt)) throw ConfigError("checkpoint '" + ckpt + "' is already pruned");
    return detail::with_precision(g.f64, ckpt, [&](auto tag) {
      using T = decltype(tag);
      auto m = load_state<T>(ckpt);
      if (m.lora_merged || m.hsm_merged) throw ConfigError("checkpoint '" + ckpt + "' is already merged");
      auto res = merge_and_slice(m, slice);
      res.report.max_residual = verify_equivalence(m, res.pruned, n_inputs, g.seed.value_or(0));
      const std::filesystem::path dir = g.out;
      save_pruned(dir, res.pruned, m.snap, {{"source", ckpt}});
      std::ofstream(dir / "prune_report.json", std::ios::trunc) << res.report.to_json().dump(2) << '\n';
      if (!g.quiet)
        out << "d " << res.report.d << " -> " << res.report.d_kept << ", params " << res.report.params_before
            << " -> " << res.report.params_after << " (ratio " << res.report.ratio << "), snap disagreements "
            << res.report.snap_disagreements << ", max residual " << res.report.max_residual << '\n';
      return kExitOk;
    });
  });
}

/// `pat verify <base> <pruned>`: exit 0 iff the residual is within tolerance.
inline int cmd_verify(const GlobalOptions& g, const std::string& base, const std::string& pruned,
                      std::size_t n_inputs = 32, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  return guarded(err, [&] {
    if (detail::checkpoint_is_pruned(base)) throw ConfigError("verify: '" + base + "' must be the unpruned checkpoint");
    if (!detail::checkpoint_is_pruned(pruned)) throw ConfigError("verify: '" + pruned + "' is not pruned");
    return detail::with_precision(g.f64, base, [&](auto tag) {
      using T = decltype(tag);
      auto m = load_state<T>(base);
      auto [w, bmask] = load_pruned<T>(pruned);
      if (bmask.d != m.width()) throw ConfigError("verify: pruned mask width does not match the base model");
      if (!m.lora_merged) merge_lora_all(m);
      if (!m.hsm_merged) merge_hsm_all(m, bmask);
      const double r = verify_equivalence(m, w, n_inputs, g.seed.value_or(0));
      const bool pass = r <= kEquivalenceTolerance32;
      out << "max_residual " << r << (pass ? " PASS" : " FAIL") << '\n';
      return pass ? kExitOk : kExitVerifyFailed;
    });
  });
}

/// `pat eval <checkpoint> --data <spec>`: held-out perplexity and accuracy.
inline int cmd_eval(const GlobalOptions& g, const std::string& ckpt, const std::string& data,
                    std::size_t seq_len = 64, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  return guarded(err, [&] {
    DataConfig dc;
    dc.source = data;
    if (g.seed) dc.seed = *g.seed;
    const auto split = split_stream(ingest(dc.spec()), dc.train_fraction);
    return detail::with_precision(g.f64, ckpt, [&](auto tag) {
      using T = decltype(tag);
      HeldoutScore s;
      if (detail::checkpoint_is_pruned(ckpt)) {
        const auto [w, bm] = load_pruned<T>(ckpt);
        s = score_heldout<T>(logits_fn(w), split.heldout, std::min(seq_len, w.config.max_seq_len));
      } else {
        const auto ar = load_archive<T>(ckpt);
        const auto m = state_from_archive(ar);
        const auto method = ar.manifest.value("extra", nlohmann::json::object()).value("method", "pat");
        const auto mode = parse_method(method) == Method::Pat ? ForwardMode::Masked : ForwardMode::Plain;
        s = score_heldout<T>(logits_fn(m, mode), split.heldout, std::min(seq_len, m.config().max_seq_len));
      }
      out << "perplexity " << s.perplexity << " accuracy " << s.accuracy << " scored " << s.scored << '\n';
      return kExitOk;
    });
  });
}

struct BenchOptions {
  std::vector<std::size_t> batch_sizes{1, 8};
  std::size_t seq_len = 64;
  std::size_t reps = 9;
  std::size_t warmup = 2;
  std::string csv;  ///< appended to; empty writes CSV to `out`
};

namespace detail {

template <class T>
DecoderWeights<T> dense_weights(const std::string& ckpt) {
  if (checkpoint_is_pruned(ckpt)) return load_pruned<T>(ckpt).first;
  auto m = load_state<T>(ckpt);
  if (!m.lora_merged) merge_lora_all(m);
  return m.base;
}

}  // namespace detail

/// `pat bench <checkpoint> [--baseline <checkpoint>]`
inline int cmd_bench(const GlobalOptions& g, const std::string& ckpt, const std::string& baseline,
                     const BenchOptions& bo = {}, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  return guarded(err, [&] {
    blas::set_threads(1);
    return detail::with_precision(g.f64, ckpt, [&](auto tag) {
      using T = decltype(tag);
      std::vector<BenchResult> rows;
      std::vector<BenchResult> base_rows;
      if (!baseline.empty()) {
        const auto wb = detail::dense_weights<T>(baseline);
        base_rows = bench_forward(wb, baseline, bo.batch_sizes, bo.seq_len, bo.reps, bo.warmup);
      }
      const auto w = detail::dense_weights<T>(ckpt);
      rows = bench_forward(w, ckpt, bo.batch_sizes, bo.seq_len, bo.reps, bo.warmup);
      rows.insert(rows.begin(), base_rows.begin(), base_rows.end());

      std::ofstream file;
      std::ostream* csv = &out;
      if (!bo.csv.empty()) {
        const bool fresh = !std::filesystem::exists(bo.csv) || std::filesystem::file_size(bo.csv) == 0;
        file.open(bo.csv, std::ios::app);
        if (!file) throw InputError("cannot open '" + bo.csv + "' for appending");
        csv = &file;
        if (fresh) write_bench_header(file);
      } else {
        write_bench_header(out);
      }
      for (const auto& r : rows) write_bench_row(*csv, r);
      if (!base_rows.empty() && !g.quiet)
        for (std::size_t i = 0; i < bo.batch_sizes.size(); ++i)
          out << "batch " << bo.batch_sizes[i] << " speedup " << speedup(base_rows[i], rows[base_rows.size() + i])
              << '\n';
      return kExitOk;
    });
  });
}

/// `pat mask-trace <checkpoint>`: gate statistics at steps 0, every, 2*every, ...
/// up to the checkpoint's current step (inclusive).
inline int cmd_mask_trace(const GlobalOptions& g, const std::string& ckpt, std::int64_t every = 1,
                          std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  return guarded(err, [&] {
    if (every < 1) throw ConfigError("mask-trace: --every must be >= 1");
    if (detail::checkpoint_is_pruned(ckpt)) throw ConfigError("mask-trace: '" + ckpt + "' is pruned and has no mask");
    return detail::with_precision(g.f64, ckpt, [&](auto tag) {
      using T = decltype(tag);
      const auto m = load_state<T>(ckpt);
      std::ofstream file;
      std::ostream* os = &out;
      if (!g.out.empty()) {
        file.open(g.out, std::ios::trunc);
        if (!file) throw InputError("cannot write '" + g.out + "'");
        os = &file;
      }
      write_mask_trace_header(*os);
      const std::int64_t last = m.mask->step;
      for (std::int64_t s = 0; s <= last; s += every) write_mask_trace_row(*os, mask_state(*m.mask, s));
      if (last % every != 0) write_mask_trace_row(*os, mask_state(*m.mask, last));
      return kExitOk;
    });
  });
}

}  // namespace pat
