#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "pat/app.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Pruning-aware tuning of small decoder-only transformers"};
  app.require_subcommand(1);
  app.fallthrough();  // global flags may follow the subcommand
  pat::GlobalOptions g;
  std::uint64_t seed = 0;
  auto* seed_opt = app.add_option("--seed", seed, "Override the random seed");
  app.add_option("-c,--config", g.config, "Run configuration (JSON)");
  app.add_option("--out", g.out, "Output directory or file");
  app.add_flag("--f64", g.f64, "Compute in 64-bit floating point");
  app.add_flag("--quiet", g.quiet, "Suppress progress output");

  auto* train = app.add_subcommand("train", "Pruning-aware fine-tuning from a config");

  std::string ckpt, other, data;
  std::size_t n_inputs = 32;
  auto* prune = app.add_subcommand("prune", "Merge adapters and sparsifiers, then slice the hidden dimension");
  prune->add_option("checkpoint", ckpt, "Trained checkpoint directory")->required();
  prune->add_option("--n-inputs", n_inputs, "Random sequences for the equivalence check");

  auto* verify = app.add_subcommand("verify", "Check that a pruned model matches its masked source");
  verify->add_option("base", ckpt, "Unpruned checkpoint")->required();
  verify->add_option("pruned", other, "Pruned checkpoint")->required();
  verify->add_option("--n-inputs", n_inputs, "Random sequences to compare");

  std::size_t seq_len = 64;
  auto* eval = app.add_subcommand("eval", "Held-out perplexity and accuracy");
  eval->add_option("checkpoint", ckpt, "Checkpoint directory")->required();
  eval->add_option("--data", data, "Text file, copy(len,vocab) or mod_add(m)")->required();
  eval->add_option("--seq", seq_len, "Window length");

  pat::BenchOptions bo;
  auto* bench = app.add_subcommand("bench", "Forward-pass latency (CSV)");
  bench->add_option("checkpoint", ckpt, "Checkpoint directory")->required();
  bench->add_option("--baseline", other, "Checkpoint to compare against");
  bench->add_option("--batch", bo.batch_sizes, "Batch sizes")->delimiter(',');
  bench->add_option("--seq", bo.seq_len, "Sequence length");
  bench->add_option("--reps", bo.reps, "Timed repetitions (>= 5)");
  bench->add_option("--warmup", bo.warmup, "Untimed warmup runs (>= 2)");
  bench->add_option("--csv", bo.csv, "Append results to this CSV file");

  std::int64_t every = 1;
  auto* trace = app.add_subcommand("mask-trace", "Gate schedule of a checkpoint's mask (CSV)");
  trace->add_option("checkpoint", ckpt, "Checkpoint directory")->required();
  trace->add_option("--every", every, "Step stride");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : pat::kExitConfig;
  }
  if (seed_opt->count()) g.seed = seed;

  if (*train) return pat::cmd_train(g);
  if (*prune) return pat::cmd_prune(g, ckpt, n_inputs);
  if (*verify) return pat::cmd_verify(g, ckpt, other, n_inputs);
  if (*eval) return pat::cmd_eval(g, ckpt, data, seq_len);
  if (*bench) return pat::cmd_bench(g, ckpt, other, bo);
  if (*trace) return pat::cmd_mask_trace(g, ckpt, every);
  return pat::kExitConfig;
}
