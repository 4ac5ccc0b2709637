// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits nonzero if any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pat/app.hpp"
#include "pat/blas.hpp"
#include "testing.hpp"

using namespace pat;
namespace fs = std::filesystem;
using pat::testing::check_gradients;
using pat::testing::Projector;
using pat::testing::random_tensor;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double x) {
  std::ostringstream os;
  os << x;
  return os.str();
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Tracks the worst relative error over a list of named checks.
class GradLedger {
 public:
  void add(const std::string& name, const testing::GradCheck& r) {
    checked_ += r.checked;
    if (r.max_rel > worst_) {
      worst_ = r.max_rel;
      worst_name_ = name;
    }
    ++count_;
  }
  double worst() const { return worst_; }
  std::string summary() const {
    return std::to_string(count_) + " checks, " + std::to_string(checked_) + " entries, worst rel " + fmt(worst_) +
           " (" + worst_name_ + ")";
  }

 private:
  double worst_ = 0;
  std::string worst_name_ = "-";
  std::size_t count_ = 0, checked_ = 0;
};

// ---------------------------------------------------------------------------
// 1. Gradient fidelity
// ---------------------------------------------------------------------------

void grad_ops(GradLedger& led) {
  Rng rng(100);
  Projector proj(1);
  auto a = random_tensor(Shape{4, 6}, rng), b = random_tensor(Shape{6, 3}, rng);
  led.add("matmul", check_gradients([&](Tape<double>& t) { return proj(t, matmul(t, a, b)); }, {a, b}));

  auto x3 = random_tensor(Shape{2, 3, 5}, rng), w = random_tensor(Shape{4, 5}, rng);
  led.add("linear", check_gradients([&](Tape<double>& t) { return proj(t, linear(t, x3, w)); }, {x3, w}));

  auto m = random_tensor(Shape{3, 4}, rng);
  led.add("transpose+reshape", check_gradients(
                                   [&](Tape<double>& t) { return proj(t, reshape(t, transpose(t, m), Shape{2, 6})); },
                                   {m}));

  auto p = random_tensor(Shape{3, 4}, rng), q = random_tensor(Shape{3, 4}, rng), v = random_tensor(Shape{4}, rng);
  for (auto& e : q.data()) e = e > 0 ? e + 0.5 : e - 0.5;
  for (auto& e : v.data()) e = e > 0 ? e + 0.5 : e - 0.5;
  for (auto op : {BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul, BinaryOp::Div}) {
    const std::string n = "binary" + std::to_string(static_cast<int>(op));
    led.add(n, check_gradients([&](Tape<double>& t) { return proj(t, binary(t, op, p, q)); }, {p, q}));
    led.add(n + " bcast", check_gradients([&](Tape<double>& t) { return proj(t, binary(t, op, p, v)); }, {p, v}));
  }

  auto e = random_tensor(Shape{5, 3}, rng, 2.0);
  led.add("sigmoid", check_gradients([&](Tape<double>& t) { return proj(t, sigmoid(t, e)); }, {e}));
  led.add("silu", check_gradients([&](Tape<double>& t) { return proj(t, silu(t, e)); }, {e}));
  led.add("scale", check_gradients([&](Tape<double>& t) { return proj(t, scale(t, e, -1.7)); }, {e}));
  led.add("add_scalar", check_gradients([&](Tape<double>& t) { return proj(t, add_scalar(t, e, 0.3)); }, {e}));
  led.add("sum", check_gradients([&](Tape<double>& t) { return sum(t, mul(t, e, e)); }, {e}));
  led.add("mean", check_gradients([&](Tape<double>& t) { return mean(t, mul(t, e, e)); }, {e}));
  led.add("frobenius", check_gradients([&](Tape<double>& t) { return frobenius_norm(t, e); }, {e}));

  auto xr = random_tensor(Shape{3, 8}, rng), g = random_tensor(Shape{8}, rng);
  led.add("rmsnorm", check_gradients([&](Tape<double>& t) { return proj(t, rmsnorm(t, xr, g, 1e-6)); }, {xr, g}));
  led.add("rmsnorm scaled",
          check_gradients([&](Tape<double>& t) { return proj(t, rmsnorm(t, xr, g, 1e-2, 1.3)); }, {xr, g}));
  led.add("softmax", check_gradients([&](Tape<double>& t) { return proj(t, softmax_rows(t, xr)); }, {xr}));

  auto logits = random_tensor(Shape{2, 3, 6}, rng);
  const std::vector<std::int32_t> tg{0, 5, 2, 3, 3, 1};
  const std::vector<double> wt{1, 0, 1, 1, 0, 1};
  led.add("cross_entropy", check_gradients(
                               [&](Tape<double>& t) { return cross_entropy_logits<double>(t, logits, tg, wt); }, {logits}));

  auto table = random_tensor(Shape{5, 4}, rng);
  const std::vector<std::int32_t> ids{3, 0, 3, 4};
  led.add("embedding", check_gradients(
                           [&](Tape<double>& t) { return proj(t, embedding_lookup<double>(t, table, ids)); }, {table}));

  auto c1 = random_tensor(Shape{3, 2}, rng), c2 = random_tensor(Shape{3, 5}, rng);
  led.add("concat", check_gradients([&](Tape<double>& t) { return proj(t, concat_last_axis(t, c1, c2)); }, {c1, c2}));

  auto qa = random_tensor(Shape{10, 6}, rng), ka = random_tensor(Shape{10, 6}, rng), va = random_tensor(Shape{10, 6}, rng);
  led.add("causal_attention",
          check_gradients([&](Tape<double>& t) { return proj(t, causal_attention(t, qa, ka, va, 2, 5, 2)); },
                          {qa, ka, va}));
}

void grad_sparsify(GradLedger& led) {
  Rng rng(200);
  const std::int64_t s0 = 40;
  auto mask = std::make_shared<UnifiedMask<double>>(UnifiedMask<double>::create(10, s0, 1e-3, 5));
  Projector proj(2);
  for (std::int64_t s : {std::int64_t{1}, s0 / 4, s0 / 2, s0 - 1, s0}) {
    // Keep proxies inside the unsaturated band of the sigmoid at this step.
    fill_normal(mask->proxy, 1.0 / std::max(1.0, mask->tau(s)), rng);
    led.add("gate s=" + std::to_string(s),
            check_gradients([&](Tape<double>& t) { return proj(t, gate(t, *mask, s)); }, {mask->proxy}));
  }

  fill_normal(mask->proxy, 0.5, rng);
  auto h = HybridSparsifier<double>::create(mask, 3, rng);
  fill_normal(h.v, 1.0, rng);
  auto x = random_tensor(Shape{4, 10}, rng);
  for (std::int64_t s : {1, 7, 19, 20})
    led.add("hsm_forward s=" + std::to_string(s),
            check_gradients([&](Tape<double>& t) { return proj(t, hsm_forward(t, h, x, s)); },
                            {h.l0, h.v, h.l1, mask->proxy, x}));

  auto h2 = HybridSparsifier<double>::create(mask, 2, rng);
  const HybridSparsifier<double>* hs[] = {&h, &h2};
  led.add("identity_loss", check_gradients([&](Tape<double>& t) { return identity_loss<double>(t, hs); },
                                           {h.l0, h.l1, h2.l0, h2.l1}));
}

/// The active-channel term has a straight-through backward; its analytic
/// gradient is that of |N - sum sigmoid(tau W)|, so the reference objective
/// substitutes that surrogate for the hard count.
void grad_composite(GradLedger& led) {
  ModelConfig c;
  c.d_model = 8;
  c.n_heads = 2;
  c.n_layers = 1;
  c.d_ff = 12;
  c.vocab_size = 9;
  c.max_seq_len = 8;
  c.seed = 4;
  TrainConfig tc;
  tc.total_steps = 30;
  tc.seq_len = 8;
  tc.target_prune_ratio = 0.25;
  auto m = init_model<double>(c, {2, 1e-3, tc.n_target(c.d_model), tc.milestone()}, {2, 4.0});
  Rng rng(21);
  for (auto p : m.lora_parameters()) fill_normal(p, 0.1, rng);
  for (auto p : m.sparsity_parameters()) fill_normal(p, 0.3, rng);
  auto spec = DataSpec::parse("mod_add(5)");
  spec.examples = 400;
  const auto data = ingest(spec);
  const std::size_t starts[] = {0, 27};
  const auto batch = make_batch<double>(data, starts, 8);
  const std::int64_t s = 4;
  const double tau = m.mask->tau(s);

  auto params = m.sparsity_parameters();
  params.push_back(m.lora[0][static_cast<std::size_t>(Proj::O)].b);
  params.push_back(m.lora[0][static_cast<std::size_t>(Proj::Down)].a);
  params.push_back(m.lora_head.b);
  for (auto& p : params) {
    p.set_requires_grad(true);
    p.clear_grad();
  }
  {
    Tape<double> tape;
    tape.backward(composite_loss(tape, m, batch, s).total);
  }
  auto smooth = [&] {
    Tape<double> off(false);
    const auto parts = composite_loss(off, m, batch, s);
    double soft = 0;
    for (double w : m.mask->proxy.data()) soft += 1.0 / (1.0 + std::exp(-tau * w));
    return parts.instruct + parts.identity + std::abs(static_cast<double>(m.mask->n_target) - soft);
  };
  testing::GradCheck r;
  const double step = 1e-6;
  for (auto& p : params) {
    const std::vector<double> analytic(p.grad().begin(), p.grad().end());
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double keep = p[i];
      p[i] = keep + step;
      const double up = smooth();
      p[i] = keep - step;
      const double down = smooth();
      p[i] = keep;
      r.max_rel = std::max(r.max_rel, testing::rel_error(analytic[i], (up - down) / (2 * step)));
      ++r.checked;
    }
  }
  led.add("composite_loss", r);
}

Outcome gradient_fidelity() {
  const auto t0 = std::chrono::steady_clock::now();
  GradLedger led;
  grad_ops(led);
  grad_sparsify(led);
  grad_composite(led);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return {led.worst() <= 1e-4 && secs < 60.0, led.summary() + ", " + fmt(secs) + " s"};
}

// ---------------------------------------------------------------------------
// 2. Schedule endpoints
// ---------------------------------------------------------------------------

Outcome schedule_endpoints() {
  Rng rng(2);
  auto m = UnifiedMask<double>::create(4096, 1000, 1e-3, 100);
  fill_normal(m.proxy, 3.0, rng);
  bool ones = true;
  for (double g : gate_values(m, 0)) ones = ones && g == 1.0;

  // Proxies with |W| >= 0.01, including the boundary values.
  for (auto& w : m.proxy.data()) w = (w >= 0 ? 1.0 : -1.0) * (0.01 + std::abs(w));
  m.proxy[0] = 0.01;
  m.proxy[1] = -0.01;
  double worst = 0;
  for (std::int64_t s : {1000, 1001, 5000})
    for (double g : gate_values(m, s)) worst = std::max(worst, std::min(g, 1.0 - g));
  return {ones && worst <= 5e-5,
          std::string("gate(s=0) all exactly 1: ") + (ones ? "yes" : "no") + ", max min(M,1-M) for s>=s0: " + fmt(worst)};
}

// ---------------------------------------------------------------------------
// 3, 4, 8. Toy runs
// ---------------------------------------------------------------------------

struct ToyRuns {
  fs::path root;
  int pat_exit = -1, lora_exit = -1;
  double pat_secs = 0, lora_secs = 0;
  std::string pat_err, lora_err;
};

int train_from(const fs::path& cfg, const fs::path& out, std::string& err_text, double& secs) {
  GlobalOptions g;
  g.config = cfg.string();
  g.out = out.string();
  g.quiet = true;
  std::ostringstream out_s, err_s;
  const auto t0 = std::chrono::steady_clock::now();
  const int rc = cmd_train(g, out_s, err_s);
  secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  err_text = err_s.str();
  return rc;
}

Outcome mask_convergence(const ToyRuns& runs) {
  if (runs.pat_exit != kExitOk) return {false, "training failed: " + runs.pat_err};
  const auto m = load_state<float>(runs.root / "pat" / "final");
  const auto gates = gate_values(*m.mask, m.mask->step);
  std::size_t nonbinary = 0;
  for (float g : gates) nonbinary += std::min(g, 1.f - g) > 1e-3f;
  const std::size_t count = m.mask->active_count();
  const bool shape_ok = m.config().d_model == 64 && m.config().n_layers == 2 && m.config().vocab_size == 256 &&
                        m.mask->step == 3000 && m.mask->s0 == 1000;
  return {shape_ok && count == 48 && nonbinary == 0 && runs.pat_secs < 600.0,
          "active count " + std::to_string(count) + " (target 48), non-binary gates " + std::to_string(nonbinary) +
              ", " + fmt(runs.pat_secs) + " s"};
}

Outcome slice_equivalence(const ToyRuns& runs) {
  if (runs.pat_exit != kExitOk) return {false, "training failed: " + runs.pat_err};
  GlobalOptions g;
  g.quiet = true;
  g.seed = 7;
  std::ostringstream out, err;
  g.out = (runs.root / "pruned").string();
  if (cmd_prune(g, (runs.root / "pat" / "final").string(), 32, out, err) != kExitOk) return {false, err.str()};
  g.out = (runs.root / "pruned_no_rescale").string();
  if (cmd_prune(g, (runs.root / "pat" / "final").string(), 32, out, err, SliceOptions{false}) != kExitOk)
    return {false, err.str()};
  std::ostringstream vout;
  const int verify_rc =
      cmd_verify(g, (runs.root / "pat" / "final").string(), (runs.root / "pruned").string(), 32, vout, err);
  auto residual = [&](const char* leaf) {
    return nlohmann::json::parse(slurp(runs.root / leaf / "prune_report.json")).at("max_residual").get<double>();
  };
  const double with = residual("pruned"), without = residual("pruned_no_rescale");
  return {with <= 1e-4 && without > 1e-2 && verify_rc == kExitOk,
          "residual " + fmt(with) + " (<= 1e-4), without gain rescale " + fmt(without) + " (> 1e-2)"};
}

Outcome quality_retention(const ToyRuns& runs) {
  if (runs.pat_exit != kExitOk || runs.lora_exit != kExitOk)
    return {false, "training failed: " + runs.pat_err + runs.lora_err};
  auto acc = [&](const char* leaf) {
    return nlohmann::json::parse(slurp(runs.root / leaf / "summary.json")).at("heldout_accuracy").get<double>();
  };
  // The PAT model is scored after merge-and-slice, i.e. as deployed.
  const auto [w, bm] = load_pruned<float>(runs.root / "pruned");
  const auto cfg = parse_run_config_text(slurp(runs.root / "pat" / "config.json"));
  const auto split = split_stream(ingest(cfg.data.spec()), cfg.data.train_fraction);
  const double pruned_acc = score_heldout<float>(logits_fn(w), split.heldout, cfg.train.seq_len).accuracy;
  const double pat = acc("pat"), lora = acc("lora");
  return {pruned_acc >= lora - 0.05 && pat >= lora - 0.05,
          "PAT (25% pruned) accuracy " + fmt(pruned_acc) + " (masked " + fmt(pat) + "), LoRA accuracy " + fmt(lora) +
              ", gap " + fmt(100.0 * (lora - pruned_acc)) + " pp"};
}

// ---------------------------------------------------------------------------
// 5. HIO parameter budget
// ---------------------------------------------------------------------------

Outcome hio_budget() {
  const std::size_t n = HybridSparsifier<float>::parameter_count(4096, 200);
  const double frac = static_cast<double>(n) / (4096.0 * 4096.0);
  return {n == 1638600 && frac >= 0.09 && frac <= 0.11,
          std::to_string(n) + " trainable parameters, " + fmt(100.0 * frac) + "% of dense"};
}

// ---------------------------------------------------------------------------
// 6. Structural reduction accounting
// ---------------------------------------------------------------------------

std::size_t closed_form_params(std::size_t dk, std::size_t da, std::size_t f, std::size_t vocab, std::size_t seq,
                               std::size_t layers) {
  const std::size_t emb = vocab * dk + seq * dk;
  const std::size_t attn = 3 * da * dk + dk * da;
  const std::size_t ffn = 3 * f * dk;
  const std::size_t norms = 2 * dk;
  return emb + layers * (attn + ffn + norms) + dk + vocab * dk;
}

Outcome reduction_accounting() {
  std::string detail;
  bool ok = true;
  for (double rho : {0.20, 0.25, 0.30}) {
    ModelConfig c;
    const std::size_t d = c.d_model;
    const auto n = static_cast<std::size_t>(std::llround((1.0 - rho) * static_cast<double>(d)));
    auto m = init_model<float>(c, {4, 1e-3, n, 10}, {4, 8.0});
    Rng rng(31);
    for (auto p : m.sparsity_parameters()) fill_normal(p, 0.3, rng);
    m.mask->step = 30;
    const auto res = merge_and_slice(m);
    const std::size_t before = closed_form_params(d, d, c.d_ff, c.vocab_size, c.max_seq_len, c.n_layers);
    const std::size_t after = closed_form_params(n, d, c.d_ff, c.vocab_size, c.max_seq_len, c.n_layers);
    const bool match = res.report.params_before == before && res.report.params_after == after &&
                       res.report.d_kept == n && res.pruned.parameter_count() == after;
    ok = ok && match;
    detail += "rho " + fmt(rho) + ": " + std::to_string(res.report.params_before) + " -> " +
              std::to_string(res.report.params_after) + (match ? " ok; " : " MISMATCH; ");
  }
  return {ok, detail};
}

// ---------------------------------------------------------------------------
// 7. Latency direction
// ---------------------------------------------------------------------------

Outcome latency_direction() {
  blas::set_threads(1);
  ModelConfig c;
  c.d_model = 2048;
  c.n_layers = 4;
  c.n_heads = 16;
  c.d_ff = 5504;
  c.vocab_size = 256;
  c.max_seq_len = 64;
  Rng rng(7);
  const auto dense = DecoderWeights<float>::init(c, rng);
  const auto d_kept = static_cast<std::size_t>(std::llround(0.7 * static_cast<double>(c.d_model)));
  std::vector<std::size_t> channels(c.d_model);
  std::iota(channels.begin(), channels.end(), std::size_t{0});
  std::shuffle(channels.begin(), channels.end(), rng);
  BinaryMask bm{{channels.begin(), channels.begin() + static_cast<std::ptrdiff_t>(d_kept)}, c.d_model};
  std::sort(bm.kept.begin(), bm.kept.end());
  const auto pruned = slice_weights(dense, bm);
  const auto a = bench_forward(dense, "dense", {8}, 64, 9, 2);
  const auto b = bench_forward(pruned, "pruned", {8}, 64, 9, 2);
  const double s = speedup(a[0], b[0]);
  return {s >= 1.2, "median " + fmt(a[0].median_ms) + " ms -> " + fmt(b[0].median_ms) + " ms, speedup " + fmt(s) +
                        "x (d_kept " + std::to_string(d_kept) + ")"};
}

// ---------------------------------------------------------------------------
// 9. Zero preservation
// ---------------------------------------------------------------------------

Outcome zero_preservation() {
  std::mt19937_64 gen(9);
  Rng rng(9);
  Tape<float> off(false);
  std::size_t rms_cases = 0, rms_bad = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t rows = 1 + gen() % 6, d = 2 + gen() % 40;
    auto x = normal_tensor<float>(Shape{rows, d}, 1.0 + static_cast<double>(gen() % 100), rng);
    auto g = normal_tensor<float>(Shape{d}, 1.0, rng);
    std::vector<std::size_t> zero;
    for (std::size_t i = 0; i < d; ++i)
      if (gen() % 3 == 0) zero.push_back(i);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t i : zero) x[r * d + i] = 0.f;
    const float eps = static_cast<float>(std::pow(10.0, -3.0 - static_cast<double>(gen() % 6)));
    const auto y = rmsnorm(off, x, g, eps);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t i : zero) rms_bad += y[r * d + i] != 0.f;
    ++rms_cases;
  }

  std::size_t fwd_points = 0, fwd_bad = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    ModelConfig c;
    c.d_model = 8 * (1 + gen() % 3);
    c.n_heads = 2;
    c.n_layers = 1 + gen() % 2;
    c.d_ff = 12;
    c.vocab_size = 11;
    c.max_seq_len = 6;
    c.seed = static_cast<std::uint64_t>(trial + 1);
    auto m = init_model<float>(c, {2, 1e-3, c.d_model / 2, 10}, {2, 4.0});
    for (auto t : m.lora_parameters()) fill_normal(t, 0.2, rng);
    for (auto t : m.sparsity_parameters()) fill_normal(t, 0.3, rng);
    Tensor<float> mask(Shape{c.d_model});
    std::set<std::size_t> zeroed;
    for (std::size_t i = 0; i < c.d_model; ++i) {
      const bool z = gen() % 3 == 0;
      mask[i] = z ? 0.f : 0.5f + 0.5f * static_cast<float>(gen() % 1000) / 1000.f;
      if (z) zeroed.insert(i);
    }
    Probe<float> probe = [&](ProbePoint, std::size_t, const Tensor<float>& h) {
      for (std::size_t r = 0; r < h.rows(); ++r)
        for (std::size_t i : zeroed) {
          fwd_bad += h[r * c.d_model + i] != 0.f;
          ++fwd_points;
        }
    };
    ForwardOptions<float> opt;
    opt.mask_override = &mask;
    opt.probe = &probe;
    infer(m, random_tokens(c.vocab_size, 1 + gen() % 6, gen(), 1 + gen() % 3), opt);
  }
  return {rms_bad == 0 && fwd_bad == 0 && fwd_points > 0,
          std::to_string(rms_cases) + " rmsnorm cases (" + std::to_string(rms_bad) + " nonzero), " +
              std::to_string(fwd_points) + " masked residual entries over 1000 forwards (" + std::to_string(fwd_bad) +
              " nonzero)"};
}

// ---------------------------------------------------------------------------
// 10. Determinism and serialization
// ---------------------------------------------------------------------------

Outcome determinism(const fs::path& root) {
  ModelConfig c;
  c.d_model = 16;
  c.n_heads = 2;
  c.n_layers = 2;
  c.d_ff = 24;
  c.vocab_size = 9;
  c.max_seq_len = 8;
  TrainConfig tc;
  tc.total_steps = 50;
  tc.batch_size = 4;
  tc.seq_len = 8;
  tc.lr_max = 1e-2;
  auto spec = DataSpec::parse("mod_add(5)");
  spec.examples = 400;
  const auto data = ingest(spec);
  auto run = [&] {
    auto m = init_model<float>(c, {3, 1e-3, tc.n_target(c.d_model), tc.milestone()}, {2, 4.0});
    auto log = train(m, tc, data);
    return std::make_pair(std::move(m), std::move(log));
  };
  auto [a, la] = run();
  auto [b, lb] = run();
  bool same_log = la.size() == 50 && la.size() == lb.size();
  for (std::size_t i = 0; same_log && i < la.size(); ++i)
    same_log = la[i].loss_total == lb[i].loss_total && la[i].active_count == lb[i].active_count;

  save_state(root / "a", a);
  save_state(root / "b", b);
  const bool same_weights = slurp(root / "a" / "weights.bin") == slurp(root / "b" / "weights.bin");
  save_state(root / "a2", load_state<float>(root / "a"));
  const bool state_rt = slurp(root / "a" / "weights.bin") == slurp(root / "a2" / "weights.bin") &&
                        slurp(root / "a" / "manifest.json") == slurp(root / "a2" / "manifest.json");

  auto res = merge_and_slice(a);
  save_pruned(root / "p", res.pruned, a.snap);
  const auto [pw, pm] = load_pruned<float>(root / "p");
  save_pruned(root / "p2", pw, pm);
  const bool pruned_rt = slurp(root / "p" / "weights.bin") == slurp(root / "p2" / "weights.bin") &&
                         slurp(root / "p" / "manifest.json") == slurp(root / "p2" / "manifest.json");
  auto yn = [](bool v) { return v ? "yes" : "no"; };
  return {same_log && same_weights && state_rt && pruned_rt,
          std::string("50-step logs identical ") + yn(same_log) + ", checkpoints identical " + yn(same_weights) +
              ", state round trip " + yn(state_rt) + ", pruned round trip " + yn(pruned_rt)};
}

}  // namespace

int main() {
  testing::TempDir scratch("acceptance");
  ToyRuns runs;
  runs.root = scratch.path();
  const fs::path configs = PAT_CONFIG_DIR;

  int failures = 0;
  auto report = [&](int id, const char* title, const std::function<Outcome()>& fn) {
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << "  criterion " << id << " (" << title << "): " << o.detail << std::endl;
  };

  report(1, "gradient fidelity", gradient_fidelity);
  report(2, "schedule endpoints", schedule_endpoints);
  runs.pat_exit = train_from(configs / "toy_pat_mod_add.json", runs.root / "pat", runs.pat_err, runs.pat_secs);
  runs.lora_exit = train_from(configs / "toy_lora_mod_add.json", runs.root / "lora", runs.lora_err, runs.lora_secs);
  report(3, "mask convergence", [&] { return mask_convergence(runs); });
  report(4, "merge-and-slice equivalence", [&] { return slice_equivalence(runs); });
  report(5, "HIO parameter budget", hio_budget);
  report(6, "structural reduction accounting", reduction_accounting);
  report(7, "latency direction", latency_direction);
  report(8, "quality retention", [&] { return quality_retention(runs); });
  report(9, "zero preservation", zero_preservation);
  report(10, "determinism and serialization", [&] { return determinism(runs.root / "det"); });

  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
  return failures == 0 ? 0 : 1;
}
