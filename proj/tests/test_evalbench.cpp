#include <gtest/gtest.h>

#include <sstream>

#include "pat/blas.hpp"
#include "pat/evalbench.hpp"
#include "pat/pruner.hpp"
#include "testing.hpp"

using namespace pat;

namespace {

/// Every token is scored against its predecessor, like a text corpus.
TokenStream cyclic_stream(std::size_t n, std::size_t period, std::size_t vocab) {
  TokenStream s;
  s.vocab = vocab;
  for (std::size_t i = 0; i < n; ++i) {
    s.tokens.push_back(static_cast<std::int32_t>(i % period));
    s.target.push_back(i > 0);
    s.example_start.push_back(i);
  }
  return s;
}

ModelConfig bench_config(std::size_t d) {
  ModelConfig c;
  c.d_model = d;
  c.n_heads = 4;
  c.n_layers = 2;
  c.d_ff = 2 * d;
  c.vocab_size = 64;
  c.max_seq_len = 32;
  return c;
}

}  // namespace

TEST(Perplexity, UniformLogitsGiveVocabSize) {
  const std::size_t vocab = 37;
  const auto corpus = cyclic_stream(500, 5, vocab);
  LogitsFn<double> uniform = [&](const TokenBatch& b) { return Tensor<double>(Shape{b.batch, b.len, vocab}, 0.25); };
  const auto s = score_heldout(uniform, corpus, 16);
  EXPECT_NEAR(s.perplexity, static_cast<double>(vocab), 1e-9);
  EXPECT_NEAR(perplexity(uniform, corpus, 16), static_cast<double>(vocab), 1e-9);
  EXPECT_GT(s.scored, 0u);
}

TEST(Perplexity, MemorizedCycleApproachesOne) {
  const std::size_t vocab = 4, period = 2;
  const auto corpus = cyclic_stream(300, period, vocab);
  LogitsFn<double> oracle = [&](const TokenBatch& b) {
    Tensor<double> out(Shape{b.batch, b.len, vocab}, 0.0);
    for (std::size_t i = 0; i < b.ids.size(); ++i) out[i * vocab + (static_cast<std::size_t>(b.ids[i]) + 1) % period] = 40.0;
    return out;
  };
  const auto s = score_heldout(oracle, corpus, 8);
  EXPECT_NEAR(s.perplexity, 1.0, 1e-12);
  EXPECT_EQ(s.accuracy, 1.0);
}

TEST(Perplexity, RandomInitIsNearUniform) {
  auto c = bench_config(32);
  Rng rng(c.seed);
  const auto w = DecoderWeights<float>::init(c, rng);
  const auto corpus = cyclic_stream(2000, 61, 64);
  const double ppl = perplexity(logits_fn(w), corpus, 32);
  EXPECT_GE(ppl, 55.0);
  EXPECT_LE(ppl, 75.0);
}

TEST(Perplexity, EmptyOrShortCorpusThrows) {
  LogitsFn<float> fn = [](const TokenBatch& b) { return Tensor<float>(Shape{b.batch, b.len, 3}); };
  EXPECT_THROW(score_heldout(fn, TokenStream{}, 8), InputError);
  EXPECT_THROW(score_heldout(fn, cyclic_stream(5, 2, 3), 8), InputError);
  auto unscored = cyclic_stream(40, 2, 3);
  std::fill(unscored.target.begin(), unscored.target.end(), 0);
  EXPECT_THROW(score_heldout(fn, unscored, 8), InputError);
}

TEST(RandomTokens, DeterministicAndInRange) {
  const auto a = random_tokens(17, 9, 5, 3);
  const auto b = random_tokens(17, 9, 5, 3);
  EXPECT_EQ(a.ids, b.ids);
  EXPECT_EQ(a.ids.size(), 27u);
  for (auto id : a.ids) {
    EXPECT_GE(id, 0);
    EXPECT_LT(id, 17);
  }
  EXPECT_NE(random_tokens(17, 9, 6, 3).ids, a.ids);
}

TEST(Verify, FullMaskResidualIsZeroAndDeterministic) {
  auto c = bench_config(16);
  c.vocab_size = 11;
  c.max_seq_len = 8;
  auto m = init_model<float>(c, {3, 1e-3, 16, 10}, {2, 4.0});
  Rng rng(3);
  for (auto p : m.lora_parameters()) fill_normal(p, 0.1, rng);
  merge_lora_all(m);
  merge_hsm_all(m, BinaryMask::all(16));
  const auto res = slice_model(m, BinaryMask::all(16));
  EXPECT_EQ(verify_equivalence(m, res.pruned, 8, 1), 0.0);

  auto other = res.pruned.clone();
  other.lm_head[0] += 1.0f;
  const double r1 = verify_equivalence(m, other, 8, 4);
  EXPECT_GT(r1, kEquivalenceTolerance32);
  EXPECT_EQ(verify_equivalence(m, other, 8, 4), r1);
}

TEST(Verify, ConfigMismatchThrows) {
  auto c = bench_config(16);
  auto m = init_model<float>(c, {3, 1e-3, 16, 10}, {2, 4.0});
  auto c2 = c;
  c2.vocab_size = 65;
  Rng rng(1);
  const auto w = DecoderWeights<float>::init(c2, rng);
  EXPECT_THROW(verify_equivalence(m, w, 2, 1), ConfigError);
  EXPECT_THROW((max_logit_residual<float>(logits_fn(m.base), logits_fn(m.base), 64, 4, 0, 1)), InputError);
}

TEST(Bench, RejectsTooFewRepsOrWarmups) {
  Rng rng(1);
  const auto w = DecoderWeights<float>::init(bench_config(16), rng);
  EXPECT_THROW(bench_forward(w, "x", {1}, 8, 4), ConfigError);
  EXPECT_THROW(bench_forward(w, "x", {1}, 8, 5, 1), ConfigError);
}

TEST(Bench, ResultFieldsAndCsv) {
  Rng rng(1);
  const auto w = DecoderWeights<float>::init(bench_config(32), rng);
  const auto rs = bench_forward(w, "base", {1, 2}, 16, 5);
  ASSERT_EQ(rs.size(), 2u);
  EXPECT_EQ(rs[1].batch, 2u);
  EXPECT_EQ(rs[0].d, 32u);
  EXPECT_EQ(rs[0].d_kept, 32u);
  EXPECT_EQ(rs[0].params, w.parameter_count());
  EXPECT_GT(rs[0].median_ms, 0.0);
  EXPECT_GE(rs[0].std_ms, 0.0);
  EXPECT_GT(rs[0].alloc_bytes, 0u);
  std::ostringstream os;
  write_bench_header(os);
  write_bench_row(os, rs[0]);
  const std::string text = os.str();
  const auto nl = text.find('\n');
  EXPECT_EQ(text.substr(0, nl), "model_id,d,d_kept,batch,seq,mean_ms,std_ms,params,alloc_bytes");
  EXPECT_EQ(text.compare(nl + 1, 16, "base,32,32,1,16,"), 0);
}

TEST(Bench, SelfComparisonWithinNoiseBand) {
  blas::set_threads(1);
  Rng rng(2);
  const auto w = DecoderWeights<float>::init(bench_config(256), rng);
  const auto a = bench_forward(w, "a", {4}, 32, 15, 3);
  const auto b = bench_forward(w, "b", {4}, 32, 15, 3);
  const double s = speedup(a[0], b[0]);
  EXPECT_GE(s, 0.9);
  EXPECT_LE(s, 1.1);
}

TEST(Bench, SlicedModelReportsPruneCounts) {
  auto c = bench_config(64);
  auto m = init_model<float>(c, {3, 1e-3, 48, 10}, {2, 4.0});
  Rng rng(7);
  fill_normal(m.mask->proxy, 1.0, rng);
  m.mask->step = 20;
  auto res = merge_and_slice(m);
  const auto rs = bench_forward(res.pruned, "pruned", {1}, 8, 5);
  EXPECT_EQ(rs[0].params, res.report.params_after);
  EXPECT_EQ(rs[0].d_kept, 48u);
  EXPECT_EQ(rs[0].d, 64u);
}
