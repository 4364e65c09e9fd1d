#include <gtest/gtest.h>

#include <sstream>

#include "bnce/eval.hpp"

using namespace bnce;

namespace {

std::vector<TokenId> random_ids(std::size_t n, Index vocab, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<TokenId> ids(n);
  for (auto& x : ids) x = static_cast<TokenId>(rng() % static_cast<std::uint64_t>(vocab));
  return ids;
}

ModelConfig ffnn(Index vocab) {
  ModelConfig c;
  c.architecture = Architecture::ffnn;
  c.vocab_size = vocab;
  c.embed_dim = 4;
  c.context_length = 2;
  c.hidden_dims = {5};
  c.init_range = 0.8;
  return c;
}

/// Position-by-position log-likelihood with a single-row batch each time.
std::pair<double, double> naive_ffnn_ppl(Model<double>& m, const std::vector<TokenId>& ids, TokenId eos, double z) {
  const Index n = m.config().context_length;
  const auto& w = m.params().output_weight;
  const auto& c = m.params().output_bias;
  double nll_n = 0, nll_f = 0;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    Batch b;
    b.mode = BatchMode::ngram;
    b.batch_size = 1;
    b.width = n;
    for (Index k = n; k >= 1; --k) {
      const auto pos = static_cast<std::ptrdiff_t>(i) - k;
      b.inputs.push_back(pos < 0 ? eos : ids[static_cast<std::size_t>(pos)]);
    }
    b.targets = {ids[i]};
    const Matrix<double> l = m.forward(b);
    double sum = 0;
    for (Index v = 0; v < w.rows(); ++v) sum += std::exp(l.row(0).dot(w.row(v)) + c(0, v));
    const double s = l.row(0).dot(w.row(ids[i])) + c(0, ids[i]);
    nll_f += std::log(sum) - s;
    nll_n += std::log(z) - s;
  }
  const auto cnt = static_cast<double>(ids.size());
  return {std::exp(nll_n / cnt), std::exp(nll_f / cnt)};
}

}  // namespace

TEST(Eval, UniformModelHasPerplexityV) {
  for (auto a : {Architecture::ffnn, Architecture::rnn, Architecture::lstm}) {
    auto cfg = ffnn(100);
    cfg.architecture = a;
    cfg.recurrent_dim = 6;
    cfg.zero_output_init = true;
    Model<double> m(cfg, 3);
    const auto ids = random_ids(1000, 100, 1);
    const auto r = evaluate(m, ids, 0, EvalOptions{});
    EXPECT_NEAR(r.ppl_f, 100.0, 1e-9) << to_string(a);
    EXPECT_NEAR(r.ppl_n, std::exp(9.0), 1e-6);
    EXPECT_NEAR(r.gap_mean, std::log(100.0) - 9.0, 1e-12);
    EXPECT_NEAR(r.gap_variance, 0.0, 1e-12);
  }
}

TEST(Eval, MatchesPositionByPositionOracle) {
  Model<double> m(ffnn(23), 5);
  const auto ids = random_ids(157, 23, 2);  // not a multiple of the batch size
  const double z = std::exp(2.0);
  EvalOptions opt;
  opt.z_constant = z;
  opt.batch_size = 16;
  const auto r = evaluate(m, ids, 1, opt);
  const auto [ppl_n, ppl_f] = naive_ffnn_ppl(m, ids, 1, z);
  EXPECT_EQ(r.tokens, 157);
  EXPECT_NEAR(r.ppl_f, ppl_f, 1e-9 * ppl_f);
  EXPECT_NEAR(r.ppl_n, ppl_n, 1e-9 * ppl_n);
}

TEST(Eval, SelfNormalizedModelHasEqualPerplexities) {
  // Output biases at ln Z - ln V with zero weights: the normalizer is Z.
  auto cfg = ffnn(50);
  cfg.zero_output_init = true;
  Model<double> m(cfg, 1);
  m.params().output_bias.setConstant(std::log(std::exp(9.0) / 50.0));
  const auto ids = random_ids(300, 50, 4);
  const auto r = evaluate(m, ids, 0, EvalOptions{});
  EXPECT_NEAR(r.ppl_n, r.ppl_f, 1e-9 * r.ppl_f);
  EXPECT_NEAR(r.gap_mean, 0.0, 1e-12);
}

TEST(Eval, CheapPassSkipsFullMetrics) {
  Model<double> m(ffnn(30), 2);
  const auto ids = random_ids(200, 30, 5);
  EvalOptions opt;
  opt.full = false;
  const auto cheap = evaluate(m, ids, 0, opt);
  const auto full = evaluate(m, ids, 0, EvalOptions{});
  EXPECT_EQ(cheap.ppl_f, 0.0);
  EXPECT_NEAR(cheap.ppl_n, full.ppl_n, 1e-9 * full.ppl_n);
  EXPECT_EQ(ppl_nce(m, ids, 0, std::exp(9.0)), cheap.ppl_n);
  EXPECT_EQ(ppl_full(m, ids, 0), full.ppl_f);
  const auto [mean, var] = normalizer_gap(m, ids, 0, std::exp(9.0));
  EXPECT_EQ(mean, full.gap_mean);
  EXPECT_EQ(var, full.gap_variance);
}

TEST(Eval, RecurrentShardsDropFirstToken) {
  auto cfg = ffnn(20);
  cfg.architecture = Architecture::rnn;
  cfg.recurrent_dim = 4;
  Model<double> m(cfg, 1);
  const auto ids = random_ids(1000, 20, 6);
  EvalOptions opt;
  opt.batch_size = 8;
  EXPECT_EQ(evaluate(m, ids, 0, opt).tokens, 8 * (1000 / 8 - 1));
}

TEST(Eval, DoesNotDisturbCallerState) {
  auto cfg = ffnn(20);
  cfg.architecture = Architecture::lstm;
  cfg.recurrent_dim = 4;
  Model<double> m(cfg, 1);
  const auto ids = random_ids(500, 20, 7);
  const double a = ppl_full(m, ids, 0);
  const double b = ppl_full(m, ids, 0);
  EXPECT_EQ(a, b);
  EXPECT_EQ(m.state().hidden.size(), 0);
}

TEST(Eval, CountsOovTargets) {
  Model<double> m(ffnn(10), 1);
  const std::vector<TokenId> ids{0, 3, 3, 5, 3, 1, 2, 3};
  EvalOptions opt;
  opt.unk_id = 3;
  const auto r = evaluate(m, ids, 0, opt);
  EXPECT_EQ(r.oov_tokens, 4);
  EXPECT_DOUBLE_EQ(r.oov_rate(), 0.5);
  std::ostringstream out;
  write_report(out, r);
  EXPECT_NE(out.str().find("oov_rate=0.5\n"), std::string::npos);
  EXPECT_NE(out.str().find("normalizer_gap_variance="), std::string::npos);
}

TEST(Eval, EmptyInputRejected) {
  Model<double> m(ffnn(10), 1);
  EXPECT_THROW(evaluate(m, std::vector<TokenId>{}, 0, EvalOptions{}), std::exception);
}

TEST(Eval, FloatModelAgreesWithDouble) {
  auto cfg = ffnn(40);
  Model<double> md(cfg, 9);
  Model<float> mf(cfg, 9);
  const auto ids = random_ids(400, 40, 8);
  const double d = ppl_full(md, ids, 0), f = ppl_full(mf, ids, 0);
  EXPECT_NEAR(f, d, 1e-4 * d);
}
