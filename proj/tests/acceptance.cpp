// Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
// criterion fails. `acceptance --only 1,2,7` runs a subset.

#include <CLI11.hpp>

#include <chrono>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "bnce/bnce.hpp"

using namespace bnce;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int precision = 4) {
  std::ostringstream s;
  s << std::setprecision(precision) << v;
  return s.str();
}

Matrix<double> uniform_matrix(Index r, Index c, Rng& rng, double a) {
  Matrix<double> m(r, c);
  fill_uniform(m, rng, -a, a);
  return m;
}

// ---------------------------------------------------------------------------
// 1. Matrix-path NCE heads against the per-example oracle

double max_abs_diff_to_reference(HeadType head, Index bsz, Index hidden, Index vocab, Index k, Rng& rng) {
  const Matrix<double> l = uniform_matrix(bsz, hidden, rng, 1.0);
  const Matrix<double> w = uniform_matrix(vocab, hidden, rng, 1.0);
  const Matrix<double> c = uniform_matrix(1, vocab, rng, 1.0);
  std::vector<double> weights(static_cast<std::size_t>(vocab));
  for (auto& x : weights) x = 0.1 + uniform01(rng);
  const UnigramNoise noise = UnigramNoise::from_weights(weights);
  NceConfig cfg;
  cfg.noise = &noise;
  cfg.shared_k = k;

  std::vector<TokenId> perm(static_cast<std::size_t>(vocab));
  std::iota(perm.begin(), perm.end(), TokenId{0});
  std::shuffle(perm.begin(), perm.end(), rng);
  const std::vector<TokenId> targets(perm.begin(), perm.begin() + bsz);  // distinct
  const auto shared = noise.sample(static_cast<std::size_t>(k), rng);

  std::vector<std::vector<TokenId>> lists(targets.size());
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (head != HeadType::snce)
      for (std::size_t j = 0; j < targets.size(); ++j)
        if (j != i) lists[i].push_back(targets[j]);
    lists[i].insert(lists[i].end(), shared.begin(), shared.end());
  }
  const auto step = head_step<double>(head, l, w, c, targets, shared, cfg);
  const auto ref = reference_nce(l, w.transpose(), c, targets, lists, cfg.z_constant, noise);

  Matrix<double> d_w = Matrix<double>::Zero(hidden, vocab), d_c = Matrix<double>::Zero(1, vocab);
  const auto& g = step.grads;
  for (std::size_t j = 0; j < g.columns.size(); ++j) {
    d_w.col(g.columns[j]) += g.delta_w.col(static_cast<Index>(j));
    d_c(0, g.columns[j]) += g.delta_c(0, static_cast<Index>(j));
  }
  double diff = std::abs(step.loss_sum - ref.loss);
  diff = std::max(diff, (d_w - ref.d_w).cwiseAbs().maxCoeff());
  diff = std::max(diff, (d_c - ref.d_c).cwiseAbs().maxCoeff());
  diff = std::max(diff, (g.error_hidden - ref.d_l).cwiseAbs().maxCoeff());
  return diff;
}

Outcome criterion_oracle() {
  Rng rng(derive_seed(1, 101));
  const Index bs[] = {2, 8, 32}, hs[] = {4, 16, 64}, vs[] = {10, 50, 200};
  struct Variant {
    HeadType head;
    std::vector<Index> ks;
  };
  const std::vector<Variant> variants{{HeadType::bnce, {0}}, {HeadType::bnce_adaptive, {1, 5}}, {HeadType::snce, {1, 10}}};
  std::ostringstream detail;
  bool pass = true;
  for (const auto& v : variants) {
    double worst = 0;
    int configs = 0;
    while (configs < 100) {
      const Index b = bs[rng() % 3], h = hs[rng() % 3], vocab = vs[rng() % 3];
      if (b > vocab) continue;  // distinct targets need B <= V
      const Index k = v.ks[rng() % v.ks.size()];
      worst = std::max(worst, max_abs_diff_to_reference(v.head, b, h, vocab, k, rng));
      ++configs;
    }
    pass = pass && worst < 1e-10;
    detail << to_string(v.head) << " max|diff|=" << fmt(worst, 3) << " (100 configs) ";
  }
  return {pass, detail.str() + "threshold 1e-10"};
}

// ---------------------------------------------------------------------------
// 2. Finite differences: through the score matrix, and end to end

double relative_error(double analytic, double numeric) {
  const double scale = std::max(std::abs(analytic), std::abs(numeric));
  return scale < 1e-10 ? 0.0 : std::abs(analytic - numeric) / scale;
}

double score_matrix_fd(Contrast contrast, Index bsz, Index extra, Rng& rng) {
  const Index cols = bsz + extra;
  const Index k_total = contrast == Contrast::batch ? cols - 1 : extra;
  const double z = std::exp(9.0);
  Matrix<double> s = uniform_matrix(bsz, cols, rng, 1.0).array() + 9.0;  // O of order one
  Matrix<double> n(1, cols);
  for (Index j = 0; j < cols; ++j) n(0, j) = 0.01 + 0.2 * uniform01(rng);
  auto loss = [&](const Matrix<double>& scores) {
    std::size_t sat = 0;
    const Matrix<double> o = nce_exponentiate(scores, z, sat);
    return bnce_loss(o, bnce_normalizer(o, n, k_total), n, k_total, contrast);
  };
  std::size_t sat = 0;
  const Matrix<double> o = nce_exponentiate(s, z, sat);
  const Matrix<double> g = bnce_gradient_matrix(o, bnce_normalizer(o, n, k_total), n, k_total, contrast);
  double worst = 0;
  const double h = 1e-5;
  for (Index i = 0; i < bsz; ++i) {
    for (Index j = 0; j < cols; ++j) {
      Matrix<double> up = s, down = s;
      up(i, j) += h;
      down(i, j) -= h;
      worst = std::max(worst, relative_error(g(i, j), (loss(up) - loss(down)) / (2 * h)));
    }
  }
  return worst;
}

struct Arch {
  std::string name;
  Architecture architecture;
  Index bottleneck;
};

double end_to_end_fd(const Arch& arch, HeadType head, Rng& rng) {
  const Index vocab = 13;
  RunConfig cfg;
  cfg.out_dir.clear();
  cfg.model.architecture = arch.architecture;
  cfg.model.vocab_size = vocab;
  cfg.model.embed_dim = 5;
  cfg.model.recurrent_dim = 6;
  cfg.model.context_length = 3;
  cfg.model.hidden_dims = arch.architecture == Architecture::ffnn ? std::vector<Index>{7, 6} : std::vector<Index>{};
  cfg.model.bottleneck_dim = arch.bottleneck;
  cfg.model.init_range = 0.5;
  cfg.train.head = head;
  cfg.train.batch_size = 4;
  cfg.train.bptt_window = 3;
  cfg.train.z_constant = 1.0;
  cfg.train.seed = rng();
  std::vector<TokenId> ids(200);
  for (auto& x : ids) x = static_cast<TokenId>(rng() % vocab);
  Trainer<double> t(cfg, UnigramNoise::from_weights(std::vector<double>(vocab, 1.0)), 0, ids);
  BatchStream stream = t.make_train_stream();
  const Batch batch = *stream.next();
  auto objective = [&] {
    StepReport r;
    t.compute_gradients(batch, r);
    return r.loss * static_cast<double>(batch.steps());
  };
  StepReport report;
  Gradients<double> g = t.compute_gradients(batch, report);
  auto& p = t.model().params();
  const Index hdim = cfg.model.output_dim();

  Matrix<double> d_out = Matrix<double>::Zero(vocab, hdim + 1);
  if (g.output.dense) {
    d_out << g.output.weight, g.output.bias.transpose();
  } else {
    for (std::size_t k = 0; k < g.output.ids.size(); ++k) {
      d_out.row(g.output.ids[k]).leftCols(hdim) += g.output.weight.row(static_cast<Index>(k));
      d_out(g.output.ids[k], hdim) += g.output.bias(0, static_cast<Index>(k));
    }
  }
  Matrix<double> d_emb = Matrix<double>::Zero(vocab, cfg.model.embed_dim);
  for (std::size_t k = 0; k < g.body.embedding.ids.size(); ++k)
    d_emb.row(g.body.embedding.ids[k]) += g.body.embedding.rows.row(static_cast<Index>(k));

  // Norm-wise relative error per parameter block; entrywise ratios on
  // near-zero gradients only measure the roundoff of the difference quotient.
  double worst = 0;
  const double h = 1e-5;
  auto probe = [&](Matrix<double>& m, const std::function<double(Index)>& analytic) {
    double diff2 = 0, a2 = 0, n2 = 0;
    for (Index k = 0; k < m.size(); ++k) {
      const double orig = m.data()[k];
      m.data()[k] = orig + h;
      const double up = objective();
      m.data()[k] = orig - h;
      const double down = objective();
      m.data()[k] = orig;
      const double a = analytic(k), n = (up - down) / (2 * h);
      diff2 += (a - n) * (a - n);
      a2 += a * a;
      n2 += n * n;
    }
    const double scale = std::max(std::sqrt(a2), std::sqrt(n2));
    if (scale > 1e-12) worst = std::max(worst, std::sqrt(diff2) / scale);
  };
  probe(p.embedding, [&](Index k) { return d_emb.data()[k]; });
  probe(p.output_weight, [&](Index k) { return d_out(k / hdim, k % hdim); });
  probe(p.output_bias, [&](Index k) { return d_out(k, hdim); });
  for (std::size_t i = 0; i < p.dense.size(); ++i) {
    probe(p.dense[i].weight, [&](Index k) { return g.body.dense[i].weight.data()[k]; });
    probe(p.dense[i].bias, [&](Index k) { return g.body.dense[i].bias.data()[k]; });
  }
  if (cfg.model.recurrent()) {
    probe(p.recurrent.w_in, [&](Index k) { return g.body.recurrent.w_in.data()[k]; });
    probe(p.recurrent.w_rec, [&](Index k) { return g.body.recurrent.w_rec.data()[k]; });
    probe(p.recurrent.bias, [&](Index k) { return g.body.recurrent.bias.data()[k]; });
  }
  return worst;
}

Outcome criterion_gradients() {
  Rng rng(derive_seed(1, 102));
  double score_worst = 0;
  for (int rep = 0; rep < 20; ++rep) {
    score_worst = std::max(score_worst, score_matrix_fd(Contrast::batch, 2 + rng() % 7, 0, rng));
    score_worst = std::max(score_worst, score_matrix_fd(Contrast::batch, 2 + rng() % 7, 1 + rng() % 4, rng));
    score_worst = std::max(score_worst, score_matrix_fd(Contrast::shared_only, 2 + rng() % 7, 1 + rng() % 4, rng));
  }
  const std::vector<Arch> archs{{"FFNN", Architecture::ffnn, 0},
                                {"RNN", Architecture::rnn, 0},
                                {"ReLu-RNN", Architecture::rnn, 4},
                                {"LSTM", Architecture::lstm, 0},
                                {"ReLu-LSTM", Architecture::lstm, 4}};
  double model_worst = 0;
  std::string worst_name;
  for (const auto& a : archs) {
    for (auto head : {HeadType::softmax, HeadType::bnce}) {
      const double e = end_to_end_fd(a, head, rng);
      if (e >= model_worst) {
        model_worst = e;
        worst_name = a.name + "/" + to_string(head);
      }
    }
  }
  const bool pass = score_worst < 1e-6 && model_worst < 1e-4;
  return {pass, "score-matrix max rel err=" + fmt(score_worst, 3) + " (< 1e-6), end-to-end max rel err=" +
                    fmt(model_worst, 3) + " at " + worst_name + " (< 1e-4)"};
}

// ---------------------------------------------------------------------------
// 3. Noise participation equals (B - 1) x count(w)

Outcome criterion_noise_frequency() {
  const Index bsz = 10, tokens = 10000;
  const Index vocab = 300;
  const auto ids = zipf_corpus(static_cast<std::size_t>(vocab), static_cast<std::size_t>(tokens), 1.0, 3);
  std::vector<std::uint64_t> counts(static_cast<std::size_t>(vocab), 0);
  for (auto id : ids) ++counts[static_cast<std::size_t>(id)];
  RunConfig cfg;
  cfg.out_dir.clear();
  cfg.model.architecture = Architecture::ffnn;
  cfg.model.vocab_size = vocab;
  cfg.model.embed_dim = 8;
  cfg.model.context_length = 2;
  cfg.model.hidden_dims = {8};
  cfg.train.head = HeadType::bnce;
  cfg.train.batch_size = bsz;
  std::vector<std::uint64_t> smoothed = counts;
  for (auto& c : smoothed) c += 1;
  Trainer<double> t(cfg, UnigramNoise(smoothed), 0, ids);
  std::vector<std::uint64_t> participation;
  t.set_noise_counter(&participation);
  BatchStream stream = t.make_train_stream();
  while (auto b = stream.next()) t.train_step(*b);
  Index mismatches = 0;
  for (std::size_t w = 0; w < counts.size(); ++w)
    if (participation[w] != static_cast<std::uint64_t>(bsz - 1) * counts[w]) ++mismatches;
  return {mismatches == 0 && stream.dropped_tokens() == 0,
          std::to_string(tokens) + " tokens, B=" + std::to_string(bsz) + ", " + std::to_string(mismatches) +
              " of " + std::to_string(vocab) + " ids differ from (B-1)*count"};
}

// ---------------------------------------------------------------------------
// 4 and 5. Desk-scale softmax vs B-NCE on a synthetic Markov corpus

struct DeskRun {
  std::vector<EpochRecord> history;
  double seconds = 0;
  double wps = 0;
};

struct DeskResults {
  DeskRun softmax, bnce;
  Index vocab = 0;
  Index train_tokens = 0;
};

const DeskResults& desk_results(std::ostream& log) {
  static std::optional<DeskResults> cached;
  if (cached) return *cached;
  MarkovTextOptions mo;
  mo.word_types = 10200;  // capped to 10,000 entries with <unk>
  mo.tokens = 1100000;
  mo.seed = 11;
  std::stringstream text;
  write_markov_text(text, mo);
  const auto tokens = read_tokens(text);
  const auto split = tokens.size() * 10 / 11;
  const std::span<const std::string> all(tokens);
  const Vocabulary vocab = build_vocab(all.first(split), 10000);
  const auto train = vocab.encode(all.first(split));
  const auto valid = vocab.encode(all.subspan(split));

  DeskResults r;
  r.vocab = static_cast<Index>(vocab.size());
  r.train_tokens = static_cast<Index>(train.size());
  for (auto head : {HeadType::softmax, HeadType::bnce}) {
    RunConfig cfg;
    cfg.out_dir.clear();
    cfg.model.architecture = Architecture::rnn;
    cfg.model.vocab_size = r.vocab;
    cfg.model.embed_dim = 128;
    cfg.model.recurrent_dim = 128;
    cfg.model.bottleneck_dim = 64;
    cfg.model.init_range = 0.5;
    cfg.model.zero_output_init = true;
    cfg.train.unigram_bias_init = true;
    cfg.train.head = head;
    cfg.train.batch_size = 128;
    cfg.train.bptt_window = 20;
    cfg.train.max_epochs = 10;
    cfg.train.initial_lr = 0.4;
    cfg.train.patience_epochs = 1;
    cfg.train.log_interval = 1000000;
    cfg.train.seed = 5;
    log << "  [desk] training " << to_string(head) << " V=" << r.vocab << " tokens=" << train.size() << std::endl;
    Trainer<float> t(cfg, unigram_distribution(vocab), vocab.eos_id(), train, valid, &log);
    const auto t0 = std::chrono::steady_clock::now();
    t.run();
    DeskRun& out = head == HeadType::softmax ? r.softmax : r.bnce;
    out.history = t.history();
    out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.wps = t.words_per_second();
  }
  cached = std::move(r);
  return *cached;
}

Outcome criterion_ppl_parity(std::ostream& log) {
  const auto& r = desk_results(log);
  const double soft = r.softmax.history.back().validation->ppl_f;
  const double bnce = r.bnce.history.back().validation->ppl_f;
  const double ratio = bnce / soft;
  return {ratio <= 1.10, "V=" + std::to_string(r.vocab) + ", " + std::to_string(r.softmax.history.size()) +
                             " epochs each: PPL^f softmax=" + fmt(soft) + " bnce=" + fmt(bnce) +
                             " ratio=" + fmt(ratio) + " (<= 1.10); train time softmax=" + fmt(r.softmax.seconds, 3) +
                             "s bnce=" + fmt(r.bnce.seconds, 3) + "s"};
}

Outcome criterion_self_normalization(std::ostream& log) {
  const auto& r = desk_results(log);
  const auto& first = *r.bnce.history.front().validation;
  const auto& last = *r.bnce.history.back().validation;
  const double gap = std::abs(std::log(last.ppl_n) - std::log(last.ppl_f));
  const double bound = 0.15 * std::log(last.ppl_f);
  const bool pass = gap <= bound && last.gap_variance < first.gap_variance;
  return {pass, "bnce final PPL^n=" + fmt(last.ppl_n) + " PPL^f=" + fmt(last.ppl_f) + " |ln diff|=" + fmt(gap, 3) +
                    " (<= " + fmt(bound, 3) + "); gap variance epoch 1=" + fmt(first.gap_variance, 3) +
                    " final=" + fmt(last.gap_variance, 3)};
}

// ---------------------------------------------------------------------------
// 6. Throughput scaling

Outcome criterion_throughput(std::ostream& log) {
  BenchOptions opt;
  opt.hidden = 128;
  opt.batch_size = 128;
  const auto rows = throughput_bench(opt, &log);
  std::ostringstream table;
  write_bench_table(table, rows);
  log << table.str();
  auto wps = [&](HeadType h, Index v) { return find_bench_row(rows, h, v)->wps; };
  const double soft_drop = wps(HeadType::softmax, 1000) / wps(HeadType::softmax, 50000);
  const double bnce_loss = 1.0 - wps(HeadType::bnce, 50000) / wps(HeadType::bnce, 1000);
  const double speed10 = wps(HeadType::bnce, 10000) / wps(HeadType::softmax, 10000);
  const double speed50 = wps(HeadType::bnce, 50000) / wps(HeadType::softmax, 50000);
  const bool pass = rows.size() == 6 && soft_drop >= 3 && bnce_loss < 0.30 && speed10 >= 2 && speed50 >= 4;
  return {pass, "softmax 1K/50K=" + fmt(soft_drop, 3) + "x (>= 3), bnce 50K/1K=" + fmt(1.0 - bnce_loss, 3) +
                    " (drop < 30%), bnce/softmax at 10K=" + fmt(speed10, 3) + "x (>= 2) at 50K=" + fmt(speed50, 3) +
                    "x (>= 4)"};
}

// ---------------------------------------------------------------------------
// 7. Reduction identities

Outcome criterion_identities() {
  Rng rng(derive_seed(1, 107));
  // Adaptive B-NCE with no extra samples against plain B-NCE, head level.
  bool head_identical = true;
  for (int rep = 0; rep < 50; ++rep) {
    const Index b = 2 + static_cast<Index>(rng() % 31), h = 4 + static_cast<Index>(rng() % 60), v = 200;
    const Matrix<double> l = uniform_matrix(b, h, rng, 1.0), w = uniform_matrix(v, h, rng, 1.0),
                         c = uniform_matrix(1, v, rng, 1.0);
    std::vector<TokenId> targets(static_cast<std::size_t>(b));
    for (auto& x : targets) x = static_cast<TokenId>(rng() % v);
    const UnigramNoise noise = zipf_distribution(static_cast<std::size_t>(v), 1.0);
    NceConfig cfg;
    cfg.noise = &noise;
    const auto a = adaptive_bnce(l, w, c, targets, std::span<const TokenId>{}, cfg);
    const auto p = bnce_head(l, w, c, targets, cfg);
    head_identical = head_identical && a.loss == p.loss && a.grads.delta_w == p.grads.delta_w &&
                     a.grads.delta_c == p.grads.delta_c && a.grads.error_hidden == p.grads.error_hidden;
  }

  // Whole training runs: adaptive(K=0) vs plain, and plain vs itself.
  const Index vocab = 500;
  const auto ids = zipf_corpus(static_cast<std::size_t>(vocab), 20000, 1.0, 9);
  auto run = [&](HeadType head) {
    RunConfig cfg;
    cfg.out_dir.clear();
    cfg.model.architecture = Architecture::lstm;
    cfg.model.vocab_size = vocab;
    cfg.model.embed_dim = 16;
    cfg.model.recurrent_dim = 16;
    cfg.model.bottleneck_dim = 8;
    cfg.train.head = head;
    cfg.train.batch_size = 16;
    cfg.train.bptt_window = 10;
    cfg.train.max_epochs = 2;
    Trainer<float> t(cfg, zipf_distribution(static_cast<std::size_t>(vocab), 1.0), 0, ids);
    t.run();
    std::vector<Matrix<float>> params;
    t.model().params().visit([&](const std::string&, Matrix<float>& m) { params.push_back(m); });
    return params;
  };
  const auto plain = run(HeadType::bnce);
  const bool rerun_identical = plain == run(HeadType::bnce);
  const bool adaptive_identical = plain == run(HeadType::bnce_adaptive);

  // Uniform model: PPL^f must be V.
  ModelConfig mc;
  mc.architecture = Architecture::rnn;
  mc.vocab_size = vocab;
  mc.embed_dim = 8;
  mc.recurrent_dim = 8;
  mc.zero_output_init = true;
  const double ppl = ppl_full(Model<double>(mc, 1), ids, 0);
  const bool uniform = std::abs(ppl - static_cast<double>(vocab)) <= 1e-9 * static_cast<double>(vocab);

  const bool pass = head_identical && rerun_identical && adaptive_identical && uniform;
  auto yn = [](bool b) { return b ? std::string("yes") : std::string("no"); };
  std::ostringstream ppl_text;
  ppl_text << std::setprecision(17) << ppl;
  return {pass, "adaptive K=0 == bnce (head): " + yn(head_identical) + ", (2-epoch run): " + yn(adaptive_identical) +
                    "; rerun bit-identical: " + yn(rerun_identical) + "; uniform PPL^f=" + ppl_text.str() +
                    " for V=" + std::to_string(vocab)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::vector<int> only;
  std::string report;
  app.add_option("--only", only, "Criteria to run (default: all)")->delimiter(',');
  app.add_option("--report", report, "Also write the PASS/FAIL lines here");
  CLI11_PARSE(app, argc, argv);
  const std::set<int> selected = only.empty() ? std::set<int>{1, 2, 3, 4, 5, 6, 7} : std::set<int>(only.begin(), only.end());

  const std::map<int, std::pair<std::string, std::function<Outcome()>>> criteria{
      {1, {"oracle equivalence", criterion_oracle}},
      {2, {"gradient checks", criterion_gradients}},
      {3, {"noise frequency", criterion_noise_frequency}},
      {4, {"desk-scale PPL parity", [] { return criterion_ppl_parity(std::cerr); }}},
      {5, {"self-normalization", [] { return criterion_self_normalization(std::cerr); }}},
      {6, {"throughput scaling", [] { return criterion_throughput(std::cerr); }}},
      {7, {"reduction identities", criterion_identities}},
  };
  std::ofstream report_file;
  if (!report.empty()) report_file.open(report);
  int failures = 0;
  for (const auto& [id, entry] : criteria) {
    if (!selected.count(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = entry.second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!o.pass) ++failures;
    std::ostringstream line;
    line << "criterion " << id << " " << (o.pass ? "PASS" : "FAIL") << " " << entry.first << ": " << o.detail << " ["
         << fmt(secs, 3) << "s]";
    std::cout << line.str() << std::endl;
    if (report_file) report_file << line.str() << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
