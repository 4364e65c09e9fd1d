#pragma once

// Training throughput over a grid of heads and vocabulary sizes at fixed
// hidden width and batch size. Each cell trains an RNN on an iid Zipf
// corpus and reports the median words/sec over several timed windows.

#include <algorithm>
#include <chrono>
#include <ostream>
#include <vector>

#include "bnce/synthetic.hpp"
#include "bnce/trainer.hpp"

namespace bnce {

struct BenchOptions {
  std::vector<HeadType> heads{HeadType::softmax, HeadType::bnce};
  std::vector<Index> vocab_sizes{1000, 10000, 50000};
  Index hidden = 128;
  Index batch_size = 128;
  Index bptt_window = 5;
  Index shared_k = 0;
  Index warmup_steps = 20;
  Index window_steps = 20;  // optimizer steps per timed window
  Index windows = 5;
  Index corpus_tokens = 200000;
  std::uint64_t seed = 1;
};

struct BenchRow {
  HeadType head = HeadType::softmax;
  Index vocab_size = 0;
  Index hidden = 0;
  Index batch_size = 0;
  double wps = 0.0;
};

/// Median words/sec for one (head, V) cell.
inline double bench_cell(HeadType head, Index vocab, const BenchOptions& opt) {
  const auto corpus = zipf_corpus(static_cast<std::size_t>(vocab), static_cast<std::size_t>(opt.corpus_tokens),
                                  1.0, opt.seed);
  RunConfig cfg;
  cfg.out_dir.clear();
  cfg.model.architecture = Architecture::rnn;
  cfg.model.vocab_size = vocab;
  cfg.model.embed_dim = opt.hidden;
  cfg.model.recurrent_dim = opt.hidden;
  cfg.train.head = head;
  cfg.train.batch_size = opt.batch_size;
  cfg.train.bptt_window = opt.bptt_window;
  cfg.train.shared_k = head == HeadType::snce || head == HeadType::bnce_adaptive ? std::max<Index>(opt.shared_k, 1) : 0;
  cfg.train.seed = opt.seed;
  Trainer<float> trainer(cfg, zipf_distribution(static_cast<std::size_t>(vocab), 1.0), 0, corpus);
  BatchStream stream = trainer.make_train_stream();
  auto next = [&] {
    auto b = stream.next();
    if (!b) {
      stream.reset();
      b = stream.next();
    }
    return *b;
  };
  for (Index i = 0; i < opt.warmup_steps; ++i) trainer.train_step(next());
  std::vector<double> rates;
  using clock = std::chrono::steady_clock;
  for (Index w = 0; w < opt.windows; ++w) {
    std::vector<Batch> batches;
    for (Index i = 0; i < opt.window_steps; ++i) batches.push_back(next());
    Index words = 0;
    const auto t0 = clock::now();
    for (const auto& b : batches) words += trainer.train_step(b).targets;
    const double secs = std::chrono::duration<double>(clock::now() - t0).count();
    rates.push_back(static_cast<double>(words) / secs);
  }
  std::sort(rates.begin(), rates.end());
  return rates[rates.size() / 2];
}

inline std::vector<BenchRow> throughput_bench(const BenchOptions& opt, std::ostream* progress = nullptr) {
  if (opt.windows < 1 || opt.window_steps < 1) throw std::invalid_argument("bench: need at least one timed window");
  std::vector<BenchRow> rows;
  for (HeadType head : opt.heads) {
    for (Index v : opt.vocab_sizes) {
      BenchRow r{head, v, opt.hidden, opt.batch_size, bench_cell(head, v, opt)};
      if (progress) *progress << to_string(head) << " V=" << v << " wps=" << r.wps << std::endl;
      rows.push_back(r);
    }
  }
  return rows;
}

inline void write_bench_table(std::ostream& out, const std::vector<BenchRow>& rows) {
  out << "head\tV\tH\tB\twps\n";
  for (const auto& r : rows)
    out << to_string(r.head) << '\t' << r.vocab_size << '\t' << r.hidden << '\t' << r.batch_size << '\t'
        << static_cast<long long>(r.wps) << '\n';
}

inline const BenchRow* find_bench_row(const std::vector<BenchRow>& rows, HeadType head, Index vocab) {
  for (const auto& r : rows)
    if (r.head == head && r.vocab_size == vocab) return &r;
  return nullptr;
}

}  // namespace bnce
