#pragma once

// Perplexity under full softmax normalization (PPL^f) and under the fixed
// NCE constant (PPL^n), plus the self-normalization diagnostic
// ln(sum_v exp score(v|c)) - ln Z.
//
// PPL^n uses exp(score)/Z as the word probability without renormalizing, so
// it is not a true perplexity; per-context "probabilities" may sum to
// anything.

#include <algorithm>
#include <cmath>
#include <optional>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>

#include "bnce/corpus.hpp"
#include "bnce/model.hpp"
#include "bnce/tensor.hpp"

namespace bnce {

struct EvalReport {
  double ppl_n = 0.0;
  double ppl_f = 0.0;  // 0 when only the cheap pass ran
  Index tokens = 0;
  Index oov_tokens = 0;
  double gap_mean = 0.0;      // mean of ln normalizer - ln Z
  double gap_variance = 0.0;  // population variance of the same
  bool full = false;

  double oov_rate() const { return tokens ? static_cast<double>(oov_tokens) / static_cast<double>(tokens) : 0.0; }
};

struct EvalOptions {
  double z_constant = std::exp(9.0);
  Index batch_size = 32;
  bool full = true;  // false: PPL^n only, no V-wide pass
  std::optional<TokenId> unk_id;
};

inline void write_report(std::ostream& out, const EvalReport& r) {
  out.precision(10);
  out << "tokens=" << r.tokens << '\n';
  out << "oov_tokens=" << r.oov_tokens << '\n';
  out << "oov_rate=" << r.oov_rate() << '\n';
  out << "ppl_n=" << r.ppl_n << '\n';
  if (r.full) {
    out << "ppl_f=" << r.ppl_f << '\n';
    out << "normalizer_gap_mean=" << r.gap_mean << '\n';
    out << "normalizer_gap_variance=" << r.gap_variance << '\n';
  }
}

/// Batch stream used for evaluation: every position (no shuffling, no
/// dropped tail) for n-gram models; B parallel shards for recurrent ones.
inline BatchStream eval_stream(const ModelConfig& cfg, std::span<const TokenId> ids, TokenId eos, Index batch_size) {
  BatchStreamOptions opt;
  opt.mode = cfg.batch_mode();
  if (cfg.recurrent()) {
    opt.batch_size = std::max<Index>(1, std::min<Index>(batch_size, static_cast<Index>(ids.size()) / 2));
    opt.width = 32;
  } else {
    opt.batch_size = batch_size;
    opt.width = cfg.context_length;
    opt.drop_remainder = false;
  }
  return BatchStream(ids, eos, opt);
}

/// Runs the model over ids with fresh recurrent state. Takes the model by
/// value so live training parameters are never touched.
template <typename T>
EvalReport evaluate(Model<T> model, std::span<const TokenId> ids, TokenId eos, const EvalOptions& opt) {
  if (!(opt.z_constant > 0.0)) throw std::invalid_argument("evaluate: Z must be positive");
  model.reset_state();
  BatchStream stream = eval_stream(model.config(), ids, eos, opt.batch_size);
  const auto& w = model.params().output_weight;
  const auto& c = model.params().output_bias;
  const long double log_z = std::log(static_cast<long double>(opt.z_constant));

  EvalReport r;
  r.full = opt.full;
  long double nll_n = 0, nll_f = 0, gap_sum = 0, gap_sq = 0;
  Matrix<T> scores;
  while (auto batch = stream.next()) {
    const Matrix<T>& l = model.forward(*batch);
    const Index bsz = batch->batch_size;
    for (Index t = 0; t < batch->steps(); ++t) {
      auto targets = batch->step_targets(t);
      const Matrix<T> l_t = l.middleRows(t * bsz, bsz);
      if (opt.full) {
        scores.noalias() = l_t * w.transpose();
        scores.rowwise() += c.row(0);
        check_finite(scores, "evaluate: scores");
      }
      for (Index i = 0; i < bsz; ++i) {
        const TokenId y = targets[static_cast<std::size_t>(i)];
        if (opt.unk_id && y == *opt.unk_id) ++r.oov_tokens;
        const long double s_target =
            opt.full ? static_cast<long double>(scores(i, y))
                     : static_cast<long double>(l_t.row(i).dot(w.row(y))) + static_cast<long double>(c(0, y));
        nll_n += log_z - s_target;
        if (opt.full) {
          auto row = scores.row(i);
          const T mx = row.maxCoeff();
          const double sum = (row.array() - mx).exp().template cast<double>().sum();
          const long double lse = static_cast<long double>(mx) + std::log(static_cast<long double>(sum));
          nll_f += lse - s_target;
          const long double gap = lse - log_z;
          gap_sum += gap;
          gap_sq += gap * gap;
        }
        ++r.tokens;
      }
    }
  }
  if (r.tokens == 0) throw std::invalid_argument("evaluate: no evaluation targets");
  const auto n = static_cast<long double>(r.tokens);
  r.ppl_n = static_cast<double>(std::exp(nll_n / n));
  if (opt.full) {
    r.ppl_f = static_cast<double>(std::exp(nll_f / n));
    const long double mean = gap_sum / n;
    r.gap_mean = static_cast<double>(mean);
    r.gap_variance = static_cast<double>(std::max<long double>(0, gap_sq / n - mean * mean));
  }
  if (!std::isfinite(r.ppl_n) || (opt.full && !std::isfinite(r.ppl_f)))
    throw NumericError("evaluate: non-finite perplexity");
  return r;
}

template <typename T>
double ppl_full(const Model<T>& model, std::span<const TokenId> ids, TokenId eos, Index batch_size = 32) {
  EvalOptions o;
  o.batch_size = batch_size;
  return evaluate(model, ids, eos, o).ppl_f;
}

template <typename T>
double ppl_nce(const Model<T>& model, std::span<const TokenId> ids, TokenId eos, double z, Index batch_size = 32) {
  EvalOptions o;
  o.z_constant = z;
  o.batch_size = batch_size;
  o.full = false;
  return evaluate(model, ids, eos, o).ppl_n;
}

/// (mean, variance) of ln normalizer - ln z over evaluation contexts.
template <typename T>
std::pair<double, double> normalizer_gap(const Model<T>& model, std::span<const TokenId> ids, TokenId eos, double z,
                                         Index batch_size = 32) {
  EvalOptions o;
  o.z_constant = z;
  o.batch_size = batch_size;
  const auto r = evaluate(model, ids, eos, o);
  return {r.gap_mean, r.gap_variance};
}

}  // namespace bnce
