#pragma once

// Output-layer strategies: full softmax, shared-noise NCE (S-NCE), batch NCE
// (B-NCE) and adaptive B-NCE, plus a per-example NCE evaluator used as an
// independent oracle.
//
// Output parameters are word-major: W is V x H (row w is word w's output
// vector) and C is 1 x V. Sampled heads only ever touch the rows of the
// words involved in the current batch.
//
// Batch NCE at one time step, for B targets and K extra shared samples
// (K = 0 for plain B-NCE), with C = B + K gathered columns:
//
//   O = exp(L * W_g^T (+) C_g) / Z                       (B x C)
//   Y = O (+) k * N,   k = B + K - 1                     (B x C)
//   G(i,j) = O(i,j) / Y(i,j)              j != i
//   G(i,i) = -k * N(i) / Y(i,i)
//   dW_g = L^T G,  dC_g = sum over rows of G,  E(L) = G * W_g
//
// G is the derivative of the NCE objective J with respect to the
// pre-exponential scores, so parameters move as theta -= lr * delta.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "bnce/corpus.hpp"
#include "bnce/rng.hpp"
#include "bnce/tensor.hpp"

namespace bnce {

enum class HeadType { softmax, snce, bnce, bnce_adaptive };

inline std::string to_string(HeadType h) {
  switch (h) {
    case HeadType::softmax: return "softmax";
    case HeadType::snce: return "snce";
    case HeadType::bnce: return "bnce";
    case HeadType::bnce_adaptive: return "bnce_adaptive";
  }
  return "?";
}

inline HeadType parse_head_type(std::string_view s) {
  if (s == "softmax") return HeadType::softmax;
  if (s == "snce") return HeadType::snce;
  if (s == "bnce") return HeadType::bnce;
  if (s == "bnce_adaptive") return HeadType::bnce_adaptive;
  throw std::invalid_argument("unknown head type '" + std::string(s) + "'");
}

template <typename T>
struct HeadGradients {
  Matrix<T> delta_w;        // H x C
  Matrix<T> delta_c;        // 1 x C
  Matrix<T> error_hidden;   // B x H, E(L)
  ColumnIndexList columns;  // word id of each column; empty means all V words in order
};

struct NceConfig {
  double z_constant = std::exp(9.0);
  Index shared_k = 0;
  const UnigramNoise* noise = nullptr;
};

/// Scores above this are clamped before exp() in single precision.
inline constexpr double kScoreClamp = 60.0;

// ---------------------------------------------------------------------------
// Full softmax

template <typename T>
struct SoftmaxCache {
  Matrix<T> hidden;      // B x H
  Matrix<T> probs;       // B x V
  std::vector<TokenId> targets;
  bool consumed = false;
};

/// Mean negative log-likelihood of the targets under a full softmax.
template <typename T>
std::pair<double, SoftmaxCache<T>> softmax_forward_loss(const Matrix<T>& l, const Matrix<T>& w,
                                                        const Matrix<T>& c, std::span<const TokenId> targets) {
  if (w.cols() != l.cols() || c.rows() != 1 || c.cols() != w.rows() ||
      static_cast<Index>(targets.size()) != l.rows())
    throw ShapeError("softmax_forward_loss: hidden " + shape_of(l) + ", weight " + shape_of(w) + ", " +
                     std::to_string(targets.size()) + " targets");
  check_indices(targets, w.rows(), "softmax_forward_loss");
  SoftmaxCache<T> cache;
  cache.hidden = l;
  cache.targets.assign(targets.begin(), targets.end());
  cache.probs.resize(l.rows(), w.rows());
  cache.probs.noalias() = l * w.transpose();
  cache.probs.rowwise() += c.row(0);
  check_finite(cache.probs, "softmax_forward_loss: scores");
  double loss = 0.0;
  for (Index i = 0; i < l.rows(); ++i) {
    auto row = cache.probs.row(i);
    const T mx = row.maxCoeff();
    const T target_score = row(targets[i]);
    row = (row.array() - mx).exp();
    const double sum = row.template cast<double>().sum();
    row /= static_cast<T>(sum);
    loss += std::log(sum) - static_cast<double>(target_score - mx);
  }
  return {loss / static_cast<double>(l.rows()), std::move(cache)};
}

/// (softmax - onehot) / B propagated to the full output layer and hidden.
template <typename T>
HeadGradients<T> softmax_backward(SoftmaxCache<T>& cache, const Matrix<T>& w) {
  if (cache.consumed) throw std::logic_error("softmax_backward: stale cache");
  if (cache.probs.cols() != w.rows() || cache.hidden.cols() != w.cols())
    throw std::logic_error("softmax_backward: cache does not match the output layer");
  cache.consumed = true;
  const Index bsz = cache.probs.rows();
  Matrix<T>& d = cache.probs;  // reuse in place: becomes d loss / d score
  for (Index i = 0; i < bsz; ++i) d(i, cache.targets[i]) -= T(1);
  d /= static_cast<T>(bsz);
  HeadGradients<T> g;
  g.delta_w.noalias() = cache.hidden.transpose() * d;
  g.delta_c = d.colwise().sum();
  g.error_hidden.noalias() = d * w;
  return g;
}

// ---------------------------------------------------------------------------
// Batch NCE building blocks

/// Which (row, column) pairs count as noise contrasts.
///  batch:       every column but the row's own target (B-NCE, adaptive B-NCE)
///  shared_only: only the extra shared columns j >= B (S-NCE)
enum class Contrast { batch, shared_only };

inline bool is_noise_entry(Contrast contrast, Index i, Index j, Index batch) {
  if (j == i) return false;
  return contrast == Contrast::batch || j >= batch;
}

template <typename T>
struct NceForward {
  Matrix<T> output;       // O, B x C
  Matrix<T> gathered_w;   // W_g, C x H (rows of the word-major table)
  Matrix<T> noise_probs;  // N, 1 x C
  ColumnIndexList columns;
  std::vector<double> log_target_output;  // ln O(i,i) = s(i,i) - ln Z, exact even when O(i,i) underflows
  std::size_t saturated = 0;
};

/// exp(scores) / Z, with the single-precision clamp.
template <typename T>
Matrix<T> nce_exponentiate(const Matrix<T>& scores, double z, std::size_t& saturated) {
  Matrix<T> o = allocate<T>(scores.rows(), scores.cols());
  const T inv_z = static_cast<T>(1.0 / z);
  for (Index k = 0; k < scores.size(); ++k) {
    T s = scores.data()[k];
    if constexpr (std::is_same_v<T, float>) {
      if (s > static_cast<T>(kScoreClamp)) {
        s = static_cast<T>(kScoreClamp);
        ++saturated;
      }
    }
    o.data()[k] = std::exp(s) * inv_z;
  }
  if (!o.allFinite()) throw NumericError("nce output: score overflow in exp");
  return o;
}

/// Gathers the listed columns and evaluates O for the batch.
template <typename T>
NceForward<T> nce_forward(const Matrix<T>& l, const Matrix<T>& w, const Matrix<T>& c, ColumnIndexList columns,
                          double z, const UnigramNoise& noise) {
  if (!(z > 0.0)) throw std::invalid_argument("nce_forward: Z must be positive");
  if (w.cols() != l.cols()) throw ShapeError("nce_forward: hidden " + shape_of(l) + " vs weight " + shape_of(w));
  if (static_cast<Index>(noise.size()) != w.rows())
    throw ShapeError("nce_forward: noise distribution size " + std::to_string(noise.size()) + " != V");
  NceForward<T> f;
  auto [wg, cg] = gather_rows(w, c, columns);
  Matrix<T> scores = allocate<T>(l.rows(), wg.rows());
  scores.noalias() = l * wg.transpose();
  row_broadcast_add_inplace(scores, cg);
  check_finite(scores, "nce_forward: scores");
  const Index diag = std::min(scores.rows(), scores.cols());
  f.log_target_output.resize(static_cast<std::size_t>(diag));
  for (Index i = 0; i < diag; ++i) {
    double s = static_cast<double>(scores(i, i));
    if constexpr (std::is_same_v<T, float>) s = std::min(s, kScoreClamp);
    f.log_target_output[static_cast<std::size_t>(i)] = s - std::log(z);
  }
  f.output = nce_exponentiate(scores, z, f.saturated);
  f.gathered_w = std::move(wg);
  f.noise_probs = allocate<T>(1, static_cast<Index>(columns.size()));
  for (std::size_t j = 0; j < columns.size(); ++j)
    f.noise_probs(0, static_cast<Index>(j)) = static_cast<T>(noise.probability(columns[j]));
  f.columns = std::move(columns);
  return f;
}

/// Plain B-NCE forward: the columns are exactly the batch targets.
template <typename T>
NceForward<T> bnce_forward(const Matrix<T>& l, const Matrix<T>& w, const Matrix<T>& c,
                           std::span<const TokenId> targets, const NceConfig& cfg) {
  if (cfg.shared_k != 0) throw std::invalid_argument("bnce_forward: shared_k must be 0 (use adaptive_bnce)");
  if (cfg.noise == nullptr) throw std::invalid_argument("bnce_forward: no noise distribution");
  if (static_cast<Index>(targets.size()) != l.rows())
    throw ShapeError("bnce_forward: " + std::to_string(targets.size()) + " targets for " + shape_of(l));
  return nce_forward(l, w, c, ColumnIndexList(targets.begin(), targets.end()), cfg.z_constant, *cfg.noise);
}

/// Y = O (+) k_total * N
template <typename T>
Matrix<T> bnce_normalizer(const Matrix<T>& o, const Matrix<T>& n_probs, Index k_total) {
  if (n_probs.rows() != 1 || n_probs.cols() != o.cols())
    throw ShapeError("bnce_normalizer: O " + shape_of(o) + " with N " + shape_of(n_probs));
  Matrix<T> y = allocate<T>(o.rows(), o.cols());
  y.noalias() = o.rowwise() + (static_cast<T>(k_total) * n_probs).row(0);
  return y;
}

/// d J / d score. Off-diagonal noise entries O/Y, diagonal -k N / Y,
/// non-contrasted entries zero.
template <typename T>
Matrix<T> bnce_gradient_matrix(const Matrix<T>& o, const Matrix<T>& y, const Matrix<T>& n_probs, Index k_total,
                               Contrast contrast = Contrast::batch) {
  if (y.rows() != o.rows() || y.cols() != o.cols() || n_probs.cols() != o.cols() || o.cols() < o.rows())
    throw ShapeError("bnce_gradient_matrix: O " + shape_of(o) + ", Y " + shape_of(y) + ", N " + shape_of(n_probs));
  const Index bsz = o.rows();
  Matrix<T> g = allocate<T>(bsz, o.cols());
  for (Index i = 0; i < bsz; ++i) {
    for (Index j = 0; j < o.cols(); ++j) {
      const T yij = y(i, j);
      if (j == i) {
        if (!(yij > T(0))) throw NumericError("bnce_gradient_matrix: zero normalizer entry");
        g(i, j) = -static_cast<T>(k_total) * n_probs(0, i) / yij;
      } else if (is_noise_entry(contrast, i, j, bsz)) {
        if (!(yij > T(0))) throw NumericError("bnce_gradient_matrix: zero normalizer entry");
        g(i, j) = o(i, j) / yij;
      }
    }
  }
  return g;
}

/// dW_g = L^T G (H x C), dC_g = column sums of G, E(L) = G W_g.
/// w_gathered is the C x H block of the word-major table.
template <typename T>
HeadGradients<T> bnce_backward(const Matrix<T>& g, const Matrix<T>& l, const Matrix<T>& w_gathered) {
  if (g.rows() != l.rows() || g.cols() != w_gathered.rows() || l.cols() != w_gathered.cols())
    throw ShapeError("bnce_backward: G " + shape_of(g) + ", L " + shape_of(l) + ", W_g " + shape_of(w_gathered));
  HeadGradients<T> out;
  out.delta_w = allocate<T>(l.cols(), g.cols());
  out.delta_w.noalias() = l.transpose() * g;
  out.delta_c = allocate<T>(1, g.cols());
  out.delta_c.noalias() = g.colwise().sum();
  out.error_hidden = allocate<T>(g.rows(), w_gathered.cols());
  out.error_hidden.noalias() = g * w_gathered;
  check_finite(out.error_hidden, "bnce_backward");
  return out;
}

/// NCE objective J summed over the batch rows. log_target_output, when
/// given, supplies ln O(i,i) so that an underflowed O(i,i) stays finite.
template <typename T>
double bnce_loss(const Matrix<T>& o, const Matrix<T>& y, const Matrix<T>& n_probs, Index k_total,
                 Contrast contrast = Contrast::batch, std::span<const double> log_target_output = {}) {
  if (y.rows() != o.rows() || y.cols() != o.cols() || n_probs.cols() != o.cols())
    throw ShapeError("bnce_loss: shape mismatch");
  if (!log_target_output.empty() && static_cast<Index>(log_target_output.size()) != o.rows())
    throw ShapeError("bnce_loss: log_target_output size");
  const Index bsz = o.rows();
  double j_total = 0.0;
  for (Index i = 0; i < bsz; ++i) {
    for (Index j = 0; j < o.cols(); ++j) {
      const double yij = static_cast<double>(y(i, j));
      if (j == i) {
        const double log_o = log_target_output.empty() ? std::log(static_cast<double>(o(i, i)))
                                                       : log_target_output[static_cast<std::size_t>(i)];
        if (!std::isfinite(log_o) || !(yij > 0.0)) throw NumericError("bnce_loss: log of non-positive value");
        j_total -= log_o - std::log(yij);
      } else if (is_noise_entry(contrast, i, j, bsz)) {
        // 1 - O/Y == k N / Y exactly; the second form cannot cancel to zero.
        const double kn = static_cast<double>(k_total) * static_cast<double>(n_probs(0, j));
        if (!(kn > 0.0) || !(yij > 0.0)) throw NumericError("bnce_loss: log of non-positive value");
        j_total -= std::log(kn) - std::log(yij);
      }
    }
  }
  return j_total;
}

/// Increments counter[w] once per (row, noise column holding word w).
inline void count_noise(std::span<const TokenId> columns, Index batch, Contrast contrast,
                        std::vector<std::uint64_t>& counter) {
  for (Index i = 0; i < batch; ++i)
    for (Index j = 0; j < static_cast<Index>(columns.size()); ++j)
      if (is_noise_entry(contrast, i, j, batch)) ++counter[static_cast<std::size_t>(columns[j])];
}

template <typename T>
struct NceResult {
  double loss = 0.0;  // J summed over the batch
  HeadGradients<T> grads;
  std::size_t saturated = 0;
};

namespace detail {

template <typename T>
NceResult<T> run_nce(const Matrix<T>& l, const Matrix<T>& w, const Matrix<T>& c, std::span<const TokenId> targets,
                     std::span<const TokenId> shared, const NceConfig& cfg, Contrast contrast,
                     std::vector<std::uint64_t>* noise_counter) {
  if (cfg.noise == nullptr) throw std::invalid_argument("nce head: no noise distribution");
  const auto bsz = static_cast<Index>(targets.size());
  if (bsz != l.rows()) throw ShapeError("nce head: " + std::to_string(bsz) + " targets for " + shape_of(l));
  const auto k = static_cast<Index>(shared.size());
  const Index k_total = contrast == Contrast::batch ? bsz + k - 1 : k;
  if (k_total < 1) throw std::invalid_argument("nce head: no noise samples (B = 1 and K = 0)");
  ColumnIndexList columns(targets.begin(), targets.end());
  columns.insert(columns.end(), shared.begin(), shared.end());
  auto f = nce_forward(l, w, c, std::move(columns), cfg.z_constant, *cfg.noise);
  const Matrix<T> y = bnce_normalizer(f.output, f.noise_probs, k_total);
  const Matrix<T> g = bnce_gradient_matrix(f.output, y, f.noise_probs, k_total, contrast);
  NceResult<T> r;
  r.loss = bnce_loss<T>(f.output, y, f.noise_probs, k_total, contrast, f.log_target_output);
  r.grads = bnce_backward(g, l, f.gathered_w);
  if (noise_counter) count_noise(f.columns, bsz, contrast, *noise_counter);
  r.grads.columns = std::move(f.columns);
  r.saturated = f.saturated;
  return r;
}

}  // namespace detail

/// Plain B-NCE: the other targets of the batch are each row's noise.
template <typename T>
NceResult<T> bnce_head(const Matrix<T>& l, const Matrix<T>& w, const Matrix<T>& c, std::span<const TokenId> targets,
                       const NceConfig& cfg, std::vector<std::uint64_t>* noise_counter = nullptr) {
  return detail::run_nce<T>(l, w, c, targets, {}, cfg, Contrast::batch, noise_counter);
}

/// B-NCE extended with K shared samples appended to the column set; the
/// extra columns never act as targets. With no samples it is plain B-NCE.
template <typename T>
NceResult<T> adaptive_bnce(const Matrix<T>& l, const Matrix<T>& w, const Matrix<T>& c,
                           std::span<const TokenId> targets, std::span<const TokenId> shared, const NceConfig& cfg,
                           std::vector<std::uint64_t>* noise_counter = nullptr) {
  return detail::run_nce<T>(l, w, c, targets, shared, cfg, Contrast::batch, noise_counter);
}

template <typename T>
NceResult<T> adaptive_bnce(const Matrix<T>& l, const Matrix<T>& w, const Matrix<T>& c,
                           std::span<const TokenId> targets, const NceConfig& cfg, Rng& rng) {
  if (cfg.shared_k < 0) throw std::invalid_argument("adaptive_bnce: K must be >= 0");
  if (cfg.noise == nullptr) throw std::invalid_argument("adaptive_bnce: no noise distribution");
  const auto shared = cfg.noise->sample(static_cast<std::size_t>(cfg.shared_k), rng);
  return adaptive_bnce<T>(l, w, c, targets, shared, cfg);
}

/// Shared-noise NCE: every row is contrasted only against the K shared
/// samples; other batch targets are not noise.
template <typename T>
NceResult<T> snce_head(const Matrix<T>& l, const Matrix<T>& w, const Matrix<T>& c, std::span<const TokenId> targets,
                       std::span<const TokenId> shared, const NceConfig& cfg,
                       std::vector<std::uint64_t>* noise_counter = nullptr) {
  if (shared.empty()) throw std::invalid_argument("snce_head: K must be >= 1");
  return detail::run_nce<T>(l, w, c, targets, shared, cfg, Contrast::shared_only, noise_counter);
}

template <typename T>
NceResult<T> snce_head(const Matrix<T>& l, const Matrix<T>& w, const Matrix<T>& c, std::span<const TokenId> targets,
                       const NceConfig& cfg, Rng& rng) {
  if (cfg.shared_k < 1) throw std::invalid_argument("snce_head: K must be >= 1");
  if (cfg.noise == nullptr) throw std::invalid_argument("snce_head: no noise distribution");
  const auto shared = cfg.noise->sample(static_cast<std::size_t>(cfg.shared_k), rng);
  return snce_head<T>(l, w, c, targets, shared, cfg);
}

/// One head evaluation as used by the trainer.
template <typename T>
struct HeadStep {
  double loss_sum = 0.0;  // softmax: summed NLL; NCE heads: J
  HeadGradients<T> grads;
  std::size_t saturated = 0;
};

/// Dispatches on head type. Softmax gradients are already per-target means;
/// NCE gradients are raw sums over the batch.
template <typename T>
HeadStep<T> head_step(HeadType type, const Matrix<T>& l, const Matrix<T>& w, const Matrix<T>& c,
                      std::span<const TokenId> targets, std::span<const TokenId> shared, const NceConfig& cfg,
                      std::vector<std::uint64_t>* noise_counter = nullptr) {
  HeadStep<T> s;
  switch (type) {
    case HeadType::softmax: {
      auto [loss, cache] = softmax_forward_loss(l, w, c, targets);
      s.loss_sum = loss * static_cast<double>(targets.size());
      s.grads = softmax_backward(cache, w);
      return s;
    }
    case HeadType::bnce: {
      auto r = bnce_head(l, w, c, targets, cfg, noise_counter);
      s = {r.loss, std::move(r.grads), r.saturated};
      return s;
    }
    case HeadType::bnce_adaptive: {
      auto r = adaptive_bnce(l, w, c, targets, shared, cfg, noise_counter);
      s = {r.loss, std::move(r.grads), r.saturated};
      return s;
    }
    case HeadType::snce: {
      auto r = snce_head(l, w, c, targets, shared, cfg, noise_counter);
      s = {r.loss, std::move(r.grads), r.saturated};
      return s;
    }
  }
  throw std::logic_error("head_step: unknown head");
}

// ---------------------------------------------------------------------------
// Reference oracle

struct ReferenceNce {
  double loss = 0.0;
  Matrix<double> d_w;  // H x V
  Matrix<double> d_c;  // 1 x V
  Matrix<double> d_l;  // B x H
};

/// Direct per-example NCE: every target and every one of its noise samples
/// is scored and differentiated scalar by scalar. w_full is H x V
/// (column per word). Noise list i may be empty, in which case the target
/// posterior is exactly 1 and contributes nothing.
inline ReferenceNce reference_nce(const Matrix<double>& l, const Matrix<double>& w_full, const Matrix<double>& c_full,
                                  std::span<const TokenId> targets,
                                  const std::vector<std::vector<TokenId>>& noise_lists, double z,
                                  const UnigramNoise& p_n) {
  const Index bsz = l.rows();
  const Index hdim = l.cols();
  const Index vocab = w_full.cols();
  if (static_cast<Index>(targets.size()) != bsz || noise_lists.size() != targets.size() || w_full.rows() != hdim)
    throw ShapeError("reference_nce: inconsistent inputs");
  ReferenceNce out;
  out.d_w = Matrix<double>::Zero(hdim, vocab);
  out.d_c = Matrix<double>::Zero(1, vocab);
  out.d_l = Matrix<double>::Zero(bsz, hdim);

  auto score = [&](Index i, TokenId word) {
    double s = c_full(0, word);
    for (Index h = 0; h < hdim; ++h) s += l(i, h) * w_full(h, word);
    return s;
  };
  // Accumulates dJ/ds for (row i, word) into all three gradients.
  auto accumulate = [&](Index i, TokenId word, double ds) {
    out.d_c(0, word) += ds;
    for (Index h = 0; h < hdim; ++h) {
      out.d_w(h, word) += ds * l(i, h);
      out.d_l(i, h) += ds * w_full(h, word);
    }
  };

  for (Index i = 0; i < bsz; ++i) {
    const auto k = static_cast<double>(noise_lists[i].size());
    const TokenId target = targets[i];
    const double p = std::exp(score(i, target)) / z;
    const double p1 = p / (p + k * p_n.probability(target));
    out.loss -= std::log(p1);
    accumulate(i, target, -(1.0 - p1));
    for (TokenId noise : noise_lists[i]) {
      const double pv = std::exp(score(i, noise)) / z;
      const double p1v = pv / (pv + k * p_n.probability(noise));
      out.loss -= std::log(1.0 - p1v);
      accumulate(i, noise, p1v);
    }
  }
  return out;
}

}  // namespace bnce
