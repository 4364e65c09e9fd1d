#pragma once

// Plain SGD over an output head of choice. One step: body forward, the head
// forward/backward at every time step of the window, body backward, global
// norm clipping, update. The learning rate is halved after a fixed number
// of epochs without validation improvement.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <limits>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "bnce/checkpoint.hpp"
#include "bnce/config.hpp"
#include "bnce/corpus.hpp"
#include "bnce/eval.hpp"
#include "bnce/model.hpp"
#include "bnce/output_head.hpp"
#include "bnce/tensor.hpp"

namespace bnce {

/// Raised when training cannot continue (non-finite loss or gradient).
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Output-layer gradient in word-major layout: either dense (V x H, 1 x V)
/// or restricted to the listed rows (n x H, 1 x n) with unique ids.
template <typename T>
struct OutputGradient {
  bool dense = false;
  std::vector<TokenId> ids;
  Matrix<T> weight;
  Matrix<T> bias;
};

template <typename T>
struct Gradients {
  BodyGradients<T> body;
  OutputGradient<T> output;

  /// Pointers to every gradient block, for norm clipping.
  std::vector<Matrix<T>*> blocks() {
    std::vector<Matrix<T>*> out{&body.embedding.rows};
    body.visit_dense([&](Matrix<T>& m) { out.push_back(&m); });
    out.push_back(&output.weight);
    out.push_back(&output.bias);
    return out;
  }
};

/// theta -= lr * g
template <typename T>
void sgd_apply(Matrix<T>& param, const Matrix<T>& grad, double lr) {
  if (param.rows() != grad.rows() || param.cols() != grad.cols())
    throw ShapeError("sgd_apply: parameter " + shape_of(param) + " vs gradient " + shape_of(grad));
  param.noalias() -= static_cast<T>(lr) * grad;
}

template <typename T>
void sgd_apply(ModelParameters<T>& p, const Gradients<T>& g, double lr) {
  const T step = static_cast<T>(-lr);
  const auto& emb = g.body.embedding;
  if (emb.rows.rows() != static_cast<Index>(emb.ids.size()) || emb.rows.cols() != p.embedding.cols())
    throw ShapeError("sgd_apply: embedding gradient " + shape_of(emb.rows));
  check_indices(emb.ids, p.embedding.rows(), "sgd_apply");
  for (std::size_t k = 0; k < emb.ids.size(); ++k)
    p.embedding.row(emb.ids[k]) += step * emb.rows.row(static_cast<Index>(k));
  if (p.recurrent.w_in.size()) {
    sgd_apply(p.recurrent.w_in, g.body.recurrent.w_in, lr);
    sgd_apply(p.recurrent.w_rec, g.body.recurrent.w_rec, lr);
    sgd_apply(p.recurrent.bias, g.body.recurrent.bias, lr);
  }
  if (g.body.dense.size() != p.dense.size()) throw ShapeError("sgd_apply: dense layer count mismatch");
  for (std::size_t i = 0; i < p.dense.size(); ++i) {
    sgd_apply(p.dense[i].weight, g.body.dense[i].weight, lr);
    sgd_apply(p.dense[i].bias, g.body.dense[i].bias, lr);
  }
  if (g.output.dense) {
    sgd_apply(p.output_weight, g.output.weight, lr);
    sgd_apply(p.output_bias, g.output.bias, lr);
  } else {
    scatter_add_rows(p.output_weight, p.output_bias, g.output.ids, g.output.weight, g.output.bias, step);
  }
}

/// Halving schedule. Returns the learning rate to use next.
inline double lr_schedule_step(TrainState& st, double score, Index patience) {
  if (!std::isfinite(score)) throw std::invalid_argument("lr_schedule_step: non-finite validation score");
  if (score < st.best_validation) {
    st.best_validation = score;
    st.epochs_since_improvement = 0;
  } else if (++st.epochs_since_improvement >= static_cast<std::uint64_t>(patience)) {
    st.lr /= 2.0;
    st.epochs_since_improvement = 0;
  }
  return st.lr;
}

struct StepReport {
  double loss = 0.0;  // per target: mean NLL (softmax) or mean J (NCE heads)
  Index targets = 0;
  double grad_norm = 0.0;
  std::size_t saturated = 0;
};

struct EpochRecord {
  std::uint64_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double lr = 0.0;          // rate used during the epoch
  std::optional<EvalReport> validation;
};

template <typename T>
class Trainer {
 public:
  Trainer(RunConfig cfg, UnigramNoise noise, TokenId eos, std::span<const TokenId> train,
          std::span<const TokenId> valid = {}, std::ostream* log = nullptr)
      : cfg_(std::move(cfg)), noise_(std::move(noise)), eos_(eos), train_(train), valid_(valid), log_(log) {
    if (auto errs = validate_config(cfg_, false); !errs.empty()) throw ConfigError(std::move(errs));
    if (static_cast<Index>(noise_.size()) != cfg_.model.vocab_size)
      throw std::invalid_argument("trainer: noise distribution has " + std::to_string(noise_.size()) +
                                  " words, model has " + std::to_string(cfg_.model.vocab_size));
    model_ = Model<T>(cfg_.model, cfg_.train.seed);
    if (cfg_.train.unigram_bias_init) init_unigram_bias();
    state_.lr = cfg_.train.initial_lr;
    state_.rng = Rng(derive_seed(cfg_.train.seed, seed_stream::kNoise));
  }

  /// Continue from a saved checkpoint; training resumes at the next epoch.
  void restore(const Checkpoint<T>& ck) {
    if (ck.config.model.vocab_size != cfg_.model.vocab_size)
      throw std::invalid_argument("trainer: checkpoint vocabulary size does not match");
    model_ = ck.model;
    state_ = ck.state;
  }

  Model<T>& model() { return model_; }
  const Model<T>& model() const { return model_; }
  const TrainState& state() const { return state_; }
  const RunConfig& config() const { return cfg_; }
  const std::vector<EpochRecord>& history() const { return history_; }
  std::optional<double> first_loss() const { return first_loss_; }
  std::size_t saturated() const { return saturated_; }

  /// Counts noise participation per word id (instrumentation).
  void set_noise_counter(std::vector<std::uint64_t>* counter) {
    if (counter) counter->assign(static_cast<std::size_t>(cfg_.model.vocab_size), 0);
    noise_counter_ = counter;
  }

  NceConfig nce_config() const { return {cfg_.train.z_constant, cfg_.train.shared_k, &noise_}; }

  /// Forward, backward and merged gradients for one batch, without updating.
  Gradients<T> compute_gradients(const Batch& batch, StepReport& report) {
    const auto& tc = cfg_.train;
    const auto& p = model_.params();
    const Matrix<T>& l = model_.forward(batch);
    const Index bsz = batch.batch_size;
    const Index steps = batch.steps();
    const bool nce = tc.head != HeadType::softmax;
    const NceConfig ncfg = nce_config();
    const T scale = nce ? T(1) / static_cast<T>(bsz) : T(1);

    Matrix<T> error(l.rows(), l.cols());
    Gradients<T> g;
    g.output.dense = !nce;
    std::vector<TokenId> ids;        // NCE: touched rows, one entry per gathered column
    std::vector<Matrix<T>> pieces;   // NCE: [dW^T | dC^T] per step
    Index piece_rows = 0;
    if (!nce) {
      g.output.weight = Matrix<T>::Zero(p.output_weight.rows(), p.output_weight.cols());
      g.output.bias = Matrix<T>::Zero(1, p.output_bias.cols());
    }
    double loss = 0.0;
    for (Index t = 0; t < steps; ++t) {
      const Matrix<T> l_t = l.middleRows(t * bsz, bsz);
      std::vector<TokenId> shared;
      if ((tc.head == HeadType::snce || tc.head == HeadType::bnce_adaptive) && tc.shared_k > 0)
        shared = noise_.sample(static_cast<std::size_t>(tc.shared_k), state_.rng);
      auto s = head_step<T>(tc.head, l_t, p.output_weight, p.output_bias, batch.step_targets(t), shared, ncfg,
                            noise_counter_);
      loss += s.loss_sum;
      report.saturated += s.saturated;
      error.middleRows(t * bsz, bsz) = scale * s.grads.error_hidden;
      if (!nce) {
        g.output.weight += s.grads.delta_w.transpose();
        g.output.bias += s.grads.delta_c;
      } else {
        Matrix<T> piece(s.grads.delta_w.cols(), l.cols() + 1);
        piece.leftCols(l.cols()) = scale * s.grads.delta_w.transpose();
        piece.col(l.cols()) = scale * s.grads.delta_c.row(0).transpose();
        ids.insert(ids.end(), s.grads.columns.begin(), s.grads.columns.end());
        piece_rows += piece.rows();
        pieces.push_back(std::move(piece));
      }
    }
    if (nce) {
      Matrix<T> stacked(piece_rows, l.cols() + 1);
      Index at = 0;
      for (const auto& piece : pieces) {
        stacked.middleRows(at, piece.rows()) = piece;
        at += piece.rows();
      }
      auto merged = coalesce<T>(ids, stacked);
      g.output.ids = std::move(merged.ids);
      g.output.weight = merged.rows.leftCols(l.cols());
      g.output.bias = merged.rows.col(l.cols()).transpose();
    }
    g.body = model_.backward(error);
    report.targets = bsz * steps;
    report.loss = loss / static_cast<double>(report.targets);
    return g;
  }

  /// One optimizer step.
  StepReport train_step(const Batch& batch) {
    StepReport r;
    Gradients<T> g;
    try {
      g = compute_gradients(batch, r);
    } catch (const NumericError& e) {
      abort_training(e.what());
    }
    saturated_ += r.saturated;
    if (!std::isfinite(r.loss)) abort_training("non-finite loss " + std::to_string(r.loss));
    auto blocks = g.blocks();
    r.grad_norm = clip_global_norm<T>(blocks, cfg_.train.clip_threshold);
    if (!std::isfinite(r.grad_norm)) abort_training("non-finite gradient norm");
    sgd_apply(model_.params(), g, state_.lr);
    if (!first_loss_) first_loss_ = r.loss;
    ++state_.step;
    state_.words += static_cast<std::uint64_t>(r.targets);
    return r;
  }

  BatchStream make_train_stream() const {
    BatchStreamOptions opt;
    opt.mode = cfg_.model.batch_mode();
    opt.batch_size = cfg_.train.batch_size;
    opt.width = cfg_.model.recurrent() ? cfg_.train.bptt_window : cfg_.model.context_length;
    if (!cfg_.model.recurrent() && cfg_.train.shuffle) opt.shuffle_seed = derive_seed(cfg_.train.seed, seed_stream::kShuffle);
    return BatchStream(train_, eos_, opt);
  }

  /// Validation on a copy of the live model.
  EvalReport validate() const {
    EvalOptions o;
    o.z_constant = cfg_.train.z_constant;
    o.batch_size = cfg_.train.eval_batch_size;
    o.full = cfg_.train.report_ppl_f || cfg_.train.schedule_metric() == ValidationMetric::ppl_f;
    return evaluate(model_, valid_, eos_, o);
  }

  /// Trains up to max_epochs, writing checkpoints into out_dir when it is
  /// non-empty. Returns the per-epoch records of this call.
  const std::vector<EpochRecord>& run() {
    const auto& tc = cfg_.train;
    const bool files = !cfg_.out_dir.empty();
    if (files) std::filesystem::create_directories(cfg_.out_dir);
    if (static_cast<Index>(state_.epoch) >= tc.max_epochs) {
      if (files) save("checkpoint-final");
      return history_;
    }
    BatchStream stream = make_train_stream();
    using clock = std::chrono::steady_clock;
    while (static_cast<Index>(state_.epoch) < tc.max_epochs) {
      stream.reset(state_.epoch);
      model_.reset_state();
      EpochRecord rec;
      rec.epoch = state_.epoch + 1;
      rec.lr = state_.lr;
      double epoch_loss = 0.0, interval_loss = 0.0;
      Index epoch_targets = 0, interval_targets = 0;
      while (auto batch = stream.next()) {
        const auto t0 = clock::now();
        const StepReport r = train_step(*batch);
        state_.seconds += std::chrono::duration<double>(clock::now() - t0).count();
        epoch_loss += r.loss * static_cast<double>(r.targets);
        interval_loss += r.loss * static_cast<double>(r.targets);
        epoch_targets += r.targets;
        interval_targets += r.targets;
        if (log_ && state_.step % static_cast<std::uint64_t>(tc.log_interval) == 0) {
          *log_ << "step=" << state_.step << " epoch=" << rec.epoch
                << " loss=" << interval_loss / static_cast<double>(interval_targets) << " wps=" << words_per_second()
                << " lr=" << state_.lr << '\n';
          interval_loss = 0.0;
          interval_targets = 0;
        }
      }
      rec.train_loss = epoch_targets ? epoch_loss / static_cast<double>(epoch_targets) : 0.0;
      ++state_.epoch;
      if (!valid_.empty()) {
        rec.validation = validate();
        const auto& v = *rec.validation;
        if (log_) {
          *log_ << "epoch=" << rec.epoch << " train_loss=" << rec.train_loss << " val_ppl_n=" << v.ppl_n;
          if (v.full) *log_ << " val_ppl_f=" << v.ppl_f << " val_gap_mean=" << v.gap_mean
                            << " val_gap_var=" << v.gap_variance;
          *log_ << " lr=" << state_.lr << '\n';
        }
        const double score = tc.schedule_metric() == ValidationMetric::ppl_f ? v.ppl_f : v.ppl_n;
        const bool improved = score < state_.best_validation;
        lr_schedule_step(state_, score, tc.patience_epochs);
        if (files && improved) save("checkpoint-best");
      } else if (log_) {
        *log_ << "epoch=" << rec.epoch << " train_loss=" << rec.train_loss << " lr=" << state_.lr << '\n';
      }
      history_.push_back(rec);
      if (files) save("checkpoint-final");
    }
    if (log_) log_->flush();
    return history_;
  }

  double words_per_second() const {
    return state_.seconds > 0.0 ? static_cast<double>(state_.words) / state_.seconds : 0.0;
  }

  void save(const std::string& name) const {
    save_checkpoint((std::filesystem::path(cfg_.out_dir) / name).string(), cfg_, model_, state_);
  }

 private:
  /// With zero output weights this makes the initial model the noise
  /// distribution, exactly self-normalized at Z. Words of probability zero
  /// get the smallest positive probability.
  void init_unigram_bias() {
    double floor = 1.0;
    for (std::size_t w = 0; w < noise_.size(); ++w) {
      const double p = noise_.probability(static_cast<TokenId>(w));
      if (p > 0.0) floor = std::min(floor, p);
    }
    const double log_z = std::log(cfg_.train.z_constant);
    auto& c = model_.params().output_bias;
    for (Index w = 0; w < c.cols(); ++w)
      c(0, w) = static_cast<T>(std::log(std::max(noise_.probability(static_cast<TokenId>(w)), floor)) + log_z);
  }

  [[noreturn]] void abort_training(const std::string& why) const {
    std::ostringstream msg;
    msg << "training aborted: " << why << " (step " << state_.step + 1 << ", epoch " << state_.epoch + 1
        << ", lr " << state_.lr << ", saturated scores " << saturated_ << ")";
    throw TrainingError(msg.str());
  }

  RunConfig cfg_;
  UnigramNoise noise_;
  TokenId eos_;
  std::span<const TokenId> train_;
  std::span<const TokenId> valid_;
  std::ostream* log_;
  Model<T> model_;
  TrainState state_;
  std::vector<EpochRecord> history_;
  std::optional<double> first_loss_;
  std::size_t saturated_ = 0;
  std::vector<std::uint64_t>* noise_counter_ = nullptr;
};

}  // namespace bnce
