#pragma once

// Network bodies producing the last hidden layer fed to the output head.
//
// Supported shapes: n-gram feed-forward (concatenated context embeddings
// followed by ReLU layers) and single-layer recurrent models (sigmoid RNN or
// LSTM) optionally followed by ReLU layers, the last of which may be a
// bottleneck. Every layer has an explicit backward pass.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "bnce/corpus.hpp"
#include "bnce/rng.hpp"
#include "bnce/tensor.hpp"

namespace bnce {

enum class Architecture { ffnn, rnn, lstm };

inline std::string to_string(Architecture a) {
  switch (a) {
    case Architecture::ffnn: return "ffnn";
    case Architecture::rnn: return "rnn";
    case Architecture::lstm: return "lstm";
  }
  return "?";
}

inline Architecture parse_architecture(std::string_view s) {
  if (s == "ffnn") return Architecture::ffnn;
  if (s == "rnn") return Architecture::rnn;
  if (s == "lstm") return Architecture::lstm;
  throw std::invalid_argument("unknown architecture '" + std::string(s) + "'");
}

struct ModelConfig {
  Architecture architecture = Architecture::rnn;
  Index vocab_size = 0;
  Index embed_dim = 200;
  std::vector<Index> hidden_dims;  // ReLU layers after the embedding (ffnn) or recurrence
  Index recurrent_dim = 600;       // rnn / lstm only
  Index bottleneck_dim = 0;        // 0 = no bottleneck layer
  Index context_length = 4;        // ffnn only: n - 1
  double init_range = 0.05;
  bool zero_output_init = false;   // start from the uniform predictor

  bool recurrent() const { return architecture != Architecture::ffnn; }
  BatchMode batch_mode() const { return recurrent() ? BatchMode::sequential : BatchMode::ngram; }

  /// Widths of the ReLU layers in order, bottleneck last.
  std::vector<Index> dense_dims() const {
    std::vector<Index> d = hidden_dims;
    if (bottleneck_dim > 0) d.push_back(bottleneck_dim);
    return d;
  }

  Index input_dim() const { return recurrent() ? recurrent_dim : context_length * embed_dim; }

  /// H: width of the last hidden layer.
  Index output_dim() const {
    const auto d = dense_dims();
    return d.empty() ? input_dim() : d.back();
  }

  std::vector<std::string> validate() const {
    std::vector<std::string> errs;
    if (vocab_size < 1) errs.push_back("vocab_size must be >= 1");
    if (embed_dim < 1) errs.push_back("embed_dim must be >= 1");
    if (recurrent() && recurrent_dim < 1) errs.push_back("recurrent_dim must be >= 1");
    if (!recurrent() && context_length < 1) errs.push_back("context_length must be >= 1");
    if (bottleneck_dim < 0) errs.push_back("bottleneck_dim must be >= 0");
    for (Index h : hidden_dims)
      if (h < 1) errs.push_back("hidden_dims entries must be >= 1");
    if (!(init_range > 0.0)) errs.push_back("init_range must be > 0");
    return errs;
  }
};

/// Closed-form parameter count.
inline Index parameter_count(const ModelConfig& c) {
  Index n = c.vocab_size * c.embed_dim;
  const Index gates = c.architecture == Architecture::lstm ? 4 : 1;
  if (c.recurrent()) n += gates * (c.embed_dim * c.recurrent_dim + c.recurrent_dim * c.recurrent_dim + c.recurrent_dim);
  Index prev = c.input_dim();
  for (Index d : c.dense_dims()) {
    n += prev * d + d;
    prev = d;
  }
  n += prev * c.vocab_size + c.vocab_size;
  return n;
}

template <typename T>
struct DenseParams {
  Matrix<T> weight;  // p x q
  Matrix<T> bias;    // 1 x q
};

/// Simple RNN: w_in d x r, w_rec r x r, bias 1 x r.
/// LSTM: the same with 4r columns, gate blocks ordered [input, forget, cell, output].
template <typename T>
struct RecurrentParams {
  Matrix<T> w_in;
  Matrix<T> w_rec;
  Matrix<T> bias;
};

template <typename T>
struct ModelParameters {
  Matrix<T> embedding;  // V x d
  RecurrentParams<T> recurrent;
  std::vector<DenseParams<T>> dense;
  Matrix<T> output_weight;  // V x H, one row per word
  Matrix<T> output_bias;    // 1 x V

  /// Visits every parameter matrix in a fixed order with a stable name.
  template <typename F>
  void visit(F&& f) {
    f(std::string("embedding"), embedding);
    if (recurrent.w_in.size()) {
      f(std::string("recurrent.w_in"), recurrent.w_in);
      f(std::string("recurrent.w_rec"), recurrent.w_rec);
      f(std::string("recurrent.bias"), recurrent.bias);
    }
    for (std::size_t i = 0; i < dense.size(); ++i) {
      f("dense" + std::to_string(i) + ".weight", dense[i].weight);
      f("dense" + std::to_string(i) + ".bias", dense[i].bias);
    }
    f(std::string("output.weight"), output_weight);
    f(std::string("output.bias"), output_bias);
  }
};

template <typename T>
struct BodyGradients {
  SparseRows<T> embedding;
  RecurrentParams<T> recurrent;
  std::vector<DenseParams<T>> dense;

  template <typename F>
  void visit_dense(F&& f) {
    if (recurrent.w_in.size()) {
      f(recurrent.w_in);
      f(recurrent.w_rec);
      f(recurrent.bias);
    }
    for (auto& d : dense) {
      f(d.weight);
      f(d.bias);
    }
  }
};

// ---------------------------------------------------------------------------
// Layer kernels

/// Row b is the concatenation of the embedding rows of ids[b*n .. b*n+n).
template <typename T>
Matrix<T> embed_forward(std::span<const TokenId> ids, Index n, const Matrix<T>& table) {
  if (n < 1 || static_cast<Index>(ids.size()) % n != 0)
    throw ShapeError("embed_forward: " + std::to_string(ids.size()) + " ids not divisible by " + std::to_string(n));
  check_indices(ids, table.rows(), "embed_forward");
  const Index d = table.cols();
  const Index rows = static_cast<Index>(ids.size()) / n;
  Matrix<T> out(rows, n * d);
  // B x (n*d) row-major has the same memory layout as (B*n) x d.
  for (std::size_t k = 0; k < ids.size(); ++k)
    std::copy_n(table.row(ids[k]).data(), d, out.data() + static_cast<Index>(k) * d);
  return out;
}

/// Gradient of embed_forward: a coalesced row update for the referenced ids.
template <typename T>
SparseRows<T> embed_backward(std::span<const TokenId> ids, const Matrix<T>& grad, Index d) {
  if (grad.size() != static_cast<Index>(ids.size()) * d)
    throw ShapeError("embed_backward: gradient " + shape_of(grad) + " for " + std::to_string(ids.size()) + " ids");
  Matrix<T> rows(static_cast<Index>(ids.size()), d);
  std::copy_n(grad.data(), grad.size(), rows.data());
  return coalesce<T>(ids, rows);
}

template <typename T>
Matrix<T> relu_dense_forward(const Matrix<T>& x, const DenseParams<T>& p) {
  if (x.cols() != p.weight.rows() || p.bias.cols() != p.weight.cols())
    throw ShapeError("relu_dense_forward: " + shape_of(x) + " * " + shape_of(p.weight));
  Matrix<T> out(x.rows(), p.weight.cols());
  out.noalias() = x * p.weight;
  out.rowwise() += p.bias.row(0);
  out = out.cwiseMax(T(0));
  check_finite(out, "relu_dense_forward");
  return out;
}

template <typename T>
struct DenseBackward {
  Matrix<T> d_weight;
  Matrix<T> d_bias;
  Matrix<T> d_input;
};

template <typename T>
DenseBackward<T> relu_dense_backward(const Matrix<T>& x, const Matrix<T>& out, const Matrix<T>& grad_out,
                                     const DenseParams<T>& p) {
  if (grad_out.rows() != out.rows() || grad_out.cols() != out.cols() || x.rows() != out.rows() ||
      x.cols() != p.weight.rows())
    throw ShapeError("relu_dense_backward: shape mismatch");
  Matrix<T> dz = (out.array() > T(0)).select(grad_out, T(0));
  DenseBackward<T> r;
  r.d_weight.noalias() = x.transpose() * dz;
  r.d_bias = dz.colwise().sum();
  r.d_input.noalias() = dz * p.weight.transpose();
  return r;
}

template <typename T>
T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

template <typename T>
void check_recurrent_shapes(const Matrix<T>& x, const Matrix<T>& h, const RecurrentParams<T>& p, Index gates,
                            const char* what) {
  const Index r = p.w_rec.rows();
  if (x.cols() != p.w_in.rows() || h.cols() != r || h.rows() != x.rows() || p.w_in.cols() != gates * r ||
      p.w_rec.cols() != gates * r || p.bias.cols() != gates * r)
    throw ShapeError(std::string(what) + ": input " + shape_of(x) + ", state " + shape_of(h) + ", w_in " +
                     shape_of(p.w_in));
}

/// h_t = sigmoid(x_t W_in + h_prev W_rec (+) b)
template <typename T>
Matrix<T> rnn_step(const Matrix<T>& x_t, const Matrix<T>& h_prev, const RecurrentParams<T>& p) {
  check_recurrent_shapes(x_t, h_prev, p, 1, "rnn_step");
  Matrix<T> z(x_t.rows(), p.w_rec.cols());
  z.noalias() = x_t * p.w_in;
  z.noalias() += h_prev * p.w_rec;
  z.rowwise() += p.bias.row(0);
  return z.unaryExpr([](T v) { return sigmoid(v); });
}

template <typename T>
struct StepBackward {
  Matrix<T> d_input;
  Matrix<T> d_hidden_prev;
  Matrix<T> d_cell_prev;  // LSTM only
};

/// Backward through one rnn_step; accumulates into grads.
template <typename T>
StepBackward<T> rnn_step_backward(const Matrix<T>& x_t, const Matrix<T>& h_prev, const Matrix<T>& h_t,
                                  const Matrix<T>& d_h, const RecurrentParams<T>& p, RecurrentParams<T>& grads) {
  Matrix<T> dz = d_h.array() * h_t.array() * (T(1) - h_t.array());
  grads.w_in.noalias() += x_t.transpose() * dz;
  grads.w_rec.noalias() += h_prev.transpose() * dz;
  grads.bias += dz.colwise().sum();
  StepBackward<T> r;
  r.d_input.noalias() = dz * p.w_in.transpose();
  r.d_hidden_prev.noalias() = dz * p.w_rec.transpose();
  return r;
}

template <typename T>
struct LstmState {
  Matrix<T> hidden;
  Matrix<T> cell;
};

template <typename T>
struct LstmStepCache {
  Matrix<T> input_gate, forget_gate, cell_candidate, output_gate;
  Matrix<T> cell, cell_tanh, hidden;
};

/// Standard LSTM cell without peepholes.
template <typename T>
LstmStepCache<T> lstm_step(const Matrix<T>& x_t, const LstmState<T>& prev, const RecurrentParams<T>& p) {
  check_recurrent_shapes(x_t, prev.hidden, p, 4, "lstm_step");
  if (prev.cell.rows() != prev.hidden.rows() || prev.cell.cols() != prev.hidden.cols())
    throw ShapeError("lstm_step: cell state " + shape_of(prev.cell));
  const Index r = p.w_rec.rows();
  Matrix<T> z(x_t.rows(), 4 * r);
  z.noalias() = x_t * p.w_in;
  z.noalias() += prev.hidden * p.w_rec;
  z.rowwise() += p.bias.row(0);
  LstmStepCache<T> c;
  auto sig = [](T v) { return sigmoid(v); };
  c.input_gate = z.middleCols(0, r).unaryExpr(sig);
  c.forget_gate = z.middleCols(r, r).unaryExpr(sig);
  c.cell_candidate = z.middleCols(2 * r, r).array().tanh();
  c.output_gate = z.middleCols(3 * r, r).unaryExpr(sig);
  c.cell = c.forget_gate.cwiseProduct(prev.cell) + c.input_gate.cwiseProduct(c.cell_candidate);
  c.cell_tanh = c.cell.array().tanh();
  c.hidden = c.output_gate.cwiseProduct(c.cell_tanh);
  return c;
}

template <typename T>
StepBackward<T> lstm_step_backward(const Matrix<T>& x_t, const LstmState<T>& prev, const LstmStepCache<T>& c,
                                   const Matrix<T>& d_h, const Matrix<T>& d_cell_next, const RecurrentParams<T>& p,
                                   RecurrentParams<T>& grads) {
  const Index r = p.w_rec.rows();
  Matrix<T> d_cell = d_h.cwiseProduct(c.output_gate).cwiseProduct(
                         (T(1) - c.cell_tanh.array().square()).matrix()) +
                     d_cell_next;
  Matrix<T> dz(x_t.rows(), 4 * r);
  auto sig_grad = [](const Matrix<T>& s) { return (s.array() * (T(1) - s.array())).matrix(); };
  dz.middleCols(0, r) = d_cell.cwiseProduct(c.cell_candidate).cwiseProduct(sig_grad(c.input_gate));
  dz.middleCols(r, r) = d_cell.cwiseProduct(prev.cell).cwiseProduct(sig_grad(c.forget_gate));
  dz.middleCols(2 * r, r) =
      d_cell.cwiseProduct(c.input_gate).cwiseProduct((T(1) - c.cell_candidate.array().square()).matrix());
  dz.middleCols(3 * r, r) = d_h.cwiseProduct(c.cell_tanh).cwiseProduct(sig_grad(c.output_gate));
  grads.w_in.noalias() += x_t.transpose() * dz;
  grads.w_rec.noalias() += prev.hidden.transpose() * dz;
  grads.bias += dz.colwise().sum();
  StepBackward<T> out;
  out.d_input.noalias() = dz * p.w_in.transpose();
  out.d_hidden_prev.noalias() = dz * p.w_rec.transpose();
  out.d_cell_prev = d_cell.cwiseProduct(c.forget_gate);
  return out;
}

// ---------------------------------------------------------------------------
// Body composition

/// Owns the parameters, the recurrent state carried across sequential
/// batches, and the activations cached by the last forward call.
template <typename T>
class Model {
 public:
  Model() = default;

  Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    if (auto errs = cfg.validate(); !errs.empty()) throw std::invalid_argument("model config: " + errs.front());
    Rng rng(derive_seed(seed, seed_stream::kInit));
    const double a = cfg.init_range;
    auto uniform = [&](Index r, Index c) {
      Matrix<T> m(r, c);
      fill_uniform(m, rng, -a, a);
      return m;
    };
    params_.embedding = uniform(cfg.vocab_size, cfg.embed_dim);
    if (cfg.recurrent()) {
      const Index g = cfg.architecture == Architecture::lstm ? 4 : 1;
      const Index r = cfg.recurrent_dim;
      params_.recurrent.w_in = uniform(cfg.embed_dim, g * r);
      params_.recurrent.w_rec = uniform(r, g * r);
      params_.recurrent.bias = Matrix<T>::Zero(1, g * r);
      if (cfg.architecture == Architecture::lstm) params_.recurrent.bias.middleCols(r, r).setConstant(T(1));
    }
    Index prev = cfg.input_dim();
    for (Index d : cfg.dense_dims()) {
      params_.dense.push_back({uniform(prev, d), Matrix<T>::Zero(1, d)});
      prev = d;
    }
    params_.output_weight = cfg.zero_output_init ? Matrix<T>::Zero(cfg.vocab_size, prev) : uniform(cfg.vocab_size, prev);
    params_.output_bias = Matrix<T>::Zero(1, cfg.vocab_size);
  }

  const ModelConfig& config() const { return cfg_; }
  ModelParameters<T>& params() { return params_; }
  const ModelParameters<T>& params() const { return params_; }

  Index parameter_count() {
    Index n = 0;
    params_.visit([&](const std::string&, Matrix<T>& m) { n += m.size(); });
    return n;
  }

  void reset_state() {
    state_ = {};
  }

  /// Recurrent state after the last forward call (empty for ffnn).
  const LstmState<T>& state() const { return state_; }

  /// L: (steps * B) x H, rows ordered t * B + b.
  const Matrix<T>& forward(const Batch& batch) {
    if (batch.mode != cfg_.batch_mode())
      throw std::invalid_argument("body_forward: batch mode does not match architecture " + to_string(cfg_.architecture));
    cache_ = {};
    cache_.batch_size = batch.batch_size;
    cache_.steps = batch.steps();
    if (cfg_.recurrent()) {
      forward_recurrent(batch);
    } else {
      if (batch.width != cfg_.context_length)
        throw std::invalid_argument("body_forward: context width " + std::to_string(batch.width) +
                                    " != configured " + std::to_string(cfg_.context_length));
      cache_.ids = batch.inputs;
      cache_.layer_inputs.push_back(embed_forward<T>(cache_.ids, cfg_.context_length, params_.embedding));
    }
    for (const auto& layer : params_.dense) {
      Matrix<T> out = relu_dense_forward(cache_.layer_inputs.back(), layer);
      cache_.layer_inputs.push_back(std::move(out));
    }
    return cache_.layer_inputs.back();
  }

  /// Consumes E(L) for the last forward call; returns body gradients only.
  BodyGradients<T> backward(const Matrix<T>& error_hidden) {
    const Matrix<T>& top = cache_.layer_inputs.back();
    if (error_hidden.rows() != top.rows() || error_hidden.cols() != top.cols())
      throw ShapeError("body_backward: error " + shape_of(error_hidden) + " for hidden " + shape_of(top));
    BodyGradients<T> g;
    g.dense.resize(params_.dense.size());
    Matrix<T> grad = error_hidden;
    for (std::size_t k = params_.dense.size(); k-- > 0;) {
      auto r = relu_dense_backward(cache_.layer_inputs[k], cache_.layer_inputs[k + 1], grad, params_.dense[k]);
      g.dense[k] = {std::move(r.d_weight), std::move(r.d_bias)};
      grad = std::move(r.d_input);
    }
    if (cfg_.recurrent()) grad = backward_recurrent(grad, g.recurrent);
    g.embedding = embed_backward<T>(cache_.ids, grad, cfg_.embed_dim);
    return g;
  }

 private:
  struct Cache {
    Index batch_size = 0;
    Index steps = 0;
    std::vector<TokenId> ids;       // embedding lookups, in row order
    Matrix<T> embedded;             // recurrent: (steps*B) x d
    LstmState<T> initial;           // state entering the window
    std::vector<Matrix<T>> hidden;  // rnn: h_t per step
    std::vector<LstmStepCache<T>> lstm;
    std::vector<Matrix<T>> layer_inputs;  // [0] = body input to the ReLU stack
  };

  void forward_recurrent(const Batch& batch) {
    const Index bsz = batch.batch_size;
    const Index r = cfg_.recurrent_dim;
    if (batch.reset_state || state_.hidden.rows() != bsz) {
      state_.hidden = Matrix<T>::Zero(bsz, r);
      state_.cell = Matrix<T>::Zero(bsz, r);
    }
    cache_.initial = state_;
    // Sequential inputs are already stored t*B + b.
    cache_.ids = batch.inputs;
    cache_.embedded = embed_forward<T>(cache_.ids, 1, params_.embedding);
    Matrix<T> stacked(cache_.steps * bsz, r);
    LstmState<T> cur = state_;
    for (Index t = 0; t < cache_.steps; ++t) {
      Matrix<T> x_t = cache_.embedded.middleRows(t * bsz, bsz);
      if (cfg_.architecture == Architecture::rnn) {
        cur.hidden = rnn_step(x_t, cur.hidden, params_.recurrent);
        cache_.hidden.push_back(cur.hidden);
      } else {
        auto step = lstm_step(x_t, cur, params_.recurrent);
        cur.hidden = step.hidden;
        cur.cell = step.cell;
        cache_.lstm.push_back(std::move(step));
      }
      stacked.middleRows(t * bsz, bsz) = cur.hidden;
    }
    check_finite(stacked, "body_forward");
    state_ = std::move(cur);
    cache_.layer_inputs.push_back(std::move(stacked));
  }

  Matrix<T> backward_recurrent(const Matrix<T>& d_stacked, RecurrentParams<T>& g) {
    const Index bsz = cache_.batch_size;
    const Index r = cfg_.recurrent_dim;
    const auto& p = params_.recurrent;
    g.w_in = Matrix<T>::Zero(p.w_in.rows(), p.w_in.cols());
    g.w_rec = Matrix<T>::Zero(p.w_rec.rows(), p.w_rec.cols());
    g.bias = Matrix<T>::Zero(1, p.bias.cols());
    Matrix<T> d_embedded(cache_.steps * bsz, cfg_.embed_dim);
    Matrix<T> dh_next = Matrix<T>::Zero(bsz, r);
    Matrix<T> dc_next = Matrix<T>::Zero(bsz, r);
    for (Index t = cache_.steps; t-- > 0;) {
      Matrix<T> x_t = cache_.embedded.middleRows(t * bsz, bsz);
      Matrix<T> dh = d_stacked.middleRows(t * bsz, bsz) + dh_next;
      StepBackward<T> s;
      if (cfg_.architecture == Architecture::rnn) {
        const Matrix<T>& h_prev = t == 0 ? cache_.initial.hidden : cache_.hidden[t - 1];
        s = rnn_step_backward(x_t, h_prev, cache_.hidden[t], dh, p, g);
      } else {
        LstmState<T> prev = t == 0 ? cache_.initial
                                   : LstmState<T>{cache_.lstm[t - 1].hidden, cache_.lstm[t - 1].cell};
        s = lstm_step_backward(x_t, prev, cache_.lstm[t], dh, dc_next, p, g);
        dc_next = std::move(s.d_cell_prev);
      }
      dh_next = std::move(s.d_hidden_prev);
      d_embedded.middleRows(t * bsz, bsz) = s.d_input;
    }
    return d_embedded;
  }

  ModelConfig cfg_;
  ModelParameters<T> params_;
  LstmState<T> state_;
  Cache cache_;
};

}  // namespace bnce
