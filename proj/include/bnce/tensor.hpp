#pragma once

// Dense matrix kernels used by every forward and backward pass.
//
// Matrices are row-major Eigen matrices with a runtime-selected scalar
// (float for training, double for verification). All kernels validate
// shapes up front and reject non-finite results.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace bnce {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Index = Eigen::Index;
using TokenId = std::int32_t;

/// Vocabulary ids addressing columns (or rows, for word-major tables).
/// Duplicates are allowed.
using ColumnIndexList = std::vector<TokenId>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class IndexError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace audit {

/// Receives (rows, cols) for every matrix allocated through allocate().
/// Tests install one to prove the sampled heads never build a V-wide matrix.
using AllocationHook = std::function<void(Index, Index)>;

inline AllocationHook& hook() {
  thread_local AllocationHook h;
  return h;
}

class ScopedAllocationHook {
 public:
  explicit ScopedAllocationHook(AllocationHook h) : previous_(std::move(hook())) {
    hook() = std::move(h);
  }
  ~ScopedAllocationHook() { hook() = std::move(previous_); }
  ScopedAllocationHook(const ScopedAllocationHook&) = delete;
  ScopedAllocationHook& operator=(const ScopedAllocationHook&) = delete;

 private:
  AllocationHook previous_;
};

}  // namespace audit

template <typename T>
Matrix<T> allocate(Index rows, Index cols) {
  if (auto& h = audit::hook()) h(rows, cols);
  return Matrix<T>::Zero(rows, cols);
}

inline std::string shape_string(Index r, Index c) {
  return std::to_string(r) + "x" + std::to_string(c);
}

template <typename T>
std::string shape_of(const Matrix<T>& m) {
  return shape_string(m.rows(), m.cols());
}

template <typename T>
bool all_finite(const Matrix<T>& m) {
  return m.allFinite();
}

template <typename T>
void check_finite(const Matrix<T>& m, const char* what) {
  if (!m.allFinite()) throw NumericError(std::string(what) + ": non-finite value");
}

/// a (m x k) times b (k x n).
template <typename T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.cols() != b.rows())
    throw ShapeError("matmul: " + shape_of(a) + " * " + shape_of(b));
  Matrix<T> out = allocate<T>(a.rows(), b.cols());
  out.noalias() = a * b;
  check_finite(out, "matmul");
  return out;
}

/// a (m x k) times transpose(b) where b is (n x k).
template <typename T>
Matrix<T> matmul_nt(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.cols() != b.cols())
    throw ShapeError("matmul_nt: " + shape_of(a) + " * " + shape_of(b) + "^T");
  Matrix<T> out = allocate<T>(a.rows(), b.rows());
  out.noalias() = a * b.transpose();
  check_finite(out, "matmul_nt");
  return out;
}

/// transpose(a) times b where a is (k x m) and b is (k x n).
template <typename T>
Matrix<T> matmul_tn(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.rows() != b.rows())
    throw ShapeError("matmul_tn: " + shape_of(a) + "^T * " + shape_of(b));
  Matrix<T> out = allocate<T>(a.cols(), b.cols());
  out.noalias() = a.transpose() * b;
  check_finite(out, "matmul_tn");
  return out;
}

/// out[i,j] = m[i,j] + v[0,j]
template <typename T>
Matrix<T> row_broadcast_add(const Matrix<T>& m, const Matrix<T>& v) {
  if (v.rows() != 1 || v.cols() != m.cols())
    throw ShapeError("row_broadcast_add: " + shape_of(m) + " (+) " + shape_of(v));
  Matrix<T> out = allocate<T>(m.rows(), m.cols());
  out.noalias() = m.rowwise() + v.row(0);
  check_finite(out, "row_broadcast_add");
  return out;
}

template <typename T>
void row_broadcast_add_inplace(Matrix<T>& m, const Matrix<T>& v) {
  if (v.rows() != 1 || v.cols() != m.cols())
    throw ShapeError("row_broadcast_add: " + shape_of(m) + " (+) " + shape_of(v));
  m.rowwise() += v.row(0);
}

inline void check_indices(std::span<const TokenId> idx, Index limit, const char* what) {
  for (TokenId i : idx) {
    if (i < 0 || i >= limit)
      throw IndexError(std::string(what) + ": index " + std::to_string(i) +
                       " outside [0, " + std::to_string(limit) + ")");
  }
}

/// Restricts (W: H x V, C: 1 x V) to the listed columns, in list order.
template <typename T>
std::pair<Matrix<T>, Matrix<T>> gather_columns(const Matrix<T>& w, const Matrix<T>& c,
                                               std::span<const TokenId> idx) {
  if (c.rows() != 1 || c.cols() != w.cols())
    throw ShapeError("gather_columns: " + shape_of(w) + " with bias " + shape_of(c));
  check_indices(idx, w.cols(), "gather_columns");
  const auto n = static_cast<Index>(idx.size());
  Matrix<T> wg = allocate<T>(w.rows(), n);
  Matrix<T> cg = allocate<T>(1, n);
  for (Index j = 0; j < n; ++j) {
    wg.col(j) = w.col(idx[j]);
    cg(0, j) = c(0, idx[j]);
  }
  return {std::move(wg), std::move(cg)};
}

/// target column idx[j] += dw column j, in increasing j. Duplicates accumulate.
template <typename T>
void scatter_add_columns(Matrix<T>& target_w, Matrix<T>& target_c, std::span<const TokenId> idx,
                         const Matrix<T>& dw, const Matrix<T>& dc) {
  const auto n = static_cast<Index>(idx.size());
  if (target_c.rows() != 1 || target_c.cols() != target_w.cols() || dw.rows() != target_w.rows() ||
      dw.cols() != n || dc.rows() != 1 || dc.cols() != n)
    throw ShapeError("scatter_add_columns: target " + shape_of(target_w) + ", update " +
                     shape_of(dw) + ", " + std::to_string(n) + " indices");
  check_indices(idx, target_w.cols(), "scatter_add_columns");
  for (Index j = 0; j < n; ++j) {
    target_w.col(idx[j]) += dw.col(j);
    target_c(0, idx[j]) += dc(0, j);
  }
}

/// Word-major counterpart of gather_columns: table is V x H, one row per id.
/// Returns (B x H rows, 1 x B bias).
template <typename T>
std::pair<Matrix<T>, Matrix<T>> gather_rows(const Matrix<T>& table, const Matrix<T>& bias,
                                            std::span<const TokenId> idx) {
  if (bias.rows() != 1 || bias.cols() != table.rows())
    throw ShapeError("gather_rows: " + shape_of(table) + " with bias " + shape_of(bias));
  check_indices(idx, table.rows(), "gather_rows");
  const auto n = static_cast<Index>(idx.size());
  Matrix<T> rows = allocate<T>(n, table.cols());
  Matrix<T> bg = allocate<T>(1, n);
  for (Index j = 0; j < n; ++j) {
    rows.row(j) = table.row(idx[j]);
    bg(0, j) = bias(0, idx[j]);
  }
  return {std::move(rows), std::move(bg)};
}

/// table row idx[j] += scale * rows row j (and the matching bias entry).
template <typename T>
void scatter_add_rows(Matrix<T>& table, Matrix<T>& bias, std::span<const TokenId> idx,
                      const Matrix<T>& rows, const Matrix<T>& dbias, T scale = T(1)) {
  const auto n = static_cast<Index>(idx.size());
  if (bias.rows() != 1 || bias.cols() != table.rows() || rows.cols() != table.cols() ||
      rows.rows() != n || dbias.rows() != 1 || dbias.cols() != n)
    throw ShapeError("scatter_add_rows: table " + shape_of(table) + ", update " + shape_of(rows) +
                     ", " + std::to_string(n) + " indices");
  check_indices(idx, table.rows(), "scatter_add_rows");
  for (Index j = 0; j < n; ++j) {
    table.row(idx[j]) += scale * rows.row(j);
    bias(0, idx[j]) += scale * dbias(0, j);
  }
}

/// A gradient restricted to a set of table rows. ids are unique once
/// coalesced.
template <typename T>
struct SparseRows {
  std::vector<TokenId> ids;
  Matrix<T> rows;
};

/// Sums rows sharing an id. Output ids appear in first-occurrence order and
/// each sum is accumulated in input order, so the result is deterministic.
template <typename T>
SparseRows<T> coalesce(std::span<const TokenId> ids, const Matrix<T>& rows) {
  if (static_cast<Index>(ids.size()) != rows.rows())
    throw ShapeError("coalesce: " + std::to_string(ids.size()) + " ids for " + shape_of(rows));
  std::unordered_map<TokenId, Index> slot;
  slot.reserve(ids.size());
  std::vector<Index> target(ids.size());
  SparseRows<T> out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    auto [it, inserted] = slot.try_emplace(ids[i], static_cast<Index>(out.ids.size()));
    if (inserted) out.ids.push_back(ids[i]);
    target[i] = it->second;
  }
  out.rows = Matrix<T>::Zero(static_cast<Index>(out.ids.size()), rows.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) out.rows.row(target[i]) += rows.row(static_cast<Index>(i));
  return out;
}

template <typename T>
double squared_norm(const Matrix<T>& m) {
  double s = 0.0;
  for (Index i = 0; i < m.size(); ++i) {
    const double v = static_cast<double>(m.data()[i]);
    s += v * v;
  }
  return s;
}

/// Rescales every gradient in place so the joint L2 norm is at most
/// threshold. Returns the norm before clipping.
template <typename T>
double clip_global_norm(std::span<Matrix<T>* const> grads, double threshold) {
  if (!(threshold > 0.0)) throw std::invalid_argument("clip threshold must be positive");
  double total = 0.0;
  for (const Matrix<T>* g : grads) total += squared_norm(*g);
  const double norm = std::sqrt(total);
  if (norm <= threshold || norm == 0.0) return norm;
  const T scale = static_cast<T>(threshold / norm);
  for (Matrix<T>* g : grads) *g *= scale;
  return norm;
}

template <typename T>
std::vector<Matrix<T>> global_norm_clip(std::vector<Matrix<T>> grads, double threshold) {
  std::vector<Matrix<T>*> ptrs;
  ptrs.reserve(grads.size());
  for (auto& g : grads) ptrs.push_back(&g);
  clip_global_norm<T>(ptrs, threshold);
  return grads;
}

template <typename T, typename Rng>
void fill_uniform(Matrix<T>& m, Rng& rng, double lo, double hi) {
  for (Index i = 0; i < m.size(); ++i) {
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    m.data()[i] = static_cast<T>(lo + (hi - lo) * u);
  }
}

}  // namespace bnce
