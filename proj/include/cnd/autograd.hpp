#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// matrices. Every trainable piece of the model is expressed with these ops;
// frozen computations (encoder, text backbone) run through the same ops with
// constant leaves, in which case no backward closures are recorded.

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <vector>

namespace cnd {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;
using Index = Eigen::Index;

namespace ad {

struct Node {
  Mat value;
  Mat grad;  // empty until something flows into it
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  void accumulate(const Mat& g);
  bool has_grad() const { return grad.size() != 0; }
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Var constant(Mat value);
  /// A leaf; when `requires_grad` the gradient accumulates across backward calls.
  static Var leaf(Mat value, bool requires_grad);

  bool defined() const { return node_ != nullptr; }
  const Mat& value() const { return node_->value; }
  /// Mutable access for leaves only (optimizer updates, checkpoint load).
  Mat& mutable_value() { return node_->value; }
  const Mat& grad() const { return node_->grad; }
  bool has_grad() const { return node_->has_grad(); }
  void zero_grad();
  bool requires_grad() const { return node_ && node_->requires_grad; }
  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  double scalar() const;
  /// Same value, cut from the graph.
  Var detach() const { return constant(value()); }

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Seeds d(root)/d(root) = 1 and propagates to every reachable leaf.
void backward(const Var& root);

// Elementwise and broadcasting arithmetic.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var neg(const Var& a);
/// a (n x m) + row (1 x m) broadcast down the rows.
Var add_row(const Var& a, const Var& row);
/// a (n x m) + col (n x 1) broadcast across the columns.
Var add_col(const Var& a, const Var& col);
/// a (n x m) with row r multiplied by col(r).
Var mul_col(const Var& a, const Var& col);
/// a times a 1x1 variable.
Var mul_scalar(const Var& a, const Var& s);
Var reciprocal(const Var& a);
Var sqrt(const Var& a);
Var square(const Var& a);
Var tanh(const Var& a);
Var gelu(const Var& a);
/// log(1 + exp(x)), overflow-safe.
Var softplus(const Var& a);
/// (1 + tanh(x)) / 2 with a derivative that stays nonzero far into saturation.
Var tanh_gate(const Var& a);

// Linear algebra.
Var matmul(const Var& a, const Var& b);
/// a * b^T
Var matmul_bt(const Var& a, const Var& b);

// Reductions.
Var sum(const Var& a);
Var mean(const Var& a);
/// Column sums: (n x m) -> (1 x m).
Var sum_rows(const Var& a);
/// Per-row dot product: (n x m),(n x m) -> (n x 1).
Var rowwise_dot(const Var& a, const Var& b);
Var frobenius_norm(const Var& a);
/// Sum of all entries in each run of `segment_rows` rows: (B*s x m) -> (B x 1).
Var segment_sum(const Var& a, Index segment_rows);
/// Repeats row b of `col` (B x 1) `segment_rows` times: -> (B*s x 1).
Var expand_segments(const Var& col, Index segment_rows);
/// Divides each row by its L2 norm.
Var normalize_rows(const Var& a);

// Structural.
Var concat_cols(std::span<const Var> parts);
Var concat_rows(std::span<const Var> parts);
Var slice_rows(const Var& a, Index start, Index count);
Var gather_rows(const Var& a, std::span<const Index> rows);
/// Rows of `a` taken at a fixed stride: rows offset, offset+stride, ...
Var strided_rows(const Var& a, Index offset, Index stride, Index count);

// Neural-network building blocks.
Var softmax_rows(const Var& a);
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
/// Multi-head scaled dot-product self-attention over independent segments of
/// `segment_len` consecutive rows. q, k, v are (n x C) with n % segment_len == 0.
Var attention(const Var& q, const Var& k, const Var& v, int heads, Index segment_len);

/// Keeps the top-k entries of each row (ties to the lower column), renormalized
/// to sum to one; all other entries are zero. `selected` receives the chosen
/// columns, k per row, highest score first.
Var topk_renormalize(const Var& scores, int k, std::vector<Index>* selected);
/// out (n_out x m) with out[rows[j]] += weights(rows[j], column) * y[j].
Var scatter_rows_weighted(const Var& y, std::span<const Index> rows, const Var& weights, Index column,
                          Index n_out);

}  // namespace ad
}  // namespace cnd
