#pragma once

#include <functional>
#include <span>
#include <vector>

#include <Eigen/Dense>

namespace shev::ad {

using Matrix = Eigen::MatrixXd;

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const { return value()(0, 0); }
  Tape* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* t, int id) : tape_(t), id_(id) {}
  Tape* tape_ = nullptr;
  int id_ = -1;
};

/// Reverse-mode differentiation over dense matrices. Rows index the batch.
class Tape {
 public:
  using Backward = std::function<void(const Matrix& grad)>;

  Var constant(Matrix v);
  Var variable(Matrix v);
  // Leaf whose gradient is added into *sink by backward(); nullptr sink means constant.
  // The value is referenced, not copied: `v` must outlive the tape unchanged.
  Var param(const Matrix& v, Matrix* sink);

  Var push(Matrix value, std::initializer_list<Var> parents, Backward back);
  Var push(Matrix value, std::span<const Var> parents, Backward back);

  void backward(Var loss);
  const Matrix& value(int id) const {
    const auto& n = nodes_[static_cast<std::size_t>(id)];
    return n.ref ? *n.ref : n.value;
  }
  // Gradient of the last backward() target w.r.t. a node (zero matrix if unreached).
  Matrix grad(Var v) const;
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }
  void accumulate(int id, const Matrix& g);
  // grad.row(idx[i]) += g.row(i)
  void accumulate_rows(int id, const std::vector<Eigen::Index>& idx, const Matrix& g);
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool needs_grad = false;
    Matrix* sink = nullptr;
    const Matrix* ref = nullptr;
    Backward back;
  };
  std::vector<Node> nodes_;
};

// Elementwise and linear-algebra primitives.
Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var add_rowvec(Var x, Var b);  // broadcast a 1 x d row over every row of x
Var relu(Var a);
Var tanh(Var a);
Var sigmoid(Var a);
Var exp(Var a);
Var square(Var a);
Var clamp(Var a, double lo, double hi);  // zero gradient outside [lo, hi]
Var minimum(Var a, Var b);
Var sum(Var a);       // -> 1 x 1
Var mean(Var a);      // -> 1 x 1
Var row_sum(Var a);   // n x d -> n x 1
Var transpose(Var a);
Var slice_cols(Var a, Eigen::Index start, Eigen::Index count);
Var slice_rows(Var a, Eigen::Index start, Eigen::Index count);
Var hcat(std::span<const Var> parts);
Var vcat(std::span<const Var> parts);
// Row i of the result is row idx[i] of `a`; gradients scatter-add back.
Var gather_rows(Var a, std::vector<Eigen::Index> idx);
// log(1 - tanh(u)^2 + eps), elementwise.
Var squash_log_det(Var u, double eps);
// Row-wise layer normalization with learned gain/bias (both 1 x d).
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
// Multi-head causal self-attention core over `batch` sequences of length `seq`
// stacked row-wise: softmax(QK^T/sqrt(dh) + causal mask) V, heads split by columns.
Var causal_attention(Var q, Var k, Var v, int batch, int seq, int heads);

}  // namespace shev::ad
