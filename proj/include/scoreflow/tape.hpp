#pragma once

// Reverse-mode differentiation over a fixed vocabulary of dense ops.
//
// A Var is an immutable tensor value plus, optionally, the id of the tape node
// that produced it. Ops whose inputs are all constants (no tape) compute the
// value and record nothing, so gradient-free rollouts share the same code and
// cost no tape memory. Each Tape::backward walks the node list once in reverse.

#include <array>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "scoreflow/tensor.hpp"

namespace scoreflow {

class Tape;

class Var {
 public:
  Var() = default;
  // Constant (untracked) value.
  explicit Var(Tensor value);

  const Tensor& value() const { return *value_; }
  const std::shared_ptr<const Tensor>& value_ptr() const { return value_; }
  const Shape& shape() const { return value_->shape(); }
  std::size_t size() const { return value_->size(); }
  bool defined() const { return value_ != nullptr; }
  bool tracked() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  int id() const { return id_; }
  double item() const { return value_->item(); }

 private:
  friend class Tape;
  std::shared_ptr<const Tensor> value_;
  Tape* tape_ = nullptr;
  int id_ = -1;
};

enum class Op {
  Leaf,
  Add,
  Sub,
  Mul,
  Scale,
  AddScalar,
  Square,
  Abs,
  Tanh,
  TanhDeriv,
  TanhPoly,
  MatMul,
  MatMulNT,
  Transpose,
  Linear,
  MatVec,
  AddRow,
  MulRow,
  Broadcast,
  Dot,
  Sum,
  RowSum,
  Mean,
  Trace,
  BatchTrace,
  Concat,
  Reshape,
  SelectRow,
  BatchMatMul,
  BatchTranspose,
  DiagSandwich,
  SymFromUpper,
  PointwiseMap,
};

const char* op_name(Op op);

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Registers a trainable parameter. Gradients come back in registration order.
  Var leaf(Tensor value);

  // d loss / d leaf for every registered leaf; zero for leaves the loss does
  // not depend on. The loss must hold exactly one element.
  std::vector<Tensor> backward(const Var& loss) const;

  std::size_t node_count() const { return nodes_.size(); }
  std::size_t leaf_count() const { return leaves_.size(); }
  void clear();

  struct Node {
    Op op = Op::Leaf;
    std::array<int, 3> in{-1, -1, -1};
    std::array<std::shared_ptr<const Tensor>, 3> in_val;
    std::shared_ptr<const Tensor> out;
    std::vector<double> extra;
    std::shared_ptr<const Tensor> aux;
  };

  // Used by the op layer: appends a node when any input is tracked on this tape.
  Var record(Node node);

 private:
  std::vector<Node> nodes_;
  std::vector<int> leaves_;
};

namespace ad {

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double c);
Var add_scalar(const Var& a, double c);
Var square(const Var& a);
Var abs(const Var& a);
Var tanh(const Var& a);
// order-th derivative of tanh evaluated at a, order in 1..3.
Var tanh_deriv(const Var& a, int order);
// Same derivative given sigma = tanh(a) instead of a.
Var tanh_poly(const Var& sigma, int order);

// [m x n] * [n x p]
Var matmul(const Var& a, const Var& b);
// [m x n] * [p x n]^T
Var matmul_nt(const Var& a, const Var& b);
Var transpose(const Var& a);
// x[N x n] * w[m x n]^T + b[m]
Var linear(const Var& x, const Var& w, const Var& b);
// [m x n] * [n]
Var matvec(const Var& a, const Var& x);
// x[N x m] + r[m] on every row
Var add_row(const Var& x, const Var& r);
// x[N x m] * r[m] on every row
Var mul_row(const Var& x, const Var& r);
// one-element a copied into the given shape
Var broadcast(const Var& a, const Shape& shape);

Var dot(const Var& a, const Var& b);
Var sum(const Var& a);
// [N x m] -> [N]
Var row_sum(const Var& a);
Var mean(const Var& a);
Var trace(const Var& a);
// [N x d x d] -> [N]
Var batch_trace(const Var& a);
// Flattened concatenation of two tensors.
Var concat(const Var& a, const Var& b);
Var reshape(const Var& a, const Shape& shape);
// Row j of a matrix, as a vector.
Var select_row(const Var& a, std::size_t j);

// [N x m x n] * [N x n x p]
Var batch_matmul(const Var& a, const Var& b);
Var batch_transpose(const Var& a);
// out[n] = L * diag(q[n]) * R with q[N x k], L[d x k], R[k x e] -> [N x d x e]
Var diag_sandwich(const Var& q, const Var& l, const Var& r);
// packed upper triangle (row-major, length d(d+1)/2) -> symmetric [d x d]
Var sym_from_upper(const Var& u, std::size_t d);

// Row-wise map x[N x d] -> y[N x e]. fn fills y (e values) and the e x d
// Jacobian for one row.
using RowMap = std::function<void(const double* x, double* y, double* jac)>;
Var pointwise_map(const Var& x, std::size_t out_dim, const RowMap& fn);

}  // namespace ad
}  // namespace scoreflow
