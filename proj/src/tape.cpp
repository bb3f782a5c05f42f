#include "scoreflow/tape.hpp"

#include <cmath>
#include <stdexcept>
#include <utility>

#include "scoreflow/kernels.hpp"

namespace scoreflow {

Var::Var(Tensor value) : value_(std::make_shared<const Tensor>(std::move(value))) {}

const char* op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Scale: return "scale";
    case Op::AddScalar: return "add_scalar";
    case Op::Square: return "square";
    case Op::Abs: return "abs";
    case Op::Tanh: return "tanh";
    case Op::TanhDeriv: return "tanh_deriv";
    case Op::TanhPoly: return "tanh_poly";
    case Op::MatMul: return "matmul";
    case Op::MatMulNT: return "matmul_nt";
    case Op::Transpose: return "transpose";
    case Op::Linear: return "linear";
    case Op::MatVec: return "matvec";
    case Op::AddRow: return "add_row";
    case Op::MulRow: return "mul_row";
    case Op::Broadcast: return "broadcast";
    case Op::Dot: return "dot";
    case Op::Sum: return "sum";
    case Op::RowSum: return "row_sum";
    case Op::Mean: return "mean";
    case Op::Trace: return "trace";
    case Op::BatchTrace: return "batch_trace";
    case Op::Concat: return "concat";
    case Op::Reshape: return "reshape";
    case Op::SelectRow: return "select_row";
    case Op::BatchMatMul: return "batch_matmul";
    case Op::BatchTranspose: return "batch_transpose";
    case Op::DiagSandwich: return "diag_sandwich";
    case Op::SymFromUpper: return "sym_from_upper";
    case Op::PointwiseMap: return "pointwise_map";
  }
  return "?";
}

Var Tape::leaf(Tensor value) {
  Node node;
  node.op = Op::Leaf;
  node.out = std::make_shared<const Tensor>(std::move(value));
  Var v;
  v.value_ = node.out;
  v.tape_ = this;
  v.id_ = static_cast<int>(nodes_.size());
  leaves_.push_back(v.id_);
  nodes_.push_back(std::move(node));
  return v;
}

Var Tape::record(Node node) {
  Var v;
  v.value_ = node.out;
  v.tape_ = this;
  v.id_ = static_cast<int>(nodes_.size());
  nodes_.push_back(std::move(node));
  return v;
}

void Tape::clear() {
  nodes_.clear();
  leaves_.clear();
}

namespace {

using kernels::active;

[[noreturn]] void shape_error(Op op, const std::string& detail) {
  throw std::invalid_argument(std::string("op ") + op_name(op) + ": " + detail);
}

std::string shapes(const Var& a) { return shape_string(a.shape()); }
std::string shapes(const Var& a, const Var& b) {
  return shape_string(a.shape()) + " and " + shape_string(b.shape());
}

// Builds the node if any input is tracked; otherwise returns a constant.
Var finish(Op op, std::initializer_list<const Var*> inputs, Tensor out,
           std::vector<double> extra = {}, std::shared_ptr<const Tensor> aux = nullptr) {
  Tape* tape = nullptr;
  for (const Var* in : inputs) {
    if (!in->tracked()) continue;
    if (tape != nullptr && in->tape() != tape) shape_error(op, "inputs belong to different tapes");
    tape = in->tape();
  }
  if (tape == nullptr) return Var(std::move(out));
  Tape::Node node;
  node.op = op;
  std::size_t k = 0;
  for (const Var* in : inputs) {
    node.in[k] = in->id();
    node.in_val[k] = in->value_ptr();
    ++k;
  }
  node.out = std::make_shared<const Tensor>(std::move(out));
  node.extra = std::move(extra);
  node.aux = std::move(aux);
  return tape->record(std::move(node));
}

void require_defined(Op op, std::initializer_list<const Var*> inputs) {
  for (const Var* in : inputs)
    if (!in->defined()) shape_error(op, "undefined input");
}

void same_shape(Op op, const Var& a, const Var& b) {
  if (a.shape() != b.shape()) shape_error(op, "shape mismatch " + shapes(a, b));
}

void require_rank(Op op, const Var& a, std::size_t rank, const char* what) {
  if (a.value().rank() != rank) {
    shape_error(op, std::string(what) + " must have rank " + std::to_string(rank) + ", got " +
                        shapes(a));
  }
}

void require_scalar(Op op, const Var& a) {
  if (a.size() != 1) shape_error(op, "expected a one-element tensor, got " + shapes(a));
}

// tanh derivatives from s = tanh(u).
void tanh_derivs(double s, double d[5]) {
  d[0] = s;
  d[1] = 1.0 - s * s;
  d[2] = -2.0 * s * d[1];
  d[3] = -2.0 * d[1] * d[1] - 2.0 * s * d[2];
  d[4] = -6.0 * d[1] * d[2] - 2.0 * s * d[3];
}

}  // namespace

namespace ad {

Var add(const Var& a, const Var& b) {
  require_defined(Op::Add, {&a, &b});
  same_shape(Op::Add, a, b);
  Tensor out(a.shape());
  active().add(out.size(), a.value().data(), b.value().data(), out.data());
  return finish(Op::Add, {&a, &b}, std::move(out));
}

Var sub(const Var& a, const Var& b) {
  require_defined(Op::Sub, {&a, &b});
  same_shape(Op::Sub, a, b);
  Tensor out(a.shape());
  active().sub(out.size(), a.value().data(), b.value().data(), out.data());
  return finish(Op::Sub, {&a, &b}, std::move(out));
}

Var mul(const Var& a, const Var& b) {
  require_defined(Op::Mul, {&a, &b});
  same_shape(Op::Mul, a, b);
  Tensor out(a.shape());
  active().mul(out.size(), a.value().data(), b.value().data(), out.data());
  return finish(Op::Mul, {&a, &b}, std::move(out));
}

Var scale(const Var& a, double c) {
  require_defined(Op::Scale, {&a});
  Tensor out(a.shape());
  active().affine(out.size(), c, a.value().data(), 0.0, out.data());
  return finish(Op::Scale, {&a}, std::move(out), {c});
}

Var add_scalar(const Var& a, double c) {
  require_defined(Op::AddScalar, {&a});
  Tensor out(a.shape());
  active().affine(out.size(), 1.0, a.value().data(), c, out.data());
  return finish(Op::AddScalar, {&a}, std::move(out), {c});
}

Var square(const Var& a) {
  require_defined(Op::Square, {&a});
  Tensor out(a.shape());
  active().mul(out.size(), a.value().data(), a.value().data(), out.data());
  return finish(Op::Square, {&a}, std::move(out));
}

Var abs(const Var& a) {
  require_defined(Op::Abs, {&a});
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::fabs(a.value()[i]);
  return finish(Op::Abs, {&a}, std::move(out));
}

Var tanh(const Var& a) {
  require_defined(Op::Tanh, {&a});
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(a.value()[i]);
  return finish(Op::Tanh, {&a}, std::move(out));
}

Var tanh_deriv(const Var& a, int order) {
  require_defined(Op::TanhDeriv, {&a});
  if (order < 1 || order > 3) shape_error(Op::TanhDeriv, "order must be 1, 2 or 3");
  Tensor out(a.shape());
  double d[5];
  for (std::size_t i = 0; i < out.size(); ++i) {
    tanh_derivs(std::tanh(a.value()[i]), d);
    out[i] = d[order];
  }
  return finish(Op::TanhDeriv, {&a}, std::move(out), {static_cast<double>(order)});
}

Var tanh_poly(const Var& sigma, int order) {
  require_defined(Op::TanhPoly, {&sigma});
  if (order < 1 || order > 3) shape_error(Op::TanhPoly, "order must be 1, 2 or 3");
  Tensor out(sigma.shape());
  double d[5];
  for (std::size_t i = 0; i < out.size(); ++i) {
    tanh_derivs(sigma.value()[i], d);
    out[i] = d[order];
  }
  return finish(Op::TanhPoly, {&sigma}, std::move(out), {static_cast<double>(order)});
}

Var matmul(const Var& a, const Var& b) {
  require_defined(Op::MatMul, {&a, &b});
  require_rank(Op::MatMul, a, 2, "lhs");
  require_rank(Op::MatMul, b, 2, "rhs");
  const std::size_t m = a.shape()[0], n = a.shape()[1], p = b.shape()[1];
  if (b.shape()[0] != n) shape_error(Op::MatMul, "inner dimensions differ " + shapes(a, b));
  Tensor out(Shape{m, p});
  active().gemm_nn(m, n, p, a.value().data(), b.value().data(), out.data(), false);
  return finish(Op::MatMul, {&a, &b}, std::move(out));
}

Var matmul_nt(const Var& a, const Var& b) {
  require_defined(Op::MatMulNT, {&a, &b});
  require_rank(Op::MatMulNT, a, 2, "lhs");
  require_rank(Op::MatMulNT, b, 2, "rhs");
  const std::size_t m = a.shape()[0], n = a.shape()[1], p = b.shape()[0];
  if (b.shape()[1] != n) shape_error(Op::MatMulNT, "inner dimensions differ " + shapes(a, b));
  Tensor out(Shape{m, p});
  active().gemm_nt(m, n, p, a.value().data(), b.value().data(), out.data(), false);
  return finish(Op::MatMulNT, {&a, &b}, std::move(out));
}

Var transpose(const Var& a) {
  require_defined(Op::Transpose, {&a});
  require_rank(Op::Transpose, a, 2, "input");
  const std::size_t r = a.shape()[0], c = a.shape()[1];
  Tensor out(Shape{c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out.at(j, i) = a.value().at(i, j);
  return finish(Op::Transpose, {&a}, std::move(out));
}

Var linear(const Var& x, const Var& w, const Var& b) {
  require_defined(Op::Linear, {&x, &w, &b});
  require_rank(Op::Linear, x, 2, "input");
  require_rank(Op::Linear, w, 2, "weight");
  require_rank(Op::Linear, b, 1, "bias");
  const std::size_t rows = x.shape()[0], n = x.shape()[1], m = w.shape()[0];
  if (w.shape()[1] != n || b.shape()[0] != m) {
    shape_error(Op::Linear, "incompatible shapes " + shapes(x) + ", " + shapes(w) + ", " + shapes(b));
  }
  Tensor out(Shape{rows, m});
  for (std::size_t i = 0; i < rows; ++i)
    std::copy(b.value().data(), b.value().data() + m, out.data() + i * m);
  active().gemm_nt(rows, n, m, x.value().data(), w.value().data(), out.data(), true);
  return finish(Op::Linear, {&x, &w, &b}, std::move(out));
}

Var matvec(const Var& a, const Var& x) {
  require_defined(Op::MatVec, {&a, &x});
  require_rank(Op::MatVec, a, 2, "matrix");
  require_rank(Op::MatVec, x, 1, "vector");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  if (x.shape()[0] != n) shape_error(Op::MatVec, "inner dimensions differ " + shapes(a, x));
  Tensor out(Shape{m});
  active().gemm_nn(m, n, 1, a.value().data(), x.value().data(), out.data(), false);
  return finish(Op::MatVec, {&a, &x}, std::move(out));
}

Var add_row(const Var& x, const Var& r) {
  require_defined(Op::AddRow, {&x, &r});
  require_rank(Op::AddRow, x, 2, "input");
  require_rank(Op::AddRow, r, 1, "row");
  const std::size_t rows = x.shape()[0], m = x.shape()[1];
  if (r.shape()[0] != m) shape_error(Op::AddRow, "row length differs " + shapes(x, r));
  Tensor out(x.shape());
  for (std::size_t i = 0; i < rows; ++i)
    active().add(m, x.value().data() + i * m, r.value().data(), out.data() + i * m);
  return finish(Op::AddRow, {&x, &r}, std::move(out));
}

Var mul_row(const Var& x, const Var& r) {
  require_defined(Op::MulRow, {&x, &r});
  require_rank(Op::MulRow, x, 2, "input");
  require_rank(Op::MulRow, r, 1, "row");
  const std::size_t rows = x.shape()[0], m = x.shape()[1];
  if (r.shape()[0] != m) shape_error(Op::MulRow, "row length differs " + shapes(x, r));
  Tensor out(x.shape());
  for (std::size_t i = 0; i < rows; ++i)
    active().mul(m, x.value().data() + i * m, r.value().data(), out.data() + i * m);
  return finish(Op::MulRow, {&x, &r}, std::move(out));
}

Var broadcast(const Var& a, const Shape& shape) {
  require_defined(Op::Broadcast, {&a});
  require_scalar(Op::Broadcast, a);
  return finish(Op::Broadcast, {&a}, Tensor(shape, a.item()));
}

Var dot(const Var& a, const Var& b) {
  require_defined(Op::Dot, {&a, &b});
  same_shape(Op::Dot, a, b);
  return finish(Op::Dot, {&a, &b},
                Tensor::scalar(active().dot(a.size(), a.value().data(), b.value().data())));
}

Var sum(const Var& a) {
  require_defined(Op::Sum, {&a});
  return finish(Op::Sum, {&a}, Tensor::scalar(active().sum(a.size(), a.value().data())));
}

Var row_sum(const Var& a) {
  require_defined(Op::RowSum, {&a});
  require_rank(Op::RowSum, a, 2, "input");
  const std::size_t rows = a.shape()[0], m = a.shape()[1];
  Tensor out(Shape{rows});
  for (std::size_t i = 0; i < rows; ++i) out[i] = active().sum(m, a.value().data() + i * m);
  return finish(Op::RowSum, {&a}, std::move(out));
}

Var mean(const Var& a) {
  require_defined(Op::Mean, {&a});
  if (a.size() == 0) shape_error(Op::Mean, "empty input");
  const double s = active().sum(a.size(), a.value().data());
  return finish(Op::Mean, {&a}, Tensor::scalar(s / static_cast<double>(a.size())));
}

Var trace(const Var& a) {
  require_defined(Op::Trace, {&a});
  require_rank(Op::Trace, a, 2, "input");
  if (a.shape()[0] != a.shape()[1]) shape_error(Op::Trace, "matrix not square " + shapes(a));
  double t = 0.0;
  for (std::size_t i = 0; i < a.shape()[0]; ++i) t += a.value().at(i, i);
  return finish(Op::Trace, {&a}, Tensor::scalar(t));
}

Var batch_trace(const Var& a) {
  require_defined(Op::BatchTrace, {&a});
  require_rank(Op::BatchTrace, a, 3, "input");
  const std::size_t n = a.shape()[0], d = a.shape()[1];
  if (a.shape()[2] != d) shape_error(Op::BatchTrace, "matrices not square " + shapes(a));
  Tensor out(Shape{n});
  for (std::size_t b = 0; b < n; ++b) {
    double t = 0.0;
    for (std::size_t i = 0; i < d; ++i) t += a.value().at(b, i, i);
    out[b] = t;
  }
  return finish(Op::BatchTrace, {&a}, std::move(out));
}

Var concat(const Var& a, const Var& b) {
  require_defined(Op::Concat, {&a, &b});
  std::vector<double> v(a.value().values());
  v.insert(v.end(), b.value().values().begin(), b.value().values().end());
  return finish(Op::Concat, {&a, &b}, Tensor::vector(std::move(v)));
}

Var reshape(const Var& a, const Shape& shape) {
  require_defined(Op::Reshape, {&a});
  if (shape_size(shape) != a.size()) {
    shape_error(Op::Reshape, "cannot reshape " + shapes(a) + " to " + shape_string(shape));
  }
  return finish(Op::Reshape, {&a}, a.value().reshaped(shape));
}

Var select_row(const Var& a, std::size_t j) {
  require_defined(Op::SelectRow, {&a});
  require_rank(Op::SelectRow, a, 2, "input");
  if (j >= a.shape()[0]) {
    shape_error(Op::SelectRow, "row " + std::to_string(j) + " out of range for " + shapes(a));
  }
  const std::size_t m = a.shape()[1];
  std::vector<double> v(a.value().data() + j * m, a.value().data() + (j + 1) * m);
  return finish(Op::SelectRow, {&a}, Tensor::vector(std::move(v)), {static_cast<double>(j)});
}

Var batch_matmul(const Var& a, const Var& b) {
  require_defined(Op::BatchMatMul, {&a, &b});
  require_rank(Op::BatchMatMul, a, 3, "lhs");
  require_rank(Op::BatchMatMul, b, 3, "rhs");
  const std::size_t n = a.shape()[0], m = a.shape()[1], k = a.shape()[2], p = b.shape()[2];
  if (b.shape()[0] != n || b.shape()[1] != k) {
    shape_error(Op::BatchMatMul, "incompatible shapes " + shapes(a, b));
  }
  Tensor out(Shape{n, m, p});
  for (std::size_t i = 0; i < n; ++i) {
    active().gemm_nn(m, k, p, a.value().data() + i * m * k, b.value().data() + i * k * p,
                     out.data() + i * m * p, false);
  }
  return finish(Op::BatchMatMul, {&a, &b}, std::move(out));
}

Var batch_transpose(const Var& a) {
  require_defined(Op::BatchTranspose, {&a});
  require_rank(Op::BatchTranspose, a, 3, "input");
  const std::size_t n = a.shape()[0], r = a.shape()[1], c = a.shape()[2];
  Tensor out(Shape{n, c, r});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) out.at(b, j, i) = a.value().at(b, i, j);
  return finish(Op::BatchTranspose, {&a}, std::move(out));
}

Var diag_sandwich(const Var& q, const Var& l, const Var& r) {
  require_defined(Op::DiagSandwich, {&q, &l, &r});
  require_rank(Op::DiagSandwich, q, 2, "diagonals");
  require_rank(Op::DiagSandwich, l, 2, "left factor");
  require_rank(Op::DiagSandwich, r, 2, "right factor");
  const std::size_t n = q.shape()[0], k = q.shape()[1], d = l.shape()[0], e = r.shape()[1];
  if (l.shape()[1] != k || r.shape()[0] != k) {
    shape_error(Op::DiagSandwich,
                "incompatible shapes " + shapes(q) + ", " + shapes(l) + ", " + shapes(r));
  }
  Tensor out(Shape{n, d, e});
  std::vector<double> lq(d * k);
  const auto& kt = active();
  for (std::size_t b = 0; b < n; ++b) {
    const double* qb = q.value().data() + b * k;
    for (std::size_t a = 0; a < d; ++a) kt.mul(k, l.value().data() + a * k, qb, lq.data() + a * k);
    kt.gemm_nn(d, k, e, lq.data(), r.value().data(), out.data() + b * d * e, false);
  }
  return finish(Op::DiagSandwich, {&q, &l, &r}, std::move(out));
}

Var sym_from_upper(const Var& u, std::size_t d) {
  require_defined(Op::SymFromUpper, {&u});
  if (u.size() != d * (d + 1) / 2) {
    shape_error(Op::SymFromUpper, "packed length " + std::to_string(u.size()) +
                                      " does not match dimension " + std::to_string(d));
  }
  Tensor out(Shape{d, d});
  std::size_t idx = 0;
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = i; j < d; ++j, ++idx) {
      out.at(i, j) = u.value()[idx];
      out.at(j, i) = u.value()[idx];
    }
  return finish(Op::SymFromUpper, {&u}, std::move(out), {static_cast<double>(d)});
}

Var pointwise_map(const Var& x, std::size_t out_dim, const RowMap& fn) {
  require_defined(Op::PointwiseMap, {&x});
  require_rank(Op::PointwiseMap, x, 2, "input");
  const std::size_t n = x.shape()[0], d = x.shape()[1], e = out_dim;
  Tensor out(Shape{n, e});
  auto jac = std::make_shared<Tensor>(Shape{n, e, d});
  for (std::size_t b = 0; b < n; ++b) {
    fn(x.value().data() + b * d, out.data() + b * e, jac->data() + b * e * d);
  }
  if (!x.tracked()) return Var(std::move(out));
  return finish(Op::PointwiseMap, {&x}, std::move(out), {}, std::move(jac));
}

}  // namespace ad

namespace {

// Accumulates the gradient of one node into its inputs' gradient buffers.
// gi[k] is nullptr when input k is a constant.
void backprop(const Tape::Node& node, const Tensor& g, std::array<Tensor*, 3> gi) {
  const auto& kt = active();
  const Tensor* x0 = node.in_val[0].get();
  const Tensor* x1 = node.in_val[1].get();
  const Tensor* x2 = node.in_val[2].get();
  const Tensor& out = *node.out;
  switch (node.op) {
    case Op::Leaf:
      break;
    case Op::Add:
      if (gi[0]) kt.axpy(g.size(), 1.0, g.data(), gi[0]->data());
      if (gi[1]) kt.axpy(g.size(), 1.0, g.data(), gi[1]->data());
      break;
    case Op::Sub:
      if (gi[0]) kt.axpy(g.size(), 1.0, g.data(), gi[0]->data());
      if (gi[1]) kt.axpy(g.size(), -1.0, g.data(), gi[1]->data());
      break;
    case Op::Mul:
      if (gi[0]) kt.mul_acc(g.size(), g.data(), x1->data(), gi[0]->data());
      if (gi[1]) kt.mul_acc(g.size(), g.data(), x0->data(), gi[1]->data());
      break;
    case Op::Scale:
      if (gi[0]) kt.axpy(g.size(), node.extra[0], g.data(), gi[0]->data());
      break;
    case Op::AddScalar:
    case Op::Reshape:
      if (gi[0]) kt.axpy(g.size(), 1.0, g.data(), gi[0]->data());
      break;
    case Op::Square:
      if (gi[0]) {
        for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += 2.0 * (*x0)[i] * g[i];
      }
      break;
    case Op::Abs:
      if (gi[0]) {
        for (std::size_t i = 0; i < g.size(); ++i) {
          const double v = (*x0)[i];
          (*gi[0])[i] += (v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0)) * g[i];
        }
      }
      break;
    case Op::Tanh:
      if (gi[0]) {
        for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += (1.0 - out[i] * out[i]) * g[i];
      }
      break;
    case Op::TanhDeriv:
      if (gi[0]) {
        const int order = static_cast<int>(node.extra[0]);
        double d[5];
        for (std::size_t i = 0; i < g.size(); ++i) {
          tanh_derivs(std::tanh((*x0)[i]), d);
          (*gi[0])[i] += d[order + 1] * g[i];
        }
      }
      break;
    case Op::TanhPoly:
      if (gi[0]) {
        const int order = static_cast<int>(node.extra[0]);
        for (std::size_t i = 0; i < g.size(); ++i) {
          const double s = (*x0)[i];
          const double d1 = 1.0 - s * s;
          const double d2 = -2.0 * s * d1;
          // d(S_k)/d(sigma) for S_k written as a polynomial in sigma
          double ds = -2.0 * s;
          if (order == 2) ds = -2.0 * d1 + 4.0 * s * s;
          if (order == 3) ds = 12.0 * s * d1 - 2.0 * d2 - 8.0 * s * s * s;
          (*gi[0])[i] += ds * g[i];
        }
      }
      break;
    case Op::MatMul: {
      const std::size_t m = x0->dim(0), n = x0->dim(1), p = x1->dim(1);
      if (gi[0]) kt.gemm_nt(m, p, n, g.data(), x1->data(), gi[0]->data(), true);
      if (gi[1]) kt.gemm_tn(n, m, p, x0->data(), g.data(), gi[1]->data(), true);
      break;
    }
    case Op::MatMulNT: {
      const std::size_t m = x0->dim(0), n = x0->dim(1), p = x1->dim(0);
      if (gi[0]) kt.gemm_nn(m, p, n, g.data(), x1->data(), gi[0]->data(), true);
      if (gi[1]) kt.gemm_tn(p, m, n, g.data(), x0->data(), gi[1]->data(), true);
      break;
    }
    case Op::Transpose:
      if (gi[0]) {
        const std::size_t r = x0->dim(0), c = x0->dim(1);
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) gi[0]->at(i, j) += g.at(j, i);
      }
      break;
    case Op::Linear: {
      const std::size_t rows = x0->dim(0), n = x0->dim(1), m = x1->dim(0);
      if (gi[0]) kt.gemm_nn(rows, m, n, g.data(), x1->data(), gi[0]->data(), true);
      if (gi[1]) kt.gemm_tn(m, rows, n, g.data(), x0->data(), gi[1]->data(), true);
      if (gi[2]) {
        for (std::size_t i = 0; i < rows; ++i) kt.axpy(m, 1.0, g.data() + i * m, gi[2]->data());
      }
      break;
    }
    case Op::MatVec: {
      const std::size_t m = x0->dim(0), n = x0->dim(1);
      if (gi[0]) {
        for (std::size_t i = 0; i < m; ++i) kt.axpy(n, g[i], x1->data(), gi[0]->data() + i * n);
      }
      if (gi[1]) kt.gemm_tn(n, m, 1, x0->data(), g.data(), gi[1]->data(), true);
      break;
    }
    case Op::AddRow: {
      const std::size_t rows = x0->dim(0), m = x0->dim(1);
      if (gi[0]) kt.axpy(g.size(), 1.0, g.data(), gi[0]->data());
      if (gi[1]) {
        for (std::size_t i = 0; i < rows; ++i) kt.axpy(m, 1.0, g.data() + i * m, gi[1]->data());
      }
      break;
    }
    case Op::MulRow: {
      const std::size_t rows = x0->dim(0), m = x0->dim(1);
      for (std::size_t i = 0; i < rows; ++i) {
        if (gi[0]) kt.mul_acc(m, g.data() + i * m, x1->data(), gi[0]->data() + i * m);
        if (gi[1]) kt.mul_acc(m, g.data() + i * m, x0->data() + i * m, gi[1]->data());
      }
      break;
    }
    case Op::Broadcast:
      if (gi[0]) (*gi[0])[0] += kt.sum(g.size(), g.data());
      break;
    case Op::Dot:
      if (gi[0]) kt.axpy(x1->size(), g[0], x1->data(), gi[0]->data());
      if (gi[1]) kt.axpy(x0->size(), g[0], x0->data(), gi[1]->data());
      break;
    case Op::Sum:
      if (gi[0]) {
        for (std::size_t i = 0; i < gi[0]->size(); ++i) (*gi[0])[i] += g[0];
      }
      break;
    case Op::Mean:
      if (gi[0]) {
        const double v = g[0] / static_cast<double>(gi[0]->size());
        for (std::size_t i = 0; i < gi[0]->size(); ++i) (*gi[0])[i] += v;
      }
      break;
    case Op::RowSum:
      if (gi[0]) {
        const std::size_t rows = x0->dim(0), m = x0->dim(1);
        for (std::size_t i = 0; i < rows; ++i)
          for (std::size_t j = 0; j < m; ++j) gi[0]->at(i, j) += g[i];
      }
      break;
    case Op::Trace:
      if (gi[0]) {
        for (std::size_t i = 0; i < x0->dim(0); ++i) gi[0]->at(i, i) += g[0];
      }
      break;
    case Op::BatchTrace:
      if (gi[0]) {
        const std::size_t n = x0->dim(0), d = x0->dim(1);
        for (std::size_t b = 0; b < n; ++b)
          for (std::size_t i = 0; i < d; ++i) gi[0]->at(b, i, i) += g[b];
      }
      break;
    case Op::Concat: {
      const std::size_t na = x0->size();
      if (gi[0]) kt.axpy(na, 1.0, g.data(), gi[0]->data());
      if (gi[1]) kt.axpy(x1->size(), 1.0, g.data() + na, gi[1]->data());
      break;
    }
    case Op::SelectRow:
      if (gi[0]) {
        const std::size_t j = static_cast<std::size_t>(node.extra[0]), m = x0->dim(1);
        kt.axpy(m, 1.0, g.data(), gi[0]->data() + j * m);
      }
      break;
    case Op::BatchMatMul: {
      const std::size_t n = x0->dim(0), m = x0->dim(1), k = x0->dim(2), p = x1->dim(2);
      for (std::size_t b = 0; b < n; ++b) {
        const double* gb = g.data() + b * m * p;
        if (gi[0]) kt.gemm_nt(m, p, k, gb, x1->data() + b * k * p, gi[0]->data() + b * m * k, true);
        if (gi[1]) kt.gemm_tn(k, m, p, x0->data() + b * m * k, gb, gi[1]->data() + b * k * p, true);
      }
      break;
    }
    case Op::BatchTranspose:
      if (gi[0]) {
        const std::size_t n = x0->dim(0), r = x0->dim(1), c = x0->dim(2);
        for (std::size_t b = 0; b < n; ++b)
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) gi[0]->at(b, i, j) += g.at(b, j, i);
      }
      break;
    case Op::DiagSandwich: {
      const Tensor& q = *x0;
      const Tensor& l = *x1;
      const Tensor& r = *x2;
      const std::size_t n = q.dim(0), k = q.dim(1), d = l.dim(0), e = r.dim(1);
      std::vector<double> m(d * k);   // G_b * R^T
      std::vector<double> lg(k * e);  // L^T * G_b
      for (std::size_t b = 0; b < n; ++b) {
        const double* gb = g.data() + b * d * e;
        const double* qb = q.data() + b * k;
        if (gi[0] || gi[1]) {
          kt.gemm_nt(d, e, k, gb, r.data(), m.data(), false);
          if (gi[0]) {
            double* dq = gi[0]->data() + b * k;
            for (std::size_t a = 0; a < d; ++a) kt.mul_acc(k, l.data() + a * k, m.data() + a * k, dq);
          }
          if (gi[1]) {
            for (std::size_t a = 0; a < d; ++a)
              kt.mul_acc(k, qb, m.data() + a * k, gi[1]->data() + a * k);
          }
        }
        if (gi[2]) {
          kt.gemm_tn(k, d, e, l.data(), gb, lg.data(), false);
          for (std::size_t c = 0; c < k; ++c) kt.axpy(e, qb[c], lg.data() + c * e, gi[2]->data() + c * e);
        }
      }
      break;
    }
    case Op::SymFromUpper:
      if (gi[0]) {
        const std::size_t d = static_cast<std::size_t>(node.extra[0]);
        std::size_t idx = 0;
        for (std::size_t i = 0; i < d; ++i)
          for (std::size_t j = i; j < d; ++j, ++idx) {
            (*gi[0])[idx] += g.at(i, j) + (i != j ? g.at(j, i) : 0.0);
          }
      }
      break;
    case Op::PointwiseMap:
      if (gi[0]) {
        const Tensor& jac = *node.aux;
        const std::size_t n = x0->dim(0), d = x0->dim(1), e = out.dim(1);
        for (std::size_t b = 0; b < n; ++b) {
          kt.gemm_tn(d, e, 1, jac.data() + b * e * d, g.data() + b * e, gi[0]->data() + b * d, true);
        }
      }
      break;
  }
}

}  // namespace

std::vector<Tensor> Tape::backward(const Var& loss) const {
  if (!loss.defined() || loss.size() != 1) {
    throw std::invalid_argument("backward: loss must hold exactly one element, got " +
                                (loss.defined() ? shape_string(loss.shape()) : std::string("undefined")));
  }
  std::vector<Tensor> result;
  result.reserve(leaves_.size());
  if (loss.tape() != this) {
    for (int id : leaves_) result.emplace_back(nodes_[static_cast<std::size_t>(id)].out->shape());
    return result;
  }

  std::vector<Tensor> grads(nodes_.size());
  std::vector<char> has(nodes_.size(), 0);
  const auto root = static_cast<std::size_t>(loss.id());
  grads[root] = Tensor(nodes_[root].out->shape(), 1.0);
  has[root] = 1;

  for (std::size_t i = root + 1; i-- > 0;) {
    if (!has[i]) continue;
    const Node& node = nodes_[i];
    if (node.op == Op::Leaf) continue;
    std::array<Tensor*, 3> gi{nullptr, nullptr, nullptr};
    for (std::size_t k = 0; k < 3; ++k) {
      const int in = node.in[k];
      if (in < 0) continue;
      const auto u = static_cast<std::size_t>(in);
      if (!has[u]) {
        grads[u] = Tensor(nodes_[u].out->shape());
        has[u] = 1;
      }
      gi[k] = &grads[u];
    }
    backprop(node, grads[i], gi);
    grads[i] = Tensor();
  }

  for (int id : leaves_) {
    const auto u = static_cast<std::size_t>(id);
    if (has[u]) {
      result.push_back(std::move(grads[u]));
    } else {
      result.emplace_back(nodes_[u].out->shape());
    }
  }
  return result;
}

}  // namespace scoreflow
