#pragma once

// Velocity fields f(t, z; theta) and their exact spatial derivatives.
//
// Two routes exist for every field:
//  * eval / spatial_derivatives: one point, plain doubles (Eigen). Used by
//    oracles, metrics and finite-difference checks.
//  * bind(tape)->evaluate(t, j, Z): a batch of particles as tape ops, so the
//    parameter dependence of f and of every derivative term is differentiable.

#include <Eigen/Dense>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "scoreflow/tape.hpp"
#include "scoreflow/tensor.hpp"

namespace scoreflow {

// Terms needed to move (z, l, s) one step, without the second-order parts.
struct FirstOrderTerms {
  Eigen::VectorXd f;
  double div = 0.0;
  Eigen::VectorXd grad_div;
  Eigen::VectorXd jac_t_s;  // jac^T s
};

struct SpatialDerivatives {
  Eigen::MatrixXd jac;                         // d x d, jac(i, k) = d f_i / d z_k
  double div = 0.0;
  Eigen::VectorXd grad_div;                    // d
  std::vector<Eigen::MatrixXd> comp_hessians;  // d matrices, d x d
  Eigen::MatrixXd hess_div;                    // d x d
};

// Field quantities for a batch Z[N x d] at one grid time.
class FieldEvaluation {
 public:
  virtual ~FieldEvaluation() = default;
  virtual const Var& value() const = 0;  // [N x d]
  virtual Var divergence() const = 0;    // [N]
  // [N x d]; an undefined Var means identically zero.
  virtual Var grad_divergence() const = 0;
  // jac^T s per particle, s[N x d] -> [N x d]
  virtual Var jac_t_times(const Var& s) const = 0;
  // sum_i s_i hess(f_i) + hess(div) + H jac + jac^T H, H[N x d x d] -> [N x d x d]
  virtual Var hessian_rhs(const Var& s, const Var& h) const = 0;
};

class BoundField {
 public:
  virtual ~BoundField() = default;
  // t is the absolute time, j its grid index within the field's horizon.
  virtual std::unique_ptr<FieldEvaluation> evaluate(double t, std::size_t j, const Var& z) const = 0;
  // Parameter Vars in params() order (leaves when bound to a tape).
  virtual const std::vector<Var>& params() const = 0;
};

class VelocityField {
 public:
  virtual ~VelocityField() = default;

  virtual std::string kind() const = 0;
  virtual std::size_t dim() const = 0;
  virtual std::vector<Tensor>& params() = 0;
  virtual const std::vector<Tensor>& params() const = 0;
  virtual std::vector<std::string> param_names() const = 0;
  virtual std::unique_ptr<VelocityField> clone() const = 0;

  // tape == nullptr binds the parameters as constants.
  virtual std::unique_ptr<BoundField> bind(Tape* tape) const = 0;

  virtual Eigen::VectorXd eval(double t, const Eigen::VectorXd& z) const = 0;
  virtual SpatialDerivatives spatial_derivatives(double t, const Eigen::VectorXd& z) const = 0;
  // O(k d) for the MLP: no Jacobian is formed.
  virtual FirstOrderTerms first_order(double t, const Eigen::VectorXd& z,
                                      const Eigen::VectorXd& s) const = 0;
  virtual Eigen::MatrixXd jacobian(double t, const Eigen::VectorXd& z) const = 0;

  std::size_t param_count() const;
  // Sum of squares of all parameters.
  double param_norm2() const;
};

// f = w2 tanh(w0 t + w1 z + b1) + b2
class MlpField final : public VelocityField {
 public:
  MlpField(std::size_t dim, std::size_t width);
  // Uniform(+-1/sqrt(fan_in)) weights, zero biases.
  MlpField(std::size_t dim, std::size_t width, std::uint64_t seed);

  std::string kind() const override { return "mlp"; }
  std::size_t dim() const override { return d_; }
  std::size_t width() const { return k_; }
  std::vector<Tensor>& params() override { return params_; }
  const std::vector<Tensor>& params() const override { return params_; }
  std::vector<std::string> param_names() const override;
  std::unique_ptr<VelocityField> clone() const override;
  std::unique_ptr<BoundField> bind(Tape* tape) const override;

  Eigen::VectorXd eval(double t, const Eigen::VectorXd& z) const override;
  SpatialDerivatives spatial_derivatives(double t, const Eigen::VectorXd& z) const override;
  FirstOrderTerms first_order(double t, const Eigen::VectorXd& z,
                              const Eigen::VectorXd& s) const override;
  Eigen::MatrixXd jacobian(double t, const Eigen::VectorXd& z) const override;

  Tensor& w0() { return params_[0]; }
  Tensor& w1() { return params_[1]; }
  Tensor& w2() { return params_[2]; }
  Tensor& b1() { return params_[3]; }
  Tensor& b2() { return params_[4]; }

 private:
  std::size_t d_;
  std::size_t k_;
  std::vector<Tensor> params_;  // w0[k], w1[k x d], w2[d x k], b1[k], b2[d]
};

// psi(t_j, x) = 1/2 x^T A_j x + B_j^T x + C_j on the grid t_j = t0 + j dt,
// f = grad psi (minus a x when ou_rate a > 0). A_j is stored as its packed
// upper triangle, so every materialized A_j is exactly symmetric.
class QuadraticPsiField final : public VelocityField {
 public:
  QuadraticPsiField(std::size_t dim, std::size_t n_steps, double dt, double t0 = 0.0,
                    double ou_rate = 0.0);

  std::string kind() const override { return "quadratic"; }
  std::size_t dim() const override { return d_; }
  std::size_t n_steps() const { return n_steps_; }
  double dt() const { return dt_; }
  double t0() const { return t0_; }
  double ou_rate() const { return ou_rate_; }
  std::vector<Tensor>& params() override { return params_; }
  const std::vector<Tensor>& params() const override { return params_; }
  std::vector<std::string> param_names() const override;
  std::unique_ptr<VelocityField> clone() const override;
  std::unique_ptr<BoundField> bind(Tape* tape) const override;

  Eigen::VectorXd eval(double t, const Eigen::VectorXd& z) const override;
  SpatialDerivatives spatial_derivatives(double t, const Eigen::VectorXd& z) const override;
  FirstOrderTerms first_order(double t, const Eigen::VectorXd& z,
                              const Eigen::VectorXd& s) const override;
  Eigen::MatrixXd jacobian(double t, const Eigen::VectorXd& z) const override;

  // Grid index of t; throws when t is not a grid time.
  std::size_t grid_index(double t) const;

  Eigen::MatrixXd A(std::size_t j) const;
  Eigen::VectorXd B(std::size_t j) const;
  double C(std::size_t j) const;
  void set_A(std::size_t j, const Eigen::MatrixXd& a);
  void set_B(std::size_t j, const Eigen::VectorXd& b);
  void set_C(std::size_t j, double c);
  double psi(std::size_t j, const Eigen::VectorXd& x) const;

 private:
  std::size_t d_;
  std::size_t n_steps_;
  double dt_;
  double t0_;
  double ou_rate_;
  std::vector<Tensor> params_;  // A[(N+1) x d(d+1)/2], B[(N+1) x d], C[(N+1) x 1]
};

// Batched psi access on a bound quadratic field (for the HJB residuals).
class BoundQuadratic : public BoundField {
 public:
  virtual Var A(std::size_t j) const = 0;  // [d x d]
  virtual Var B(std::size_t j) const = 0;  // [d]
  virtual Var psi(std::size_t j, const Var& z) const = 0;       // [N]
  virtual Var grad_psi(std::size_t j, const Var& z) const = 0;  // [N x d]
};

std::unique_ptr<BoundQuadratic> bind_quadratic(const QuadraticPsiField& field, Tape* tape);

}  // namespace scoreflow
