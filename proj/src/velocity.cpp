#include "scoreflow/velocity.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

namespace scoreflow {

std::size_t VelocityField::param_count() const {
  std::size_t n = 0;
  for (const Tensor& p : params()) n += p.size();
  return n;
}

double VelocityField::param_norm2() const {
  double s = 0.0;
  for (const Tensor& p : params())
    for (double v : p.values()) s += v * v;
  return s;
}

namespace {

std::vector<Var> bind_params(const std::vector<Tensor>& params, Tape* tape) {
  std::vector<Var> out;
  out.reserve(params.size());
  for (const Tensor& p : params) out.push_back(tape ? tape->leaf(p) : Var(p));
  return out;
}

// ---------------------------------------------------------------- MLP

class MlpEvaluation final : public FieldEvaluation {
 public:
  MlpEvaluation(const std::vector<Var>& p, const Var& c, const Var& w1t, Var u, Var s)
      : p_(p), c_(c), w1t_(w1t), u_(std::move(u)), sigma_(std::move(s)) {
    f_ = ad::linear(sigma_, p_[2], p_[4]);
  }

  const Var& value() const override { return f_; }

  Var divergence() const override { return ad::matvec(s1(), c_); }

  Var grad_divergence() const override { return ad::matmul(ad::mul_row(s2(), c_), p_[1]); }

  Var jac_t_times(const Var& s) const override {
    return ad::matmul(ad::mul(s_w2(s), s1()), p_[1]);
  }

  Var hessian_rhs(const Var& s, const Var& h) const override {
    const Var q = ad::add(ad::mul(s_w2(s), s2()), ad::mul_row(s3(), c_));
    const Var second = ad::diag_sandwich(q, w1t_, p_[1]);
    const Var jac = ad::diag_sandwich(s1(), p_[2], p_[1]);
    const Var hj = ad::batch_matmul(h, jac);
    return ad::add(second, ad::add(hj, ad::batch_transpose(hj)));
  }

 private:
  const Var& s1() const {
    if (!s1_.defined()) s1_ = ad::tanh_poly(sigma_, 1);
    return s1_;
  }
  const Var& s2() const {
    if (!s2_.defined()) s2_ = ad::tanh_poly(sigma_, 2);
    return s2_;
  }
  const Var& s3() const {
    if (!s3_.defined()) s3_ = ad::tanh_poly(sigma_, 3);
    return s3_;
  }
  // s * w2 for the score currently being propagated.
  const Var& s_w2(const Var& s) const {
    if (!sw2_.defined() || sw2_src_ != s.value_ptr()) {
      sw2_ = ad::matmul(s, p_[2]);
      sw2_src_ = s.value_ptr();
    }
    return sw2_;
  }

  const std::vector<Var>& p_;
  const Var& c_;
  const Var& w1t_;
  Var u_;
  Var sigma_;
  Var f_;
  mutable Var s1_, s2_, s3_, sw2_;
  mutable std::shared_ptr<const Tensor> sw2_src_;
};

class BoundMlp final : public BoundField {
 public:
  BoundMlp(const MlpField& field, Tape* tape) : p_(bind_params(field.params(), tape)) {
    c_ = ad::row_sum(ad::mul(p_[1], ad::transpose(p_[2])));
    w1t_ = ad::transpose(p_[1]);
  }

  std::unique_ptr<FieldEvaluation> evaluate(double t, std::size_t, const Var& z) const override {
    const Var bias = ad::add(ad::scale(p_[0], t), p_[3]);
    Var u = ad::linear(z, p_[1], bias);
    Var s = ad::tanh(u);
    return std::make_unique<MlpEvaluation>(p_, c_, w1t_, std::move(u), std::move(s));
  }

  const std::vector<Var>& params() const override { return p_; }

 private:
  std::vector<Var> p_;
  Var c_;
  Var w1t_;
};

// ---------------------------------------------------------------- quadratic

class QuadraticEvaluation final : public FieldEvaluation {
 public:
  QuadraticEvaluation(Var a, const Var& b, const Var& z, double rate, std::size_t d)
      : a_(std::move(a)), rate_(rate), d_(d) {
    f_ = ad::add_row(ad::matmul(z, a_), b);
    if (rate_ != 0.0) f_ = ad::sub(f_, ad::scale(z, rate_));
    n_ = z.shape()[0];
  }

  const Var& value() const override { return f_; }

  Var divergence() const override {
    const Var tr = ad::add_scalar(ad::trace(a_), -rate_ * static_cast<double>(d_));
    return ad::broadcast(tr, Shape{n_});
  }

  Var grad_divergence() const override { return Var(); }

  Var jac_t_times(const Var& s) const override {
    Var out = ad::matmul(s, a_);
    if (rate_ != 0.0) out = ad::sub(out, ad::scale(s, rate_));
    return out;
  }

  Var hessian_rhs(const Var&, const Var& h) const override {
    Var jac = a_;
    if (rate_ != 0.0) {
      Tensor shift(Shape{d_, d_});
      for (std::size_t i = 0; i < d_; ++i) shift.at(i, i) = rate_;
      jac = ad::sub(a_, Var(std::move(shift)));
    }
    const Var flat = ad::reshape(h, Shape{n_ * d_, d_});
    const Var hj = ad::reshape(ad::matmul(flat, jac), Shape{n_, d_, d_});
    return ad::add(hj, ad::batch_transpose(hj));
  }

 private:
  Var a_;
  double rate_;
  std::size_t d_;
  std::size_t n_ = 0;
  Var f_;
};

class BoundQuadraticImpl final : public BoundQuadratic {
 public:
  BoundQuadraticImpl(const QuadraticPsiField& field, Tape* tape)
      : field_(field), p_(bind_params(field.params(), tape)) {}

  std::unique_ptr<FieldEvaluation> evaluate(double t, std::size_t j, const Var& z) const override {
    check(t, j);
    return std::make_unique<QuadraticEvaluation>(A(j), B(j), z, field_.ou_rate(), field_.dim());
  }

  const std::vector<Var>& params() const override { return p_; }

  Var A(std::size_t j) const override {
    return ad::sym_from_upper(ad::select_row(p_[0], j), field_.dim());
  }
  Var B(std::size_t j) const override { return ad::select_row(p_[1], j); }

  Var psi(std::size_t j, const Var& z) const override {
    const Var za = ad::matmul(z, A(j));
    const Var quad = ad::scale(ad::row_sum(ad::mul(za, z)), 0.5);
    const Var lin = ad::matvec(z, B(j));
    const Var c = ad::broadcast(ad::select_row(p_[2], j), Shape{z.shape()[0]});
    return ad::add(ad::add(quad, lin), c);
  }

  Var grad_psi(std::size_t j, const Var& z) const override {
    return ad::add_row(ad::matmul(z, A(j)), B(j));
  }

 private:
  void check(double t, std::size_t j) const {
    if (field_.grid_index(t) != j) {
      throw std::invalid_argument("quadratic field: time " + std::to_string(t) +
                                  " is not grid point " + std::to_string(j));
    }
  }

  const QuadraticPsiField& field_;
  std::vector<Var> p_;
};

}  // namespace

// ---------------------------------------------------------------- MlpField

MlpField::MlpField(std::size_t dim, std::size_t width) : d_(dim), k_(width) {
  if (dim == 0 || width == 0) throw std::invalid_argument("mlp field: dim and width must be >= 1");
  params_ = {Tensor(Shape{k_}), Tensor(Shape{k_, d_}), Tensor(Shape{d_, k_}), Tensor(Shape{k_}),
             Tensor(Shape{d_})};
}

MlpField::MlpField(std::size_t dim, std::size_t width, std::uint64_t seed) : MlpField(dim, width) {
  std::mt19937_64 rng(seed);
  const double in_bound = 1.0 / std::sqrt(static_cast<double>(d_ + 1));
  const double out_bound = 1.0 / std::sqrt(static_cast<double>(k_));
  std::uniform_real_distribution<double> in_dist(-in_bound, in_bound);
  std::uniform_real_distribution<double> out_dist(-out_bound, out_bound);
  for (double& v : params_[0].values()) v = in_dist(rng);
  for (double& v : params_[1].values()) v = in_dist(rng);
  for (double& v : params_[2].values()) v = out_dist(rng);
}

std::vector<std::string> MlpField::param_names() const { return {"w0", "w1", "w2", "b1", "b2"}; }

std::unique_ptr<VelocityField> MlpField::clone() const { return std::make_unique<MlpField>(*this); }

std::unique_ptr<BoundField> MlpField::bind(Tape* tape) const {
  return std::make_unique<BoundMlp>(*this, tape);
}

Eigen::VectorXd MlpField::eval(double t, const Eigen::VectorXd& z) const {
  Eigen::VectorXd out = Eigen::Map<const Eigen::VectorXd>(params_[4].data(), d_);
  for (std::size_t k = 0; k < k_; ++k) {
    double u = params_[0][k] * t + params_[3][k];
    for (std::size_t i = 0; i < d_; ++i) u += params_[1].at(k, i) * z[i];
    const double s = std::tanh(u);
    for (std::size_t i = 0; i < d_; ++i) out[i] += params_[2].at(i, k) * s;
  }
  return out;
}

SpatialDerivatives MlpField::spatial_derivatives(double t, const Eigen::VectorXd& z) const {
  SpatialDerivatives r;
  const auto d = static_cast<Eigen::Index>(d_);
  r.jac = Eigen::MatrixXd::Zero(d, d);
  r.grad_div = Eigen::VectorXd::Zero(d);
  r.comp_hessians.assign(d_, Eigen::MatrixXd::Zero(d, d));
  r.hess_div = Eigen::MatrixXd::Zero(d, d);
  Eigen::VectorXd row(d);
  for (std::size_t k = 0; k < k_; ++k) {
    double u = params_[0][k] * t + params_[3][k];
    for (std::size_t i = 0; i < d_; ++i) {
      row[static_cast<Eigen::Index>(i)] = params_[1].at(k, i);
      u += params_[1].at(k, i) * z[static_cast<Eigen::Index>(i)];
    }
    const double s = std::tanh(u);
    const double s1 = 1.0 - s * s;
    const double s2 = -2.0 * s * s1;
    const double s3 = -2.0 * s1 * s1 - 2.0 * s * s2;
    double c = 0.0;
    for (std::size_t i = 0; i < d_; ++i) c += params_[1].at(k, i) * params_[2].at(i, k);
    const Eigen::MatrixXd outer = row * row.transpose();
    for (std::size_t i = 0; i < d_; ++i) {
      const auto ii = static_cast<Eigen::Index>(i);
      r.jac.row(ii) += params_[2].at(i, k) * s1 * row.transpose();
      r.comp_hessians[i] += params_[2].at(i, k) * s2 * outer;
    }
    r.div += s1 * c;
    r.grad_div += s2 * c * row;
    r.hess_div += s3 * c * outer;
  }
  return r;
}

FirstOrderTerms MlpField::first_order(double t, const Eigen::VectorXd& z,
                                      const Eigen::VectorXd& s) const {
  const auto d = static_cast<Eigen::Index>(d_);
  FirstOrderTerms r;
  r.f = Eigen::Map<const Eigen::VectorXd>(params_[4].data(), d);
  r.grad_div = Eigen::VectorXd::Zero(d);
  r.jac_t_s = Eigen::VectorXd::Zero(d);
  for (std::size_t k = 0; k < k_; ++k) {
    const double* w1row = params_[1].data() + k * d_;
    double u = params_[0][k] * t + params_[3][k];
    double c = 0.0;
    double sw2 = 0.0;
    for (std::size_t i = 0; i < d_; ++i) {
      u += w1row[i] * z[static_cast<Eigen::Index>(i)];
      c += w1row[i] * params_[2].at(i, k);
      sw2 += s[static_cast<Eigen::Index>(i)] * params_[2].at(i, k);
    }
    const double sg = std::tanh(u);
    const double s1 = 1.0 - sg * sg;
    const double s2 = -2.0 * sg * s1;
    r.div += s1 * c;
    for (std::size_t i = 0; i < d_; ++i) {
      const auto ii = static_cast<Eigen::Index>(i);
      r.f[ii] += params_[2].at(i, k) * sg;
      r.grad_div[ii] += s2 * c * w1row[i];
      r.jac_t_s[ii] += sw2 * s1 * w1row[i];
    }
  }
  return r;
}

Eigen::MatrixXd MlpField::jacobian(double t, const Eigen::VectorXd& z) const {
  const auto d = static_cast<Eigen::Index>(d_);
  Eigen::MatrixXd jac = Eigen::MatrixXd::Zero(d, d);
  for (std::size_t k = 0; k < k_; ++k) {
    double u = params_[0][k] * t + params_[3][k];
    for (std::size_t i = 0; i < d_; ++i) u += params_[1].at(k, i) * z[static_cast<Eigen::Index>(i)];
    const double sg = std::tanh(u);
    const double s1 = 1.0 - sg * sg;
    for (std::size_t i = 0; i < d_; ++i) {
      const double a = params_[2].at(i, k) * s1;
      for (std::size_t m = 0; m < d_; ++m) {
        jac(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(m)) += a * params_[1].at(k, m);
      }
    }
  }
  return jac;
}

// ---------------------------------------------------------------- QuadraticPsiField

QuadraticPsiField::QuadraticPsiField(std::size_t dim, std::size_t n_steps, double dt, double t0,
                                     double ou_rate)
    : d_(dim), n_steps_(n_steps), dt_(dt), t0_(t0), ou_rate_(ou_rate) {
  if (dim == 0 || n_steps == 0 || !(dt > 0.0)) {
    throw std::invalid_argument("quadratic field: need dim >= 1, n_steps >= 1, dt > 0");
  }
  params_ = {Tensor(Shape{n_steps_ + 1, d_ * (d_ + 1) / 2}), Tensor(Shape{n_steps_ + 1, d_}),
             Tensor(Shape{n_steps_ + 1, 1})};
}

std::vector<std::string> QuadraticPsiField::param_names() const { return {"A", "B", "C"}; }

std::unique_ptr<VelocityField> QuadraticPsiField::clone() const {
  return std::make_unique<QuadraticPsiField>(*this);
}

std::unique_ptr<BoundField> QuadraticPsiField::bind(Tape* tape) const {
  return bind_quadratic(*this, tape);
}

std::unique_ptr<BoundQuadratic> bind_quadratic(const QuadraticPsiField& field, Tape* tape) {
  return std::make_unique<BoundQuadraticImpl>(field, tape);
}

std::size_t QuadraticPsiField::grid_index(double t) const {
  const double x = (t - t0_) / dt_;
  const double j = std::round(x);
  if (j < 0.0 || j > static_cast<double>(n_steps_) || std::fabs(x - j) > 1e-7) {
    throw std::invalid_argument("quadratic field: t = " + std::to_string(t) +
                                " is not on the time grid");
  }
  return static_cast<std::size_t>(j);
}

Eigen::MatrixXd QuadraticPsiField::A(std::size_t j) const {
  const auto d = static_cast<Eigen::Index>(d_);
  Eigen::MatrixXd a(d, d);
  std::size_t idx = 0;
  for (Eigen::Index i = 0; i < d; ++i)
    for (Eigen::Index k = i; k < d; ++k, ++idx) {
      a(i, k) = params_[0].at(j, idx);
      a(k, i) = a(i, k);
    }
  return a;
}

Eigen::VectorXd QuadraticPsiField::B(std::size_t j) const {
  Eigen::VectorXd b(static_cast<Eigen::Index>(d_));
  for (std::size_t i = 0; i < d_; ++i) b[static_cast<Eigen::Index>(i)] = params_[1].at(j, i);
  return b;
}

double QuadraticPsiField::C(std::size_t j) const { return params_[2].at(j, 0); }

void QuadraticPsiField::set_A(std::size_t j, const Eigen::MatrixXd& a) {
  std::size_t idx = 0;
  for (std::size_t i = 0; i < d_; ++i)
    for (std::size_t k = i; k < d_; ++k, ++idx) {
      params_[0].at(j, idx) = a(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k));
    }
}

void QuadraticPsiField::set_B(std::size_t j, const Eigen::VectorXd& b) {
  for (std::size_t i = 0; i < d_; ++i) params_[1].at(j, i) = b[static_cast<Eigen::Index>(i)];
}

void QuadraticPsiField::set_C(std::size_t j, double c) { params_[2].at(j, 0) = c; }

double QuadraticPsiField::psi(std::size_t j, const Eigen::VectorXd& x) const {
  return 0.5 * x.dot(A(j) * x) + B(j).dot(x) + C(j);
}

Eigen::VectorXd QuadraticPsiField::eval(double t, const Eigen::VectorXd& z) const {
  const std::size_t j = grid_index(t);
  return A(j) * z + B(j) - ou_rate_ * z;
}

SpatialDerivatives QuadraticPsiField::spatial_derivatives(double t, const Eigen::VectorXd&) const {
  const std::size_t j = grid_index(t);
  const auto d = static_cast<Eigen::Index>(d_);
  SpatialDerivatives r;
  r.jac = A(j) - ou_rate_ * Eigen::MatrixXd::Identity(d, d);
  r.div = r.jac.trace();
  r.grad_div = Eigen::VectorXd::Zero(d);
  r.comp_hessians.assign(d_, Eigen::MatrixXd::Zero(d, d));
  r.hess_div = Eigen::MatrixXd::Zero(d, d);
  return r;
}

FirstOrderTerms QuadraticPsiField::first_order(double t, const Eigen::VectorXd& z,
                                               const Eigen::VectorXd& s) const {
  const Eigen::MatrixXd jac = jacobian(t, z);
  FirstOrderTerms r;
  r.f = eval(t, z);
  r.div = jac.trace();
  r.grad_div = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(d_));
  r.jac_t_s = jac.transpose() * s;
  return r;
}

Eigen::MatrixXd QuadraticPsiField::jacobian(double t, const Eigen::VectorXd&) const {
  const auto d = static_cast<Eigen::Index>(d_);
  return A(grid_index(t)) - ou_rate_ * Eigen::MatrixXd::Identity(d, d);
}

}  // namespace scoreflow
