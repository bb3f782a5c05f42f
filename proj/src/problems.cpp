#include "scoreflow/problems.hpp"

#include <cmath>
#include <map>
#include <mutex>
#include <sstream>
#include <stdexcept>

namespace scoreflow {

namespace {

constexpr double kPi = 3.14159265358979323846;

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Eigen::VectorXd row_of(const Tensor& z, std::size_t n) {
  const std::size_t d = z.dim(1);
  return Eigen::Map<const Eigen::VectorXd>(z.data() + n * d, static_cast<Eigen::Index>(d));
}

Var half_sq_norm_rows(const Var& z) { return ad::scale(ad::row_sum(ad::square(z)), 0.5); }

}  // namespace

// ---------------------------------------------------------------- Gaussian

GaussianInit::GaussianInit(Eigen::VectorXd mean, Eigen::MatrixXd cov)
    : mean_(std::move(mean)), cov_(std::move(cov)) {
  if (cov_.rows() != mean_.size() || cov_.cols() != mean_.size()) {
    throw std::invalid_argument("gaussian: covariance shape does not match mean");
  }
  if ((cov_ - cov_.transpose()).cwiseAbs().maxCoeff() > 1e-12) {
    throw std::invalid_argument("gaussian: covariance is not symmetric");
  }
  Eigen::LLT<Eigen::MatrixXd> llt(cov_);
  if (llt.info() != Eigen::Success) {
    throw std::invalid_argument("gaussian: covariance is not positive definite");
  }
  chol_ = llt.matrixL();
  precision_ = llt.solve(Eigen::MatrixXd::Identity(cov_.rows(), cov_.cols()));
  double log_det = 0.0;
  for (Eigen::Index i = 0; i < chol_.rows(); ++i) log_det += 2.0 * std::log(chol_(i, i));
  log_norm_ = -0.5 * static_cast<double>(mean_.size()) * std::log(2.0 * kPi) - 0.5 * log_det;
}

Eigen::MatrixXd GaussianInit::sample(std::size_t n, std::mt19937_64& rng) const {
  std::normal_distribution<double> normal(0.0, 1.0);
  const Eigen::Index d = mean_.size();
  Eigen::MatrixXd out(static_cast<Eigen::Index>(n), d);
  Eigen::VectorXd xi(d);
  for (Eigen::Index r = 0; r < static_cast<Eigen::Index>(n); ++r) {
    for (Eigen::Index i = 0; i < d; ++i) xi[i] = normal(rng);
    out.row(r) = (mean_ + chol_ * xi).transpose();
  }
  return out;
}

double GaussianInit::log_density(const Eigen::VectorXd& x) const {
  const Eigen::VectorXd r = x - mean_;
  return log_norm_ - 0.5 * r.dot(precision_ * r);
}

Eigen::VectorXd GaussianInit::score(const Eigen::VectorXd& x) const { return -precision_ * (x - mean_); }

Tensor gaussian_log_density(const Eigen::VectorXd& mean, const Eigen::MatrixXd& cov, const Tensor& z) {
  const GaussianInit g(mean, cov);
  const std::size_t n = z.dim(0);
  Tensor out(Shape{n});
  for (std::size_t b = 0; b < n; ++b) out[b] = g.log_density(row_of(z, b));
  return out;
}

Tensor gaussian_score(const Eigen::VectorXd& mean, const Eigen::MatrixXd& cov, const Tensor& z) {
  const GaussianInit g(mean, cov);
  const std::size_t n = z.dim(0), d = z.dim(1);
  Tensor out(Shape{n, d});
  for (std::size_t b = 0; b < n; ++b) {
    const Eigen::VectorXd s = g.score(row_of(z, b));
    for (std::size_t i = 0; i < d; ++i) out.at(b, i) = s[static_cast<Eigen::Index>(i)];
  }
  return out;
}

Tensor AnalyticSolution::log_density(double t, const Tensor& z) const {
  return gaussian_log_density(mean(t), cov(t), z);
}

Tensor AnalyticSolution::density(double t, const Tensor& z) const {
  Tensor out = log_density(t, z);
  for (double& v : out.values()) v = std::exp(v);
  return out;
}

Tensor AnalyticSolution::score(double t, const Tensor& z) const {
  return gaussian_score(mean(t), cov(t), z);
}

// ---------------------------------------------------------------- factories

namespace {

Tensor linear_velocity(const Tensor& z, const Eigen::MatrixXd& a, const Eigen::VectorXd& b) {
  const std::size_t n = z.dim(0), d = z.dim(1);
  Tensor out(Shape{n, d});
  for (std::size_t r = 0; r < n; ++r) {
    const Eigen::VectorXd f = a * row_of(z, r) + b;
    for (std::size_t i = 0; i < d; ++i) out.at(r, i) = f[static_cast<Eigen::Index>(i)];
  }
  return out;
}

Drift linear_drift(double a, std::size_t d) {
  Drift drift;
  drift.batched = [a](double, const Var& z) { return ad::scale(z, -a); };
  drift.point = [a](double, const Eigen::VectorXd& x) { return Eigen::VectorXd(-a * x); };
  drift.divergence = [a, d](double, const Eigen::VectorXd&) { return -a * static_cast<double>(d); };
  drift.linear_rate = a;
  return drift;
}

}  // namespace

ProblemSpec make_rwpo(std::size_t d, double gamma) {
  if (d == 0 || !(gamma > 0.0)) throw std::invalid_argument("rwpo: need d >= 1 and gamma > 0");
  ProblemSpec p;
  p.name = "rwpo";
  p.dim = d;
  p.gamma = gamma;
  p.t_end = 1.0;
  const auto de = static_cast<Eigen::Index>(d);
  const Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(de, de);
  p.init = GaussianInit(Eigen::VectorXd::Zero(de), 4.0 * gamma * eye);
  p.terminal_cost = [](const Var& z, const Var&) { return half_sq_norm_rows(z); };
  p.terminal_point = [](const Eigen::VectorXd& x) { return 0.5 * x.squaredNorm(); };
  p.terminal_grad = [](const Eigen::VectorXd& x) { return x; };

  AnalyticSolution a;
  a.mean = [de](double) { return Eigen::VectorXd(Eigen::VectorXd::Zero(de)); };
  a.cov = [gamma, eye](double t) { return Eigen::MatrixXd(2.0 * gamma * (2.0 - t) * eye); };
  a.velocity = [eye, de](double t, const Tensor& z) {
    return linear_velocity(z, -eye / (2.0 * (2.0 - t)), Eigen::VectorXd::Zero(de));
  };
  a.psi_A = [eye](double t) { return Eigen::MatrixXd(-eye / (2.0 * (2.0 - t))); };
  a.psi_B = [de](double) { return Eigen::VectorXd(Eigen::VectorXd::Zero(de)); };
  a.optimal_cost = gamma * static_cast<double>(d) * (1.0 + std::log(2.0));
  p.analytic = a;
  p.parameters = {{"gamma", gamma}};
  return p;
}

ProblemSpec make_ou_flow_matching(std::size_t d, double gamma, double a,
                                  std::optional<Eigen::VectorXd> mu0,
                                  std::optional<Eigen::MatrixXd> sigma0) {
  if (d == 0 || !(gamma > 0.0) || !(a > 0.0)) {
    throw std::invalid_argument("ou_flow_matching: need d >= 1, gamma > 0, a > 0");
  }
  const auto de = static_cast<Eigen::Index>(d);
  const Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(de, de);
  const Eigen::VectorXd m0 = mu0.value_or(Eigen::VectorXd::Ones(de));
  const Eigen::MatrixXd s0 = sigma0.value_or(4.0 * eye);
  ProblemSpec p;
  p.name = "ou_flow_matching";
  p.dim = d;
  p.gamma = gamma;
  p.t_end = 1.0;
  p.init = GaussianInit(m0, s0);
  p.drift = linear_drift(a, d);

  AnalyticSolution sol;
  sol.mean = [m0, a](double t) { return Eigen::VectorXd(std::exp(-a * t) * m0); };
  sol.cov = [s0, eye, gamma, a](double t) {
    return Eigen::MatrixXd((gamma / a) * eye + (s0 - (gamma / a) * eye) * std::exp(-2.0 * a * t));
  };
  const auto mean = sol.mean;
  const auto cov = sol.cov;
  // f* = b - gamma s* = -a x + gamma P (x - mu), P = Sigma^{-1}
  sol.velocity = [mean, cov, gamma, a, eye](double t, const Tensor& z) {
    const Eigen::MatrixXd prec = cov(t).inverse();
    return linear_velocity(z, gamma * prec - a * eye, -gamma * prec * mean(t));
  };
  sol.psi_A = [cov, gamma](double t) { return Eigen::MatrixXd(gamma * cov(t).inverse()); };
  sol.psi_B = [mean, cov, gamma](double t) {
    return Eigen::VectorXd(-gamma * cov(t).inverse() * mean(t));
  };
  sol.optimal_cost = 0.0;
  p.analytic = sol;
  p.parameters = {{"gamma", gamma}, {"a", a}};
  return p;
}

double double_moon_potential(const Eigen::Vector2d& x) {
  const double r = x.norm();
  const double ea = -2.0 * (x[0] - 3.0) * (x[0] - 3.0);
  const double eb = -2.0 * (x[0] + 3.0) * (x[0] + 3.0);
  const double m = std::max(ea, eb);
  const double lse = m + std::log(std::exp(ea - m) + std::exp(eb - m));
  return 2.0 * (r - 3.0) * (r - 3.0) - 2.0 * lse;
}

namespace {

// Softmax weights of the two wells.
std::pair<double, double> moon_weights(double x1) {
  const double ea = -2.0 * (x1 - 3.0) * (x1 - 3.0);
  const double eb = -2.0 * (x1 + 3.0) * (x1 + 3.0);
  const double m = std::max(ea, eb);
  const double pa = std::exp(ea - m), pb = std::exp(eb - m);
  return {pa / (pa + pb), pb / (pa + pb)};
}

// Gradient and Hessian of the double-moon potential.
void moon_derivatives(const double* x, double grad[2], double hess[4]) {
  const double r = std::hypot(x[0], x[1]);
  const auto [wa, wb] = moon_weights(x[0]);
  grad[0] = grad[1] = 0.0;
  hess[0] = hess[1] = hess[2] = hess[3] = 0.0;
  if (r > 1e-12) {
    const double g = 4.0 * (r - 3.0) / r;
    grad[0] = g * x[0];
    grad[1] = g * x[1];
    const double radial = 4.0, tangential = 4.0 * (r - 3.0) / r;
    for (int i = 0; i < 2; ++i)
      for (int k = 0; k < 2; ++k) {
        const double uu = x[i] * x[k] / (r * r);
        hess[i * 2 + k] = radial * uu + tangential * ((i == k ? 1.0 : 0.0) - uu);
      }
  }
  grad[0] += 8.0 * (wa * (x[0] - 3.0) + wb * (x[0] + 3.0));
  hess[0] += 8.0 - 1152.0 * wa * wb;
}

}  // namespace

Eigen::Vector2d double_moon_grad(const Eigen::Vector2d& x) {
  double g[2], h[4];
  moon_derivatives(x.data(), g, h);
  return {g[0], g[1]};
}

ProblemSpec make_double_moon(double gamma) {
  if (!(gamma > 0.0)) throw std::invalid_argument("double_moon: gamma must be positive");
  ProblemSpec p;
  p.name = "double_moon";
  p.dim = 2;
  p.gamma = gamma;
  p.t_end = 0.4;
  p.init = GaussianInit(Eigen::VectorXd::Zero(2), Eigen::MatrixXd::Identity(2, 2));
  Drift drift;
  drift.batched = [](double, const Var& z) {
    return ad::pointwise_map(z, 2, [](const double* x, double* y, double* jac) {
      double g[2], h[4];
      moon_derivatives(x, g, h);
      y[0] = -g[0];
      y[1] = -g[1];
      for (int i = 0; i < 4; ++i) jac[i] = -h[i];
    });
  };
  drift.point = [](double, const Eigen::VectorXd& x) {
    return Eigen::VectorXd(-double_moon_grad(Eigen::Vector2d(x[0], x[1])));
  };
  drift.divergence = [](double, const Eigen::VectorXd& x) {
    double g[2], h[4];
    moon_derivatives(x.data(), g, h);
    return -(h[0] + h[3]);
  };
  p.drift = drift;
  p.stages = {{0.0, 0.2}, {0.2, 0.4}};
  p.parameters = {{"gamma", gamma}};
  return p;
}

ProblemSpec make_lq_entropy(std::size_t d, double beta) {
  if (d == 0 || beta < 0.0) throw std::invalid_argument("lq_entropy: need d >= 1 and beta >= 0");
  ProblemSpec p;
  p.name = "lq_entropy";
  p.dim = d;
  p.gamma = 1.0;
  p.t_end = 1.0;
  p.density_input = DensityInput::LogDensity;
  const double alpha = (std::sqrt(beta * beta + 4.0) - beta) / 2.0;
  const auto de = static_cast<Eigen::Index>(d);
  const Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(de, de);
  p.init = GaussianInit(Eigen::VectorXd::Zero(de), eye / alpha);
  p.mf_cost = [beta](double, const Var& z, const Var& log_rho) {
    return ad::add(half_sq_norm_rows(z), ad::scale(log_rho, beta));
  };
  p.terminal_cost = [alpha](const Var& z, const Var&) {
    return ad::scale(half_sq_norm_rows(z), alpha);
  };
  p.terminal_point = [alpha](const Eigen::VectorXd& x) { return 0.5 * alpha * x.squaredNorm(); };
  p.terminal_grad = [alpha](const Eigen::VectorXd& x) { return Eigen::VectorXd(alpha * x); };

  AnalyticSolution a;
  a.mean = [de](double) { return Eigen::VectorXd(Eigen::VectorXd::Zero(de)); };
  a.cov = [eye, alpha](double) { return Eigen::MatrixXd(eye / alpha); };
  a.velocity = [de](double, const Tensor& z) {
    return linear_velocity(z, Eigen::MatrixXd::Zero(de, de), Eigen::VectorXd::Zero(de));
  };
  a.psi_A = [de](double) { return Eigen::MatrixXd(Eigen::MatrixXd::Zero(de, de)); };
  a.psi_B = [de](double) { return Eigen::VectorXd(Eigen::VectorXd::Zero(de)); };
  const double dd = static_cast<double>(d);
  // kinetic alpha d/2, potential d/(2 alpha), entropy beta E[log rho], terminal d/2
  a.optimal_cost = alpha * dd / 2.0 + dd / (2.0 * alpha) +
                   beta * (-0.5 * dd * std::log(2.0 * kPi / alpha) - 0.5 * dd) + dd / 2.0;
  p.analytic = a;
  p.parameters = {{"beta", beta}, {"alpha", alpha}};
  return p;
}

ProblemSpec make_double_well(std::size_t d, double gamma, double c, std::optional<Eigen::VectorXd> c1,
                             std::optional<Eigen::VectorXd> c2) {
  if (d == 0 || !(gamma > 0.0) || !(c >= 0.0)) {
    throw std::invalid_argument("double_well: need d >= 1, gamma > 0, c >= 0");
  }
  const auto de = static_cast<Eigen::Index>(d);
  const Eigen::VectorXd w1 = c1.value_or(-Eigen::VectorXd::Ones(de));
  const Eigen::VectorXd w2 = c2.value_or(Eigen::VectorXd::Ones(de));
  if (w1.size() != de || w2.size() != de) throw std::invalid_argument("double_well: centre dims");
  ProblemSpec p;
  p.name = "double_well";
  p.dim = d;
  p.gamma = gamma;
  p.t_end = 1.0;
  p.init = GaussianInit(Eigen::VectorXd::Zero(de), Eigen::MatrixXd::Identity(de, de));
  Tensor t1(Shape{d}), t2(Shape{d});
  for (std::size_t i = 0; i < d; ++i) {
    t1[i] = -w1[static_cast<Eigen::Index>(i)];
    t2[i] = -w2[static_cast<Eigen::Index>(i)];
  }
  const Var shift1(t1), shift2(t2);
  p.terminal_cost = [c, shift1, shift2](const Var& z, const Var&) {
    const Var r1 = ad::row_sum(ad::square(ad::add_row(z, shift1)));
    const Var r2 = ad::row_sum(ad::square(ad::add_row(z, shift2)));
    return ad::scale(ad::mul(r1, r2), c);
  };
  p.terminal_point = [c, w1, w2](const Eigen::VectorXd& x) {
    return c * (x - w1).squaredNorm() * (x - w2).squaredNorm();
  };
  p.terminal_grad = [c, w1, w2](const Eigen::VectorXd& x) {
    return Eigen::VectorXd(2.0 * c * ((x - w1) * (x - w2).squaredNorm() + (x - w2) * (x - w1).squaredNorm()));
  };
  p.parameters = {{"gamma", gamma}, {"c", c}};
  return p;
}

// ---------------------------------------------------------------- initial states

FlowState initial_flow_state(const ProblemSpec& spec, const Eigen::VectorXd& z0) {
  if (!z0.allFinite()) throw std::invalid_argument("initial_flow_state: non-finite z0");
  FlowState st;
  st.z = z0;
  st.l = spec.init.log_density(z0);
  st.ltilde = std::exp(st.l);
  st.s = spec.init.score(z0);
  st.H = spec.init.hessian();
  return st;
}

FlowBatch sample_initial_batch(const ProblemSpec& spec, std::size_t n, std::mt19937_64& rng,
                               bool with_h) {
  const Eigen::MatrixXd z = spec.init.sample(n, rng);
  std::vector<FlowState> states;
  states.reserve(n);
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    states.push_back(initial_flow_state(spec, z.row(r).transpose()));
  }
  return pack(states, with_h);
}

// ---------------------------------------------------------------- optimal cost

CostEstimate optimal_cost_mc(const ProblemSpec& spec, std::size_t samples, double dt,
                             std::uint64_t seed) {
  if (!spec.analytic) throw std::invalid_argument("optimal_cost_mc: problem has no analytic solution");
  std::ostringstream key;
  key.precision(17);
  key << spec.name << '|' << spec.dim << '|' << spec.gamma << '|' << spec.t0 << '|' << spec.t_end;
  for (const auto& [k, v] : spec.parameters) key << '|' << k << '=' << v;
  key << '|' << samples << '|' << dt << '|' << seed;

  static std::mutex mu;
  static std::map<std::string, CostEstimate> memo;
  {
    std::lock_guard<std::mutex> lock(mu);
    const auto it = memo.find(key.str());
    if (it != memo.end()) return it->second;
  }

  const AnalyticSolution& sol = *spec.analytic;
  const auto n_steps = static_cast<std::size_t>(std::llround((spec.t_end - spec.t0) / dt));
  const std::size_t d = spec.dim;
  const bool log_in = spec.density_input == DensityInput::LogDensity;
  std::mt19937_64 rng(seed);
  constexpr std::size_t kChunk = 50000;

  double sum = 0.0, sum_sq = 0.0;
  for (std::size_t done = 0; done < samples; done += kChunk) {
    const std::size_t m = std::min(kChunk, samples - done);
    const Eigen::MatrixXd z0 = spec.init.sample(m, rng);
    Tensor z(Shape{m, d});
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t i = 0; i < d; ++i) z.at(r, i) = z0(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(i));
    std::vector<double> acc(m, 0.0);
    for (std::size_t j = 0; j < n_steps; ++j) {
      const double t = spec.t0 + static_cast<double>(j) * dt;
      const Tensor f = sol.velocity(t, z);
      const Tensor s = sol.score(t, z);
      Tensor v(Shape{m, d});
      for (std::size_t q = 0; q < v.size(); ++q) v[q] = f[q] + spec.gamma * s[q];
      if (spec.drift) {
        const Var b = spec.drift->batched(t, Var(z));
        for (std::size_t q = 0; q < v.size(); ++q) v[q] -= b.value()[q];
      }
      for (std::size_t r = 0; r < m; ++r) {
        double e = 0.0;
        for (std::size_t i = 0; i < d; ++i) e += v.at(r, i) * v.at(r, i);
        acc[r] += 0.5 * e * dt;
      }
      if (spec.mf_cost) {
        const Tensor rho = log_in ? sol.log_density(t, z) : sol.density(t, z);
        const Var fv = spec.mf_cost(t, Var(z), Var(rho));
        for (std::size_t r = 0; r < m; ++r) acc[r] += fv.value()[r] * dt;
      }
      for (std::size_t q = 0; q < z.size(); ++q) z[q] += dt * f[q];
    }
    if (spec.terminal_cost) {
      const Tensor rho = log_in ? sol.log_density(spec.t_end, z) : sol.density(spec.t_end, z);
      const Var g = spec.terminal_cost(Var(z), Var(rho));
      for (std::size_t r = 0; r < m; ++r) acc[r] += g.value()[r];
    }
    for (double a : acc) {
      sum += a;
      sum_sq += a * a;
    }
  }
  const double n = static_cast<double>(samples);
  CostEstimate est;
  est.mean = sum / n;
  est.stderr_ = std::sqrt(std::max(0.0, sum_sq / n - est.mean * est.mean) / n);
  est.samples = samples;
  est.dt = dt;
  std::lock_guard<std::mutex> lock(mu);
  memo[key.str()] = est;
  return est;
}

}  // namespace scoreflow
