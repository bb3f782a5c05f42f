#pragma once

// Mean-field control problem instances: costs, drift, Gaussian initial law
// and, where one exists, the Gaussian closed-form solution.
//
// The running cost is always L(t, x, v) = 1/2 |v - b(t, x)|^2 with b = 0 when
// the problem has no drift. F and G are given as batched tape functions so the
// training loss can differentiate through them.

#include <Eigen/Dense>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "scoreflow/flow.hpp"
#include "scoreflow/tape.hpp"

namespace scoreflow {

class GaussianInit {
 public:
  GaussianInit() = default;
  GaussianInit(Eigen::VectorXd mean, Eigen::MatrixXd cov);

  std::size_t dim() const { return static_cast<std::size_t>(mean_.size()); }
  const Eigen::VectorXd& mean() const { return mean_; }
  const Eigen::MatrixXd& cov() const { return cov_; }
  const Eigen::MatrixXd& precision() const { return precision_; }

  // n x d samples, one row per particle.
  Eigen::MatrixXd sample(std::size_t n, std::mt19937_64& rng) const;
  double log_density(const Eigen::VectorXd& x) const;
  double density(const Eigen::VectorXd& x) const { return std::exp(log_density(x)); }
  Eigen::VectorXd score(const Eigen::VectorXd& x) const;
  Eigen::MatrixXd hessian() const { return -precision_; }

 private:
  Eigen::VectorXd mean_;
  Eigen::MatrixXd cov_;
  Eigen::MatrixXd precision_;
  Eigen::MatrixXd chol_;
  double log_norm_ = 0.0;
};

// Batched Gaussian quantities for Z[N x d].
Tensor gaussian_log_density(const Eigen::VectorXd& mean, const Eigen::MatrixXd& cov, const Tensor& z);
Tensor gaussian_score(const Eigen::VectorXd& mean, const Eigen::MatrixXd& cov, const Tensor& z);

struct Drift {
  std::function<Var(double t, const Var& z)> batched;  // [N x d]
  std::function<Eigen::VectorXd(double t, const Eigen::VectorXd& x)> point;
  std::function<double(double t, const Eigen::VectorXd& x)> divergence;
  // b(t, x) = -rate x exactly when set; quadratic psi fields need this form.
  std::optional<double> linear_rate;
};

struct AnalyticSolution {
  std::function<Eigen::VectorXd(double t)> mean;
  std::function<Eigen::MatrixXd(double t)> cov;
  std::function<Tensor(double t, const Tensor& z)> velocity;  // f*, [N x d]
  // grad psi = A(t) x + B(t) for the quadratic parameterization.
  std::function<Eigen::MatrixXd(double t)> psi_A;
  std::function<Eigen::VectorXd(double t)> psi_B;
  std::optional<double> optimal_cost;  // closed form, when known

  Tensor density(double t, const Tensor& z) const;
  Tensor log_density(double t, const Tensor& z) const;
  Tensor score(double t, const Tensor& z) const;
};

enum class DensityInput { Density, LogDensity };

struct ProblemSpec {
  std::string name;
  std::size_t dim = 1;
  double gamma = 1.0;
  double t0 = 0.0;
  double t_end = 1.0;
  DensityInput density_input = DensityInput::Density;
  GaussianInit init;
  std::optional<Drift> drift;

  // F(t, z, rho_in) and G(z, rho_in) as [N] tensors; empty means identically 0.
  // rho_in is ltilde, or l when density_input is LogDensity.
  std::function<Var(double t, const Var& z, const Var& rho_in)> mf_cost;
  std::function<Var(const Var& z, const Var& rho_in)> terminal_cost;
  // Density-independent terminal cost and its gradient at one point (used by
  // the quadrature reference).
  std::function<double(const Eigen::VectorXd& x)> terminal_point;
  std::function<Eigen::VectorXd(const Eigen::VectorXd& x)> terminal_grad;

  std::optional<AnalyticSolution> analytic;
  std::vector<std::pair<double, double>> stages;
  std::map<std::string, double> parameters;
};

ProblemSpec make_rwpo(std::size_t d, double gamma = 1.0);
ProblemSpec make_ou_flow_matching(std::size_t d, double gamma = 1.0, double a = 1.0,
                                  std::optional<Eigen::VectorXd> mu0 = std::nullopt,
                                  std::optional<Eigen::MatrixXd> sigma0 = std::nullopt);
ProblemSpec make_double_moon(double gamma = 1.0);
ProblemSpec make_lq_entropy(std::size_t d, double beta = 0.1);
ProblemSpec make_double_well(std::size_t d, double gamma = 0.1, double c = 0.25,
                             std::optional<Eigen::VectorXd> c1 = std::nullopt,
                             std::optional<Eigen::VectorXd> c2 = std::nullopt);

// Double-moon potential and its gradient.
double double_moon_potential(const Eigen::Vector2d& x);
Eigen::Vector2d double_moon_grad(const Eigen::Vector2d& x);

// Exact Gaussian (l, ltilde, s, H) at z0.
FlowState initial_flow_state(const ProblemSpec& spec, const Eigen::VectorXd& z0);
// n fresh samples packed for a rollout.
FlowBatch sample_initial_batch(const ProblemSpec& spec, std::size_t n, std::mt19937_64& rng,
                               bool with_h);

struct CostEstimate {
  double mean = 0.0;
  double stderr_ = 0.0;
  std::size_t samples = 0;
  double dt = 0.0;
};

// Objective of the analytic solution: f*, exact scores and exact densities
// along an Euler rollout, averaged over samples. Memoized per problem and
// settings within the process.
CostEstimate optimal_cost_mc(const ProblemSpec& spec, std::size_t samples = 1000000,
                             double dt = 1e-3, std::uint64_t seed = 20240601);

}  // namespace scoreflow
