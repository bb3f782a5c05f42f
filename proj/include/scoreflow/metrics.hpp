#pragma once

// Error metrics for trained flows and their aggregation over runs.

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "scoreflow/flow.hpp"
#include "scoreflow/problems.hpp"
#include "scoreflow/reference.hpp"
#include "scoreflow/velocity.hpp"

namespace scoreflow {

// Mean absolute difference of two [N] tensors.
double mean_abs_diff(const Tensor& a, const Tensor& b);
// Mean Euclidean distance between matching rows of two [N x d] tensors.
double mean_row_distance(const Tensor& a, const Tensor& b);

// Density carried by the flow: ltilde, or exp(l) for log-density problems.
Tensor carried_density(const ProblemSpec& spec, const FlowBatch& batch);

double err_rho(const Tensor& rho_flow, const Tensor& rho_true);
// Time-and-particle mean of |f - f*| over all recorded snapshots j = 0..N_t.
double err_f(const Trajectory& traj,
             const std::function<Tensor(double t, const Tensor& z)>& f_true);
double err_s(const FlowBatch& final, const Tensor& s_true);

// A grid function sampled at the rows of z; rows outside the grid are dropped
// and counted.
struct GridSample {
  std::vector<std::size_t> rows;  // kept row indices
  Tensor values;                  // [kept x comps]
  std::size_t outside = 0;
};
GridSample sample_grid(const GridFunction& g, const Tensor& z);
// Mean distance between rows of pred (selected by sample.rows) and sample.values.
double grid_error(const Tensor& pred, const GridSample& sample);

// Frobenius / Euclidean distance of theta^A_j, theta^B_j to A(t_j), B(t_j),
// averaged over j = 0..N_t.
double err_A(const QuadraticPsiField& field, const AnalyticSolution& sol);
double err_B(const QuadraticPsiField& field, const AnalyticSolution& sol);

struct InfoResidual {
  double t = 0.0;
  double value = 0.0;   // mean tr H + mean |s|^2
  double stderr_ = 0.0;
};
InfoResidual info_residual(const FlowBatch& batch, double t);

struct ErrorReport {
  std::map<std::string, double> metrics;  // err_rho, err_f, ..., cost, cost_gap
  std::vector<InfoResidual> info;
  std::size_t outside_grid = 0;
  std::vector<std::string> warnings;
};

struct EvalOptions {
  std::size_t n_z = 1000;
  std::uint64_t seed = 0;
  std::size_t n_steps = 100;
  bool propagate_h = false;
  // Quadrature reference for problems without a Gaussian solution.
  const TerminalReference* terminal = nullptr;
  const GridFunction* initial_velocity = nullptr;
  // Sub-interval and starting particles (multi-stage); defaults to the
  // problem horizon and fresh samples from rho_0.
  std::optional<std::pair<double, double>> interval;
  const FlowBatch* init = nullptr;
};

// Optimal objective: closed form when known, otherwise the Monte-Carlo value.
double optimal_cost(const ProblemSpec& spec);

// Rolls the trained field out on fresh samples and computes every metric the
// problem supports.
ErrorReport evaluate_field(const ProblemSpec& spec, const VelocityField& field,
                           const EvalOptions& opts);

struct Aggregate {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation (0 for one run)
  std::vector<double> values;
};
Aggregate aggregate(const std::vector<double>& values);
std::map<std::string, Aggregate> aggregate_reports(const std::vector<ErrorReport>& reports);

}  // namespace scoreflow
