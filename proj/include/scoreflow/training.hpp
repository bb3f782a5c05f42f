#pragma once

// Discretized control objective, HJB residual regularizers, Adam, and the
// training loops (plain, HJB-regularized, multi-stage).

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "scoreflow/flow.hpp"
#include "scoreflow/problems.hpp"
#include "scoreflow/tape.hpp"
#include "scoreflow/velocity.hpp"

namespace scoreflow {

struct TrainConfig {
  std::size_t n_steps = 100;
  std::size_t n_z = 1000;
  double lr = 0.01;
  std::size_t iters = 200;
  double lambda = 0.0;
  double l2_weight = 0.0;
  std::uint64_t seed = 0;
  bool resample = true;

  // Throws std::invalid_argument naming the offending field.
  void validate() const;
};

struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::size_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  // Zero moments shaped like params.
  static AdamState like(const std::vector<Tensor>& params);
};

// One bias-corrected Adam update in place.
void adam_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, AdamState& state,
               double lr);

// Mean over particles of sum_j [L + F] dt + G, left-endpoint in time. The
// trajectory must be recorded in full with velocities for j = 0..N_t-1.
Var cost_loss(const Trajectory& traj, const ProblemSpec& spec, double dt);

// Interior HJB residual at grid index j (1 <= j <= N_t-1). The trajectory must
// carry H. The flow-matching variant adds grad psi . b - gamma div b.
Var hjb_residual_lq(const Trajectory& traj, const BoundQuadratic& psi, double gamma, double dt,
                    std::size_t j);
Var hjb_residual_fm(const Trajectory& traj, const BoundQuadratic& psi, const Drift& drift,
                    double gamma, double dt, std::size_t j);

// cost + lambda sum_j |hjb_j| dt + l2_weight |theta|^2
Var total_loss(const Var& cost, const std::vector<Var>& hjb, double lambda, double dt,
               double l2_weight, const std::vector<Var>& params);

enum class Algorithm { Standard, RegularizedLq, RegularizedFm };

struct CurvePoint {
  std::size_t iter = 0;
  double loss_cost = 0.0;
  double loss_hjb = 0.0;  // sum_j |hjb_j| dt, before the lambda weight
  double loss_total = 0.0;
};

struct RunReport {
  std::vector<CurvePoint> curve;
  std::vector<std::string> warnings;
  double t0 = 0.0;
  double t_end = 1.0;
  // State of the optimizer and sampler after the last iteration.
  AdamState adam;
  std::mt19937_64 rng;
  // Terminal particles of a rollout with the final parameters from the last
  // training sample set; the next stage starts from these.
  FlowBatch terminal;
};

class TrainingError : public std::runtime_error {
 public:
  TrainingError(const std::string& what, std::size_t iter)
      : std::runtime_error(what), iter_(iter) {}
  std::size_t iter() const { return iter_; }

 private:
  std::size_t iter_;
};

// Grid step for a horizon split into n_steps.
double step_size(double t0, double t_end, std::size_t n_steps);

// Plain training of an MLP field over [t0, t_end]. With a non-null fixed_init
// the sample set is that batch and resample is ignored.
RunReport train(const ProblemSpec& spec, MlpField& field, const TrainConfig& config);
RunReport train_interval(const ProblemSpec& spec, VelocityField& field, const TrainConfig& config,
                         Algorithm algorithm, double t0, double t_end,
                         const FlowBatch* fixed_init = nullptr);

// Quadratic psi field with the matching HJB residual.
RunReport train_regularized(const ProblemSpec& spec, QuadraticPsiField& field,
                            const TrainConfig& config, Algorithm algorithm);

// Stage 1 resamples; later stages warm-start the parameters, reuse the
// previous terminal particles as a fixed sample set and use stage_l2.
std::vector<RunReport> train_multistage(const ProblemSpec& spec, MlpField& field,
                                        const TrainConfig& config,
                                        const std::vector<std::pair<double, double>>& stages,
                                        double stage_l2 = 0.1);

}  // namespace scoreflow
