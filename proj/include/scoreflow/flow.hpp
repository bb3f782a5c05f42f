#pragma once

// Forward-Euler transport of (z, log rho, rho, score, score Hessian) along a
// velocity field. Single-particle routines use plain doubles; the batched
// rollout runs on tape ops so losses can be differentiated through it.

#include <Eigen/Dense>
#include <functional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "scoreflow/tape.hpp"
#include "scoreflow/velocity.hpp"

namespace scoreflow {

struct FlowState {
  Eigen::VectorXd z;
  double l = 0.0;       // log rho(t, z)
  double ltilde = 0.0;  // rho(t, z)
  Eigen::VectorXd s;    // grad log rho
  Eigen::MatrixXd H;    // hess log rho
};

// Time derivative of every component of the state.
FlowState rhs(const FlowState& state, const Eigen::VectorXd& f, const SpatialDerivatives& derivs);

// One explicit Euler step with all derivatives taken at the step start.
FlowState euler_step(const FlowState& state, const VelocityField& field, double t, double dt);

class FlowError : public std::runtime_error {
 public:
  FlowError(const std::string& what, std::size_t step, std::size_t particle)
      : std::runtime_error(what), step_(step), particle_(particle) {}
  std::size_t step() const { return step_; }
  std::size_t particle() const { return particle_; }

 private:
  std::size_t step_;
  std::size_t particle_;
};

// N particles packed as tensors.
struct FlowBatch {
  Var z;       // [N x d]
  Var l;       // [N]
  Var ltilde;  // [N]
  Var s;       // [N x d]
  Var h;       // [N x d x d]; undefined when the Hessian is not propagated

  std::size_t size() const { return z.shape()[0]; }
  std::size_t dim() const { return z.shape()[1]; }
  bool has_h() const { return h.defined(); }
};

FlowBatch pack(const std::vector<FlowState>& states, bool with_h);
std::vector<FlowState> unpack(const FlowBatch& batch);
FlowState particle(const FlowBatch& batch, std::size_t n);

struct RolloutOptions {
  std::size_t n_steps = 100;
  double dt = 0.01;
  double t0 = 0.0;
  bool propagate_h = false;
  // Keep every snapshot; otherwise only the endpoints.
  bool record_full = true;
  // Evaluate f at the final state as well (j = n_steps).
  bool final_velocity = true;
};

// Called at every grid time j = 0..n_steps (before the step from j).
using StepHook = std::function<void(std::size_t j, double t, const FlowBatch& state,
                                    const FieldEvaluation& field)>;

struct Trajectory {
  std::vector<double> times;
  std::vector<FlowBatch> states;   // all n_steps+1 snapshots, or {initial, final}
  std::vector<Var> velocities;     // f(t_j, z_j), j = 0..n_steps when record_full
  std::vector<std::string> warnings;

  const FlowBatch& initial() const { return states.front(); }
  const FlowBatch& final() const { return states.back(); }
};

// |dt * div| above this at any particle produces a stability warning.
constexpr double kDivergenceGuard = 0.5;

Trajectory rollout(const FlowBatch& init, const BoundField& field, const RolloutOptions& opts,
                   const StepHook& hook = {});

// Score at the final time from the sensitivity form
//   s_T = (dz_T/dz_0)^{-T} dl_T/dz_0,
// chaining (I + dt jac) per step. O(d^3) per step and particle.
std::vector<Eigen::VectorXd> score_via_sensitivity(const std::vector<FlowState>& init,
                                                   const VelocityField& field,
                                                   std::size_t n_steps, double dt, double t0 = 0.0);

// Plain-double (z, l, s) rollout of one particle using only first-order terms;
// O(k d) per step for the MLP. Returns the final score.
Eigen::VectorXd score_rollout_point(const FlowState& init, const VelocityField& field,
                                    std::size_t n_steps, double dt, double t0 = 0.0);

// CSV dump with columns run, particle, j, t, z_1..z_d, l, ltilde, s_1..s_d.
void write_trajectory_header(std::ostream& os, std::size_t dim);
void write_trajectory_rows(std::ostream& os, const Trajectory& traj, std::size_t run,
                           std::size_t max_particles);

}  // namespace scoreflow
