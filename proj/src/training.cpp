#include "scoreflow/training.hpp"

#include <cmath>
#include <sstream>

namespace scoreflow {

void TrainConfig::validate() const {
  if (n_steps < 1) throw std::invalid_argument("train config: n_steps must be >= 1");
  if (n_z < 1) throw std::invalid_argument("train config: n_z must be >= 1");
  if (!(lr > 0.0)) throw std::invalid_argument("train config: lr must be > 0");
  if (!(lambda >= 0.0)) throw std::invalid_argument("train config: lambda must be >= 0");
  if (!(l2_weight >= 0.0)) throw std::invalid_argument("train config: l2_weight must be >= 0");
}

AdamState AdamState::like(const std::vector<Tensor>& params) {
  AdamState st;
  for (const Tensor& p : params) {
    st.m.emplace_back(p.shape());
    st.v.emplace_back(p.shape());
  }
  return st;
}

void adam_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, AdamState& st,
               double lr) {
  if (grads.size() != params.size() || st.m.size() != params.size() || st.v.size() != params.size()) {
    throw std::invalid_argument("adam_step: parameter, gradient and moment counts differ");
  }
  for (std::size_t p = 0; p < params.size(); ++p) {
    if (grads[p].shape() != params[p].shape() || st.m[p].shape() != params[p].shape() ||
        st.v[p].shape() != params[p].shape()) {
      throw std::invalid_argument("adam_step: shape mismatch for parameter " + std::to_string(p));
    }
  }
  ++st.step;
  const double c1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor& x = params[p];
    Tensor& m = st.m[p];
    Tensor& v = st.v[p];
    const Tensor& g = grads[p];
    for (std::size_t i = 0; i < x.size(); ++i) {
      m[i] = st.beta1 * m[i] + (1.0 - st.beta1) * g[i];
      v[i] = st.beta2 * v[i] + (1.0 - st.beta2) * g[i] * g[i];
      x[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + st.eps);
    }
  }
}

namespace {

const Var& density_input(const ProblemSpec& spec, const FlowBatch& b) {
  return spec.density_input == DensityInput::LogDensity ? b.l : b.ltilde;
}

Var half_sq_rows(const Var& x) { return ad::scale(ad::row_sum(ad::square(x)), 0.5); }

}  // namespace

Var cost_loss(const Trajectory& traj, const ProblemSpec& spec, double dt) {
  if (traj.states.size() < 2 || traj.velocities.size() + 1 < traj.states.size()) {
    throw std::invalid_argument("cost_loss: trajectory must be recorded in full with velocities");
  }
  const std::size_t n_steps = traj.states.size() - 1;
  Var running;
  for (std::size_t j = 0; j < n_steps; ++j) {
    const FlowBatch& b = traj.states[j];
    const double t = traj.times[j];
    Var v = ad::add(traj.velocities[j], ad::scale(b.s, spec.gamma));
    if (spec.drift) v = ad::sub(v, spec.drift->batched(t, b.z));
    Var step = half_sq_rows(v);
    if (spec.mf_cost) step = ad::add(step, spec.mf_cost(t, b.z, density_input(spec, b)));
    running = running.defined() ? ad::add(running, step) : step;
  }
  Var per_particle = ad::scale(running, dt);
  const FlowBatch& last = traj.states.back();
  if (spec.terminal_cost) {
    per_particle = ad::add(per_particle, spec.terminal_cost(last.z, density_input(spec, last)));
  }
  return ad::mean(per_particle);
}

namespace {

Var hjb_common(const Trajectory& traj, const BoundQuadratic& psi, double gamma, double dt,
               std::size_t j, Var* grad_psi_out) {
  const std::size_t n_steps = traj.states.size() - 1;
  if (j < 1 || j + 1 > n_steps) {
    throw std::out_of_range("hjb residual: j = " + std::to_string(j) + " outside 1.." +
                            std::to_string(n_steps - 1));
  }
  const FlowBatch& b = traj.states[j];
  if (!b.has_h()) throw std::invalid_argument("hjb residual: trajectory carries no H");
  const Var dpsi = ad::scale(ad::sub(psi.psi(j + 1, b.z), psi.psi(j - 1, b.z)), 1.0 / (2.0 * dt));
  const Var g = psi.grad_psi(j, b.z);
  const Var info = ad::add(ad::batch_trace(b.h), half_sq_rows(b.s));
  if (grad_psi_out) *grad_psi_out = g;
  return ad::add(ad::add(dpsi, half_sq_rows(g)), ad::scale(info, gamma * gamma));
}

}  // namespace

Var hjb_residual_lq(const Trajectory& traj, const BoundQuadratic& psi, double gamma, double dt,
                    std::size_t j) {
  return ad::mean(hjb_common(traj, psi, gamma, dt, j, nullptr));
}

Var hjb_residual_fm(const Trajectory& traj, const BoundQuadratic& psi, const Drift& drift,
                    double gamma, double dt, std::size_t j) {
  Var g;
  Var r = hjb_common(traj, psi, gamma, dt, j, &g);
  const FlowBatch& b = traj.states[j];
  const double t = traj.times[j];
  r = ad::add(r, ad::row_sum(ad::mul(g, drift.batched(t, b.z))));
  const std::size_t n = b.size(), d = b.dim();
  Tensor div(Shape{n});
  for (std::size_t p = 0; p < n; ++p) {
    const Eigen::VectorXd x =
        Eigen::Map<const Eigen::VectorXd>(b.z.value().data() + p * d, static_cast<Eigen::Index>(d));
    div[p] = -gamma * drift.divergence(t, x);
  }
  return ad::mean(ad::add(r, Var(std::move(div))));
}

Var total_loss(const Var& cost, const std::vector<Var>& hjb, double lambda, double dt,
               double l2_weight, const std::vector<Var>& params) {
  if (lambda < 0.0 || l2_weight < 0.0) {
    throw std::invalid_argument("total_loss: lambda and l2_weight must be >= 0");
  }
  Var total = cost;
  if (lambda > 0.0 && !hjb.empty()) {
    Var acc;
    for (const Var& h : hjb) acc = acc.defined() ? ad::add(acc, ad::abs(h)) : ad::abs(h);
    total = ad::add(total, ad::scale(acc, lambda * dt));
  }
  if (l2_weight > 0.0) {
    Var acc;
    for (const Var& p : params) {
      const Var sq = ad::sum(ad::square(p));
      acc = acc.defined() ? ad::add(acc, sq) : sq;
    }
    if (acc.defined()) total = ad::add(total, ad::scale(acc, l2_weight));
  }
  return total;
}

double step_size(double t0, double t_end, std::size_t n_steps) {
  if (!(t_end > t0) || n_steps == 0) throw std::invalid_argument("step_size: empty horizon");
  return (t_end - t0) / static_cast<double>(n_steps);
}

RunReport train_interval(const ProblemSpec& spec, VelocityField& field, const TrainConfig& cfg,
                         Algorithm algorithm, double t0, double t_end, const FlowBatch* fixed_init) {
  cfg.validate();
  const bool regularized = algorithm != Algorithm::Standard;
  auto* quad = dynamic_cast<QuadraticPsiField*>(&field);
  if (regularized && quad == nullptr) {
    throw std::invalid_argument("train: regularized algorithms need a quadratic psi field");
  }
  if (algorithm == Algorithm::RegularizedFm && !spec.drift) {
    throw std::invalid_argument("train: flow-matching residual needs a drift");
  }
  if (field.dim() != spec.dim) throw std::invalid_argument("train: field and problem dims differ");

  const double dt = step_size(t0, t_end, cfg.n_steps);
  RunReport rep;
  rep.t0 = t0;
  rep.t_end = t_end;
  rep.rng.seed(cfg.seed);
  rep.adam = AdamState::like(field.params());

  FlowBatch fixed;
  const bool use_fixed = fixed_init != nullptr || !cfg.resample;
  if (fixed_init != nullptr) {
    fixed = *fixed_init;
    if (regularized && !fixed.has_h()) {
      throw std::invalid_argument("train: fixed initial batch lacks H");
    }
  } else if (!cfg.resample) {
    fixed = sample_initial_batch(spec, cfg.n_z, rep.rng, regularized);
  }

  RolloutOptions opts;
  opts.n_steps = cfg.n_steps;
  opts.dt = dt;
  opts.t0 = t0;
  opts.propagate_h = regularized;
  opts.record_full = true;
  opts.final_velocity = false;

  FlowBatch init = fixed;
  for (std::size_t it = 0; it < cfg.iters; ++it) {
    if (!use_fixed) init = sample_initial_batch(spec, cfg.n_z, rep.rng, regularized);
    Tape tape;
    std::unique_ptr<BoundQuadratic> bq;
    std::unique_ptr<BoundField> bf;
    if (quad != nullptr) {
      bq = bind_quadratic(*quad, &tape);
    } else {
      bf = field.bind(&tape);
    }
    const BoundField& bound = bq ? static_cast<const BoundField&>(*bq) : *bf;

    Trajectory traj;
    try {
      traj = rollout(init, bound, opts);
    } catch (const FlowError& e) {
      throw TrainingError(std::string(e.what()) + " (iteration " + std::to_string(it) + ")", it);
    }
    for (const std::string& w : traj.warnings) {
      if (rep.warnings.size() < 20) rep.warnings.push_back("iteration " + std::to_string(it) + ": " + w);
    }
    const Var cost = cost_loss(traj, spec, dt);
    std::vector<Var> hjb;
    if (regularized) {
      for (std::size_t j = 1; j < cfg.n_steps; ++j) {
        hjb.push_back(algorithm == Algorithm::RegularizedLq
                          ? hjb_residual_lq(traj, *bq, spec.gamma, dt, j)
                          : hjb_residual_fm(traj, *bq, *spec.drift, spec.gamma, dt, j));
      }
    }
    const Var total = total_loss(cost, hjb, cfg.lambda, dt, cfg.l2_weight, bound.params());

    CurvePoint pt;
    pt.iter = it;
    pt.loss_cost = cost.item();
    for (const Var& h : hjb) pt.loss_hjb += std::fabs(h.item()) * dt;
    pt.loss_total = total.item();
    if (!std::isfinite(pt.loss_total)) {
      std::ostringstream msg;
      msg << "train: non-finite loss at iteration " << it << " (cost " << pt.loss_cost << ", hjb "
          << pt.loss_hjb << ")";
      throw TrainingError(msg.str(), it);
    }
    const std::vector<Tensor> grads = tape.backward(total);
    adam_step(field.params(), grads, rep.adam, cfg.lr);
    rep.curve.push_back(pt);
  }

  if (!init.z.defined()) init = sample_initial_batch(spec, cfg.n_z, rep.rng, regularized);
  RolloutOptions fin = opts;
  fin.record_full = false;
  fin.propagate_h = init.has_h();
  const auto bound = field.bind(nullptr);
  rep.terminal = rollout(init, *bound, fin).final();
  return rep;
}

RunReport train(const ProblemSpec& spec, MlpField& field, const TrainConfig& config) {
  return train_interval(spec, field, config, Algorithm::Standard, spec.t0, spec.t_end);
}

RunReport train_regularized(const ProblemSpec& spec, QuadraticPsiField& field,
                            const TrainConfig& config, Algorithm algorithm) {
  if (algorithm == Algorithm::Standard) {
    throw std::invalid_argument("train_regularized: algorithm must be a regularized variant");
  }
  return train_interval(spec, field, config, algorithm, spec.t0, spec.t_end);
}

std::vector<RunReport> train_multistage(const ProblemSpec& spec, MlpField& field,
                                        const TrainConfig& config,
                                        const std::vector<std::pair<double, double>>& stages,
                                        double stage_l2) {
  if (stages.empty()) throw std::invalid_argument("train_multistage: no stages");
  const double tol = 1e-12;
  if (std::fabs(stages.front().first - spec.t0) > tol || std::fabs(stages.back().second - spec.t_end) > tol) {
    throw std::invalid_argument("train_multistage: stages must cover the problem horizon");
  }
  for (std::size_t m = 0; m < stages.size(); ++m) {
    if (!(stages[m].second > stages[m].first)) throw std::invalid_argument("train_multistage: empty stage");
    if (m > 0 && std::fabs(stages[m].first - stages[m - 1].second) > tol) {
      throw std::invalid_argument("train_multistage: stages must be contiguous");
    }
  }
  std::vector<RunReport> out;
  for (std::size_t m = 0; m < stages.size(); ++m) {
    TrainConfig cfg = config;
    if (m == 0) {
      out.push_back(train_interval(spec, field, cfg, Algorithm::Standard, stages[m].first, stages[m].second));
    } else {
      cfg.resample = false;
      cfg.l2_weight = stage_l2;
      cfg.seed = config.seed + m;
      const FlowBatch handoff = out.back().terminal;
      out.push_back(train_interval(spec, field, cfg, Algorithm::Standard, stages[m].first,
                                   stages[m].second, &handoff));
    }
  }
  return out;
}

}  // namespace scoreflow
