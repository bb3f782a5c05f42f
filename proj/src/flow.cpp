#include "scoreflow/flow.hpp"

#include <cmath>
#include <sstream>

#include "scoreflow/csv.hpp"

namespace scoreflow {

FlowState rhs(const FlowState& state, const Eigen::VectorXd& f, const SpatialDerivatives& derivs) {
  FlowState inc;
  inc.z = f;
  inc.l = -derivs.div;
  inc.ltilde = -derivs.div * state.ltilde;
  inc.s = -derivs.jac.transpose() * state.s - derivs.grad_div;
  if (state.H.size() > 0) {
    Eigen::MatrixXd dh = -derivs.hess_div - state.H * derivs.jac - derivs.jac.transpose() * state.H;
    for (Eigen::Index i = 0; i < state.s.size(); ++i) {
      dh -= state.s[i] * derivs.comp_hessians[static_cast<std::size_t>(i)];
    }
    inc.H = dh;
  }
  return inc;
}

FlowState euler_step(const FlowState& state, const VelocityField& field, double t, double dt) {
  if (!(dt > 0.0)) throw std::invalid_argument("euler_step: dt must be positive");
  const SpatialDerivatives derivs = field.spatial_derivatives(t, state.z);
  const FlowState inc = rhs(state, field.eval(t, state.z), derivs);
  FlowState next;
  next.z = state.z + dt * inc.z;
  next.l = state.l + dt * inc.l;
  next.ltilde = state.ltilde + dt * inc.ltilde;
  next.s = state.s + dt * inc.s;
  if (state.H.size() > 0) next.H = state.H + dt * inc.H;
  return next;
}

FlowBatch pack(const std::vector<FlowState>& states, bool with_h) {
  if (states.empty()) throw std::invalid_argument("pack: empty batch");
  const std::size_t n = states.size();
  const auto d = static_cast<std::size_t>(states[0].z.size());
  Tensor z(Shape{n, d}), l(Shape{n}), lt(Shape{n}), s(Shape{n, d});
  Tensor h = with_h ? Tensor(Shape{n, d, d}) : Tensor();
  for (std::size_t b = 0; b < n; ++b) {
    const FlowState& st = states[b];
    if (static_cast<std::size_t>(st.z.size()) != d) throw std::invalid_argument("pack: ragged dims");
    l[b] = st.l;
    lt[b] = st.ltilde;
    for (std::size_t i = 0; i < d; ++i) {
      z.at(b, i) = st.z[static_cast<Eigen::Index>(i)];
      s.at(b, i) = st.s[static_cast<Eigen::Index>(i)];
      if (with_h) {
        for (std::size_t k = 0; k < d; ++k) {
          h.at(b, i, k) = st.H(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k));
        }
      }
    }
  }
  FlowBatch batch{Var(std::move(z)), Var(std::move(l)), Var(std::move(lt)), Var(std::move(s)), Var()};
  if (with_h) batch.h = Var(std::move(h));
  return batch;
}

FlowState particle(const FlowBatch& batch, std::size_t n) {
  const std::size_t d = batch.dim();
  const auto de = static_cast<Eigen::Index>(d);
  FlowState st;
  st.z = Eigen::Map<const Eigen::VectorXd>(batch.z.value().data() + n * d, de);
  st.s = Eigen::Map<const Eigen::VectorXd>(batch.s.value().data() + n * d, de);
  st.l = batch.l.value()[n];
  st.ltilde = batch.ltilde.value()[n];
  if (batch.has_h()) {
    st.H = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        batch.h.value().data() + n * d * d, de, de);
  }
  return st;
}

std::vector<FlowState> unpack(const FlowBatch& batch) {
  std::vector<FlowState> out;
  out.reserve(batch.size());
  for (std::size_t n = 0; n < batch.size(); ++n) out.push_back(particle(batch, n));
  return out;
}

namespace {

void check_finite(const Var& v, const char* what, std::size_t step, std::size_t row_width) {
  const Tensor& t = v.value();
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (!std::isfinite(t[i])) {
      const std::size_t n = i / row_width;
      std::ostringstream msg;
      msg << "rollout: non-finite " << what << " at step " << step << ", particle " << n;
      throw FlowError(msg.str(), step, n);
    }
  }
}

void check_state(const FlowBatch& b, std::size_t step) {
  const std::size_t d = b.dim();
  check_finite(b.z, "z", step, d);
  check_finite(b.l, "l", step, 1);
  check_finite(b.ltilde, "ltilde", step, 1);
  check_finite(b.s, "s", step, d);
  if (b.has_h()) check_finite(b.h, "H", step, d * d);
}

}  // namespace

Trajectory rollout(const FlowBatch& init, const BoundField& field, const RolloutOptions& opts,
                   const StepHook& hook) {
  if (!(opts.dt > 0.0)) throw std::invalid_argument("rollout: dt must be positive");
  if (opts.propagate_h && !init.has_h()) {
    throw std::invalid_argument("rollout: Hessian propagation requested without an initial H");
  }
  Trajectory tr;
  FlowBatch cur = init;
  if (!opts.propagate_h) cur.h = Var();
  check_state(cur, 0);
  tr.times.push_back(opts.t0);
  tr.states.push_back(cur);

  std::size_t guard_hits = 0;
  for (std::size_t j = 0; j < opts.n_steps; ++j) {
    const double t = opts.t0 + static_cast<double>(j) * opts.dt;
    const auto ev = field.evaluate(t, j, cur.z);
    if (hook) hook(j, t, cur, *ev);
    const Var& f = ev->value();
    if (opts.record_full) tr.velocities.push_back(f);

    const Var div = ev->divergence();
    for (std::size_t n = 0; n < div.size(); ++n) {
      const double g = std::fabs(opts.dt * div.value()[n]);
      if (g > kDivergenceGuard) {
        if (guard_hits == 0) {
          std::ostringstream msg;
          msg << "divergence guard: |dt*div| = " << g << " at step " << j << ", particle " << n;
          tr.warnings.push_back(msg.str());
        }
        ++guard_hits;
        break;
      }
    }

    FlowBatch next;
    next.z = ad::add(cur.z, ad::scale(f, opts.dt));
    next.l = ad::sub(cur.l, ad::scale(div, opts.dt));
    next.ltilde = ad::sub(cur.ltilde, ad::scale(ad::mul(div, cur.ltilde), opts.dt));
    Var ds = ev->jac_t_times(cur.s);
    const Var gd = ev->grad_divergence();
    if (gd.defined()) ds = ad::add(ds, gd);
    next.s = ad::sub(cur.s, ad::scale(ds, opts.dt));
    if (opts.propagate_h) next.h = ad::sub(cur.h, ad::scale(ev->hessian_rhs(cur.s, cur.h), opts.dt));
    check_state(next, j + 1);
    cur = std::move(next);
    if (opts.record_full) {
      tr.times.push_back(opts.t0 + static_cast<double>(j + 1) * opts.dt);
      tr.states.push_back(cur);
    }
  }

  const double t_end = opts.t0 + static_cast<double>(opts.n_steps) * opts.dt;
  if (!opts.record_full) {
    tr.times.push_back(t_end);
    tr.states.push_back(cur);
  }
  if (hook || (opts.record_full && opts.final_velocity)) {
    const auto ev = field.evaluate(t_end, opts.n_steps, cur.z);
    if (hook) hook(opts.n_steps, t_end, cur, *ev);
    if (opts.record_full && opts.final_velocity) tr.velocities.push_back(ev->value());
  }
  if (guard_hits > 1) {
    tr.warnings.push_back("divergence guard tripped on " + std::to_string(guard_hits) + " steps");
  }
  return tr;
}

std::vector<Eigen::VectorXd> score_via_sensitivity(const std::vector<FlowState>& init,
                                                   const VelocityField& field,
                                                   std::size_t n_steps, double dt, double t0) {
  if (!(dt > 0.0)) throw std::invalid_argument("score_via_sensitivity: dt must be positive");
  std::vector<Eigen::VectorXd> out;
  out.reserve(init.size());
  for (std::size_t n = 0; n < init.size(); ++n) {
    const Eigen::Index d = init[n].z.size();
    const Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(d, d);
    const Eigen::VectorXd zero = Eigen::VectorXd::Zero(d);
    Eigen::VectorXd z = init[n].z;
    Eigen::MatrixXd jz = eye;
    Eigen::VectorXd gl = init[n].s;
    for (std::size_t j = 0; j < n_steps; ++j) {
      const double t = t0 + static_cast<double>(j) * dt;
      const FirstOrderTerms fo = field.first_order(t, z, zero);
      const Eigen::MatrixXd step = eye + dt * field.jacobian(t, z);
      if (std::fabs(step.determinant()) < 1e-12) {
        throw FlowError("score_via_sensitivity: singular step Jacobian (dt*jac too large) at step " +
                            std::to_string(j) + ", particle " + std::to_string(n),
                        j, n);
      }
      gl -= dt * (jz.transpose() * fo.grad_div);
      jz = step * jz;
      z += dt * fo.f;
    }
    const Eigen::PartialPivLU<Eigen::MatrixXd> lu(jz.transpose());
    out.push_back(lu.solve(gl));
  }
  return out;
}

Eigen::VectorXd score_rollout_point(const FlowState& init, const VelocityField& field,
                                    std::size_t n_steps, double dt, double t0) {
  Eigen::VectorXd z = init.z;
  Eigen::VectorXd s = init.s;
  for (std::size_t j = 0; j < n_steps; ++j) {
    const double t = t0 + static_cast<double>(j) * dt;
    const FirstOrderTerms fo = field.first_order(t, z, s);
    s -= dt * (fo.jac_t_s + fo.grad_div);
    z += dt * fo.f;
  }
  return s;
}

void write_trajectory_header(std::ostream& os, std::size_t dim) {
  os << "run,particle,j,t";
  for (std::size_t i = 1; i <= dim; ++i) os << ",z_" << i;
  os << ",l,ltilde";
  for (std::size_t i = 1; i <= dim; ++i) os << ",s_" << i;
  os << '\n';
}

void write_trajectory_rows(std::ostream& os, const Trajectory& traj, std::size_t run,
                           std::size_t max_particles) {
  for (std::size_t j = 0; j < traj.states.size(); ++j) {
    const FlowBatch& b = traj.states[j];
    const std::size_t d = b.dim();
    const std::size_t n_out = std::min(b.size(), max_particles);
    for (std::size_t n = 0; n < n_out; ++n) {
      os << run << ',' << n << ',' << j << ',' << fmt_double(traj.times[j]);
      for (std::size_t i = 0; i < d; ++i) os << ',' << fmt_double(b.z.value().at(n, i));
      os << ',' << fmt_double(b.l.value()[n]) << ',' << fmt_double(b.ltilde.value()[n]);
      for (std::size_t i = 0; i < d; ++i) os << ',' << fmt_double(b.s.value().at(n, i));
      os << '\n';
    }
  }
}

}  // namespace scoreflow
