#include "scoreflow/metrics.hpp"

#include <cmath>
#include <stdexcept>

#include "scoreflow/training.hpp"

namespace scoreflow {

double mean_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size() || a.size() == 0) throw std::invalid_argument("mean_abs_diff: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::fabs(a[i] - b[i]);
  return s / static_cast<double>(a.size());
}

double mean_row_distance(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape() || a.rank() != 2 || a.dim(0) == 0) {
    throw std::invalid_argument("mean_row_distance: shape mismatch " + shape_string(a.shape()) + " vs " +
                                shape_string(b.shape()));
  }
  const std::size_t n = a.dim(0), d = a.dim(1);
  double s = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    double e = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      const double x = a.at(r, i) - b.at(r, i);
      e += x * x;
    }
    s += std::sqrt(e);
  }
  return s / static_cast<double>(n);
}

Tensor carried_density(const ProblemSpec& spec, const FlowBatch& batch) {
  if (spec.density_input == DensityInput::LogDensity) {
    Tensor out = batch.l.value();
    for (double& v : out.values()) v = std::exp(v);
    return out;
  }
  return batch.ltilde.value();
}

double err_rho(const Tensor& rho_flow, const Tensor& rho_true) { return mean_abs_diff(rho_flow, rho_true); }

double err_f(const Trajectory& traj, const std::function<Tensor(double t, const Tensor& z)>& f_true) {
  if (traj.velocities.size() != traj.states.size()) {
    throw std::invalid_argument("err_f: trajectory needs a velocity at every snapshot");
  }
  double s = 0.0;
  for (std::size_t j = 0; j < traj.states.size(); ++j) {
    s += mean_row_distance(traj.velocities[j].value(), f_true(traj.times[j], traj.states[j].z.value()));
  }
  return s / static_cast<double>(traj.states.size());
}

double err_s(const FlowBatch& final, const Tensor& s_true) {
  return mean_row_distance(final.s.value(), s_true);
}

GridSample sample_grid(const GridFunction& g, const Tensor& z) {
  const std::size_t n = z.dim(0), d = z.dim(1);
  if (d != g.dim()) throw std::invalid_argument("sample_grid: dimension mismatch");
  GridSample out;
  std::vector<double> vals;
  Eigen::VectorXd x(static_cast<Eigen::Index>(d));
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t i = 0; i < d; ++i) x[static_cast<Eigen::Index>(i)] = z.at(r, i);
    if (!g.contains(x)) {
      ++out.outside;
      continue;
    }
    const Eigen::VectorXd v = g(x);
    out.rows.push_back(r);
    vals.insert(vals.end(), v.data(), v.data() + v.size());
  }
  out.values = Tensor(Shape{out.rows.size(), g.comps()}, std::move(vals));
  return out;
}

double grid_error(const Tensor& pred, const GridSample& sample) {
  if (sample.rows.empty()) throw std::invalid_argument("grid_error: no particle inside the reference grid");
  const std::size_t c = sample.values.dim(1);
  const std::size_t width = pred.rank() == 1 ? 1 : pred.dim(1);
  if (width != c) throw std::invalid_argument("grid_error: component mismatch");
  double s = 0.0;
  for (std::size_t k = 0; k < sample.rows.size(); ++k) {
    double e = 0.0;
    for (std::size_t i = 0; i < c; ++i) {
      const double x = pred[sample.rows[k] * c + i] - sample.values.at(k, i);
      e += x * x;
    }
    s += std::sqrt(e);
  }
  return s / static_cast<double>(sample.rows.size());
}

double err_A(const QuadraticPsiField& field, const AnalyticSolution& sol) {
  if (!sol.psi_A) throw std::invalid_argument("err_A: no analytic A");
  double s = 0.0;
  for (std::size_t j = 0; j <= field.n_steps(); ++j) {
    const double t = field.t0() + static_cast<double>(j) * field.dt();
    s += (field.A(j) - sol.psi_A(t)).norm();
  }
  return s / static_cast<double>(field.n_steps() + 1);
}

double err_B(const QuadraticPsiField& field, const AnalyticSolution& sol) {
  if (!sol.psi_B) throw std::invalid_argument("err_B: no analytic B");
  double s = 0.0;
  for (std::size_t j = 0; j <= field.n_steps(); ++j) {
    const double t = field.t0() + static_cast<double>(j) * field.dt();
    s += (field.B(j) - sol.psi_B(t)).norm();
  }
  return s / static_cast<double>(field.n_steps() + 1);
}

InfoResidual info_residual(const FlowBatch& batch, double t) {
  if (!batch.has_h()) throw std::invalid_argument("info_residual: batch carries no H");
  const std::size_t n = batch.size(), d = batch.dim();
  const Tensor& h = batch.h.value();
  const Tensor& s = batch.s.value();
  double sum = 0.0, sum_sq = 0.0;
  for (std::size_t p = 0; p < n; ++p) {
    double r = 0.0;
    for (std::size_t i = 0; i < d; ++i) r += h.at(p, i, i) + s.at(p, i) * s.at(p, i);
    sum += r;
    sum_sq += r * r;
  }
  const double nn = static_cast<double>(n);
  InfoResidual out;
  out.t = t;
  out.value = sum / nn;
  out.stderr_ = n > 1 ? std::sqrt(std::max(0.0, sum_sq / nn - out.value * out.value) / (nn - 1.0)) : 0.0;
  return out;
}

double optimal_cost(const ProblemSpec& spec) {
  if (!spec.analytic) throw std::invalid_argument("optimal_cost: problem '" + spec.name + "' has no analytic solution");
  if (spec.analytic->optimal_cost) return *spec.analytic->optimal_cost;
  return optimal_cost_mc(spec).mean;
}

namespace {

void side_fractions(const FlowBatch& b, ErrorReport& rep) {
  const Tensor& z = b.z.value();
  std::size_t neg = 0, pos = 0;
  for (std::size_t r = 0; r < b.size(); ++r) {
    if (z.at(r, 0) < 0.0) ++neg;
    if (z.at(r, 0) > 0.0) ++pos;
  }
  rep.metrics["frac_x1_neg"] = static_cast<double>(neg) / static_cast<double>(b.size());
  rep.metrics["frac_x1_pos"] = static_cast<double>(pos) / static_cast<double>(b.size());
}

}  // namespace

ErrorReport evaluate_field(const ProblemSpec& spec, const VelocityField& field, const EvalOptions& opts) {
  const double t0 = opts.interval ? opts.interval->first : spec.t0;
  const double t1 = opts.interval ? opts.interval->second : spec.t_end;
  const double dt = step_size(t0, t1, opts.n_steps);

  FlowBatch init;
  if (opts.init) {
    init = *opts.init;
  } else {
    std::mt19937_64 rng(opts.seed);
    init = sample_initial_batch(spec, opts.n_z, rng, opts.propagate_h);
  }
  RolloutOptions ro;
  ro.n_steps = opts.n_steps;
  ro.dt = dt;
  ro.t0 = t0;
  ro.propagate_h = opts.propagate_h && init.has_h();
  ro.record_full = true;
  ro.final_velocity = true;
  const auto bound = field.bind(nullptr);
  const Trajectory traj = rollout(init, *bound, ro);

  ErrorReport rep;
  rep.warnings = traj.warnings;
  const FlowBatch& fin = traj.final();
  const double cost = cost_loss(traj, spec, dt).item();
  rep.metrics["cost"] = cost;

  if (spec.analytic && !opts.interval) {
    const AnalyticSolution& sol = *spec.analytic;
    const Tensor& zt = fin.z.value();
    rep.metrics["err_rho"] = err_rho(carried_density(spec, fin), sol.density(t1, zt));
    rep.metrics["err_f"] = err_f(traj, sol.velocity);
    rep.metrics["err_s"] = err_s(fin, sol.score(t1, zt));
    rep.metrics["cost_gap"] = cost - optimal_cost(spec);
    if (const auto* q = dynamic_cast<const QuadraticPsiField*>(&field)) {
      rep.metrics["err_A"] = err_A(*q, sol);
      rep.metrics["err_B"] = err_B(*q, sol);
    }
  }
  if (opts.terminal) {
    const GridSample end = sample_grid(opts.terminal->rho, fin.z.value());
    rep.outside_grid = end.outside;
    rep.metrics["err_rho"] = grid_error(carried_density(spec, fin), end);
    rep.metrics["err_s"] = grid_error(fin.s.value(), sample_grid(opts.terminal->score, fin.z.value()));
    rep.metrics["err_fend"] = grid_error(traj.velocities.back().value(),
                                         sample_grid(opts.terminal->f, fin.z.value()));
    if (end.outside > 0) {
      rep.warnings.push_back(std::to_string(end.outside) + " terminal particles outside the reference grid");
    }
  }
  if (opts.initial_velocity) {
    const GridSample start = sample_grid(*opts.initial_velocity, init.z.value());
    rep.outside_grid += start.outside;
    rep.metrics["err_f0"] = grid_error(traj.velocities.front().value(), start);
  }
  if (spec.name == "double_well" || spec.name == "double_moon") side_fractions(fin, rep);
  if (ro.propagate_h) {
    for (std::size_t j : {std::size_t{0}, opts.n_steps / 2, opts.n_steps}) {
      rep.info.push_back(info_residual(traj.states[j], traj.times[j]));
    }
  }
  return rep;
}

Aggregate aggregate(const std::vector<double>& values) {
  Aggregate a;
  a.values = values;
  if (values.empty()) return a;
  double s = 0.0;
  for (double v : values) s += v;
  a.mean = s / static_cast<double>(values.size());
  if (values.size() > 1) {
    double q = 0.0;
    for (double v : values) q += (v - a.mean) * (v - a.mean);
    a.std = std::sqrt(q / static_cast<double>(values.size() - 1));
  }
  return a;
}

std::map<std::string, Aggregate> aggregate_reports(const std::vector<ErrorReport>& reports) {
  std::map<std::string, std::vector<double>> cols;
  for (const ErrorReport& r : reports) {
    for (const auto& [k, v] : r.metrics) cols[k].push_back(v);
  }
  std::map<std::string, Aggregate> out;
  for (const auto& [k, v] : cols) out[k] = aggregate(v);
  return out;
}

}  // namespace scoreflow
