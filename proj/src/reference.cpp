#include "scoreflow/reference.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace scoreflow {

GridAxis GridAxis::span(double lo, double hi, double step) {
  if (!(step > 0.0) || !(hi > lo)) throw std::invalid_argument("grid axis: need hi > lo and step > 0");
  GridAxis a;
  a.lo = lo;
  a.step = step;
  a.n = static_cast<std::size_t>(std::llround((hi - lo) / step)) + 1;
  return a;
}

GridFunction::GridFunction(std::vector<GridAxis> axes, std::size_t comps)
    : axes_(std::move(axes)), comps_(comps) {
  if (axes_.empty() || axes_.size() > 2) throw std::invalid_argument("grid function: 1 or 2 axes");
  values_.assign(points() * comps_, 0.0);
}

std::size_t GridFunction::points() const {
  std::size_t n = 1;
  for (const GridAxis& a : axes_) n *= a.n;
  return n;
}

Eigen::VectorXd GridFunction::node(std::size_t point) const {
  Eigen::VectorXd x(static_cast<Eigen::Index>(dim()));
  for (std::size_t a = dim(); a-- > 0;) {
    x[static_cast<Eigen::Index>(a)] = axes_[a].node(point % axes_[a].n);
    point /= axes_[a].n;
  }
  return x;
}

bool GridFunction::contains(const Eigen::VectorXd& x) const {
  if (static_cast<std::size_t>(x.size()) != dim()) return false;
  for (std::size_t a = 0; a < dim(); ++a) {
    const double v = x[static_cast<Eigen::Index>(a)];
    if (!(v >= axes_[a].lo - 1e-12 && v <= axes_[a].hi() + 1e-12)) return false;
  }
  return true;
}

Eigen::VectorXd GridFunction::operator()(const Eigen::VectorXd& x) const {
  if (!contains(x)) {
    std::ostringstream msg;
    msg << "grid function: query (" << x.transpose() << ") outside the grid";
    throw std::out_of_range(msg.str());
  }
  std::size_t idx[2] = {0, 0};
  double frac[2] = {0.0, 0.0};
  for (std::size_t a = 0; a < dim(); ++a) {
    const GridAxis& ax = axes_[a];
    if (ax.n == 1) continue;
    const double u = (x[static_cast<Eigen::Index>(a)] - ax.lo) / ax.step;
    const double i = std::clamp(std::floor(u), 0.0, static_cast<double>(ax.n - 2));
    idx[a] = static_cast<std::size_t>(i);
    frac[a] = std::clamp(u - i, 0.0, 1.0);
  }
  Eigen::VectorXd out = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(comps_));
  if (dim() == 1) {
    const std::size_t i1 = axes_[0].n == 1 ? idx[0] : idx[0] + 1;
    for (std::size_t c = 0; c < comps_; ++c) {
      out[static_cast<Eigen::Index>(c)] = (1.0 - frac[0]) * at(idx[0], c) + frac[0] * at(i1, c);
    }
    return out;
  }
  const std::size_t n1 = axes_[1].n;
  const std::size_t i0b = axes_[0].n == 1 ? idx[0] : idx[0] + 1;
  const std::size_t i1b = n1 == 1 ? idx[1] : idx[1] + 1;
  for (std::size_t c = 0; c < comps_; ++c) {
    const double v00 = at(idx[0] * n1 + idx[1], c), v01 = at(idx[0] * n1 + i1b, c);
    const double v10 = at(i0b * n1 + idx[1], c), v11 = at(i0b * n1 + i1b, c);
    out[static_cast<Eigen::Index>(c)] = (1.0 - frac[0]) * ((1.0 - frac[1]) * v00 + frac[1] * v01) +
                                        frac[0] * ((1.0 - frac[1]) * v10 + frac[1] * v11);
  }
  return out;
}

namespace {

std::vector<double> axis_weights(const GridAxis& ax, bool trapezoid) {
  std::vector<double> w(ax.n, ax.step);
  if (trapezoid && ax.n > 1) w.front() = w.back() = 0.5 * ax.step;
  return w;
}

// K(o, i) = exp(-(x_o - z_i)^2 / (4 gamma T)) w_i, optionally times (x_o - z_i).
Eigen::MatrixXd kernel_matrix(const GridAxis& out, const GridAxis& in, const std::vector<double>& w,
                              double gamma, double t_end, bool moment) {
  Eigen::MatrixXd k(static_cast<Eigen::Index>(out.n), static_cast<Eigen::Index>(in.n));
  const double c = 1.0 / (4.0 * gamma * t_end);
  for (std::size_t o = 0; o < out.n; ++o) {
    const double x = out.node(o);
    for (std::size_t i = 0; i < in.n; ++i) {
      const double r = x - in.node(i);
      double v = std::exp(-c * r * r) * w[i];
      if (moment) v *= r;
      k(static_cast<Eigen::Index>(o), static_cast<Eigen::Index>(i)) = v;
    }
  }
  return k;
}

// Values on a grid as a matrix: a column vector in 1d, (i0, i1) in 2d.
Eigen::MatrixXd grid_values(std::size_t dim, const GridAxis& ax,
                            const std::function<double(const Eigen::VectorXd&)>& fn) {
  const auto n = static_cast<Eigen::Index>(ax.n);
  if (dim == 1) {
    Eigen::MatrixXd out(n, 1);
    Eigen::VectorXd x(1);
    for (Eigen::Index i = 0; i < n; ++i) {
      x[0] = ax.node(static_cast<std::size_t>(i));
      out(i, 0) = fn(x);
    }
    return out;
  }
  Eigen::MatrixXd out(n, n);
  Eigen::VectorXd x(2);
  for (Eigen::Index i = 0; i < n; ++i) {
    x[0] = ax.node(static_cast<std::size_t>(i));
    for (Eigen::Index k = 0; k < n; ++k) {
      x[1] = ax.node(static_cast<std::size_t>(k));
      out(i, k) = fn(x);
    }
  }
  return out;
}

// Separable contraction: k0 along axis 0, k1 along axis 1 (ignored in 1d).
Eigen::MatrixXd contract(std::size_t dim, const Eigen::MatrixXd& k0, const Eigen::MatrixXd& k1,
                         const Eigen::MatrixXd& g) {
  if (dim == 1) return k0 * g;
  return k0 * g * k1.transpose();
}

GridFunction to_grid(std::size_t dim, const GridAxis& ax, const std::vector<Eigen::MatrixXd>& comps) {
  GridFunction out(std::vector<GridAxis>(dim, ax), comps.size());
  const std::size_t n = ax.n;
  for (std::size_t c = 0; c < comps.size(); ++c) {
    for (std::size_t p = 0; p < out.points(); ++p) {
      const auto r = static_cast<Eigen::Index>(dim == 1 ? p : p / n);
      const auto k = static_cast<Eigen::Index>(dim == 1 ? 0 : p % n);
      out.at(p, c) = comps[c](r, k);
    }
  }
  return out;
}

void check_supported(const ProblemSpec& spec) {
  if (spec.dim != 1 && spec.dim != 2) {
    throw std::invalid_argument("reference: quadrature references support d = 1 or 2, got d = " +
                                std::to_string(spec.dim));
  }
  if (!spec.terminal_point || !spec.terminal_grad || spec.drift || spec.mf_cost) {
    throw std::invalid_argument("reference: problem '" + spec.name +
                                "' is not a pure terminal-cost problem");
  }
}

double g_factor(const ProblemSpec& spec, const Eigen::VectorXd& z) {
  return std::exp(-spec.terminal_point(z) / (2.0 * spec.gamma));
}

}  // namespace

QuadratureGrid make_quadrature_grid(const ProblemSpec& spec, QuadratureSettings settings) {
  check_supported(spec);
  if (settings.step == 0.0) settings.step = QuadratureSettings::default_step(spec.dim);
  if (!(settings.step > 0.0) || !(settings.outer > 0.0) || !(settings.inner >= settings.outer)) {
    throw std::invalid_argument("reference: need step > 0 and inner >= outer > 0");
  }
  QuadratureGrid q;
  q.dim = spec.dim;
  q.gamma = spec.gamma;
  q.t_end = spec.t_end - spec.t0;
  q.settings = settings;
  q.inner = GridAxis::span(-settings.inner, settings.inner, settings.step);
  q.outer = GridAxis::span(-settings.outer, settings.outer, settings.step);
  const bool trap = spec.dim == 1;
  q.inner_weights = axis_weights(q.inner, trap);
  q.outer_weights = axis_weights(q.outer, trap);

  const Eigen::MatrixXd k = kernel_matrix(q.outer, q.inner, q.inner_weights, q.gamma, q.t_end, false);
  const Eigen::MatrixXd g =
      grid_values(q.dim, q.inner, [&](const Eigen::VectorXd& z) { return g_factor(spec, z); });
  q.h = to_grid(q.dim, q.outer, {contract(q.dim, k, k, g)});
  return q;
}

double kernel_h(const Eigen::VectorXd& y, const ProblemSpec& spec, const QuadratureGrid& grid) {
  if (static_cast<std::size_t>(y.size()) != grid.dim) throw std::invalid_argument("kernel_h: dim");
  const double c = 1.0 / (4.0 * grid.gamma * grid.t_end);
  const std::size_t n = grid.inner.n;
  double sum = 0.0;
  Eigen::VectorXd z(y.size());
  if (grid.dim == 1) {
    for (std::size_t i = 0; i < n; ++i) {
      z[0] = grid.inner.node(i);
      const double r = z[0] - y[0];
      sum += g_factor(spec, z) * std::exp(-c * r * r) * grid.inner_weights[i];
    }
    return sum;
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < n; ++k) {
      z[0] = grid.inner.node(i);
      z[1] = grid.inner.node(k);
      const double r2 = (z - y).squaredNorm();
      sum += g_factor(spec, z) * std::exp(-c * r2) * grid.inner_weights[i] * grid.inner_weights[k];
    }
  }
  return sum;
}

TerminalReference reference_terminal(const ProblemSpec& spec, const QuadratureGrid& grid) {
  check_supported(spec);
  const std::size_t d = grid.dim;
  const GridAxis& ax = grid.outer;
  const double gamma = grid.gamma, t_end = grid.t_end;

  Eigen::MatrixXd q = grid_values(d, ax, [&](const Eigen::VectorXd& y) {
    return spec.init.density(y);
  });
  for (std::size_t p = 0; p < grid.h.points(); ++p) {
    const auto r = static_cast<Eigen::Index>(d == 1 ? p : p / ax.n);
    const auto k = static_cast<Eigen::Index>(d == 1 ? 0 : p % ax.n);
    q(r, k) /= grid.h.at(p, 0);
  }
  const Eigen::MatrixXd k = kernel_matrix(ax, ax, grid.outer_weights, gamma, t_end, false);
  const Eigen::MatrixXd m = kernel_matrix(ax, ax, grid.outer_weights, gamma, t_end, true);
  const Eigen::MatrixXd den = contract(d, k, k, q);
  std::vector<Eigen::MatrixXd> num;
  num.push_back(contract(d, m, k, q));
  if (d == 2) num.push_back(contract(d, k, m, q));

  TerminalReference ref;
  ref.rho = GridFunction(std::vector<GridAxis>(d, ax), 1);
  ref.score = GridFunction(std::vector<GridAxis>(d, ax), d);
  ref.f = GridFunction(std::vector<GridAxis>(d, ax), d);
  for (std::size_t p = 0; p < ref.rho.points(); ++p) {
    const auto r = static_cast<Eigen::Index>(d == 1 ? p : p / ax.n);
    const auto c = static_cast<Eigen::Index>(d == 1 ? 0 : p % ax.n);
    const Eigen::VectorXd x = ref.rho.node(p);
    const Eigen::VectorXd grad_g = spec.terminal_grad(x);
    const double rho = g_factor(spec, x) * den(r, c);
    ref.rho.at(p, 0) = rho;
    double w = d == 1 ? grid.outer_weights[p] : grid.outer_weights[static_cast<std::size_t>(r)] *
                                                    grid.outer_weights[static_cast<std::size_t>(c)];
    ref.mass += rho * w;
    for (std::size_t a = 0; a < d; ++a) {
      const auto ai = static_cast<Eigen::Index>(a);
      const double s = -grad_g[ai] / (2.0 * gamma) - num[a](r, c) / den(r, c) / (2.0 * gamma * t_end);
      ref.score.at(p, a) = s;
      ref.f.at(p, a) = -grad_g[ai] - gamma * s;
    }
  }
  return ref;
}

GridFunction reference_initial_velocity(const ProblemSpec& spec, const QuadratureGrid& grid) {
  check_supported(spec);
  const std::size_t d = grid.dim;
  const Eigen::MatrixXd g =
      grid_values(d, grid.inner, [&](const Eigen::VectorXd& z) { return g_factor(spec, z); });
  const Eigen::MatrixXd k =
      kernel_matrix(grid.outer, grid.inner, grid.inner_weights, grid.gamma, grid.t_end, false);
  const Eigen::MatrixXd m =
      kernel_matrix(grid.outer, grid.inner, grid.inner_weights, grid.gamma, grid.t_end, true);
  std::vector<Eigen::MatrixXd> num;
  num.push_back(contract(d, m, k, g));
  if (d == 2) num.push_back(contract(d, k, m, g));

  GridFunction f0(std::vector<GridAxis>(d, grid.outer), d);
  const std::size_t n = grid.outer.n;
  for (std::size_t p = 0; p < f0.points(); ++p) {
    const auto r = static_cast<Eigen::Index>(d == 1 ? p : p / n);
    const auto c = static_cast<Eigen::Index>(d == 1 ? 0 : p % n);
    const Eigen::VectorXd x = f0.node(p);
    const Eigen::VectorXd s0 = spec.init.score(x);
    const double h = grid.h.at(p, 0);
    for (std::size_t a = 0; a < d; ++a) {
      // the moment matrix carries (x - y); E_v[y - x] is its negative
      f0.at(p, a) = -num[a](r, c) / h / grid.t_end - grid.gamma * s0[static_cast<Eigen::Index>(a)];
    }
  }
  return f0;
}

std::vector<Eigen::MatrixXd> covariance_ode_integrate(
    const std::function<Eigen::MatrixXd(double t)>& a, const Eigen::MatrixXd& sigma0, double t0,
    double dt_coarse, std::size_t n_coarse, double dt_fine) {
  if (!(dt_fine > 0.0) || !(dt_coarse > 0.0)) throw std::invalid_argument("covariance ode: steps must be > 0");
  const auto sub = static_cast<std::size_t>(std::llround(dt_coarse / dt_fine));
  if (sub < 10 || std::fabs(static_cast<double>(sub) * dt_fine - dt_coarse) > 1e-9 * dt_coarse) {
    throw std::invalid_argument("covariance ode: dt_fine must divide dt_coarse and be <= dt_coarse/10");
  }
  if (sigma0.rows() != sigma0.cols()) throw std::invalid_argument("covariance ode: Sigma0 not square");
  auto rhs = [&a](double t, const Eigen::MatrixXd& s) {
    const Eigen::MatrixXd as = a(t) * s;
    return Eigen::MatrixXd(as + as.transpose());
  };
  std::vector<Eigen::MatrixXd> out{sigma0};
  Eigen::MatrixXd s = sigma0;
  for (std::size_t j = 0; j < n_coarse; ++j) {
    for (std::size_t i = 0; i < sub; ++i) {
      const double t = t0 + static_cast<double>(j) * dt_coarse + static_cast<double>(i) * dt_fine;
      const Eigen::MatrixXd k1 = rhs(t, s);
      const Eigen::MatrixXd k2 = rhs(t + 0.5 * dt_fine, s + 0.5 * dt_fine * k1);
      const Eigen::MatrixXd k3 = rhs(t + 0.5 * dt_fine, s + 0.5 * dt_fine * k2);
      const Eigen::MatrixXd k4 = rhs(t + dt_fine, s + dt_fine * k3);
      s += dt_fine / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    out.push_back(s);
  }
  return out;
}

}  // namespace scoreflow
