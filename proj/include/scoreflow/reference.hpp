#pragma once

// Ground-truth generators for problems without a Gaussian solution.
//
// Double well: the terminal density, score and the velocity at t = 0 and
// t_end from the kernel representation of the solution, with every integral
// replaced by a Riemann sum on a regular grid. The Gaussian factor of the
// kernel separates across axes, so each sum is a chain of 1-d contractions.
//
//   K(x, y)  = exp(-|x - y|^2 / (4 gamma T))
//   h(y)     = sum_z exp(-G(z) / (2 gamma)) K(z, y) dz           (inner grid)
//   rho_T(x) = exp(-G(x) / (2 gamma)) sum_y K(x, y) rho_0(y) / h(y) dy   (outer grid)
//   s_T(x)   = -grad G(x) / (2 gamma) - E_w[x - y] / (2 gamma T)
//   f_0(x)   = E_v[y - x] / T - gamma grad log rho_0(x)
//   f_T(x)   = -grad G(x) - gamma s_T(x)
//
// w is the y-weight of rho_T(x), v the inner-grid weight of h(x).

#include <Eigen/Dense>
#include <functional>
#include <vector>

#include "scoreflow/problems.hpp"

namespace scoreflow {

struct GridAxis {
  double lo = 0.0;
  double step = 0.01;
  std::size_t n = 1;

  double hi() const { return lo + step * static_cast<double>(n - 1); }
  double node(std::size_t i) const { return lo + step * static_cast<double>(i); }
  static GridAxis span(double lo, double hi, double step);
};

// Values of a vector-valued function on a tensor grid (1 or 2 axes), point
// index row-major over axes, comps values per point. Linear / bilinear
// interpolation; queries outside the grid throw std::out_of_range.
class GridFunction {
 public:
  GridFunction() = default;
  GridFunction(std::vector<GridAxis> axes, std::size_t comps);

  std::size_t dim() const { return axes_.size(); }
  std::size_t comps() const { return comps_; }
  std::size_t points() const;
  const std::vector<GridAxis>& axes() const { return axes_; }
  Eigen::VectorXd node(std::size_t point) const;
  double& at(std::size_t point, std::size_t comp) { return values_[point * comps_ + comp]; }
  double at(std::size_t point, std::size_t comp) const { return values_[point * comps_ + comp]; }

  bool contains(const Eigen::VectorXd& x) const;
  Eigen::VectorXd operator()(const Eigen::VectorXd& x) const;

 private:
  std::vector<GridAxis> axes_;
  std::size_t comps_ = 1;
  std::vector<double> values_;
};

struct QuadratureSettings {
  double inner = 6.0;  // integration box [-inner, inner]^d
  double outer = 4.0;  // evaluation box [-outer, outer]^d
  double step = 0.0;   // 0 picks the default for the dimension
  // Trapezoid weights per axis in 1d, plain box sums otherwise.
  static double default_step(std::size_t dim) { return dim == 1 ? 0.01 : 0.05; }
};

struct QuadratureGrid {
  std::size_t dim = 1;
  double gamma = 0.1;
  double t_end = 1.0;
  QuadratureSettings settings;
  GridAxis inner;
  GridAxis outer;
  std::vector<double> inner_weights;  // per-axis quadrature weights
  std::vector<double> outer_weights;
  GridFunction h;                     // h(y) cached on the outer grid
};

// Builds the grids and the h cache. d must be 1 or 2, the problem must have a
// point-wise terminal cost and no drift.
QuadratureGrid make_quadrature_grid(const ProblemSpec& spec, QuadratureSettings settings = {});

// h(y) by a direct sum over the inner grid.
double kernel_h(const Eigen::VectorXd& y, const ProblemSpec& spec, const QuadratureGrid& grid);

struct TerminalReference {
  GridFunction rho;    // 1 comp
  GridFunction score;  // d comps
  GridFunction f;      // d comps
  double mass = 0.0;   // quadrature integral of rho over the outer grid
};

TerminalReference reference_terminal(const ProblemSpec& spec, const QuadratureGrid& grid);
GridFunction reference_initial_velocity(const ProblemSpec& spec, const QuadratureGrid& grid);

// Sigma' = A Sigma + Sigma A^T by classical RK4 on a fine grid, returned at
// t0 + j dt_coarse for j = 0..n_coarse. dt_fine must divide dt_coarse and be
// at most dt_coarse / 10.
std::vector<Eigen::MatrixXd> covariance_ode_integrate(
    const std::function<Eigen::MatrixXd(double t)>& a, const Eigen::MatrixXd& sigma0, double t0,
    double dt_coarse, std::size_t n_coarse, double dt_fine);

}  // namespace scoreflow
