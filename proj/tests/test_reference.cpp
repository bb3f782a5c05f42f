#include <cmath>

#include "doctest.h"
#include "scoreflow/reference.hpp"

using namespace scoreflow;

namespace {

constexpr double kPi = 3.14159265358979323846;

Eigen::VectorXd at(double x) { return Eigen::VectorXd::Constant(1, x); }

}  // namespace

TEST_CASE("grid axes and interpolation") {
  const GridAxis a = GridAxis::span(-4.0, 4.0, 0.01);
  CHECK(a.n == 801);
  CHECK(a.hi() == doctest::Approx(4.0));
  GridFunction g({GridAxis::span(0.0, 1.0, 0.5)}, 1);
  for (std::size_t i = 0; i < 3; ++i) g.at(i, 0) = 2.0 * g.node(i)[0];
  CHECK(g(at(0.3))[0] == doctest::Approx(0.6));
  CHECK(g.contains(at(1.0)));
  CHECK_FALSE(g.contains(at(1.01)));
  CHECK_THROWS_AS(g(at(1.5)), std::out_of_range);

  GridFunction g2({GridAxis::span(0.0, 1.0, 1.0), GridAxis::span(0.0, 2.0, 1.0)}, 1);
  for (std::size_t p = 0; p < g2.points(); ++p) {
    const Eigen::VectorXd x = g2.node(p);
    g2.at(p, 0) = 1.0 + 2.0 * x[0] + 3.0 * x[1] + x[0] * x[1];
  }
  const Eigen::Vector2d q(0.25, 1.5);
  CHECK(g2(q)[0] == doctest::Approx(1.0 + 0.5 + 4.5 + 0.375));
}

TEST_CASE("kernel normalizer") {
  const ProblemSpec flat = make_double_well(1, 0.1, 0.0);
  const QuadratureGrid grid = make_quadrature_grid(flat);
  CHECK(kernel_h(at(0.0), flat, grid) == doctest::Approx(std::sqrt(0.4 * kPi)).epsilon(1e-4));
  CHECK(std::sqrt(0.4 * kPi) == doctest::Approx(1.12100).epsilon(1e-5));

  const ProblemSpec p = make_double_well(1);
  const QuadratureGrid g = make_quadrature_grid(p);
  for (double y : {0.3, 1.1, 2.5}) CHECK(kernel_h(at(y), p, g) == doctest::Approx(kernel_h(at(-y), p, g)).epsilon(1e-12));
  QuadratureSettings half = g.settings;
  half.step /= 2.0;
  const QuadratureGrid gh = make_quadrature_grid(p, half);
  CHECK(std::fabs(kernel_h(at(0.0), p, g) - kernel_h(at(0.0), p, gh)) < 1e-6);
  // the cached h matches the direct sum
  CHECK(g.h(at(0.7))[0] == doctest::Approx(kernel_h(at(0.7), p, g)).epsilon(1e-10));
}

TEST_CASE("flat terminal cost reduces to heat flow") {
  const double gamma = 0.1;
  const ProblemSpec p = make_double_well(1, gamma, 0.0);
  const QuadratureGrid grid = make_quadrature_grid(p);
  const TerminalReference ref = reference_terminal(p, grid);
  const GridFunction f0 = reference_initial_velocity(p, grid);
  const double var = 1.0 + 2.0 * gamma;
  double worst_rho = 0.0, worst_f0 = 0.0;
  for (double x = -3.0; x <= 3.0; x += 0.05) {
    const double rho = std::exp(-x * x / (2 * var)) / std::sqrt(2 * kPi * var);
    worst_rho = std::max(worst_rho, std::fabs(ref.rho(at(x))[0] - rho));
    // with nothing to steer toward, the control vanishes and f = -gamma grad log rho
    worst_f0 = std::max(worst_f0, std::fabs(f0(at(x))[0] - gamma * x));
  }
  CHECK(worst_rho < 1e-3);
  CHECK(worst_f0 < 1e-3);
  CHECK(ref.mass == doctest::Approx(1.0).epsilon(1e-3));
}

TEST_CASE("double well reference shape") {
  const ProblemSpec p = make_double_well(1);
  const QuadratureGrid grid = make_quadrature_grid(p);
  const TerminalReference ref = reference_terminal(p, grid);
  const GridFunction f0 = reference_initial_velocity(p, grid);
  CHECK(ref.rho.points() == 801);
  CHECK(std::fabs(ref.score(at(0.0))[0]) < 1e-10);
  CHECK(std::fabs(f0(at(0.0))[0]) < 1e-10);

  // local maxima of rho_T on each side
  double best_neg = -1, arg_neg = 0, best_pos = -1, arg_pos = 0;
  for (std::size_t i = 0; i < ref.rho.points(); ++i) {
    const double x = ref.rho.node(i)[0], v = ref.rho.at(i, 0);
    if (x < 0 && v > best_neg) best_neg = v, arg_neg = x;
    if (x > 0 && v > best_pos) best_pos = v, arg_pos = x;
  }
  CHECK(std::fabs(arg_neg + 1.0) < 0.2);
  CHECK(std::fabs(arg_pos - 1.0) < 0.2);
  CHECK(ref.rho(at(0.0))[0] < 0.8 * best_pos);

  // f_0 pushes mass outward on the inner part of each side; beyond the
  // wells it turns back toward them
  for (double x = 0.25; x < 1.0; x += 0.05) {
    CHECK(f0(at(x))[0] > 0.0);
    CHECK(f0(at(-x))[0] < 0.0);
  }
  CHECK(f0(at(2.0))[0] < 0.0);
  CHECK(ref.mass == doctest::Approx(1.0).epsilon(1e-3));

  // f_T = -grad G - gamma s_T
  for (double x : {-1.7, -0.4, 0.9}) {
    CHECK(ref.f(at(x))[0] == doctest::Approx(-p.terminal_grad(at(x))[0] - p.gamma * ref.score(at(x))[0]).epsilon(1e-9));
  }
}

TEST_CASE("two-dimensional reference") {
  const ProblemSpec p = make_double_well(2);
  QuadratureSettings s;
  s.step = 0.1;
  const QuadratureGrid grid = make_quadrature_grid(p, s);
  const TerminalReference ref = reference_terminal(p, grid);
  CHECK(ref.mass == doctest::Approx(1.0).epsilon(1e-2));
  const Eigen::Vector2d a(1.0, 1.0), b(-1.0, -1.0), o(0.0, 0.0);
  CHECK(ref.rho(a)[0] == doctest::Approx(ref.rho(b)[0]).epsilon(1e-9));
  CHECK(ref.rho(a)[0] > ref.rho(o)[0]);
  CHECK(ref.score(o).norm() < 1e-9);
}

TEST_CASE("quadrature reproduces the rwpo closed form") {
  const ProblemSpec p = make_rwpo(1);
  QuadratureSettings s;
  // rho_0 / h is flat here, so both boxes must be wide for the y-sum to converge
  s.inner = 20.0;
  s.outer = 14.0;
  const QuadratureGrid grid = make_quadrature_grid(p, s);
  const TerminalReference ref = reference_terminal(p, grid);
  const GridFunction f0 = reference_initial_velocity(p, grid);
  const AnalyticSolution& a = *p.analytic;
  for (double x = -3.0; x <= 3.0; x += 0.25) {
    const Tensor z(Shape{1, 1}, std::vector<double>{x});
    CHECK(ref.rho(at(x))[0] == doctest::Approx(a.density(1.0, z)[0]).epsilon(1e-6));
    CHECK(ref.score(at(x))[0] == doctest::Approx(a.score(1.0, z)[0]).epsilon(1e-6));
    CHECK(ref.f(at(x))[0] == doctest::Approx(a.velocity(1.0, z)[0]).epsilon(1e-6));
    CHECK(f0(at(x))[0] == doctest::Approx(a.velocity(0.0, z)[0]).epsilon(1e-6));
  }
}

TEST_CASE("unsupported setups are rejected") {
  CHECK_THROWS(make_quadrature_grid(make_double_well(3)));
  CHECK_THROWS(make_quadrature_grid(make_double_moon()));
}

TEST_CASE("covariance ode") {
  Eigen::MatrixXd s0(2, 2);
  s0 << 2.0, 0.3, 0.3, 1.0;
  const auto still = covariance_ode_integrate([](double) { return Eigen::MatrixXd(Eigen::MatrixXd::Zero(2, 2)); }, s0, 0.0, 0.1, 10, 0.01);
  for (const auto& m : still) CHECK((m - s0).norm() == 0.0);

  const double a = 0.5;
  const auto grow = covariance_ode_integrate([a](double) { return Eigen::MatrixXd(a * Eigen::MatrixXd::Identity(2, 2)); }, s0, 0.0, 0.01, 100, 1e-4);
  CHECK((grow.back() - std::exp(2 * a) * s0).norm() < 1e-5);

  const auto skew = covariance_ode_integrate(
      [](double t) { return (Eigen::MatrixXd(2, 2) << -0.3, 1.0 + t, -2.0, 0.2).finished(); }, s0, 0.0, 0.05, 20, 0.005);
  for (const auto& m : skew) CHECK((m - m.transpose()).norm() == 0.0);
  CHECK_THROWS(covariance_ode_integrate([](double) { return Eigen::MatrixXd(Eigen::MatrixXd::Zero(2, 2)); }, s0, 0.0, 0.1, 1, 0.03));
}
