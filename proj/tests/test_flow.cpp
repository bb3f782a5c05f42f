#include <cmath>
#include <random>
#include <sstream>

#include "doctest.h"
#include "scoreflow/flow.hpp"
#include "scoreflow/metrics.hpp"
#include "scoreflow/problems.hpp"
#include "scoreflow/reference.hpp"

using namespace scoreflow;

namespace {

// f(t, z) = a z on every grid time
QuadraticPsiField linear_field(std::size_t d, std::size_t n_steps, double dt, const Eigen::MatrixXd& a) {
  QuadraticPsiField q(d, n_steps, dt);
  for (std::size_t j = 0; j <= n_steps; ++j) q.set_A(j, a);
  return q;
}

FlowState state1(double z, double l, double lt, double s, double h) {
  FlowState st;
  st.z = Eigen::VectorXd::Constant(1, z);
  st.l = l;
  st.ltilde = lt;
  st.s = Eigen::VectorXd::Constant(1, s);
  st.H = Eigen::MatrixXd::Constant(1, 1, h);
  return st;
}

FlowBatch gaussian_batch(const ProblemSpec& spec, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sample_initial_batch(spec, n, rng, true);
}

}  // namespace

TEST_CASE("right-hand side by hand for a linear field") {
  const QuadraticPsiField q = linear_field(1, 1, 0.01, Eigen::MatrixXd::Ones(1, 1));
  const FlowState st = state1(1.0, 0.0, 0.5, -1.0, -1.0);
  const SpatialDerivatives sd = q.spatial_derivatives(0.0, st.z);
  const FlowState inc = rhs(st, q.eval(0.0, st.z), sd);
  CHECK(inc.z[0] == doctest::Approx(1.0));
  CHECK(inc.l == doctest::Approx(-1.0));
  CHECK(inc.ltilde == doctest::Approx(-0.5));
  CHECK(inc.s[0] == doctest::Approx(1.0));
  CHECK(inc.H(0, 0) == doctest::Approx(2.0));
}

TEST_CASE("zero field leaves the state unchanged") {
  const QuadraticPsiField q(2, 5, 0.2);
  std::mt19937_64 rng(1);
  const ProblemSpec spec = make_rwpo(2);
  const FlowBatch init = gaussian_batch(spec, 10, 3);
  RolloutOptions ro;
  ro.n_steps = 5;
  ro.dt = 0.2;
  ro.propagate_h = true;
  const auto b = q.bind(nullptr);
  const Trajectory tr = rollout(init, *b, ro);
  CHECK(tr.final().z.value().values() == init.z.value().values());
  CHECK(tr.final().l.value().values() == init.l.value().values());
  CHECK(tr.final().s.value().values() == init.s.value().values());
  CHECK(tr.final().h.value().values() == init.h.value().values());
  CHECK(tr.states.size() == 6);
  CHECK(tr.velocities.size() == 6);
  const FlowState inc = rhs(particle(init, 0), Eigen::VectorXd::Zero(2), q.spatial_derivatives(0.0, Eigen::VectorXd::Zero(2)));
  CHECK(inc.z.norm() == 0.0);
  CHECK(inc.H.norm() == 0.0);
}

TEST_CASE("single euler steps") {
  const QuadraticPsiField id = linear_field(1, 1, 0.01, Eigen::MatrixXd::Ones(1, 1));
  const FlowState next = euler_step(state1(1.0, 0.0, 0.5, -1.0, -1.0), id, 0.0, 0.01);
  CHECK(next.s[0] == doctest::Approx(-0.99));
  CHECK(next.H(0, 0) == doctest::Approx(-0.98));
  CHECK(next.z[0] == doctest::Approx(1.01));

  QuadraticPsiField constant(1, 1, 0.01);
  constant.set_B(0, Eigen::VectorXd::Constant(1, 2.0));
  CHECK(euler_step(state1(1.0, 0, 0, 0, 0), constant, 0.0, 0.01).z[0] == doctest::Approx(1.02));
}

TEST_CASE("hessian increment stays symmetric") {
  Eigen::MatrixXd a(2, 2);
  a << 0.3, -1.2, 0.7, 0.1;
  QuadraticPsiField q(2, 1, 0.1, 0.0, 0.0);
  Eigen::MatrixXd sym = 0.5 * (a + a.transpose());
  q.set_A(0, sym);
  FlowState st;
  st.z = Eigen::VectorXd::Ones(2);
  st.s = Eigen::VectorXd::Ones(2);
  st.H = (Eigen::MatrixXd(2, 2) << -2, 0.4, 0.4, -1).finished();
  const FlowState inc = rhs(st, q.eval(0.0, st.z), q.spatial_derivatives(0.0, st.z));
  CHECK((inc.H - inc.H.transpose()).norm() < 1e-15);

  MlpField m(2, 5, 3);
  const FlowState inc2 = rhs(st, m.eval(0.2, st.z), m.spatial_derivatives(0.2, st.z));
  CHECK((inc2.H - inc2.H.transpose()).norm() < 1e-12);
}

TEST_CASE("compounding euler factor") {
  const QuadraticPsiField q = linear_field(1, 100, 0.01, Eigen::MatrixXd::Ones(1, 1));
  FlowState st = state1(1.0, 0.0, 1.0, 0.0, -1.0);
  const FlowBatch init = pack({st}, true);
  RolloutOptions ro;
  ro.n_steps = 100;
  ro.dt = 0.01;
  const auto b = q.bind(nullptr);
  const Trajectory tr = rollout(init, *b, ro);
  CHECK(tr.final().z.value()[0] == doctest::Approx(std::pow(1.01, 100)).epsilon(1e-12));
  CHECK(tr.final().z.value()[0] == doctest::Approx(2.7048).epsilon(1e-4));
}

TEST_CASE("rollout hessian tracks the covariance ODE") {
  Eigen::MatrixXd a(2, 2);
  a << -0.5, 0.2, 0.2, 0.3;
  Eigen::MatrixXd sig0(2, 2);
  sig0 << 1.5, 0.3, 0.3, 0.8;
  const ProblemSpec spec = make_ou_flow_matching(2, 1.0, 1.0, Eigen::VectorXd::Zero(2), sig0);
  double prev = 0.0;
  for (double dt : {0.02, 0.01}) {
    const std::size_t n = static_cast<std::size_t>(std::llround(1.0 / dt));
    const QuadraticPsiField q = linear_field(2, n, dt, a);
    RolloutOptions ro;
    ro.n_steps = n;
    ro.dt = dt;
    ro.propagate_h = true;
    ro.record_full = false;
    const auto b = q.bind(nullptr);
    const Trajectory tr = rollout(gaussian_batch(spec, 4, 2), *b, ro);
    const auto sig = covariance_ode_integrate([&](double) { return a; }, sig0, 0.0, dt, n, dt / 100);
    const Eigen::MatrixXd want = -sig.back().inverse();
    Eigen::MatrixXd got(2, 2);
    for (int i = 0; i < 2; ++i)
      for (int k = 0; k < 2; ++k) got(i, k) = tr.final().h.value().at(0, i, k);
    const double err = (got - want).norm();
    CHECK(err < 5.0 * dt);
    if (prev > 0.0) CHECK(prev / err == doctest::Approx(2.0).epsilon(0.15));
    prev = err;
  }
}

TEST_CASE("sensitivity oracle") {
  const ProblemSpec spec = make_rwpo(2);
  std::mt19937_64 rng(5);
  std::vector<FlowState> init;
  const Eigen::MatrixXd z = spec.init.sample(8, rng);
  for (Eigen::Index r = 0; r < z.rows(); ++r) init.push_back(initial_flow_state(spec, z.row(r).transpose()));

  const QuadraticPsiField zero(2, 10, 0.1);
  const auto same = score_via_sensitivity(init, zero, 10, 0.1);
  for (std::size_t n = 0; n < init.size(); ++n) CHECK((same[n] - init[n].s).norm() == 0.0);

  // first-order convergence of the discrepancy on a random MLP field
  const MlpField f(2, 8, 17);
  double prev = 0.0;
  for (double dt : {0.01, 0.005}) {
    const std::size_t n = static_cast<std::size_t>(std::llround(1.0 / dt));
    const auto oracle = score_via_sensitivity(init, f, n, dt);
    double worst = 0.0;
    for (std::size_t p = 0; p < init.size(); ++p) {
      worst = std::max(worst, (score_rollout_point(init[p], f, n, dt) - oracle[p]).norm());
    }
    if (prev > 0.0) CHECK(prev / worst == doctest::Approx(2.0).epsilon(0.15));
    prev = worst;
  }
}

TEST_CASE("point rollout agrees with the batched rollout") {
  const ProblemSpec spec = make_rwpo(2);
  const FlowBatch init = gaussian_batch(spec, 5, 9);
  const MlpField f(2, 6, 4);
  RolloutOptions ro;
  ro.n_steps = 20;
  ro.dt = 0.05;
  const auto b = f.bind(nullptr);
  const Trajectory tr = rollout(init, *b, ro);
  for (std::size_t p = 0; p < 5; ++p) {
    const Eigen::VectorXd s = score_rollout_point(particle(init, p), f, 20, 0.05);
    CHECK(std::fabs(s[0] - tr.final().s.value().at(p, 0)) < 1e-12);
    CHECK(std::fabs(s[1] - tr.final().s.value().at(p, 1)) < 1e-12);
  }
}

TEST_CASE("information equality at rest") {
  const ProblemSpec spec = make_rwpo(1);
  const FlowBatch b = gaussian_batch(spec, 20000, 21);
  const InfoResidual r = info_residual(b, 0.0);
  CHECK(std::fabs(r.value) < 4.0 * r.stderr_);
}

TEST_CASE("pack and unpack round trip") {
  const ProblemSpec spec = make_rwpo(3);
  const FlowBatch b = gaussian_batch(spec, 4, 1);
  const FlowBatch again = pack(unpack(b), true);
  CHECK(again.z.value().values() == b.z.value().values());
  CHECK(again.h.value().values() == b.h.value().values());
  CHECK(b.size() == 4);
  CHECK(b.dim() == 3);
  CHECK_FALSE(pack(unpack(b), false).has_h());
}

TEST_CASE("non-finite states abort with the step index") {
  QuadraticPsiField q(1, 5, 0.2);
  for (std::size_t j = 0; j <= 5; ++j) q.set_B(j, Eigen::VectorXd::Constant(1, j == 2 ? INFINITY : 0.0));
  const FlowBatch init = pack({state1(0.0, 0.0, 1.0, 0.0, -1.0)}, false);
  RolloutOptions ro;
  ro.n_steps = 5;
  ro.dt = 0.2;
  const auto b = q.bind(nullptr);
  try {
    rollout(init, *b, ro);
    FAIL("expected FlowError");
  } catch (const FlowError& e) {
    CHECK(e.step() == 3);
    CHECK(e.particle() == 0);
  }
}

TEST_CASE("large steps trip the divergence guard") {
  const QuadraticPsiField q = linear_field(1, 2, 1.0, Eigen::MatrixXd::Constant(1, 1, 3.0));
  const FlowBatch init = pack({state1(1.0, 0.0, 1.0, 0.0, -1.0)}, false);
  RolloutOptions ro;
  ro.n_steps = 2;
  ro.dt = 1.0;
  const auto b = q.bind(nullptr);
  CHECK_FALSE(rollout(init, *b, ro).warnings.empty());
}

TEST_CASE("trajectory csv") {
  const ProblemSpec spec = make_rwpo(2);
  const QuadraticPsiField q(2, 2, 0.5);
  RolloutOptions ro;
  ro.n_steps = 2;
  ro.dt = 0.5;
  const auto b = q.bind(nullptr);
  const Trajectory tr = rollout(gaussian_batch(spec, 3, 1), *b, ro);
  std::ostringstream os;
  write_trajectory_header(os, 2);
  write_trajectory_rows(os, tr, 0, 2);
  const std::string text = os.str();
  CHECK(text.rfind("run,particle,j,t,z_1,z_2,l,ltilde,s_1,s_2\n", 0) == 0);
  CHECK(std::count(text.begin(), text.end(), '\n') == 1 + 3 * 2);
}
