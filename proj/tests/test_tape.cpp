#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "doctest.h"
#include "scoreflow/tape.hpp"

using namespace scoreflow;

namespace {

using Fn = std::function<Var(const std::vector<Var>&)>;

Tensor random_tensor(const Shape& shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(shape);
  for (double& v : t.values()) v = u(rng);
  return t;
}

// Reduces any output to a scalar with fixed random weights so every output
// entry contributes to the gradient.
Var weighted(const Var& out, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return ad::sum(ad::mul(out, Var(random_tensor(out.shape(), rng))));
}

double fd_max_rel_error(const Fn& fn, std::vector<Tensor> inputs) {
  Tape tape;
  std::vector<Var> leaves;
  for (const Tensor& t : inputs) leaves.push_back(tape.leaf(t));
  const std::vector<Tensor> grads = tape.backward(fn(leaves));
  double worst = 0.0;
  const double h = 1e-6;
  for (std::size_t a = 0; a < inputs.size(); ++a) {
    for (std::size_t i = 0; i < inputs[a].size(); ++i) {
      auto eval = [&](double shift) {
        std::vector<Var> c;
        for (std::size_t b = 0; b < inputs.size(); ++b) {
          Tensor t = inputs[b];
          if (b == a) t[i] += shift;
          c.emplace_back(t);
        }
        return fn(c).item();
      };
      const double fd = (eval(h) - eval(-h)) / (2 * h);
      worst = std::max(worst, std::fabs(grads[a][i] - fd) / std::max(std::fabs(fd), 1e-3));
    }
  }
  return worst;
}

}  // namespace

TEST_CASE("gradient examples") {
  {
    Tape tape;
    const Var th = tape.leaf(Tensor::vector({1, 2}));
    const auto g = tape.backward(ad::dot(th, th));
    CHECK(g[0][0] == doctest::Approx(2));
    CHECK(g[0][1] == doctest::Approx(4));
  }
  {
    Tape tape;
    const Var th = tape.leaf(Tensor::vector({0}));
    const auto g = tape.backward(ad::sum(ad::tanh(th)));
    CHECK(g[0][0] == doctest::Approx(1));
  }
  {
    Tape tape;
    const Var a = tape.leaf(Tensor::matrix({{1, 0}, {0, 3}}));
    const auto g = tape.backward(ad::trace(ad::matmul(ad::transpose(a), a)));
    // central differences of trace(A^T A) = sum a_ij^2
    const double h = 1e-6;
    const double fd00 = ((1 + h) * (1 + h) - (1 - h) * (1 - h)) / (2 * h);
    const double fd11 = ((3 + h) * (3 + h) - (3 - h) * (3 - h)) / (2 * h);
    CHECK(g[0].at(0, 0) == doctest::Approx(fd00).epsilon(1e-8));
    CHECK(g[0].at(1, 1) == doctest::Approx(fd11).epsilon(1e-8));
    CHECK(g[0].at(0, 1) == doctest::Approx(0.0));
  }
}

TEST_CASE("unused leaves get zero gradients") {
  Tape tape;
  const Var a = tape.leaf(Tensor::vector({1, 2}));
  const Var b = tape.leaf(Tensor::vector({3}));
  const auto g = tape.backward(ad::sum(a));
  CHECK(g[1][0] == 0.0);
  CHECK(g[0][1] == 1.0);
  CHECK_THROWS(tape.backward(a));
}

TEST_CASE("every op matches central differences") {
  std::mt19937_64 rng(11);
  struct Case {
    std::string name;
    Fn fn;
    std::vector<Shape> shapes;
  };
  const std::size_t n = 3, d = 2, k = 4;
  const std::vector<Case> cases = {
      {"add", [](auto& v) { return weighted(ad::add(v[0], v[1]), 1); }, {{n, d}, {n, d}}},
      {"sub", [](auto& v) { return weighted(ad::sub(v[0], v[1]), 2); }, {{n, d}, {n, d}}},
      {"mul", [](auto& v) { return weighted(ad::mul(v[0], v[1]), 3); }, {{n, d}, {n, d}}},
      {"scale", [](auto& v) { return weighted(ad::scale(v[0], -1.7), 4); }, {{n}}},
      {"add_scalar", [](auto& v) { return weighted(ad::add_scalar(v[0], 0.3), 5); }, {{n}}},
      {"square", [](auto& v) { return weighted(ad::square(v[0]), 6); }, {{n, d}}},
      {"abs", [](auto& v) { return weighted(ad::abs(v[0]), 7); }, {{n}}},
      {"tanh", [](auto& v) { return weighted(ad::tanh(v[0]), 8); }, {{n, k}}},
      {"tanh_deriv1", [](auto& v) { return weighted(ad::tanh_deriv(v[0], 1), 9); }, {{n, k}}},
      {"tanh_deriv2", [](auto& v) { return weighted(ad::tanh_deriv(v[0], 2), 10); }, {{n, k}}},
      {"tanh_deriv3", [](auto& v) { return weighted(ad::tanh_deriv(v[0], 3), 11); }, {{n, k}}},
      {"tanh_poly1", [](auto& v) { return weighted(ad::tanh_poly(ad::tanh(v[0]), 1), 12); }, {{n, k}}},
      {"tanh_poly2", [](auto& v) { return weighted(ad::tanh_poly(ad::tanh(v[0]), 2), 13); }, {{n, k}}},
      {"tanh_poly3", [](auto& v) { return weighted(ad::tanh_poly(ad::tanh(v[0]), 3), 14); }, {{n, k}}},
      {"matmul", [](auto& v) { return weighted(ad::matmul(v[0], v[1]), 15); }, {{n, k}, {k, d}}},
      {"matmul_nt", [](auto& v) { return weighted(ad::matmul_nt(v[0], v[1]), 16); }, {{n, k}, {d, k}}},
      {"transpose", [](auto& v) { return weighted(ad::transpose(v[0]), 17); }, {{n, k}}},
      {"linear", [](auto& v) { return weighted(ad::linear(v[0], v[1], v[2]), 18); }, {{n, d}, {k, d}, {k}}},
      {"matvec", [](auto& v) { return weighted(ad::matvec(v[0], v[1]), 19); }, {{k, d}, {d}}},
      {"add_row", [](auto& v) { return weighted(ad::add_row(v[0], v[1]), 20); }, {{n, k}, {k}}},
      {"mul_row", [](auto& v) { return weighted(ad::mul_row(v[0], v[1]), 21); }, {{n, k}, {k}}},
      {"broadcast", [](auto& v) { return weighted(ad::broadcast(v[0], Shape{n, d}), 22); }, {{1}}},
      {"dot", [](auto& v) { return ad::dot(v[0], v[1]); }, {{k}, {k}}},
      {"sum", [](auto& v) { return ad::sum(ad::square(v[0])); }, {{n, d}}},
      {"row_sum", [](auto& v) { return weighted(ad::row_sum(v[0]), 23); }, {{n, k}}},
      {"mean", [](auto& v) { return ad::mean(ad::square(v[0])); }, {{n, d}}},
      {"trace", [](auto& v) { return ad::trace(ad::matmul(v[0], v[0])); }, {{d, d}}},
      {"batch_trace", [](auto& v) { return weighted(ad::batch_trace(v[0]), 24); }, {{n, d, d}}},
      {"concat", [](auto& v) { return weighted(ad::concat(v[0], v[1]), 25); }, {{n}, {d}}},
      {"reshape", [](auto& v) { return weighted(ad::reshape(v[0], Shape{d, n}), 26); }, {{n, d}}},
      {"select_row", [](auto& v) { return weighted(ad::select_row(v[0], 1), 27); }, {{n, k}}},
      {"batch_matmul", [](auto& v) { return weighted(ad::batch_matmul(v[0], v[1]), 28); }, {{n, d, k}, {n, k, d}}},
      {"batch_transpose", [](auto& v) { return weighted(ad::batch_transpose(v[0]), 29); }, {{n, d, k}}},
      {"diag_sandwich", [](auto& v) { return weighted(ad::diag_sandwich(v[0], v[1], v[2]), 30); }, {{n, k}, {d, k}, {k, d}}},
      {"sym_from_upper", [](auto& v) { return weighted(ad::sym_from_upper(v[0], 2), 31); }, {{3}}},
      {"pointwise_map",
       [](auto& v) {
         return weighted(ad::pointwise_map(v[0], 1,
                                           [](const double* x, double* y, double* j) {
                                             y[0] = std::sin(x[0]) * x[1];
                                             j[0] = std::cos(x[0]) * x[1];
                                             j[1] = std::sin(x[0]);
                                           }),
                         32);
       },
       {{n, d}}},
  };
  for (const Case& c : cases) {
    std::vector<Tensor> in;
    for (const Shape& s : c.shapes) in.push_back(random_tensor(s, rng, 0.1, 1.0));
    const double err = fd_max_rel_error(c.fn, in);
    INFO(c.name);
    CHECK(err < 1e-6);
  }
}

TEST_CASE("tanh_poly values equal tanh_deriv values") {
  std::mt19937_64 rng(5);
  const Tensor u = random_tensor({20}, rng, -3.0, 3.0);
  for (int order = 1; order <= 3; ++order) {
    const Tensor a = ad::tanh_deriv(Var(u), order).value();
    const Tensor b = ad::tanh_poly(ad::tanh(Var(u)), order).value();
    for (std::size_t i = 0; i < u.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-13));
  }
  // third derivative of tanh at 0 is -2
  CHECK(ad::tanh_deriv(Var(Tensor::vector({0.0})), 3).value()[0] == doctest::Approx(-2.0));
}

TEST_CASE("constant-only graphs do not grow the tape") {
  Tape tape;
  const Var c(Tensor::vector({1, 2}));
  const Var r = ad::mul(c, c);
  CHECK_FALSE(r.tracked());
  CHECK(tape.node_count() == 0);
}
