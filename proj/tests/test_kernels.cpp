#include <cmath>
#include <random>
#include <vector>

#include "doctest.h"
#include "scoreflow/kernels.hpp"

using namespace scoreflow;

namespace {

std::vector<double> random_vec(std::size_t n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> v(n);
  for (double& x : v) x = u(rng);
  return v;
}

double max_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
  return m;
}

// Naive triple loop, independent of both tables.
std::vector<double> naive_gemm(std::size_t m, std::size_t n, std::size_t p, const std::vector<double>& a,
                               const std::vector<double>& b) {
  std::vector<double> c(m * p, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t j = 0; j < p; ++j) c[i * p + j] += a[i * n + k] * b[k * p + j];
  return c;
}

}  // namespace

TEST_CASE("scalar gemm variants match a naive product") {
  std::mt19937_64 rng(1);
  const auto& t = kernels::scalar_table();
  for (std::size_t m : {1u, 3u, 7u})
    for (std::size_t n : {1u, 4u, 9u})
      for (std::size_t p : {1u, 5u, 8u}) {
        const auto a = random_vec(m * n, rng), b = random_vec(n * p, rng);
        const auto ref = naive_gemm(m, n, p, a, b);
        std::vector<double> c(m * p, 0.0);
        t.gemm_nn(m, n, p, a.data(), b.data(), c.data(), false);
        CHECK(max_diff(c, ref) < 1e-13);

        std::vector<double> at(n * m);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t k = 0; k < n; ++k) at[k * m + i] = a[i * n + k];
        std::fill(c.begin(), c.end(), 0.0);
        t.gemm_tn(m, n, p, at.data(), b.data(), c.data(), false);
        CHECK(max_diff(c, ref) < 1e-13);

        std::vector<double> bt(p * n);
        for (std::size_t k = 0; k < n; ++k)
          for (std::size_t j = 0; j < p; ++j) bt[j * n + k] = b[k * p + j];
        std::fill(c.begin(), c.end(), 1.0);
        t.gemm_nt(m, n, p, a.data(), bt.data(), c.data(), true);
        for (double& x : c) x -= 1.0;
        CHECK(max_diff(c, ref) < 1e-13);
      }
}

TEST_CASE("avx2 table agrees with the scalar reference") {
  const kernels::KernelTable* v = kernels::avx2_table();
  if (v == nullptr) {
    MESSAGE("avx2 variant unavailable; skipped");
    return;
  }
  const auto& s = kernels::scalar_table();
  std::mt19937_64 rng(2);
  for (std::size_t n : {0u, 1u, 3u, 4u, 5u, 8u, 15u, 16u, 17u, 100u, 1001u}) {
    const auto x = random_vec(n, rng), y = random_vec(n, rng);
    std::vector<double> o1(n), o2(n);
    s.add(n, x.data(), y.data(), o1.data());
    v->add(n, x.data(), y.data(), o2.data());
    CHECK(max_diff(o1, o2) == 0.0);
    s.sub(n, x.data(), y.data(), o1.data());
    v->sub(n, x.data(), y.data(), o2.data());
    CHECK(max_diff(o1, o2) == 0.0);
    s.mul(n, x.data(), y.data(), o1.data());
    v->mul(n, x.data(), y.data(), o2.data());
    CHECK(max_diff(o1, o2) == 0.0);
    s.affine(n, 0.3, x.data(), -1.5, o1.data());
    v->affine(n, 0.3, x.data(), -1.5, o2.data());
    CHECK(max_diff(o1, o2) < 1e-15);
    o1 = y;
    o2 = y;
    s.axpy(n, 0.7, x.data(), o1.data());
    v->axpy(n, 0.7, x.data(), o2.data());
    CHECK(max_diff(o1, o2) < 1e-15);
    s.mul_acc(n, x.data(), y.data(), o1.data());
    v->mul_acc(n, x.data(), y.data(), o2.data());
    CHECK(max_diff(o1, o2) < 1e-15);
    CHECK(std::fabs(s.dot(n, x.data(), y.data()) - v->dot(n, x.data(), y.data())) < 1e-12);
    CHECK(std::fabs(s.sum(n, x.data()) - v->sum(n, x.data())) < 1e-12);
  }
  for (std::size_t m : {1u, 2u, 5u, 16u, 33u})
    for (std::size_t n : {1u, 3u, 8u, 20u})
      for (std::size_t p : {1u, 4u, 7u, 9u, 32u}) {
        const auto a = random_vec(m * n, rng), b = random_vec(n * p, rng);
        const auto at = random_vec(n * m, rng), bt = random_vec(p * n, rng);
        std::vector<double> c1(m * p, 0.5), c2(m * p, 0.5);
        s.gemm_nn(m, n, p, a.data(), b.data(), c1.data(), true);
        v->gemm_nn(m, n, p, a.data(), b.data(), c2.data(), true);
        CHECK(max_diff(c1, c2) < 1e-12);
        s.gemm_tn(m, n, p, at.data(), b.data(), c1.data(), false);
        v->gemm_tn(m, n, p, at.data(), b.data(), c2.data(), false);
        CHECK(max_diff(c1, c2) < 1e-12);
        s.gemm_nt(m, n, p, a.data(), bt.data(), c1.data(), false);
        v->gemm_nt(m, n, p, a.data(), bt.data(), c2.data(), false);
        CHECK(max_diff(c1, c2) < 1e-12);
      }
}

TEST_CASE("selection by name") {
  CHECK(kernels::select("scalar"));
  CHECK(kernels::active().name == "scalar");
  CHECK_FALSE(kernels::select("sse9"));
  CHECK(kernels::active().name == "scalar");
  if (kernels::avx2_table() != nullptr) {
    CHECK(kernels::select("avx2"));
    CHECK(kernels::active().name == "avx2");
  }
}
