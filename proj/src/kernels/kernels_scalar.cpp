#include "scoreflow/kernels.hpp"

#include <cstring>

namespace scoreflow::kernels {
namespace {

void zero_if(bool accumulate, std::size_t count, double* c) {
  if (!accumulate) std::memset(c, 0, count * sizeof(double));
}

void gemm_nn(std::size_t m, std::size_t n, std::size_t p, const double* a, const double* b,
             double* c, bool accumulate) {
  zero_if(accumulate, m * p, c);
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * p;
    for (std::size_t l = 0; l < n; ++l) {
      const double av = a[i * n + l];
      const double* brow = b + l * p;
      for (std::size_t j = 0; j < p; ++j) crow[j] += av * brow[j];
    }
  }
}

void gemm_tn(std::size_t m, std::size_t n, std::size_t p, const double* a, const double* b,
             double* c, bool accumulate) {
  zero_if(accumulate, m * p, c);
  for (std::size_t r = 0; r < n; ++r) {
    const double* arow = a + r * m;
    const double* brow = b + r * p;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = arow[i];
      double* crow = c + i * p;
      for (std::size_t j = 0; j < p; ++j) crow[j] += av * brow[j];
    }
  }
}

void gemm_nt(std::size_t m, std::size_t n, std::size_t p, const double* a, const double* b,
             double* c, bool accumulate) {
  zero_if(accumulate, m * p, c);
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * n;
    for (std::size_t j = 0; j < p; ++j) {
      const double* brow = b + j * n;
      double acc = 0.0;
      for (std::size_t l = 0; l < n; ++l) acc += arow[l] * brow[l];
      c[i * p + j] += acc;
    }
  }
}

void add(std::size_t n, const double* x, const double* y, double* out) {
  for (std::size_t i = 0; i < n; ++i) out[i] = x[i] + y[i];
}

void sub(std::size_t n, const double* x, const double* y, double* out) {
  for (std::size_t i = 0; i < n; ++i) out[i] = x[i] - y[i];
}

void mul(std::size_t n, const double* x, const double* y, double* out) {
  for (std::size_t i = 0; i < n; ++i) out[i] = x[i] * y[i];
}

void affine(std::size_t n, double alpha, const double* x, double beta, double* out) {
  for (std::size_t i = 0; i < n; ++i) out[i] = alpha * x[i] + beta;
}

void axpy(std::size_t n, double alpha, const double* x, double* y) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void mul_acc(std::size_t n, const double* x, const double* y, double* out) {
  for (std::size_t i = 0; i < n; ++i) out[i] += x[i] * y[i];
}

double dot(std::size_t n, const double* x, const double* y) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += x[i] * y[i];
  return acc;
}

double sum(std::size_t n, const double* x) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += x[i];
  return acc;
}

}  // namespace

const KernelTable& scalar_table() {
  static const KernelTable table{
      "scalar", gemm_nn, gemm_tn, gemm_nt, add, sub, mul, affine, axpy, mul_acc, dot, sum,
  };
  return table;
}

}  // namespace scoreflow::kernels
