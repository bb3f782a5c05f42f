// AVX2/FMA variants. Compiled with -mavx2 -mfma; only reached through the
// dispatch table after a runtime CPU check.

#include "scoreflow/kernels.hpp"

#include <immintrin.h>

#include <cstring>
#include <vector>

namespace scoreflow::kernels {
namespace {

inline double hsum(__m256d v) {
  const __m128d lo = _mm256_castpd256_pd128(v);
  const __m128d hi = _mm256_extractf128_pd(v, 1);
  const __m128d s = _mm_add_pd(lo, hi);
  return _mm_cvtsd_f64(_mm_add_sd(s, _mm_unpackhi_pd(s, s)));
}

inline void axpy_impl(std::size_t n, double alpha, const double* x, double* y) {
  const __m256d va = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256d y0 = _mm256_loadu_pd(y + i);
    __m256d y1 = _mm256_loadu_pd(y + i + 4);
    y0 = _mm256_fmadd_pd(va, _mm256_loadu_pd(x + i), y0);
    y1 = _mm256_fmadd_pd(va, _mm256_loadu_pd(x + i + 4), y1);
    _mm256_storeu_pd(y + i, y0);
    _mm256_storeu_pd(y + i + 4, y1);
  }
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(y + i, _mm256_fmadd_pd(va, _mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
  }
  for (; i < n; ++i) y[i] += alpha * x[i];
}

inline double dot_impl(std::size_t n, const double* x, const double* y) {
  __m256d acc0 = _mm256_setzero_pd();
  __m256d acc1 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i), acc0);
    acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i + 4), _mm256_loadu_pd(y + i + 4), acc1);
  }
  for (; i + 4 <= n; i += 4) {
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i), acc0);
  }
  double acc = hsum(_mm256_add_pd(acc0, acc1));
  for (; i < n; ++i) acc += x[i] * y[i];
  return acc;
}

// Narrow outputs (p < 4) vectorize poorly along p; those shapes go through a
// transposed operand so the inner loop runs along the long dimension instead.
constexpr std::size_t kNarrow = 4;

void transpose(std::size_t rows, std::size_t cols, const double* src, double* dst) {
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
}

void gemm_nt_dot(std::size_t m, std::size_t n, std::size_t p, const double* a, const double* b,
                 double* c, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * n;
    double* crow = c + i * p;
    for (std::size_t j = 0; j < p; ++j) {
      const double v = dot_impl(n, arow, b + j * n);
      crow[j] = accumulate ? crow[j] + v : v;
    }
  }
}

void gemm_nn_axpy(std::size_t m, std::size_t n, std::size_t p, const double* a, const double* b,
                  double* c, bool accumulate) {
  if (!accumulate) std::memset(c, 0, m * p * sizeof(double));
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * p;
    for (std::size_t l = 0; l < n; ++l) axpy_impl(p, a[i * n + l], b + l * p, crow);
  }
}

void gemm_nn(std::size_t m, std::size_t n, std::size_t p, const double* a, const double* b,
             double* c, bool accumulate) {
  if (p < kNarrow && n >= kNarrow) {
    std::vector<double> bt(n * p);
    transpose(n, p, b, bt.data());
    gemm_nt_dot(m, n, p, a, bt.data(), c, accumulate);
    return;
  }
  gemm_nn_axpy(m, n, p, a, b, c, accumulate);
}

void gemm_nt(std::size_t m, std::size_t n, std::size_t p, const double* a, const double* b,
             double* c, bool accumulate) {
  if (n < kNarrow && p >= kNarrow) {
    std::vector<double> bt(n * p);
    transpose(p, n, b, bt.data());
    gemm_nn_axpy(m, n, p, a, bt.data(), c, accumulate);
    return;
  }
  gemm_nt_dot(m, n, p, a, b, c, accumulate);
}

void gemm_tn(std::size_t m, std::size_t n, std::size_t p, const double* a, const double* b,
             double* c, bool accumulate) {
  if (p < kNarrow && m >= kNarrow) {
    // Build C^T[p x m] with contiguous updates along m, then transpose back.
    std::vector<double> ct(p * m, 0.0);
    for (std::size_t r = 0; r < n; ++r) {
      const double* arow = a + r * m;
      const double* brow = b + r * p;
      for (std::size_t j = 0; j < p; ++j) axpy_impl(m, brow[j], arow, ct.data() + j * m);
    }
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < p; ++j) {
        const double v = ct[j * m + i];
        c[i * p + j] = accumulate ? c[i * p + j] + v : v;
      }
    return;
  }
  if (!accumulate) std::memset(c, 0, m * p * sizeof(double));
  for (std::size_t r = 0; r < n; ++r) {
    const double* arow = a + r * m;
    const double* brow = b + r * p;
    for (std::size_t i = 0; i < m; ++i) axpy_impl(p, arow[i], brow, c + i * p);
  }
}

void add(std::size_t n, const double* x, const double* y, double* out) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(out + i, _mm256_add_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
  for (; i < n; ++i) out[i] = x[i] + y[i];
}

void sub(std::size_t n, const double* x, const double* y, double* out) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(out + i, _mm256_sub_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
  for (; i < n; ++i) out[i] = x[i] - y[i];
}

void mul(std::size_t n, const double* x, const double* y, double* out) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(out + i, _mm256_mul_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
  for (; i < n; ++i) out[i] = x[i] * y[i];
}

void affine(std::size_t n, double alpha, const double* x, double beta, double* out) {
  const __m256d va = _mm256_set1_pd(alpha);
  const __m256d vb = _mm256_set1_pd(beta);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(out + i, _mm256_fmadd_pd(va, _mm256_loadu_pd(x + i), vb));
  for (; i < n; ++i) out[i] = alpha * x[i] + beta;
}

void axpy(std::size_t n, double alpha, const double* x, double* y) { axpy_impl(n, alpha, x, y); }

void mul_acc(std::size_t n, const double* x, const double* y, double* out) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(out + i, _mm256_fmadd_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i),
                                              _mm256_loadu_pd(out + i)));
  }
  for (; i < n; ++i) out[i] += x[i] * y[i];
}

double dot(std::size_t n, const double* x, const double* y) { return dot_impl(n, x, y); }

double sum(std::size_t n, const double* x) {
  __m256d acc0 = _mm256_setzero_pd();
  __m256d acc1 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    acc0 = _mm256_add_pd(acc0, _mm256_loadu_pd(x + i));
    acc1 = _mm256_add_pd(acc1, _mm256_loadu_pd(x + i + 4));
  }
  for (; i + 4 <= n; i += 4) acc0 = _mm256_add_pd(acc0, _mm256_loadu_pd(x + i));
  double acc = hsum(_mm256_add_pd(acc0, acc1));
  for (; i < n; ++i) acc += x[i];
  return acc;
}

}  // namespace

const KernelTable& avx2_table_impl() {
  static const KernelTable table{
      "avx2", gemm_nn, gemm_tn, gemm_nt, add, sub, mul, affine, axpy, mul_acc, dot, sum,
  };
  return table;
}

}  // namespace scoreflow::kernels
