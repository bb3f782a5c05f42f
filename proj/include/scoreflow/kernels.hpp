#pragma once

// Dense double-precision kernels behind the tensor ops.
//
// Every kernel has a scalar reference implementation; an AVX2/FMA variant is
// compiled when the toolchain allows it and selected at runtime when the CPU
// supports it. The two variants agree to rounding (reduction order and FMA
// contraction differ) and are equivalence-tested in tests/test_kernels.cpp.
// Within one process the selected table never changes unless a caller forces
// it, so results are reproducible for a fixed dispatch.

#include <cstddef>
#include <string_view>

namespace scoreflow::kernels {

struct KernelTable {
  std::string_view name;

  // C[m x p] (+)= A[m x n] * B[n x p]
  void (*gemm_nn)(std::size_t m, std::size_t n, std::size_t p, const double* a,
                  const double* b, double* c, bool accumulate);
  // C[m x p] (+)= A[n x m]^T * B[n x p]
  void (*gemm_tn)(std::size_t m, std::size_t n, std::size_t p, const double* a,
                  const double* b, double* c, bool accumulate);
  // C[m x p] (+)= A[m x n] * B[p x n]^T
  void (*gemm_nt)(std::size_t m, std::size_t n, std::size_t p, const double* a,
                  const double* b, double* c, bool accumulate);

  void (*add)(std::size_t n, const double* x, const double* y, double* out);
  void (*sub)(std::size_t n, const double* x, const double* y, double* out);
  void (*mul)(std::size_t n, const double* x, const double* y, double* out);
  // out = alpha * x + beta
  void (*affine)(std::size_t n, double alpha, const double* x, double beta, double* out);
  // y += alpha * x
  void (*axpy)(std::size_t n, double alpha, const double* x, double* y);
  // out += x * y
  void (*mul_acc)(std::size_t n, const double* x, const double* y, double* out);

  double (*dot)(std::size_t n, const double* x, const double* y);
  double (*sum)(std::size_t n, const double* x);
};

const KernelTable& scalar_table();

// nullptr when the variant was not compiled in or the CPU lacks AVX2+FMA.
const KernelTable* avx2_table();

// The table used by the tensor layer. Defaults to AVX2 when available;
// the environment variable SCOREFLOW_KERNELS=scalar forces the reference path.
const KernelTable& active();

// Pins the active table by name ("scalar" or "avx2"). Returns false if the
// requested variant is unavailable, leaving the selection unchanged.
bool select(std::string_view name);

}  // namespace scoreflow::kernels
