#pragma once

// Row-major GEMM. Float goes to CBLAS; double uses a plain loop kernel.
//
// The double path is only exercised by the 64-bit verification builds, and
// OpenBLAS 0.3.20 selects a Cooperlake dgemm kernel on AMX-capable Xeons that
// returns wrong results once N reaches ~1024.

#include <cblas.h>

#include <type_traits>
#include <vector>

namespace mcdiff::blas {

namespace detail {

// C = alpha * op(A) * op(B) + beta * C. op(B) is packed row-major so the
// inner loop is a contiguous axpy.
inline void dgemm_ref(bool trans_a, bool trans_b, int m, int n, int k, double alpha, const double* a, int lda,
                      const double* b, int ldb, double beta, double* c, int ldc) {
  for (int i = 0; i < m; ++i) {
    double* ci = c + std::size_t(i) * ldc;
    if (beta == 0) {
      for (int j = 0; j < n; ++j) ci[j] = 0;
    } else if (beta != 1) {
      for (int j = 0; j < n; ++j) ci[j] *= beta;
    }
  }
  if (alpha == 0 || k == 0) return;
  std::vector<double> packed;
  const double* bp = b;
  int ldbp = ldb;
  if (trans_b) {
    packed.resize(std::size_t(k) * n);
    for (int j = 0; j < n; ++j)
      for (int p = 0; p < k; ++p) packed[std::size_t(p) * n + j] = b[std::size_t(j) * ldb + p];
    bp = packed.data();
    ldbp = n;
  }
  for (int i = 0; i < m; ++i) {
    double* ci = c + std::size_t(i) * ldc;
    for (int p = 0; p < k; ++p) {
      const double av = alpha * (trans_a ? a[std::size_t(p) * lda + i] : a[std::size_t(i) * lda + p]);
      if (av == 0) continue;
      const double* bj = bp + std::size_t(p) * ldbp;
      for (int j = 0; j < n; ++j) ci[j] += av * bj[j];
    }
  }
}

}  // namespace detail

// C[M,N] = alpha * op(A) * op(B) + beta * C, all row-major.
template <typename T>
void gemm(bool trans_a, bool trans_b, int m, int n, int k, T alpha, const T* a, int lda, const T* b,
          int ldb, T beta, T* c, int ldc) {
  if constexpr (std::is_same_v<T, float>) {
    cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans, trans_b ? CblasTrans : CblasNoTrans, m, n, k,
                alpha, a, lda, b, ldb, beta, c, ldc);
  } else {
    static_assert(std::is_same_v<T, double>, "gemm supports float and double");
    detail::dgemm_ref(trans_a, trans_b, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
  }
}

}  // namespace mcdiff::blas
