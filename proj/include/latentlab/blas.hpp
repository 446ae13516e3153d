#pragma once

#include <mutex>

#if defined(LATENTLAB_HAS_OPENBLAS)
#include <cblas.h>
extern "C" void openblas_set_num_threads(int);
#endif

namespace latentlab::detail {

#if defined(LATENTLAB_HAS_OPENBLAS)

// BLAS runs single-threaded: on the small GEMMs this library produces the
// threading gain is marginal and a fixed reduction order keeps results
// bit-identical across LATENTLAB_THREADS settings.
inline void pin_blas_threads() {
    static std::once_flag once;
    std::call_once(once, [] { openblas_set_num_threads(1); });
}

// Row-major C[m x n] = alpha * op(A) * op(B) + beta * C.
inline void gemm(bool ta, bool tb, int m, int n, int k, float alpha, const float* a, int lda,
                 const float* b, int ldb, float beta, float* c, int ldc) {
    pin_blas_threads();
    cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, m, n,
                k, alpha, a, lda, b, ldb, beta, c, ldc);
}

inline void gemm(bool ta, bool tb, int m, int n, int k, double alpha, const double* a, int lda,
                 const double* b, int ldb, double beta, double* c, int ldc) {
    pin_blas_threads();
    cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, m, n,
                k, alpha, a, lda, b, ldb, beta, c, ldc);
}

#else

// Fallback: blocked i-k-j loops. Slow but correct; used only when OpenBLAS
// is unavailable at configure time.
template <class Real>
inline void gemm(bool ta, bool tb, int m, int n, int k, Real alpha, const Real* a, int lda,
                 const Real* b, int ldb, Real beta, Real* c, int ldc) {
    auto A = [&](int i, int j) { return ta ? a[static_cast<size_t>(j) * lda + i] : a[static_cast<size_t>(i) * lda + j]; };
    auto B = [&](int i, int j) { return tb ? b[static_cast<size_t>(j) * ldb + i] : b[static_cast<size_t>(i) * ldb + j]; };
    for (int i = 0; i < m; ++i) {
        Real* crow = c + static_cast<size_t>(i) * ldc;
        for (int j = 0; j < n; ++j) crow[j] = beta == Real(0) ? Real(0) : crow[j] * beta;
        for (int p = 0; p < k; ++p) {
            const Real av = alpha * A(i, p);
            if (av == Real(0)) continue;
            for (int j = 0; j < n; ++j) crow[j] += av * B(p, j);
        }
    }
}

#endif

}  // namespace latentlab::detail
