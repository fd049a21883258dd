#pragma once

#include <string_view>

#include "textcsp/core/tensor.hpp"

// Dense linear-algebra kernels used by every layer. Each entry point has a
// portable scalar reference and, on x86-64, an AVX2/FMA variant chosen once
// at startup from CPUID. float calls dispatch; double calls always take the
// scalar path (double is only used for gradient checking).
namespace textcsp::simd {

enum class Isa { kScalar, kAvx2 };

std::string_view isa_name(Isa isa);
// True when the AVX2 variants were compiled in and the CPU supports AVX2+FMA.
bool avx2_supported();
Isa active_isa();
// Throws ConfigError when the requested variant is unavailable.
void set_active_isa(Isa isa);

// Restores the previously active variant on scope exit.
class ScopedIsa {
 public:
  explicit ScopedIsa(Isa isa) : saved_(active_isa()) { set_active_isa(isa); }
  ~ScopedIsa() { set_active_isa(saved_); }
  ScopedIsa(const ScopedIsa&) = delete;
  ScopedIsa& operator=(const ScopedIsa&) = delete;

 private:
  Isa saved_;
};

// C[m,n] = (accumulate ? C : 0) + A[m,k] * B[k,n]. Row-major, leading dims.
void gemm_nn(Index m, Index n, Index k, const float* a, Index lda, const float* b, Index ldb,
             float* c, Index ldc, bool accumulate);
void gemm_nn(Index m, Index n, Index k, const double* a, Index lda, const double* b, Index ldb,
             double* c, Index ldc, bool accumulate);

// C[m,n] = (accumulate ? C : 0) + A[m,k] * B[n,k]^T.
void gemm_nt(Index m, Index n, Index k, const float* a, Index lda, const float* b, Index ldb,
             float* c, Index ldc, bool accumulate);
void gemm_nt(Index m, Index n, Index k, const double* a, Index lda, const double* b, Index ldb,
             double* c, Index ldc, bool accumulate);

float dot(Index n, const float* x, const float* y);
double dot(Index n, const double* x, const double* y);

// y += alpha * x
void axpy(Index n, float alpha, const float* x, float* y);
void axpy(Index n, double alpha, const double* x, double* y);

// dst[c,r] = src[r,c] for a rows x cols source.
template <typename T>
void transpose(Index rows, Index cols, const T* src, T* dst) {
  constexpr Index kBlock = 32;
  for (Index r0 = 0; r0 < rows; r0 += kBlock) {
    for (Index c0 = 0; c0 < cols; c0 += kBlock) {
      const Index r1 = r0 + kBlock < rows ? r0 + kBlock : rows;
      const Index c1 = c0 + kBlock < cols ? c0 + kBlock : cols;
      for (Index r = r0; r < r1; ++r)
        for (Index c = c0; c < c1; ++c) dst[c * rows + r] = src[r * cols + c];
    }
  }
}

namespace scalar {

template <typename T>
void gemm_nn(Index m, Index n, Index k, const T* a, Index lda, const T* b, Index ldb, T* c,
             Index ldc, bool accumulate) {
  for (Index i = 0; i < m; ++i) {
    T* crow = c + i * ldc;
    if (!accumulate)
      for (Index j = 0; j < n; ++j) crow[j] = T{0};
    for (Index p = 0; p < k; ++p) {
      const T av = a[i * lda + p];
      const T* brow = b + p * ldb;
      for (Index j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename T>
void gemm_nt(Index m, Index n, Index k, const T* a, Index lda, const T* b, Index ldb, T* c,
             Index ldc, bool accumulate) {
  for (Index i = 0; i < m; ++i) {
    for (Index j = 0; j < n; ++j) {
      T s{0};
      const T* arow = a + i * lda;
      const T* brow = b + j * ldb;
      for (Index p = 0; p < k; ++p) s += arow[p] * brow[p];
      c[i * ldc + j] = accumulate ? c[i * ldc + j] + s : s;
    }
  }
}

template <typename T>
T dot(Index n, const T* x, const T* y) {
  T s{0};
  for (Index i = 0; i < n; ++i) s += x[i] * y[i];
  return s;
}

template <typename T>
void axpy(Index n, T alpha, const T* x, T* y) {
  for (Index i = 0; i < n; ++i) y[i] += alpha * x[i];
}

}  // namespace scalar

#if defined(TEXTCSP_HAVE_AVX2)
namespace avx2 {
void gemm_nn(Index m, Index n, Index k, const float* a, Index lda, const float* b, Index ldb,
             float* c, Index ldc, bool accumulate);
void gemm_nt(Index m, Index n, Index k, const float* a, Index lda, const float* b, Index ldb,
             float* c, Index ldc, bool accumulate);
float dot(Index n, const float* x, const float* y);
void axpy(Index n, float alpha, const float* x, float* y);
}  // namespace avx2
#endif

}  // namespace textcsp::simd
