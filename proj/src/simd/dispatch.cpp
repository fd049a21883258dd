#include <atomic>

#include "textcsp/simd/kernels.hpp"

namespace textcsp::simd {
namespace {

bool detect_avx2() {
#if defined(TEXTCSP_HAVE_AVX2) && (defined(__x86_64__) || defined(__i386__))
  __builtin_cpu_init();
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

std::atomic<Isa>& active() {
  static std::atomic<Isa> isa{detect_avx2() ? Isa::kAvx2 : Isa::kScalar};
  return isa;
}

bool use_avx2() { return active().load(std::memory_order_relaxed) == Isa::kAvx2; }

}  // namespace

std::string_view isa_name(Isa isa) { return isa == Isa::kAvx2 ? "avx2" : "scalar"; }

bool avx2_supported() {
  static const bool supported = detect_avx2();
  return supported;
}

Isa active_isa() { return active().load(); }

void set_active_isa(Isa isa) {
  if (isa == Isa::kAvx2 && !avx2_supported()) {
    throw ConfigError("AVX2/FMA kernels are not available on this build or CPU");
  }
  active().store(isa);
}

void gemm_nn(Index m, Index n, Index k, const float* a, Index lda, const float* b, Index ldb,
             float* c, Index ldc, bool accumulate) {
#if defined(TEXTCSP_HAVE_AVX2)
  if (use_avx2()) return avx2::gemm_nn(m, n, k, a, lda, b, ldb, c, ldc, accumulate);
#endif
  scalar::gemm_nn(m, n, k, a, lda, b, ldb, c, ldc, accumulate);
}

void gemm_nn(Index m, Index n, Index k, const double* a, Index lda, const double* b, Index ldb,
             double* c, Index ldc, bool accumulate) {
  scalar::gemm_nn(m, n, k, a, lda, b, ldb, c, ldc, accumulate);
}

void gemm_nt(Index m, Index n, Index k, const float* a, Index lda, const float* b, Index ldb,
             float* c, Index ldc, bool accumulate) {
#if defined(TEXTCSP_HAVE_AVX2)
  if (use_avx2()) return avx2::gemm_nt(m, n, k, a, lda, b, ldb, c, ldc, accumulate);
#endif
  scalar::gemm_nt(m, n, k, a, lda, b, ldb, c, ldc, accumulate);
}

void gemm_nt(Index m, Index n, Index k, const double* a, Index lda, const double* b, Index ldb,
             double* c, Index ldc, bool accumulate) {
  scalar::gemm_nt(m, n, k, a, lda, b, ldb, c, ldc, accumulate);
}

float dot(Index n, const float* x, const float* y) {
#if defined(TEXTCSP_HAVE_AVX2)
  if (use_avx2()) return avx2::dot(n, x, y);
#endif
  return scalar::dot(n, x, y);
}

double dot(Index n, const double* x, const double* y) { return scalar::dot(n, x, y); }

void axpy(Index n, float alpha, const float* x, float* y) {
#if defined(TEXTCSP_HAVE_AVX2)
  if (use_avx2()) return avx2::axpy(n, alpha, x, y);
#endif
  scalar::axpy(n, alpha, x, y);
}

void axpy(Index n, double alpha, const double* x, double* y) { scalar::axpy(n, alpha, x, y); }

}  // namespace textcsp::simd
