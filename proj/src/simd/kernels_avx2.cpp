// Compiled with -mavx2 -mfma. Nothing in here may run before dispatch has
// confirmed CPU support.
#include "textcsp/simd/kernels.hpp"

#if defined(__AVX2__) && defined(__FMA__)
#include <immintrin.h>

#include <algorithm>
#include <cstdlib>
#include <vector>

namespace textcsp::simd::avx2 {
namespace {

constexpr Index kNr = 16;  // columns per micro-tile (two ymm registers)
constexpr Index kMr = 4;   // rows per micro-tile

inline float hsum(__m256 v) {
  __m128 lo = _mm256_castps256_ps128(v);
  __m128 hi = _mm256_extractf128_ps(v, 1);
  lo = _mm_add_ps(lo, hi);
  __m128 sh = _mm_movehdup_ps(lo);
  __m128 s = _mm_add_ps(lo, sh);
  sh = _mm_movehl_ps(sh, s);
  s = _mm_add_ss(s, sh);
  return _mm_cvtss_f32(s);
}

// panel is k x 16, zero-padded past the valid column count nb.
template <int MR>
void nn_micro(Index k, const float* a, Index lda, const float* panel, float* c, Index ldc,
              Index nb, bool accumulate) {
  __m256 acc0[MR];
  __m256 acc1[MR];
  alignas(32) float tmp[kNr];
  for (int r = 0; r < MR; ++r) {
    if (!accumulate) {
      acc0[r] = _mm256_setzero_ps();
      acc1[r] = _mm256_setzero_ps();
    } else if (nb == kNr) {
      acc0[r] = _mm256_loadu_ps(c + r * ldc);
      acc1[r] = _mm256_loadu_ps(c + r * ldc + 8);
    } else {
      std::fill(tmp, tmp + kNr, 0.0f);
      std::copy(c + r * ldc, c + r * ldc + nb, tmp);
      acc0[r] = _mm256_load_ps(tmp);
      acc1[r] = _mm256_load_ps(tmp + 8);
    }
  }
  for (Index p = 0; p < k; ++p) {
    const __m256 b0 = _mm256_load_ps(panel + p * kNr);
    const __m256 b1 = _mm256_load_ps(panel + p * kNr + 8);
    for (int r = 0; r < MR; ++r) {
      const __m256 av = _mm256_broadcast_ss(a + r * lda + p);
      acc0[r] = _mm256_fmadd_ps(av, b0, acc0[r]);
      acc1[r] = _mm256_fmadd_ps(av, b1, acc1[r]);
    }
  }
  for (int r = 0; r < MR; ++r) {
    if (nb == kNr) {
      _mm256_storeu_ps(c + r * ldc, acc0[r]);
      _mm256_storeu_ps(c + r * ldc + 8, acc1[r]);
    } else {
      _mm256_store_ps(tmp, acc0[r]);
      _mm256_store_ps(tmp + 8, acc1[r]);
      std::copy(tmp, tmp + nb, c + r * ldc);
    }
  }
}

struct AlignedBuffer {
  float* data = nullptr;
  std::size_t capacity = 0;
  ~AlignedBuffer() { std::free(data); }
  float* get(std::size_t n) {
    if (n > capacity) {
      std::free(data);
      capacity = (n + 15) / 16 * 16;
      data = static_cast<float*>(std::aligned_alloc(32, capacity * sizeof(float)));
    }
    return data;
  }
};

// Dot products of MR rows of A against NR rows of B over k elements.
template <int MR, int NR>
void nt_block(Index k, const float* a, Index lda, const float* b, Index ldb, float* out) {
  __m256 acc[MR][NR];
  for (int r = 0; r < MR; ++r)
    for (int q = 0; q < NR; ++q) acc[r][q] = _mm256_setzero_ps();
  Index p = 0;
  for (; p + 8 <= k; p += 8) {
    __m256 bv[NR];
    for (int q = 0; q < NR; ++q) bv[q] = _mm256_loadu_ps(b + q * ldb + p);
    for (int r = 0; r < MR; ++r) {
      const __m256 av = _mm256_loadu_ps(a + r * lda + p);
      for (int q = 0; q < NR; ++q) acc[r][q] = _mm256_fmadd_ps(av, bv[q], acc[r][q]);
    }
  }
  for (int r = 0; r < MR; ++r) {
    for (int q = 0; q < NR; ++q) {
      float s = hsum(acc[r][q]);
      for (Index t = p; t < k; ++t) s += a[r * lda + t] * b[q * ldb + t];
      out[r * NR + q] = s;
    }
  }
}

template <int MR>
void nt_rows(Index n, Index k, const float* a, Index lda, const float* b, Index ldb, float* c,
             Index ldc, bool accumulate) {
  constexpr int kNrNt = 2;
  float out[MR * kNrNt];
  Index j = 0;
  for (; j + kNrNt <= n; j += kNrNt) {
    nt_block<MR, kNrNt>(k, a, lda, b + j * ldb, ldb, out);
    for (int r = 0; r < MR; ++r)
      for (int q = 0; q < kNrNt; ++q) {
        float& dst = c[r * ldc + j + q];
        dst = accumulate ? dst + out[r * kNrNt + q] : out[r * kNrNt + q];
      }
  }
  for (; j < n; ++j) {
    nt_block<MR, 1>(k, a, lda, b + j * ldb, ldb, out);
    for (int r = 0; r < MR; ++r) {
      float& dst = c[r * ldc + j];
      dst = accumulate ? dst + out[r] : out[r];
    }
  }
}

}  // namespace

void gemm_nn(Index m, Index n, Index k, const float* a, Index lda, const float* b, Index ldb,
             float* c, Index ldc, bool accumulate) {
  if (m <= 0 || n <= 0) return;
  thread_local AlignedBuffer buffer;
  float* panel = buffer.get(static_cast<std::size_t>(std::max<Index>(k, 1) * kNr));
  for (Index j0 = 0; j0 < n; j0 += kNr) {
    const Index nb = std::min(kNr, n - j0);
    for (Index p = 0; p < k; ++p) {
      float* dst = panel + p * kNr;
      const float* src = b + p * ldb + j0;
      if (nb == kNr) {
        _mm256_store_ps(dst, _mm256_loadu_ps(src));
        _mm256_store_ps(dst + 8, _mm256_loadu_ps(src + 8));
      } else {
        std::fill(dst, dst + kNr, 0.0f);
        std::copy(src, src + nb, dst);
      }
    }
    Index i0 = 0;
    for (; i0 + kMr <= m; i0 += kMr)
      nn_micro<4>(k, a + i0 * lda, lda, panel, c + i0 * ldc + j0, ldc, nb, accumulate);
    switch (m - i0) {
      case 3: nn_micro<3>(k, a + i0 * lda, lda, panel, c + i0 * ldc + j0, ldc, nb, accumulate); break;
      case 2: nn_micro<2>(k, a + i0 * lda, lda, panel, c + i0 * ldc + j0, ldc, nb, accumulate); break;
      case 1: nn_micro<1>(k, a + i0 * lda, lda, panel, c + i0 * ldc + j0, ldc, nb, accumulate); break;
      default: break;
    }
  }
}

void gemm_nt(Index m, Index n, Index k, const float* a, Index lda, const float* b, Index ldb,
             float* c, Index ldc, bool accumulate) {
  if (m <= 0 || n <= 0) return;
  // Chunking the reduction keeps the active rows of A and B cache resident.
  constexpr Index kChunk = 2048;
  for (Index p0 = 0; p0 < std::max<Index>(k, 1); p0 += kChunk) {
    const Index kc = std::min(kChunk, k - p0);
    const bool acc = accumulate || p0 > 0;
    Index i = 0;
    for (; i + kMr <= m; i += kMr)
      nt_rows<4>(n, kc, a + i * lda + p0, lda, b + p0, ldb, c + i * ldc, ldc, acc);
    for (; i < m; ++i) nt_rows<1>(n, kc, a + i * lda + p0, lda, b + p0, ldb, c + i * ldc, ldc, acc);
    if (k == 0) break;
  }
}

float dot(Index n, const float* x, const float* y) {
  __m256 s0 = _mm256_setzero_ps();
  __m256 s1 = _mm256_setzero_ps();
  Index i = 0;
  for (; i + 16 <= n; i += 16) {
    s0 = _mm256_fmadd_ps(_mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i), s0);
    s1 = _mm256_fmadd_ps(_mm256_loadu_ps(x + i + 8), _mm256_loadu_ps(y + i + 8), s1);
  }
  for (; i + 8 <= n; i += 8) s0 = _mm256_fmadd_ps(_mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i), s0);
  float s = hsum(_mm256_add_ps(s0, s1));
  for (; i < n; ++i) s += x[i] * y[i];
  return s;
}

void axpy(Index n, float alpha, const float* x, float* y) {
  const __m256 av = _mm256_set1_ps(alpha);
  Index i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(y + i, _mm256_fmadd_ps(av, _mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i)));
  for (; i < n; ++i) y[i] += alpha * x[i];
}

}  // namespace textcsp::simd::avx2

#endif
