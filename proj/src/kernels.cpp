#include "memlong/kernels.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <vector>

#if defined(__AVX512F__)
#include <immintrin.h>
#endif

namespace memlong::kernels {
namespace {

constexpr int64_t kRowBlock = 6;
constexpr int64_t kColBlock = 64;

#if defined(__AVX512F__)

inline __mmask16 lane_mask(int64_t remaining) {
  if (remaining >= 16) return static_cast<__mmask16>(0xFFFF);
  if (remaining <= 0) return 0;
  return static_cast<__mmask16>((1u << remaining) - 1u);
}

template <int R>
void micro_kernel(int64_t K, const float* A, int64_t lda, const float* B, int64_t ldb, float* C, int64_t ldc,
                  int64_t ncols, bool accumulate) {
  const __mmask16 m0 = lane_mask(ncols), m1 = lane_mask(ncols - 16), m2 = lane_mask(ncols - 32),
                  m3 = lane_mask(ncols - 48);
  __m512 c[R][4];
  for (int r = 0; r < R; ++r) {
    float* crow = C + r * ldc;
    if (accumulate) {
      c[r][0] = _mm512_maskz_loadu_ps(m0, crow);
      c[r][1] = _mm512_maskz_loadu_ps(m1, crow + 16);
      c[r][2] = _mm512_maskz_loadu_ps(m2, crow + 32);
      c[r][3] = _mm512_maskz_loadu_ps(m3, crow + 48);
    } else {
      c[r][0] = c[r][1] = c[r][2] = c[r][3] = _mm512_setzero_ps();
    }
  }
  for (int64_t k = 0; k < K; ++k) {
    const float* brow = B + k * ldb;
    const __m512 b0 = _mm512_maskz_loadu_ps(m0, brow);
    const __m512 b1 = _mm512_maskz_loadu_ps(m1, brow + 16);
    const __m512 b2 = _mm512_maskz_loadu_ps(m2, brow + 32);
    const __m512 b3 = _mm512_maskz_loadu_ps(m3, brow + 48);
    for (int r = 0; r < R; ++r) {
      const __m512 a = _mm512_set1_ps(A[r * lda + k]);
      c[r][0] = _mm512_fmadd_ps(a, b0, c[r][0]);
      c[r][1] = _mm512_fmadd_ps(a, b1, c[r][1]);
      c[r][2] = _mm512_fmadd_ps(a, b2, c[r][2]);
      c[r][3] = _mm512_fmadd_ps(a, b3, c[r][3]);
    }
  }
  for (int r = 0; r < R; ++r) {
    float* crow = C + r * ldc;
    _mm512_mask_storeu_ps(crow, m0, c[r][0]);
    _mm512_mask_storeu_ps(crow + 16, m1, c[r][1]);
    _mm512_mask_storeu_ps(crow + 32, m2, c[r][2]);
    _mm512_mask_storeu_ps(crow + 48, m3, c[r][3]);
  }
}

#else

template <int R>
void micro_kernel(int64_t K, const float* A, int64_t lda, const float* B, int64_t ldb, float* C, int64_t ldc,
                  int64_t ncols, bool accumulate) {
  float c[R][kColBlock];
  for (int r = 0; r < R; ++r)
    for (int64_t j = 0; j < ncols; ++j) c[r][j] = accumulate ? C[r * ldc + j] : 0.0f;
  for (int64_t k = 0; k < K; ++k) {
    const float* brow = B + k * ldb;
    for (int r = 0; r < R; ++r) {
      const float a = A[r * lda + k];
      for (int64_t j = 0; j < ncols; ++j) c[r][j] = std::fma(a, brow[j], c[r][j]);
    }
  }
  for (int r = 0; r < R; ++r)
    for (int64_t j = 0; j < ncols; ++j) C[r * ldc + j] = c[r][j];
}

#endif

using MicroFn = void (*)(int64_t, const float*, int64_t, const float*, int64_t, float*, int64_t, int64_t, bool);
constexpr MicroFn kMicro[kRowBlock + 1] = {nullptr,         micro_kernel<1>, micro_kernel<2>, micro_kernel<3>,
                                           micro_kernel<4>, micro_kernel<5>, micro_kernel<6>};

}  // namespace

void gemm(int64_t M, int64_t N, int64_t K, const float* A, int64_t lda, const float* B, int64_t ldb, float* C,
          int64_t ldc, bool accumulate) {
  if (M <= 0 || N <= 0) return;
  if (K <= 0) {
    if (!accumulate)
      for (int64_t i = 0; i < M; ++i) std::fill(C + i * ldc, C + i * ldc + N, 0.0f);
    return;
  }
  for (int64_t j0 = 0; j0 < N; j0 += kColBlock) {
    const int64_t nc = std::min(kColBlock, N - j0);
    for (int64_t i0 = 0; i0 < M; i0 += kRowBlock) {
      const int64_t nr = std::min(kRowBlock, M - i0);
      kMicro[nr](K, A + i0 * lda, lda, B + j0, ldb, C + i0 * ldc + j0, ldc, nc, accumulate);
    }
  }
}

void transpose(int64_t rows, int64_t cols, const float* src, int64_t ld_src, float* dst) {
  constexpr int64_t kTile = 32;
  for (int64_t i0 = 0; i0 < rows; i0 += kTile) {
    const int64_t i1 = std::min(rows, i0 + kTile);
    for (int64_t j0 = 0; j0 < cols; j0 += kTile) {
      const int64_t j1 = std::min(cols, j0 + kTile);
      for (int64_t i = i0; i < i1; ++i)
        for (int64_t j = j0; j < j1; ++j) dst[j * rows + i] = src[i * ld_src + j];
    }
  }
}

void gemm_nt(int64_t M, int64_t N, int64_t K, const float* A, const float* B, float* C, bool accumulate) {
  std::vector<float> bt(static_cast<size_t>(N * K));
  transpose(N, K, B, K, bt.data());
  gemm(M, N, K, A, K, bt.data(), N, C, N, accumulate);
}

void gemm_tn(int64_t M, int64_t N, int64_t K, const float* A, const float* B, float* C, bool accumulate) {
  std::vector<float> at(static_cast<size_t>(M * K));
  transpose(K, M, A, M, at.data());
  gemm(M, N, K, at.data(), K, B, N, C, N, accumulate);
}

void exp_inplace(std::span<float> values) {
  float* v = values.data();
  const size_t n = values.size();
  size_t i = 0;
#if defined(__AVX512F__)
  // Same operation sequence as exp_approx, so results match it bit for bit.
  const __m512 log2e = _mm512_set1_ps(1.44269504088896341f);
  const __m512 ln2_hi = _mm512_set1_ps(0.693359375f);
  const __m512 ln2_lo = _mm512_set1_ps(-2.12194440e-4f);
  const __m512 lo = _mm512_set1_ps(-87.0f), hi = _mm512_set1_ps(88.0f);
  const __m512 half = _mm512_set1_ps(0.5f), one = _mm512_set1_ps(1.0f);
  const __m512 c0 = _mm512_set1_ps(1.9875691500e-4f), c1 = _mm512_set1_ps(1.3981999507e-3f),
               c2 = _mm512_set1_ps(8.3334519073e-3f), c3 = _mm512_set1_ps(4.1665795894e-2f),
               c4 = _mm512_set1_ps(1.6666665459e-1f), c5 = _mm512_set1_ps(5.0000001201e-1f);
  for (; i + 16 <= n; i += 16) {
    const __m512 x0 = _mm512_loadu_ps(v + i);
    const __mmask16 underflow = _mm512_cmp_ps_mask(x0, lo, _CMP_LT_OQ);
    const __m512 x = _mm512_min_ps(_mm512_max_ps(x0, lo), hi);
    const __m512 t = _mm512_add_ps(_mm512_mul_ps(x, log2e), half);
    const __m512 k = _mm512_roundscale_ps(t, _MM_FROUND_TO_NEG_INF | _MM_FROUND_NO_EXC);
    __m512 r = _mm512_sub_ps(x, _mm512_mul_ps(k, ln2_hi));
    r = _mm512_sub_ps(r, _mm512_mul_ps(k, ln2_lo));
    __m512 p = _mm512_add_ps(_mm512_mul_ps(c0, r), c1);
    p = _mm512_add_ps(_mm512_mul_ps(p, r), c2);
    p = _mm512_add_ps(_mm512_mul_ps(p, r), c3);
    p = _mm512_add_ps(_mm512_mul_ps(p, r), c4);
    p = _mm512_add_ps(_mm512_mul_ps(p, r), c5);
    p = _mm512_add_ps(_mm512_add_ps(_mm512_mul_ps(_mm512_mul_ps(p, r), r), r), one);
    const __m512i bits = _mm512_slli_epi32(_mm512_add_epi32(_mm512_cvttps_epi32(k), _mm512_set1_epi32(127)), 23);
    const __m512 res = _mm512_mul_ps(p, _mm512_castsi512_ps(bits));
    _mm512_storeu_ps(v + i, _mm512_mask_blend_ps(underflow, res, _mm512_setzero_ps()));
  }
#endif
  for (; i < n; ++i) v[i] = exp_approx(v[i]);
}

}  // namespace memlong::kernels
