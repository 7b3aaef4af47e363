#pragma once

// Raw float32 kernels. Every reduction runs in a fixed sequential order, and
// each output row of gemm() depends only on the matching row of A, so results
// do not change with batch size or blocking and repeated runs are
// bit-identical.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <span>

namespace memlong::kernels {

// C[M,N] = (accumulate ? C : 0) + A[M,K] * B[K,N], all row-major with the
// given leading dimensions. Each C element is one fused-multiply-add chain
// over k = 0..K-1.
void gemm(int64_t M, int64_t N, int64_t K, const float* A, int64_t lda, const float* B, int64_t ldb, float* C,
          int64_t ldc, bool accumulate);

// dst[cols, rows] = src[rows, cols]^T. `ld_src` is the row stride of src.
void transpose(int64_t rows, int64_t cols, const float* src, int64_t ld_src, float* dst);

// C = A * B^T with A[M,K], B[N,K].
void gemm_nt(int64_t M, int64_t N, int64_t K, const float* A, const float* B, float* C, bool accumulate);
// C = A^T * B with A[K,M], B[K,N].
void gemm_tn(int64_t M, int64_t N, int64_t K, const float* A, const float* B, float* C, bool accumulate);

// exp accurate to about 2 ulp on [-87, 88]; returns 0 below that range.
// Inline and branch-free so that loops over it vectorize.
inline float exp_approx(float x) {
  // Cody-Waite range reduction x = n ln2 + r, |r| <= ln2/2, then a degree-6
  // polynomial for e^r and an exponent-field scale by 2^n.
  constexpr float kLog2e = 1.44269504088896341f;
  constexpr float kLn2Hi = 0.693359375f;
  constexpr float kLn2Lo = -2.12194440e-4f;
  const bool underflow = x < -87.0f;
  x = std::min(std::max(x, -87.0f), 88.0f);
  const float n = std::floor(x * kLog2e + 0.5f);
  float r = x - n * kLn2Hi;
  r = r - n * kLn2Lo;
  float p = 1.9875691500e-4f;
  p = p * r + 1.3981999507e-3f;
  p = p * r + 8.3334519073e-3f;
  p = p * r + 4.1665795894e-2f;
  p = p * r + 1.6666665459e-1f;
  p = p * r + 5.0000001201e-1f;
  p = p * r * r + r + 1.0f;
  const int32_t bits = (static_cast<int32_t>(n) + 127) << 23;
  const float result = p * std::bit_cast<float>(bits);
  return underflow ? 0.0f : result;
}

void exp_inplace(std::span<float> values);

}  // namespace memlong::kernels
