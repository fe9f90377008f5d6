#include "mblm/numerics/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

#if defined(__AVX512F__) || (defined(__AVX2__) && defined(__FMA__))
#include <immintrin.h>
#endif

namespace mblm::kernels {

namespace {

// B is packed into column panels of kPanel floats (zero padded), so the
// micro-kernels only ever see full-width rows.
constexpr std::size_t kPanel = 64;

#if defined(__AVX512F__)

constexpr std::size_t kRows = 6;

template <std::size_t R>
inline void micro(const float* a, std::size_t lda, const float* panel, float* c, std::size_t ldc,
                  std::size_t depth, std::size_t cols) {
  __m512 acc[R][4];
  for (std::size_t r = 0; r < R; ++r) {
    for (std::size_t v = 0; v < 4; ++v) acc[r][v] = _mm512_setzero_ps();
  }
  for (std::size_t p = 0; p < depth; ++p) {
    const float* br = panel + p * kPanel;
    const __m512 b0 = _mm512_loadu_ps(br);
    const __m512 b1 = _mm512_loadu_ps(br + 16);
    const __m512 b2 = _mm512_loadu_ps(br + 32);
    const __m512 b3 = _mm512_loadu_ps(br + 48);
    for (std::size_t r = 0; r < R; ++r) {
      const __m512 av = _mm512_set1_ps(a[r * lda + p]);
      acc[r][0] = _mm512_fmadd_ps(av, b0, acc[r][0]);
      acc[r][1] = _mm512_fmadd_ps(av, b1, acc[r][1]);
      acc[r][2] = _mm512_fmadd_ps(av, b2, acc[r][2]);
      acc[r][3] = _mm512_fmadd_ps(av, b3, acc[r][3]);
    }
  }
  alignas(64) float tmp[kPanel];
  for (std::size_t r = 0; r < R; ++r) {
    if (cols == kPanel) {
      for (std::size_t v = 0; v < 4; ++v) _mm512_storeu_ps(c + r * ldc + 16 * v, acc[r][v]);
    } else {
      for (std::size_t v = 0; v < 4; ++v) _mm512_store_ps(tmp + 16 * v, acc[r][v]);
      std::memcpy(c + r * ldc, tmp, cols * sizeof(float));
    }
  }
}

#elif defined(__AVX2__) && defined(__FMA__)

constexpr std::size_t kRows = 2;

template <std::size_t R>
inline void micro(const float* a, std::size_t lda, const float* panel, float* c, std::size_t ldc,
                  std::size_t depth, std::size_t cols) {
  __m256 acc[R][8];
  for (std::size_t r = 0; r < R; ++r) {
    for (std::size_t v = 0; v < 8; ++v) acc[r][v] = _mm256_setzero_ps();
  }
  for (std::size_t p = 0; p < depth; ++p) {
    const float* br = panel + p * kPanel;
    for (std::size_t r = 0; r < R; ++r) {
      const __m256 av = _mm256_set1_ps(a[r * lda + p]);
      for (std::size_t v = 0; v < 8; ++v) {
        acc[r][v] = _mm256_fmadd_ps(av, _mm256_loadu_ps(br + 8 * v), acc[r][v]);
      }
    }
  }
  alignas(32) float tmp[kPanel];
  for (std::size_t r = 0; r < R; ++r) {
    for (std::size_t v = 0; v < 8; ++v) _mm256_store_ps(tmp + 8 * v, acc[r][v]);
    std::memcpy(c + r * ldc, tmp, cols * sizeof(float));
  }
}

#else

constexpr std::size_t kRows = 1;

template <std::size_t R>
inline void micro(const float* a, std::size_t lda, const float* panel, float* c, std::size_t ldc,
                  std::size_t depth, std::size_t cols) {
  float acc[R][kPanel] = {};
  for (std::size_t p = 0; p < depth; ++p) {
    const float* br = panel + p * kPanel;
    for (std::size_t r = 0; r < R; ++r) {
      const float av = a[r * lda + p];
      for (std::size_t j = 0; j < kPanel; ++j) acc[r][j] = std::fma(av, br[j], acc[r][j]);
    }
  }
  for (std::size_t r = 0; r < R; ++r) std::memcpy(c + r * ldc, acc[r], cols * sizeof(float));
}

#endif

}  // namespace

void gemm_nn(const float* a, const float* b, float* c, std::size_t m, std::size_t k,
             std::size_t n) {
  if (m == 0 || n == 0) return;
  if (k == 0) {
    std::fill(c, c + m * n, 0.0f);
    return;
  }
  std::vector<float> panel(k * kPanel);
  for (std::size_t j0 = 0; j0 < n; j0 += kPanel) {
    const std::size_t cols = std::min(kPanel, n - j0);
    for (std::size_t p = 0; p < k; ++p) {
      float* dst = panel.data() + p * kPanel;
      std::memcpy(dst, b + p * n + j0, cols * sizeof(float));
      std::fill(dst + cols, dst + kPanel, 0.0f);
    }
    std::size_t i = 0;
    for (; i + kRows <= m; i += kRows) {
      micro<kRows>(a + i * k, k, panel.data(), c + i * n + j0, n, k, cols);
    }
    for (; i < m; ++i) micro<1>(a + i * k, k, panel.data(), c + i * n + j0, n, k, cols);
  }
}

void gemm_nt(const float* a, const float* b, float* c, std::size_t m, std::size_t k,
             std::size_t n) {
  std::vector<float> bt(k * n);
  transpose(b, bt.data(), n, k);
  gemm_nn(a, bt.data(), c, m, k, n);
}

void gemm_tn_acc(const float* a, const float* b, float* c, std::size_t m, std::size_t k,
                 std::size_t n) {
  std::vector<float> at(m * k);
  std::vector<float> tmp(k * n);
  transpose(a, at.data(), m, k);
  gemm_nn(at.data(), b, tmp.data(), k, m, n);
  for (std::size_t i = 0; i < k * n; ++i) c[i] += tmp[i];
}

void transpose(const float* in, float* out, std::size_t rows, std::size_t cols) {
  constexpr std::size_t tile = 32;
  for (std::size_t i0 = 0; i0 < rows; i0 += tile) {
    for (std::size_t j0 = 0; j0 < cols; j0 += tile) {
      const std::size_t i1 = std::min(rows, i0 + tile);
      const std::size_t j1 = std::min(cols, j0 + tile);
      for (std::size_t i = i0; i < i1; ++i) {
        for (std::size_t j = j0; j < j1; ++j) out[j * rows + i] = in[i * cols + j];
      }
    }
  }
}

}  // namespace mblm::kernels
