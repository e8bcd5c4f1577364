#pragma once

// Dense row-major GEMM kernels.
//
// Every output element is reduced over k in a fixed order that does not
// depend on the number of rows M or on which row block the element falls in.
// A row computed alone and the same row computed inside a larger batch are
// therefore bit-identical, which is what makes incremental decoding agree
// with full recomputation and batched translation agree with single-sentence
// translation.

#include <algorithm>
#include <cstddef>

namespace mdn::kernels {

namespace detail {

inline constexpr std::size_t kColBlock = 256;

// C[i, :] (+)= sum_k A(i, k) * B[k, :], with A(i, k) = a[i * ars + k * acs].
template <typename T>
void gemm_axpy_form(std::size_t m, std::size_t n, std::size_t k, const T* a,
                    std::size_t ars, std::size_t acs, const T* b, T* c,
                    bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, T(0));
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    T* c0 = c + (i + 0) * n;
    T* c1 = c + (i + 1) * n;
    T* c2 = c + (i + 2) * n;
    T* c3 = c + (i + 3) * n;
    for (std::size_t jb = 0; jb < n; jb += kColBlock) {
      const std::size_t je = std::min(n, jb + kColBlock);
      for (std::size_t kk = 0; kk < k; ++kk) {
        const T a0 = a[(i + 0) * ars + kk * acs];
        const T a1 = a[(i + 1) * ars + kk * acs];
        const T a2 = a[(i + 2) * ars + kk * acs];
        const T a3 = a[(i + 3) * ars + kk * acs];
        const T* br = b + kk * n;
        for (std::size_t j = jb; j < je; ++j) {
          const T bv = br[j];
          c0[j] += a0 * bv;
          c1[j] += a1 * bv;
          c2[j] += a2 * bv;
          c3[j] += a3 * bv;
        }
      }
    }
  }
  for (; i < m; ++i) {
    T* c0 = c + i * n;
    for (std::size_t jb = 0; jb < n; jb += kColBlock) {
      const std::size_t je = std::min(n, jb + kColBlock);
      for (std::size_t kk = 0; kk < k; ++kk) {
        const T a0 = a[i * ars + kk * acs];
        const T* br = b + kk * n;
        for (std::size_t j = jb; j < je; ++j) c0[j] += a0 * br[j];
      }
    }
  }
}

}  // namespace detail

// Eight-lane dot product with a fixed reduction tree.
template <typename T>
inline T dot(const T* x, const T* y, std::size_t n) {
  T acc[8] = {};
  std::size_t k = 0;
  for (; k + 8 <= n; k += 8) {
    for (std::size_t l = 0; l < 8; ++l) acc[l] += x[k + l] * y[k + l];
  }
  T tail = 0;
  for (; k < n; ++k) tail += x[k] * y[k];
  return (((acc[0] + acc[1]) + (acc[2] + acc[3])) +
          ((acc[4] + acc[5]) + (acc[6] + acc[7]))) +
         tail;
}

// C (m x n) (+)= A (m x k) * B (k x n)
template <typename T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a,
             const T* b, T* c, bool accumulate = false) {
  detail::gemm_axpy_form(m, n, k, a, k, 1, b, c, accumulate);
}

// C (m x n) (+)= A^T * B, where A is stored k x m.
template <typename T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a,
             const T* b, T* c, bool accumulate = false) {
  detail::gemm_axpy_form(m, n, k, a, 1, m, b, c, accumulate);
}

// C (m x n) (+)= A (m x k) * B^T, where B is stored n x k.
template <typename T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a,
             const T* b, T* c, bool accumulate = false) {
  // Rows are visited in groups of 8 so each row of B is reused from L1.
  for (std::size_t ib = 0; ib < m; ib += 8) {
    const std::size_t ie = std::min(m, ib + 8);
    for (std::size_t j = 0; j < n; ++j) {
      const T* br = b + j * k;
      for (std::size_t i = ib; i < ie; ++i) {
        const T v = dot(a + i * k, br, k);
        T& out = c[i * n + j];
        out = accumulate ? out + v : v;
      }
    }
  }
}

}  // namespace mdn::kernels
