#pragma once

#include <cstddef>

// Dense float kernels. Every output element is accumulated with fused
// multiply-adds in ascending reduction index, so a row's result never depends
// on how many other rows are in the call.
namespace mblm::kernels {

// c[m x n] = a[m x k] * b[k x n]
void gemm_nn(const float* a, const float* b, float* c, std::size_t m, std::size_t k,
             std::size_t n);

// c[m x n] = a[m x k] * b[n x k]^T
void gemm_nt(const float* a, const float* b, float* c, std::size_t m, std::size_t k,
             std::size_t n);

// c[k x n] += a[m x k]^T * b[m x n]
void gemm_tn_acc(const float* a, const float* b, float* c, std::size_t m, std::size_t k,
                 std::size_t n);

// out[cols x rows] = in[rows x cols]^T
void transpose(const float* in, float* out, std::size_t rows, std::size_t cols);

}  // namespace mblm::kernels
