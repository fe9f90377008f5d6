#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "mblm/numerics/tensor.hpp"

// Differentiable operators. Binary elementwise ops broadcast only over leading
// axes: the second operand's shape must equal the trailing dims of the first.
namespace mblm::ops {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float factor);

Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor softplus(const Tensor& x);
Tensor silu(const Tensor& x);

// x[..., K] * w[K, N] -> [..., N]
Tensor matmul(const Tensor& x, const Tensor& w);
// a[B, M, K] * b[B, K, N] -> [B, M, N]; with transpose_b, b is [B, N, K].
Tensor batched_matmul(const Tensor& a, const Tensor& b, bool transpose_b = false);

// Row-wise softmax over the last axis of [..., P, P] with every column j > i
// forced to exactly zero probability (the masked logits are never read).
Tensor softmax_causal_masked(const Tensor& scores);

// x * gain / sqrt(mean(x^2) + eps) over the last axis.
Tensor rms_norm(const Tensor& x, const Tensor& gain, float eps = 1e-5f);

// table[V, D] gathered at ids; result shape is lead_shape + [D].
Tensor embedding_gather(const Tensor& table, std::span<const std::int32_t> ids,
                        const Shape& lead_shape);

Tensor reshape(const Tensor& x, Shape shape);
Tensor transpose(const Tensor& x, int axis0, int axis1);
Tensor slice(const Tensor& x, int axis, std::size_t begin, std::size_t end);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor pad_constant(const Tensor& x, int axis, std::size_t before, std::size_t after,
                    float value = 0.0f);
// Tiles an axis of extent 1 to extent n.
Tensor repeat(const Tensor& x, int axis, std::size_t n);

enum class ScanAlgorithm { sequential, associative };

// First-order linear recurrence h_t = a_t * h_{t-1} + b_t along axis 1 of
// [K, T, F] tensors, h_{-1} = 0.
Tensor cumulative_scan(const Tensor& a, const Tensor& b,
                       ScanAlgorithm algorithm = ScanAlgorithm::sequential);

// x[..., D] (outer) y[..., N] -> [..., D, N]
Tensor outer(const Tensor& x, const Tensor& y);
// h[..., D, N] . c[..., N] -> [..., D]
Tensor contract(const Tensor& h, const Tensor& c);

// Rotary position embedding over x[..., T, Dh] with positions along axis -2.
Tensor rotary(const Tensor& x, float base = 10000.0f);

Tensor dropout(const Tensor& x, float p, bool training);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// Mean negative log-likelihood (natural log) of targets under logits[N, V]
// over positions with mask != 0. Throws when the mask selects nothing.
Tensor cross_entropy(const Tensor& logits, std::span<const std::int32_t> targets,
                     std::span<const std::uint8_t> mask);

}  // namespace mblm::ops
