#pragma once

// Raw span kernels shared by the tensor ops, the autodiff tape and KV-cached
// decoding. Sharing them is what makes the cached decode path and the batched
// forward agree bit for bit.

#include <cstddef>
#include <span>

#include "kdflow/tensor.hpp"

namespace kdflow::kernels {

inline constexpr float kRmsEps = 1e-5f;

/// out[M,N] = a[M,K] * b[K,N]; out is overwritten. Accumulation per element runs
/// over k in increasing order.
void matmul(std::span<const float> a, std::span<const float> b, std::span<float> out,
            std::size_t m, std::size_t k, std::size_t n);

/// out = x / sqrt(mean(x^2) + eps) * gain for one row of width d.
void rmsnorm_row(std::span<const float> x, std::span<const float> gain, std::span<float> out);

/// Inverse RMS used by rmsnorm_row (exposed for the backward pass).
float rms_inv(std::span<const float> x);

float gelu_tanh(float x) noexcept;
float gelu_tanh_grad(float x) noexcept;

/// Numerically stable softmax of row / temperature.
void softmax_row(std::span<const float> row, float temperature, std::span<float> out);

/// Causal self-attention for one query position.
///   q_row: [d] query for position t
///   keys/values: [>= t+1, d] rows for positions 0..t of the same sequence
///   probs_out: [n_heads * (t+1)] attention weights (may be empty if not needed)
///   out: [d]
void attention_row(std::span<const float> q_row, std::span<const float> keys,
                   std::span<const float> values, std::size_t t, std::size_t d,
                   std::size_t n_heads, std::span<float> probs_out, std::span<float> out);

/// Fixed sinusoidal positional encoding value for (position, channel).
float sinusoid(std::size_t position, std::size_t channel, std::size_t d) noexcept;

}  // namespace kdflow::kernels
