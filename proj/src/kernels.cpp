#include "kdflow/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace kdflow::kernels {

void matmul(std::span<const float> a, std::span<const float> b, std::span<float> out,
            std::size_t m, std::size_t k, std::size_t n) {
    std::fill(out.begin(), out.begin() + static_cast<std::ptrdiff_t>(m * n), 0.0f);
    // i-k-j keeps the per-element summation order (k ascending) of the naive
    // i-j-k loop while streaming rows of b.
    for (std::size_t i = 0; i < m; ++i) {
        float* orow = out.data() + i * n;
        const float* arow = a.data() + i * k;
        for (std::size_t kk = 0; kk < k; ++kk) {
            const float av = arow[kk];
            const float* brow = b.data() + kk * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
}

float rms_inv(std::span<const float> x) {
    float ss = 0.0f;
    for (float v : x) ss += v * v;
    return 1.0f / std::sqrt(ss / static_cast<float>(x.size()) + kRmsEps);
}

void rmsnorm_row(std::span<const float> x, std::span<const float> gain, std::span<float> out) {
    const float inv = rms_inv(x);
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * inv * gain[i];
}

namespace {
constexpr float kGeluC = 0.7978845608028654f;  // sqrt(2/pi)
constexpr float kGeluA = 0.044715f;
}  // namespace

float gelu_tanh(float x) noexcept {
    const float u = kGeluC * (x + kGeluA * x * x * x);
    return 0.5f * x * (1.0f + std::tanh(u));
}

float gelu_tanh_grad(float x) noexcept {
    const float u = kGeluC * (x + kGeluA * x * x * x);
    const float th = std::tanh(u);
    const float du = kGeluC * (1.0f + 3.0f * kGeluA * x * x);
    return 0.5f * (1.0f + th) + 0.5f * x * (1.0f - th * th) * du;
}

void softmax_row(std::span<const float> row, float temperature, std::span<float> out) {
    float mx = row[0] / temperature;
    for (float v : row) mx = std::max(mx, v / temperature);
    float sum = 0.0f;
    for (std::size_t i = 0; i < row.size(); ++i) {
        out[i] = std::exp(row[i] / temperature - mx);
        sum += out[i];
    }
    for (std::size_t i = 0; i < row.size(); ++i) out[i] /= sum;
}

void attention_row(std::span<const float> q_row, std::span<const float> keys,
                   std::span<const float> values, std::size_t t, std::size_t d,
                   std::size_t n_heads, std::span<float> probs_out, std::span<float> out) {
    const std::size_t hd = d / n_heads;
    const float scale = 1.0f / std::sqrt(static_cast<float>(hd));
    const std::size_t span_len = t + 1;
    std::vector<float> local;
    if (probs_out.empty()) {
        local.resize(n_heads * span_len);
        probs_out = local;
    }
    for (std::size_t h = 0; h < n_heads; ++h) {
        const std::size_t c0 = h * hd;
        float* probs = probs_out.data() + h * span_len;
        float mx = 0.0f;
        for (std::size_t j = 0; j < span_len; ++j) {
            const float* krow = keys.data() + j * d + c0;
            float s = 0.0f;
            for (std::size_t c = 0; c < hd; ++c) s += q_row[c0 + c] * krow[c];
            s *= scale;
            probs[j] = s;
            mx = j == 0 ? s : std::max(mx, s);
        }
        float sum = 0.0f;
        for (std::size_t j = 0; j < span_len; ++j) {
            probs[j] = std::exp(probs[j] - mx);
            sum += probs[j];
        }
        for (std::size_t j = 0; j < span_len; ++j) probs[j] /= sum;
        for (std::size_t c = 0; c < hd; ++c) out[c0 + c] = 0.0f;
        for (std::size_t j = 0; j < span_len; ++j) {
            const float p = probs[j];
            const float* vrow = values.data() + j * d + c0;
            for (std::size_t c = 0; c < hd; ++c) out[c0 + c] += p * vrow[c];
        }
    }
}

float sinusoid(std::size_t position, std::size_t channel, std::size_t d) noexcept {
    const double i2 = static_cast<double>(channel - channel % 2);
    const double angle = static_cast<double>(position) / std::pow(10000.0, i2 / static_cast<double>(d));
    return static_cast<float>(channel % 2 == 0 ? std::sin(angle) : std::cos(angle));
}

}  // namespace kdflow::kernels
