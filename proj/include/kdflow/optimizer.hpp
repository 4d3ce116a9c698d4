#pragma once

#include <cstdint>
#include <vector>

#include "kdflow/model.hpp"

namespace kdflow {

struct AdamWConfig {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

/// Decoupled-weight-decay Adam. Moments are held per weight tensor, in the
/// weights' declaration order.
class AdamW {
public:
    AdamW(const ModelWeights& params, AdamWConfig config);

    /// One update of `params` from `grads`; increments step() by one.
    void step(ModelWeights& params, const ModelWeights& grads);

    std::uint64_t step_count() const noexcept { return t_; }
    const AdamWConfig& config() const noexcept { return config_; }
    const std::vector<std::vector<float>>& first_moments() const noexcept { return m_; }
    const std::vector<std::vector<float>>& second_moments() const noexcept { return v_; }

private:
    AdamWConfig config_;
    std::uint64_t t_ = 0;
    std::vector<std::vector<float>> m_;
    std::vector<std::vector<float>> v_;
};

}  // namespace kdflow
