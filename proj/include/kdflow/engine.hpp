#pragma once

// Training and generation engines. The student actor, the rollout actor and
// the monolithic oracle all drive these same classes; only the transport
// around them differs.

#include <cstdint>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <vector>

#include "kdflow/divergence.hpp"
#include "kdflow/model.hpp"
#include "kdflow/optimizer.hpp"

namespace kdflow {

struct StudentEngineConfig {
    DivergenceKind divergence = DivergenceKind::FKL;
    float temperature = 1.0f;
    std::size_t top_k = 0;  // 0 = full logits
    AdamWConfig optimizer;
};

struct MicroResult {
    double loss = 0.0;  // already divided by the step normalizer
    std::size_t unmasked = 0;
};

struct StepResult {
    double loss = 0.0;
    double grad_norm = 0.0;
    bool applied = false;  // false when the step was skipped (non-finite loss)
    std::uint64_t optimizer_steps = 0;
};

class StudentEngine {
public:
    StudentEngine(ModelConfig config, ModelWeights weights, StudentEngineConfig engine);

    /// Forward, loss against `teacher_logits` ([B, T, V] or [B*T, V]) and
    /// backward for one micro-batch; gradients accumulate until finish_step().
    /// `mask` holds B*T entries and `normalizer` is the unmasked count of the
    /// whole step.
    MicroResult micro_step(const TokenBatch& tokens, const Tensor& mask, const Tensor& teacher_logits,
                           double normalizer);

    /// Applies AdamW to the accumulated gradient (unless the loss went
    /// non-finite) and clears the accumulator.
    StepResult finish_step();

    const ModelConfig& config() const noexcept { return config_; }
    const ModelWeights& weights() const noexcept { return weights_; }
    const AdamW& optimizer() const noexcept { return opt_; }
    const StudentEngineConfig& engine_config() const noexcept { return engine_; }

private:
    ModelConfig config_;
    ModelWeights weights_;
    StudentEngineConfig engine_;
    AdamW opt_;
    std::optional<ModelWeights> grad_acc_;
    double pending_loss_ = 0.0;
};

/// Sum of squares of every gradient entry, accumulated in declaration order.
double grad_l2_norm(const ModelWeights& grads);

/// Rollout weights with atomic version swaps. Readers take a snapshot; a
/// snapshot never mixes tensors of two versions.
class RolloutEngine {
public:
    struct Snapshot {
        std::uint64_t version = 0;
        ModelWeights weights;
    };

    enum class BeginStatus { Accepted, Gap };

    RolloutEngine(ModelConfig config, ModelWeights weights, std::uint64_t version = 0);

    std::shared_ptr<const Snapshot> snapshot() const;
    std::uint64_t version() const;

    /// Starts receiving `count` tensors for `version`. A non-forced begin must
    /// be exactly one past the committed version; otherwise the caller should
    /// request a resync. A forced begin accepts any version. Any staged but
    /// uncommitted tensors are discarded.
    BeginStatus begin(std::uint64_t version, std::size_t count, bool forced);
    void stage(Tensor tensor);
    /// Validates the staged set and swaps it in; returns the new version.
    std::uint64_t commit(std::uint64_t version);
    /// Drops a partially received version.
    void abort() noexcept;
    bool receiving() const noexcept { return pending_.has_value(); }

    /// Continuation of each prompt from one snapshot. Prompt i is sampled with
    /// derive_seed(seed, i); generation stops at max_seq_len.
    std::pair<std::uint64_t, std::vector<std::vector<std::int32_t>>> generate(
        const std::vector<std::vector<std::int32_t>>& prompts, const SamplingParams& params) const;

    const ModelConfig& config() const noexcept { return config_; }

private:
    struct Pending {
        std::uint64_t version;
        std::size_t count;
        std::vector<Tensor> tensors;
    };

    ModelConfig config_;
    mutable std::mutex mu_;
    std::shared_ptr<const Snapshot> current_;
    std::optional<Pending> pending_;
};

}  // namespace kdflow
