#pragma once

// Single-process reference distillation: the teacher computes full logits in
// the same address space and the student trains on them directly. It shares
// the batch builder, model, divergence and optimizer code with the actor
// pipeline; only transport and process topology are absent.

#include <filesystem>
#include <vector>

#include "kdflow/config.hpp"
#include "kdflow/dataset.hpp"
#include "kdflow/engine.hpp"
#include "kdflow/metrics.hpp"
#include "kdflow/rng.hpp"

namespace kdflow {

struct OracleState {
    ModelConfig teacher_config;
    ModelWeights teacher;  // frozen, already in the teacher precision
    StudentEngine student;
    CounterRng rng;
    std::size_t step = 0;
};

OracleState make_oracle_state(const KDRunConfig& config);

/// One optimizer step on `batch`: teacher forward_logits, then the student
/// engine's micro-steps and update. Timings honour config.timings and the
/// synthetic delays.
StepMetrics oracle_step(OracleState& state, const StepBatch& batch, const KDRunConfig& config);

/// Off-policy run of config.total_steps steps. When `log_path` is non-empty
/// the metrics are also written there.
std::vector<StepMetrics> run_oracle(const KDRunConfig& config, const std::filesystem::path& log_path = {},
                                    std::vector<double>* step_done_s = nullptr);

}  // namespace kdflow
