#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <json.hpp>

#include "kdflow/divergence.hpp"
#include "kdflow/model.hpp"
#include "kdflow/tensor.hpp"
#include "kdflow/transport.hpp"

namespace kdflow {

enum class Workflow { OffPolicy, OnPolicy };

const char* workflow_name(Workflow w) noexcept;
/// Accepts "off_policy" / "on_policy" (also "off-policy", "OffPolicy", ...).
Workflow parse_workflow(const std::string& name);

/// One distillation run. Field names double as the config-file keys.
struct KDRunConfig {
    Workflow workflow = Workflow::OffPolicy;
    std::string teacher_checkpoint;
    std::string student_checkpoint;
    std::string rollout_checkpoint;  // defaults to student_checkpoint
    DivergenceKind divergence = DivergenceKind::FKL;
    float temperature = 1.0f;
    double learning_rate = 1e-3;
    std::size_t global_batch = 16;
    std::size_t grad_accum = 4;
    std::size_t max_len = 128;
    std::size_t total_steps = 10;
    std::size_t top_k = 0;  // 0 = full logits
    DType teacher_precision = DType::F32;
    std::size_t sync_interval = 1;
    std::uint64_t seed = 0;
    std::string dataset;
    std::string output_dir;

    double weight_decay = 0.0;
    std::size_t max_new_tokens = 32;      // on-policy generation length
    float rollout_temperature = 1.0f;     // on-policy sampling temperature
    std::int32_t eos_id = 0;
    bool timings = true;                  // false writes 0 for every wall-clock field
    std::size_t channel_capacity = kDefaultChannelCapacity;
    double actor_timeout_s = 120.0;       // longest wait for any single actor message
    double teacher_delay_ms = 0.0;        // synthetic per-step teacher cost
    double student_delay_ms = 0.0;        // synthetic per-step student cost
    std::size_t debug_teacher_crash_after = 0;  // teacher dies after this many requests; 0 = never

    std::string effective_rollout_checkpoint() const {
        return rollout_checkpoint.empty() ? student_checkpoint : rollout_checkpoint;
    }
};

/// Parses a flat JSON object. Unknown keys, wrong types and missing required
/// fields raise ConfigError naming the field.
KDRunConfig parse_config(const nlohmann::json& j);
KDRunConfig load_config(const std::filesystem::path& path);
nlohmann::ordered_json config_to_json(const KDRunConfig& config);

/// Field-level checks that need no files.
void validate_config(const KDRunConfig& config);
/// Checks against the model shapes (max_len, top_k, shared vocabulary).
void validate_against_models(const KDRunConfig& config, const ModelConfig& teacher, const ModelConfig& student);

}  // namespace kdflow
