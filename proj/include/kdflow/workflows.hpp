#pragma once

#include <filesystem>
#include <string>

#include <json.hpp>

#include "kdflow/actors.hpp"
#include "kdflow/config.hpp"

namespace kdflow {

/// Off-policy distillation through the actor pipeline.
RunResult run_off_policy(const KDRunConfig& config, const LaunchOptions& launch);
/// On-policy distillation: rollout generation, teacher scoring, student
/// update, weight sync every config.sync_interval steps.
RunResult run_on_policy(const KDRunConfig& config, const LaunchOptions& launch);
/// Dispatches on config.workflow.
RunResult run_workflow(const KDRunConfig& config, const LaunchOptions& launch);

struct BenchReport {
    std::size_t steps = 0;
    double teacher_delay_ms = 0.0;
    double student_delay_ms = 0.0;
    double pipelined_steps_per_s = 0.0;
    double serialized_steps_per_s = 0.0;
    double speedup = 0.0;  // pipelined / serialized
    double pipelined_teacher_fraction = 0.0;   // teacher busy time / wall time
    double serialized_teacher_fraction = 0.0;
    std::uint64_t bytes_hidden = 0;
    std::uint64_t bytes_logits_equiv = 0;
    double logit_hidden_ratio = 0.0;  // bytes_logits_equiv / bytes_hidden (= V / d)
    std::uint32_t teacher_d_model = 0;
    std::uint32_t vocab_size = 0;
};

/// Runs config.total_steps off-policy steps twice, pipelined (thread actors)
/// and serialized (one thread), with the given synthetic per-step delays.
/// Throughput is measured after the first step.
BenchReport bench_pipeline(KDRunConfig config, double teacher_delay_ms, double student_delay_ms);
nlohmann::ordered_json bench_report_json(const BenchReport& report);

/// Desk-scale fixture generation parameters.
struct FixtureSpec {
    std::uint64_t seed = 1234;
    ModelConfig teacher{2, 64, 4, 256, 512, 128, false};
    ModelConfig student{2, 32, 4, 128, 512, 128, true};
    std::size_t samples = 64;
    std::size_t prompt_min = 4;
    std::size_t prompt_max = 16;
    std::size_t response_max = 32;
    float temperature = 1.0f;
    std::int32_t eos_id = 0;
};

FixtureSpec parse_fixture_spec(const nlohmann::json& j);

/// Writes teacher.kdck, student.kdck, dataset.jsonl, config.json and
/// fixtures.json into `out_dir`. Teacher weights use derive_seed(seed, 1),
/// student derive_seed(seed, 2), prompts derive_seed(seed, 3); record i is
/// sampled from the teacher with the seed stored in its `sample_seed` field.
void gen_fixtures(const std::filesystem::path& out_dir, const FixtureSpec& spec);

/// Seed used for dataset record `index` on retry `attempt`.
std::uint64_t fixture_sample_seed(std::uint64_t seed, std::size_t index, std::size_t attempt);

}  // namespace kdflow
