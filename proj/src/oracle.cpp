#include "kdflow/oracle.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <thread>

#include "kdflow/errors.hpp"
#include "kdflow/transport.hpp"

namespace kdflow {

using Clock = std::chrono::steady_clock;

namespace {

double ms_since(const KDRunConfig& c, Clock::time_point t0) {
    return c.timings ? std::chrono::duration<double, std::milli>(Clock::now() - t0).count() : 0.0;
}

void delay(double ms) {
    if (ms > 0.0) std::this_thread::sleep_for(std::chrono::duration<double, std::milli>(ms));
}

}  // namespace

OracleState make_oracle_state(const KDRunConfig& config) {
    validate_config(config);
    auto [tcfg, tw] = load_checkpoint(config.teacher_checkpoint);
    auto [scfg, sw] = load_checkpoint(config.student_checkpoint);
    validate_against_models(config, tcfg, scfg);
    StudentEngineConfig ec;
    ec.divergence = config.divergence;
    ec.temperature = config.temperature;
    ec.top_k = config.top_k;
    ec.optimizer.learning_rate = config.learning_rate;
    ec.optimizer.weight_decay = config.weight_decay;
    return OracleState{tcfg, tw.to(config.teacher_precision), StudentEngine(scfg, std::move(sw), ec),
                       CounterRng(config.seed), 0};
}

StepMetrics oracle_step(OracleState& state, const StepBatch& batch, const KDRunConfig& config) {
    StepMetrics m;
    m.step = batch.step;
    m.epoch = batch.epoch;
    const double normalizer = static_cast<double>(std::max<std::size_t>(1, batch.unmasked));
    const double teacher_delay = config.teacher_delay_ms / static_cast<double>(config.grad_accum);
    const std::uint32_t vocab = state.student.config().vocab_size;
    for (const auto& mb : batch.micro) {
        const auto t0 = Clock::now();
        Tensor teacher_logits = forward_logits(state.teacher, state.teacher_config, mb.tokens);
        delay(teacher_delay);
        m.t_teacher_ms += ms_since(config, t0);
        m.bytes_hidden += comm_volume(mb.tokens.batch, mb.tokens.seq, state.teacher_config.d_model, sizeof(float));
        m.bytes_logits_equiv += comm_volume(mb.tokens.batch, mb.tokens.seq, vocab, sizeof(float));
        const auto t1 = Clock::now();
        state.student.micro_step(mb.tokens, mb.mask, teacher_logits, normalizer);
        m.t_student_ms += ms_since(config, t1);
    }
    const auto t2 = Clock::now();
    StepResult r = state.student.finish_step();
    delay(config.student_delay_ms);
    m.t_student_ms += ms_since(config, t2);
    if (std::isfinite(r.loss)) m.loss = r.loss;
    m.grad_norm = std::isfinite(r.grad_norm) ? r.grad_norm : 0.0;
    if (!r.applied && !batch.micro.empty()) m.error = "non-finite loss; update skipped";
    ++state.step;
    return m;
}

std::vector<StepMetrics> run_oracle(const KDRunConfig& config, const std::filesystem::path& log_path,
                                    std::vector<double>* step_done_s) {
    if (config.workflow != Workflow::OffPolicy)
        throw ConfigError("workflow", "the oracle runs off-policy distillation only");
    OracleState state = make_oracle_state(config);
    BatchBuilder builder(load_dataset(config.dataset), config.global_batch, config.grad_accum, config.max_len,
                         config.eos_id, state.student.config().vocab_size);
    std::ofstream log;
    if (!log_path.empty()) {
        if (log_path.has_parent_path()) std::filesystem::create_directories(log_path.parent_path());
        log.open(log_path, std::ios::trunc);
        if (!log) throw IoError("cannot write '" + log_path.string() + "'");
    }
    std::vector<StepMetrics> out;
    const auto t0 = Clock::now();
    for (std::size_t s = 0; s < config.total_steps; ++s) {
        out.push_back(oracle_step(state, builder.build(s), config));
        if (log) {
            write_metrics_line(log, out.back());
            log.flush();
        }
        if (step_done_s) step_done_s->push_back(std::chrono::duration<double>(Clock::now() - t0).count());
    }
    return out;
}

}  // namespace kdflow
