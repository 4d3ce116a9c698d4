#include "kdflow/workflows.hpp"

#include <fstream>

#include "kdflow/dataset.hpp"
#include "kdflow/errors.hpp"
#include "kdflow/oracle.hpp"
#include "kdflow/rng.hpp"

namespace kdflow {

using nlohmann::json;

RunResult run_off_policy(const KDRunConfig& config, const LaunchOptions& launch) {
    if (config.workflow != Workflow::OffPolicy) throw ConfigError("workflow", "expected off_policy");
    return controller_run(config, launch);
}

RunResult run_on_policy(const KDRunConfig& config, const LaunchOptions& launch) {
    if (config.workflow != Workflow::OnPolicy) throw ConfigError("workflow", "expected on_policy");
    return controller_run(config, launch);
}

RunResult run_workflow(const KDRunConfig& config, const LaunchOptions& launch) {
    return config.workflow == Workflow::OnPolicy ? run_on_policy(config, launch) : run_off_policy(config, launch);
}

namespace {

/// Steps per second between the completion of step `warmup` and the last one.
double steady_rate(const std::vector<double>& done, std::size_t warmup) {
    if (done.size() < warmup + 2) throw ParameterError("bench needs at least " + std::to_string(warmup + 2) + " steps");
    const double span = done.back() - done[warmup];
    return span > 0.0 ? static_cast<double>(done.size() - 1 - warmup) / span : 0.0;
}

}  // namespace

BenchReport bench_pipeline(KDRunConfig config, double teacher_delay_ms, double student_delay_ms) {
    config.workflow = Workflow::OffPolicy;
    config.timings = true;
    config.teacher_delay_ms = teacher_delay_ms;
    config.student_delay_ms = student_delay_ms;
    const std::filesystem::path base = config.output_dir;

    BenchReport rep;
    rep.steps = config.total_steps;
    rep.teacher_delay_ms = teacher_delay_ms;
    rep.student_delay_ms = student_delay_ms;
    const std::size_t warmup = 1;

    KDRunConfig piped = config;
    piped.output_dir = (base / "bench_pipelined").string();
    RunResult run = controller_run(piped, LaunchOptions{});
    rep.pipelined_steps_per_s = steady_rate(run.step_done_s, warmup);
    double teacher_ms = 0.0;
    for (const auto& m : run.metrics) {
        teacher_ms += m.t_teacher_ms;
        rep.bytes_hidden += m.bytes_hidden;
        rep.bytes_logits_equiv += m.bytes_logits_equiv;
    }
    rep.pipelined_teacher_fraction = run.wall_s > 0 ? teacher_ms / (run.wall_s * 1000.0) : 0.0;

    std::vector<double> done;
    const auto t0 = std::chrono::steady_clock::now();
    auto serial = run_oracle(config, base / "bench_serialized" / "metrics.jsonl", &done);
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    rep.serialized_steps_per_s = steady_rate(done, warmup);
    double serial_teacher_ms = 0.0;
    for (const auto& m : serial) serial_teacher_ms += m.t_teacher_ms;
    rep.serialized_teacher_fraction = wall > 0 ? serial_teacher_ms / (wall * 1000.0) : 0.0;

    rep.speedup = rep.serialized_steps_per_s > 0 ? rep.pipelined_steps_per_s / rep.serialized_steps_per_s : 0.0;
    const auto tcfg = load_checkpoint(config.teacher_checkpoint).first;
    rep.teacher_d_model = tcfg.d_model;
    rep.vocab_size = tcfg.vocab_size;
    rep.logit_hidden_ratio =
        rep.bytes_hidden > 0 ? static_cast<double>(rep.bytes_logits_equiv) / static_cast<double>(rep.bytes_hidden) : 0.0;
    return rep;
}

nlohmann::ordered_json bench_report_json(const BenchReport& r) {
    nlohmann::ordered_json j;
    j["steps"] = r.steps;
    j["teacher_delay_ms"] = r.teacher_delay_ms;
    j["student_delay_ms"] = r.student_delay_ms;
    j["pipelined_steps_per_s"] = r.pipelined_steps_per_s;
    j["serialized_steps_per_s"] = r.serialized_steps_per_s;
    j["speedup"] = r.speedup;
    j["pipelined_teacher_fraction"] = r.pipelined_teacher_fraction;
    j["serialized_teacher_fraction"] = r.serialized_teacher_fraction;
    j["bytes_hidden"] = r.bytes_hidden;
    j["bytes_logits_equiv"] = r.bytes_logits_equiv;
    j["logit_hidden_ratio"] = r.logit_hidden_ratio;
    j["teacher_d_model"] = r.teacher_d_model;
    j["vocab_size"] = r.vocab_size;
    return j;
}

namespace {

ModelConfig parse_model(const json& j, ModelConfig base, const std::string& field) {
    if (!j.is_object()) throw ConfigError(field, "expected an object");
    for (const auto& [k, v] : j.items()) {
        const std::string name = field + "." + k;
        if (k == "tied_lm_head") {
            if (!v.is_boolean()) throw ConfigError(name, "expected true or false");
            base.tied_lm_head = v.get<bool>();
            continue;
        }
        if (!v.is_number_unsigned()) throw ConfigError(name, "expected a non-negative integer");
        const auto x = v.get<std::uint32_t>();
        if (k == "n_layers") base.n_layers = x;
        else if (k == "d_model") base.d_model = x;
        else if (k == "n_heads") base.n_heads = x;
        else if (k == "d_ff") base.d_ff = x;
        else if (k == "vocab_size") base.vocab_size = x;
        else if (k == "max_seq_len") base.max_seq_len = x;
        else throw ConfigError(name, "unknown model field");
    }
    try {
        base.validate();
    } catch (const ParameterError& e) {
        throw ConfigError(field, e.what());
    }
    return base;
}

std::size_t get_count(const json& v, const std::string& k) {
    if (!v.is_number_unsigned()) throw ConfigError(k, "expected a non-negative integer");
    return v.get<std::size_t>();
}

}  // namespace

FixtureSpec parse_fixture_spec(const json& j) {
    FixtureSpec s;
    if (!j.is_object()) throw ConfigError("<root>", "fixture config must be a JSON object");
    for (const auto& [k, v] : j.items()) {
        if (k == "seed") s.seed = get_count(v, k);
        else if (k == "samples") s.samples = get_count(v, k);
        else if (k == "prompt_min") s.prompt_min = get_count(v, k);
        else if (k == "prompt_max") s.prompt_max = get_count(v, k);
        else if (k == "response_max") s.response_max = get_count(v, k);
        else if (k == "eos_id") s.eos_id = static_cast<std::int32_t>(get_count(v, k));
        else if (k == "temperature") {
            if (!v.is_number()) throw ConfigError(k, "expected a number");
            s.temperature = v.get<float>();
        } else if (k == "teacher") s.teacher = parse_model(v, s.teacher, k);
        else if (k == "student") s.student = parse_model(v, s.student, k);
        else if (k == "vocab_size") {
            s.teacher.vocab_size = s.student.vocab_size = static_cast<std::uint32_t>(get_count(v, k));
        } else throw ConfigError(k, "unknown fixture field");
    }
    if (s.teacher.vocab_size != s.student.vocab_size)
        throw ConfigError("student.vocab_size", "teacher and student must share a vocabulary");
    if (s.samples == 0) throw ConfigError("samples", "must be >= 1");
    if (s.prompt_min == 0 || s.prompt_min > s.prompt_max) throw ConfigError("prompt_min", "need 1 <= prompt_min <= prompt_max");
    if (s.response_max == 0) throw ConfigError("response_max", "must be >= 1");
    if (s.prompt_max + s.response_max > std::min(s.teacher.max_seq_len, s.student.max_seq_len))
        throw ConfigError("response_max", "prompt_max + response_max exceeds the models' max_seq_len");
    if (s.eos_id < 0 || static_cast<std::uint32_t>(s.eos_id) >= s.teacher.vocab_size)
        throw ConfigError("eos_id", "outside the vocabulary");
    return s;
}

std::uint64_t fixture_sample_seed(std::uint64_t seed, std::size_t index, std::size_t attempt) {
    return derive_seed(seed, 0x1000 + index, attempt);
}

void gen_fixtures(const std::filesystem::path& out_dir, const FixtureSpec& spec) {
    std::filesystem::create_directories(out_dir);
    const ModelWeights teacher = init_weights(spec.teacher, derive_seed(spec.seed, 1));
    const ModelWeights student = init_weights(spec.student, derive_seed(spec.seed, 2));
    save_checkpoint(out_dir / "teacher.kdck", spec.teacher, teacher);
    save_checkpoint(out_dir / "student.kdck", spec.student, student);

    CounterRng rng(derive_seed(spec.seed, 3));
    std::ofstream data(out_dir / "dataset.jsonl", std::ios::trunc);
    if (!data) throw IoError("cannot write '" + (out_dir / "dataset.jsonl").string() + "'");
    constexpr std::size_t kMaxAttempts = 64;
    for (std::size_t i = 0; i < spec.samples; ++i) {
        const std::size_t len = spec.prompt_min + rng.below(spec.prompt_max - spec.prompt_min + 1);
        std::vector<std::int32_t> prompt(len);
        for (auto& t : prompt) {
            // Prompts avoid the EOS id.
            auto id = static_cast<std::int32_t>(rng.below(spec.teacher.vocab_size - 1));
            t = id >= spec.eos_id ? id + 1 : id;
        }
        std::vector<std::int32_t> response;
        std::uint64_t used = 0;
        for (std::size_t attempt = 0; attempt < kMaxAttempts && response.empty(); ++attempt) {
            used = fixture_sample_seed(spec.seed, i, attempt);
            response = sample(teacher, spec.teacher, prompt,
                              SamplingParams{spec.response_max, spec.temperature, used, spec.eos_id});
        }
        if (response.empty()) throw ActorError("teacher produced only empty responses for record " + std::to_string(i));
        nlohmann::ordered_json rec;
        rec["prompt_ids"] = prompt;
        rec["response_ids"] = response;
        rec["sample_seed"] = used;
        data << rec.dump() << '\n';
    }
    if (!data) throw IoError("failed writing dataset");

    KDRunConfig run;
    run.teacher_checkpoint = (out_dir / "teacher.kdck").string();
    run.student_checkpoint = (out_dir / "student.kdck").string();
    run.dataset = (out_dir / "dataset.jsonl").string();
    run.output_dir = (out_dir / "run").string();
    run.max_len = std::min(spec.teacher.max_seq_len, spec.student.max_seq_len);
    run.eos_id = spec.eos_id;
    run.seed = spec.seed;
    std::ofstream cfg(out_dir / "config.json", std::ios::trunc);
    cfg << config_to_json(run).dump(2) << '\n';

    nlohmann::ordered_json manifest;
    auto model_json = [](const ModelConfig& c) {
        nlohmann::ordered_json m;
        m["n_layers"] = c.n_layers;
        m["d_model"] = c.d_model;
        m["n_heads"] = c.n_heads;
        m["d_ff"] = c.d_ff;
        m["vocab_size"] = c.vocab_size;
        m["max_seq_len"] = c.max_seq_len;
        m["tied_lm_head"] = c.tied_lm_head;
        return m;
    };
    manifest["seed"] = spec.seed;
    manifest["teacher"] = model_json(spec.teacher);
    manifest["teacher_init_seed"] = derive_seed(spec.seed, 1);
    manifest["student"] = model_json(spec.student);
    manifest["student_init_seed"] = derive_seed(spec.seed, 2);
    manifest["prompt_seed"] = derive_seed(spec.seed, 3);
    manifest["samples"] = spec.samples;
    manifest["prompt_min"] = spec.prompt_min;
    manifest["prompt_max"] = spec.prompt_max;
    manifest["response_max"] = spec.response_max;
    manifest["temperature"] = spec.temperature;
    manifest["eos_id"] = spec.eos_id;
    std::ofstream mf(out_dir / "fixtures.json", std::ios::trunc);
    mf << manifest.dump(2) << '\n';
    if (!cfg || !mf) throw IoError("failed writing fixture metadata");
}

}  // namespace kdflow
