#include "kdflow/config.hpp"

#include <algorithm>
#include <fstream>
#include <functional>
#include <map>

#include "kdflow/errors.hpp"

namespace kdflow {

using nlohmann::json;

const char* workflow_name(Workflow w) noexcept { return w == Workflow::OnPolicy ? "on_policy" : "off_policy"; }

Workflow parse_workflow(const std::string& name) {
    std::string s;
    for (char c : name)
        if (c != '_' && c != '-') s.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    if (s == "offpolicy") return Workflow::OffPolicy;
    if (s == "onpolicy") return Workflow::OnPolicy;
    throw ConfigError("workflow", "unknown workflow '" + name + "' (expected off_policy or on_policy)");
}

namespace {

template <typename T>
T get_number(const json& v, const std::string& key) {
    if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) throw ConfigError(key, "expected a number");
        return v.get<T>();
    } else {
        if (!v.is_number_integer()) throw ConfigError(key, "expected an integer");
        if (v.is_number_unsigned()) return static_cast<T>(v.get<std::uint64_t>());
        const auto x = v.get<std::int64_t>();
        if (std::is_unsigned_v<T> && x < 0) throw ConfigError(key, "must be >= 0");
        return static_cast<T>(x);
    }
}

std::string get_string(const json& v, const std::string& key) {
    if (!v.is_string()) throw ConfigError(key, "expected a string");
    return v.get<std::string>();
}

using Setter = std::function<void(KDRunConfig&, const json&, const std::string&)>;

const std::map<std::string, Setter>& setters() {
    static const std::map<std::string, Setter> s = {
        {"workflow", [](KDRunConfig& c, const json& v, const std::string& k) { c.workflow = parse_workflow(get_string(v, k)); }},
        {"teacher_checkpoint", [](KDRunConfig& c, const json& v, const std::string& k) { c.teacher_checkpoint = get_string(v, k); }},
        {"student_checkpoint", [](KDRunConfig& c, const json& v, const std::string& k) { c.student_checkpoint = get_string(v, k); }},
        {"rollout_checkpoint", [](KDRunConfig& c, const json& v, const std::string& k) { c.rollout_checkpoint = get_string(v, k); }},
        {"divergence",
         [](KDRunConfig& c, const json& v, const std::string& k) {
             try {
                 c.divergence = parse_divergence(get_string(v, k));
             } catch (const ParameterError& e) {
                 throw ConfigError(k, e.what());
             }
         }},
        {"temperature", [](KDRunConfig& c, const json& v, const std::string& k) { c.temperature = get_number<float>(v, k); }},
        {"learning_rate", [](KDRunConfig& c, const json& v, const std::string& k) { c.learning_rate = get_number<double>(v, k); }},
        {"global_batch", [](KDRunConfig& c, const json& v, const std::string& k) { c.global_batch = get_number<std::size_t>(v, k); }},
        {"grad_accum", [](KDRunConfig& c, const json& v, const std::string& k) { c.grad_accum = get_number<std::size_t>(v, k); }},
        {"max_len", [](KDRunConfig& c, const json& v, const std::string& k) { c.max_len = get_number<std::size_t>(v, k); }},
        {"total_steps", [](KDRunConfig& c, const json& v, const std::string& k) { c.total_steps = get_number<std::size_t>(v, k); }},
        {"top_k", [](KDRunConfig& c, const json& v, const std::string& k) { c.top_k = get_number<std::size_t>(v, k); }},
        {"teacher_precision",
         [](KDRunConfig& c, const json& v, const std::string& k) {
             try {
                 c.teacher_precision = parse_dtype(get_string(v, k));
             } catch (const ParameterError& e) {
                 throw ConfigError(k, e.what());
             }
         }},
        {"sync_interval", [](KDRunConfig& c, const json& v, const std::string& k) { c.sync_interval = get_number<std::size_t>(v, k); }},
        {"seed", [](KDRunConfig& c, const json& v, const std::string& k) { c.seed = get_number<std::uint64_t>(v, k); }},
        {"dataset", [](KDRunConfig& c, const json& v, const std::string& k) { c.dataset = get_string(v, k); }},
        {"output_dir", [](KDRunConfig& c, const json& v, const std::string& k) { c.output_dir = get_string(v, k); }},
        {"weight_decay", [](KDRunConfig& c, const json& v, const std::string& k) { c.weight_decay = get_number<double>(v, k); }},
        {"max_new_tokens", [](KDRunConfig& c, const json& v, const std::string& k) { c.max_new_tokens = get_number<std::size_t>(v, k); }},
        {"rollout_temperature", [](KDRunConfig& c, const json& v, const std::string& k) { c.rollout_temperature = get_number<float>(v, k); }},
        {"eos_id", [](KDRunConfig& c, const json& v, const std::string& k) { c.eos_id = get_number<std::int32_t>(v, k); }},
        {"timings",
         [](KDRunConfig& c, const json& v, const std::string& k) {
             if (!v.is_boolean()) throw ConfigError(k, "expected true or false");
             c.timings = v.get<bool>();
         }},
        {"channel_capacity", [](KDRunConfig& c, const json& v, const std::string& k) { c.channel_capacity = get_number<std::size_t>(v, k); }},
        {"actor_timeout_s", [](KDRunConfig& c, const json& v, const std::string& k) { c.actor_timeout_s = get_number<double>(v, k); }},
        {"teacher_delay_ms", [](KDRunConfig& c, const json& v, const std::string& k) { c.teacher_delay_ms = get_number<double>(v, k); }},
        {"student_delay_ms", [](KDRunConfig& c, const json& v, const std::string& k) { c.student_delay_ms = get_number<double>(v, k); }},
        {"debug_teacher_crash_after",
         [](KDRunConfig& c, const json& v, const std::string& k) { c.debug_teacher_crash_after = get_number<std::size_t>(v, k); }},
    };
    return s;
}

}  // namespace

KDRunConfig parse_config(const json& j) {
    if (!j.is_object()) throw ConfigError("<root>", "config must be a JSON object");
    KDRunConfig c;
    for (const auto& [key, value] : j.items()) {
        auto it = setters().find(key);
        if (it == setters().end()) throw ConfigError(key, "unknown config field");
        it->second(c, value, key);
    }
    for (const char* required : {"teacher_checkpoint", "student_checkpoint", "dataset", "output_dir"})
        if (!j.contains(required)) throw ConfigError(required, "required field is missing");
    validate_config(c);
    return c;
}

KDRunConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("<file>", "cannot read config file '" + path.string() + "'");
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError("<file>", "config '" + path.string() + "' is not valid JSON: " + e.what());
    }
    return parse_config(j);
}

nlohmann::ordered_json config_to_json(const KDRunConfig& c) {
    nlohmann::ordered_json j;
    j["workflow"] = workflow_name(c.workflow);
    j["teacher_checkpoint"] = c.teacher_checkpoint;
    j["student_checkpoint"] = c.student_checkpoint;
    j["rollout_checkpoint"] = c.rollout_checkpoint;
    j["divergence"] = divergence_name(c.divergence);
    j["temperature"] = c.temperature;
    j["learning_rate"] = c.learning_rate;
    j["global_batch"] = c.global_batch;
    j["grad_accum"] = c.grad_accum;
    j["max_len"] = c.max_len;
    j["total_steps"] = c.total_steps;
    j["top_k"] = c.top_k;
    j["teacher_precision"] = dtype_name(c.teacher_precision);
    j["sync_interval"] = c.sync_interval;
    j["seed"] = c.seed;
    j["dataset"] = c.dataset;
    j["output_dir"] = c.output_dir;
    j["weight_decay"] = c.weight_decay;
    j["max_new_tokens"] = c.max_new_tokens;
    j["rollout_temperature"] = c.rollout_temperature;
    j["eos_id"] = c.eos_id;
    j["timings"] = c.timings;
    j["channel_capacity"] = c.channel_capacity;
    j["actor_timeout_s"] = c.actor_timeout_s;
    j["teacher_delay_ms"] = c.teacher_delay_ms;
    j["student_delay_ms"] = c.student_delay_ms;
    j["debug_teacher_crash_after"] = c.debug_teacher_crash_after;
    return j;
}

void validate_config(const KDRunConfig& c) {
    if (c.teacher_checkpoint.empty()) throw ConfigError("teacher_checkpoint", "must not be empty");
    if (c.student_checkpoint.empty()) throw ConfigError("student_checkpoint", "must not be empty");
    if (c.dataset.empty()) throw ConfigError("dataset", "must not be empty");
    if (c.output_dir.empty()) throw ConfigError("output_dir", "must not be empty");
    if (!(c.temperature > 0.0f)) throw ConfigError("temperature", "must be > 0");
    if (!(c.learning_rate >= 0.0)) throw ConfigError("learning_rate", "must be >= 0");
    if (!(c.weight_decay >= 0.0)) throw ConfigError("weight_decay", "must be >= 0");
    if (c.global_batch == 0) throw ConfigError("global_batch", "must be >= 1");
    if (c.grad_accum == 0) throw ConfigError("grad_accum", "must be >= 1");
    if (c.global_batch % c.grad_accum != 0)
        throw ConfigError("grad_accum", "global_batch " + std::to_string(c.global_batch) +
                                            " is not a multiple of grad_accum " + std::to_string(c.grad_accum));
    if (c.max_len < 2) throw ConfigError("max_len", "must be >= 2");
    if (c.sync_interval == 0) throw ConfigError("sync_interval", "must be >= 1");
    if (!(c.rollout_temperature >= 0.0f)) throw ConfigError("rollout_temperature", "must be >= 0");
    if (c.eos_id < 0) throw ConfigError("eos_id", "must be >= 0");
    if (c.channel_capacity < kMinChannelCapacity || (c.channel_capacity & (c.channel_capacity - 1)) != 0)
        throw ConfigError("channel_capacity", "must be a power of two >= 1 MiB");
    if (!(c.actor_timeout_s > 0.0)) throw ConfigError("actor_timeout_s", "must be > 0");
    if (!(c.teacher_delay_ms >= 0.0)) throw ConfigError("teacher_delay_ms", "must be >= 0");
    if (!(c.student_delay_ms >= 0.0)) throw ConfigError("student_delay_ms", "must be >= 0");
    if (c.workflow == Workflow::OnPolicy && c.max_new_tokens == 0)
        throw ConfigError("max_new_tokens", "must be >= 1 for on-policy runs");
}

void validate_against_models(const KDRunConfig& c, const ModelConfig& teacher, const ModelConfig& student) {
    if (teacher.vocab_size != student.vocab_size)
        throw ConfigError("student_checkpoint", "teacher vocabulary " + std::to_string(teacher.vocab_size) +
                                                    " differs from student vocabulary " +
                                                    std::to_string(student.vocab_size));
    const std::size_t limit = std::min(teacher.max_seq_len, student.max_seq_len);
    if (c.max_len > limit)
        throw ConfigError("max_len", std::to_string(c.max_len) + " exceeds the models' max_seq_len " +
                                         std::to_string(limit));
    if (c.top_k > teacher.vocab_size)
        throw ConfigError("top_k", std::to_string(c.top_k) + " exceeds teacher vocabulary " +
                                       std::to_string(teacher.vocab_size));
    if (c.eos_id >= static_cast<std::int32_t>(student.vocab_size))
        throw ConfigError("eos_id", "outside the vocabulary");
}

}  // namespace kdflow
