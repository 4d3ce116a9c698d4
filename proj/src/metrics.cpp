#include "kdflow/metrics.hpp"

#include <fstream>

#include <json.hpp>

#include "kdflow/errors.hpp"

namespace kdflow {

using ojson = nlohmann::ordered_json;

std::string metrics_to_line(const StepMetrics& m) {
    ojson j;
    j["step"] = m.step;
    j["epoch"] = m.epoch;
    j["loss"] = m.loss ? ojson(*m.loss) : ojson(nullptr);
    j["grad_norm"] = m.grad_norm;
    if (m.rollout_version) j["rollout_version"] = *m.rollout_version;
    j["t_teacher_ms"] = m.t_teacher_ms;
    j["t_student_ms"] = m.t_student_ms;
    j["t_transfer_ms"] = m.t_transfer_ms;
    j["bytes_hidden"] = m.bytes_hidden;
    j["bytes_logits_equiv"] = m.bytes_logits_equiv;
    if (m.rollout_crc) j["rollout_crc"] = *m.rollout_crc;
    if (m.student_crc) j["student_crc"] = *m.student_crc;
    if (m.skipped) j["skipped"] = true;
    if (!m.error.empty()) j["error"] = m.error;
    return j.dump();
}

StepMetrics metrics_from_line(const std::string& line) {
    const ojson j = ojson::parse(line);
    StepMetrics m;
    m.step = j.at("step").get<std::size_t>();
    m.epoch = j.at("epoch").get<std::size_t>();
    if (!j.at("loss").is_null()) m.loss = j.at("loss").get<double>();
    m.grad_norm = j.at("grad_norm").is_null() ? 0.0 : j.at("grad_norm").get<double>();
    if (j.contains("rollout_version")) m.rollout_version = j["rollout_version"].get<std::uint64_t>();
    m.t_teacher_ms = j.at("t_teacher_ms").get<double>();
    m.t_student_ms = j.at("t_student_ms").get<double>();
    m.t_transfer_ms = j.at("t_transfer_ms").get<double>();
    m.bytes_hidden = j.at("bytes_hidden").get<std::uint64_t>();
    m.bytes_logits_equiv = j.at("bytes_logits_equiv").get<std::uint64_t>();
    if (j.contains("rollout_crc")) m.rollout_crc = j["rollout_crc"].get<std::uint32_t>();
    if (j.contains("student_crc")) m.student_crc = j["student_crc"].get<std::uint32_t>();
    if (j.contains("skipped")) m.skipped = j["skipped"].get<bool>();
    if (j.contains("error")) m.error = j["error"].get<std::string>();
    return m;
}

void write_metrics_line(std::ostream& out, const StepMetrics& m) { out << metrics_to_line(m) << '\n'; }

std::vector<StepMetrics> read_metrics_log(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read metrics log '" + path.string() + "'");
    std::vector<StepMetrics> out;
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        ++n;
        if (line.empty()) continue;
        try {
            out.push_back(metrics_from_line(line));
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(path.string() + ":" + std::to_string(n) + ": bad metrics record: " + e.what());
        }
    }
    return out;
}

void write_metrics_log(const std::filesystem::path& path, const std::vector<StepMetrics>& metrics) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write metrics log '" + path.string() + "'");
    for (const auto& m : metrics) write_metrics_line(out, m);
    if (!out) throw IoError("failed writing metrics log '" + path.string() + "'");
}

}  // namespace kdflow
