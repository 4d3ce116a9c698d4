#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace kdflow {

/// One line of the metrics log.
struct StepMetrics {
    std::size_t step = 0;
    std::size_t epoch = 0;
    std::optional<double> loss;  // empty when the loss went non-finite
    double grad_norm = 0.0;
    std::optional<std::uint64_t> rollout_version;
    double t_teacher_ms = 0.0;
    double t_student_ms = 0.0;
    double t_transfer_ms = 0.0;
    std::uint64_t bytes_hidden = 0;
    std::uint64_t bytes_logits_equiv = 0;
    // On-policy weight-sync bookkeeping.
    std::optional<std::uint32_t> rollout_crc;  // weights that generated this step's responses
    std::optional<std::uint32_t> student_crc;  // student weights after this step, when synced
    bool skipped = false;
    std::string error;

    bool operator==(const StepMetrics&) const = default;
};

std::string metrics_to_line(const StepMetrics& m);
StepMetrics metrics_from_line(const std::string& line);

void write_metrics_line(std::ostream& out, const StepMetrics& m);
/// Parses a whole log; throws FormatError with the line number on bad input.
std::vector<StepMetrics> read_metrics_log(const std::filesystem::path& path);
void write_metrics_log(const std::filesystem::path& path, const std::vector<StepMetrics>& metrics);

}  // namespace kdflow
