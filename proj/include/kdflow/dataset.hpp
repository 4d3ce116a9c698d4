#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "kdflow/model.hpp"
#include "kdflow/tensor.hpp"

namespace kdflow {

struct KDSample {
    std::vector<std::int32_t> prompt;
    std::vector<std::int32_t> response;
};

/// Line-delimited JSON records with integer arrays `prompt_ids` and
/// `response_ids` (other fields are ignored). Blank lines are skipped. Bad
/// records raise DatasetError with the 1-based line number; an empty file is a
/// ConfigError on `dataset`.
std::vector<KDSample> load_dataset(const std::filesystem::path& path);

/// One micro-batch: right-padded tokens and the loss mask over positions.
///
/// Position t carries the distribution over token t+1, so mask[b, t] is 1
/// exactly when token t+1 is a response token that survived truncation.
struct MicroBatch {
    TokenBatch tokens;
    Tensor mask;  // [B*T]
    std::size_t unmasked = 0;
};

struct StepBatch {
    std::size_t step = 0;
    std::size_t epoch = 0;
    std::vector<MicroBatch> micro;
    std::size_t unmasked = 0;  // over the whole step; the loss normalizer
};

/// Splits `samples` (in order) into `grad_accum` equal micro-batches, each
/// truncated to `max_len` and padded with `pad_id` to its longest row. Token
/// ids must lie in [0, vocab); a prompt must be non-empty and shorter than
/// max_len. An empty response gives a fully masked row.
StepBatch make_step_batch(std::size_t step, std::size_t epoch, std::span<const KDSample> samples,
                          std::size_t grad_accum, std::size_t max_len, std::int32_t pad_id, std::uint32_t vocab);

/// Deterministic off-policy batching: step s takes samples
/// [s*G, s*G + G) modulo the dataset size, so every epoch repeats the same order.
class BatchBuilder {
public:
    BatchBuilder(std::vector<KDSample> data, std::size_t global_batch, std::size_t grad_accum, std::size_t max_len,
                 std::int32_t pad_id, std::uint32_t vocab);

    std::vector<std::size_t> indices(std::size_t step) const;
    std::size_t epoch(std::size_t step) const;
    std::vector<KDSample> samples(std::size_t step) const;
    StepBatch build(std::size_t step) const;
    std::size_t size() const noexcept { return data_.size(); }
    const std::vector<KDSample>& data() const noexcept { return data_; }

private:
    std::vector<KDSample> data_;
    std::size_t global_batch_, grad_accum_, max_len_;
    std::int32_t pad_id_;
    std::uint32_t vocab_;
};

}  // namespace kdflow
