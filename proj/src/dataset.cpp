#include "kdflow/dataset.hpp"

#include <algorithm>
#include <fstream>

#include <json.hpp>

#include "kdflow/errors.hpp"

namespace kdflow {

namespace {

std::vector<std::int32_t> id_array(const nlohmann::json& rec, const char* field, std::size_t line) {
    auto it = rec.find(field);
    if (it == rec.end()) throw DatasetError(line, std::string("missing field '") + field + "'");
    if (!it->is_array()) throw DatasetError(line, std::string("'") + field + "' must be an integer array");
    std::vector<std::int32_t> out;
    out.reserve(it->size());
    for (const auto& v : *it) {
        if (!v.is_number_integer()) throw DatasetError(line, std::string("'") + field + "' holds a non-integer");
        const auto x = v.get<std::int64_t>();
        if (x < 0 || x > INT32_MAX) throw DatasetError(line, std::string("'") + field + "' holds a negative or huge id");
        out.push_back(static_cast<std::int32_t>(x));
    }
    return out;
}

}  // namespace

std::vector<KDSample> load_dataset(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("dataset", "cannot read dataset '" + path.string() + "'");
    std::vector<KDSample> out;
    std::string text;
    std::size_t line = 0;
    while (std::getline(in, text)) {
        ++line;
        if (std::all_of(text.begin(), text.end(), [](unsigned char c) { return std::isspace(c); })) continue;
        nlohmann::json rec;
        try {
            rec = nlohmann::json::parse(text);
        } catch (const nlohmann::json::parse_error& e) {
            throw DatasetError(line, std::string("not valid JSON: ") + e.what());
        }
        if (!rec.is_object()) throw DatasetError(line, "record must be a JSON object");
        KDSample s{id_array(rec, "prompt_ids", line), id_array(rec, "response_ids", line)};
        if (s.prompt.empty()) throw DatasetError(line, "empty prompt");
        if (s.response.empty()) throw DatasetError(line, "empty response");
        out.push_back(std::move(s));
    }
    if (out.empty()) throw ConfigError("dataset", "dataset '" + path.string() + "' has no records");
    return out;
}

StepBatch make_step_batch(std::size_t step, std::size_t epoch, std::span<const KDSample> samples,
                          std::size_t grad_accum, std::size_t max_len, std::int32_t pad_id, std::uint32_t vocab) {
    if (grad_accum == 0 || samples.empty() || samples.size() % grad_accum != 0)
        throw ParameterError(std::to_string(samples.size()) + " samples do not split into " +
                             std::to_string(grad_accum) + " micro-batches");
    StepBatch out;
    out.step = step;
    out.epoch = epoch;
    const std::size_t m = samples.size() / grad_accum;
    for (std::size_t j = 0; j < grad_accum; ++j) {
        auto group = samples.subspan(j * m, m);
        std::size_t seq = 1;
        for (const auto& s : group) {
            if (s.prompt.empty()) throw InputError("sample with an empty prompt");
            if (s.prompt.size() >= max_len)
                throw InputError("prompt of " + std::to_string(s.prompt.size()) +
                                 " tokens leaves no room for a response within max_len " + std::to_string(max_len));
            seq = std::max(seq, std::min(max_len, s.prompt.size() + s.response.size()));
        }
        MicroBatch mb;
        mb.tokens.batch = m;
        mb.tokens.seq = seq;
        mb.tokens.ids.assign(m * seq, pad_id);
        mb.mask = Tensor({m * seq});
        auto mask = mb.mask.data();
        for (std::size_t b = 0; b < m; ++b) {
            const auto& s = group[b];
            const std::size_t p = s.prompt.size();
            const std::size_t len = std::min(max_len, p + s.response.size());
            for (std::size_t t = 0; t < len; ++t) {
                const std::int32_t id = t < p ? s.prompt[t] : s.response[t - p];
                if (id < 0 || static_cast<std::uint32_t>(id) >= vocab)
                    throw InputError("token id " + std::to_string(id) + " at position " + std::to_string(t) +
                                     " of micro-batch row " + std::to_string(b) + " is outside vocabulary " +
                                     std::to_string(vocab));
                mb.tokens.ids[b * seq + t] = id;
            }
            for (std::size_t t = p - 1; t + 1 < len; ++t) {
                mask[b * seq + t] = 1.0f;
                ++mb.unmasked;
            }
        }
        out.unmasked += mb.unmasked;
        out.micro.push_back(std::move(mb));
    }
    return out;
}

BatchBuilder::BatchBuilder(std::vector<KDSample> data, std::size_t global_batch, std::size_t grad_accum,
                           std::size_t max_len, std::int32_t pad_id, std::uint32_t vocab)
    : data_(std::move(data)),
      global_batch_(global_batch),
      grad_accum_(grad_accum),
      max_len_(max_len),
      pad_id_(pad_id),
      vocab_(vocab) {
    if (data_.empty()) throw ConfigError("dataset", "dataset is empty");
    if (global_batch_ == 0 || grad_accum_ == 0 || global_batch_ % grad_accum_ != 0)
        throw ConfigError("grad_accum", "global_batch must be a positive multiple of grad_accum");
}

std::vector<std::size_t> BatchBuilder::indices(std::size_t step) const {
    std::vector<std::size_t> out(global_batch_);
    for (std::size_t i = 0; i < global_batch_; ++i) out[i] = (step * global_batch_ + i) % data_.size();
    return out;
}

std::size_t BatchBuilder::epoch(std::size_t step) const { return step * global_batch_ / data_.size(); }

std::vector<KDSample> BatchBuilder::samples(std::size_t step) const {
    std::vector<KDSample> out;
    for (auto i : indices(step)) out.push_back(data_[i]);
    return out;
}

StepBatch BatchBuilder::build(std::size_t step) const {
    auto s = samples(step);
    return make_step_batch(step, epoch(step), s, grad_accum_, max_len_, pad_id_, vocab_);
}

}  // namespace kdflow
