#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <vector>

#include "kdflow/tape.hpp"
#include "kdflow/tensor.hpp"

namespace kdflow {

/// Pre-norm decoder-only transformer: sinusoidal positions, causal
/// multi-head attention, GELU-tanh MLP, RMSNorm, optional tied LM head.
struct ModelConfig {
    std::uint32_t n_layers = 2;
    std::uint32_t d_model = 64;
    std::uint32_t n_heads = 4;
    std::uint32_t d_ff = 256;
    std::uint32_t vocab_size = 512;
    std::uint32_t max_seq_len = 128;
    bool tied_lm_head = false;

    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

struct LayerWeights {
    Tensor wq, wk, wv, wo;  // [d, d]
    Tensor w1;              // [d, d_ff]
    Tensor w2;              // [d_ff, d]
    Tensor norm1, norm2;    // [d]
};

struct ModelWeights {
    Tensor embedding;  // [V, d]
    std::vector<LayerWeights> layers;
    Tensor final_norm;  // [d]
    Tensor lm_head;     // [d, V]; empty when the head is tied to the embedding

    /// All tensors in checkpoint declaration order.
    std::vector<const Tensor*> tensors() const;
    std::vector<Tensor*> tensors();

    DType dtype() const { return embedding.dtype(); }
    ModelWeights to(DType dtype) const;
    bool bitwise_equal(const ModelWeights& other) const;
    /// CRC32 chained over every tensor in declaration order.
    std::uint32_t checksum() const;
};

/// Shapes of the weight tensors in declaration order.
std::vector<Shape> weight_shapes(const ModelConfig& config);
void validate_weights(const ModelWeights& weights, const ModelConfig& config);
ModelWeights weights_from_tensors(const ModelConfig& config, std::vector<Tensor> tensors);

/// The materialized [d, V] head (transpose of the embedding when tied).
Tensor lm_head_matrix(const ModelWeights& weights);

/// Row-major [batch, seq] token ids.
struct TokenBatch {
    std::size_t batch = 0;
    std::size_t seq = 0;
    std::vector<std::int32_t> ids;

    std::int32_t at(std::size_t b, std::size_t t) const { return ids[b * seq + t]; }
};

/// Scaled uniform init: every matrix entry in +-1/sqrt(fan_in), gains at 1.
ModelWeights init_weights(const ModelConfig& config, std::uint64_t seed);

/// Final-layer, post-final-norm hidden states [B, T, d]. No tape is recorded.
Tensor forward_hidden(const ModelWeights& weights, const ModelConfig& config, const TokenBatch& tokens);

/// hidden [B, T, d] (or [N, d]) x head [d, V].
Tensor apply_lm_head(const Tensor& head, const Tensor& hidden);
/// Same, reading hidden rows straight from a borrowed buffer.
Tensor apply_lm_head(const Tensor& head, std::span<const float> hidden, const Shape& hidden_shape, DType dtype);
Tensor apply_lm_head(const ModelWeights& weights, const Tensor& hidden);

/// forward_hidden followed by apply_lm_head: [B, T, V].
Tensor forward_logits(const ModelWeights& weights, const ModelConfig& config, const TokenBatch& tokens);

// Tape-level building blocks used by the student's training engine.

struct LayerVars {
    Var wq, wk, wv, wo, w1, w2, norm1, norm2;
};

struct ModelVars {
    Var embedding;
    std::vector<LayerVars> layers;
    Var final_norm;
    Var lm_head;  // invalid when tied

    std::vector<Var> vars() const;  // declaration order
};

ModelVars bind_weights(Tape& tape, const ModelWeights& weights, bool requires_grad);
/// Hidden states as [B*T, d].
Var build_hidden(Tape& tape, const ModelVars& vars, const ModelConfig& config, const TokenBatch& tokens);
/// Logits as [B*T, V].
Var build_logits(Tape& tape, const ModelVars& vars, Var hidden);
/// Gradients gathered into a weights-shaped container (F32).
ModelWeights collect_grads(const Tape& tape, const ModelVars& vars, const ModelConfig& config);

/// Per-layer key/value rows for incremental decoding.
class KVCache {
public:
    explicit KVCache(const ModelConfig& config);

    std::size_t length() const noexcept { return length_; }
    std::size_t capacity() const noexcept { return capacity_; }

private:
    friend Tensor decode_step(const ModelWeights&, const ModelConfig&, KVCache&, std::int32_t);

    std::size_t d_;
    std::size_t capacity_;
    std::size_t length_ = 0;
    std::vector<std::vector<float>> keys_;
    std::vector<std::vector<float>> values_;
};

/// Feed one token at position cache.length(); returns next-token logits [V].
Tensor decode_step(const ModelWeights& weights, const ModelConfig& config, KVCache& cache, std::int32_t token_id);

struct SamplingParams {
    std::size_t max_new = 16;
    float temperature = 1.0f;  // 0 selects greedy decoding
    std::uint64_t seed = 0;
    std::int32_t eos_id = 0;
};

/// Autoregressive continuation of `prompt`. The EOS token ends generation and
/// is not included in the result.
std::vector<std::int32_t> sample(const ModelWeights& weights, const ModelConfig& config,
                                 std::span<const std::int32_t> prompt, const SamplingParams& params);

/// Draw an index from softmax(logits / temperature) using one uniform variate.
std::int32_t sample_from_logits(std::span<const float> logits, float temperature, double u);
std::int32_t argmax(std::span<const float> logits);

// KDCK checkpoint.
void write_checkpoint(std::ostream& out, const ModelConfig& config, const ModelWeights& weights);
std::pair<ModelConfig, ModelWeights> read_checkpoint(std::istream& in);
void save_checkpoint(const std::filesystem::path& path, const ModelConfig& config, const ModelWeights& weights);
std::pair<ModelConfig, ModelWeights> load_checkpoint(const std::filesystem::path& path);

}  // namespace kdflow
