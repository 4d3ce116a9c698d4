#include "kdflow/model.hpp"

#include <zlib.h>

#include <array>
#include <cmath>
#include <fstream>

#include "kdflow/errors.hpp"
#include "kdflow/kernels.hpp"
#include "kdflow/rng.hpp"

namespace kdflow {

void ModelConfig::validate() const {
    auto fail = [](const std::string& what) { throw ParameterError("invalid model config: " + what); };
    if (n_layers < 1) fail("n_layers must be >= 1");
    if (n_heads < 1) fail("n_heads must be >= 1");
    if (d_model < 8) fail("d_model must be >= 8");
    if (d_model % n_heads != 0) fail("d_model must be a multiple of n_heads");
    if (d_ff < 8) fail("d_ff must be >= 8");
    if (vocab_size < 16) fail("vocab_size must be >= 16");
    if (max_seq_len < 8) fail("max_seq_len must be >= 8");
}

std::vector<const Tensor*> ModelWeights::tensors() const {
    std::vector<const Tensor*> out{&embedding};
    for (const auto& l : layers)
        for (const Tensor* t : {&l.wq, &l.wk, &l.wv, &l.wo, &l.w1, &l.w2, &l.norm1, &l.norm2}) out.push_back(t);
    out.push_back(&final_norm);
    if (!lm_head.empty()) out.push_back(&lm_head);
    return out;
}

std::vector<Tensor*> ModelWeights::tensors() {
    std::vector<Tensor*> out{&embedding};
    for (auto& l : layers)
        for (Tensor* t : {&l.wq, &l.wk, &l.wv, &l.wo, &l.w1, &l.w2, &l.norm1, &l.norm2}) out.push_back(t);
    out.push_back(&final_norm);
    if (!lm_head.empty()) out.push_back(&lm_head);
    return out;
}

ModelWeights ModelWeights::to(DType dtype) const {
    ModelWeights out = *this;
    for (Tensor* t : out.tensors()) *t = t->to(dtype);
    return out;
}

bool ModelWeights::bitwise_equal(const ModelWeights& other) const {
    auto a = tensors();
    auto b = other.tensors();
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (!a[i]->bitwise_equal(*b[i])) return false;
    return true;
}

std::uint32_t ModelWeights::checksum() const {
    uLong crc = crc32(0L, Z_NULL, 0);
    for (const Tensor* t : tensors()) {
        auto bytes = std::as_bytes(t->data());
        crc = crc32(crc, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size()));
    }
    return static_cast<std::uint32_t>(crc);
}

std::vector<Shape> weight_shapes(const ModelConfig& c) {
    const std::size_t d = c.d_model, ff = c.d_ff, v = c.vocab_size;
    std::vector<Shape> shapes{{v, d}};
    for (std::uint32_t i = 0; i < c.n_layers; ++i) {
        for (int k = 0; k < 4; ++k) shapes.push_back({d, d});
        shapes.push_back({d, ff});
        shapes.push_back({ff, d});
        shapes.push_back({d});
        shapes.push_back({d});
    }
    shapes.push_back({d});
    if (!c.tied_lm_head) shapes.push_back({d, v});
    return shapes;
}

void validate_weights(const ModelWeights& weights, const ModelConfig& config) {
    auto shapes = weight_shapes(config);
    auto ts = weights.tensors();
    if (weights.layers.size() != config.n_layers || ts.size() != shapes.size())
        throw ShapeError("weights do not match model config layout");
    for (std::size_t i = 0; i < ts.size(); ++i) {
        if (ts[i]->shape() != shapes[i])
            throw ShapeError("weight tensor " + std::to_string(i) + " has shape " + shape_str(ts[i]->shape()) +
                             ", expected " + shape_str(shapes[i]));
        for (float v : ts[i]->data())
            if (!std::isfinite(v)) throw NumericError("weight tensor " + std::to_string(i) + " has a non-finite value");
    }
}

ModelWeights weights_from_tensors(const ModelConfig& config, std::vector<Tensor> tensors) {
    auto shapes = weight_shapes(config);
    if (tensors.size() != shapes.size())
        throw ShapeError("expected " + std::to_string(shapes.size()) + " weight tensors, got " +
                         std::to_string(tensors.size()));
    ModelWeights w;
    w.layers.resize(config.n_layers);
    std::size_t i = 0;
    w.embedding = std::move(tensors[i++]);
    for (auto& l : w.layers)
        for (Tensor* t : {&l.wq, &l.wk, &l.wv, &l.wo, &l.w1, &l.w2, &l.norm1, &l.norm2}) *t = std::move(tensors[i++]);
    w.final_norm = std::move(tensors[i++]);
    if (!config.tied_lm_head) w.lm_head = std::move(tensors[i++]);
    validate_weights(w, config);
    return w;
}

Tensor lm_head_matrix(const ModelWeights& weights) {
    return weights.lm_head.empty() ? transpose(weights.embedding) : weights.lm_head;
}

ModelWeights init_weights(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    CounterRng rng(seed);
    std::vector<Tensor> tensors;
    for (const auto& shape : weight_shapes(config)) {
        if (shape.size() == 1) {
            tensors.push_back(Tensor::filled(shape, 1.0f));
            continue;
        }
        // The embedding doubles as the tied head, so its fan-in is d as well.
        const bool is_embedding = tensors.empty();
        const double fan_in = static_cast<double>(is_embedding ? shape[1] : shape[0]);
        const double bound = 1.0 / std::sqrt(fan_in);
        std::vector<float> data(shape_numel(shape));
        for (auto& v : data) v = static_cast<float>(rng.uniform(-bound, bound));
        tensors.emplace_back(shape, std::move(data));
    }
    return weights_from_tensors(config, std::move(tensors));
}

namespace {

void check_tokens(const ModelConfig& config, const TokenBatch& tokens) {
    if (tokens.batch == 0 || tokens.seq == 0 || tokens.ids.size() != tokens.batch * tokens.seq)
        throw InputError("token batch has inconsistent shape");
    if (tokens.seq > config.max_seq_len)
        throw InputError("sequence length " + std::to_string(tokens.seq) + " exceeds max_seq_len " +
                         std::to_string(config.max_seq_len));
    for (std::size_t b = 0; b < tokens.batch; ++b)
        for (std::size_t t = 0; t < tokens.seq; ++t) {
            auto id = tokens.at(b, t);
            if (id < 0 || static_cast<std::uint32_t>(id) >= config.vocab_size)
                throw InputError("token id " + std::to_string(id) + " at position (" + std::to_string(b) + ", " +
                                 std::to_string(t) + ") is outside vocabulary of size " +
                                 std::to_string(config.vocab_size));
        }
}

Tensor positional_block(std::size_t batch, std::size_t seq, std::size_t d, DType dtype) {
    Tensor pe({batch * seq, d}, dtype);
    auto data = pe.data();
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t t = 0; t < seq; ++t)
            for (std::size_t c = 0; c < d; ++c) data[(b * seq + t) * d + c] = kernels::sinusoid(t, c, d);
    project(data, dtype);
    return pe;
}

}  // namespace

std::vector<Var> ModelVars::vars() const {
    std::vector<Var> out{embedding};
    for (const auto& l : layers)
        for (Var v : {l.wq, l.wk, l.wv, l.wo, l.w1, l.w2, l.norm1, l.norm2}) out.push_back(v);
    out.push_back(final_norm);
    if (lm_head.valid()) out.push_back(lm_head);
    return out;
}

ModelVars bind_weights(Tape& tape, const ModelWeights& weights, bool requires_grad) {
    ModelVars v;
    v.embedding = tape.leaf(weights.embedding, requires_grad);
    for (const auto& l : weights.layers) {
        LayerVars lv;
        lv.wq = tape.leaf(l.wq, requires_grad);
        lv.wk = tape.leaf(l.wk, requires_grad);
        lv.wv = tape.leaf(l.wv, requires_grad);
        lv.wo = tape.leaf(l.wo, requires_grad);
        lv.w1 = tape.leaf(l.w1, requires_grad);
        lv.w2 = tape.leaf(l.w2, requires_grad);
        lv.norm1 = tape.leaf(l.norm1, requires_grad);
        lv.norm2 = tape.leaf(l.norm2, requires_grad);
        v.layers.push_back(lv);
    }
    v.final_norm = tape.leaf(weights.final_norm, requires_grad);
    if (!weights.lm_head.empty()) v.lm_head = tape.leaf(weights.lm_head, requires_grad);
    return v;
}

Var build_hidden(Tape& tape, const ModelVars& vars, const ModelConfig& config, const TokenBatch& tokens) {
    check_tokens(config, tokens);
    const DType dtype = tape.value(vars.embedding).dtype();
    Var x = tape.embedding(vars.embedding, tokens.ids);
    x = tape.add(x, tape.constant(positional_block(tokens.batch, tokens.seq, config.d_model, dtype)));
    for (const auto& l : vars.layers) {
        Var h = tape.rmsnorm(x, l.norm1);
        Var q = tape.matmul(h, l.wq);
        Var k = tape.matmul(h, l.wk);
        Var v = tape.matmul(h, l.wv);
        Var a = tape.causal_attention(q, k, v, tokens.batch, tokens.seq, config.n_heads);
        x = tape.add(x, tape.matmul(a, l.wo));
        Var h2 = tape.rmsnorm(x, l.norm2);
        Var m = tape.gelu(tape.matmul(h2, l.w1));
        x = tape.add(x, tape.matmul(m, l.w2));
    }
    return tape.rmsnorm(x, vars.final_norm);
}

Var build_logits(Tape& tape, const ModelVars& vars, Var hidden) {
    Var head = vars.lm_head.valid() ? vars.lm_head : tape.transpose(vars.embedding);
    return tape.matmul(hidden, head);
}

ModelWeights collect_grads(const Tape& tape, const ModelVars& vars, const ModelConfig& config) {
    std::vector<Tensor> grads;
    for (Var v : vars.vars()) grads.push_back(tape.grad(v));
    return weights_from_tensors(config, std::move(grads));
}

Tensor forward_hidden(const ModelWeights& weights, const ModelConfig& config, const TokenBatch& tokens) {
    Tape tape(false);
    ModelVars vars = bind_weights(tape, weights, false);
    Var h = build_hidden(tape, vars, config, tokens);
    return tape.value(h).reshaped({tokens.batch, tokens.seq, config.d_model});
}

Tensor apply_lm_head(const Tensor& head, std::span<const float> hidden, const Shape& hidden_shape, DType dtype) {
    if (head.rank() != 2 || hidden_shape.empty() || hidden_shape.back() != head.dim(0))
        throw ShapeError("lm head " + shape_str(head.shape()) + " cannot consume hidden " + shape_str(hidden_shape));
    if (dtype != head.dtype())
        throw ShapeError(std::string("lm head dtype ") + dtype_name(head.dtype()) + " vs hidden " + dtype_name(dtype));
    if (hidden.size() != shape_numel(hidden_shape)) throw ShapeError("hidden buffer does not match its shape");
    const std::size_t d = head.dim(0), v = head.dim(1);
    const std::size_t rows = hidden.size() / d;
    Shape out_shape = hidden_shape;
    out_shape.back() = v;
    Tensor out(out_shape, dtype);
    kernels::matmul(hidden, head.data(), out.data(), rows, d, v);
    project(out.data(), dtype);
    return out;
}

Tensor apply_lm_head(const Tensor& head, const Tensor& hidden) {
    return apply_lm_head(head, hidden.data(), hidden.shape(), hidden.dtype());
}

Tensor apply_lm_head(const ModelWeights& weights, const Tensor& hidden) {
    return apply_lm_head(lm_head_matrix(weights), hidden);
}

Tensor forward_logits(const ModelWeights& weights, const ModelConfig& config, const TokenBatch& tokens) {
    return apply_lm_head(weights, forward_hidden(weights, config, tokens));
}

KVCache::KVCache(const ModelConfig& config)
    : d_(config.d_model),
      capacity_(config.max_seq_len),
      keys_(config.n_layers, std::vector<float>(config.max_seq_len * config.d_model)),
      values_(config.n_layers, std::vector<float>(config.max_seq_len * config.d_model)) {}

Tensor decode_step(const ModelWeights& weights, const ModelConfig& config, KVCache& cache, std::int32_t token_id) {
    if (cache.length_ >= cache.capacity_)
        throw CapacityError("kv cache full at " + std::to_string(cache.capacity_) + " positions");
    if (token_id < 0 || static_cast<std::uint32_t>(token_id) >= config.vocab_size)
        throw InputError("token id " + std::to_string(token_id) + " at position " + std::to_string(cache.length_) +
                         " is outside vocabulary");
    const DType dtype = weights.dtype();
    const std::size_t d = config.d_model, ff = config.d_ff;
    const std::size_t t = cache.length_;

    // Each step mirrors one row of the batched forward with the same kernels
    // and the same projection points.
    std::vector<float> x(d), h(d), q(d), a(d), o(d), m(ff);
    auto emb = weights.embedding.data().subspan(static_cast<std::size_t>(token_id) * d, d);
    for (std::size_t c = 0; c < d; ++c) {
        float pe = kernels::sinusoid(t, c, d);
        if (dtype == DType::BF16E) pe = bf16_project(pe);
        x[c] = emb[c] + pe;
    }
    project(x, dtype);

    auto add_into = [dtype](std::vector<float>& acc, const std::vector<float>& delta) {
        for (std::size_t c = 0; c < acc.size(); ++c) acc[c] = acc[c] + delta[c];
        project(acc, dtype);
    };

    for (std::size_t li = 0; li < weights.layers.size(); ++li) {
        const auto& l = weights.layers[li];
        auto& kc = cache.keys_[li];
        auto& vc = cache.values_[li];
        std::span<float> krow(kc.data() + t * d, d);
        std::span<float> vrow(vc.data() + t * d, d);

        kernels::rmsnorm_row(x, l.norm1.data(), h);
        project(h, dtype);
        kernels::matmul(h, l.wq.data(), q, 1, d, d);
        project(q, dtype);
        kernels::matmul(h, l.wk.data(), krow, 1, d, d);
        project(krow, dtype);
        kernels::matmul(h, l.wv.data(), vrow, 1, d, d);
        project(vrow, dtype);
        kernels::attention_row(q, std::span<const float>(kc.data(), (t + 1) * d),
                               std::span<const float>(vc.data(), (t + 1) * d), t, d, config.n_heads, {}, a);
        project(a, dtype);
        kernels::matmul(a, l.wo.data(), o, 1, d, d);
        project(o, dtype);
        add_into(x, o);

        kernels::rmsnorm_row(x, l.norm2.data(), h);
        project(h, dtype);
        kernels::matmul(h, l.w1.data(), m, 1, d, ff);
        project(m, dtype);
        for (auto& v : m) v = kernels::gelu_tanh(v);
        project(m, dtype);
        kernels::matmul(m, l.w2.data(), o, 1, ff, d);
        project(o, dtype);
        add_into(x, o);
    }
    kernels::rmsnorm_row(x, weights.final_norm.data(), h);
    project(h, dtype);
    cache.length_ = t + 1;
    return apply_lm_head(lm_head_matrix(weights), std::span<const float>(h), Shape{1, d}, dtype).reshaped(
        {config.vocab_size});
}

std::int32_t argmax(std::span<const float> logits) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < logits.size(); ++i)
        if (logits[i] > logits[best]) best = i;
    return static_cast<std::int32_t>(best);
}

std::int32_t sample_from_logits(std::span<const float> logits, float temperature, double u) {
    if (temperature == 0.0f) return argmax(logits);
    if (!(temperature > 0.0f)) throw ParameterError("sampling temperature must be >= 0");
    double mx = logits[0] / static_cast<double>(temperature);
    for (float z : logits) mx = std::max(mx, z / static_cast<double>(temperature));
    std::vector<double> w(logits.size());
    double total = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        w[i] = std::exp(logits[i] / static_cast<double>(temperature) - mx);
        total += w[i];
    }
    const double target = u * total;
    double acc = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
        acc += w[i];
        if (target < acc) return static_cast<std::int32_t>(i);
    }
    return static_cast<std::int32_t>(w.size() - 1);
}

std::vector<std::int32_t> sample(const ModelWeights& weights, const ModelConfig& config,
                                 std::span<const std::int32_t> prompt, const SamplingParams& params) {
    if (prompt.empty()) throw InputError("sample() needs a nonempty prompt");
    if (prompt.size() + params.max_new > config.max_seq_len)
        throw InputError("prompt length " + std::to_string(prompt.size()) + " + max_new " +
                         std::to_string(params.max_new) + " exceeds max_seq_len " +
                         std::to_string(config.max_seq_len));
    KVCache cache(config);
    Tensor logits;
    for (auto id : prompt) logits = decode_step(weights, config, cache, id);
    CounterRng rng(params.seed);
    std::vector<std::int32_t> out;
    for (std::size_t i = 0; i < params.max_new; ++i) {
        const double u = params.temperature == 0.0f ? 0.0 : rng.uniform();
        const std::int32_t next = sample_from_logits(logits.data(), params.temperature, u);
        if (next == params.eos_id) break;
        out.push_back(next);
        if (i + 1 < params.max_new) logits = decode_step(weights, config, cache, next);
    }
    return out;
}

namespace {

constexpr std::array<char, 4> kCheckpointMagic{'K', 'D', 'C', 'K'};

void put_u32(std::ostream& out, std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); }

std::uint32_t get_u32(std::istream& in) {
    std::uint32_t v = 0;
    if (!in.read(reinterpret_cast<char*>(&v), 4)) throw FormatError("truncated checkpoint header");
    return v;
}

}  // namespace

void write_checkpoint(std::ostream& out, const ModelConfig& c, const ModelWeights& weights) {
    validate_weights(weights, c);
    out.write(kCheckpointMagic.data(), 4);
    for (auto v : {c.n_layers, c.d_model, c.n_heads, c.d_ff, c.vocab_size, c.max_seq_len}) put_u32(out, v);
    const std::uint8_t tied = c.tied_lm_head ? 1 : 0;
    out.write(reinterpret_cast<const char*>(&tied), 1);
    for (const Tensor* t : weights.tensors()) write_tensor(out, *t);
    if (!out) throw IoError("failed to write checkpoint");
}

std::pair<ModelConfig, ModelWeights> read_checkpoint(std::istream& in) {
    std::array<char, 4> magic{};
    if (!in.read(magic.data(), 4) || magic != kCheckpointMagic) throw FormatError("bad checkpoint magic");
    ModelConfig c;
    c.n_layers = get_u32(in);
    c.d_model = get_u32(in);
    c.n_heads = get_u32(in);
    c.d_ff = get_u32(in);
    c.vocab_size = get_u32(in);
    c.max_seq_len = get_u32(in);
    std::uint8_t tied = 0;
    if (!in.read(reinterpret_cast<char*>(&tied), 1)) throw FormatError("truncated checkpoint header");
    c.tied_lm_head = tied != 0;
    c.validate();
    std::vector<Tensor> tensors;
    for (std::size_t i = 0; i < weight_shapes(c).size(); ++i) tensors.push_back(read_tensor(in));
    return {c, weights_from_tensors(c, std::move(tensors))};
}

void save_checkpoint(const std::filesystem::path& path, const ModelConfig& config, const ModelWeights& weights) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    write_checkpoint(out, config, weights);
}

std::pair<ModelConfig, ModelWeights> load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint " + path.string());
    return read_checkpoint(in);
}

}  // namespace kdflow
