#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "kdflow/errors.hpp"
#include "kdflow/model.hpp"
#include "test_util.hpp"

using namespace kdflow;

namespace {

ModelConfig small_config(bool tied = false) { return ModelConfig{2, 16, 4, 32, 40, 24, tied}; }

TokenBatch random_tokens(std::size_t batch, std::size_t seq, std::uint32_t vocab, std::uint64_t seed) {
    CounterRng rng(seed);
    TokenBatch tb{batch, seq, {}};
    for (std::size_t i = 0; i < batch * seq; ++i) tb.ids.push_back(static_cast<std::int32_t>(rng.below(vocab)));
    return tb;
}

// Triple-loop [N, d] x [d, V].
std::vector<float> naive_head(const Tensor& head, const Tensor& hidden) {
    const std::size_t d = head.dim(0), v = head.dim(1), n = hidden.numel() / d;
    std::vector<float> out(n * v);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < v; ++j) {
            float acc = 0.0f;
            for (std::size_t k = 0; k < d; ++k) acc += hidden.data()[i * d + k] * head.data()[k * v + j];
            out[i * v + j] = acc;
        }
    return out;
}

}  // namespace

TEST(Model, ForwardShapesAndDeterminism) {
    auto cfg = small_config();
    auto w = init_weights(cfg, 3);
    auto tokens = random_tokens(2, 7, cfg.vocab_size, 1);
    Tensor h = forward_hidden(w, cfg, tokens);
    EXPECT_EQ(h.shape(), (Shape{2, 7, 16}));
    Tensor z = forward_logits(w, cfg, tokens);
    EXPECT_EQ(z.shape(), (Shape{2, 7, 40}));
    EXPECT_TRUE(forward_logits(w, cfg, tokens).bitwise_equal(z));
    for (float x : z.data()) EXPECT_TRUE(std::isfinite(x));
}

TEST(Model, LogitsAreHeadAppliedToHidden) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        for (bool tied : {false, true}) {
            auto cfg = small_config(tied);
            auto w = init_weights(cfg, seed);
            auto tokens = random_tokens(3, 5 + seed % 4, cfg.vocab_size, seed + 100);
            Tensor z = forward_logits(w, cfg, tokens);
            Tensor recomposed = apply_lm_head(lm_head_matrix(w), forward_hidden(w, cfg, tokens));
            EXPECT_TRUE(z.bitwise_equal(recomposed)) << "seed " << seed << " tied " << tied;
        }
    }
}

TEST(Model, ApplyLmHeadExamples) {
    Tensor zero_hidden({1, 2, 4});
    Tensor head = kdtest::random_tensor({4, 6}, 1);
    Tensor zero_logits = apply_lm_head(head, zero_hidden);
    for (float x : zero_logits.data()) EXPECT_EQ(x, 0.0f);

    // Identity-padded head: logits are the hidden vector followed by zeros.
    Tensor eye({3, 5});
    for (std::size_t i = 0; i < 3; ++i) eye.at({i, i}) = 1.0f;
    Tensor hidden({1, 3}, {0.5f, -2.0f, 7.0f});
    EXPECT_EQ(apply_lm_head(eye, hidden).vec(), (std::vector<float>{0.5f, -2.0f, 7.0f, 0.0f, 0.0f}));

    EXPECT_THROW(apply_lm_head(Tensor({4, 6}), Tensor({2, 5})), ShapeError);
}

TEST(Model, ApplyLmHeadMatchesTripleLoop) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Tensor head = kdtest::random_tensor({8, 12}, seed);
        Tensor hidden = kdtest::random_tensor({2, 3, 8}, seed + 50);
        Tensor z = apply_lm_head(head, hidden);
        EXPECT_EQ(z.shape(), (Shape{2, 3, 12}));
        EXPECT_EQ(z.vec(), naive_head(head, hidden));
        Tensor borrowed = apply_lm_head(head, hidden.data(), hidden.shape(), DType::F32);
        EXPECT_TRUE(borrowed.bitwise_equal(z));
    }
}

TEST(Model, PrefixConsistentAndCausal) {
    auto cfg = small_config();
    auto w = init_weights(cfg, 5);
    auto full = random_tokens(1, 12, cfg.vocab_size, 9);
    Tensor zf = forward_logits(w, cfg, full);
    for (std::size_t len : {1u, 4u, 11u}) {
        TokenBatch prefix{1, len, std::vector<std::int32_t>(full.ids.begin(), full.ids.begin() + len)};
        Tensor zp = forward_logits(w, cfg, prefix);
        for (std::size_t i = 0; i < zp.numel(); ++i) EXPECT_NEAR(zp.data()[i], zf.data()[i], 1e-6);
    }
    auto changed = full;
    changed.ids[8] = (changed.ids[8] + 1) % static_cast<std::int32_t>(cfg.vocab_size);
    Tensor zc = forward_logits(w, cfg, changed);
    const std::size_t v = cfg.vocab_size;
    for (std::size_t i = 0; i < 8 * v; ++i) EXPECT_EQ(zc.data()[i], zf.data()[i]);
    bool later_changed = false;
    for (std::size_t i = 8 * v; i < zc.numel(); ++i) later_changed |= zc.data()[i] != zf.data()[i];
    EXPECT_TRUE(later_changed);
}

TEST(Model, DecodeStepMatchesFullForward) {
    for (bool tied : {false, true}) {
        auto cfg = small_config(tied);
        auto w = init_weights(cfg, 11);
        auto tokens = random_tokens(1, cfg.max_seq_len, cfg.vocab_size, 12);
        Tensor full = forward_logits(w, cfg, tokens);
        KVCache cache(cfg);
        for (std::size_t t = 0; t < tokens.seq; ++t) {
            Tensor step = decode_step(w, cfg, cache, tokens.ids[t]);
            ASSERT_EQ(step.shape(), (Shape{cfg.vocab_size}));
            for (std::size_t j = 0; j < cfg.vocab_size; ++j)
                EXPECT_NEAR(step.data()[j], full.data()[t * cfg.vocab_size + j], 1e-5) << "t " << t;
        }
        EXPECT_EQ(cache.length(), cfg.max_seq_len);
        EXPECT_THROW(decode_step(w, cfg, cache, 1), CapacityError);
    }
}

TEST(Model, GreedyDecodeWithAndWithoutCache) {
    auto cfg = small_config();
    auto w = init_weights(cfg, 21);
    std::vector<std::int32_t> prompt = {3, 17, 5};
    SamplingParams p;
    p.max_new = 12;
    p.temperature = 0.0f;
    p.eos_id = -1;
    auto cached = sample(w, cfg, prompt, p);
    ASSERT_EQ(cached.size(), 12u);

    std::vector<std::int32_t> seq = prompt;
    for (std::size_t i = 0; i < p.max_new; ++i) {
        TokenBatch tb{1, seq.size(), seq};
        Tensor z = forward_logits(w, cfg, tb);
        seq.push_back(argmax(z.data().subspan((seq.size() - 1) * cfg.vocab_size, cfg.vocab_size)));
    }
    EXPECT_EQ(cached, std::vector<std::int32_t>(seq.begin() + 3, seq.end()));
}

TEST(Model, SampleDeterministicAndStopsAtEos) {
    auto cfg = small_config();
    auto w = init_weights(cfg, 2);
    std::vector<std::int32_t> prompt = {1, 2};
    SamplingParams p;
    p.max_new = 20;
    p.seed = 99;
    p.eos_id = 7;
    auto a = sample(w, cfg, prompt, p);
    EXPECT_EQ(a, sample(w, cfg, prompt, p));
    EXPECT_LE(a.size(), 20u);
    for (auto id : a) EXPECT_NE(id, 7);
    p.max_new = 23;
    EXPECT_THROW(sample(w, cfg, prompt, p), InputError);
    EXPECT_THROW(sample(w, cfg, std::vector<std::int32_t>{}, p), InputError);
}

TEST(Model, SamplingFrequenciesMatchSoftmax) {
    std::vector<float> logits = {0.0f, 1.0f, 2.0f, -1.0f};
    const float temperature = 1.5f;
    std::vector<double> p(4);
    double total = 0.0;
    for (std::size_t i = 0; i < 4; ++i) total += p[i] = std::exp(logits[i] / temperature);
    for (auto& x : p) x /= total;

    const int n = 10000;
    std::vector<int> counts(4, 0);
    CounterRng rng(1234);
    for (int i = 0; i < n; ++i) ++counts[sample_from_logits(logits, temperature, rng.uniform())];
    for (std::size_t i = 0; i < 4; ++i) {
        const double sigma = std::sqrt(n * p[i] * (1 - p[i]));
        EXPECT_NEAR(counts[i], n * p[i], 4 * sigma) << "token " << i;
    }
    EXPECT_EQ(sample_from_logits(logits, 0.0f, 0.9), 2);
    EXPECT_THROW(sample_from_logits(logits, -1.0f, 0.5), ParameterError);
}

TEST(Model, InitBoundsAndSeeds) {
    auto cfg = small_config();
    auto w = init_weights(cfg, 4);
    const float bound = 1.0f / std::sqrt(16.0f);
    for (float x : w.embedding.data()) EXPECT_LE(std::abs(x), bound);
    for (const auto& l : w.layers) {
        for (float x : l.wq.data()) EXPECT_LE(std::abs(x), bound);
        for (float x : l.w2.data()) EXPECT_LE(std::abs(x), 1.0f / std::sqrt(32.0f));
        for (float x : l.norm1.data()) EXPECT_EQ(x, 1.0f);
    }
    for (float x : w.final_norm.data()) EXPECT_EQ(x, 1.0f);
    EXPECT_TRUE(init_weights(cfg, 4).bitwise_equal(w));
    EXPECT_FALSE(init_weights(cfg, 5).bitwise_equal(w));
    EXPECT_NE(init_weights(cfg, 5).checksum(), w.checksum());
}

TEST(Model, TiedHeadUsesEmbedding) {
    auto cfg = small_config(true);
    auto w = init_weights(cfg, 8);
    EXPECT_TRUE(w.lm_head.empty());
    EXPECT_TRUE(lm_head_matrix(w).bitwise_equal(transpose(w.embedding)));
    EXPECT_EQ(w.tensors().size(), weight_shapes(cfg).size());
}

TEST(Model, CheckpointRoundTrip) {
    for (bool tied : {false, true}) {
        auto cfg = small_config(tied);
        auto w = init_weights(cfg, 13).to(tied ? DType::BF16E : DType::F32);
        std::stringstream ss;
        write_checkpoint(ss, cfg, w);
        auto [cfg2, w2] = read_checkpoint(ss);
        EXPECT_EQ(cfg2, cfg);
        EXPECT_TRUE(w2.bitwise_equal(w));
        EXPECT_EQ(w2.dtype(), w.dtype());
    }
    auto dir = kdtest::temp_dir("ckpt");
    auto cfg = small_config();
    auto w = init_weights(cfg, 1);
    save_checkpoint(dir / "m.kdck", cfg, w);
    EXPECT_TRUE(load_checkpoint(dir / "m.kdck").second.bitwise_equal(w));
    EXPECT_THROW(load_checkpoint(dir / "missing.kdck"), IoError);
    std::stringstream bad("KDCX");
    EXPECT_THROW(read_checkpoint(bad), FormatError);
    std::filesystem::remove_all(dir);
}

TEST(Model, OutOfVocabTokenNamesPosition) {
    auto cfg = small_config();
    auto w = init_weights(cfg, 1);
    TokenBatch tb{2, 3, {1, 2, 3, 4, 40, 6}};
    try {
        forward_hidden(w, cfg, tb);
        FAIL() << "expected InputError";
    } catch (const InputError& e) {
        EXPECT_NE(std::string(e.what()).find("(1, 1)"), std::string::npos) << e.what();
    }
    tb.ids[4] = -1;
    EXPECT_THROW(forward_hidden(w, cfg, tb), InputError);
    TokenBatch too_long{1, 25, std::vector<std::int32_t>(25, 1)};
    EXPECT_THROW(forward_hidden(w, cfg, too_long), InputError);
}

TEST(Model, ConfigValidation) {
    ModelConfig bad = small_config();
    bad.n_heads = 3;
    EXPECT_THROW(bad.validate(), ParameterError);
    bad = small_config();
    bad.vocab_size = 0;
    EXPECT_THROW(bad.validate(), ParameterError);
}

TEST(Model, Bf16ForwardStaysOnGrid) {
    auto cfg = small_config();
    auto w = init_weights(cfg, 6).to(DType::BF16E);
    Tensor h = forward_hidden(w, cfg, random_tokens(1, 5, cfg.vocab_size, 3));
    EXPECT_EQ(h.dtype(), DType::BF16E);
    for (float x : h.data()) EXPECT_EQ(bf16_project(x), x);
}
