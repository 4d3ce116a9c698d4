#include <gtest/gtest.h>

#include <cmath>

#include "kdflow/divergence.hpp"
#include "kdflow/errors.hpp"
#include "kdflow/model.hpp"
#include "test_util.hpp"

using namespace kdflow;

namespace {

constexpr DivergenceKind kKinds[] = {DivergenceKind::FKL, DivergenceKind::RKL, DivergenceKind::JSD,
                                      DivergenceKind::TVD};

std::vector<double> ref_softmax(std::span<const double> z, double t) {
    double mx = -INFINITY;
    for (double v : z) mx = std::max(mx, v / t);
    std::vector<double> p(z.size());
    double s = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) s += p[i] = std::exp(z[i] / t - mx);
    for (auto& v : p) v /= s;
    return p;
}

double flog(double p) { return std::log(std::max(p, kProbFloor)); }

// Per-position divergence straight from the definitions.
double ref_divergence(DivergenceKind kind, std::span<const double> zt, std::span<const double> zs, double t) {
    auto p = ref_softmax(zt, t);
    auto q = ref_softmax(zs, t);
    double d = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double m = 0.5 * (p[i] + q[i]);
        switch (kind) {
            case DivergenceKind::FKL: d += p[i] * (flog(p[i]) - flog(q[i])); break;
            case DivergenceKind::RKL: d += q[i] * (flog(q[i]) - flog(p[i])); break;
            case DivergenceKind::JSD: d += 0.5 * p[i] * (flog(p[i]) - flog(m)) + 0.5 * q[i] * (flog(q[i]) - flog(m)); break;
            case DivergenceKind::TVD: d += 0.5 * std::abs(p[i] - q[i]); break;
        }
    }
    return d;
}

struct RefResult {
    double loss;
    std::vector<double> grad;
};

// Masked mean of ref_divergence with a central-difference gradient in double.
RefResult ref_loss(DivergenceKind kind, const Tensor& teacher, const Tensor& student, const Tensor& mask, double t) {
    const std::size_t v = student.shape().back(), rows = student.numel() / v;
    double count = 0.0;
    for (float m : mask.data()) count += m;
    const double norm = std::max(1.0, count);
    RefResult r{0.0, std::vector<double>(student.numel(), 0.0)};
    for (std::size_t row = 0; row < rows; ++row) {
        if (mask.data()[row] == 0.0f) continue;
        std::vector<double> zt(teacher.data().begin() + row * v, teacher.data().begin() + (row + 1) * v);
        std::vector<double> zs(student.data().begin() + row * v, student.data().begin() + (row + 1) * v);
        r.loss += ref_divergence(kind, zt, zs, t) / norm;
        for (std::size_t i = 0; i < v; ++i) {
            const double h = 1e-6, keep = zs[i];
            zs[i] = keep + h;
            const double up = ref_divergence(kind, zt, zs, t);
            zs[i] = keep - h;
            const double down = ref_divergence(kind, zt, zs, t);
            zs[i] = keep;
            r.grad[row * v + i] = (up - down) / (2 * h) / norm;
        }
    }
    return r;
}

bool near_kink(const Tensor& teacher, const Tensor& student, double t) {
    const std::size_t v = student.shape().back(), rows = student.numel() / v;
    for (std::size_t row = 0; row < rows; ++row) {
        std::vector<double> zt(teacher.data().begin() + row * v, teacher.data().begin() + (row + 1) * v);
        std::vector<double> zs(student.data().begin() + row * v, student.data().begin() + (row + 1) * v);
        auto p = ref_softmax(zt, t), q = ref_softmax(zs, t);
        for (std::size_t i = 0; i < v; ++i)
            if (std::abs(p[i] - q[i]) < 1e-6) return true;
    }
    return false;
}

Tensor random_mask(std::size_t n, std::uint64_t seed) {
    CounterRng rng(seed);
    Tensor m({n});
    for (auto& x : m.data()) x = rng.uniform() < 0.7 ? 1.0f : 0.0f;
    m.data()[0] = 1.0f;
    return m;
}

}  // namespace

TEST(Divergence, ParseNames) {
    for (auto k : kKinds) EXPECT_EQ(parse_divergence(divergence_name(k)), k);
    EXPECT_EQ(parse_divergence("JSD"), DivergenceKind::JSD);
    EXPECT_THROW(parse_divergence("kl"), ParameterError);
}

TEST(Divergence, IdenticalDistributionsGiveZero) {
    for (auto k : kKinds) {
        for (std::uint64_t seed = 0; seed < 20; ++seed) {
            Tensor z = kdtest::random_tensor({2, 3, 11}, seed, -5, 5);
            auto r = kd_loss(k, z, z, kdtest::ones_mask(6), 1.3f);
            EXPECT_NEAR(r.loss, 0.0, 1e-12) << divergence_name(k);
            for (float g : r.grad.data()) EXPECT_NEAR(g, 0.0f, 1e-7);
        }
    }
}

TEST(Divergence, MaximalDisagreementIsBounded) {
    const std::size_t v = 8;
    Tensor teacher({1, v}), student({1, v});
    teacher.data()[0] = 30.0f;
    student.data()[v - 1] = 30.0f;
    for (std::size_t i = 1; i < v; ++i) teacher.data()[i] = -30.0f;
    for (std::size_t i = 0; i + 1 < v; ++i) student.data()[i] = -30.0f;
    for (auto k : kKinds) {
        auto r = kd_loss(k, teacher, student, kdtest::ones_mask(1), 1.0f);
        EXPECT_TRUE(std::isfinite(r.loss)) << divergence_name(k);
        EXPECT_GT(r.loss, 0.0);
        for (float g : r.grad.data()) EXPECT_TRUE(std::isfinite(g));
    }
    EXPECT_LE(kd_loss(DivergenceKind::JSD, teacher, student, kdtest::ones_mask(1), 1.0f).loss, std::log(2.0) + 1e-12);
    EXPECT_GT(kd_loss(DivergenceKind::JSD, teacher, student, kdtest::ones_mask(1), 1.0f).loss, std::log(2.0) - 1e-6);
    EXPECT_LE(kd_loss(DivergenceKind::TVD, teacher, student, kdtest::ones_mask(1), 1.0f).loss, 1.0 + 1e-12);
    EXPECT_GT(kd_loss(DivergenceKind::TVD, teacher, student, kdtest::ones_mask(1), 1.0f).loss, 1.0 - 1e-6);
    // KL terms are capped by the probability floor.
    EXPECT_LE(kd_loss(DivergenceKind::FKL, teacher, student, kdtest::ones_mask(1), 1.0f).loss, -std::log(kProbFloor) + 1.0);
}

TEST(Divergence, GradientMatchesFiniteDifferences) {
    for (auto k : kKinds) {
        int cases = 0;
        for (std::uint64_t seed = 0; cases < 50; ++seed) {
            ASSERT_LT(seed, 1000u);
            const float t = 0.5f + static_cast<float>(seed % 4) * 0.5f;
            Tensor teacher = kdtest::random_tensor({2, 2, 7}, 1000 + seed, -3, 3);
            Tensor student = kdtest::random_tensor({2, 2, 7}, 2000 + seed, -3, 3);
            if (k == DivergenceKind::TVD && near_kink(teacher, student, t)) continue;
            ++cases;
            Tensor mask = random_mask(4, seed);
            auto r = kd_loss(k, teacher, student, mask, t);
            double num = 0.0, den = 0.0;
            for (std::size_t i = 0; i < student.numel(); ++i) {
                Tensor up = student, down = student;
                up.data()[i] += 1e-3f;
                down.data()[i] -= 1e-3f;
                const double step = static_cast<double>(up.data()[i]) - down.data()[i];
                const double fd = (kd_loss(k, teacher, up, mask, t).loss - kd_loss(k, teacher, down, mask, t).loss) / step;
                num += (r.grad.data()[i] - fd) * (r.grad.data()[i] - fd);
                den += fd * fd;
            }
            EXPECT_LT(std::sqrt(num) / std::max(std::sqrt(den), 1e-12), 1e-4)
                << divergence_name(k) << " seed " << seed;
        }
    }
}

TEST(Divergence, MatchesIndependentOracle) {
    for (auto k : kKinds) {
        for (std::uint64_t seed = 0; seed < 50; ++seed) {
            Tensor teacher = kdtest::random_tensor({3, 9}, 300 + seed, -4, 4);
            Tensor student = kdtest::random_tensor({3, 9}, 400 + seed, -4, 4);
            if (k == DivergenceKind::TVD && near_kink(teacher, student, 1.0)) continue;
            Tensor mask = random_mask(3, seed);
            auto r = kd_loss(k, teacher, student, mask, 1.0f);
            auto ref = ref_loss(k, teacher, student, mask, 1.0);
            EXPECT_NEAR(r.loss, ref.loss, 1e-6) << divergence_name(k) << " seed " << seed;
            for (std::size_t i = 0; i < ref.grad.size(); ++i)
                EXPECT_NEAR(r.grad.data()[i], ref.grad[i], 1e-6) << divergence_name(k) << " seed " << seed;
        }
    }
}

TEST(Divergence, FklGradientClosedForm) {
    Tensor teacher = kdtest::random_tensor({1, 5}, 1, -2, 2);
    Tensor student = kdtest::random_tensor({1, 5}, 2, -2, 2);
    const double t = 2.0;
    auto r = kd_loss(DivergenceKind::FKL, teacher, student, kdtest::ones_mask(1), static_cast<float>(t));
    std::vector<double> zt(teacher.data().begin(), teacher.data().end()), zs(student.data().begin(), student.data().end());
    auto p = ref_softmax(zt, t), q = ref_softmax(zs, t);
    for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(r.grad.data()[i], (q[i] - p[i]) / t, 1e-7);
}

TEST(Divergence, TopKFullSupportIsExact) {
    for (auto k : kKinds) {
        for (std::uint64_t seed = 0; seed < 10; ++seed) {
            Tensor teacher = kdtest::random_tensor({2, 3, 12}, seed, -4, 4);
            Tensor student = kdtest::random_tensor({2, 3, 12}, seed + 99, -4, 4);
            auto full = kd_loss(k, teacher, student, kdtest::ones_mask(6), 1.0f);
            auto topk = kd_loss_topk(k, teacher, 12, student, kdtest::ones_mask(6), 1.0f);
            EXPECT_EQ(full.loss, topk.loss);
            EXPECT_TRUE(full.grad.bitwise_equal(topk.grad));
        }
    }
}

TEST(Divergence, TopOneIsPeaked) {
    Tensor teacher({1, 6}, {0.1f, 2.0f, -1.0f, 1.9f, 0.0f, 0.5f});
    Tensor student = kdtest::random_tensor({1, 6}, 3);
    auto r = kd_loss_topk(DivergenceKind::FKL, teacher, 1, student, kdtest::ones_mask(1), 1.0f);
    std::vector<double> zs(student.data().begin(), student.data().end());
    auto q = ref_softmax(zs, 1.0);
    EXPECT_NEAR(r.loss, -std::log(q[1]), 1e-9);
    for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(r.grad.data()[i], q[i] - (i == 1 ? 1.0 : 0.0), 1e-7);
}

TEST(Divergence, TopKMatchesRenormalizedOracle) {
    const std::size_t v = 16;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        const std::size_t k = 1 + seed % v;
        Tensor teacher = kdtest::random_tensor({1, v}, 5000 + seed, -3, 3);
        Tensor student = kdtest::random_tensor({1, v}, 6000 + seed, -3, 3);
        auto r = kd_loss_topk(DivergenceKind::FKL, teacher, k, student, kdtest::ones_mask(1), 1.0f);
        // Oracle: drop everything below the k-th largest teacher logit.
        std::vector<double> zt(teacher.data().begin(), teacher.data().end());
        std::vector<double> sorted = zt;
        std::sort(sorted.rbegin(), sorted.rend());
        const double cut = sorted[k - 1];
        std::vector<double> p(v, 0.0);
        double s = 0.0;
        for (std::size_t i = 0; i < v; ++i)
            if (zt[i] >= cut) s += p[i] = std::exp(zt[i]);
        for (auto& x : p) x /= s;
        std::vector<double> zs(student.data().begin(), student.data().end());
        auto q = ref_softmax(zs, 1.0);
        double expect = 0.0;
        for (std::size_t i = 0; i < v; ++i) expect += p[i] * (flog(p[i]) - flog(q[i]));
        EXPECT_NEAR(r.loss, expect, 1e-9) << "seed " << seed << " k " << k;
        EXPECT_GE(r.loss, -1e-12);
    }
}

TEST(Divergence, TopKTruncationChangesLoss) {
    Tensor teacher = kdtest::random_tensor({4, 32}, 1, -2, 2);
    Tensor student = kdtest::random_tensor({4, 32}, 2, -2, 2);
    auto full = kd_loss(DivergenceKind::FKL, teacher, student, kdtest::ones_mask(4), 1.0f);
    auto trunc = kd_loss_topk(DivergenceKind::FKL, teacher, 4, student, kdtest::ones_mask(4), 1.0f);
    EXPECT_GT(std::abs(full.loss - trunc.loss), 1e-3);
}

TEST(Divergence, DistillStepLossWithZeroHidden) {
    const std::size_t d = 4, v = 10;
    Tensor hidden({1, 3, d});
    Tensor head = kdtest::random_tensor({d, v}, 7);
    Tensor student = kdtest::random_tensor({1, 3, v}, 8, -2, 2);
    auto r = distill_step_loss(hidden, head, student, DivergenceKind::FKL, kdtest::ones_mask(3), 1.0f);
    // Uniform teacher: FKL = -log V - mean log q.
    double expect = 0.0;
    for (std::size_t row = 0; row < 3; ++row) {
        std::vector<double> zs(student.data().begin() + row * v, student.data().begin() + (row + 1) * v);
        auto q = ref_softmax(zs, 1.0);
        double mean_log_q = 0.0;
        for (double x : q) mean_log_q += std::log(x) / v;
        expect += (-std::log(static_cast<double>(v)) - mean_log_q) / 3.0;
    }
    EXPECT_NEAR(r.loss, expect, 1e-9);
}

TEST(Divergence, DistillStepLossIsComposition) {
    Tensor hidden = kdtest::random_tensor({2, 3, 6}, 1);
    Tensor head = kdtest::random_tensor({6, 11}, 2);
    Tensor student = kdtest::random_tensor({2, 3, 11}, 3);
    for (auto k : kKinds) {
        auto a = distill_step_loss(hidden, head, student, k, kdtest::ones_mask(6), 1.5f);
        auto b = kd_loss(k, apply_lm_head(head, hidden), student, kdtest::ones_mask(6), 1.5f);
        EXPECT_EQ(a.loss, b.loss);
        EXPECT_TRUE(a.grad.bitwise_equal(b.grad));
    }
}

TEST(Divergence, ShiftInvariance) {
    for (auto k : kKinds) {
        for (std::uint64_t seed = 0; seed < 20; ++seed) {
            Tensor teacher = kdtest::random_tensor({2, 8}, seed, -2, 2);
            Tensor student = kdtest::random_tensor({2, 8}, seed + 40, -2, 2);
            Tensor ts = teacher, ss = student;
            for (auto& x : ts.data()) x += 4.0f;
            for (auto& x : ss.data()) x -= 2.5f;
            auto a = kd_loss(k, teacher, student, kdtest::ones_mask(2), 1.0f);
            auto b = kd_loss(k, ts, ss, kdtest::ones_mask(2), 1.0f);
            EXPECT_NEAR(a.loss, b.loss, 1e-6) << divergence_name(k);
        }
    }
}

TEST(Divergence, MaskedPositionsContributeNothing) {
    for (auto k : kKinds) {
        Tensor teacher = kdtest::random_tensor({2, 4, 9}, 1, -3, 3);
        Tensor student = kdtest::random_tensor({2, 4, 9}, 2, -3, 3);
        Tensor mask({8}, {1, 0, 1, 1, 0, 0, 1, 0});
        auto r = kd_loss(k, teacher, student, mask, 1.0f);
        for (std::size_t row = 0; row < 8; ++row) {
            if (mask.data()[row] != 0.0f) continue;
            EXPECT_EQ(r.per_position[row], 0.0);
            for (std::size_t i = 0; i < 9; ++i) EXPECT_EQ(r.grad.data()[row * 9 + i], 0.0f);
        }
        // Changing masked logits leaves the loss unchanged.
        Tensor student2 = student;
        for (std::size_t i = 0; i < 9; ++i) student2.data()[9 + i] = 50.0f;
        EXPECT_EQ(kd_loss(k, teacher, student2, mask, 1.0f).loss, r.loss);
    }
}

TEST(Divergence, NonNegative) {
    for (auto k : kKinds)
        for (std::uint64_t seed = 0; seed < 200; ++seed) {
            Tensor teacher = kdtest::random_tensor({3, 5}, seed, -6, 6);
            Tensor student = kdtest::random_tensor({3, 5}, seed + 7000, -6, 6);
            auto r = kd_loss(k, teacher, student, kdtest::ones_mask(3), 0.5f + (seed % 3));
            EXPECT_GE(r.loss, -1e-12) << divergence_name(k) << " seed " << seed;
            for (double p : r.per_position) EXPECT_GE(p, -1e-12);
        }
}

TEST(Divergence, NormalizerOverride) {
    Tensor teacher = kdtest::random_tensor({4, 6}, 1);
    Tensor student = kdtest::random_tensor({4, 6}, 2);
    auto mean = kd_loss(DivergenceKind::RKL, teacher, student, kdtest::ones_mask(4), 1.0f);
    auto scaled = kd_loss(DivergenceKind::RKL, teacher, student, kdtest::ones_mask(4), 1.0f, 8.0);
    EXPECT_NEAR(scaled.loss, mean.loss / 2.0, 1e-12);
    Tensor none({4});
    EXPECT_EQ(kd_loss(DivergenceKind::RKL, teacher, student, none, 1.0f).loss, 0.0);
}

TEST(Divergence, InvalidArguments) {
    Tensor a({2, 5}), b({2, 6});
    EXPECT_THROW(kd_loss(DivergenceKind::FKL, a, b, kdtest::ones_mask(2), 1.0f), ShapeError);
    EXPECT_THROW(kd_loss(DivergenceKind::FKL, a, a, kdtest::ones_mask(3), 1.0f), ShapeError);
    EXPECT_THROW(kd_loss(DivergenceKind::FKL, a, a, kdtest::ones_mask(2), 0.0f), ParameterError);
    EXPECT_THROW(kd_loss_topk(DivergenceKind::FKL, a, 0, a, kdtest::ones_mask(2), 1.0f), ParameterError);
    EXPECT_THROW(kd_loss_topk(DivergenceKind::FKL, a, 6, a, kdtest::ones_mask(2), 1.0f), ParameterError);
}
