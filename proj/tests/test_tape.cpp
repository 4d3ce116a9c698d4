#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "kdflow/errors.hpp"
#include "kdflow/tape.hpp"
#include "test_util.hpp"

using namespace kdflow;

namespace {

using Builder = std::function<Var(Tape&, const std::vector<Var>&)>;

double eval(const Builder& f, const std::vector<Tensor>& inputs) {
    Tape t(false);
    std::vector<Var> vars;
    for (const auto& x : inputs) vars.push_back(t.leaf(x, false));
    return t.value(f(t, vars)).item();
}

/// Norm-wise relative error between the tape gradient and central differences
/// for each input.
std::vector<double> fd_errors(const Builder& f, const std::vector<Tensor>& inputs, float h = 1e-2f) {
    Tape t;
    std::vector<Var> vars;
    for (const auto& x : inputs) vars.push_back(t.leaf(x));
    t.backward(f(t, vars));
    std::vector<double> errs;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        Tensor g = t.grad(vars[i]);
        double num = 0.0, den = 0.0;
        for (std::size_t j = 0; j < inputs[i].numel(); ++j) {
            auto plus = inputs, minus = inputs;
            plus[i].data()[j] += h;
            minus[i].data()[j] -= h;
            const double fd = (eval(f, plus) - eval(f, minus)) / (2.0 * h);
            num += (g.data()[j] - fd) * (g.data()[j] - fd);
            den += fd * fd;
        }
        errs.push_back(std::sqrt(num) / std::max(std::sqrt(den), 1e-12));
    }
    return errs;
}

/// Reduce any output to a scalar with fixed random weights so every output
/// element gets a distinct upstream gradient.
Var weighted_sum(Tape& t, Var out, std::uint64_t seed) {
    Var w = t.constant(kdtest::random_tensor(t.value(out).shape(), seed));
    return t.sum(t.mul(out, w));
}

}  // namespace

TEST(Tape, SumGradientIsOnes) {
    Tape t;
    Var x = t.leaf(kdtest::random_tensor({3, 4}, 1));
    t.backward(t.sum(x));
    Tensor g = t.grad(x);
    for (float v : g.data()) EXPECT_EQ(v, 1.0f);
}

TEST(Tape, QuadraticGradient) {
    Tape t;
    Tensor xv({3}, {1.0f, -2.0f, 0.5f});
    Var x = t.leaf(xv);
    t.backward(t.sum(t.mul(x, x)));
    EXPECT_EQ(t.grad(x).vec(), (std::vector<float>{2.0f, -4.0f, 1.0f}));
}

TEST(Tape, ReusedSlotAccumulates) {
    Tape t;
    Var x = t.leaf(Tensor({2}, {3.0f, 4.0f}));
    Var y = t.add(t.scale(x, 2.0f), t.scale(x, 5.0f));
    t.backward(t.sum(y));
    EXPECT_EQ(t.grad(x).vec(), (std::vector<float>{7.0f, 7.0f}));
}

TEST(Tape, BackwardNeedsScalar) {
    Tape t;
    Var x = t.leaf(Tensor({2, 2}));
    EXPECT_THROW(t.backward(x), ContractError);
    Tape off(false);
    Var y = off.leaf(Tensor::scalar(1.0f));
    EXPECT_THROW(off.backward(y), ContractError);
    EXPECT_EQ(off.op_count(), 0u);
}

TEST(Tape, ConstantsGetNoGradient) {
    Tape t;
    Var x = t.leaf(Tensor({2}, {1.0f, 2.0f}));
    Var c = t.constant(Tensor({2}, {3.0f, 4.0f}));
    t.backward(t.sum(t.mul(x, c)));
    EXPECT_EQ(t.grad(x).vec(), (std::vector<float>{3.0f, 4.0f}));
    EXPECT_EQ(t.grad(c).vec(), (std::vector<float>{0.0f, 0.0f}));
    EXPECT_FALSE(t.requires_grad(c));
}

TEST(Tape, RecordsOpsInOrder) {
    Tape t;
    Var a = t.leaf(kdtest::random_tensor({2, 3}, 1));
    Var b = t.leaf(kdtest::random_tensor({3, 2}, 2));
    t.sum(t.gelu(t.matmul(a, b)));
    auto names = t.op_names();
    ASSERT_EQ(names.size(), 3u);
    EXPECT_EQ(names[0], "matmul");
    EXPECT_EQ(names[1], "gelu");
    EXPECT_EQ(names[2], "sum");
}

TEST(Tape, MlpMatchesFiniteDifferences) {
    Builder mlp = [](Tape& t, const std::vector<Var>& v) {
        Var h = t.gelu(t.add(t.matmul(v[0], v[1]), v[2]));
        return weighted_sum(t, t.matmul(h, v[3]), 77);
    };
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        std::vector<Tensor> in = {kdtest::random_tensor({3, 4}, seed * 10 + 1), kdtest::random_tensor({4, 5}, seed * 10 + 2),
                                  kdtest::random_tensor({5}, seed * 10 + 3), kdtest::random_tensor({5, 2}, seed * 10 + 4)};
        for (double e : fd_errors(mlp, in)) EXPECT_LT(e, 1e-2) << "seed " << seed;
    }
}

TEST(Tape, PrimitiveOpsMatchFiniteDifferences) {
    struct Case {
        const char* name;
        std::vector<Shape> shapes;
        Builder f;
    };
    std::vector<Case> cases = {
        {"softmax", {{3, 6}}, [](Tape& t, const std::vector<Var>& v) { return weighted_sum(t, t.softmax(v[0], 0.7f), 5); }},
        {"rmsnorm", {{3, 6}, {6}}, [](Tape& t, const std::vector<Var>& v) { return weighted_sum(t, t.rmsnorm(v[0], v[1]), 6); }},
        {"transpose", {{3, 5}}, [](Tape& t, const std::vector<Var>& v) { return weighted_sum(t, t.transpose(v[0]), 7); }},
        {"scale", {{4}}, [](Tape& t, const std::vector<Var>& v) { return weighted_sum(t, t.scale(v[0], -1.5f), 8); }},
        {"embedding", {{5, 3}}, [](Tape& t, const std::vector<Var>& v) {
             std::vector<std::int32_t> ids = {4, 0, 4, 2};
             return weighted_sum(t, t.embedding(v[0], ids), 9);
         }},
        {"attention", {{6, 4}, {6, 4}, {6, 4}}, [](Tape& t, const std::vector<Var>& v) {
             return weighted_sum(t, t.causal_attention(v[0], v[1], v[2], 2, 3, 2), 10);
         }},
    };
    for (const auto& c : cases) {
        for (std::uint64_t seed = 0; seed < 20; ++seed) {
            std::vector<Tensor> in;
            for (std::size_t i = 0; i < c.shapes.size(); ++i) in.push_back(kdtest::random_tensor(c.shapes[i], seed * 31 + i));
            auto errs = fd_errors(c.f, in);
            for (std::size_t i = 0; i < errs.size(); ++i) EXPECT_LT(errs[i], 1e-2) << c.name << " input " << i << " seed " << seed;
        }
    }
}

TEST(Tape, ExplicitSeedBackward) {
    Tape t;
    Var x = t.leaf(Tensor({2}, {1.0f, 2.0f}));
    Var y = t.scale(x, 3.0f);
    t.backward(y, Tensor({2}, {1.0f, -1.0f}));
    EXPECT_EQ(t.grad(x).vec(), (std::vector<float>{3.0f, -3.0f}));
    EXPECT_THROW(t.backward(y, Tensor({3})), ShapeError);
}
