#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <string_view>
#include <vector>

#include "kdflow/tensor.hpp"

namespace kdflow {

/// Handle to a value slot on a Tape.
struct Var {
    std::size_t id = std::numeric_limits<std::size_t>::max();
    bool valid() const noexcept { return id != std::numeric_limits<std::size_t>::max(); }
};

/// Reverse-mode gradient tape.
///
/// Every op computes its value eagerly. When recording, the op is appended to
/// an ordered list together with a closure that pushes the output gradient to
/// its inputs; backward() replays that list in exact reverse. Gradients of a
/// slot consumed by several ops accumulate by summation.
///
/// A non-recording tape evaluates the same kernels without storing any
/// backward state, which is how inference shares code with training.
class Tape {
public:
    explicit Tape(bool record = true) : record_(record) {}

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;
    Tape(Tape&&) = default;
    Tape& operator=(Tape&&) = default;

    bool recording() const noexcept { return record_; }

    Var leaf(Tensor value, bool requires_grad = true);
    Var constant(Tensor value) { return leaf(std::move(value), false); }

    const Tensor& value(Var v) const;
    /// Accumulated gradient; an all-zero F32 tensor if nothing flowed into v.
    Tensor grad(Var v) const;
    bool requires_grad(Var v) const;

    std::size_t op_count() const noexcept { return ops_.size(); }
    std::vector<std::string_view> op_names() const;

    // Primitive ops. Outputs take the dtype of the first input.
    Var matmul(Var a, Var b);
    /// Elementwise add of equal shapes, or [..., n] + [n] bias add.
    Var add(Var a, Var b);
    Var mul(Var a, Var b);
    Var scale(Var a, float factor);
    Var sum(Var a);
    Var softmax(Var z, float temperature = 1.0f);
    /// Row-wise RMSNorm of x [N, d] with gain [d].
    Var rmsnorm(Var x, Var gain);
    /// Gather rows of table [V, d] -> [ids.size(), d].
    Var embedding(Var table, std::span<const std::int32_t> ids);
    Var gelu(Var x);
    Var transpose(Var x);
    /// Causal multi-head attention over q, k, v laid out as [batch * seq, d].
    Var causal_attention(Var q, Var k, Var v, std::size_t batch, std::size_t seq, std::size_t n_heads);

    /// Backward from a scalar slot (seed 1).
    void backward(Var loss);
    /// Backward from any slot with an explicit upstream gradient.
    void backward(Var out, const Tensor& seed);

private:
    struct Slot {
        Tensor value;
        std::vector<float> grad;  // empty until something flows in
        bool requires_grad = false;
    };
    struct Op {
        std::string_view name;
        std::size_t output;
        std::function<void(Tape&)> backward;
    };

    Var push(Tensor value, bool requires_grad);
    bool any_requires_grad(std::initializer_list<Var> inputs) const;
    void record(std::string_view name, Var out, std::function<void(Tape&)> fn);
    std::span<float> grad_acc(std::size_t id);
    std::span<const float> grad_in(std::size_t id) const { return slots_[id].grad; }
    const Slot& slot(Var v) const;

    bool record_;
    std::vector<Slot> slots_;
    std::vector<Op> ops_;
};

}  // namespace kdflow
