#include "kdflow/engine.hpp"

#include <algorithm>
#include <cmath>

#include "kdflow/errors.hpp"
#include "kdflow/rng.hpp"

namespace kdflow {

StudentEngine::StudentEngine(ModelConfig config, ModelWeights weights, StudentEngineConfig engine)
    : config_(config), weights_(std::move(weights)), engine_(engine), opt_(weights_, engine.optimizer) {
    config_.validate();
    validate_weights(weights_, config_);
    if (engine_.top_k > config_.vocab_size)
        throw ParameterError("top_k " + std::to_string(engine_.top_k) + " exceeds vocabulary " +
                             std::to_string(config_.vocab_size));
}

MicroResult StudentEngine::micro_step(const TokenBatch& tokens, const Tensor& mask, const Tensor& teacher_logits,
                                      double normalizer) {
    Tape tape(true);
    ModelVars vars = bind_weights(tape, weights_, true);
    Var hidden = build_hidden(tape, vars, config_, tokens);
    Var logits = build_logits(tape, vars, hidden);
    const Tensor& student = tape.value(logits);
    LossBatch lb = engine_.top_k == 0
                       ? kd_loss(engine_.divergence, teacher_logits, student, mask, engine_.temperature, normalizer)
                       : kd_loss_topk(engine_.divergence, teacher_logits, engine_.top_k, student, mask,
                                      engine_.temperature, normalizer);
    tape.backward(logits, lb.grad);
    ModelWeights grads = collect_grads(tape, vars, config_);
    if (!grad_acc_) {
        grad_acc_ = std::move(grads);
    } else {
        auto acc = grad_acc_->tensors();
        auto add = grads.tensors();
        for (std::size_t i = 0; i < acc.size(); ++i) {
            auto a = acc[i]->data();
            auto b = add[i]->data();
            for (std::size_t j = 0; j < a.size(); ++j) a[j] += b[j];
        }
    }
    pending_loss_ += lb.loss;
    MicroResult r;
    r.loss = lb.loss;
    for (float m : mask.data()) r.unmasked += m != 0.0f;
    return r;
}

double grad_l2_norm(const ModelWeights& grads) {
    double sq = 0.0;
    for (const Tensor* t : grads.tensors())
        for (float g : t->data()) sq += static_cast<double>(g) * g;
    return std::sqrt(sq);
}

StepResult StudentEngine::finish_step() {
    StepResult r;
    r.loss = pending_loss_;
    if (grad_acc_) r.grad_norm = grad_l2_norm(*grad_acc_);
    if (std::isfinite(r.loss) && std::isfinite(r.grad_norm) && grad_acc_) {
        opt_.step(weights_, *grad_acc_);
        r.applied = true;
    }
    r.optimizer_steps = opt_.step_count();
    grad_acc_.reset();
    pending_loss_ = 0.0;
    return r;
}

RolloutEngine::RolloutEngine(ModelConfig config, ModelWeights weights, std::uint64_t version) : config_(config) {
    config_.validate();
    validate_weights(weights, config_);
    current_ = std::make_shared<const Snapshot>(Snapshot{version, std::move(weights)});
}

std::shared_ptr<const RolloutEngine::Snapshot> RolloutEngine::snapshot() const {
    std::lock_guard lock(mu_);
    return current_;
}

std::uint64_t RolloutEngine::version() const { return snapshot()->version; }

RolloutEngine::BeginStatus RolloutEngine::begin(std::uint64_t version, std::size_t count, bool forced) {
    pending_.reset();
    if (!forced && version != this->version() + 1) return BeginStatus::Gap;
    if (count != weight_shapes(config_).size())
        throw ContractError("weight sync announces " + std::to_string(count) + " tensors, model has " +
                            std::to_string(weight_shapes(config_).size()));
    pending_ = Pending{version, count, {}};
    return BeginStatus::Accepted;
}

void RolloutEngine::stage(Tensor tensor) {
    if (!pending_) throw ContractError("weight tensor received outside a sync");
    if (pending_->tensors.size() >= pending_->count) throw ContractError("more weight tensors than announced");
    pending_->tensors.push_back(std::move(tensor));
}

std::uint64_t RolloutEngine::commit(std::uint64_t version) {
    if (!pending_) throw ContractError("commit without a pending sync");
    if (pending_->version != version || pending_->tensors.size() != pending_->count) {
        const auto got = pending_->tensors.size();
        const auto want = pending_->count;
        pending_.reset();
        throw ContractError("incomplete weight sync for version " + std::to_string(version) + ": " +
                            std::to_string(got) + " of " + std::to_string(want) + " tensors");
    }
    auto tensors = std::move(pending_->tensors);
    pending_.reset();
    auto next = std::make_shared<const Snapshot>(Snapshot{version, weights_from_tensors(config_, std::move(tensors))});
    std::lock_guard lock(mu_);
    current_ = std::move(next);
    return version;
}

void RolloutEngine::abort() noexcept { pending_.reset(); }

std::pair<std::uint64_t, std::vector<std::vector<std::int32_t>>> RolloutEngine::generate(
    const std::vector<std::vector<std::int32_t>>& prompts, const SamplingParams& params) const {
    auto snap = snapshot();
    std::vector<std::vector<std::int32_t>> out;
    out.reserve(prompts.size());
    for (std::size_t i = 0; i < prompts.size(); ++i) {
        if (prompts[i].size() >= config_.max_seq_len)
            throw InputError("prompt " + std::to_string(i) + " of length " + std::to_string(prompts[i].size()) +
                             " leaves no room to generate within max_seq_len " + std::to_string(config_.max_seq_len));
        SamplingParams p = params;
        p.seed = derive_seed(params.seed, i);
        p.max_new = std::min(params.max_new, config_.max_seq_len - prompts[i].size());
        out.push_back(sample(snap->weights, config_, prompts[i], p));
    }
    return {snap->version, std::move(out)};
}

}  // namespace kdflow
