#pragma once

#include <optional>
#include <string>
#include <vector>

#include "kdflow/tensor.hpp"

namespace kdflow {

enum class DivergenceKind { FKL, RKL, JSD, TVD };

const char* divergence_name(DivergenceKind kind) noexcept;
DivergenceKind parse_divergence(const std::string& name);

inline constexpr double kProbFloor = 1e-12;

/// Result of a distillation loss over a batch of positions.
struct LossBatch {
    double loss = 0.0;                 // sum(per_position * mask) / normalizer
    std::vector<double> per_position;  // one entry per row; 0 where masked
    Tensor grad;                       // d loss / d student logits, student's shape
    Tensor mask;                       // [rows] of {0, 1}
};

/// Divergence between softmax(teacher / T) and softmax(student / T), per
/// position, mean-reduced over unmasked positions. Natural log; probabilities
/// are floored at 1e-12 inside logs. The gradient is taken w.r.t. the student
/// logits only.
///
/// Logits may be [B, T, V] or [N, V]; both tensors must hold the same number of
/// rows of width V and `mask` holds one {0,1} entry per row. `normalizer`
/// overrides the default max(1, sum(mask)) divisor, which is how gradient
/// accumulation reduces over the global unmasked count.
LossBatch kd_loss(DivergenceKind kind, const Tensor& teacher_logits, const Tensor& student_logits,
                  const Tensor& mask, float temperature, std::optional<double> normalizer = std::nullopt);

/// kd_loss with the teacher distribution rebuilt from its k largest logits
/// only (renormalized over that support, zero elsewhere). Ties break toward the
/// lower index. k == V reproduces kd_loss exactly.
LossBatch kd_loss_topk(DivergenceKind kind, const Tensor& teacher_logits, std::size_t k,
                       const Tensor& student_logits, const Tensor& mask, float temperature,
                       std::optional<double> normalizer = std::nullopt);

/// Loss from teacher hidden states: recompute teacher logits with the teacher
/// head, then kd_loss. Defined as that composition.
LossBatch distill_step_loss(const Tensor& teacher_hidden, const Tensor& teacher_head, const Tensor& student_logits,
                            DivergenceKind kind, const Tensor& mask, float temperature,
                            std::optional<double> normalizer = std::nullopt);

}  // namespace kdflow
