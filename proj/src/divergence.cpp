#include "kdflow/divergence.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "kdflow/errors.hpp"
#include "kdflow/model.hpp"

namespace kdflow {

const char* divergence_name(DivergenceKind kind) noexcept {
    switch (kind) {
        case DivergenceKind::FKL: return "fkl";
        case DivergenceKind::RKL: return "rkl";
        case DivergenceKind::JSD: return "jsd";
        case DivergenceKind::TVD: return "tvd";
    }
    return "?";
}

DivergenceKind parse_divergence(const std::string& name) {
    std::string s = name;
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
    if (s == "fkl") return DivergenceKind::FKL;
    if (s == "rkl") return DivergenceKind::RKL;
    if (s == "jsd") return DivergenceKind::JSD;
    if (s == "tvd") return DivergenceKind::TVD;
    throw ParameterError("unknown divergence '" + name + "' (expected fkl, rkl, jsd or tvd)");
}

namespace {

/// softmax(z / T) restricted to `support` (all of z when support is empty).
void softmax_support(std::span<const float> z, double temperature, std::span<const std::size_t> support,
                     std::vector<double>& out) {
    out.assign(z.size(), 0.0);
    auto visit = [&](auto&& fn) {
        if (support.empty())
            for (std::size_t i = 0; i < z.size(); ++i) fn(i);
        else
            for (auto i : support) fn(i);
    };
    double mx = -INFINITY;
    visit([&](std::size_t i) { mx = std::max(mx, z[i] / temperature); });
    double sum = 0.0;
    visit([&](std::size_t i) {
        out[i] = std::exp(z[i] / temperature - mx);
        sum += out[i];
    });
    visit([&](std::size_t i) { out[i] /= sum; });
}

double safe_log(double p) { return std::log(std::max(p, kProbFloor)); }

/// Loss for one position and d loss / d student logit (before mask/normalizer).
double position_loss(DivergenceKind kind, const std::vector<double>& p, const std::vector<double>& q,
                     double temperature, std::vector<double>& dz) {
    const std::size_t v = p.size();
    dz.assign(v, 0.0);
    // g holds d loss / d q for the kinds that go through the softmax Jacobian.
    std::vector<double> g(v);
    double loss = 0.0;
    switch (kind) {
        case DivergenceKind::FKL:
            for (std::size_t i = 0; i < v; ++i) loss += p[i] * (safe_log(p[i]) - safe_log(q[i]));
            for (std::size_t i = 0; i < v; ++i) dz[i] = (q[i] - p[i]) / temperature;
            return loss;
        case DivergenceKind::RKL:
            for (std::size_t i = 0; i < v; ++i) {
                g[i] = safe_log(q[i]) - safe_log(p[i]);
                loss += q[i] * g[i];
            }
            break;
        case DivergenceKind::JSD:
            for (std::size_t i = 0; i < v; ++i) {
                const double lm = safe_log(0.5 * (p[i] + q[i]));
                const double lq = safe_log(q[i]);
                loss += 0.5 * p[i] * (safe_log(p[i]) - lm) + 0.5 * q[i] * (lq - lm);
                g[i] = 0.5 * (lq - lm);
            }
            break;
        case DivergenceKind::TVD:
            for (std::size_t i = 0; i < v; ++i) {
                const double diff = q[i] - p[i];
                loss += 0.5 * std::abs(diff);
                g[i] = diff > 0.0 ? 0.5 : (diff < 0.0 ? -0.5 : 0.0);
            }
            break;
    }
    double qg = 0.0;
    for (std::size_t i = 0; i < v; ++i) qg += q[i] * g[i];
    for (std::size_t i = 0; i < v; ++i) dz[i] = q[i] * (g[i] - qg) / temperature;
    return loss;
}

LossBatch loss_impl(DivergenceKind kind, const Tensor& teacher, std::size_t k, const Tensor& student,
                    const Tensor& mask, float temperature, std::optional<double> normalizer) {
    if (!(temperature > 0.0f)) throw ParameterError("temperature must be > 0");
    if (teacher.rank() < 2 || student.rank() < 2 || teacher.shape().back() != student.shape().back() ||
        teacher.numel() != student.numel())
        throw ShapeError("teacher logits " + shape_str(teacher.shape()) + " and student logits " +
                         shape_str(student.shape()) + " disagree");
    const std::size_t v = student.shape().back();
    const std::size_t rows = student.numel() / v;
    if (mask.numel() != rows)
        throw ShapeError("mask has " + std::to_string(mask.numel()) + " entries for " + std::to_string(rows) +
                         " positions");
    if (k < 1 || k > v) throw ParameterError("top-k must be in 1..V");

    LossBatch out;
    out.mask = mask.reshaped({rows});
    out.per_position.assign(rows, 0.0);
    out.grad = Tensor(student.shape());
    double count = 0.0;
    for (float m : mask.data()) count += m;
    const double norm = normalizer.value_or(std::max(1.0, count));
    if (!(norm > 0.0)) throw ParameterError("loss normalizer must be > 0");

    const double temp = temperature;
    std::vector<double> p, q, dz;
    std::vector<std::size_t> support;
    std::vector<std::size_t> order(v);
    double total = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        const float m = mask.data()[r];
        if (m == 0.0f) continue;
        auto trow = teacher.data().subspan(r * v, v);
        auto srow = student.data().subspan(r * v, v);
        support.clear();
        if (k < v) {
            std::iota(order.begin(), order.end(), std::size_t{0});
            std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                              [&](std::size_t a, std::size_t b) {
                                  return trow[a] > trow[b] || (trow[a] == trow[b] && a < b);
                              });
            support.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
            std::sort(support.begin(), support.end());
        }
        softmax_support(trow, temp, support, p);
        softmax_support(srow, temp, {}, q);
        const double loss = position_loss(kind, p, q, temp, dz);
        out.per_position[r] = loss;
        total += loss * m;
        auto grow = out.grad.data().subspan(r * v, v);
        for (std::size_t i = 0; i < v; ++i) grow[i] = static_cast<float>(dz[i] * m / norm);
    }
    out.loss = total / norm;
    return out;
}

}  // namespace

LossBatch kd_loss(DivergenceKind kind, const Tensor& teacher_logits, const Tensor& student_logits, const Tensor& mask,
                  float temperature, std::optional<double> normalizer) {
    return loss_impl(kind, teacher_logits, student_logits.shape().back(), student_logits, mask, temperature,
                     normalizer);
}

LossBatch kd_loss_topk(DivergenceKind kind, const Tensor& teacher_logits, std::size_t k, const Tensor& student_logits,
                       const Tensor& mask, float temperature, std::optional<double> normalizer) {
    return loss_impl(kind, teacher_logits, k, student_logits, mask, temperature, normalizer);
}

LossBatch distill_step_loss(const Tensor& teacher_hidden, const Tensor& teacher_head, const Tensor& student_logits,
                            DivergenceKind kind, const Tensor& mask, float temperature,
                            std::optional<double> normalizer) {
    return kd_loss(kind, apply_lm_head(teacher_head, teacher_hidden), student_logits, mask, temperature, normalizer);
}

}  // namespace kdflow
