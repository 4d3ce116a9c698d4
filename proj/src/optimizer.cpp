#include "kdflow/optimizer.hpp"

#include <cmath>

#include "kdflow/errors.hpp"

namespace kdflow {

AdamW::AdamW(const ModelWeights& params, AdamWConfig config) : config_(config) {
    if (!(config.learning_rate >= 0.0)) throw ParameterError("learning rate must be >= 0");
    if (!(config.weight_decay >= 0.0)) throw ParameterError("weight decay must be >= 0");
    for (const Tensor* t : params.tensors()) {
        m_.emplace_back(t->numel(), 0.0f);
        v_.emplace_back(t->numel(), 0.0f);
    }
}

void AdamW::step(ModelWeights& params, const ModelWeights& grads) {
    auto ps = params.tensors();
    auto gs = grads.tensors();
    if (ps.size() != m_.size() || gs.size() != m_.size())
        throw ShapeError("optimizer state holds " + std::to_string(m_.size()) + " tensors, got " +
                         std::to_string(ps.size()) + " params and " + std::to_string(gs.size()) + " grads");
    ++t_;
    const auto& c = config_;
    const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < ps.size(); ++i) {
        Tensor& p = *ps[i];
        const Tensor& g = *gs[i];
        if (p.numel() != m_[i].size() || g.numel() != p.numel())
            throw ShapeError("optimizer tensor " + std::to_string(i) + " changed shape");
        auto pd = p.data();
        auto gd = g.data();
        auto& m = m_[i];
        auto& v = v_[i];
        for (std::size_t j = 0; j < pd.size(); ++j) {
            const double gj = gd[j];
            const double mj = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
            const double vj = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
            m[j] = static_cast<float>(mj);
            v[j] = static_cast<float>(vj);
            const double update = (mj / bc1) / (std::sqrt(vj / bc2) + c.eps) + c.weight_decay * pd[j];
            pd[j] = static_cast<float>(pd[j] - c.learning_rate * update);
        }
        project(pd, p.dtype());
    }
}

}  // namespace kdflow
