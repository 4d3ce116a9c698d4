#include "kdflow/tape.hpp"

#include <cmath>
#include <memory>

#include "kdflow/errors.hpp"
#include "kdflow/kernels.hpp"

namespace kdflow {

Var Tape::push(Tensor value, bool requires_grad) {
    slots_.push_back(Slot{std::move(value), {}, requires_grad});
    return Var{slots_.size() - 1};
}

Var Tape::leaf(Tensor value, bool requires_grad) { return push(std::move(value), requires_grad && record_); }

const Tape::Slot& Tape::slot(Var v) const {
    if (!v.valid() || v.id >= slots_.size()) throw ContractError("invalid tape variable");
    return slots_[v.id];
}

const Tensor& Tape::value(Var v) const { return slot(v).value; }

bool Tape::requires_grad(Var v) const { return slot(v).requires_grad; }

Tensor Tape::grad(Var v) const {
    const auto& s = slot(v);
    if (s.grad.empty()) return Tensor(s.value.shape());
    return Tensor(s.value.shape(), s.grad);
}

std::vector<std::string_view> Tape::op_names() const {
    std::vector<std::string_view> names;
    names.reserve(ops_.size());
    for (const auto& op : ops_) names.push_back(op.name);
    return names;
}

bool Tape::any_requires_grad(std::initializer_list<Var> inputs) const {
    if (!record_) return false;
    for (auto v : inputs)
        if (slot(v).requires_grad) return true;
    return false;
}

void Tape::record(std::string_view name, Var out, std::function<void(Tape&)> fn) {
    ops_.push_back(Op{name, out.id, std::move(fn)});
}

std::span<float> Tape::grad_acc(std::size_t id) {
    auto& s = slots_[id];
    if (s.grad.empty()) s.grad.assign(s.value.numel(), 0.0f);
    return s.grad;
}

void Tape::backward(Var loss) {
    if (value(loss).numel() != 1)
        throw ContractError("backward() needs a scalar loss, got shape " + shape_str(value(loss).shape()));
    backward(loss, Tensor::scalar(1.0f));
}

void Tape::backward(Var out, const Tensor& seed) {
    if (!record_) throw ContractError("backward() on a non-recording tape");
    if (seed.shape() != value(out).shape())
        throw ShapeError("backward seed shape " + shape_str(seed.shape()) + " does not match output " +
                         shape_str(value(out).shape()));
    auto g = grad_acc(out.id);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed.data()[i];
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
        if (slots_[it->output].grad.empty()) continue;
        it->backward(*this);
    }
}

Var Tape::matmul(Var a, Var b) {
    Tensor res = kdflow::matmul(value(a), value(b));
    const std::size_t m = value(a).dim(0), k = value(a).dim(1), n = value(b).dim(1);
    Var out = push(std::move(res), any_requires_grad({a, b}));
    if (!slots_[out.id].requires_grad) return out;
    record("matmul", out, [a, b, out, m, k, n](Tape& t) {
        auto dc = t.grad_in(out.id);
        if (t.slots_[a.id].requires_grad) {
            auto bd = t.slots_[b.id].value.data();
            auto da = t.grad_acc(a.id);
            // dA[i,kk] += sum_j dC[i,j] * B[kk,j]
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t kk = 0; kk < k; ++kk) {
                    float s = 0.0f;
                    for (std::size_t j = 0; j < n; ++j) s += dc[i * n + j] * bd[kk * n + j];
                    da[i * k + kk] += s;
                }
        }
        if (t.slots_[b.id].requires_grad) {
            auto ad = t.slots_[a.id].value.data();
            auto db = t.grad_acc(b.id);
            // dB[kk,j] += sum_i A[i,kk] * dC[i,j]
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t kk = 0; kk < k; ++kk) {
                    const float av_ = ad[i * k + kk];
                    for (std::size_t j = 0; j < n; ++j) db[kk * n + j] += av_ * dc[i * n + j];
                }
        }
    });
    return out;
}

Var Tape::add(Var a, Var b) {
    const Tensor& av = value(a);
    const Tensor& bv = value(b);
    const bool bias = av.shape() != bv.shape();
    if (bias && (bv.rank() != 1 || bv.dim(0) != av.shape().back()))
        throw ShapeError("add shape mismatch: " + shape_str(av.shape()) + " + " + shape_str(bv.shape()));
    Tensor res(av.shape(), av.dtype());
    const std::size_t n = bv.numel();
    for (std::size_t i = 0; i < av.numel(); ++i) res.data()[i] = av.data()[i] + bv.data()[bias ? i % n : i];
    project(res.data(), res.dtype());
    Var out = push(std::move(res), any_requires_grad({a, b}));
    if (!slots_[out.id].requires_grad) return out;
    record("add", out, [a, b, out, bias, n](Tape& t) {
        auto dc = t.grad_in(out.id);
        if (t.slots_[a.id].requires_grad) {
            auto da = t.grad_acc(a.id);
            for (std::size_t i = 0; i < dc.size(); ++i) da[i] += dc[i];
        }
        if (t.slots_[b.id].requires_grad) {
            auto db = t.grad_acc(b.id);
            for (std::size_t i = 0; i < dc.size(); ++i) db[bias ? i % n : i] += dc[i];
        }
    });
    return out;
}

Var Tape::mul(Var a, Var b) {
    const Tensor& av = value(a);
    const Tensor& bv = value(b);
    if (av.shape() != bv.shape())
        throw ShapeError("mul shape mismatch: " + shape_str(av.shape()) + " * " + shape_str(bv.shape()));
    Tensor res(av.shape(), av.dtype());
    for (std::size_t i = 0; i < av.numel(); ++i) res.data()[i] = av.data()[i] * bv.data()[i];
    project(res.data(), res.dtype());
    Var out = push(std::move(res), any_requires_grad({a, b}));
    if (!slots_[out.id].requires_grad) return out;
    record("mul", out, [a, b, out](Tape& t) {
        auto dc = t.grad_in(out.id);
        if (t.slots_[a.id].requires_grad) {
            auto bd = t.slots_[b.id].value.data();
            auto da = t.grad_acc(a.id);
            for (std::size_t i = 0; i < dc.size(); ++i) da[i] += dc[i] * bd[i];
        }
        if (t.slots_[b.id].requires_grad) {
            auto ad = t.slots_[a.id].value.data();
            auto db = t.grad_acc(b.id);
            for (std::size_t i = 0; i < dc.size(); ++i) db[i] += dc[i] * ad[i];
        }
    });
    return out;
}

Var Tape::scale(Var a, float factor) {
    const Tensor& av = value(a);
    Tensor res(av.shape(), av.dtype());
    for (std::size_t i = 0; i < av.numel(); ++i) res.data()[i] = av.data()[i] * factor;
    project(res.data(), res.dtype());
    Var out = push(std::move(res), any_requires_grad({a}));
    if (!slots_[out.id].requires_grad) return out;
    record("scale", out, [a, out, factor](Tape& t) {
        auto dc = t.grad_in(out.id);
        auto da = t.grad_acc(a.id);
        for (std::size_t i = 0; i < dc.size(); ++i) da[i] += dc[i] * factor;
    });
    return out;
}

Var Tape::sum(Var a) {
    const Tensor& av = value(a);
    float s = 0.0f;
    for (float v : av.data()) s += v;
    Var out = push(Tensor::scalar(s, av.dtype()), any_requires_grad({a}));
    if (!slots_[out.id].requires_grad) return out;
    record("sum", out, [a, out](Tape& t) {
        const float g = t.grad_in(out.id)[0];
        auto da = t.grad_acc(a.id);
        for (auto& v : da) v += g;
    });
    return out;
}

Var Tape::softmax(Var z, float temperature) {
    Var out = push(kdflow::softmax(value(z), temperature), any_requires_grad({z}));
    if (!slots_[out.id].requires_grad) return out;
    const std::size_t v = value(z).shape().back();
    record("softmax", out, [z, out, v, temperature](Tape& t) {
        auto dy = t.grad_in(out.id);
        auto y = t.slots_[out.id].value.data();
        auto dz = t.grad_acc(z.id);
        for (std::size_t r = 0; r * v < y.size(); ++r) {
            float dot = 0.0f;
            for (std::size_t i = 0; i < v; ++i) dot += dy[r * v + i] * y[r * v + i];
            for (std::size_t i = 0; i < v; ++i)
                dz[r * v + i] += y[r * v + i] * (dy[r * v + i] - dot) / temperature;
        }
    });
    return out;
}

Var Tape::rmsnorm(Var x, Var gain) {
    const Tensor& xv = value(x);
    const Tensor& gv = value(gain);
    if (xv.rank() != 2 || gv.rank() != 1 || gv.dim(0) != xv.dim(1))
        throw ShapeError("rmsnorm shape mismatch: " + shape_str(xv.shape()) + " with gain " + shape_str(gv.shape()));
    const std::size_t rows = xv.dim(0), d = xv.dim(1);
    Tensor res(xv.shape(), xv.dtype());
    for (std::size_t r = 0; r < rows; ++r)
        kernels::rmsnorm_row(xv.data().subspan(r * d, d), gv.data(), res.data().subspan(r * d, d));
    project(res.data(), res.dtype());
    Var out = push(std::move(res), any_requires_grad({x, gain}));
    if (!slots_[out.id].requires_grad) return out;
    record("rmsnorm", out, [x, gain, out, rows, d](Tape& t) {
        auto dy = t.grad_in(out.id);
        auto xd = t.slots_[x.id].value.data();
        auto gd = t.slots_[gain.id].value.data();
        const bool need_x = t.slots_[x.id].requires_grad;
        const bool need_g = t.slots_[gain.id].requires_grad;
        std::span<float> dx = need_x ? t.grad_acc(x.id) : std::span<float>{};
        std::span<float> dg = need_g ? t.grad_acc(gain.id) : std::span<float>{};
        for (std::size_t r = 0; r < rows; ++r) {
            auto xr = xd.subspan(r * d, d);
            const float inv = kernels::rms_inv(xr);
            if (need_g)
                for (std::size_t i = 0; i < d; ++i) dg[i] += dy[r * d + i] * xr[i] * inv;
            if (need_x) {
                float dot = 0.0f;
                for (std::size_t i = 0; i < d; ++i) dot += dy[r * d + i] * gd[i] * xr[i];
                const float coef = inv * inv * inv * dot / static_cast<float>(d);
                for (std::size_t i = 0; i < d; ++i)
                    dx[r * d + i] += inv * gd[i] * dy[r * d + i] - xr[i] * coef;
            }
        }
    });
    return out;
}

Var Tape::embedding(Var table, std::span<const std::int32_t> ids) {
    const Tensor& tv = value(table);
    if (tv.rank() != 2) throw ShapeError("embedding table must be rank 2, got " + shape_str(tv.shape()));
    const std::size_t vocab = tv.dim(0), d = tv.dim(1);
    Tensor res({ids.size(), d}, tv.dtype());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab)
            throw InputError("token id " + std::to_string(ids[i]) + " at position " + std::to_string(i) +
                             " is outside vocabulary of size " + std::to_string(vocab));
        std::copy_n(tv.data().begin() + static_cast<std::ptrdiff_t>(ids[i] * d), d,
                    res.data().begin() + static_cast<std::ptrdiff_t>(i * d));
    }
    Var out = push(std::move(res), any_requires_grad({table}));
    if (!slots_[out.id].requires_grad) return out;
    std::vector<std::int32_t> saved(ids.begin(), ids.end());
    record("embedding", out, [table, out, d, saved = std::move(saved)](Tape& t) {
        auto dy = t.grad_in(out.id);
        auto dt = t.grad_acc(table.id);
        for (std::size_t i = 0; i < saved.size(); ++i)
            for (std::size_t c = 0; c < d; ++c) dt[static_cast<std::size_t>(saved[i]) * d + c] += dy[i * d + c];
    });
    return out;
}

Var Tape::gelu(Var x) {
    const Tensor& xv = value(x);
    Tensor res(xv.shape(), xv.dtype());
    for (std::size_t i = 0; i < xv.numel(); ++i) res.data()[i] = kernels::gelu_tanh(xv.data()[i]);
    project(res.data(), res.dtype());
    Var out = push(std::move(res), any_requires_grad({x}));
    if (!slots_[out.id].requires_grad) return out;
    record("gelu", out, [x, out](Tape& t) {
        auto dy = t.grad_in(out.id);
        auto xd = t.slots_[x.id].value.data();
        auto dx = t.grad_acc(x.id);
        for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] * kernels::gelu_tanh_grad(xd[i]);
    });
    return out;
}

Var Tape::transpose(Var x) {
    Var out = push(kdflow::transpose(value(x)), any_requires_grad({x}));
    if (!slots_[out.id].requires_grad) return out;
    const std::size_t rows = value(x).dim(0), cols = value(x).dim(1);
    record("transpose", out, [x, out, rows, cols](Tape& t) {
        auto dy = t.grad_in(out.id);
        auto dx = t.grad_acc(x.id);
        for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < cols; ++j) dx[i * cols + j] += dy[j * rows + i];
    });
    return out;
}

Var Tape::causal_attention(Var q, Var k, Var v, std::size_t batch, std::size_t seq, std::size_t n_heads) {
    const Tensor& qv = value(q);
    const Tensor& kv = value(k);
    const Tensor& vv = value(v);
    if (qv.rank() != 2 || qv.shape() != kv.shape() || qv.shape() != vv.shape() || qv.dim(0) != batch * seq)
        throw ShapeError("attention expects q, k, v of shape [batch*seq, d], got " + shape_str(qv.shape()));
    const std::size_t d = qv.dim(1);
    if (n_heads == 0 || d % n_heads != 0) throw ShapeError("attention width not divisible by head count");
    const bool needs_grad = any_requires_grad({q, k, v});

    // probs for (b, t, h, j<=t) packed per (b, t) row with stride n_heads * seq.
    auto probs = std::make_shared<std::vector<float>>(needs_grad ? batch * seq * n_heads * seq : 0);
    Tensor res(qv.shape(), qv.dtype());
    for (std::size_t b = 0; b < batch; ++b) {
        auto keys = kv.data().subspan(b * seq * d, seq * d);
        auto vals = vv.data().subspan(b * seq * d, seq * d);
        for (std::size_t t = 0; t < seq; ++t) {
            const std::size_t row = b * seq + t;
            std::span<float> p = needs_grad
                ? std::span<float>(probs->data() + row * n_heads * seq, n_heads * (t + 1))
                : std::span<float>{};
            kernels::attention_row(qv.data().subspan(row * d, d), keys, vals, t, d, n_heads, p,
                                   res.data().subspan(row * d, d));
        }
    }
    project(res.data(), res.dtype());
    Var out = push(std::move(res), needs_grad);
    if (!needs_grad) return out;

    record("causal_attention", out, [q, k, v, out, batch, seq, n_heads, d, probs](Tape& t) {
        const std::size_t hd = d / n_heads;
        const float scale = 1.0f / std::sqrt(static_cast<float>(hd));
        auto dy = t.grad_in(out.id);
        auto qd = t.slots_[q.id].value.data();
        auto kd = t.slots_[k.id].value.data();
        auto vd = t.slots_[v.id].value.data();
        std::vector<float> dq(qd.size(), 0.0f), dk(kd.size(), 0.0f), dv(vd.size(), 0.0f);
        std::vector<float> dp(seq);
        for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t tt = 0; tt < seq; ++tt) {
                const std::size_t row = b * seq + tt;
                const float* prow = probs->data() + row * n_heads * seq;
                for (std::size_t h = 0; h < n_heads; ++h) {
                    const std::size_t c0 = h * hd;
                    const float* p = prow + h * (tt + 1);
                    const float* dyr = dy.data() + row * d + c0;
                    float dot = 0.0f;
                    for (std::size_t j = 0; j <= tt; ++j) {
                        const std::size_t jr = b * seq + j;
                        float s = 0.0f;
                        for (std::size_t c = 0; c < hd; ++c) {
                            s += dyr[c] * vd[jr * d + c0 + c];
                            dv[jr * d + c0 + c] += p[j] * dyr[c];
                        }
                        dp[j] = s;
                        dot += p[j] * s;
                    }
                    for (std::size_t j = 0; j <= tt; ++j) {
                        const std::size_t jr = b * seq + j;
                        const float ds = p[j] * (dp[j] - dot) * scale;
                        for (std::size_t c = 0; c < hd; ++c) {
                            dq[row * d + c0 + c] += ds * kd[jr * d + c0 + c];
                            dk[jr * d + c0 + c] += ds * qd[row * d + c0 + c];
                        }
                    }
                }
            }
        }
        auto flush = [&t](Var target, const std::vector<float>& g) {
            if (!t.slots_[target.id].requires_grad) return;
            auto acc = t.grad_acc(target.id);
            for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i];
        };
        flush(q, dq);
        flush(k, dk);
        flush(v, dv);
    });
    return out;
}

}  // namespace kdflow
