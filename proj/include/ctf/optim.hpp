#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "ctf/error.hpp"
#include "ctf/tensor.hpp"

namespace ctf {

// AdamW with decoupled weight decay and a global-norm gradient clip applied
// before the moment updates.
template <typename S>
struct AdamWStateT {
    S beta1 = S(0.9);
    S beta2 = S(0.95);
    S weight_decay = S(0.05);
    S max_grad_norm = S(1.0);
    S eps = S(1e-8);
    int64_t step = 0;
    std::vector<std::vector<S>> m;
    std::vector<std::vector<S>> v;

    void init(const std::vector<TensorT<S>*>& params) {
        m.clear();
        v.clear();
        for (const TensorT<S>* p : params) {
            m.emplace_back(static_cast<size_t>(p->numel()), S(0));
            v.emplace_back(static_cast<size_t>(p->numel()), S(0));
        }
        step = 0;
    }
};

using AdamWState = AdamWStateT<float>;

template <typename S>
S global_grad_norm(const std::vector<std::vector<S>>& grads) {
    double sq = 0.0;
    for (const auto& g : grads) {
        for (S v : g) sq += static_cast<double>(v) * static_cast<double>(v);
    }
    return static_cast<S>(std::sqrt(sq));
}

// Mutates params in place; grads are consumed as-is (clip handled internally).
template <typename S>
S adamw_step(const std::vector<TensorT<S>*>& params, std::vector<std::vector<S>>& grads,
             AdamWStateT<S>& state, S lr) {
    check(params.size() == grads.size(), ErrKind::shape,
          "adamw_step: params/grads count mismatch");
    if (state.m.size() != params.size()) state.init(params);
    for (size_t i = 0; i < params.size(); ++i) {
        check(static_cast<size_t>(params[i]->numel()) == grads[i].size(), ErrKind::shape,
              "adamw_step: grad shape mismatch for parameter " + std::to_string(i));
    }

    const S norm = global_grad_norm(grads);
    if (state.max_grad_norm > S(0) && norm > state.max_grad_norm) {
        const S shrink = state.max_grad_norm / norm;
        for (auto& g : grads) {
            for (S& v : g) v *= shrink;
        }
    }

    state.step += 1;
    const S bc1 = S(1) - std::pow(state.beta1, static_cast<S>(state.step));
    const S bc2 = S(1) - std::pow(state.beta2, static_cast<S>(state.step));
    for (size_t i = 0; i < params.size(); ++i) {
        S* w = params[i]->ptr();
        const S* g = grads[i].data();
        S* mi = state.m[i].data();
        S* vi = state.v[i].data();
        const size_t n = grads[i].size();
        for (size_t j = 0; j < n; ++j) {
            mi[j] = state.beta1 * mi[j] + (S(1) - state.beta1) * g[j];
            vi[j] = state.beta2 * vi[j] + (S(1) - state.beta2) * g[j] * g[j];
            const S m_hat = mi[j] / bc1;
            const S v_hat = vi[j] / bc2;
            w[j] -= lr * state.weight_decay * w[j];
            w[j] -= lr * m_hat / (std::sqrt(v_hat) + state.eps);
        }
    }
    return norm;
}

// Cosine annealing from lr_init to lr_final; steps past the horizon clamp to lr_final.
inline double cosine_lr(int64_t step, int64_t total_steps, double lr_init, double lr_final) {
    check(step >= 0, ErrKind::param, "cosine_lr: step must be non-negative");
    check(total_steps > 0, ErrKind::param, "cosine_lr: total_steps must be positive");
    if (step > total_steps) return lr_final;
    const double progress = static_cast<double>(step) / static_cast<double>(total_steps);
    return lr_final + 0.5 * (lr_init - lr_final) * (1.0 + std::cos(3.14159265358979323846 * progress));
}

}  // namespace ctf
