#pragma once

#include "model.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

namespace tdvit {

/// AdamW state: first/second moments per parameter plus hyperparameters.
template <typename T>
struct OptimState {
    std::vector<std::vector<T>> m, v;
    std::size_t step = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.05;
};

/// One bias-corrected Adam update with decoupled weight decay:
/// p ← p − lr·(m̂/(√v̂ + eps)) − lr·wd·p. Parameters whose name is exempt
/// (see is_decay_exempt) skip the decay term.
template <typename T>
void adamw_step(const std::vector<NamedTensor<T>>& params, const std::vector<std::vector<T>>& grads,
                OptimState<T>& state, double lr) {
    if (grads.size() != params.size()) throw std::invalid_argument("adamw_step: gradient count differs from parameters");
    if (state.m.empty()) {
        for (const auto& p : params) {
            state.m.emplace_back(p.tensor->size(), T(0));
            state.v.emplace_back(p.tensor->size(), T(0));
        }
    }
    for (std::size_t k = 0; k < params.size(); ++k) {
        if (grads[k].size() != params[k].tensor->size() || state.m[k].size() != grads[k].size()) {
            throw std::invalid_argument("adamw_step: shape mismatch for '" + params[k].name + "'");
        }
        for (T g : grads[k]) {
            if (!std::isfinite(g)) throw std::runtime_error("adamw_step: non-finite gradient in '" + params[k].name + "'");
        }
    }
    ++state.step;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto& values = params[k].tensor->values();
        auto& m = state.m[k];
        auto& v = state.v[k];
        const double wd = is_decay_exempt(params[k].name) ? 0.0 : state.weight_decay;
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double g = grads[k][i];
            m[i] = static_cast<T>(state.beta1 * m[i] + (1.0 - state.beta1) * g);
            v[i] = static_cast<T>(state.beta2 * v[i] + (1.0 - state.beta2) * g * g);
            const double m_hat = m[i] / bc1, v_hat = v[i] / bc2;
            const double p = values[i];
            values[i] = static_cast<T>(p - lr * (m_hat / (std::sqrt(v_hat) + state.eps)) - lr * wd * p);
        }
    }
}

/// Rescales gradients so their global L2 norm is at most `max_norm`; returns the norm before clipping.
template <typename T>
double clip_grad_norm(std::vector<std::vector<T>>& grads, double max_norm) {
    double sq = 0.0;
    for (const auto& g : grads)
        for (T x : g) sq += static_cast<double>(x) * static_cast<double>(x);
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const double f = max_norm / norm;
        for (auto& g : grads)
            for (auto& x : g) x = static_cast<T>(x * f);
    }
    return norm;
}

struct ScheduleConfig {
    std::size_t warmup_steps = 0;
    std::size_t total_steps = 1;
    double lr_base = 3e-4;
    double lr_min = 0.0;

    void validate() const {
        if (warmup_steps >= total_steps) throw std::invalid_argument("schedule: warmup_steps must be < total_steps");
        if (lr_min > lr_base) throw std::invalid_argument("schedule: lr_min exceeds lr_base");
    }
};

/// Linear warmup to lr_base, then a single cosine decay to lr_min.
inline double lr_at(std::size_t step, const ScheduleConfig& s) {
    s.validate();
    if (step > s.total_steps) {
        throw std::out_of_range("lr_at: step " + std::to_string(step) + " beyond total " + std::to_string(s.total_steps));
    }
    if (step < s.warmup_steps) return s.lr_base * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
    const double progress =
        static_cast<double>(step - s.warmup_steps) / static_cast<double>(s.total_steps - s.warmup_steps);
    return s.lr_min + 0.5 * (s.lr_base - s.lr_min) * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace tdvit
