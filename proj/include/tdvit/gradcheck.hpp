#pragma once

#include "tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace tdvit {

struct GradCheckReport {
    double max_relative_error = 0.0;
    /// Worst relative error per parameter, in the order the parameters were given.
    std::vector<double> per_parameter;
    std::size_t coordinates_checked = 0;
};

// Central differences at eps 1e-5 carry ~1e-11 absolute roundoff on O(1) losses,
// so gradients below 1e-6 are compared on an absolute footing.
inline double relative_error(double fd, double ad) {
    return std::abs(fd - ad) / std::max({std::abs(fd), std::abs(ad), 1e-6});
}

/// Compares reverse-mode gradients of `loss_fn` against central differences.
///
/// `loss_fn` must rebuild its graph from the current values of `params` on every
/// call; parameters are perturbed in place and restored afterwards.
template <typename T>
GradCheckReport finite_difference_check(const std::function<Tensor<T>()>& loss_fn, std::vector<Tensor<T>> params,
                                        double eps = 1e-5) {
    if (!(eps > 0.0)) throw std::invalid_argument("finite_difference_check: eps must be positive");

    for (auto& p : params) {
        p.set_requires_grad(true);
        p.zero_grad();
    }
    const Tensor<T> loss = loss_fn();
    const T base = loss.item();
    {
        NoGradGuard no_grad;
        if (loss_fn().item() != base) {
            throw std::runtime_error("finite_difference_check: loss function is not deterministic");
        }
    }
    backward(loss);

    GradCheckReport report;
    report.per_parameter.assign(params.size(), 0.0);
    NoGradGuard no_grad;
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto& p = params[k];
        const std::vector<T> analytic(p.grad().begin(), p.grad().end());
        auto& values = p.values();
        for (std::size_t i = 0; i < values.size(); ++i) {
            const T saved = values[i];
            values[i] = saved + T(eps);
            const double up = loss_fn().item();
            values[i] = saved - T(eps);
            const double down = loss_fn().item();
            values[i] = saved;
            const double fd = (up - down) / (2.0 * eps);
            const double err = relative_error(fd, static_cast<double>(analytic[i]));
            report.per_parameter[k] = std::max(report.per_parameter[k], err);
            ++report.coordinates_checked;
        }
        report.max_relative_error = std::max(report.max_relative_error, report.per_parameter[k]);
    }
    return report;
}

}  // namespace tdvit
