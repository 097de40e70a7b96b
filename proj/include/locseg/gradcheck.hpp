// Central-difference verification of autodiff gradients.
#pragma once

#include <cmath>
#include <functional>

#include "locseg/tensor.hpp"

namespace locseg {

struct GradCheckResult {
    double max_relative_error = 0.0;
    std::size_t worst_input = 0;
    std::size_t worst_index = 0;
    double analytic_at_worst = 0.0;
    double numeric_at_worst = 0.0;
    std::size_t coordinates = 0;
};

/// Compares d f / d inputs from backward() against
/// (f(x+eps) - f(x-eps)) / (2 eps) for every coordinate of every input.
/// Relative error is |a - n| / max(|a|, |n|, 1e-8).
template <typename T>
GradCheckResult grad_check(const std::function<Tensor<T>(const std::vector<Tensor<T>>&)>& f,
                           std::vector<Tensor<T>> inputs, double eps) {
    for (auto& x : inputs) {
        if (!x.requires_grad()) x = Tensor<T>(x.shape(), x.data(), true);
        x.zero_grad();
    }
    backward(f(inputs));
    std::vector<std::vector<T>> analytic;
    for (auto& x : inputs) analytic.push_back(x.has_grad() ? x.grad() : std::vector<T>(x.numel(), T(0)));

    GradCheckResult r;
    NoGradGuard no_grad;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        auto& data = inputs[i].data();
        for (std::size_t j = 0; j < data.size(); ++j) {
            const T orig = data[j];
            data[j] = static_cast<T>(orig + eps);
            const T hi_x = data[j];
            const double hi = f(inputs).item();
            data[j] = static_cast<T>(orig - eps);
            const T lo_x = data[j];
            const double lo = f(inputs).item();
            data[j] = orig;
            // Divide by the perturbation actually representable in T.
            const double numeric = (hi - lo) / (static_cast<double>(hi_x) - static_cast<double>(lo_x));
            const double a = analytic[i][j];
            const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
            ++r.coordinates;
            if (err > r.max_relative_error) {
                r.max_relative_error = err;
                r.worst_input = i;
                r.worst_index = j;
                r.analytic_at_worst = a;
                r.numeric_at_worst = numeric;
            }
        }
    }
    return r;
}

}  // namespace locseg
