#pragma once

#include <cmath>

#include "locseg/tensor.hpp"

namespace locseg {

struct SgdOptions {
    double lr = 0.01;
    double momentum = 0.99;
    double weight_decay = 3e-5;
    bool nesterov = true;
};

/// SGD with optional Nesterov momentum; velocity buffers are owned here and
/// keyed by parameter position.
template <typename T>
class Sgd {
public:
    explicit Sgd(std::vector<Tensor<T>> params, SgdOptions opts = {}) : params_(std::move(params)), opts_(opts) {
        for (const auto& p : params_) velocity_.emplace_back(p.numel(), T(0));
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    /// One update at learning rate `lr`. Parameters without a grad are skipped.
    void step(double lr) {
        const T mu = static_cast<T>(opts_.momentum), wd = static_cast<T>(opts_.weight_decay), rate = static_cast<T>(lr);
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto& p = params_[i];
            if (!p.has_grad()) continue;
            auto& w = p.data();
            const auto& g = p.grad();
            auto& v = velocity_[i];
            for (std::size_t j = 0; j < w.size(); ++j) {
                const T grad = g[j] + wd * w[j];
                if (mu == T(0)) {
                    w[j] -= rate * grad;
                    continue;
                }
                v[j] = mu * v[j] + grad;
                w[j] -= rate * (opts_.nesterov ? grad + mu * v[j] : v[j]);
            }
        }
    }

    void step() { step(opts_.lr); }

    const SgdOptions& options() const { return opts_; }

private:
    std::vector<Tensor<T>> params_;
    SgdOptions opts_;
    std::vector<std::vector<T>> velocity_;
};

/// Convenience single update, matching a fresh optimizer with no momentum history.
template <typename T>
void sgd_step(std::vector<Tensor<T>> params, double lr, double momentum = 0.0, double weight_decay = 0.0) {
    Sgd<T> opt(std::move(params), SgdOptions{lr, momentum, weight_decay, true});
    opt.step(lr);
}

/// lr * (1 - iter/max_iter)^exponent
inline double poly_lr(double base_lr, std::size_t iter, std::size_t max_iter, double exponent = 0.9) {
    if (max_iter == 0) return base_lr;
    const double frac = 1.0 - static_cast<double>(iter) / static_cast<double>(max_iter);
    return base_lr * std::pow(std::max(frac, 0.0), exponent);
}

}  // namespace locseg
