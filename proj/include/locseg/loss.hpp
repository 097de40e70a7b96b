#pragma once

#include <cmath>
#include <cstdint>
#include <span>

#include "locseg/ops.hpp"

namespace locseg {

inline constexpr double kDiceSmooth = 1e-5;

struct LossTerms {
    double cross_entropy = 0.0;  // mean over voxels
    double dice_term = 0.0;      // 1 - mean foreground soft Dice
    double total() const { return cross_entropy + dice_term; }
};

namespace detail {

struct SoftmaxStats {
    std::vector<double> probs;  // N,K,S layout, same as logits
    LossTerms terms;
    // Per foreground class: intersection, sum of probabilities, reference count.
    std::vector<double> inter, psum, ysum;
};

template <typename T>
SoftmaxStats softmax_stats(const Shape& s, const std::vector<T>& logits, std::span<const std::uint8_t> target) {
    require(s.size() == 5, "dice_ce_loss: logits must be N,K,D,H,W, got " + shape_str(s));
    const std::size_t N = s[0], K = s[1], S = s[2] * s[3] * s[4];
    require(K >= 2, "dice_ce_loss: need at least 2 classes");
    require(target.size() == N * S, "dice_ce_loss: target has " + std::to_string(target.size()) +
                                        " labels, logits cover " + std::to_string(N * S) + " voxels");
    SoftmaxStats st;
    st.probs.resize(logits.size());
    st.inter.assign(K, 0.0);
    st.psum.assign(K, 0.0);
    st.ysum.assign(K, 0.0);
    double ce = 0.0;
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t v = 0; v < S; ++v) {
            const std::size_t base = n * K * S + v;
            double mx = logits[base];
            for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, static_cast<double>(logits[base + k * S]));
            double z = 0.0;
            for (std::size_t k = 0; k < K; ++k) z += std::exp(logits[base + k * S] - mx);
            const std::size_t t = target[n * S + v];
            require(t < K, "dice_ce_loss: label " + std::to_string(t) + " out of range for " + std::to_string(K) +
                               " classes");
            for (std::size_t k = 0; k < K; ++k) {
                const double p = std::exp(logits[base + k * S] - mx) / z;
                st.probs[base + k * S] = p;
                st.psum[k] += p;
                if (k == t) st.inter[k] += p;
            }
            st.ysum[t] += 1.0;
            ce -= (logits[base + t * S] - mx) - std::log(z);
        }
    st.terms.cross_entropy = ce / static_cast<double>(N * S);
    double dice_mean = 0.0;
    for (std::size_t k = 1; k < K; ++k)
        dice_mean += (2.0 * st.inter[k] + kDiceSmooth) / (st.psum[k] + st.ysum[k] + kDiceSmooth);
    st.terms.dice_term = 1.0 - dice_mean / static_cast<double>(K - 1);
    return st;
}

}  // namespace detail

/// Both loss terms without building a graph.
template <typename T>
LossTerms dice_ce_terms(const Tensor<T>& logits, std::span<const std::uint8_t> target) {
    return detail::softmax_stats(logits.shape(), logits.data(), target).terms;
}

/// Cross-entropy plus (1 - soft Dice) averaged over foreground classes.
/// Dice sums are pooled over the whole batch.
template <typename T>
Tensor<T> dice_ce_loss(const Tensor<T>& logits, std::span<const std::uint8_t> target) {
    auto st = std::make_shared<detail::SoftmaxStats>(detail::softmax_stats(logits.shape(), logits.data(), target));
    auto labels = std::make_shared<std::vector<std::uint8_t>>(target.begin(), target.end());
    const Shape s = logits.shape();
    return detail::make_result<T>(
        Shape{}, {static_cast<T>(st->terms.total())}, {logits}, [st, labels, s](detail::Node<T>& self) {
            const std::size_t N = s[0], K = s[1], S = s[2] * s[3] * s[4];
            const double upstream = self.grad[0];
            const double inv_vox = 1.0 / static_cast<double>(N * S);
            const double inv_fg = 1.0 / static_cast<double>(K - 1);
            // d(dice_term)/dp_k(v) = -(2 y den - num) / den^2 / (K-1)
            std::vector<double> a(K, 0.0), c(K, 0.0);
            for (std::size_t k = 1; k < K; ++k) {
                const double den = st->psum[k] + st->ysum[k] + kDiceSmooth;
                const double num = 2.0 * st->inter[k] + kDiceSmooth;
                a[k] = -2.0 * inv_fg / den;
                c[k] = inv_fg * num / (den * den);
            }
            auto& g = self.parents[0]->ensure_grad();
            std::vector<double> dp(K);
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t v = 0; v < S; ++v) {
                    const std::size_t base = n * K * S + v;
                    const std::size_t t = (*labels)[n * S + v];
                    double dot = 0.0;
                    for (std::size_t k = 0; k < K; ++k) {
                        dp[k] = (k == t ? a[k] : 0.0) + c[k];
                        dot += dp[k] * st->probs[base + k * S];
                    }
                    for (std::size_t k = 0; k < K; ++k) {
                        const double p = st->probs[base + k * S];
                        const double dce = (p - (k == t ? 1.0 : 0.0)) * inv_vox;
                        g[base + k * S] += static_cast<T>(upstream * (dce + p * (dp[k] - dot)));
                    }
                }
        });
}

}  // namespace locseg
