#include <gtest/gtest.h>

#include <cmath>

#include "locseg/gradcheck.hpp"
#include "locseg/loss.hpp"
#include "test_util.hpp"

using namespace locseg;

namespace {

// Independent scalar evaluation: softmax per voxel, mean CE, batch soft Dice.
double reference_loss(const std::vector<std::vector<double>>& logits_per_voxel, const std::vector<int>& target,
                      int K) {
    const double s = 1e-5;
    double ce = 0.0;
    std::vector<double> inter(K, 0), psum(K, 0), ysum(K, 0);
    for (std::size_t v = 0; v < target.size(); ++v) {
        double z = 0.0;
        for (int k = 0; k < K; ++k) z += std::exp(logits_per_voxel[v][k]);
        for (int k = 0; k < K; ++k) {
            const double p = std::exp(logits_per_voxel[v][k]) / z;
            psum[k] += p;
            if (k == target[v]) {
                inter[k] += p;
                ysum[k] += 1;
                ce -= std::log(p);
            }
        }
    }
    ce /= double(target.size());
    double dice = 0.0;
    for (int k = 1; k < K; ++k) dice += (2 * inter[k] + s) / (psum[k] + ysum[k] + s);
    return ce + 1.0 - dice / (K - 1);
}

}  // namespace

TEST(DiceCe, UniformLogitsTwoClasses) {
    auto logits = Tensord::zeros({1, 2, 2, 2, 1});
    std::vector<std::uint8_t> target{0, 1, 1, 0};
    auto terms = dice_ce_terms(logits, target);
    EXPECT_NEAR(terms.cross_entropy, std::log(2.0), 1e-12);
}

TEST(DiceCe, ConfidentCorrectApproachesZero) {
    std::vector<std::uint8_t> target{0, 2, 1, 2, 0, 1};
    std::vector<double> v(3 * target.size(), -30.0);
    for (std::size_t i = 0; i < target.size(); ++i) v[target[i] * target.size() + i] = 30.0;
    auto terms = dice_ce_terms(Tensord({1, 3, 1, 2, 3}, v), target);
    EXPECT_LT(terms.cross_entropy, 1e-20);
    EXPECT_LT(terms.dice_term, 1e-10);
}

TEST(DiceCe, TwoVoxelHandComputed) {
    // Voxel 0: logits (0, 1), label 1. Voxel 1: logits (1, 0), label 0.
    Tensord logits({1, 2, 1, 1, 2}, {0.0, 1.0, 1.0, 0.0});
    std::vector<std::uint8_t> target{1, 0};
    const double ref = reference_loss({{0.0, 1.0}, {1.0, 0.0}}, {1, 0}, 2);
    EXPECT_NEAR(dice_ce_loss(logits, target).item(), ref, 1e-12);
    // CE = -log(e/(1+e)), dice term = 1 - (2p+s)/(2+s) with p = e/(1+e)
    const double p = std::exp(1.0) / (1.0 + std::exp(1.0));
    EXPECT_NEAR(ref, -std::log(p) + 1.0 - (2 * p + 1e-5) / (2 + 1e-5), 1e-14);
    EXPECT_NEAR(ref, 0.58220, 1e-4);
}

TEST(DiceCe, RandomMatchesReference) {
    std::mt19937_64 rng(11);
    const std::size_t N = 2, K = 4, S = 6;
    auto logits = test::random_tensor<double>({N, K, 1, 2, 3}, rng, -3, 3);
    std::vector<std::uint8_t> target(N * S);
    std::uniform_int_distribution<int> cls(0, K - 1);
    for (auto& t : target) t = static_cast<std::uint8_t>(cls(rng));
    std::vector<std::vector<double>> per_voxel;
    std::vector<int> labels;
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t v = 0; v < S; ++v) {
            std::vector<double> l(K);
            for (std::size_t k = 0; k < K; ++k) l[k] = logits.data()[(n * K + k) * S + v];
            per_voxel.push_back(l);
            labels.push_back(target[n * S + v]);
        }
    EXPECT_NEAR(dice_ce_loss(logits, target).item(), reference_loss(per_voxel, labels, K), 1e-12);
}

TEST(DiceCe, Errors) {
    auto logits = Tensord::zeros({1, 2, 1, 1, 2});
    std::vector<std::uint8_t> short_target{0};
    EXPECT_THROW(dice_ce_loss(logits, short_target), ShapeError);
    std::vector<std::uint8_t> bad_label{0, 5};
    EXPECT_THROW(dice_ce_loss(logits, bad_label), ShapeError);
}

TEST(DiceCe, GradCheck) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        std::mt19937_64 rng(200 + seed);
        std::uniform_int_distribution<std::size_t> ext(1, 3);
        const std::size_t N = ext(rng), K = ext(rng) + 1;
        const Shape s{N, K, ext(rng), ext(rng), ext(rng)};
        std::vector<std::uint8_t> target(N * s[2] * s[3] * s[4]);
        std::uniform_int_distribution<int> cls(0, int(K) - 1);
        for (auto& t : target) t = static_cast<std::uint8_t>(cls(rng));
        auto r = grad_check<double>([&](const auto& in) { return dice_ce_loss(in[0], target); },
                                    {test::random_tensor<double>(s, rng, -2, 2)}, 1e-6);
        EXPECT_LT(r.max_relative_error, 1e-6) << "seed " << seed;
    }
}
