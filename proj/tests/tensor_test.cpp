#include <gtest/gtest.h>

#include <cmath>

#include "locseg/gradcheck.hpp"
#include "locseg/ops.hpp"
#include "locseg/optim.hpp"
#include "test_util.hpp"

using namespace locseg;
using locseg::test::random_tensor;
using locseg::test::random_tensor_off_kink;

TEST(Tensor, RejectsDataShapeMismatch) {
    EXPECT_THROW(Tensorf(Shape{2, 3}, std::vector<float>(5)), ShapeError);
    Tensorf t(Shape{2, 3}, std::vector<float>(6, 1.0f));
    EXPECT_EQ(t.numel(), 6u);
    EXPECT_FALSE(t.has_grad());
}

TEST(Elementwise, SigmoidReluLeaky) {
    EXPECT_FLOAT_EQ(sigmoid(Tensorf::scalar(0.0f)).item(), 0.5f);
    EXPECT_FLOAT_EQ(relu(Tensorf::scalar(-3.0f)).item(), 0.0f);
    EXPECT_FLOAT_EQ(relu(Tensorf::scalar(3.0f)).item(), 3.0f);
    EXPECT_FLOAT_EQ(leaky_relu(Tensorf::scalar(-2.0f)).item(), -0.02f);
    EXPECT_FLOAT_EQ(leaky_relu(Tensorf::scalar(-2.0f), 0.2f).item(), -0.4f);
}

TEST(Elementwise, MulByOnesIsIdentity) {
    std::mt19937_64 rng(1);
    auto x = random_tensor<float>({2, 3, 4}, rng);
    auto y = mul(x, Tensorf::full(x.shape(), 1.0f));
    EXPECT_EQ(y.data(), x.data());
    EXPECT_THROW(mul(x, Tensorf::zeros({2, 3})), ShapeError);
}

TEST(InstanceNorm, ConstantInputGivesZeros) {
    auto x = Tensorf::full({1, 2, 2, 2, 2}, 3.5f);
    auto y = instance_norm(x, Tensorf::full({2}, 1.0f), Tensorf::zeros({2}));
    for (float v : y.data()) EXPECT_EQ(v, 0.0f);
}

TEST(InstanceNorm, ZeroGammaGivesBeta) {
    std::mt19937_64 rng(2);
    auto x = random_tensor<float>({2, 3, 2, 2, 2}, rng);
    auto y = instance_norm(x, Tensorf::zeros({3}), Tensorf::full({3}, 0.75f));
    for (float v : y.data()) EXPECT_EQ(v, 0.75f);
}

TEST(InstanceNorm, TwoValueClosedForm) {
    // mean 1, biased variance 1 -> (x - 1) / sqrt(1 + eps)
    Tensord x(Shape{1, 1, 2}, {0.0, 2.0});
    auto y = instance_norm(x, Tensord::full({1}, 1.0), Tensord::zeros({1}));
    const double expected = 1.0 / std::sqrt(1.0 + 1e-5);
    EXPECT_NEAR(y.data()[0], -expected, 1e-12);
    EXPECT_NEAR(y.data()[1], expected, 1e-12);
    EXPECT_NEAR(y.data()[1], 1.0, 1e-5);
}

TEST(PoolAvg, OnesAndKeepAxes) {
    auto ones = pool_avg_over_axes(Tensorf::full({2, 3, 4, 5, 6}, 1.0f), Axis::H);
    EXPECT_EQ(ones.shape(), (Shape{2, 3, 5}));
    for (float v : ones.data()) EXPECT_FLOAT_EQ(v, 1.0f);

    Tensorf ab(Shape{1, 1, 2, 1, 1}, {4.0f, -1.5f});
    EXPECT_EQ(pool_avg_over_axes(ab, Axis::D).data(), (std::vector<float>{4.0f, -1.5f}));

    std::vector<float> iota(8);
    for (int i = 0; i < 8; ++i) iota[i] = float(i);
    Tensorf x(Shape{1, 1, 2, 2, 2}, iota);
    // W=0 holds {0,2,4,6}, W=1 holds {1,3,5,7}
    EXPECT_EQ(pool_avg_over_axes(x, Axis::W).data(), (std::vector<float>{3.0f, 4.0f}));
    EXPECT_EQ(pool_avg_over_axes(x, Axis::H).data(), (std::vector<float>{2.5f, 4.5f}));
    EXPECT_EQ(pool_avg_over_axes(x, Axis::D).data(), (std::vector<float>{1.5f, 5.5f}));
}

TEST(MaxPool, ConstantAndBlockMax) {
    auto c = max_pool3d(Tensorf::full({1, 2, 4, 6, 2}, 2.0f));
    EXPECT_EQ(c.shape(), (Shape{1, 2, 2, 3, 1}));
    for (float v : c.data()) EXPECT_EQ(v, 2.0f);
    std::vector<float> iota(8);
    for (int i = 0; i < 8; ++i) iota[i] = float(i);
    EXPECT_EQ(max_pool3d(Tensorf(Shape{1, 1, 2, 2, 2}, iota)).data(), std::vector<float>{7.0f});
}

TEST(BroadcastMul, GateSemantics) {
    std::mt19937_64 rng(3);
    auto f = random_tensor<float>({2, 3, 4, 3, 2}, rng);
    EXPECT_EQ(broadcast_mul(Tensorf::full({2, 3, 3}, 1.0f), f, Axis::H).data(), f.data());
    auto zeroed = broadcast_mul(Tensorf::zeros({2, 3, 2}), f, Axis::W);
    for (float v : zeroed.data()) EXPECT_EQ(v, 0.0f);

    Tensorf ab(Shape{1, 1, 2, 1, 1}, {3.0f, 5.0f});
    Tensorf gate(Shape{1, 1, 2}, {1.0f, 2.0f});
    EXPECT_EQ(broadcast_mul(gate, ab, Axis::D).data(), (std::vector<float>{3.0f, 10.0f}));
    EXPECT_THROW(broadcast_mul(gate, f, Axis::D), ShapeError);
}

TEST(ConcatSlice, RoundTripAlongChannels) {
    std::mt19937_64 rng(4);
    auto a = random_tensor<float>({2, 1, 3}, rng);
    auto b = random_tensor<float>({2, 2, 3}, rng);
    auto c = concat<float>({a, b}, 1);
    EXPECT_EQ(c.shape(), (Shape{2, 3, 3}));
    EXPECT_EQ(slice(c, 1, 0, 1).data(), a.data());
    EXPECT_EQ(slice(c, 1, 1, 2).data(), b.data());
    EXPECT_THROW(concat<float>({a, Tensorf::zeros({3, 1, 3})}, 1), ShapeError);
    EXPECT_THROW(slice(c, 1, 2, 2), ShapeError);
}

TEST(Backward, SumAndSquare) {
    std::mt19937_64 rng(5);
    auto x = random_tensor<float>({3, 4}, rng, -1, 1, true);
    backward(sum(x));
    for (float g : x.grad()) EXPECT_EQ(g, 1.0f);
    x.zero_grad();
    backward(sum(mul(x, x)));
    for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_FLOAT_EQ(x.grad()[i], 2.0f * x.data()[i]);
}

TEST(Backward, EmptyGraphIsNoOp) {
    auto leaf = Tensorf::scalar(2.0f);
    EXPECT_NO_THROW(backward(leaf));
    EXPECT_FALSE(leaf.has_grad());
    EXPECT_THROW(backward(Tensorf::zeros({2})), ShapeError);
}

TEST(Backward, NoGradGuardSkipsRecording) {
    auto x = Tensorf::full({3}, 1.0f, true);
    NoGradGuard guard;
    auto y = sigmoid(x);
    EXPECT_FALSE(y.requires_grad());
}

TEST(Backward, LinearInLoss) {
    // grad(f + g) == grad f + grad g on a shared leaf.
    std::mt19937_64 rng(6);
    auto x = random_tensor<double>({2, 2, 3, 3, 3}, rng, -1, 1, true);
    auto f = [&] { return sum(mul(sigmoid(x), x)); };
    auto g = [&] { return sum(pool_avg_over_axes(mul(x, x), Axis::H)); };
    backward(f());
    auto gf = x.grad();
    x.zero_grad();
    backward(g());
    auto gg = x.grad();
    x.zero_grad();
    backward(add(f(), g()));
    for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(x.grad()[i], gf[i] + gg[i], 1e-12);
}

TEST(Backward, SharedSubexpressionAccumulates) {
    auto x = Tensord::full({4}, 0.3, true);
    auto s = sigmoid(x);
    backward(sum(add(s, s)));
    const double sg = 1.0 / (1.0 + std::exp(-0.3));
    for (double g : x.grad()) EXPECT_NEAR(g, 2.0 * sg * (1.0 - sg), 1e-12);
}

TEST(Sgd, PlainStep) {
    auto w = Tensorf::scalar(1.5f, true);
    w.mutable_grad()[0] = 0.25f;
    sgd_step<float>({w}, 1.0, 0.0, 0.0);
    EXPECT_FLOAT_EQ(w.item(), 1.25f);
}

TEST(Sgd, NesterovMatchesHandUnrolled) {
    auto w = Tensord::scalar(1.0, true);
    Sgd<double> opt({w}, SgdOptions{0.1, 0.9, 0.0, true});
    double v = 0.0, ref = 1.0;
    for (int i = 0; i < 3; ++i) {
        opt.zero_grad();
        w.mutable_grad()[0] = 2.0 * w.item();  // d/dw w^2
        const double g = 2.0 * ref;
        v = 0.9 * v + g;
        ref -= 0.1 * (g + 0.9 * v);
        opt.step();
        EXPECT_NEAR(w.item(), ref, 1e-14);
    }
}

TEST(Sgd, PolyDecay) {
    EXPECT_DOUBLE_EQ(poly_lr(0.01, 0, 100), 0.01);
    EXPECT_DOUBLE_EQ(poly_lr(0.01, 100, 100), 0.0);
    EXPECT_NEAR(poly_lr(1.0, 50, 100, 1.0), 0.5, 1e-15);
}

TEST(GradCheck, SigmoidFloat32) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        std::mt19937_64 rng(seed);
        auto x = random_tensor<float>({5}, rng, -2.0, 2.0);
        auto r = grad_check<float>([](const auto& in) { return sum(sigmoid(in[0])); }, {x}, 1e-3);
        EXPECT_LT(r.max_relative_error, 1e-3) << "seed " << seed;
    }
}

TEST(GradCheck, LinearIsExact) {
    std::mt19937_64 rng(7);
    auto x = random_tensor<double>({6}, rng);
    auto w = random_tensor<double>({6}, rng);
    auto r = grad_check<double>([&](const auto& in) { return sum(mul(in[0], w)); }, {x}, 1e-3);
    EXPECT_LT(r.max_relative_error, 1e-9);
}

TEST(GradCheck, DetectsWrongGradient) {
    // An op whose backward is deliberately off by a factor of two.
    auto bad = [](const Tensord& x) {
        return detail::make_result<double>(x.shape(), x.data(), {x}, [](detail::Node<double>& self) {
            auto& g = self.parents[0]->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += 2.0 * self.grad[i];
        });
    };
    std::mt19937_64 rng(8);
    auto r = grad_check<double>([&](const auto& in) { return sum(bad(in[0])); }, {random_tensor<double>({3}, rng)},
                                1e-6);
    EXPECT_GT(r.max_relative_error, 0.4);
}

TEST(Determinism, RepeatedForwardBackwardIsBitwise) {
    auto run = [] {
        std::mt19937_64 rng(9);
        auto x = random_tensor<float>({2, 3, 4, 4, 4}, rng, -1, 1, true);
        auto g = random_tensor<float>({3}, rng, 0.5, 1.5, true);
        auto y = leaky_relu(instance_norm(x, g, Tensorf::zeros({3}, true)));
        backward(sum(mul(y, y)));
        auto out = x.grad();
        out.insert(out.end(), g.grad().begin(), g.grad().end());
        return out;
    };
    EXPECT_EQ(run(), run());
}

TEST(GradCheck, SmallOps64Bit) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        std::mt19937_64 rng(100 + seed);
        std::uniform_int_distribution<std::size_t> ext(1, 4);
        const Shape s{ext(rng), ext(rng), ext(rng) + 1, ext(rng), ext(rng)};
        auto x = random_tensor_off_kink<double>(s, rng);
        auto proj = random_tensor<double>(s, rng);
        auto r = grad_check<double>([&](const auto& in) { return sum(mul(leaky_relu(in[0], 0.1), proj)); }, {x},
                                    1e-6);
        EXPECT_LT(r.max_relative_error, 1e-6) << "seed " << seed;
    }
}
