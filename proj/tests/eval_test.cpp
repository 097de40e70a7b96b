#include <gtest/gtest.h>

#include "locseg/sweep.hpp"
#include "test_util.hpp"

using namespace locseg;

namespace {

Labelmap random_labels(std::size_t n, std::size_t K, std::mt19937_64& rng) {
    std::uniform_int_distribution<int> d(0, int(K) - 1);
    Labelmap l(n);
    for (auto& x : l) x = static_cast<std::uint8_t>(d(rng));
    return l;
}

Volume flat_volume(const Index3& shape) {
    Volume v;
    v.shape = shape;
    v.intensities.assign(volume_of(shape), 0.5f);
    v.labels.assign(volume_of(shape), 0);
    v.bpr_map = {1.0, 0.0};
    return v;
}

}  // namespace

TEST(Dice, Examples) {
    const Labelmap a{1, 1, 1, 1, 0, 0}, b{1, 1, 0, 0, 1, 1};
    EXPECT_DOUBLE_EQ(dice(a, a, 1), 1.0);
    EXPECT_DOUBLE_EQ(dice(a, b, 1), 0.5);
    const Labelmap c{1, 1, 0, 0}, d{0, 0, 1, 1};
    EXPECT_DOUBLE_EQ(dice(c, d, 1), 0.0);
    EXPECT_DOUBLE_EQ(dice(c, d, 2), 1.0);  // absent from both
    EXPECT_THROW(dice(a, c, 1), std::invalid_argument);
}

TEST(Dice, MatchesCountingOracleOnRandomPairs) {
    std::mt19937_64 rng(5);
    std::uniform_int_distribution<std::size_t> len(1, 200), classes(2, 6);
    for (int t = 0; t < 1000; ++t) {
        const std::size_t n = len(rng), K = classes(rng);
        const auto p = random_labels(n, K, rng), r = random_labels(n, K, rng);
        for (std::size_t k = 0; k < K + 1; ++k) ASSERT_EQ(dice(p, r, k), test::dice_oracle(p, r, k)) << "trial " << t;
    }
}

TEST(Dice, SymmetricAndPermutationInvariant) {
    std::mt19937_64 rng(6);
    for (int t = 0; t < 100; ++t) {
        auto p = random_labels(64, 4, rng), r = random_labels(64, 4, rng);
        std::vector<std::size_t> perm(64);
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), rng);
        Labelmap pp(64), rp(64);
        for (std::size_t i = 0; i < 64; ++i) {
            pp[i] = p[perm[i]];
            rp[i] = r[perm[i]];
        }
        for (std::uint8_t k = 0; k < 4; ++k) {
            EXPECT_EQ(dice(p, r, k), dice(r, p, k));
            EXPECT_EQ(dice(p, r, k), dice(pp, rp, k));
        }
    }
}

TEST(DiceReport, MeanExcludesClassesAbsentFromBoth) {
    const Labelmap p{0, 1, 1, 0}, r{0, 1, 0, 0};
    const auto rep = dice_report(p, r, 4);
    ASSERT_EQ(rep.per_class.size(), 3u);
    EXPECT_DOUBLE_EQ(rep.per_class[0], 2.0 / 3.0);
    EXPECT_TRUE(rep.included[0]);
    EXPECT_FALSE(rep.included[1]);
    EXPECT_DOUBLE_EQ(rep.per_class[1], 1.0);
    EXPECT_DOUBLE_EQ(rep.mean, 2.0 / 3.0);
    EXPECT_TRUE(std::isnan(dice_report(Labelmap{0, 0}, Labelmap{0, 0}, 3).mean));
}

TEST(DiceReport, AggregateAveragesPerVolume) {
    const auto a = dice_report(Labelmap{1, 2}, Labelmap{1, 2}, 3);  // 1, 1
    const auto b = dice_report(Labelmap{1, 0}, Labelmap{0, 0}, 3);  // class 1: 0, class 2 excluded
    const auto agg = aggregate({a, b});
    EXPECT_DOUBLE_EQ(agg.per_class[0], 0.5);
    EXPECT_DOUBLE_EQ(agg.per_class[1], 1.0);
    EXPECT_DOUBLE_EQ(agg.mean, 0.5);  // (1 + 0) / 2
    EXPECT_EQ(agg.volumes, 2u);
}

TEST(SlidingWindow, WindowStarts) {
    EXPECT_EQ(window_starts(8, 4, 0.5), (std::vector<std::size_t>{0, 2, 4}));
    EXPECT_EQ(window_starts(8, 4, 0.0), (std::vector<std::size_t>{0, 4}));
    EXPECT_EQ(window_starts(10, 4, 0.0), (std::vector<std::size_t>{0, 4, 6}));
    EXPECT_EQ(window_starts(4, 4, 0.5), (std::vector<std::size_t>{0}));
    EXPECT_THROW(window_starts(3, 4, 0.5), std::invalid_argument);
    EXPECT_THROW(window_starts(8, 4, 1.0), std::invalid_argument);
}

TEST(SlidingWindow, SingleWindowEqualsForwardArgmax) {
    ModelConfig c;
    c.base_channels = 4;
    c.depth = 2;
    c.location_mode = LocationMode::coordconv;
    const auto m = build_model<float>(c, 2);
    auto v = flat_volume({8, 8, 8});
    std::mt19937_64 rng(3);
    std::normal_distribution<float> nd;
    for (auto& x : v.intensities) x = nd(rng);
    const auto loc = make_location(v, {0, 0, 0}, v.shape);
    Tensor<float> logits;
    {
        NoGradGuard g;
        logits = forward(m, Tensor<float>(Shape{1, 1, 8, 8, 8}, v.intensities), loc);
    }
    EXPECT_EQ(sliding_window_predict(m, v, v.shape), argmax_labels(logits.data(), 3));
}

TEST(SlidingWindow, ConstantLogitsGiveConstantLabels) {
    const auto v = flat_volume({12, 10, 9});
    auto predict = [](const Tensor<float>& x, std::span<const PatchLocation>) {
        const std::size_t P = x.numel() / x.size(0);
        std::vector<float> out;
        for (std::size_t n = 0; n < x.size(0); ++n)
            for (float k : {0.1f, 0.7f, 0.3f}) out.insert(out.end(), P, k);
        return Tensor<float>(Shape{x.size(0), 3, x.size(2), x.size(3), x.size(4)}, std::move(out));
    };
    for (double overlap : {0.0, 0.25, 0.5}) {
        const auto labels = argmax_labels(sliding_window_logits(predict, v, {4, 4, 4}, 3, {overlap, 0.0, 3}), 3);
        EXPECT_TRUE(std::all_of(labels.begin(), labels.end(), [](auto l) { return l == 1; }));
    }
}

TEST(SlidingWindow, TwoHalfOverlappingWindowsAverage) {
    // Extent 6 along W with patch 4 and overlap 0.5 gives windows at 0 and 2.
    // Class 0 scores 2 everywhere; class 1 scores 1 in the first window, 4 in the second.
    const auto v = flat_volume({1, 1, 6});
    auto predict = [](const Tensor<float>& x, std::span<const PatchLocation> locs) {
        std::vector<float> out;
        for (const auto& l : locs) {
            out.insert(out.end(), 4, 2.0f);
            out.insert(out.end(), 4, l.origin[2] == 0 ? 1.0f : 4.0f);
        }
        return Tensor<float>(Shape{x.size(0), 2, 1, 1, 4}, std::move(out));
    };
    const auto s = sliding_window_logits(predict, v, {1, 1, 4}, 2, {0.5, 0.0, 1});
    EXPECT_EQ(s, (std::vector<float>{2, 2, 2, 2, 2, 2, 1, 1, 2.5f, 2.5f, 4, 4}));
    EXPECT_EQ(argmax_labels(s, 2), (Labelmap{0, 0, 1, 1, 1, 1}));
}

TEST(SlidingWindow, ZeroOverlapPartitionsTheVolume) {
    const auto v = flat_volume({8, 12, 4});
    const Index3 patch{4, 4, 4};
    std::vector<int> hits(v.voxels(), 0);
    auto predict = [&](const Tensor<float>& x, std::span<const PatchLocation> locs) {
        for (const auto& l : locs)
            for (std::size_t d = 0; d < 4; ++d)
                for (std::size_t h = 0; h < 4; ++h)
                    for (std::size_t w = 0; w < 4; ++w) ++hits[v.index(l.origin[0] + d, l.origin[1] + h, l.origin[2] + w)];
        return Tensor<float>::zeros({x.size(0), 2, 4, 4, 4});
    };
    sliding_window_logits(predict, v, patch, 2, {0.0, 0.0, 5});
    EXPECT_TRUE(std::all_of(hits.begin(), hits.end(), [](int h) { return h == 1; }));
}

TEST(SlidingWindow, PassesShiftedLocations) {
    const auto v = flat_volume({8, 4, 4});
    std::vector<double> seen;
    auto predict = [&](const Tensor<float>& x, std::span<const PatchLocation> locs) {
        for (const auto& l : locs) seen.push_back(l.shift_fraction);
        return Tensor<float>::zeros({x.size(0), 2, 4, 4, 4});
    };
    sliding_window_logits(predict, v, {4, 4, 4}, 2, {0.0, 0.25, 4});
    ASSERT_EQ(seen.size(), 2u);
    EXPECT_EQ(seen, (std::vector<double>{0.25, 0.25}));
}

namespace {

std::vector<Volume> tiny_dataset(std::uint64_t seed) {
    SyntheticConfig sc;
    sc.volume_shape = {16, 16, 16};
    sc.blob_radius_min = 2;
    sc.blob_radius_max = 3;
    sc.blobs_per_class = 1;
    sc.num_volumes = 2;
    sc.seed = seed;
    return generate(sc);
}

}  // namespace

TEST(ShiftSweep, FractionZeroEqualsPlainEvaluation) {
    ModelConfig c;
    c.base_channels = 4;
    c.depth = 2;
    c.location_mode = LocationMode::locbam;
    auto m = build_model<float>(c, 1);
    std::mt19937_64 rng(9);
    auto fuse = m.param("locbam.fuse.weight");
    for (auto& x : fuse.data()) x = std::normal_distribution<float>(0, 0.3f)(rng);
    const auto vols = tiny_dataset(4);
    const auto sweep = shift_sweep(m, vols, {8, 8, 8});
    ASSERT_EQ(sweep.cells.size(), 7u);
    const auto plain = evaluate(m, vols, {8, 8, 8}).summary;
    EXPECT_EQ(sweep.cells[0].report.per_class, plain.per_class);
    EXPECT_EQ(std::memcmp(&sweep.cells[0].report.mean, &plain.mean, sizeof(double)), 0);
    std::vector<double> fr;
    for (const auto& cell : sweep.cells) fr.push_back(cell.shift_fraction);
    EXPECT_EQ(fr, default_shift_fractions());
}

TEST(ShiftSweep, BaselineCurveIsFlat) {
    ModelConfig c;
    c.base_channels = 4;
    c.depth = 2;
    const auto m = build_model<float>(c, 1);
    const auto sweep = shift_sweep(m, tiny_dataset(5), {8, 8, 8});
    for (const auto& cell : sweep.cells) EXPECT_EQ(cell.report.per_class, sweep.cells[0].report.per_class);
    EXPECT_TRUE(monotone_degradation(sweep.select(LocationMode::none)));
}

TEST(ShiftSweep, MonotoneFlag) {
    SweepResult r;
    for (double m : {0.9, 0.8, 0.8, 0.3}) {
        SweepCell c;
        c.report.mean = m;
        r.cells.push_back(c);
    }
    EXPECT_TRUE(monotone_degradation(r.select(LocationMode::none)));
    r.cells[2].report.mean = 0.85;
    EXPECT_FALSE(monotone_degradation(r.select(LocationMode::none)));
}

TEST(PtvcSweep, ConvergenceFlagAndRelativeGain) {
    SweepResult r;
    for (auto [mode, mean] : {std::pair{LocationMode::none, 0.3615}, std::pair{LocationMode::locbam, 0.9140}}) {
        SweepCell c;
        c.mode = mode;
        c.patch_shape = {32, 32, 32};
        c.volume_shape = {64, 64, 64};
        c.report.mean = mean;
        r.cells.push_back(c);
    }
    mark_convergence(r, 0.5);
    EXPECT_FALSE(r.cells[0].converged);
    EXPECT_TRUE(r.cells[1].converged);
    EXPECT_NEAR(relative_gain(91.40, 36.15), 152.84, 0.01);
    std::ostringstream os;
    write_ptvc_table(r, os);
    EXPECT_NE(os.str().find("gain 152.84%"), std::string::npos) << os.str();
    EXPECT_NE(os.str().find("PtVC 12.50%"), std::string::npos) << os.str();
}

TEST(PtvcSweep, SingleCellIsDeterministic) {
    const auto vols = tiny_dataset(6);
    PtvcSweepOptions opt;
    opt.model.base_channels = 4;
    opt.model.depth = 2;
    opt.modes = {LocationMode::none};
    const std::vector<PtvcSetting> settings{{{8, 8, 8}, 2, 3}};
    const auto a = ptvc_sweep(settings, {vols[0]}, {vols[1]}, opt);
    const auto b = ptvc_sweep(settings, {vols[0]}, {vols[1]}, opt);
    ASSERT_EQ(a.cells.size(), 1u);
    EXPECT_FALSE(a.cells[0].failed) << a.cells[0].error;
    std::ostringstream sa, sb;
    write_sweep_csv(a, sa);
    write_sweep_csv(b, sb);
    EXPECT_EQ(sa.str(), sb.str());
}

TEST(Ptvc, TableValues) {
    EXPECT_DOUBLE_EQ(ptvc({32, 32, 32}, {64, 64, 64}), 12.5);
    EXPECT_DOUBLE_EQ(ptvc({16, 16, 16}, {16, 16, 16}), 100.0);
}
