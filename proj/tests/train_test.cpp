#include <gtest/gtest.h>

#include "locseg/train.hpp"

using namespace locseg;

namespace {

// Classes separable by intensity, so a location-free model can fit them.
std::vector<Volume> separable_volume(std::size_t extent, std::uint64_t seed) {
    SyntheticConfig sc;
    sc.volume_shape = {extent, extent, extent};
    sc.num_volumes = 1;
    sc.ambiguity_mode = AmbiguityMode::none;
    sc.blob_radius_min = double(extent) / 10;
    sc.blob_radius_max = double(extent) / 6;
    sc.seed = seed;
    return generate(sc);
}

std::vector<std::vector<float>> snapshot(const Model<float>& m) {
    std::vector<std::vector<float>> out;
    for (const auto& [_, p] : m.named_parameters()) out.push_back(p.data());
    return out;
}

}  // namespace

TEST(Train, ZeroIterationsLeavesModelUnchanged) {
    auto m = build_model<float>(ModelConfig{}, 3);
    const auto before = snapshot(m);
    Schedule s;
    s.iterations = 0;
    const auto log = train(m, separable_volume(16, 1), {}, s);
    EXPECT_TRUE(log.iteration_loss.empty());
    EXPECT_TRUE(log.epochs.empty());
    EXPECT_EQ(snapshot(m), before);
}

TEST(Train, LossOnRepeatedBatchIsNonIncreasing) {
    // Patch == volume and batch 1: every iteration sees the same batch.
    auto m = build_model<float>(ModelConfig{}, 4);
    Schedule s;
    s.iterations = 50;
    s.batch_size = 1;
    s.patch_shape = {16, 16, 16};
    const auto log = train(m, separable_volume(16, 2), {}, s);
    ASSERT_EQ(log.iteration_loss.size(), 50u);
    std::size_t down = 0;
    for (std::size_t i = 1; i < 50; ++i) down += log.iteration_loss[i] <= log.iteration_loss[i - 1];
    EXPECT_GE(double(down) / 49.0, 0.9) << down << " of 49 pairs non-increasing";
}

TEST(Train, SameSeedGivesBitwiseIdenticalRuns) {
    SyntheticConfig sc;
    sc.volume_shape = {24, 24, 24};
    sc.num_volumes = 3;
    sc.blob_radius_min = 2;
    sc.blob_radius_max = 3;
    sc.seed = 8;
    const auto vols = generate(sc);
    ModelConfig c;
    c.base_channels = 4;
    c.depth = 2;
    c.location_mode = LocationMode::locbam;
    Schedule s;
    s.iterations = 12;
    s.epochs = 3;
    s.patch_shape = {8, 8, 8};
    s.seed = 5;
    auto run = [&] {
        auto m = build_model<float>(c, 1);
        auto log = train(m, {vols[0], vols[1]}, {vols[2]}, s);
        return std::pair{log, snapshot(m)};
    };
    const auto [la, pa] = run();
    const auto [lb, pb] = run();
    EXPECT_EQ(la.iteration_loss, lb.iteration_loss);
    ASSERT_EQ(la.epochs.size(), 3u);
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_EQ(la.epochs[i].iteration, 4 * (i + 1));
        EXPECT_EQ(la.epochs[i].train_loss, lb.epochs[i].train_loss);
        EXPECT_EQ(la.epochs[i].val_dice, lb.epochs[i].val_dice);
    }
    EXPECT_EQ(pa, pb);
    s.seed = 6;
    auto m = build_model<float>(c, 1);
    EXPECT_NE(train(m, {vols[0], vols[1]}, {}, s).iteration_loss, la.iteration_loss);
}

TEST(Train, RejectsBadSchedulesAndData) {
    auto m = build_model<float>(ModelConfig{}, 0);
    Schedule s;
    s.batch_size = 0;
    EXPECT_THROW(train(m, separable_volume(16, 1), {}, s), std::invalid_argument);
    s = Schedule{};
    EXPECT_THROW(train(m, {}, {}, s), std::invalid_argument);
    auto unlabeled = separable_volume(16, 1);
    unlabeled[0].labels.clear();
    EXPECT_THROW(train(m, unlabeled, {}, s), std::invalid_argument);
}

TEST(Train, CurveCsv) {
    TrainingLog log;
    log.epochs.push_back({1, 10, 0.5, 0.25});
    const auto path = std::filesystem::temp_directory_path() / ("locseg_curve_" + std::to_string(::getpid()) + ".csv");
    write_curve_csv(log, path);
    std::ifstream is(path);
    std::stringstream ss;
    ss << is.rdbuf();
    EXPECT_EQ(ss.str(), "epoch,iteration,loss,val_dice\n1,10,0.5,0.25\n");
    std::filesystem::remove(path);
}

class Overfit : public ::testing::TestWithParam<LocationMode> {};

// One fixed 32^3 volume, trained and scored on itself with patch == volume.
TEST_P(Overfit, ReachesDice095Within200Iterations) {
    const auto vol = separable_volume(32, 1);
    ModelConfig c;
    c.base_channels = 16;
    c.location_mode = GetParam();
    auto m = build_model<float>(c, 0);
    Schedule s;
    s.iterations = 200;
    s.batch_size = 1;
    s.patch_shape = {32, 32, 32};
    s.epochs = 20;
    s.stop_at_val_dice = 0.95;
    const auto log = train(m, vol, vol, s);
    ASSERT_FALSE(log.epochs.empty());
    EXPECT_GE(log.final_val_dice(), 0.95) << "after " << log.epochs.back().iteration << " iterations";
    EXPECT_LE(log.epochs.back().iteration, 200u);
}

INSTANTIATE_TEST_SUITE_P(AllModes, Overfit,
                         ::testing::Values(LocationMode::none, LocationMode::coordconv, LocationMode::locbam),
                         [](const auto& info) { return std::string(to_string(info.param)); });
