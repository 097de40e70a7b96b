#include <gtest/gtest.h>

#include <map>

#include "locseg/data.hpp"

using namespace locseg;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
    auto p = fs::temp_directory_path() / ("locseg_" + name + "_" + std::to_string(::getpid()));
    fs::create_directories(p);
    return p;
}

SyntheticConfig small_config() {
    SyntheticConfig c;
    c.volume_shape = {32, 24, 24};
    c.num_classes = 5;
    c.num_volumes = 3;
    c.blob_radius_min = 2.5;
    c.blob_radius_max = 3.5;
    c.seed = 17;
    return c;
}

}  // namespace

TEST(Generate, SameSeedIsBitwiseIdentical) {
    auto a = generate(small_config()), b = generate(small_config());
    ASSERT_EQ(a.size(), 3u);
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].intensities, b[i].intensities);
        EXPECT_EQ(a[i].labels, b[i].labels);
        EXPECT_EQ(a[i].bpr_map, b[i].bpr_map);
    }
    auto c = small_config();
    c.seed = 18;
    EXPECT_NE(generate(c)[0].labels, a[0].labels);
}

TEST(Generate, PairedClassesShareGeneratingParameters) {
    const auto cfg = small_config();
    for (std::size_t j = 1; 2 * j < cfg.num_classes; ++j) {
        const auto lo = class_spec(cfg, 2 * j - 1), hi = class_spec(cfg, 2 * j);
        EXPECT_EQ(lo.intensity, hi.intensity);
        EXPECT_LT(lo.score_hi, hi.score_lo);
    }
    EXPECT_NE(class_spec(cfg, 1).intensity, class_spec(cfg, 3).intensity);
    // Without noise the observed intensities of paired classes coincide exactly.
    auto quiet = cfg;
    quiet.noise_sigma = 0;
    for (const auto& v : generate(quiet)) {
        std::map<int, std::set<float>> seen;
        for (std::size_t i = 0; i < v.voxels(); ++i) seen[v.labels[i]].insert(v.intensities[i]);
        EXPECT_EQ(seen[1], seen[2]);
        EXPECT_EQ(seen[3], seen[4]);
        EXPECT_EQ(seen[1].size(), 1u);
    }
}

TEST(Generate, NoneModeSeparatesClassesByIntensity) {
    auto cfg = small_config();
    cfg.ambiguity_mode = AmbiguityMode::none;
    cfg.num_classes = 2;
    EXPECT_NE(class_spec(cfg, 1).intensity, cfg.background_intensity);
    auto v = generate(cfg)[0];
    EXPECT_GT(std::count(v.labels.begin(), v.labels.end(), 1), 0);
}

TEST(Generate, CentroidScoresLieInClassBands) {
    for (double jitter : {0.0, 0.2}) {
        auto cfg = small_config();
        cfg.fov_jitter = jitter;
        cfg.num_volumes = 6;
        for (const auto& gv : generate_detailed(cfg)) {
            ASSERT_EQ(gv.blobs.size(), 2 * (cfg.num_classes - 1));
            for (const auto& b : gv.blobs) {
                const auto spec = class_spec(cfg, b.label);
                EXPECT_GE(b.centroid_score, spec.score_lo);
                EXPECT_LE(b.centroid_score, spec.score_hi);
                // The refitted map reproduces the score in the cropped frame.
                EXPECT_NEAR(gv.volume.bpr_map(b.center[0]), b.centroid_score, 1e-9);
            }
        }
    }
}

TEST(Generate, FovJitterCropsAxially) {
    auto cfg = small_config();
    cfg.fov_jitter = 0.2;
    cfg.num_volumes = 8;
    bool cropped = false;
    for (const auto& v : generate(cfg)) {
        EXPECT_LE(v.shape[0], cfg.volume_shape[0]);
        EXPECT_EQ(v.shape[1], cfg.volume_shape[1]);
        cropped |= v.shape[0] < cfg.volume_shape[0];
        v.validate();
    }
    EXPECT_TRUE(cropped);
}

TEST(Generate, RejectsInvalidConfigs) {
    auto cfg = small_config();
    cfg.num_classes = 1;
    EXPECT_THROW(generate(cfg), std::invalid_argument);
    cfg = small_config();
    cfg.blob_radius_max = 20;
    EXPECT_THROW(generate(cfg), std::invalid_argument);
}

TEST(Rv01, RoundTripIsBitwise) {
    const auto dir = temp_dir("rv01");
    auto v = generate(small_config())[1];
    v.spacing = {1.5, 0.7, 0.7};
    v.bpr_map = {1.0 / 3.0, -7.1};
    write_volume(v, dir / "a.rv01");
    const auto r = read_volume(dir / "a.rv01");
    EXPECT_EQ(r.shape, v.shape);
    EXPECT_EQ(r.spacing, v.spacing);
    EXPECT_EQ(r.bpr_map, v.bpr_map);
    EXPECT_EQ(std::memcmp(r.intensities.data(), v.intensities.data(), v.intensities.size() * 4), 0);
    EXPECT_EQ(r.labels, v.labels);

    Volume unlabeled = v;
    unlabeled.labels.clear();
    write_volume(unlabeled, dir / "b.rv01");
    EXPECT_FALSE(read_volume(dir / "b.rv01").has_labels());
    fs::remove_all(dir);
}

TEST(Rv01, RejectsTruncatedAndBadMagic) {
    const auto dir = temp_dir("rv01bad");
    auto v = generate(small_config())[0];
    write_volume(v, dir / "ok.rv01");
    const auto size = fs::file_size(dir / "ok.rv01");
    fs::copy_file(dir / "ok.rv01", dir / "cut.rv01");
    fs::resize_file(dir / "cut.rv01", size - 100);
    try {
        read_volume(dir / "cut.rv01");
        FAIL() << "truncated file accepted";
    } catch (const FormatError& e) {
        EXPECT_NE(std::string(e.what()).find("truncated"), std::string::npos);
    }
    {
        std::ofstream os(dir / "magic.rv01");
        os << "RV02\nshape: 1 1 1\n\n";
    }
    EXPECT_THROW(read_volume(dir / "magic.rv01"), FormatError);
    {
        std::ofstream os(dir / "key.rv01");
        os << "RV01\nshape: 1 1 1\ncolour: red\n\n";
    }
    EXPECT_THROW(read_volume(dir / "key.rv01"), FormatError);
    EXPECT_THROW(read_volume(dir / "missing.rv01"), FormatError);
    fs::remove_all(dir);
}

TEST(Manifest, RoundTripWithRelativePaths) {
    const auto dir = temp_dir("manifest");
    Manifest m;
    m.train = {"vol_000.rv01", "vol_001.rv01"};
    m.test = {"vol_002.rv01"};
    write_manifest(m, dir / "manifest.txt");
    auto r = read_manifest(dir / "manifest.txt");
    EXPECT_FALSE(r.common_fov);
    m.common_fov = true;
    write_manifest(m, dir / "manifest.txt");
    r = read_manifest(dir / "manifest.txt");
    EXPECT_TRUE(r.common_fov);
    EXPECT_EQ(r.train, (std::vector<fs::path>{dir / "vol_000.rv01", dir / "vol_001.rv01"}));
    EXPECT_TRUE(r.val.empty());
    EXPECT_EQ(r.test.size(), 1u);
    EXPECT_THROW(m.split("holdout"), std::invalid_argument);
    fs::remove_all(dir);
}
