// Synthetic location-dependent volumes and the RV01 on-disk format.
#pragma once

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

#include "locseg/location.hpp"

namespace locseg {

class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class AmbiguityMode { none, axial_pairs };

inline const char* to_string(AmbiguityMode m) { return m == AmbiguityMode::none ? "none" : "axial_pairs"; }

inline AmbiguityMode ambiguity_mode_from_string(const std::string& s) {
    if (s == "none") return AmbiguityMode::none;
    if (s == "axial_pairs") return AmbiguityMode::axial_pairs;
    throw std::invalid_argument("unknown ambiguity mode '" + s + "' (expected none|axial_pairs)");
}

struct SyntheticConfig {
    Index3 volume_shape{64, 64, 64};
    std::array<double, 3> spacing{1.0, 1.0, 1.0};
    std::size_t num_classes = 3;  // including background
    std::size_t num_volumes = 4;
    AmbiguityMode ambiguity_mode = AmbiguityMode::axial_pairs;
    double blob_radius_min = 4.0;
    double blob_radius_max = 6.0;
    std::size_t blobs_per_class = 2;
    double noise_sigma = 0.1;
    double background_intensity = 0.5;
    double fov_jitter = 0.0;  // max fraction of the axial extent cropped at each end
    // Axial score bands for the lower and upper member of each class pair.
    std::array<double, 2> lower_band{20.0, 40.0};
    std::array<double, 2> upper_band{60.0, 80.0};
    std::uint64_t seed = 0;

    void validate() const {
        if (num_classes < 2) throw std::invalid_argument("synthetic config: num_classes must be >= 2");
        if (num_classes > 255) throw std::invalid_argument("synthetic config: num_classes must fit in 8 bits");
        if (!(blob_radius_min > 0 && blob_radius_min <= blob_radius_max))
            throw std::invalid_argument("synthetic config: need 0 < blob_radius_min <= blob_radius_max");
        for (std::size_t e : volume_shape)
            if (double(e) < 2 * blob_radius_max + 2)
                throw std::invalid_argument("synthetic config: blobs of radius " + std::to_string(blob_radius_max) +
                                            " do not fit volume " + index3_str(volume_shape));
        if (fov_jitter < 0 || fov_jitter >= 0.5) throw std::invalid_argument("synthetic config: fov_jitter in [0, 0.5)");
        if (noise_sigma < 0) throw std::invalid_argument("synthetic config: noise_sigma must be >= 0");
        for (const auto& band : {lower_band, upper_band})
            if (!(band[0] >= 0 && band[0] < band[1] && band[1] <= 100))
                throw std::invalid_argument("synthetic config: score bands must satisfy 0 <= lo < hi <= 100");
    }
};

/// Generating parameters of one foreground class.
struct ClassSpec {
    double intensity = 1.0;
    double score_lo = 0.0, score_hi = 100.0;  // band of admissible centroid scores
};

/// Paired classes (2j-1, 2j) share intensity and radius distribution and
/// differ only in their axial band. Without ambiguity each class gets its own
/// intensity and may appear anywhere.
inline ClassSpec class_spec(const SyntheticConfig& cfg, std::size_t k) {
    ClassSpec s;
    if (cfg.ambiguity_mode == AmbiguityMode::axial_pairs) {
        const std::size_t pair = (k - 1) / 2;
        s.intensity = cfg.background_intensity + 1.0 + 0.75 * double(pair);
        const bool paired = k + 1 < cfg.num_classes || k % 2 == 0;
        if (paired) {
            const auto& band = (k % 2 == 1) ? cfg.lower_band : cfg.upper_band;
            s.score_lo = band[0];
            s.score_hi = band[1];
        }
    } else {
        s.intensity = cfg.background_intensity + 0.75 * double(k);
    }
    return s;
}

struct Blob {
    std::uint8_t label = 0;
    std::array<double, 3> center{};  // voxel coordinates in the final (cropped) volume
    double radius = 0.0;
    double centroid_score = 0.0;
};

struct GeneratedVolume {
    Volume volume;
    std::vector<Blob> blobs;
};

/// Deterministic dataset from one RNG stream seeded by cfg.seed.
inline std::vector<GeneratedVolume> generate_detailed(const SyntheticConfig& cfg) {
    cfg.validate();
    std::mt19937_64 rng(cfg.seed);
    std::vector<GeneratedVolume> out;
    const Index3 full = cfg.volume_shape;
    const double slope = 100.0 / double(full[0] - 1);

    for (std::size_t v = 0; v < cfg.num_volumes; ++v) {
        std::vector<Blob> blobs;
        std::uniform_real_distribution<double> radius_dist(cfg.blob_radius_min, cfg.blob_radius_max);
        for (std::size_t k = 1; k < cfg.num_classes; ++k) {
            const ClassSpec spec = class_spec(cfg, k);
            for (std::size_t b = 0; b < cfg.blobs_per_class; ++b) {
                bool placed = false;
                for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
                    Blob blob;
                    blob.label = static_cast<std::uint8_t>(k);
                    blob.radius = radius_dist(rng);
                    const double r = blob.radius;
                    const double zlo = std::max(spec.score_lo / slope, r), zhi = std::min(spec.score_hi / slope, double(full[0] - 1) - r);
                    if (zlo > zhi) throw std::invalid_argument("synthetic config: band too narrow for blob radius");
                    blob.center[0] = std::uniform_real_distribution<double>(zlo, zhi)(rng);
                    for (int a = 1; a < 3; ++a)
                        blob.center[a] = std::uniform_real_distribution<double>(r, double(full[a] - 1) - r)(rng);
                    placed = true;
                    for (const auto& other : blobs) {
                        double d2 = 0;
                        for (int a = 0; a < 3; ++a) d2 += std::pow(blob.center[a] - other.center[a], 2);
                        if (std::sqrt(d2) < blob.radius + other.radius + 2.0) placed = false;
                    }
                    if (placed) blobs.push_back(blob);
                }
                if (!placed) throw std::invalid_argument("synthetic config: could not place non-overlapping blobs");
            }
        }

        // Axial crop that keeps every blob intact.
        std::size_t z0 = 0, z1 = full[0];
        if (cfg.fov_jitter > 0) {
            double blob_lo = double(full[0]), blob_hi = 0;
            for (const auto& b : blobs) {
                blob_lo = std::min(blob_lo, b.center[0] - b.radius);
                blob_hi = std::max(blob_hi, b.center[0] + b.radius);
            }
            const std::size_t max_crop = static_cast<std::size_t>(cfg.fov_jitter * double(full[0]));
            const std::size_t lo_cap = std::min<std::size_t>(max_crop, std::size_t(std::max(0.0, std::floor(blob_lo))));
            const std::size_t hi_cap = std::min<std::size_t>(
                max_crop, std::size_t(std::max(0.0, std::floor(double(full[0] - 1) - blob_hi))));
            z0 = std::uniform_int_distribution<std::size_t>(0, lo_cap)(rng);
            z1 = full[0] - std::uniform_int_distribution<std::size_t>(0, hi_cap)(rng);
        }

        GeneratedVolume gv;
        Volume& vol = gv.volume;
        vol.shape = {z1 - z0, full[1], full[2]};
        vol.spacing = cfg.spacing;
        // Anchors at the two ends of the cropped range keep scores consistent
        // with the uncropped frame.
        const std::pair<double, double> anchors[] = {{0.0, slope * double(z0)},
                                                     {double(z1 - z0 - 1), slope * double(z1 - 1)}};
        vol.bpr_map = fit_bpr_map(anchors);
        vol.intensities.assign(vol.voxels(), static_cast<float>(cfg.background_intensity));
        vol.labels.assign(vol.voxels(), 0);
        for (auto b : blobs) {
            b.centroid_score = slope * b.center[0];
            b.center[0] -= double(z0);
            const double intensity = class_spec(cfg, b.label).intensity;
            const auto lo = [&](int a) { return std::size_t(std::max(0.0, std::floor(b.center[a] - b.radius))); };
            const auto hi = [&](int a) {
                return std::min(vol.shape[a] - 1, std::size_t(std::ceil(b.center[a] + b.radius)));
            };
            for (std::size_t d = lo(0); d <= hi(0); ++d)
                for (std::size_t h = lo(1); h <= hi(1); ++h)
                    for (std::size_t w = lo(2); w <= hi(2); ++w) {
                        const double dd = double(d) - b.center[0], dh = double(h) - b.center[1],
                                     dw = double(w) - b.center[2];
                        if (dd * dd + dh * dh + dw * dw <= b.radius * b.radius) {
                            vol.labels[vol.index(d, h, w)] = b.label;
                            vol.intensities[vol.index(d, h, w)] = static_cast<float>(intensity);
                        }
                    }
            gv.blobs.push_back(b);
        }
        if (cfg.noise_sigma > 0) {
            std::normal_distribution<double> noise(0.0, cfg.noise_sigma);
            for (auto& x : vol.intensities) x = static_cast<float>(x + noise(rng));
        }
        out.push_back(std::move(gv));
    }
    return out;
}

inline std::vector<Volume> generate(const SyntheticConfig& cfg) {
    std::vector<Volume> out;
    for (auto& gv : generate_detailed(cfg)) out.push_back(std::move(gv.volume));
    return out;
}

// ---------------------------------------------------------------------------
// RV01: text header terminated by a blank line, then little-endian float32
// intensities (channel-major when channels > 1), then uint8 labels.

namespace detail {

template <typename T>
void write_le(std::ostream& os, const std::vector<T>& values) {
    static_assert(sizeof(T) == 4 || sizeof(T) == 1);
    if constexpr (std::endian::native == std::endian::little || sizeof(T) == 1) {
        os.write(reinterpret_cast<const char*>(values.data()), std::streamsize(values.size() * sizeof(T)));
    } else {
        for (T v : values) {
            auto bits = std::bit_cast<std::uint32_t>(v);
            bits = __builtin_bswap32(bits);
            os.write(reinterpret_cast<const char*>(&bits), 4);
        }
    }
}

template <typename T>
void read_le(std::istream& is, std::vector<T>& values, const std::string& what) {
    is.read(reinterpret_cast<char*>(values.data()), std::streamsize(values.size() * sizeof(T)));
    if (static_cast<std::size_t>(is.gcount()) != values.size() * sizeof(T))
        throw FormatError("RV01: truncated " + what + " (expected " + std::to_string(values.size() * sizeof(T)) +
                          " bytes, got " + std::to_string(is.gcount()) + ")");
    if constexpr (std::endian::native == std::endian::big && sizeof(T) == 4)
        for (auto& v : values) v = std::bit_cast<T>(__builtin_bswap32(std::bit_cast<std::uint32_t>(v)));
}

}  // namespace detail

/// Multi-channel payload of an RV01 file; a Volume is the single-channel case.
struct RawVolume {
    Volume volume;  // intensities hold channels * voxels values
    std::size_t channels = 1;
};

inline void write_raw_volume(const RawVolume& raw, const std::filesystem::path& path) {
    const Volume& v = raw.volume;
    if (v.intensities.size() != raw.channels * v.voxels())
        throw std::invalid_argument("write_volume: intensity count does not match shape and channels");
    if (v.has_labels() && v.labels.size() != v.voxels())
        throw std::invalid_argument("write_volume: label count does not match shape");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("RV01: cannot open " + path.string() + " for writing");
    os << std::setprecision(17);
    os << "RV01\n";
    os << "shape: " << v.shape[0] << ' ' << v.shape[1] << ' ' << v.shape[2] << '\n';
    os << "spacing: " << v.spacing[0] << ' ' << v.spacing[1] << ' ' << v.spacing[2] << '\n';
    os << "dtype: float32\n";
    os << "bpr_map: " << v.bpr_map.slope << ' ' << v.bpr_map.intercept << '\n';
    os << "has_labels: " << (v.has_labels() ? 1 : 0) << '\n';
    if (raw.channels != 1) os << "channels: " << raw.channels << '\n';
    os << '\n';
    detail::write_le(os, v.intensities);
    if (v.has_labels()) detail::write_le(os, v.labels);
    if (!os) throw FormatError("RV01: write failed for " + path.string());
}

inline RawVolume read_raw_volume(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("RV01: cannot open " + path.string());
    std::string line;
    if (!std::getline(is, line) || line != "RV01") throw FormatError("RV01: bad magic in " + path.string());
    RawVolume raw;
    Volume& v = raw.volume;
    bool has_labels = false, saw_shape = false, saw_blank = false;
    while (std::getline(is, line)) {
        if (line.empty()) {
            saw_blank = true;
            break;
        }
        const auto colon = line.find(':');
        if (colon == std::string::npos) throw FormatError("RV01: malformed header line '" + line + "'");
        const std::string key = line.substr(0, colon);
        std::istringstream fields(line.substr(colon + 1));
        if (key == "shape") {
            fields >> v.shape[0] >> v.shape[1] >> v.shape[2];
            saw_shape = true;
        } else if (key == "spacing") {
            fields >> v.spacing[0] >> v.spacing[1] >> v.spacing[2];
        } else if (key == "dtype") {
            std::string dtype;
            fields >> dtype;
            if (dtype != "float32") throw FormatError("RV01: unsupported dtype '" + dtype + "'");
        } else if (key == "bpr_map") {
            fields >> v.bpr_map.slope >> v.bpr_map.intercept;
        } else if (key == "has_labels") {
            int flag = 0;
            fields >> flag;
            has_labels = flag != 0;
        } else if (key == "channels") {
            fields >> raw.channels;
        } else {
            throw FormatError("RV01: unknown header key '" + key + "'");
        }
        if (fields.fail()) throw FormatError("RV01: cannot parse header line '" + line + "'");
    }
    if (!saw_blank) throw FormatError("RV01: truncated header in " + path.string());
    if (!saw_shape) throw FormatError("RV01: header lacks shape");
    if (raw.channels == 0) throw FormatError("RV01: channels must be >= 1");
    v.intensities.resize(raw.channels * v.voxels());
    detail::read_le(is, v.intensities, "intensities");
    if (has_labels) {
        v.labels.resize(v.voxels());
        detail::read_le(is, v.labels, "labels");
    }
    for (double s : v.spacing)
        if (!(s > 0.0)) throw FormatError("RV01: spacing must be positive");
    return raw;
}

inline void write_volume(const Volume& volume, const std::filesystem::path& path) {
    write_raw_volume(RawVolume{volume, 1}, path);
}

inline Volume read_volume(const std::filesystem::path& path) {
    auto raw = read_raw_volume(path);
    if (raw.channels != 1) throw FormatError("RV01: expected a single-channel volume in " + path.string());
    return std::move(raw.volume);
}

/// Train/val/test split of volume files. Paths are stored relative to the
/// manifest's directory; one "<split> <path>" entry per line. A
/// "common_fov 1" line declares that all volumes cover the same field of
/// view, which atlas masking requires.
struct Manifest {
    std::vector<std::filesystem::path> train, val, test;
    bool common_fov = false;

    std::vector<std::filesystem::path>& split(const std::string& name) {
        if (name == "train") return train;
        if (name == "val") return val;
        if (name == "test") return test;
        throw std::invalid_argument("unknown split '" + name + "' (expected train|val|test)");
    }
    const std::vector<std::filesystem::path>& split(const std::string& name) const {
        return const_cast<Manifest*>(this)->split(name);
    }
};

inline void write_manifest(const Manifest& m, const std::filesystem::path& path) {
    std::ofstream os(path);
    if (!os) throw FormatError("manifest: cannot write " + path.string());
    os << "# locseg dataset manifest\n";
    os << "common_fov " << (m.common_fov ? 1 : 0) << '\n';
    for (const char* name : {"train", "val", "test"})
        for (const auto& p : m.split(name)) os << name << ' ' << p.generic_string() << '\n';
}

inline Manifest read_manifest(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw FormatError("manifest: cannot open " + path.string());
    Manifest m;
    std::string line;
    const auto base = path.parent_path();
    while (std::getline(is, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::istringstream fields(line);
        std::string split, rel;
        if (!(fields >> split >> rel)) throw FormatError("manifest: malformed line '" + line + "'");
        if (split == "common_fov") {
            if (rel != "0" && rel != "1") throw FormatError("manifest: common_fov must be 0 or 1");
            m.common_fov = rel == "1";
            continue;
        }
        std::filesystem::path p(rel);
        m.split(split).push_back(p.is_absolute() ? p : base / p);
    }
    return m;
}

inline std::vector<Volume> load_split(const Manifest& m, const std::string& split) {
    std::vector<Volume> out;
    for (const auto& p : m.split(split)) out.push_back(read_volume(p));
    return out;
}

}  // namespace locseg
