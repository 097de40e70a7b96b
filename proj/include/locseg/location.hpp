// Volumes, patch placement and the global location signals derived from it.
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "locseg/ops.hpp"

namespace locseg {

using Index3 = std::array<std::size_t, 3>;

inline std::size_t volume_of(const Index3& s) { return s[0] * s[1] * s[2]; }

inline std::string index3_str(const Index3& s) {
    return std::to_string(s[0]) + "x" + std::to_string(s[1]) + "x" + std::to_string(s[2]);
}

/// Affine map from axial voxel index to body-part score: score = slope * z + intercept.
/// Scores outside [0, 100] are returned unclamped.
struct AxialScoreMap {
    double slope = 1.0;
    double intercept = 0.0;

    double operator()(double z) const { return slope * z + intercept; }
    bool operator==(const AxialScoreMap&) const = default;
};

inline double bpr_score(double z, const AxialScoreMap& map) { return map(z); }

/// Least-squares affine fit through (z, score) anchors.
inline AxialScoreMap fit_bpr_map(std::span<const std::pair<double, double>> anchors) {
    if (anchors.size() < 2) throw std::invalid_argument("fit_bpr_map: need at least two anchors");
    double mz = 0, ms = 0;
    for (const auto& [z, s] : anchors) {
        mz += z;
        ms += s;
    }
    mz /= double(anchors.size());
    ms /= double(anchors.size());
    double szz = 0, szs = 0;
    for (const auto& [z, s] : anchors) {
        szz += (z - mz) * (z - mz);
        szs += (z - mz) * (s - ms);
    }
    if (szz == 0.0) throw std::invalid_argument("fit_bpr_map: anchors share a single axial index");
    const double slope = szs / szz;
    return {slope, ms - slope * mz};
}

/// Dense scalar volume, optional label map, voxel spacing (z, y, x) in mm,
/// and its axial score map.
struct Volume {
    Index3 shape{0, 0, 0};
    std::array<double, 3> spacing{1.0, 1.0, 1.0};
    std::vector<float> intensities;
    std::vector<std::uint8_t> labels;  // empty when unlabeled
    AxialScoreMap bpr_map;

    bool has_labels() const { return !labels.empty(); }
    std::size_t voxels() const { return volume_of(shape); }
    std::size_t index(std::size_t d, std::size_t h, std::size_t w) const { return (d * shape[1] + h) * shape[2] + w; }

    void validate() const {
        if (intensities.size() != voxels())
            throw std::invalid_argument("volume: " + std::to_string(intensities.size()) +
                                        " intensities for shape " + index3_str(shape));
        if (has_labels() && labels.size() != voxels())
            throw std::invalid_argument("volume: label grid size does not match shape " + index3_str(shape));
        for (double s : spacing)
            if (!(s > 0.0)) throw std::invalid_argument("volume: spacing must be positive");
    }
};

/// Placement of a patch inside its source volume. The shift perturbs only
/// the axial location signal, never the sampled voxels.
struct PatchLocation {
    Index3 origin{0, 0, 0};
    Index3 patch_shape{0, 0, 0};
    Index3 volume_shape{0, 0, 0};
    AxialScoreMap bpr_map;
    double shift_fraction = 0.0;

    void validate() const {
        for (int a = 0; a < 3; ++a)
            if (patch_shape[a] == 0 || origin[a] + patch_shape[a] > volume_shape[a])
                throw std::invalid_argument("patch location: patch " + index3_str(patch_shape) + " at origin " +
                                            index3_str(origin) + " exceeds volume " + index3_str(volume_shape));
    }

    PatchLocation shifted(double fraction) const {
        PatchLocation out = *this;
        out.shift_fraction = fraction;
        return out;
    }
};

/// Percentage of volume voxels covered by one patch.
inline double ptvc(const Index3& patch_shape, const Index3& volume_shape) {
    return 100.0 * (double(patch_shape[0]) * double(patch_shape[1]) * double(patch_shape[2])) /
           (double(volume_shape[0]) * double(volume_shape[1]) * double(volume_shape[2]));
}

/// One global coordinate per patch slice along `axis`. In-plane axes map the
/// global voxel index affinely onto [-1, 1] over the volume extent; the axial
/// axis uses score/100 plus the shift fraction.
inline std::vector<double> normalized_coords(const PatchLocation& loc, Axis axis) {
    loc.validate();
    const int a = static_cast<int>(axis);
    std::vector<double> coords(loc.patch_shape[a]);
    for (std::size_t i = 0; i < coords.size(); ++i) {
        const double g = double(loc.origin[a] + i);
        if (axis == Axis::D) {
            coords[i] = bpr_score(g, loc.bpr_map) / 100.0 + loc.shift_fraction;
        } else {
            const std::size_t extent = loc.volume_shape[a];
            coords[i] = extent > 1 ? -1.0 + 2.0 * g / double(extent - 1) : 0.0;
        }
    }
    return coords;
}

/// Averages consecutive groups of `factor` coordinates, giving the location of
/// each slice of a feature map downsampled by `factor`.
inline std::vector<double> downsample_coords(const std::vector<double>& coords, std::size_t factor) {
    if (factor == 0 || coords.size() % factor != 0)
        throw ShapeError("downsample_coords: " + std::to_string(coords.size()) + " coordinates not divisible by " +
                         std::to_string(factor));
    std::vector<double> out(coords.size() / factor);
    for (std::size_t i = 0; i < out.size(); ++i) {
        double acc = 0;
        for (std::size_t j = 0; j < factor; ++j) acc += coords[i * factor + j];
        out[i] = acc / double(factor);
    }
    return out;
}

/// CoordConv channels [3, D, H, W]: axial, then the two in-plane coordinates.
template <typename T>
Tensor<T> coord_channels(const PatchLocation& loc) {
    const auto cd = normalized_coords(loc, Axis::D);
    const auto ch = normalized_coords(loc, Axis::H);
    const auto cw = normalized_coords(loc, Axis::W);
    const std::size_t D = cd.size(), H = ch.size(), W = cw.size(), S = D * H * W;
    std::vector<T> v(3 * S);
    for (std::size_t d = 0; d < D; ++d)
        for (std::size_t h = 0; h < H; ++h)
            for (std::size_t w = 0; w < W; ++w) {
                const std::size_t i = (d * H + h) * W + w;
                v[i] = static_cast<T>(cd[d]);
                v[S + i] = static_cast<T>(ch[h]);
                v[2 * S + i] = static_cast<T>(cw[w]);
            }
    return Tensor<T>(Shape{3, D, H, W}, std::move(v));
}

struct PatchSample {
    std::vector<float> intensities;
    std::vector<std::uint8_t> labels;  // empty when the volume is unlabeled
    PatchLocation location;
};

inline PatchLocation make_location(const Volume& volume, const Index3& origin, const Index3& patch_shape) {
    PatchLocation loc{origin, patch_shape, volume.shape, volume.bpr_map, 0.0};
    loc.validate();
    return loc;
}

/// Copies the patch at `loc` out of the volume.
inline PatchSample extract_patch(const Volume& volume, const PatchLocation& loc) {
    loc.validate();
    if (loc.volume_shape != volume.shape)
        throw std::invalid_argument("extract_patch: location refers to a volume of shape " +
                                    index3_str(loc.volume_shape) + ", got " + index3_str(volume.shape));
    PatchSample out;
    out.location = loc;
    const auto& p = loc.patch_shape;
    out.intensities.resize(volume_of(p));
    if (volume.has_labels()) out.labels.resize(volume_of(p));
    for (std::size_t d = 0; d < p[0]; ++d)
        for (std::size_t h = 0; h < p[1]; ++h) {
            const std::size_t src = volume.index(loc.origin[0] + d, loc.origin[1] + h, loc.origin[2]);
            const std::size_t dst = (d * p[1] + h) * p[2];
            std::copy_n(volume.intensities.begin() + src, p[2], out.intensities.begin() + dst);
            if (volume.has_labels()) std::copy_n(volume.labels.begin() + src, p[2], out.labels.begin() + dst);
        }
    return out;
}

/// Voxel indices per foreground class, for class-balanced patch sampling.
struct ForegroundIndex {
    std::vector<std::vector<std::size_t>> voxels_by_class;  // [class] -> flat indices; class 0 unused

    explicit ForegroundIndex(const Volume& volume) {
        for (std::size_t i = 0; i < volume.labels.size(); ++i) {
            const std::size_t k = volume.labels[i];
            if (k == 0) continue;
            if (voxels_by_class.size() <= k) voxels_by_class.resize(k + 1);
            voxels_by_class[k].push_back(i);
        }
    }

    std::vector<std::size_t> present_classes() const {
        std::vector<std::size_t> out;
        for (std::size_t k = 1; k < voxels_by_class.size(); ++k)
            if (!voxels_by_class[k].empty()) out.push_back(k);
        return out;
    }
};

/// Draws a patch with a uniformly random valid origin. With probability
/// `foreground_probability` (and a foreground index), the origin is instead
/// chosen so that the patch contains a random voxel of a random present class.
inline PatchSample sample_patch(const Volume& volume, const Index3& patch_shape, std::mt19937_64& rng,
                                const ForegroundIndex* foreground = nullptr, double foreground_probability = 0.0) {
    for (int a = 0; a < 3; ++a)
        if (patch_shape[a] == 0 || patch_shape[a] > volume.shape[a])
            throw std::invalid_argument("sample_patch: patch " + index3_str(patch_shape) + " larger than volume " +
                                        index3_str(volume.shape));
    Index3 origin{};
    bool forced = false;
    if (foreground && foreground_probability > 0.0) {
        std::bernoulli_distribution force(foreground_probability);
        const auto classes = foreground->present_classes();
        if (force(rng) && !classes.empty()) {
            const auto& pool = foreground->voxels_by_class[classes[std::uniform_int_distribution<std::size_t>(
                0, classes.size() - 1)(rng)]];
            const std::size_t flat = pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];
            const Index3 voxel{flat / (volume.shape[1] * volume.shape[2]), (flat / volume.shape[2]) % volume.shape[1],
                               flat % volume.shape[2]};
            for (int a = 0; a < 3; ++a) {
                const std::size_t lo = voxel[a] + 1 >= patch_shape[a] ? voxel[a] + 1 - patch_shape[a] : 0;
                const std::size_t hi = std::min(voxel[a], volume.shape[a] - patch_shape[a]);
                origin[a] = std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
            }
            forced = true;
        }
    }
    if (!forced)
        for (int a = 0; a < 3; ++a)
            origin[a] = std::uniform_int_distribution<std::size_t>(0, volume.shape[a] - patch_shape[a])(rng);
    return extract_patch(volume, make_location(volume, origin, patch_shape));
}

}  // namespace locseg
