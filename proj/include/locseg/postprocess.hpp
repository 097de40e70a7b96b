// Classical postprocessing: largest component filtering and atlas masking.
#pragma once

#include <deque>

#include "locseg/data.hpp"
#include "locseg/eval.hpp"

namespace locseg {

struct Components {
    std::vector<std::uint32_t> labels;  // 0 = background, components numbered from 1 in scan order
    std::vector<std::size_t> sizes;     // sizes[i] belongs to component i + 1

    std::size_t count() const { return sizes.size(); }
};

namespace detail {

inline std::vector<std::array<int, 3>> neighbour_offsets(int connectivity) {
    if (connectivity != 6 && connectivity != 26)
        throw std::invalid_argument("connectivity must be 6 or 26, got " + std::to_string(connectivity));
    std::vector<std::array<int, 3>> out;
    for (int d = -1; d <= 1; ++d)
        for (int h = -1; h <= 1; ++h)
            for (int w = -1; w <= 1; ++w) {
                const int manhattan = std::abs(d) + std::abs(h) + std::abs(w);
                if (manhattan == 0 || (connectivity == 6 && manhattan > 1)) continue;
                out.push_back({d, h, w});
            }
    return out;
}

inline void require_grid(std::size_t size, const Index3& shape, const char* what) {
    if (size != volume_of(shape))
        throw std::invalid_argument(std::string(what) + ": grid of " + std::to_string(size) +
                                    " voxels does not match shape " + index3_str(shape));
}

}  // namespace detail

/// Flood-fill labeling of the nonzero voxels.
inline Components connected_components(std::span<const std::uint8_t> mask, const Index3& shape,
                                       int connectivity = 26) {
    detail::require_grid(mask.size(), shape, "connected_components");
    const auto offsets = detail::neighbour_offsets(connectivity);
    Components c;
    c.labels.assign(mask.size(), 0);
    std::vector<std::size_t> queue;
    for (std::size_t seed = 0; seed < mask.size(); ++seed) {
        if (!mask[seed] || c.labels[seed]) continue;
        const auto id = static_cast<std::uint32_t>(c.sizes.size() + 1);
        c.labels[seed] = id;
        queue.assign(1, seed);
        for (std::size_t head = 0; head < queue.size(); ++head) {
            const std::size_t v = queue[head];
            const long d = long(v / (shape[1] * shape[2])), h = long(v / shape[2] % shape[1]), w = long(v % shape[2]);
            for (const auto& o : offsets) {
                const long nd = d + o[0], nh = h + o[1], nw = w + o[2];
                if (nd < 0 || nh < 0 || nw < 0 || nd >= long(shape[0]) || nh >= long(shape[1]) || nw >= long(shape[2]))
                    continue;
                const std::size_t u = (std::size_t(nd) * shape[1] + std::size_t(nh)) * shape[2] + std::size_t(nw);
                if (mask[u] && !c.labels[u]) {
                    c.labels[u] = id;
                    queue.push_back(u);
                }
            }
        }
        c.sizes.push_back(queue.size());
    }
    return c;
}

/// Keeps only the largest connected component of each listed class; the
/// rest of that class becomes background. Ties keep the component found
/// first in scan order.
inline Labelmap largest_component_filter(const Labelmap& labels, const Index3& shape,
                                         std::span<const std::uint8_t> classes, int connectivity = 26) {
    detail::require_grid(labels.size(), shape, "largest_component_filter");
    Labelmap out = labels;
    std::vector<std::uint8_t> mask(labels.size());
    for (std::uint8_t k : classes) {
        if (k == 0) continue;
        for (std::size_t i = 0; i < labels.size(); ++i) mask[i] = labels[i] == k;
        const auto cc = connected_components(mask, shape, connectivity);
        if (cc.count() < 2) continue;
        const auto keep =
            static_cast<std::uint32_t>(std::max_element(cc.sizes.begin(), cc.sizes.end()) - cc.sizes.begin() + 1);
        for (std::size_t i = 0; i < out.size(); ++i)
            if (cc.labels[i] && cc.labels[i] != keep) out[i] = 0;
    }
    return out;
}

/// All foreground classes 1..K-1.
inline Labelmap largest_component_filter(const Labelmap& labels, const Index3& shape, std::size_t num_classes,
                                         int connectivity = 26) {
    std::vector<std::uint8_t> classes;
    for (std::size_t k = 1; k < num_classes; ++k) classes.push_back(static_cast<std::uint8_t>(k));
    return largest_component_filter(labels, shape, classes, connectivity);
}

/// Nearest-neighbour resampling between grids; voxel centres are aligned.
template <typename V>
std::vector<V> resample_nearest(const std::vector<V>& grid, const Index3& from, const Index3& to) {
    detail::require_grid(grid.size(), from, "resample_nearest");
    if (from == to) return grid;
    std::array<std::vector<std::size_t>, 3> map;
    for (int a = 0; a < 3; ++a) {
        if (from[a] == 0 || to[a] == 0) throw std::invalid_argument("resample_nearest: empty grid");
        map[a].resize(to[a]);
        for (std::size_t i = 0; i < to[a]; ++i) {
            const double src = (double(i) + 0.5) * double(from[a]) / double(to[a]) - 0.5;
            map[a][i] = std::min<std::size_t>(from[a] - 1, std::size_t(std::max(0.0, std::round(src))));
        }
    }
    std::vector<V> out(volume_of(to));
    for (std::size_t d = 0; d < to[0]; ++d)
        for (std::size_t h = 0; h < to[1]; ++h)
            for (std::size_t w = 0; w < to[2]; ++w)
                out[(d * to[1] + h) * to[2] + w] = grid[(map[0][d] * from[1] + map[1][h]) * from[2] + map[2][w]];
    return out;
}

/// Morphological dilation with a cubic structuring element of half-width
/// `radius`, done as three separable running maxima.
inline std::vector<std::uint8_t> dilate(const std::vector<std::uint8_t>& mask, const Index3& shape, std::size_t radius) {
    detail::require_grid(mask.size(), shape, "dilate");
    std::vector<std::uint8_t> cur(mask.size());
    for (std::size_t i = 0; i < mask.size(); ++i) cur[i] = mask[i] != 0;
    if (radius == 0) return cur;
    const std::array<std::size_t, 3> stride{shape[1] * shape[2], shape[2], 1};
    std::vector<std::uint8_t> next(mask.size());
    for (int a = 0; a < 3; ++a) {
        const std::size_t n = shape[a], st = stride[a];
        for (std::size_t base = 0; base < mask.size(); ++base) {
            if ((base / st) % n != 0) continue;  // visit each line once, from its first voxel
            // Distance back to the nearest set voxel seen so far, then forward.
            std::size_t last = std::numeric_limits<std::size_t>::max();
            for (std::size_t i = 0; i < n; ++i) {
                if (cur[base + i * st]) last = i;
                next[base + i * st] = last != std::numeric_limits<std::size_t>::max() && i - last <= radius;
            }
            last = std::numeric_limits<std::size_t>::max();
            for (std::size_t i = n; i-- > 0;) {
                if (cur[base + i * st]) last = i;
                if (last != std::numeric_limits<std::size_t>::max() && last - i <= radius) next[base + i * st] = 1;
            }
        }
        std::swap(cur, next);
    }
    return cur;
}

struct Atlas {
    Index3 shape{0, 0, 0};
    std::vector<std::vector<float>> probability;  // [k] for classes 0..K-1 (class 0 is background)
    std::size_t dilation_radius = 0;
    double threshold = 0.0;  // a class is plausible where probability > threshold

    std::size_t num_classes() const { return probability.size(); }

    /// Binarized and dilated plausibility mask of class k at the atlas shape.
    std::vector<std::uint8_t> mask(std::size_t k) const {
        if (k >= probability.size()) throw std::out_of_range("atlas: class " + std::to_string(k) + " out of range");
        std::vector<std::uint8_t> m(probability[k].size());
        for (std::size_t i = 0; i < m.size(); ++i) m[i] = probability[k][i] > threshold;
        return dilate(m, shape, dilation_radius);
    }
};

/// Elementwise median of the volume shapes (lower median for even counts).
inline Index3 median_shape(const std::vector<Index3>& shapes) {
    if (shapes.empty()) throw std::invalid_argument("median_shape: no shapes");
    Index3 out{};
    for (int a = 0; a < 3; ++a) {
        std::vector<std::size_t> v;
        for (const auto& s : shapes) v.push_back(s[a]);
        std::nth_element(v.begin(), v.begin() + (v.size() - 1) / 2, v.end());
        out[a] = v[(v.size() - 1) / 2];
    }
    return out;
}

/// Resamples each labelmap to `reference_shape` (nearest neighbour) and
/// averages the one-hot encodings.
inline Atlas build_atlas(const std::vector<Labelmap>& labels, const std::vector<Index3>& shapes,
                         const Index3& reference_shape, std::size_t num_classes) {
    if (labels.empty() || labels.size() != shapes.size())
        throw std::invalid_argument("build_atlas: need one shape per labelmap and at least one labelmap");
    if (num_classes < 2) throw std::invalid_argument("build_atlas: num_classes must be >= 2");
    const std::size_t V = volume_of(reference_shape);
    std::vector<std::vector<std::uint32_t>> counts(num_classes, std::vector<std::uint32_t>(V, 0));
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const auto r = resample_nearest(labels[i], shapes[i], reference_shape);
        for (std::size_t v = 0; v < V; ++v) {
            if (r[v] >= num_classes)
                throw std::invalid_argument("build_atlas: label " + std::to_string(r[v]) + " exceeds class count");
            ++counts[r[v]][v];
        }
    }
    Atlas a;
    a.shape = reference_shape;
    a.probability.assign(num_classes, std::vector<float>(V));
    for (std::size_t k = 0; k < num_classes; ++k)
        for (std::size_t v = 0; v < V; ++v)
            a.probability[k][v] = static_cast<float>(double(counts[k][v]) / double(labels.size()));
    return a;
}

inline Atlas build_atlas(const std::vector<Volume>& volumes, std::size_t num_classes) {
    std::vector<Labelmap> labels;
    std::vector<Index3> shapes;
    for (const auto& v : volumes) {
        if (!v.has_labels()) throw std::invalid_argument("build_atlas: volume without labels");
        labels.push_back(v.labels);
        shapes.push_back(v.shape);
    }
    return build_atlas(labels, shapes, median_shape(shapes), num_classes);
}

/// Predicted voxels of class k outside the atlas's class-k mask, resampled
/// to the prediction grid, become background.
inline Labelmap atlas_mask(const Labelmap& prediction, const Index3& shape, const Atlas& atlas) {
    detail::require_grid(prediction.size(), shape, "atlas_mask");
    Labelmap out = prediction;
    for (std::size_t k = 1; k < atlas.num_classes(); ++k) {
        const auto m = resample_nearest(atlas.mask(k), atlas.shape, shape);
        for (std::size_t i = 0; i < out.size(); ++i)
            if (out[i] == k && !m[i]) out[i] = 0;
    }
    return out;
}

struct DilationSearch {
    std::size_t radius = 0;
    std::vector<double> mean_dice;  // one per candidate, in candidate order
};

/// Picks the radius whose masked predictions score the highest mean Dice
/// against the references; ties go to the smallest radius.
inline DilationSearch optimize_dilation(Atlas atlas, const std::vector<Labelmap>& predictions,
                                        const std::vector<Labelmap>& references, const std::vector<Index3>& shapes,
                                        std::vector<std::size_t> radii) {
    if (radii.empty()) throw std::invalid_argument("optimize_dilation: no candidate radii");
    if (predictions.empty() || predictions.size() != references.size() || predictions.size() != shapes.size())
        throw std::invalid_argument("optimize_dilation: predictions, references and shapes must pair up");
    std::sort(radii.begin(), radii.end());
    radii.erase(std::unique(radii.begin(), radii.end()), radii.end());
    DilationSearch out;
    double best = -1.0;
    for (std::size_t r : radii) {
        atlas.dilation_radius = r;
        std::vector<DiceReport> reports;
        for (std::size_t i = 0; i < predictions.size(); ++i)
            reports.push_back(
                dice_report(atlas_mask(predictions[i], shapes[i], atlas), references[i], atlas.num_classes()));
        const double m = aggregate(reports).mean;
        const double score = std::isnan(m) ? 1.0 : m;
        out.mean_dice.push_back(score);
        if (score > best) {
            best = score;
            out.radius = r;
        }
    }
    return out;
}

// Atlas on disk: a structured-text sidecar at `path` plus one RV01 volume
// with a channel per class holding its probabilities, at <path>.rv01.

inline std::filesystem::path atlas_volume_path(const std::filesystem::path& path) { return path.string() + ".rv01"; }

inline void write_atlas(const Atlas& atlas, const std::filesystem::path& path) {
    {
        std::ofstream os(path);
        if (!os) throw FormatError("cannot write " + path.string());
        os << std::setprecision(17) << "LSATLAS1\n"
           << "shape: " << atlas.shape[0] << ' ' << atlas.shape[1] << ' ' << atlas.shape[2] << '\n'
           << "classes: " << atlas.num_classes() << '\n'
           << "dilation_radius: " << atlas.dilation_radius << '\n'
           << "threshold: " << atlas.threshold << '\n';
    }
    RawVolume raw;
    raw.channels = atlas.num_classes();
    raw.volume.shape = atlas.shape;
    for (const auto& p : atlas.probability) raw.volume.intensities.insert(raw.volume.intensities.end(), p.begin(), p.end());
    write_raw_volume(raw, atlas_volume_path(path));
}

inline Atlas read_atlas(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw FormatError("cannot open " + path.string());
    std::string line;
    if (!std::getline(is, line) || line != "LSATLAS1") throw FormatError(path.string() + ": not an atlas sidecar");
    Atlas a;
    std::size_t classes = 0;
    bool have_shape = false, have_classes = false;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto colon = line.find(':');
        if (colon == std::string::npos) throw FormatError(path.string() + ": malformed line '" + line + "'");
        const std::string key = line.substr(0, colon);
        std::istringstream val(line.substr(colon + 1));
        if (key == "shape") {
            val >> a.shape[0] >> a.shape[1] >> a.shape[2];
            have_shape = true;
        } else if (key == "classes") {
            val >> classes;
            have_classes = true;
        } else if (key == "dilation_radius") {
            val >> a.dilation_radius;
        } else if (key == "threshold") {
            val >> a.threshold;
        } else {
            throw FormatError(path.string() + ": unknown key '" + key + "'");
        }
        if (val.fail()) throw FormatError(path.string() + ": bad value for '" + key + "'");
    }
    if (!have_shape || !have_classes || classes < 2) throw FormatError(path.string() + ": incomplete atlas header");
    auto raw = read_raw_volume(atlas_volume_path(path));
    if (raw.volume.shape != a.shape || raw.channels != classes)
        throw FormatError(path.string() + ": atlas volume does not match its sidecar");
    const std::size_t V = volume_of(a.shape);
    for (std::size_t k = 0; k < classes; ++k)
        a.probability.emplace_back(raw.volume.intensities.begin() + k * V, raw.volume.intensities.begin() + (k + 1) * V);
    return a;
}

}  // namespace locseg
