// Dice metrics and sliding-window inference over whole volumes.
#pragma once

#include <cmath>
#include <limits>
#include <numeric>

#include "locseg/model.hpp"

namespace locseg {

using Labelmap = std::vector<std::uint8_t>;

/// 2|P ∩ R| / (|P| + |R|) for class k; 1.0 when k is absent from both.
inline double dice(std::span<const std::uint8_t> prediction, std::span<const std::uint8_t> reference, std::uint8_t k) {
    if (prediction.size() != reference.size())
        throw std::invalid_argument("dice: prediction has " + std::to_string(prediction.size()) +
                                    " voxels, reference " + std::to_string(reference.size()));
    std::size_t p = 0, r = 0, both = 0;
    for (std::size_t i = 0; i < prediction.size(); ++i) {
        const bool a = prediction[i] == k, b = reference[i] == k;
        p += a;
        r += b;
        both += a && b;
    }
    if (p + r == 0) return 1.0;
    return 2.0 * double(both) / double(p + r);
}

/// Foreground Dice for classes 1..K-1. A class absent from both prediction
/// and reference scores 1.0 but is left out of the mean.
struct DiceReport {
    std::vector<double> per_class;  // index k-1 holds class k
    std::vector<bool> included;
    double mean = std::numeric_limits<double>::quiet_NaN();
    std::size_t volumes = 1;

    std::size_t num_classes() const { return per_class.size() + 1; }
};

inline DiceReport dice_report(std::span<const std::uint8_t> prediction, std::span<const std::uint8_t> reference,
                              std::size_t num_classes) {
    DiceReport r;
    double acc = 0;
    std::size_t n = 0;
    for (std::size_t k = 1; k < num_classes; ++k) {
        const auto kk = static_cast<std::uint8_t>(k);
        const bool present = std::find(prediction.begin(), prediction.end(), kk) != prediction.end() ||
                             std::find(reference.begin(), reference.end(), kk) != reference.end();
        r.per_class.push_back(dice(prediction, reference, kk));
        r.included.push_back(present);
        if (present) {
            acc += r.per_class.back();
            ++n;
        }
    }
    if (n) r.mean = acc / double(n);
    return r;
}

/// Per-volume-then-averaged view: each class averages over the volumes where
/// it was included; the mean averages the per-volume means.
inline DiceReport aggregate(const std::vector<DiceReport>& reports) {
    if (reports.empty()) throw std::invalid_argument("aggregate: no reports");
    const std::size_t C = reports.front().per_class.size();
    DiceReport out;
    out.per_class.assign(C, 0.0);
    out.included.assign(C, false);
    out.volumes = reports.size();
    std::vector<std::size_t> counts(C, 0);
    double acc = 0;
    std::size_t n = 0;
    for (const auto& r : reports) {
        if (r.per_class.size() != C) throw std::invalid_argument("aggregate: reports disagree on class count");
        for (std::size_t c = 0; c < C; ++c)
            if (r.included[c]) {
                out.per_class[c] += r.per_class[c];
                ++counts[c];
            }
        if (!std::isnan(r.mean)) {
            acc += r.mean;
            ++n;
        }
    }
    for (std::size_t c = 0; c < C; ++c) {
        out.included[c] = counts[c] > 0;
        out.per_class[c] = counts[c] ? out.per_class[c] / double(counts[c]) : 1.0;
    }
    if (n) out.mean = acc / double(n);
    return out;
}

/// Window origins along one axis: stride max(1, floor(patch (1 - overlap))),
/// with a final window flush against the far edge.
inline std::vector<std::size_t> window_starts(std::size_t extent, std::size_t patch, double overlap) {
    if (patch == 0 || patch > extent)
        throw std::invalid_argument("window_starts: patch " + std::to_string(patch) + " does not fit extent " +
                                    std::to_string(extent));
    if (!(overlap >= 0.0 && overlap < 1.0)) throw std::invalid_argument("window_starts: overlap must be in [0, 1)");
    const std::size_t stride = std::max<std::size_t>(1, std::size_t(std::floor(double(patch) * (1.0 - overlap))));
    std::vector<std::size_t> out;
    for (std::size_t s = 0; s + patch <= extent; s += stride) out.push_back(s);
    if (out.back() + patch != extent) out.push_back(extent - patch);
    return out;
}

struct SlidingWindowOptions {
    double overlap = 0.5;
    double shift_fraction = 0.0;  // applied to every window's location signal
    std::size_t batch_size = 4;
};

/// Averaged logits [K, D, H, W] over all windows. `predict` maps a batch
/// [N, 1, p0, p1, p2] and its locations to logits [N, K, p0, p1, p2].
template <typename Predict>
std::vector<float> sliding_window_logits(Predict&& predict, const Volume& volume, const Index3& patch_shape,
                                         std::size_t num_classes, const SlidingWindowOptions& opt = {}) {
    volume.validate();
    std::vector<Index3> origins;
    const auto sd = window_starts(volume.shape[0], patch_shape[0], opt.overlap);
    const auto sh = window_starts(volume.shape[1], patch_shape[1], opt.overlap);
    const auto sw = window_starts(volume.shape[2], patch_shape[2], opt.overlap);
    for (auto d : sd)
        for (auto h : sh)
            for (auto w : sw) origins.push_back({d, h, w});

    const std::size_t V = volume.voxels(), P = volume_of(patch_shape);
    std::vector<double> acc(num_classes * V, 0.0);
    std::vector<std::uint32_t> hits(V, 0);
    const std::size_t B = std::max<std::size_t>(1, opt.batch_size);
    for (std::size_t first = 0; first < origins.size(); first += B) {
        const std::size_t n = std::min(B, origins.size() - first);
        std::vector<float> batch(n * P);
        std::vector<PatchLocation> locs;
        for (std::size_t i = 0; i < n; ++i) {
            const auto loc = make_location(volume, origins[first + i], patch_shape).shifted(opt.shift_fraction);
            const auto patch = extract_patch(volume, loc);
            std::copy(patch.intensities.begin(), patch.intensities.end(), batch.begin() + i * P);
            locs.push_back(loc);
        }
        const Tensor<float> logits =
            predict(Tensor<float>(Shape{n, 1, patch_shape[0], patch_shape[1], patch_shape[2]}, std::move(batch)),
                    std::span<const PatchLocation>(locs));
        if (logits.shape() != Shape{n, num_classes, patch_shape[0], patch_shape[1], patch_shape[2]})
            throw ShapeError("sliding_window: predictor returned " + shape_str(logits.shape()));
        const auto& lv = logits.data();
        for (std::size_t i = 0; i < n; ++i) {
            const auto& o = origins[first + i];
            for (std::size_t d = 0; d < patch_shape[0]; ++d)
                for (std::size_t h = 0; h < patch_shape[1]; ++h)
                    for (std::size_t w = 0; w < patch_shape[2]; ++w) {
                        const std::size_t pv = (d * patch_shape[1] + h) * patch_shape[2] + w;
                        const std::size_t vv = volume.index(o[0] + d, o[1] + h, o[2] + w);
                        ++hits[vv];
                        for (std::size_t k = 0; k < num_classes; ++k)
                            acc[k * V + vv] += lv[(i * num_classes + k) * P + pv];
                    }
        }
    }
    std::vector<float> out(num_classes * V);
    for (std::size_t k = 0; k < num_classes; ++k)
        for (std::size_t v = 0; v < V; ++v) out[k * V + v] = static_cast<float>(acc[k * V + v] / double(hits[v]));
    return out;
}

/// Per-voxel argmax over [K, V] scores; ties resolve to the lower class.
inline Labelmap argmax_labels(const std::vector<float>& scores, std::size_t num_classes) {
    const std::size_t V = scores.size() / num_classes;
    Labelmap out(V, 0);
    for (std::size_t v = 0; v < V; ++v) {
        float best = scores[v];
        for (std::size_t k = 1; k < num_classes; ++k)
            if (scores[k * V + v] > best) {
                best = scores[k * V + v];
                out[v] = static_cast<std::uint8_t>(k);
            }
    }
    return out;
}

template <typename T>
Labelmap sliding_window_predict(const Model<T>& model, const Volume& volume, const Index3& patch_shape,
                                const SlidingWindowOptions& opt = {}) {
    NoGradGuard no_grad;
    auto predict = [&](const Tensor<float>& x, std::span<const PatchLocation> locs) -> Tensor<float> {
        if constexpr (std::is_same_v<T, float>) {
            return forward(model, x, locs);
        } else {
            auto y = forward(model, Tensor<T>(x.shape(), std::vector<T>(x.data().begin(), x.data().end())), locs);
            return Tensor<float>(y.shape(), std::vector<float>(y.data().begin(), y.data().end()));
        }
    };
    const std::size_t K = model.config().num_classes;
    return argmax_labels(sliding_window_logits(predict, volume, patch_shape, K, opt), K);
}

struct Evaluation {
    std::vector<DiceReport> per_volume;
    DiceReport summary;
    std::vector<Labelmap> predictions;
};

/// Sliding-window Dice over labeled volumes.
template <typename T>
Evaluation evaluate(const Model<T>& model, const std::vector<Volume>& volumes, const Index3& patch_shape,
                    const SlidingWindowOptions& opt = {}, bool keep_predictions = false) {
    Evaluation ev;
    for (const auto& v : volumes) {
        if (!v.has_labels()) throw std::invalid_argument("evaluate: volume without labels");
        auto pred = sliding_window_predict(model, v, patch_shape, opt);
        ev.per_volume.push_back(dice_report(pred, v.labels, model.config().num_classes));
        if (keep_predictions) ev.predictions.push_back(std::move(pred));
    }
    ev.summary = aggregate(ev.per_volume);
    return ev;
}

}  // namespace locseg
