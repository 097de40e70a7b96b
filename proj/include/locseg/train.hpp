// Deterministic patch-based training loop.
#pragma once

#include <functional>

#include "locseg/eval.hpp"
#include "locseg/loss.hpp"
#include "locseg/optim.hpp"

namespace locseg {

struct Schedule {
    std::size_t iterations = 1000;
    std::size_t batch_size = 2;
    Index3 patch_shape{16, 16, 16};
    double lr = 0.01;
    double momentum = 0.99;
    double weight_decay = 3e-5;
    bool nesterov = true;
    double poly_power = 0.9;
    double grad_clip = 12.0;  // max global gradient norm; 0 disables
    double foreground_probability = 0.33;
    std::size_t epochs = 4;  // validation points, evenly spaced over the iterations
    double val_overlap = 0.0;
    double stop_at_val_dice = std::numeric_limits<double>::quiet_NaN();  // stop early once reached; NaN disables
    std::uint64_t seed = 0;

    void validate() const {
        if (batch_size == 0) throw std::invalid_argument("schedule: batch_size must be >= 1");
        if (epochs == 0) throw std::invalid_argument("schedule: epochs must be >= 1");
        if (!(lr > 0)) throw std::invalid_argument("schedule: lr must be positive");
        if (momentum < 0 || momentum >= 1) throw std::invalid_argument("schedule: momentum must be in [0, 1)");
        if (foreground_probability < 0 || foreground_probability > 1)
            throw std::invalid_argument("schedule: foreground_probability must be in [0, 1]");
        if (grad_clip < 0) throw std::invalid_argument("schedule: grad_clip must be >= 0");
    }
};

struct EpochRecord {
    std::size_t epoch = 0;
    std::size_t iteration = 0;  // iterations completed
    double train_loss = 0.0;    // mean over the epoch's iterations
    double val_dice = std::numeric_limits<double>::quiet_NaN();
};

struct TrainingLog {
    std::vector<double> iteration_loss;
    std::vector<EpochRecord> epochs;

    double final_val_dice() const {
        return epochs.empty() ? std::numeric_limits<double>::quiet_NaN() : epochs.back().val_dice;
    }
};

inline void write_curve_csv(const TrainingLog& log, const std::filesystem::path& path) {
    std::ofstream os(path);
    if (!os) throw FormatError("cannot write " + path.string());
    os << std::setprecision(9) << "epoch,iteration,loss,val_dice\n";
    for (const auto& e : log.epochs) os << e.epoch << ',' << e.iteration << ',' << e.train_loss << ',' << e.val_dice << '\n';
}

inline void write_iteration_csv(const TrainingLog& log, const std::filesystem::path& path) {
    std::ofstream os(path);
    if (!os) throw FormatError("cannot write " + path.string());
    os << std::setprecision(9) << "iteration,loss\n";
    for (std::size_t i = 0; i < log.iteration_loss.size(); ++i) os << i + 1 << ',' << log.iteration_loss[i] << '\n';
}

namespace detail {

template <typename T>
double clip_grad_norm(const std::vector<Tensor<T>>& params, double max_norm) {
    double sq = 0;
    for (const auto& p : params)
        for (T g : p.grad()) sq += double(g) * double(g);
    const double norm = std::sqrt(sq);
    if (max_norm > 0 && norm > max_norm) {
        const T scale = static_cast<T>(max_norm / (norm + 1e-6));
        for (auto p : params)
            for (auto& g : p.mutable_grad()) g *= scale;
    }
    return norm;
}

}  // namespace detail

/// Assembles one batch: intensities [N,1,p0,p1,p2], labels and locations.
struct Batch {
    Tensor<float> input;
    std::vector<std::uint8_t> labels;
    std::vector<PatchLocation> locations;
};

inline Batch sample_batch(const std::vector<Volume>& volumes, const std::vector<ForegroundIndex>& fg,
                          const Schedule& s, std::mt19937_64& rng) {
    const std::size_t P = volume_of(s.patch_shape);
    std::vector<float> x(s.batch_size * P);
    Batch b;
    b.labels.resize(s.batch_size * P);
    std::uniform_int_distribution<std::size_t> pick(0, volumes.size() - 1);
    for (std::size_t n = 0; n < s.batch_size; ++n) {
        const std::size_t v = pick(rng);
        auto patch = sample_patch(volumes[v], s.patch_shape, rng, &fg[v], s.foreground_probability);
        std::copy(patch.intensities.begin(), patch.intensities.end(), x.begin() + n * P);
        std::copy(patch.labels.begin(), patch.labels.end(), b.labels.begin() + n * P);
        b.locations.push_back(patch.location);
    }
    b.input = Tensor<float>(Shape{s.batch_size, 1, s.patch_shape[0], s.patch_shape[1], s.patch_shape[2]}, std::move(x));
    return b;
}

using ProgressFn = std::function<void(const EpochRecord&)>;

/// Trains in place for schedule.iterations steps of SGD on Dice + CE. The
/// iterations are split into `epochs` equal spans; after each span the model
/// is scored on `val` by sliding windows. Deterministic given schedule.seed.
inline TrainingLog train(Model<float>& model, const std::vector<Volume>& train_set, const std::vector<Volume>& val,
                         const Schedule& s, const ProgressFn& progress = {}) {
    s.validate();
    if (train_set.empty()) throw std::invalid_argument("train: empty training set");
    for (const auto& v : train_set) {
        v.validate();
        if (!v.has_labels()) throw std::invalid_argument("train: training volume without labels");
    }
    std::vector<ForegroundIndex> fg;
    for (const auto& v : train_set) fg.emplace_back(v);

    TrainingLog log;
    if (s.iterations == 0) return log;
    std::mt19937_64 rng(s.seed);
    auto params = model.parameters();
    Sgd<float> opt(params, SgdOptions{s.lr, s.momentum, s.weight_decay, s.nesterov});
    const std::size_t epochs = std::min(s.epochs, s.iterations);
    std::size_t epoch_start = 0;
    for (std::size_t it = 0; it < s.iterations; ++it) {
        const Batch batch = sample_batch(train_set, fg, s, rng);
        opt.zero_grad();
        auto loss = dice_ce_loss(forward(model, batch.input, batch.locations), batch.labels);
        backward(loss);
        detail::clip_grad_norm(params, s.grad_clip);
        opt.step(poly_lr(s.lr, it, s.iterations, s.poly_power));
        log.iteration_loss.push_back(loss.item());

        const std::size_t epoch = log.epochs.size();
        if (it + 1 == (epoch + 1) * s.iterations / epochs) {
            EpochRecord rec;
            rec.epoch = epoch + 1;
            rec.iteration = it + 1;
            double acc = 0;
            for (std::size_t j = epoch_start; j <= it; ++j) acc += log.iteration_loss[j];
            rec.train_loss = acc / double(it + 1 - epoch_start);
            epoch_start = it + 1;
            if (!val.empty())
                rec.val_dice = evaluate(model, val, s.patch_shape, {s.val_overlap, 0.0, 4}).summary.mean;
            log.epochs.push_back(rec);
            if (progress) progress(rec);
            if (rec.val_dice >= s.stop_at_val_dice) break;
        }
    }
    return log;
}

}  // namespace locseg
