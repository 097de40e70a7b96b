// Experiment protocols: axial-shift robustness and patch-to-volume coverage.
#pragma once

#include <atomic>
#include <mutex>
#include <thread>

#include "locseg/train.hpp"

namespace locseg {

/// Calls fn(i) for every i in [0, n) from up to `threads` workers. Tasks must
/// be independent; fn must not throw.
inline void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
    threads = std::max<std::size_t>(1, std::min(threads, n));
    if (threads == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t)
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) fn(i);
        });
    for (auto& th : pool) th.join();
}

inline const std::vector<double>& default_shift_fractions() {
    static const std::vector<double> f{0.0, 0.01, 0.05, 0.10, 0.25, 0.50, 1.00};
    return f;
}

/// One (mode, patch, shift, seed) setting and its score.
struct SweepCell {
    LocationMode mode = LocationMode::none;
    Index3 patch_shape{0, 0, 0};
    Index3 volume_shape{0, 0, 0};
    double shift_fraction = 0.0;
    std::uint64_t seed = 0;
    DiceReport report;
    bool converged = true;
    bool failed = false;
    std::string error;   // set when failed
    std::string source;  // what was evaluated, e.g. a checkpoint path; may be empty

    double ptvc() const { return locseg::ptvc(patch_shape, volume_shape); }
};

struct SweepResult {
    std::vector<SweepCell> cells;

    std::vector<const SweepCell*> select(LocationMode mode) const {
        std::vector<const SweepCell*> out;
        for (const auto& c : cells)
            if (c.mode == mode) out.push_back(&c);
        return out;
    }
    bool any_failed() const {
        return std::any_of(cells.begin(), cells.end(), [](const SweepCell& c) { return c.failed; });
    }
};

inline std::string percent_str(double x) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(2) << x << '%';
    return os.str();
}

/// One row per cell: source, mode, patch, ptvc, shift, seed, per-class Dice, mean.
inline void write_sweep_csv(const SweepResult& r, std::ostream& os) {
    std::size_t C = 0;
    for (const auto& c : r.cells) C = std::max(C, c.report.per_class.size());
    os << "source,mode,patch,ptvc_percent,shift,seed";
    for (std::size_t k = 1; k <= C; ++k) os << ",dice_class" << k;
    os << ",mean,converged,failed\n";
    os << std::setprecision(9);
    for (const auto& c : r.cells) {
        os << c.source << ',' << to_string(c.mode) << ',' << c.patch_shape[0] << 'x' << c.patch_shape[1] << 'x' << c.patch_shape[2] << ','
           << c.ptvc() << ',' << c.shift_fraction << ',' << c.seed;
        for (std::size_t k = 0; k < C; ++k) {
            os << ',';
            if (k < c.report.per_class.size() && !c.failed) os << c.report.per_class[k];
        }
        os << ',';
        if (!c.failed) os << c.report.mean;
        os << ',' << (c.converged ? 1 : 0) << ',' << (c.failed ? 1 : 0) << '\n';
    }
}

inline void write_sweep_csv(const SweepResult& r, const std::filesystem::path& path) {
    std::ofstream os(path);
    if (!os) throw FormatError("cannot write " + path.string());
    write_sweep_csv(r, os);
}

// ---------------------------------------------------------------------------
// Shift sweep

/// Evaluates one trained model with its axial location signal shifted by each
/// fraction. Voxels are never moved.
template <typename T>
SweepResult shift_sweep(const Model<T>& model, const std::vector<Volume>& volumes, const Index3& patch_shape,
                        const std::vector<double>& fractions = default_shift_fractions(), double overlap = 0.5,
                        std::uint64_t seed = 0) {
    if (volumes.empty()) throw std::invalid_argument("shift_sweep: no volumes");
    SweepResult r;
    for (double f : fractions) {
        SweepCell c;
        c.mode = model.config().location_mode;
        c.patch_shape = patch_shape;
        c.volume_shape = volumes.front().shape;
        c.shift_fraction = f;
        c.seed = seed;
        c.report = evaluate(model, volumes, patch_shape, SlidingWindowOptions{overlap, f, 4}).summary;
        r.cells.push_back(std::move(c));
    }
    return r;
}

/// Mean Dice never rises as the shift grows (cells taken in the given order).
inline bool monotone_degradation(const std::vector<const SweepCell*>& curve, double tolerance = 0.0) {
    for (std::size_t i = 1; i < curve.size(); ++i)
        if (curve[i]->report.mean > curve[i - 1]->report.mean + tolerance) return false;
    return true;
}

/// One block per (source, mode) curve: shift and mean Dice, with the
/// monotone flag. Failed cells print as FAILED.
inline void write_shift_table(const SweepResult& r, std::ostream& os) {
    std::vector<std::pair<std::string, LocationMode>> curves;
    for (const auto& c : r.cells)
        if (std::find(curves.begin(), curves.end(), std::pair{c.source, c.mode}) == curves.end())
            curves.emplace_back(c.source, c.mode);
    for (const auto& [source, mode] : curves) {
        std::vector<const SweepCell*> curve;
        for (const auto& c : r.cells)
            if (c.source == source && c.mode == mode) curve.push_back(&c);
        const bool failed = std::any_of(curve.begin(), curve.end(), [](const SweepCell* c) { return c->failed; });
        os << (source.empty() ? "" : source + "  ") << "mode " << to_string(mode);
        if (failed)
            os << " (FAILED: " << curve.front()->error << ")\n";
        else
            os << (monotone_degradation(curve) ? " (monotone)" : " (not monotone)") << '\n';
        for (const auto* c : curve) {
            os << "  shift " << std::fixed << std::setw(6) << std::setprecision(2) << 100 * c->shift_fraction << "%  ";
            if (c->failed)
                os << "FAILED\n";
            else
                os << "mean_dice " << std::setprecision(4) << c->report.mean << '\n';
        }
        os.unsetf(std::ios::floatfield);
    }
}

// ---------------------------------------------------------------------------
// Patch-to-volume coverage sweep

struct PtvcSetting {
    Index3 patch_shape{16, 16, 16};
    std::size_t batch_size = 2;
    std::size_t iterations = 1000;
};

struct PtvcSweepOptions {
    ModelConfig model;  // location_mode is overwritten per mode
    Schedule schedule;  // patch_shape, batch_size, iterations and seed come from the setting
    std::vector<LocationMode> modes{LocationMode::none, LocationMode::locbam};
    std::vector<std::uint64_t> seeds{0};
    double eval_overlap = 0.5;
    double convergence_ratio = 0.5;
    std::size_t threads = 1;  // cells run in parallel; results do not depend on this
};

/// Converged ⇔ final mean Dice ≥ ratio × the best mode's in the same
/// (setting, seed) group.
inline void mark_convergence(SweepResult& r, double ratio) {
    for (auto& c : r.cells) {
        double best = 0;
        for (const auto& o : r.cells)
            if (!o.failed && o.patch_shape == c.patch_shape && o.seed == c.seed && o.volume_shape == c.volume_shape)
                best = std::max(best, std::isnan(o.report.mean) ? 0.0 : o.report.mean);
        c.converged = !c.failed && !std::isnan(c.report.mean) && c.report.mean >= ratio * best;
    }
}

/// Trains every mode for every setting and seed and records the final
/// sliding-window validation Dice. A cell that throws is marked failed and the
/// rest still run. `progress` is called once per finished cell, serialized.
inline SweepResult ptvc_sweep(const std::vector<PtvcSetting>& settings, const std::vector<Volume>& train_set,
                              const std::vector<Volume>& val, const PtvcSweepOptions& opt,
                              const std::function<void(const SweepCell&)>& progress = {}) {
    if (val.empty()) throw std::invalid_argument("ptvc_sweep: empty validation set");
    SweepResult r;
    std::vector<const PtvcSetting*> setting_of;
    for (const auto& st : settings)
        for (auto seed : opt.seeds)
            for (auto mode : opt.modes) {
                SweepCell c;
                c.mode = mode;
                c.patch_shape = st.patch_shape;
                c.volume_shape = val.front().shape;
                c.seed = seed;
                r.cells.push_back(std::move(c));
                setting_of.push_back(&st);
            }
    std::mutex progress_mutex;
    parallel_for(r.cells.size(), opt.threads, [&](std::size_t i) {
        SweepCell& c = r.cells[i];
        const PtvcSetting& st = *setting_of[i];
        try {
            ModelConfig mc = opt.model;
            mc.location_mode = c.mode;
            auto model = build_model<float>(mc, c.seed);
            Schedule s = opt.schedule;
            s.patch_shape = st.patch_shape;
            s.batch_size = st.batch_size;
            s.iterations = st.iterations;
            s.seed = c.seed;
            train(model, train_set, {}, s);
            c.report = evaluate(model, val, st.patch_shape, SlidingWindowOptions{opt.eval_overlap, 0.0, 4}).summary;
        } catch (const std::exception& e) {
            c.failed = true;
            c.error = e.what();
        }
        if (progress) {
            std::lock_guard lock(progress_mutex);
            progress(c);
        }
    });
    mark_convergence(r, opt.convergence_ratio);
    return r;
}

/// (with - without) / without, as a percentage.
inline double relative_gain(double with_location, double without) {
    return 100.0 * (with_location - without) / without;
}

inline double median(std::vector<double> v) {
    if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Per setting, each mode's median mean Dice over seeds
/// and the relative gain of every location mode over the baseline.
inline void write_ptvc_table(const SweepResult& r, std::ostream& os) {
    std::vector<Index3> patches;
    for (const auto& c : r.cells)
        if (std::find(patches.begin(), patches.end(), c.patch_shape) == patches.end()) patches.push_back(c.patch_shape);
    os << std::fixed;
    for (const auto& p : patches) {
        std::vector<LocationMode> modes;
        for (const auto& c : r.cells)
            if (c.patch_shape == p && std::find(modes.begin(), modes.end(), c.mode) == modes.end())
                modes.push_back(c.mode);
        const SweepCell* any = nullptr;
        for (const auto& c : r.cells)
            if (c.patch_shape == p) any = &c;
        os << "patch " << index3_str(p) << "  PtVC " << percent_str(any->ptvc()) << '\n';
        double base = std::numeric_limits<double>::quiet_NaN();
        for (auto m : modes) {
            std::vector<double> v;
            std::size_t converged = 0, n = 0;
            for (const auto& c : r.cells)
                if (c.patch_shape == p && c.mode == m && !c.failed) {
                    v.push_back(c.report.mean);
                    converged += c.converged;
                    ++n;
                }
            const double med = median(v);
            if (m == LocationMode::none) base = med;
            os << "  " << std::setw(9) << to_string(m) << "  median_dice " << std::setprecision(2) << 100 * med
               << "  converged " << converged << '/' << n;
            if (m != LocationMode::none && !std::isnan(base) && base > 0)
                os << "  gain " << percent_str(relative_gain(med, base));
            os << '\n';
        }
    }
    os.unsetf(std::ios::floatfield);
}

}  // namespace locseg
