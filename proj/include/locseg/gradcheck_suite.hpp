// Finite-difference check of every differentiable op on random small shapes.
#pragma once

#include <optional>
#include <ostream>

#include "locseg/gradcheck.hpp"
#include "locseg/loss.hpp"
#include "locseg/model.hpp"

namespace locseg {

struct OpCheck {
    std::string op;
    std::size_t shapes = 0;
    double max_relative_error = 0.0;
    std::string worst_shape;
    bool passed = false;
};

struct GradCheckSuiteOptions {
    std::uint64_t seed = 0;
    std::size_t shapes_per_op = 10;
    std::size_t max_extent = 5;
    double eps = 1e-5;  // near cbrt(double epsilon), balancing truncation and roundoff
    double tolerance = 1e-6;
};

namespace detail {

using SuiteRng = std::mt19937_64;

inline std::size_t draw(SuiteRng& rng, std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

inline Tensord uniform_tensor(const Shape& shape, SuiteRng& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<double> v(numel(shape));
    for (auto& x : v) x = u(rng);
    return Tensord(shape, std::move(v));
}

// At least `margin` away from zero, so relu/leaky kinks stay out of reach of eps.
inline Tensord off_kink_tensor(const Shape& shape, SuiteRng& rng, double margin = 0.05) {
    std::uniform_real_distribution<double> mag(margin, 1.0);
    std::bernoulli_distribution sign(0.5);
    std::vector<double> v(numel(shape));
    for (auto& x : v) x = sign(rng) ? mag(rng) : -mag(rng);
    return Tensord(shape, std::move(v));
}

// A shuffled ladder with step 0.01: every max-pool window has a unique winner.
inline Tensord distinct_tensor(const Shape& shape, SuiteRng& rng) {
    std::vector<double> v(numel(shape));
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = 0.01 * double(i) - 0.005 * double(v.size());
    std::shuffle(v.begin(), v.end(), rng);
    return Tensord(shape, std::move(v));
}

// Projection weights with magnitude in [0.5, 1], so no output's share of the
// gradient is scaled toward the finite-difference noise floor.
inline Tensord projection(const Shape& shape, SuiteRng& rng) { return off_kink_tensor(shape, rng, 0.5); }

// sum(out * proj) with a fixed random projection.
inline Tensord project(const Tensord& out, const Tensord& proj) { return sum(mul(out, proj)); }

inline Shape spatial5(SuiteRng& rng, std::size_t N, std::size_t C, std::size_t lo, std::size_t hi) {
    return {N, C, draw(rng, lo, hi), draw(rng, lo, hi), draw(rng, lo, hi)};
}

inline Axis draw_axis(SuiteRng& rng) { return kAxes[draw(rng, 0, 2)]; }

inline ModelConfig suite_locbam_config() {
    ModelConfig c;
    c.location_mode = LocationMode::locbam;
    c.depth = 2;
    c.base_channels = 4;
    return c;
}

// He-initialized LocBAM with a random fusion conv; at its zero init the gates
// would receive no gradient at all.
inline Model<double> suite_locbam_model(SuiteRng& rng) {
    auto m = build_model<double>(suite_locbam_config(), rng());
    std::uniform_real_distribution<double> u(-0.5, 0.5);
    for (const char* name : {"locbam.fuse.weight", "locbam.fuse.bias"})
        for (auto& v : m.param(name).data()) v = u(rng);
    return m;
}

// Patch twice the feature extent, placed somewhere in a larger volume.
inline PatchLocation suite_location(SuiteRng& rng, const Shape& features) {
    PatchLocation loc;
    for (int a = 0; a < 3; ++a) {
        loc.patch_shape[a] = 2 * features[2 + a];
        loc.volume_shape[a] = loc.patch_shape[a] + draw(rng, 0, 12);
        loc.origin[a] = draw(rng, 0, loc.volume_shape[a] - loc.patch_shape[a]);
    }
    loc.bpr_map = AxialScoreMap{100.0 / double(loc.volume_shape[0] - 1), 0.0};
    return loc;
}

inline std::vector<Tensord> locbam_params(const Model<double>& m, std::optional<Axis> axis) {
    std::vector<Tensord> out;
    const std::string prefix = axis ? std::string("locbam.") + axis_name(*axis) + "." : std::string("locbam.");
    for (const auto& [name, t] : m.named_parameters())
        if (name.rfind(prefix, 0) == 0) out.push_back(t);
    return out;
}

struct SuiteCase {
    std::string shape;
    std::function<Tensord(const std::vector<Tensord>&)> f;
    std::vector<Tensord> inputs;
};

using CaseMaker = std::function<SuiteCase(SuiteRng&, std::size_t max_extent)>;

inline std::vector<std::pair<std::string, CaseMaker>> suite_ops() {
    std::vector<std::pair<std::string, CaseMaker>> ops;

    ops.emplace_back("conv3d", [](SuiteRng& rng, std::size_t E) {
        const std::size_t N = draw(rng, 1, 2), C = draw(rng, 1, 3), Co = draw(rng, 1, 3);
        const Shape xs = spatial5(rng, N, C, 1, E);
        Triple stride{}, pad{};
        Shape ws{Co, C, 0, 0, 0};
        for (int a = 0; a < 3; ++a) {
            pad[a] = draw(rng, 0, 1);
            ws[2 + a] = std::min<std::size_t>(draw(rng, 1, 3), xs[2 + a] + 2 * pad[a]);
            stride[a] = draw(rng, 1, 2);
        }
        auto proj_shape = Shape{N, Co, 0, 0, 0};
        for (int a = 0; a < 3; ++a) proj_shape[2 + a] = (xs[2 + a] + 2 * pad[a] - ws[2 + a]) / stride[a] + 1;
        auto proj = projection(proj_shape, rng);
        return SuiteCase{shape_str(xs) + " w" + shape_str(ws),
                         [=](const auto& in) { return project(conv3d(in[0], in[1], in[2], stride, pad), proj); },
                         {uniform_tensor(xs, rng), uniform_tensor(ws, rng), uniform_tensor({Co}, rng)}};
    });

    ops.emplace_back("conv1d", [](SuiteRng& rng, std::size_t E) {
        const std::size_t N = draw(rng, 1, 2), C = draw(rng, 1, 4), Co = draw(rng, 1, 4), L = draw(rng, 1, E);
        const std::size_t pad = draw(rng, 0, 1), k = std::min<std::size_t>(draw(rng, 1, 3), L + 2 * pad);
        const std::size_t stride = draw(rng, 1, 2);
        auto proj = projection({N, Co, (L + 2 * pad - k) / stride + 1}, rng);
        return SuiteCase{shape_str({N, C, L}) + " k" + std::to_string(k),
                         [=](const auto& in) { return project(conv1d(in[0], in[1], in[2], stride, pad), proj); },
                         {uniform_tensor({N, C, L}, rng), uniform_tensor({Co, C, k}, rng), uniform_tensor({Co}, rng)}};
    });

    ops.emplace_back("instance_norm", [](SuiteRng& rng, std::size_t E) {
        const std::size_t N = draw(rng, 1, 2), C = draw(rng, 1, 3);
        Shape xs = spatial5(rng, N, C, 1, E);
        if (xs[2] * xs[3] * xs[4] < 2) xs[4] = 2;  // a single voxel has no variance to normalize
        auto proj = projection(xs, rng);
        return SuiteCase{shape_str(xs),
                         [=](const auto& in) { return project(instance_norm(in[0], in[1], in[2]), proj); },
                         {uniform_tensor(xs, rng, -2, 2), uniform_tensor({C}, rng, 0.5, 1.5), uniform_tensor({C}, rng)}};
    });

    ops.emplace_back("max_pool3d", [](SuiteRng& rng, std::size_t E) {
        const Shape xs = spatial5(rng, draw(rng, 1, 2), draw(rng, 1, 2), 2, E);
        auto proj = projection({xs[0], xs[1], xs[2] / 2, xs[3] / 2, xs[4] / 2}, rng);
        return SuiteCase{shape_str(xs), [=](const auto& in) { return project(max_pool3d(in[0]), proj); },
                         {distinct_tensor(xs, rng)}};
    });

    ops.emplace_back("pool_avg", [](SuiteRng& rng, std::size_t E) {
        const Shape xs = spatial5(rng, draw(rng, 1, 2), draw(rng, 1, 3), 1, E);
        const Axis keep = draw_axis(rng);
        auto proj = projection({xs[0], xs[1], xs[2 + static_cast<int>(keep)]}, rng);
        return SuiteCase{shape_str(xs) + " keep " + axis_name(keep),
                         [=](const auto& in) { return project(pool_avg_over_axes(in[0], keep), proj); },
                         {uniform_tensor(xs, rng)}};
    });

    ops.emplace_back("up_conv3d", [](SuiteRng& rng, std::size_t E) {
        const std::size_t N = draw(rng, 1, 2), C = draw(rng, 1, 3), Co = draw(rng, 1, 3);
        const Shape xs = spatial5(rng, N, C, 1, std::max<std::size_t>(1, E / 2));
        auto proj = projection({N, Co, 2 * xs[2], 2 * xs[3], 2 * xs[4]}, rng);
        return SuiteCase{shape_str(xs) + " -> " + std::to_string(Co),
                         [=](const auto& in) { return project(up_conv3d(in[0], in[1], in[2]), proj); },
                         {uniform_tensor(xs, rng), uniform_tensor({C, Co, 2, 2, 2}, rng), uniform_tensor({Co}, rng)}};
    });

    ops.emplace_back("broadcast_mul", [](SuiteRng& rng, std::size_t E) {
        const Shape xs = spatial5(rng, draw(rng, 1, 2), draw(rng, 1, 3), 1, E);
        const Axis axis = draw_axis(rng);
        auto proj = projection(xs, rng);
        return SuiteCase{shape_str(xs) + " along " + axis_name(axis),
                         [=](const auto& in) { return project(broadcast_mul(in[0], in[1], axis), proj); },
                         {uniform_tensor({xs[0], xs[1], xs[2 + static_cast<int>(axis)]}, rng), uniform_tensor(xs, rng)}};
    });

    ops.emplace_back("sigmoid", [](SuiteRng& rng, std::size_t E) {
        const Shape xs = spatial5(rng, draw(rng, 1, 2), draw(rng, 1, 3), 1, E);
        auto proj = projection(xs, rng);
        return SuiteCase{shape_str(xs), [=](const auto& in) { return project(sigmoid(in[0]), proj); },
                         {uniform_tensor(xs, rng, -4, 4)}};
    });

    ops.emplace_back("relu", [](SuiteRng& rng, std::size_t E) {
        const Shape xs = spatial5(rng, draw(rng, 1, 2), draw(rng, 1, 3), 1, E);
        auto proj = projection(xs, rng);
        return SuiteCase{shape_str(xs), [=](const auto& in) { return project(relu(in[0]), proj); },
                         {off_kink_tensor(xs, rng)}};
    });

    ops.emplace_back("leaky_relu", [](SuiteRng& rng, std::size_t E) {
        const Shape xs = spatial5(rng, draw(rng, 1, 2), draw(rng, 1, 3), 1, E);
        const double slope = draw(rng, 0, 1) ? 0.01 : 0.2;
        auto proj = projection(xs, rng);
        return SuiteCase{shape_str(xs), [=](const auto& in) { return project(leaky_relu(in[0], slope), proj); },
                         {off_kink_tensor(xs, rng)}};
    });

    ops.emplace_back("dice_ce_loss", [](SuiteRng& rng, std::size_t E) {
        const std::size_t N = draw(rng, 1, 2), K = draw(rng, 2, 4);
        const Shape xs = spatial5(rng, N, K, 1, E);
        std::vector<std::uint8_t> target(N * xs[2] * xs[3] * xs[4]);
        for (auto& t : target) t = static_cast<std::uint8_t>(draw(rng, 0, K - 1));
        return SuiteCase{shape_str(xs), [=](const auto& in) { return dice_ce_loss(in[0], target); },
                         {uniform_tensor(xs, rng, -2, 2)}};
    });

    ops.emplace_back("locbam_axis_gate", [](SuiteRng& rng, std::size_t E) {
        auto m = std::make_shared<Model<double>>(suite_locbam_model(rng));
        const std::size_t N = draw(rng, 1, 2);
        const Shape fs = spatial5(rng, N, m->config().stage_channels(1), 1, E);
        const Axis axis = draw_axis(rng);
        std::vector<PatchLocation> locs;
        for (std::size_t n = 0; n < N; ++n) locs.push_back(suite_location(rng, fs));
        auto proj = projection({N, fs[1], fs[2 + static_cast<int>(axis)]}, rng);
        std::vector<Tensord> inputs{uniform_tensor(fs, rng, -2, 2)};
        for (auto& p : locbam_params(*m, axis)) inputs.push_back(p);
        return SuiteCase{shape_str(fs) + " along " + axis_name(axis),
                         [=](const auto& in) { return project(locbam_axis_gate(*m, in[0], axis, locs), proj); },
                         std::move(inputs)};
    });

    ops.emplace_back("locbam_forward", [](SuiteRng& rng, std::size_t E) {
        auto m = std::make_shared<Model<double>>(suite_locbam_model(rng));
        const std::size_t N = draw(rng, 1, 2);
        const Shape fs = spatial5(rng, N, m->config().stage_channels(1), 1, std::min<std::size_t>(E, 4));
        std::vector<PatchLocation> locs;
        for (std::size_t n = 0; n < N; ++n) locs.push_back(suite_location(rng, fs));
        auto proj = projection(fs, rng);
        std::vector<Tensord> inputs{uniform_tensor(fs, rng, -2, 2)};
        for (auto& p : locbam_params(*m, std::nullopt)) inputs.push_back(p);
        return SuiteCase{shape_str(fs), [=](const auto& in) { return project(locbam_forward(*m, in[0], locs), proj); },
                         std::move(inputs)};
    });

    return ops;
}

}  // namespace detail

inline std::vector<std::string> gradcheck_suite_ops() {
    std::vector<std::string> out;
    for (const auto& [name, _] : detail::suite_ops()) out.push_back(name);
    return out;
}

/// Runs every op on `shapes_per_op` random shapes at 64-bit; each op reports
/// its worst relative error. LocBAM cases check the features and the LocBAM
/// parameters together.
inline std::vector<OpCheck> run_gradcheck_suite(const GradCheckSuiteOptions& opt = {},
                                                const std::function<void(const OpCheck&)>& progress = {}) {
    std::vector<OpCheck> out;
    std::uint64_t op_index = 0;
    for (const auto& [name, make] : detail::suite_ops()) {
        OpCheck c;
        c.op = name;
        for (std::size_t i = 0; i < opt.shapes_per_op; ++i) {
            detail::SuiteRng rng(opt.seed * 1000003 + op_index * 1009 + i);
            auto sc = make(rng, opt.max_extent);
            const auto r = grad_check<double>(sc.f, sc.inputs, opt.eps);
            ++c.shapes;
            if (r.max_relative_error > c.max_relative_error || c.worst_shape.empty()) {
                c.max_relative_error = std::max(c.max_relative_error, r.max_relative_error);
                c.worst_shape = sc.shape;
            }
        }
        c.passed = c.shapes >= opt.shapes_per_op && c.max_relative_error < opt.tolerance;
        if (progress) progress(c);
        out.push_back(std::move(c));
        ++op_index;
    }
    return out;
}

inline bool all_passed(const std::vector<OpCheck>& checks) {
    return std::all_of(checks.begin(), checks.end(), [](const OpCheck& c) { return c.passed; });
}

inline void write_gradcheck_table(const std::vector<OpCheck>& checks, double tolerance, std::ostream& os) {
    os << std::left << std::setw(18) << "op" << std::setw(8) << "shapes" << std::setw(14) << "max_rel_err"
       << std::setw(6) << "pass" << "worst_shape\n";
    for (const auto& c : checks) {
        std::ostringstream err;
        err << std::scientific << std::setprecision(3) << c.max_relative_error;
        os << std::setw(18) << c.op << std::setw(8) << c.shapes << std::setw(14) << err.str() << std::setw(6)
           << (c.passed ? "PASS" : "FAIL") << c.worst_shape << '\n';
    }
    os << std::right << "tolerance " << tolerance << " (64-bit)\n";
}

}  // namespace locseg
