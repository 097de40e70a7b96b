// 3D U-Net with optional location integration: CoordConv input channels or
// LocBAM axis gates after the second encoder stage.
#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>

#include "locseg/conv.hpp"
#include "locseg/data.hpp"
#include "locseg/location.hpp"

namespace locseg {

enum class LocationMode { none, coordconv, locbam };

inline const char* to_string(LocationMode m) {
    switch (m) {
        case LocationMode::none: return "none";
        case LocationMode::coordconv: return "coordconv";
        case LocationMode::locbam: return "locbam";
    }
    return "?";
}

inline LocationMode location_mode_from_string(const std::string& s) {
    if (s == "none" || s == "baseline") return LocationMode::none;
    if (s == "coordconv") return LocationMode::coordconv;
    if (s == "locbam") return LocationMode::locbam;
    throw std::invalid_argument("unknown location mode '" + s + "' (expected none|coordconv|locbam)");
}

struct ModelConfig {
    std::size_t in_channels = 1;
    std::size_t num_classes = 3;
    std::size_t base_channels = 8;
    std::size_t depth = 3;
    LocationMode location_mode = LocationMode::none;
    std::size_t locbam_reduction = 4;
    std::size_t locbam_kernel = 3;
    std::size_t pe_dim = 8;
    double leaky_slope = 0.01;
    double norm_eps = 1e-5;

    void validate() const {
        auto fail = [](const std::string& m) { throw std::invalid_argument("model config: " + m); };
        if (in_channels == 0) fail("in_channels must be >= 1");
        if (num_classes < 2) fail("num_classes must be >= 2");
        if (base_channels == 0) fail("base_channels must be >= 1");
        if (depth < 2) fail("depth must be >= 2 (location attention sits in the second encoder stage)");
        if (depth > 6) fail("depth must be <= 6");
        if (locbam_reduction == 0 || base_channels % locbam_reduction != 0)
            fail("base_channels (" + std::to_string(base_channels) + ") must be divisible by locbam_reduction (" +
                 std::to_string(locbam_reduction) + ")");
        if (locbam_kernel == 0 || locbam_kernel % 2 == 0) fail("locbam_kernel must be odd");
        if (pe_dim < 2 || pe_dim % 2 != 0) fail("pe_dim must be even and >= 2");
        if (!(norm_eps > 0)) fail("norm_eps must be positive");
    }

    std::size_t stage_channels(std::size_t stage) const { return base_channels << stage; }
    /// Extents must be multiples of this.
    std::size_t size_divisor() const { return std::size_t{1} << (depth - 1); }
    std::size_t stem_channels() const {
        return in_channels + (location_mode == LocationMode::coordconv ? 3 : 0);
    }

    bool operator==(const ModelConfig&) const = default;
};

/// Sinusoidal encoding [pe_dim, L]: channel 2i = sin(c / w_i), 2i+1 = cos(c / w_i),
/// w_i = 10000^(2i / pe_dim).
template <typename T>
Tensor<T> positional_encoding(const std::vector<double>& coords, std::size_t pe_dim) {
    if (pe_dim < 2 || pe_dim % 2) throw ShapeError("positional_encoding: pe_dim must be even and >= 2");
    const std::size_t L = coords.size();
    std::vector<T> v(pe_dim * L);
    for (std::size_t i = 0; i < pe_dim / 2; ++i) {
        const double omega = std::pow(10000.0, 2.0 * double(i) / double(pe_dim));
        for (std::size_t l = 0; l < L; ++l) {
            v[(2 * i) * L + l] = static_cast<T>(std::sin(coords[l] / omega));
            v[(2 * i + 1) * L + l] = static_cast<T>(std::cos(coords[l] / omega));
        }
    }
    return Tensor<T>(Shape{pe_dim, L}, std::move(v));
}

template <typename T>
class Model {
public:
    using Param = std::pair<std::string, Tensor<T>>;

    const ModelConfig& config() const { return config_; }
    const std::vector<Param>& named_parameters() const { return params_; }

    std::vector<Tensor<T>> parameters() const {
        std::vector<Tensor<T>> out;
        for (const auto& [_, t] : params_) out.push_back(t);
        return out;
    }

    const Tensor<T>& param(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::out_of_range("model has no parameter '" + name + "'");
        return params_[it->second].second;
    }
    Tensor<T>& param(const std::string& name) {
        return const_cast<Tensor<T>&>(static_cast<const Model&>(*this).param(name));
    }
    bool has_param(const std::string& name) const { return index_.count(name) != 0; }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& [_, t] : params_) n += t.numel();
        return n;
    }

    /// Adds a zero-filled parameter; used by builders and checkpoint loading.
    Tensor<T>& add_param(const std::string& name, const Shape& shape) {
        if (has_param(name)) throw std::invalid_argument("duplicate parameter '" + name + "'");
        index_[name] = params_.size();
        params_.emplace_back(name, Tensor<T>::zeros(shape, true));
        return params_.back().second;
    }

    explicit Model(ModelConfig config) : config_(std::move(config)) { config_.validate(); }

private:
    ModelConfig config_;
    std::vector<Param> params_;
    std::map<std::string, std::size_t> index_;
};

namespace detail {

/// Deterministic per-parameter stream: identical (seed, name) pairs draw identical values
/// regardless of which other parameters exist.
inline std::mt19937_64 param_rng(std::uint64_t seed, const std::string& name) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : name) h = (h ^ c) * 1099511628211ull;
    std::seed_seq seq{std::uint32_t(seed), std::uint32_t(seed >> 32), std::uint32_t(h), std::uint32_t(h >> 32)};
    return std::mt19937_64(seq);
}

template <typename T>
void he_init(Tensor<T>& w, std::size_t fan_in, std::uint64_t seed, const std::string& name) {
    auto rng = param_rng(seed, name);
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / double(fan_in)));
    for (auto& v : w.data()) v = static_cast<T>(dist(rng));
}

template <typename T>
void add_conv(Model<T>& m, const std::string& name, std::size_t cin, std::size_t cout, std::size_t k,
              std::uint64_t seed, bool with_bias = true) {
    auto& w = m.add_param(name + ".weight", Shape{cout, cin, k, k, k});
    he_init(w, cin * k * k * k, seed, name + ".weight");
    if (with_bias) m.add_param(name + ".bias", Shape{cout});
}

template <typename T>
void add_norm(Model<T>& m, const std::string& name, std::size_t c) {
    auto& g = m.add_param(name + ".gamma", Shape{c});
    std::fill(g.data().begin(), g.data().end(), T(1));
    m.add_param(name + ".beta", Shape{c});
}

// Convolutions feeding instance norm carry no bias: the normalization
// subtracts any per-channel constant, so its gradient is identically zero.
template <typename T>
void add_block(Model<T>& m, const std::string& name, std::size_t cin, std::size_t cout, std::uint64_t seed) {
    add_conv(m, name + ".conv0", cin, cout, 3, seed, false);
    add_norm(m, name + ".norm0", cout);
    add_conv(m, name + ".conv1", cout, cout, 3, seed, false);
    add_norm(m, name + ".norm1", cout);
}

inline constexpr Axis kAxes[] = {Axis::D, Axis::H, Axis::W};

inline std::string locbam_name(Axis a, const char* part) { return std::string("locbam.") + axis_name(a) + "." + part; }

}  // namespace detail

/// Parameters are He-initialized from per-name streams of `seed`. The LocBAM
/// fusion convolution starts at zero so the network begins as the baseline.
template <typename T>
Model<T> build_model(const ModelConfig& config, std::uint64_t seed) {
    Model<T> m(config);
    const std::size_t D = config.depth;
    for (std::size_t s = 0; s < D; ++s) {
        const std::size_t cin = s == 0 ? config.stem_channels() : config.stage_channels(s - 1);
        detail::add_block(m, "enc" + std::to_string(s), cin, config.stage_channels(s), seed);
    }
    if (config.location_mode == LocationMode::locbam) {
        const std::size_t C = config.stage_channels(1), hidden = C / config.locbam_reduction, k = config.locbam_kernel;
        for (Axis a : detail::kAxes) {
            auto& scale = m.add_param(detail::locbam_name(a, "pe_scale"), Shape{config.pe_dim});
            std::fill(scale.data().begin(), scale.data().end(), T(1));
            m.add_param(detail::locbam_name(a, "pe_shift"), Shape{config.pe_dim});
            auto& w1 = m.add_param(detail::locbam_name(a, "conv0.weight"), Shape{hidden, C + config.pe_dim, k});
            detail::he_init(w1, (C + config.pe_dim) * k, seed, detail::locbam_name(a, "conv0.weight"));
            m.add_param(detail::locbam_name(a, "conv0.bias"), Shape{hidden});
            auto& w2 = m.add_param(detail::locbam_name(a, "conv1.weight"), Shape{C, hidden, k});
            detail::he_init(w2, hidden * k, seed, detail::locbam_name(a, "conv1.weight"));
            m.add_param(detail::locbam_name(a, "conv1.bias"), Shape{C});
        }
        m.add_param("locbam.fuse.weight", Shape{C, 3 * C, 1, 1, 1});
        m.add_param("locbam.fuse.bias", Shape{C});
    }
    for (std::size_t s = D - 1; s-- > 0;) {
        const std::size_t c = config.stage_channels(s), cup = config.stage_channels(s + 1);
        const std::string name = "dec" + std::to_string(s);
        auto& up = m.add_param(name + ".up.weight", Shape{cup, c, 2, 2, 2});
        detail::he_init(up, cup, seed, name + ".up.weight");
        m.add_param(name + ".up.bias", Shape{c});
        detail::add_block(m, name, 2 * c, c, seed);
    }
    detail::add_conv(m, "head", config.stage_channels(0), config.num_classes, 1, seed);
    return m;
}

namespace detail {

template <typename T>
Tensor<T> conv_block(const Model<T>& m, const std::string& name, Tensor<T> x) {
    const T slope = static_cast<T>(m.config().leaky_slope), eps = static_cast<T>(m.config().norm_eps);
    for (int i = 0; i < 2; ++i) {
        const std::string c = name + ".conv" + std::to_string(i), n = name + ".norm" + std::to_string(i);
        const auto& w = m.param(c + ".weight");
        x = conv3d(x, w, Tensor<T>::zeros({w.size(0)}), {1, 1, 1}, {1, 1, 1});
        x = instance_norm(x, m.param(n + ".gamma"), m.param(n + ".beta"), eps);
        x = leaky_relu(x, slope);
    }
    return x;
}

/// Per-sample coordinates along `axis` at the resolution of a feature map
/// whose extent along that axis is `feature_extent`.
inline std::vector<double> feature_coords(const PatchLocation& loc, Axis axis, std::size_t feature_extent) {
    const std::size_t patch_extent = loc.patch_shape[static_cast<int>(axis)];
    if (feature_extent == 0 || patch_extent % feature_extent != 0)
        throw ShapeError(std::string("location: patch extent ") + std::to_string(patch_extent) + " along " +
                         axis_name(axis) + " is not a multiple of feature extent " + std::to_string(feature_extent));
    return downsample_coords(normalized_coords(loc, axis), patch_extent / feature_extent);
}

}  // namespace detail

/// Sigmoid gate [N,C,L] along `axis` from explicit per-sample global
/// coordinates (one per feature slice): pooled features and their positional
/// encoding pass through two 1D convs.
template <typename T>
Tensor<T> locbam_axis_gate_at(const Model<T>& m, const Tensor<T>& features, Axis axis,
                              const std::vector<std::vector<double>>& coords) {
    const auto& cfg = m.config();
    detail::require_5d(features.shape(), "locbam_axis_gate");
    const std::size_t N = features.size(0), L = features.size(2 + static_cast<int>(axis));
    detail::require(features.size(1) == cfg.stage_channels(1),
                    "locbam_axis_gate: expected " + std::to_string(cfg.stage_channels(1)) + " channels, got " +
                        shape_str(features.shape()));
    detail::require(coords.size() == N, "locbam_axis_gate: " + std::to_string(coords.size()) +
                                            " locations for a batch of " + std::to_string(N));
    std::vector<T> pe_values;
    pe_values.reserve(N * cfg.pe_dim * L);
    for (const auto& c : coords) {
        detail::require(c.size() == L, "locbam_axis_gate: " + std::to_string(c.size()) + " coordinates for extent " +
                                           std::to_string(L) + " along " + axis_name(axis));
        auto pe = positional_encoding<T>(c, cfg.pe_dim);
        pe_values.insert(pe_values.end(), pe.data().begin(), pe.data().end());
    }
    Tensor<T> pe(Shape{N, cfg.pe_dim, L}, std::move(pe_values));
    pe = channel_affine(pe, m.param(detail::locbam_name(axis, "pe_scale")),
                        m.param(detail::locbam_name(axis, "pe_shift")));
    auto x = concat<T>({pool_avg_over_axes(features, axis), pe}, 1);
    const std::size_t pad = cfg.locbam_kernel / 2;
    x = conv1d(x, m.param(detail::locbam_name(axis, "conv0.weight")), m.param(detail::locbam_name(axis, "conv0.bias")),
               1, pad);
    x = leaky_relu(x, static_cast<T>(cfg.leaky_slope));
    x = conv1d(x, m.param(detail::locbam_name(axis, "conv1.weight")), m.param(detail::locbam_name(axis, "conv1.bias")),
               1, pad);
    return sigmoid(x);
}

/// Gate along `axis` for patches placed at `locations`; coordinates are
/// averaged down to the feature resolution.
template <typename T>
Tensor<T> locbam_axis_gate(const Model<T>& m, const Tensor<T>& features, Axis axis,
                           std::span<const PatchLocation> locations) {
    detail::require_5d(features.shape(), "locbam_axis_gate");
    const std::size_t L = features.size(2 + static_cast<int>(axis));
    std::vector<std::vector<double>> coords;
    for (const auto& loc : locations) coords.push_back(detail::feature_coords(loc, axis, L));
    return locbam_axis_gate_at(m, features, axis, coords);
}

/// features + fuse(concat(gate_D * features, gate_H * features, gate_W * features)).
template <typename T>
Tensor<T> locbam_forward(const Model<T>& m, const Tensor<T>& features, std::span<const PatchLocation> locations) {
    std::vector<Tensor<T>> gated;
    for (Axis a : detail::kAxes) gated.push_back(broadcast_mul(locbam_axis_gate(m, features, a, locations), features, a));
    auto fused = conv3d(concat(gated, 1), m.param("locbam.fuse.weight"), m.param("locbam.fuse.bias"));
    return add(features, fused);
}

/// Logits [N,K,D,H,W] for a patch batch [N,Cin,D,H,W]. Location modes need
/// one PatchLocation per sample; mode none ignores them.
template <typename T>
Tensor<T> forward(const Model<T>& m, const Tensor<T>& patch, std::span<const PatchLocation> locations = {}) {
    const auto& cfg = m.config();
    detail::require_5d(patch.shape(), "forward");
    detail::require(patch.size(1) == cfg.in_channels, "forward: model expects " + std::to_string(cfg.in_channels) +
                                                          " input channels, got " + shape_str(patch.shape()));
    for (int a = 2; a < 5; ++a)
        detail::require(patch.size(a) % cfg.size_divisor() == 0,
                        "forward: patch extents " + shape_str(patch.shape()) + " must be multiples of " +
                            std::to_string(cfg.size_divisor()));
    const std::size_t N = patch.size(0);
    if (cfg.location_mode != LocationMode::none) {
        if (locations.size() != N)
            throw std::invalid_argument(std::string("forward: location mode '") + to_string(cfg.location_mode) +
                                        "' requires one patch location per sample");
        for (const auto& loc : locations)
            detail::require(loc.patch_shape == Index3{patch.size(2), patch.size(3), patch.size(4)},
                            "forward: location patch shape " + index3_str(loc.patch_shape) +
                                " does not match input " + shape_str(patch.shape()));
    }

    Tensor<T> x = patch;
    if (cfg.location_mode == LocationMode::coordconv) {
        const std::size_t S = patch.numel() / (N * cfg.in_channels);
        std::vector<T> v;
        v.reserve(N * (cfg.in_channels + 3) * S);
        for (std::size_t n = 0; n < N; ++n) {
            v.insert(v.end(), patch.data().begin() + n * cfg.in_channels * S,
                     patch.data().begin() + (n + 1) * cfg.in_channels * S);
            auto cc = coord_channels<T>(locations[n]);
            v.insert(v.end(), cc.data().begin(), cc.data().end());
        }
        // The patch is data, never a trainable leaf, so concatenation happens on raw buffers.
        x = Tensor<T>(Shape{N, cfg.in_channels + 3, patch.size(2), patch.size(3), patch.size(4)}, std::move(v));
    }

    std::vector<Tensor<T>> skips;
    for (std::size_t s = 0; s < cfg.depth; ++s) {
        x = detail::conv_block(m, "enc" + std::to_string(s), x);
        if (s == 1 && cfg.location_mode == LocationMode::locbam) x = locbam_forward(m, x, locations);
        if (s + 1 < cfg.depth) {
            skips.push_back(x);
            x = max_pool3d(x);
        }
    }
    for (std::size_t s = cfg.depth - 1; s-- > 0;) {
        const std::string name = "dec" + std::to_string(s);
        x = up_conv3d(x, m.param(name + ".up.weight"), m.param(name + ".up.bias"));
        x = concat<T>({x, skips[s]}, 1);
        x = detail::conv_block(m, name, x);
    }
    return conv3d(x, m.param("head.weight"), m.param("head.bias"));
}

template <typename T>
Tensor<T> forward(const Model<T>& m, const Tensor<T>& patch, const PatchLocation& location) {
    return forward(m, patch, std::span<const PatchLocation>(&location, 1));
}

// ---------------------------------------------------------------------------
// Checkpoints: "LSCK01" text header with config and parameter table,
// a blank line, then little-endian float32 parameter blobs in table order.

inline std::string model_config_text(const ModelConfig& c) {
    std::ostringstream os;
    os << std::setprecision(17);
    os << "config.in_channels: " << c.in_channels << '\n'
       << "config.num_classes: " << c.num_classes << '\n'
       << "config.base_channels: " << c.base_channels << '\n'
       << "config.depth: " << c.depth << '\n'
       << "config.location_mode: " << to_string(c.location_mode) << '\n'
       << "config.locbam_reduction: " << c.locbam_reduction << '\n'
       << "config.locbam_kernel: " << c.locbam_kernel << '\n'
       << "config.pe_dim: " << c.pe_dim << '\n'
       << "config.leaky_slope: " << c.leaky_slope << '\n'
       << "config.norm_eps: " << c.norm_eps << '\n';
    return os.str();
}

template <typename T>
void save_checkpoint(const Model<T>& m, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("checkpoint: cannot open " + path.string() + " for writing");
    os << "LSCK01\n" << model_config_text(m.config());
    for (const auto& [name, t] : m.named_parameters()) {
        os << "param: " << name;
        for (auto e : t.shape()) os << ' ' << e;
        os << '\n';
    }
    os << '\n';
    for (const auto& [name, t] : m.named_parameters()) {
        std::vector<float> blob(t.data().begin(), t.data().end());
        detail::write_le(os, blob);
    }
    if (!os) throw FormatError("checkpoint: write failed for " + path.string());
}

template <typename T>
Model<T> load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("checkpoint: cannot open " + path.string());
    std::string line;
    if (!std::getline(is, line) || line != "LSCK01") throw FormatError("checkpoint: bad magic in " + path.string());
    ModelConfig cfg;
    std::vector<std::pair<std::string, Shape>> table;
    bool saw_blank = false;
    while (std::getline(is, line)) {
        if (line.empty()) {
            saw_blank = true;
            break;
        }
        const auto colon = line.find(':');
        if (colon == std::string::npos) throw FormatError("checkpoint: malformed header line '" + line + "'");
        const std::string key = line.substr(0, colon);
        std::istringstream f(line.substr(colon + 1));
        if (key == "param") {
            std::string name;
            f >> name;
            Shape s;
            std::size_t e;
            while (f >> e) s.push_back(e);
            table.emplace_back(name, s);
            continue;
        }
        std::string mode;
        if (key == "config.in_channels") f >> cfg.in_channels;
        else if (key == "config.num_classes") f >> cfg.num_classes;
        else if (key == "config.base_channels") f >> cfg.base_channels;
        else if (key == "config.depth") f >> cfg.depth;
        else if (key == "config.location_mode") { f >> mode; cfg.location_mode = location_mode_from_string(mode); }
        else if (key == "config.locbam_reduction") f >> cfg.locbam_reduction;
        else if (key == "config.locbam_kernel") f >> cfg.locbam_kernel;
        else if (key == "config.pe_dim") f >> cfg.pe_dim;
        else if (key == "config.leaky_slope") f >> cfg.leaky_slope;
        else if (key == "config.norm_eps") f >> cfg.norm_eps;
        else throw FormatError("checkpoint: unknown header key '" + key + "'");
        if (f.fail()) throw FormatError("checkpoint: cannot parse '" + line + "'");
    }
    if (!saw_blank) throw FormatError("checkpoint: truncated header in " + path.string());
    // Rebuilding from the config validates that the table matches the architecture.
    Model<T> m = build_model<T>(cfg, 0);
    if (table.size() != m.named_parameters().size())
        throw FormatError("checkpoint: parameter table does not match configured architecture");
    for (const auto& [name, shape] : table) {
        if (!m.has_param(name) || m.param(name).shape() != shape)
            throw FormatError("checkpoint: unexpected parameter '" + name + "' " + shape_str(shape));
        std::vector<float> blob(numel(shape));
        detail::read_le(is, blob, "parameter " + name);
        auto& dst = m.param(name).data();
        for (std::size_t i = 0; i < blob.size(); ++i) dst[i] = static_cast<T>(blob[i]);
    }
    return m;
}

}  // namespace locseg
