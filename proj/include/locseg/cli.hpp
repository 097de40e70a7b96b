// Subcommands behind the locseg executable. Each takes a parsed JSON run
// config, writes its outputs plus resolved_config.json into the output
// directory and returns the process exit code.
#pragma once

#include <json.hpp>

#include "locseg/gradcheck_suite.hpp"
#include "locseg/postprocess.hpp"
#include "locseg/sweep.hpp"

namespace locseg::cli {

using json = nlohmann::ordered_json;

enum ExitCode : int { kOk = 0, kFailed = 1, kBadConfig = 2, kPartialSweep = 3 };

/// Invalid or unknown configuration; maps to kBadConfig.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Values given on the command line; they win over the config file.
struct Overrides {
    std::optional<std::uint64_t> seed;
    std::optional<std::filesystem::path> out;
    std::optional<std::size_t> threads;
};

struct RunContext {
    std::uint64_t seed = 0;
    std::filesystem::path out;
    std::size_t threads = 1;
    std::filesystem::path base_dir;  // relative input paths resolve against this (the config file's directory)
    std::ostream* log = &std::cerr;

    std::filesystem::path input(const std::string& p) const {
        std::filesystem::path path(p);
        return path.is_absolute() || base_dir.empty() ? path : base_dir / path;
    }
};

// ---------------------------------------------------------------------------
// Config reading

namespace detail {

inline void check_keys(const json& j, std::initializer_list<std::string_view> allowed, const std::string& where) {
    if (!j.is_object()) throw ConfigError(where + ": expected an object");
    for (const auto& [key, _] : j.items())
        if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
            std::string list;
            for (auto a : allowed) list += (list.empty() ? "" : ", ") + std::string(a);
            throw ConfigError(where + ": unknown key '" + key + "' (allowed: " + list + ")");
        }
}

template <typename V>
void read(const json& j, const char* key, V& out, const std::string& where) {
    if (!j.contains(key)) return;
    try {
        if constexpr (std::is_unsigned_v<V> && !std::is_same_v<V, bool>) {
            if (!j.at(key).is_number_unsigned()) throw ConfigError("expected a non-negative integer");
        }
        out = j.at(key).get<V>();
    } catch (const std::exception& e) {
        throw ConfigError(where + "." + key + ": " + e.what());
    }
}

inline void read_index3(const json& j, const char* key, Index3& out, const std::string& where) {
    if (!j.contains(key)) return;
    const auto& v = j.at(key);
    if (!v.is_array() || v.size() != 3 || !std::all_of(v.begin(), v.end(), [](const json& e) {
            return e.is_number_unsigned() && e.get<std::size_t>() > 0;
        }))
        throw ConfigError(where + "." + key + ": expected three positive integers");
    for (int a = 0; a < 3; ++a) out[a] = v[a].get<std::size_t>();
}

inline const json& section(const json& j, const char* key, const std::string& where) {
    static const json empty = json::object();
    if (!j.contains(key)) return empty;
    if (!j.at(key).is_object()) throw ConfigError(where + "." + key + ": expected an object");
    return j.at(key);
}

inline std::string require_string(const json& j, const char* key, const std::string& where) {
    if (!j.contains(key) || !j.at(key).is_string()) throw ConfigError(where + "." + key + ": required string");
    return j.at(key).get<std::string>();
}

inline json index3_json(const Index3& s) { return json::array({s[0], s[1], s[2]}); }

}  // namespace detail

inline ModelConfig model_config_from_json(const json& j, const std::string& where = "model") {
    detail::check_keys(j,
                       {"in_channels", "num_classes", "base_channels", "depth", "location_mode", "locbam_reduction",
                        "locbam_kernel", "pe_dim", "leaky_slope", "norm_eps"},
                       where);
    ModelConfig c;
    detail::read(j, "in_channels", c.in_channels, where);
    detail::read(j, "num_classes", c.num_classes, where);
    detail::read(j, "base_channels", c.base_channels, where);
    detail::read(j, "depth", c.depth, where);
    std::string mode = to_string(c.location_mode);
    detail::read(j, "location_mode", mode, where);
    try {
        c.location_mode = location_mode_from_string(mode);
    } catch (const std::exception& e) {
        throw ConfigError(where + ".location_mode: " + e.what());
    }
    detail::read(j, "locbam_reduction", c.locbam_reduction, where);
    detail::read(j, "locbam_kernel", c.locbam_kernel, where);
    detail::read(j, "pe_dim", c.pe_dim, where);
    detail::read(j, "leaky_slope", c.leaky_slope, where);
    detail::read(j, "norm_eps", c.norm_eps, where);
    try {
        c.validate();
    } catch (const std::exception& e) {
        throw ConfigError(e.what());
    }
    return c;
}

inline json to_json(const ModelConfig& c) {
    return json{{"in_channels", c.in_channels},   {"num_classes", c.num_classes},
                {"base_channels", c.base_channels}, {"depth", c.depth},
                {"location_mode", to_string(c.location_mode)},
                {"locbam_reduction", c.locbam_reduction}, {"locbam_kernel", c.locbam_kernel},
                {"pe_dim", c.pe_dim},               {"leaky_slope", c.leaky_slope},
                {"norm_eps", c.norm_eps}};
}

/// The seed is not read here; every command takes it from the run.
inline Schedule schedule_from_json(const json& j, const std::string& where = "schedule") {
    detail::check_keys(j,
                       {"iterations", "batch_size", "patch_shape", "lr", "momentum", "weight_decay", "nesterov",
                        "poly_power", "grad_clip", "foreground_probability", "epochs", "val_overlap",
                        "stop_at_val_dice"},
                       where);
    Schedule s;
    detail::read(j, "iterations", s.iterations, where);
    detail::read(j, "batch_size", s.batch_size, where);
    detail::read_index3(j, "patch_shape", s.patch_shape, where);
    detail::read(j, "lr", s.lr, where);
    detail::read(j, "momentum", s.momentum, where);
    detail::read(j, "weight_decay", s.weight_decay, where);
    detail::read(j, "nesterov", s.nesterov, where);
    detail::read(j, "poly_power", s.poly_power, where);
    detail::read(j, "grad_clip", s.grad_clip, where);
    detail::read(j, "foreground_probability", s.foreground_probability, where);
    detail::read(j, "epochs", s.epochs, where);
    detail::read(j, "val_overlap", s.val_overlap, where);
    if (j.contains("stop_at_val_dice") && !j.at("stop_at_val_dice").is_null())
        detail::read(j, "stop_at_val_dice", s.stop_at_val_dice, where);
    try {
        s.validate();
    } catch (const std::exception& e) {
        throw ConfigError(e.what());
    }
    return s;
}

inline json to_json(const Schedule& s) {
    json j{{"iterations", s.iterations},
           {"batch_size", s.batch_size},
           {"patch_shape", detail::index3_json(s.patch_shape)},
           {"lr", s.lr},
           {"momentum", s.momentum},
           {"weight_decay", s.weight_decay},
           {"nesterov", s.nesterov},
           {"poly_power", s.poly_power},
           {"grad_clip", s.grad_clip},
           {"foreground_probability", s.foreground_probability},
           {"epochs", s.epochs},
           {"val_overlap", s.val_overlap}};
    j["stop_at_val_dice"] = std::isnan(s.stop_at_val_dice) ? json(nullptr) : json(s.stop_at_val_dice);
    return j;
}

inline SyntheticConfig synthetic_config_from_json(const json& j, const std::string& where = "data") {
    detail::check_keys(j,
                       {"volume_shape", "spacing", "num_classes", "num_volumes", "ambiguity_mode", "blob_radius_min",
                        "blob_radius_max", "blobs_per_class", "noise_sigma", "background_intensity", "fov_jitter",
                        "lower_band", "upper_band"},
                       where);
    SyntheticConfig c;
    detail::read_index3(j, "volume_shape", c.volume_shape, where);
    detail::read(j, "spacing", c.spacing, where);
    detail::read(j, "num_classes", c.num_classes, where);
    detail::read(j, "num_volumes", c.num_volumes, where);
    std::string mode = to_string(c.ambiguity_mode);
    detail::read(j, "ambiguity_mode", mode, where);
    try {
        c.ambiguity_mode = ambiguity_mode_from_string(mode);
    } catch (const std::exception& e) {
        throw ConfigError(where + ".ambiguity_mode: " + e.what());
    }
    detail::read(j, "blob_radius_min", c.blob_radius_min, where);
    detail::read(j, "blob_radius_max", c.blob_radius_max, where);
    detail::read(j, "blobs_per_class", c.blobs_per_class, where);
    detail::read(j, "noise_sigma", c.noise_sigma, where);
    detail::read(j, "background_intensity", c.background_intensity, where);
    detail::read(j, "fov_jitter", c.fov_jitter, where);
    detail::read(j, "lower_band", c.lower_band, where);
    detail::read(j, "upper_band", c.upper_band, where);
    try {
        c.validate();
    } catch (const std::exception& e) {
        throw ConfigError(e.what());
    }
    return c;
}

inline json to_json(const SyntheticConfig& c) {
    return json{{"volume_shape", detail::index3_json(c.volume_shape)},
                {"spacing", c.spacing},
                {"num_classes", c.num_classes},
                {"num_volumes", c.num_volumes},
                {"ambiguity_mode", to_string(c.ambiguity_mode)},
                {"blob_radius_min", c.blob_radius_min},
                {"blob_radius_max", c.blob_radius_max},
                {"blobs_per_class", c.blobs_per_class},
                {"noise_sigma", c.noise_sigma},
                {"background_intensity", c.background_intensity},
                {"fov_jitter", c.fov_jitter},
                {"lower_band", c.lower_band},
                {"upper_band", c.upper_band}};
}

/// Fills seed, out and threads from the config, then applies the overrides.
inline RunContext make_context(const json& config, const Overrides& ov, const std::filesystem::path& base_dir,
                               bool out_required = true) {
    RunContext ctx;
    ctx.base_dir = base_dir;
    detail::read(config, "seed", ctx.seed, "config");
    detail::read(config, "threads", ctx.threads, "config");
    if (config.contains("out")) ctx.out = ctx.input(detail::require_string(config, "out", "config"));
    if (ov.seed) ctx.seed = *ov.seed;
    if (ov.out) ctx.out = *ov.out;
    if (ov.threads) ctx.threads = *ov.threads;
    if (ctx.threads == 0) throw ConfigError("threads must be >= 1");
    if (out_required && ctx.out.empty()) throw ConfigError("no output directory: pass --out or set \"out\"");
    return ctx;
}

inline void write_resolved_config(const RunContext& ctx, json resolved) {
    resolved["seed"] = ctx.seed;
    resolved["out"] = ctx.out.generic_string();
    resolved["threads"] = ctx.threads;
    std::filesystem::create_directories(ctx.out);
    std::ofstream os(ctx.out / "resolved_config.json");
    if (!os) throw FormatError("cannot write " + (ctx.out / "resolved_config.json").string());
    os << resolved.dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// Shared output helpers

/// volume,dice_class1..K-1,mean; NaN (no class present) is written as "nan".
inline void write_dice_csv(const std::vector<std::pair<std::string, DiceReport>>& rows, const std::filesystem::path& path,
                           const std::string& extra_header = "", const std::vector<std::string>& extra = {}) {
    std::ofstream os(path);
    if (!os) throw FormatError("cannot write " + path.string());
    const std::size_t C = rows.empty() ? 0 : rows.front().second.per_class.size();
    os << (extra_header.empty() ? "" : extra_header + ",") << "volume";
    for (std::size_t k = 1; k <= C; ++k) os << ",dice_class" << k;
    os << ",mean\n" << std::setprecision(9);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (!extra_header.empty()) os << extra[i] << ',';
        os << rows[i].first;
        for (double d : rows[i].second.per_class) os << ',' << d;
        os << ',' << rows[i].second.mean << '\n';
    }
}

struct LoadedSplit {
    Manifest manifest;
    std::vector<std::filesystem::path> paths;
    std::vector<Volume> volumes;
};

inline LoadedSplit load_manifest_split(const RunContext& ctx, const std::string& manifest, const std::string& split) {
    LoadedSplit s;
    s.manifest = read_manifest(ctx.input(manifest));
    try {
        s.paths = s.manifest.split(split);
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    for (const auto& p : s.paths) s.volumes.push_back(read_volume(p));
    return s;
}

// ---------------------------------------------------------------------------
// gen-data

inline int cmd_gen_data(const json& config, const RunContext& ctx) {
    detail::check_keys(config, {"seed", "out", "threads", "data", "split"}, "config");
    SyntheticConfig sc = synthetic_config_from_json(detail::section(config, "data", "config"));
    sc.seed = ctx.seed;
    const json& split = detail::section(config, "split", "config");
    detail::check_keys(split, {"train", "val", "test"}, "split");
    std::size_t counts[3] = {sc.num_volumes, 0, 0};
    if (!split.empty()) counts[0] = 0;
    detail::read(split, "train", counts[0], "split");
    detail::read(split, "val", counts[1], "split");
    detail::read(split, "test", counts[2], "split");
    if (counts[0] + counts[1] + counts[2] != sc.num_volumes)
        throw ConfigError("split: train + val + test must equal data.num_volumes (" + std::to_string(sc.num_volumes) +
                          ")");
    write_resolved_config(ctx, json{{"data", to_json(sc)},
                                    {"split", {{"train", counts[0]}, {"val", counts[1]}, {"test", counts[2]}}}});

    *ctx.log << "gen-data: " << sc.num_volumes << " volumes of " << index3_str(sc.volume_shape) << '\n';
    const auto volumes = generate(sc);
    Manifest m;
    m.common_fov = sc.fov_jitter == 0.0;
    for (std::size_t i = 0; i < volumes.size(); ++i) {
        std::ostringstream name;
        name << "vol_" << std::setw(3) << std::setfill('0') << i << ".rv01";
        write_volume(volumes[i], ctx.out / name.str());
        const char* which = i < counts[0] ? "train" : i < counts[0] + counts[1] ? "val" : "test";
        m.split(which).push_back(name.str());
    }
    write_manifest(m, ctx.out / "manifest.txt");
    return kOk;
}

// ---------------------------------------------------------------------------
// train

inline int cmd_train(const json& config, const RunContext& ctx) {
    detail::check_keys(config, {"seed", "out", "threads", "data", "model", "schedule"}, "config");
    const json& data = detail::section(config, "data", "config");
    detail::check_keys(data, {"manifest", "train_split", "val_split"}, "data");
    const std::string manifest = detail::require_string(data, "manifest", "data");
    std::string train_split = "train", val_split = "val";
    detail::read(data, "train_split", train_split, "data");
    detail::read(data, "val_split", val_split, "data");
    const ModelConfig mc = model_config_from_json(detail::section(config, "model", "config"));
    Schedule s = schedule_from_json(detail::section(config, "schedule", "config"));
    s.seed = ctx.seed;
    write_resolved_config(ctx, json{{"data", {{"manifest", manifest}, {"train_split", train_split}, {"val_split", val_split}}},
                                    {"model", to_json(mc)},
                                    {"schedule", to_json(s)}});

    const auto train_set = load_manifest_split(ctx, manifest, train_split).volumes;
    const auto val = val_split.empty() ? std::vector<Volume>{} : load_manifest_split(ctx, manifest, val_split).volumes;
    *ctx.log << "train: " << to_string(mc.location_mode) << ", " << train_set.size() << " train / " << val.size()
             << " val volumes, " << s.iterations << " iterations\n";
    auto model = build_model<float>(mc, ctx.seed);
    const auto log = train(model, train_set, val, s, [&](const EpochRecord& r) {
        *ctx.log << "  epoch " << r.epoch << "  iteration " << r.iteration << "  loss " << r.train_loss
                 << "  val_dice " << r.val_dice << '\n';
    });
    save_checkpoint(model, ctx.out / "checkpoint.lsck");
    write_curve_csv(log, ctx.out / "curve.csv");
    write_iteration_csv(log, ctx.out / "loss.csv");
    return kOk;
}

// ---------------------------------------------------------------------------
// eval

struct EvalSettings {
    Index3 patch_shape{16, 16, 16};
    SlidingWindowOptions window;
};

inline EvalSettings eval_settings_from_json(const json& j, const std::string& where = "eval") {
    detail::check_keys(j, {"patch_shape", "overlap", "shift_fraction", "batch_size"}, where);
    EvalSettings e;
    detail::read_index3(j, "patch_shape", e.patch_shape, where);
    detail::read(j, "overlap", e.window.overlap, where);
    detail::read(j, "shift_fraction", e.window.shift_fraction, where);
    detail::read(j, "batch_size", e.window.batch_size, where);
    if (e.window.overlap < 0 || e.window.overlap >= 1) throw ConfigError(where + ".overlap must be in [0, 1)");
    if (e.window.batch_size == 0) throw ConfigError(where + ".batch_size must be >= 1");
    return e;
}

inline json to_json(const EvalSettings& e) {
    return json{{"patch_shape", detail::index3_json(e.patch_shape)},
                {"overlap", e.window.overlap},
                {"shift_fraction", e.window.shift_fraction},
                {"batch_size", e.window.batch_size}};
}

inline int cmd_eval(const json& config, const RunContext& ctx) {
    detail::check_keys(config, {"seed", "out", "threads", "checkpoint", "data", "eval", "save_predictions"}, "config");
    const std::string checkpoint = detail::require_string(config, "checkpoint", "config");
    const json& data = detail::section(config, "data", "config");
    detail::check_keys(data, {"manifest", "split"}, "data");
    const std::string manifest = detail::require_string(data, "manifest", "data");
    std::string split = "test";
    detail::read(data, "split", split, "data");
    const EvalSettings es = eval_settings_from_json(detail::section(config, "eval", "config"));
    bool save = true;
    detail::read(config, "save_predictions", save, "config");
    write_resolved_config(ctx, json{{"checkpoint", checkpoint},
                                    {"data", {{"manifest", manifest}, {"split", split}}},
                                    {"eval", to_json(es)},
                                    {"save_predictions", save}});

    const auto model = load_checkpoint<float>(ctx.input(checkpoint));
    const auto loaded = load_manifest_split(ctx, manifest, split);
    *ctx.log << "eval: " << loaded.volumes.size() << " volumes, patch " << index3_str(es.patch_shape) << '\n';
    const auto ev = evaluate(model, loaded.volumes, es.patch_shape, es.window, save);
    std::vector<std::pair<std::string, DiceReport>> rows;
    for (std::size_t i = 0; i < ev.per_volume.size(); ++i)
        rows.emplace_back(loaded.paths[i].stem().string(), ev.per_volume[i]);
    rows.emplace_back("all", ev.summary);
    write_dice_csv(rows, ctx.out / "dice.csv");
    *ctx.log << "  mean dice " << ev.summary.mean << '\n';
    if (save) {
        Manifest pm;
        pm.common_fov = loaded.manifest.common_fov;
        for (std::size_t i = 0; i < ev.predictions.size(); ++i) {
            Volume p = loaded.volumes[i];
            p.labels = ev.predictions[i];
            const std::string name = "pred_" + loaded.paths[i].stem().string() + ".rv01";
            write_volume(p, ctx.out / name);
            pm.split(split).push_back(name);
        }
        write_manifest(pm, ctx.out / "predictions.txt");
    }
    return kOk;
}

// ---------------------------------------------------------------------------
// postprocess

inline int cmd_postprocess(const json& config, const RunContext& ctx) {
    detail::check_keys(config,
                       {"seed", "out", "threads", "mode", "data", "predictions", "num_classes", "connectivity", "atlas"},
                       "config");
    const std::string mode = detail::require_string(config, "mode", "config");
    if (mode != "lcf" && mode != "atlas") throw ConfigError("config.mode: expected lcf|atlas, got '" + mode + "'");
    const json& data = detail::section(config, "data", "config");
    detail::check_keys(data, {"manifest", "split"}, "data");
    const std::string manifest = detail::require_string(data, "manifest", "data");
    std::string split = "test";
    detail::read(data, "split", split, "data");
    const std::string predictions = detail::require_string(config, "predictions", "config");
    std::size_t num_classes = 3;
    int connectivity = 26;
    detail::read(config, "num_classes", num_classes, "config");
    detail::read(config, "connectivity", connectivity, "config");
    if (num_classes < 2) throw ConfigError("config.num_classes must be >= 2");
    if (connectivity != 6 && connectivity != 26) throw ConfigError("config.connectivity must be 6 or 26");

    const json& atlas_cfg = detail::section(config, "atlas", "config");
    detail::check_keys(atlas_cfg, {"source_split", "threshold", "radius", "radii", "tune_predictions", "tune_split"},
                       "atlas");
    std::string source_split = "train", tune_split = "val", tune_predictions;
    double threshold = 0.0;
    std::optional<std::size_t> radius;
    std::vector<std::size_t> radii{0, 1, 2, 3, 4, 5};
    detail::read(atlas_cfg, "source_split", source_split, "atlas");
    detail::read(atlas_cfg, "threshold", threshold, "atlas");
    if (atlas_cfg.contains("radius") && !atlas_cfg.at("radius").is_null()) {
        std::size_t r = 0;
        detail::read(atlas_cfg, "radius", r, "atlas");
        radius = r;
    }
    detail::read(atlas_cfg, "radii", radii, "atlas");
    detail::read(atlas_cfg, "tune_predictions", tune_predictions, "atlas");
    detail::read(atlas_cfg, "tune_split", tune_split, "atlas");
    if (mode == "atlas" && !radius && tune_predictions.empty())
        throw ConfigError("atlas: set either radius or tune_predictions (to choose the radius on a held-out split)");

    json resolved{{"mode", mode},
                  {"data", {{"manifest", manifest}, {"split", split}}},
                  {"predictions", predictions},
                  {"num_classes", num_classes},
                  {"connectivity", connectivity}};
    if (mode == "atlas")
        resolved["atlas"] = json{{"source_split", source_split},
                                 {"threshold", threshold},
                                 {"radius", radius ? json(*radius) : json(nullptr)},
                                 {"radii", radii},
                                 {"tune_predictions", tune_predictions},
                                 {"tune_split", tune_split}};
    write_resolved_config(ctx, resolved);

    const auto refs = load_manifest_split(ctx, manifest, split);
    const auto preds = load_manifest_split(ctx, predictions, split);
    if (preds.volumes.size() != refs.volumes.size())
        throw ConfigError("predictions list " + std::to_string(preds.volumes.size()) + " volumes for split '" + split +
                          "', the dataset has " + std::to_string(refs.volumes.size()));
    for (std::size_t i = 0; i < refs.volumes.size(); ++i)
        if (preds.volumes[i].shape != refs.volumes[i].shape || !preds.volumes[i].has_labels())
            throw ConfigError("prediction " + preds.paths[i].string() + " does not match " + refs.paths[i].string());

    std::function<Labelmap(const Volume&)> filter;
    Atlas atlas;
    if (mode == "lcf") {
        filter = [&](const Volume& p) { return largest_component_filter(p.labels, p.shape, num_classes, connectivity); };
    } else {
        if (!refs.manifest.common_fov)
            throw ConfigError("atlas masking needs volumes that share a field of view; the dataset manifest does not "
                              "declare common_fov 1");
        const auto source = load_manifest_split(ctx, manifest, source_split).volumes;
        atlas = build_atlas(source, num_classes);
        atlas.threshold = threshold;
        if (radius) {
            atlas.dilation_radius = *radius;
        } else {
            const auto tune_refs = load_manifest_split(ctx, manifest, tune_split).volumes;
            const auto tune_preds = load_manifest_split(ctx, tune_predictions, tune_split).volumes;
            if (tune_refs.size() != tune_preds.size() || tune_refs.empty())
                throw ConfigError("atlas: tune_predictions must pair one-to-one with split '" + tune_split + "'");
            std::vector<Labelmap> p, r;
            std::vector<Index3> shapes;
            for (std::size_t i = 0; i < tune_refs.size(); ++i) {
                p.push_back(tune_preds[i].labels);
                r.push_back(tune_refs[i].labels);
                shapes.push_back(tune_refs[i].shape);
            }
            const auto search = optimize_dilation(atlas, p, r, shapes, radii);
            atlas.dilation_radius = search.radius;
            *ctx.log << "postprocess: dilation radius " << search.radius << " chosen on split '" << tune_split << "'\n";
        }
        write_atlas(atlas, ctx.out / "atlas.txt");
        filter = [&](const Volume& p) { return atlas_mask(p.labels, p.shape, atlas); };
    }

    std::vector<std::pair<std::string, DiceReport>> rows;
    std::vector<std::string> stages;
    std::vector<DiceReport> before, after;
    Manifest fm;
    fm.common_fov = refs.manifest.common_fov;
    for (std::size_t i = 0; i < refs.volumes.size(); ++i) {
        Volume filtered = preds.volumes[i];
        filtered.labels = filter(preds.volumes[i]);
        const std::string stem = refs.paths[i].stem().string();
        before.push_back(dice_report(preds.volumes[i].labels, refs.volumes[i].labels, num_classes));
        after.push_back(dice_report(filtered.labels, refs.volumes[i].labels, num_classes));
        rows.emplace_back(stem, before.back());
        stages.push_back("raw");
        rows.emplace_back(stem, after.back());
        stages.push_back(mode);
        const std::string name = mode + "_" + stem + ".rv01";
        write_volume(filtered, ctx.out / name);
        fm.split(split).push_back(name);
    }
    rows.emplace_back("all", aggregate(before));
    stages.push_back("raw");
    rows.emplace_back("all", aggregate(after));
    stages.push_back(mode);
    write_dice_csv(rows, ctx.out / "dice.csv", "stage", stages);
    write_manifest(fm, ctx.out / "filtered.txt");
    *ctx.log << "postprocess " << mode << ": mean dice " << rows[rows.size() - 2].second.mean << " -> "
             << rows.back().second.mean << '\n';
    return kOk;
}

// ---------------------------------------------------------------------------
// sweep

inline int cmd_sweep_ptvc(const json& config, const RunContext& ctx) {
    detail::check_keys(config,
                       {"seed", "out", "threads", "axis", "data", "model", "schedule", "settings", "modes", "seeds",
                        "eval_overlap", "convergence_ratio"},
                       "config");
    const json& data = detail::section(config, "data", "config");
    detail::check_keys(data, {"manifest", "train_split", "val_split"}, "data");
    const std::string manifest = detail::require_string(data, "manifest", "data");
    std::string train_split = "train", val_split = "val";
    detail::read(data, "train_split", train_split, "data");
    detail::read(data, "val_split", val_split, "data");
    PtvcSweepOptions opt;
    opt.model = model_config_from_json(detail::section(config, "model", "config"));
    opt.schedule = schedule_from_json(detail::section(config, "schedule", "config"));
    opt.threads = ctx.threads;
    opt.seeds = {ctx.seed};
    detail::read(config, "seeds", opt.seeds, "config");
    detail::read(config, "eval_overlap", opt.eval_overlap, "config");
    detail::read(config, "convergence_ratio", opt.convergence_ratio, "config");
    if (config.contains("modes")) {
        std::vector<std::string> names;
        detail::read(config, "modes", names, "config");
        opt.modes.clear();
        try {
            for (const auto& n : names) opt.modes.push_back(location_mode_from_string(n));
        } catch (const std::exception& e) {
            throw ConfigError(std::string("config.modes: ") + e.what());
        }
    }
    if (!config.contains("settings") || !config.at("settings").is_array() || config.at("settings").empty())
        throw ConfigError("config.settings: required non-empty list of {patch_shape, batch_size, iterations}");
    std::vector<PtvcSetting> settings;
    json settings_json = json::array();
    for (std::size_t i = 0; i < config.at("settings").size(); ++i) {
        const json& sj = config.at("settings")[i];
        const std::string where = "settings[" + std::to_string(i) + "]";
        detail::check_keys(sj, {"patch_shape", "batch_size", "iterations"}, where);
        PtvcSetting st;
        st.batch_size = opt.schedule.batch_size;
        st.iterations = opt.schedule.iterations;
        detail::read_index3(sj, "patch_shape", st.patch_shape, where);
        detail::read(sj, "batch_size", st.batch_size, where);
        detail::read(sj, "iterations", st.iterations, where);
        settings.push_back(st);
        settings_json.push_back(
            {{"patch_shape", detail::index3_json(st.patch_shape)}, {"batch_size", st.batch_size}, {"iterations", st.iterations}});
    }
    json modes = json::array();
    for (auto m : opt.modes) modes.push_back(to_string(m));
    write_resolved_config(ctx, json{{"axis", "ptvc"},
                                    {"data", {{"manifest", manifest}, {"train_split", train_split}, {"val_split", val_split}}},
                                    {"model", to_json(opt.model)},
                                    {"schedule", to_json(opt.schedule)},
                                    {"settings", settings_json},
                                    {"modes", modes},
                                    {"seeds", opt.seeds},
                                    {"eval_overlap", opt.eval_overlap},
                                    {"convergence_ratio", opt.convergence_ratio}});

    const auto train_set = load_manifest_split(ctx, manifest, train_split).volumes;
    const auto val = load_manifest_split(ctx, manifest, val_split).volumes;
    *ctx.log << "sweep ptvc: " << settings.size() * opt.seeds.size() * opt.modes.size() << " cells on "
             << ctx.threads << " thread(s)\n";
    const auto r = ptvc_sweep(settings, train_set, val, opt, [&](const SweepCell& c) {
        *ctx.log << "  " << to_string(c.mode) << " patch " << index3_str(c.patch_shape) << " seed " << c.seed;
        if (c.failed)
            *ctx.log << "  FAILED: " << c.error << '\n';
        else
            *ctx.log << "  mean dice " << c.report.mean << '\n';
    });
    write_sweep_csv(r, ctx.out / "sweep.csv");
    std::ofstream table(ctx.out / "ptvc_table.txt");
    write_ptvc_table(r, table);
    return r.any_failed() ? kPartialSweep : kOk;
}

inline int cmd_sweep_shift(const json& config, const RunContext& ctx) {
    detail::check_keys(config, {"seed", "out", "threads", "axis", "data", "checkpoints", "eval", "fractions"}, "config");
    const json& data = detail::section(config, "data", "config");
    detail::check_keys(data, {"manifest", "split"}, "data");
    const std::string manifest = detail::require_string(data, "manifest", "data");
    std::string split = "val";
    detail::read(data, "split", split, "data");
    std::vector<std::string> checkpoints;
    detail::read(config, "checkpoints", checkpoints, "config");
    if (checkpoints.empty()) throw ConfigError("config.checkpoints: required non-empty list of checkpoint paths");
    const EvalSettings es = eval_settings_from_json(detail::section(config, "eval", "config"));
    std::vector<double> fractions = default_shift_fractions();
    detail::read(config, "fractions", fractions, "config");
    write_resolved_config(ctx, json{{"axis", "shift"},
                                    {"data", {{"manifest", manifest}, {"split", split}}},
                                    {"checkpoints", checkpoints},
                                    {"eval", to_json(es)},
                                    {"fractions", fractions}});

    const auto volumes = load_manifest_split(ctx, manifest, split).volumes;
    if (volumes.empty()) throw ConfigError("data: split '" + split + "' is empty");
    std::vector<SweepResult> parts(checkpoints.size());
    std::mutex log_mutex;
    parallel_for(checkpoints.size(), ctx.threads, [&](std::size_t i) {
        try {
            const auto model = load_checkpoint<float>(ctx.input(checkpoints[i]));
            parts[i] = shift_sweep(model, volumes, es.patch_shape, fractions, es.window.overlap, ctx.seed);
            for (auto& c : parts[i].cells) c.source = checkpoints[i];
        } catch (const std::exception& e) {
            parts[i].cells.clear();
            for (double f : fractions) {
                SweepCell c;
                c.patch_shape = es.patch_shape;
                c.volume_shape = volumes.front().shape;
                c.shift_fraction = f;
                c.seed = ctx.seed;
                c.source = checkpoints[i];
                c.failed = true;
                c.error = e.what();
                parts[i].cells.push_back(c);
            }
        }
        std::lock_guard lock(log_mutex);
        *ctx.log << "  " << checkpoints[i] << (parts[i].any_failed() ? "  FAILED: " + parts[i].cells[0].error : "  done")
                 << '\n';
    });
    SweepResult r;
    for (auto& p : parts) r.cells.insert(r.cells.end(), p.cells.begin(), p.cells.end());
    write_sweep_csv(r, ctx.out / "sweep.csv");
    std::ofstream table(ctx.out / "shift_table.txt");
    write_shift_table(r, table);
    return r.any_failed() ? kPartialSweep : kOk;
}

inline int cmd_sweep(const json& config, const RunContext& ctx) {
    const std::string axis = detail::require_string(config, "axis", "config");
    if (axis == "ptvc") return cmd_sweep_ptvc(config, ctx);
    if (axis == "shift") return cmd_sweep_shift(config, ctx);
    throw ConfigError("config.axis: expected ptvc|shift, got '" + axis + "'");
}

// ---------------------------------------------------------------------------
// gradcheck

/// Without an output directory the table goes to `table_out`.
inline int cmd_gradcheck(const json& config, const RunContext& ctx, std::ostream& table_out) {
    detail::check_keys(config, {"seed", "out", "threads", "shapes_per_op", "max_extent", "eps", "tolerance"}, "config");
    GradCheckSuiteOptions opt;
    opt.seed = ctx.seed;
    detail::read(config, "shapes_per_op", opt.shapes_per_op, "config");
    detail::read(config, "max_extent", opt.max_extent, "config");
    detail::read(config, "eps", opt.eps, "config");
    detail::read(config, "tolerance", opt.tolerance, "config");
    if (opt.max_extent < 2) throw ConfigError("config.max_extent must be >= 2");
    const json resolved{{"shapes_per_op", opt.shapes_per_op},
                        {"max_extent", opt.max_extent},
                        {"eps", opt.eps},
                        {"tolerance", opt.tolerance}};
    if (!ctx.out.empty()) write_resolved_config(ctx, resolved);
    const auto checks = run_gradcheck_suite(opt, [&](const OpCheck& c) {
        *ctx.log << "  " << c.op << (c.passed ? "  ok\n" : "  FAIL\n");
    });
    if (ctx.out.empty()) {
        write_gradcheck_table(checks, opt.tolerance, table_out);
    } else {
        std::ofstream os(ctx.out / "gradcheck.txt");
        write_gradcheck_table(checks, opt.tolerance, os);
    }
    return all_passed(checks) ? kOk : kFailed;
}

// ---------------------------------------------------------------------------

inline json load_config(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config " + path.string());
    try {
        return json::parse(is, nullptr, true, /*ignore_comments=*/true);
    } catch (const json::parse_error& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

/// Loads the config (an empty object when `config_path` is empty), builds the
/// run context and dispatches. Errors are reported on ctx.log and mapped to
/// exit codes.
inline int run(const std::string& command, const std::filesystem::path& config_path, const Overrides& ov,
               std::ostream& log = std::cerr, std::ostream& out = std::cout) {
    try {
        const json config = config_path.empty() ? json::object() : load_config(config_path);
        if (!config.is_object()) throw ConfigError("config must be a JSON object");
        RunContext ctx = make_context(config, ov, config_path.empty() ? "" : config_path.parent_path(),
                                      command != "gradcheck");
        ctx.log = &log;
        if (command == "gen-data") return cmd_gen_data(config, ctx);
        if (command == "train") return cmd_train(config, ctx);
        if (command == "eval") return cmd_eval(config, ctx);
        if (command == "postprocess") return cmd_postprocess(config, ctx);
        if (command == "sweep") return cmd_sweep(config, ctx);
        if (command == "gradcheck") return cmd_gradcheck(config, ctx, out);
        throw ConfigError("unknown command '" + command + "'");
    } catch (const ConfigError& e) {
        log << "error: " << e.what() << '\n';
        return kBadConfig;
    } catch (const std::exception& e) {
        log << "error: " << e.what() << '\n';
        return kFailed;
    }
}

}  // namespace locseg::cli
