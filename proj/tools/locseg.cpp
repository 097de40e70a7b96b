// locseg: command-line entry point. See README for the config schema of
// each subcommand.
#include <CLI11.hpp>

#include "locseg/cli.hpp"

int main(int argc, char** argv) {
    CLI::App app{"Location-aware 3D segmentation experiments on synthetic volumes"};
    app.require_subcommand(1);

    struct Flags {
        std::string config;
        std::uint64_t seed = 0;
        std::string out;
        std::size_t threads = 1;
    };
    std::vector<std::pair<CLI::App*, std::unique_ptr<Flags>>> commands;
    auto add = [&](const char* name, const char* help, bool config_required) {
        auto* sub = app.add_subcommand(name, help);
        auto flags = std::make_unique<Flags>();
        auto* cfg = sub->add_option("--config", flags->config, "JSON run config")->check(CLI::ExistingFile);
        if (config_required) cfg->required();
        sub->add_option("--seed", flags->seed, "RNG seed (overrides the config)");
        sub->add_option("--out", flags->out, "output directory (overrides the config)");
        sub->add_option("--threads", flags->threads, "worker threads for sweep cells")->check(CLI::PositiveNumber);
        commands.emplace_back(sub, std::move(flags));
    };
    add("gen-data", "write a synthetic dataset and its manifest", true);
    add("train", "train one model; writes checkpoint and training curves", true);
    add("eval", "sliding-window Dice of a checkpoint on a dataset split", true);
    add("postprocess", "largest-component filtering or atlas masking of predictions", true);
    add("sweep", "patch-to-volume coverage or axial-shift sweep", true);
    add("gradcheck", "finite-difference check of every differentiable op", false);

    CLI11_PARSE(app, argc, argv);

    for (auto& [sub, flags] : commands) {
        if (!sub->parsed()) continue;
        locseg::cli::Overrides ov;
        if (sub->count("--seed")) ov.seed = flags->seed;
        if (sub->count("--out")) ov.out = flags->out;
        if (sub->count("--threads")) ov.threads = flags->threads;
        return locseg::cli::run(sub->get_name(), flags->config, ov);
    }
    return locseg::cli::kBadConfig;
}
