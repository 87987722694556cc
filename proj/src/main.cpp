#include <CLI11.hpp>

#include <iostream>

#include "arbfit/cli_io.hpp"

int main(int argc, char** argv) {
    CLI::App app{"arbitrage-free option surface fitter"};
    app.require_subcommand(1);

    std::string config_path;
    std::uint64_t seed = 0;
    bool seed_set = false;

    auto add_sub = [&](const char* name, const char* desc) {
        auto* sub = app.add_subcommand(name, desc);
        sub->add_option("--config", config_path, "JSON config file")->required();
        sub->add_option("--seed", seed, "override config seed")
            ->each([&](const std::string&) { seed_set = true; });
        return sub;
    };
    auto* c_synth = add_sub("synth", "generate a synthetic quote panel");
    auto* c_fit = add_sub("fit", "fit the surface to quotes");
    auto* c_postfit = add_sub("postfit", "fit, then run the local post-fit repair");
    auto* c_diag = add_sub("diagnose", "fit and emit structure monitors only");

    CLI11_PARSE(app, argc, argv);

    arbfit::Command cmd = arbfit::Command::fit;
    if (c_synth->parsed()) cmd = arbfit::Command::synth;
    if (c_fit->parsed()) cmd = arbfit::Command::fit;
    if (c_postfit->parsed()) cmd = arbfit::Command::postfit;
    if (c_diag->parsed()) cmd = arbfit::Command::diagnose;

    arbfit::RunConfig cfg;
    try {
        cfg = arbfit::load_config(config_path);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return arbfit::kExitDataError;
    }
    if (seed_set) cfg.seed = seed;

    const auto out = arbfit::run_and_emit(cmd, cfg);
    if (!out.error.empty()) std::cerr << "error: " << out.error << "\n";
    if (cfg.paths.report_json.empty()) std::cout << out.report.dump(2) << "\n";
    return out.exit_code;
}
