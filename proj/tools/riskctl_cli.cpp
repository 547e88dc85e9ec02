// riskctl: command-line front end for the experiment harness.
//
//   riskctl solve          --preset pendulum-conv --out runs/conv
//   riskctl approx-compare --config my.json --iterates runs/conv/regileqg_iterates.csv --out runs/cmp
//   riskctl robustness     --preset arm-robust --out runs/arm
//   riskctl validate
//
// Exit codes: 0 ok, 1 validation failure or runtime error, 2 early stop,
// 64 usage or configuration error.

#include "riskctl/experiment.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>

namespace {

struct CommonOptions {
    std::string config;
    std::string preset;
    std::optional<std::uint64_t> seed;
    std::optional<int> threads;
    std::string out = "out";
};

void add_common(CLI::App* cmd, CommonOptions& o) {
    auto* cfg = cmd->add_option("--config", o.config, "JSON configuration file");
    auto* pre = cmd->add_option("--preset", o.preset, "Named preset")->check(CLI::IsMember(riskctl::preset_names()));
    cfg->excludes(pre);
    cmd->add_option("--seed", o.seed, "Override the configured seed");
    cmd->add_option("--threads", o.threads, "Worker threads (overrides RISKCTL_THREADS)")->check(CLI::PositiveNumber);
    cmd->add_option("--out", o.out, "Output directory")->capture_default_str();
}

riskctl::ExperimentConfig resolve(const CommonOptions& o) {
    riskctl::ExperimentConfig c;
    if (!o.config.empty())
        c = riskctl::load_config(o.config);
    else if (!o.preset.empty())
        c = riskctl::preset(o.preset);
    else
        throw riskctl::ConfigError("one of --config or --preset is required");
    if (const char* env = std::getenv("RISKCTL_THREADS")) {
        try {
            c.threads = std::stoi(env);
        } catch (const std::exception&) {
            throw riskctl::ConfigError(std::string("RISKCTL_THREADS is not an integer: ") + env);
        }
    }
    if (o.threads) c.threads = *o.threads;
    if (o.seed) c.seed = *o.seed;
    riskctl::validate_config(c);
    return c;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Risk-sensitive control by regularized iterative LEQG"};
    app.require_subcommand(1);

    CommonOptions solve_opt, cmp_opt, rob_opt;
    auto* solve = app.add_subcommand("solve", "Run the configured algorithms and write traces");
    add_common(solve, solve_opt);

    auto* cmp = app.add_subcommand("approx-compare", "Compare the surrogate with Monte Carlo estimates");
    add_common(cmp, cmp_opt);
    std::string iterates;
    cmp->add_option("--iterates", iterates, "Iterates CSV written by solve")->check(CLI::ExistingFile);

    auto* rob = app.add_subcommand("robustness", "Test-cost sweep over risk levels and kick amplitudes");
    add_common(rob, rob_opt);

    auto* val = app.add_subcommand("validate", "Self-check against dense reference solvers");
    riskctl::ValidateOptions vopt;
    val->add_option("--seed", vopt.seed, "Instance seed")->capture_default_str();
    val->add_option("--perturb-recursion", vopt.recursion_scale)->group("");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? riskctl::kExitOk : riskctl::kExitConfig;
    }

    try {
        if (*val) {
            const auto rep = riskctl::run_validate(vopt);
            std::cout << riskctl::format_report(rep);
            return rep.passed() ? riskctl::kExitOk : riskctl::kExitFailure;
        }
        int code = riskctl::kExitOk;
        if (*solve) {
            code = riskctl::cmd_solve(resolve(solve_opt), solve_opt.out);
            std::cout << "wrote " << solve_opt.out << "\n";
        } else if (*cmp) {
            std::optional<std::filesystem::path> it;
            if (!iterates.empty()) it = iterates;
            code = riskctl::cmd_approx_compare(resolve(cmp_opt), cmp_opt.out, it);
            std::cout << "wrote " << cmp_opt.out << "\n";
        } else if (*rob) {
            code = riskctl::cmd_robustness(resolve(rob_opt), rob_opt.out);
            std::cout << "wrote " << rob_opt.out << "\n";
        }
        if (code == riskctl::kExitEarlyStop) std::cerr << "warning: a run stopped early; see the summary\n";
        return code;
    } catch (const riskctl::ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return riskctl::kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return riskctl::kExitFailure;
    }
}
