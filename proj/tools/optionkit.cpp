// Command-line driver: seeded experiment runs, the self-check suite,
// option-count ablations, and option-occupancy traces.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "optionkit/harness.hpp"
#include "optionkit/verify.hpp"

namespace {

using namespace optionkit;

struct CliFlags {
    std::string config_path;
    std::string out_dir;
    std::string algo;
    std::string env;
    long long seed = -1;
    long steps = -1;
    long switch_at = -1;
    int n_options = -1;
};

void add_common_flags(CLI::App* cmd, CliFlags& f) {
    static const std::vector<std::string> algos = {
        "dac-ppo", "dac-a2c", "ahp-ppo", "ppo", "oc", "iopg-posterior-demo", "ioq", "smdpq"};
    cmd->add_option("--config", f.config_path, "key = value config file");
    cmd->add_option("--seed", f.seed, "run a single seed instead of the config's list");
    cmd->add_option("--out", f.out_dir, "output directory for CSV files");
    cmd->add_option("--algo", f.algo, "algorithm")->check(CLI::IsMember(algos));
    cmd->add_option("--env", f.env, "environment name");
    cmd->add_option("--steps", f.steps, "total environment steps per seed");
    cmd->add_option("--switch-at", f.switch_at,
                    "transfer switch step (0 = midpoint when env_switch is set)");
    cmd->add_option("--n-options", f.n_options, "number of options");
}

ExperimentConfig build_config(const CliFlags& f) {
    ExperimentConfig cfg;
    KeyValueConfig kv;
    if (!f.config_path.empty()) kv = KeyValueConfig::from_file(f.config_path);

    // algorithm-specific baselines first, then file values, then flags
    cfg.algo = !f.algo.empty() ? f.algo : kv.get_string("algo", cfg.algo);
    apply_algo_defaults(cfg);
    apply_config(cfg, kv);
    if (!f.algo.empty()) cfg.algo = f.algo;
    if (!f.env.empty()) cfg.env = f.env;
    if (!f.out_dir.empty()) cfg.out_dir = f.out_dir;
    if (f.steps >= 0) cfg.steps = f.steps;
    if (f.switch_at >= 0) cfg.switch_at = f.switch_at;
    if (f.n_options > 0) cfg.agent.n_options = f.n_options;
    if (f.seed >= 0) cfg.seeds = {static_cast<std::uint64_t>(f.seed)};
    return cfg;
}

void print_summary(const ExperimentResult& result) {
    const ExperimentConfig& cfg = result.config;
    std::printf("algorithm %s on %s", cfg.algo.c_str(), cfg.env.c_str());
    if (cfg.effective_switch() > 0)
        std::printf(" -> %s at step %ld", cfg.env_switch.c_str(), cfg.effective_switch());
    std::printf(", %ld steps x %zu seeds\n", cfg.steps, cfg.seeds.size());
    for (const auto& run : result.runs) {
        if (run.failed) {
            std::printf("  seed %llu: FAILED (%s)\n",
                        static_cast<unsigned long long>(run.seed), run.error.c_str());
            continue;
        }
        const double last = run.rows.empty() ? 0.0 : run.rows.back().smoothed;
        std::printf("  seed %llu: %zu episodes, final smoothed return %.4f\n",
                    static_cast<unsigned long long>(run.seed), run.rows.size(), last);
    }
    if (!result.aggregate.empty()) {
        const AggregateRow& last = result.aggregate.back();
        std::printf("aggregate at step %ld: %.4f +/- %.4f over %d seeds\n", last.step,
                    last.mean, last.stderr_of_mean, last.n_seeds);
    }
    if (!cfg.out_dir.empty()) std::printf("wrote CSV files under %s\n", cfg.out_dir.c_str());
}

int cmd_run(const CliFlags& f) {
    const ExperimentConfig cfg = build_config(f);
    const ExperimentResult result = run_experiment(cfg);
    print_summary(result);
    return result.failures() == 0 ? 0 : 2;
}

int cmd_verify(std::uint64_t seed) {
    const std::vector<VerifyRow> rows = run_verification(seed);
    return print_verification(rows, std::cout) ? 0 : 1;
}

int cmd_ablate(const CliFlags& f) {
    ExperimentConfig cfg = build_config(f);
    if (cfg.env_switch.empty() && cfg.env == "four_rooms")
        cfg.env_switch = "four_rooms_goal_b";  // the default goal-switch pair
    const auto results = ablation_n_options(cfg);
    int rc = 0;
    for (const auto& r : results) {
        std::printf("--- n_options = %d ---\n", r.config.agent.n_options);
        print_summary(r);
        if (r.failures() > 0) rc = 2;
    }
    return rc;
}

int cmd_trace(const CliFlags& f) {
    ExperimentConfig cfg = build_config(f);
    cfg.trace_options = true;
    if (cfg.out_dir.empty()) {
        std::fprintf(stderr, "trace needs --out (or out in the config file)\n");
        return 2;
    }
    const ExperimentResult result = run_experiment(cfg);
    namespace fs = std::filesystem;
    for (const auto& run : result.runs) {
        if (run.failed) continue;
        const std::string base = cfg.algo + "_" + cfg.env + "_seed" + std::to_string(run.seed);
        std::ofstream steps_csv(fs::path(cfg.out_dir) / (base + "_trace.csv"));
        std::ofstream occ_csv(fs::path(cfg.out_dir) / (base + "_occupancy.csv"));
        export_option_trace(cfg, run, steps_csv, occ_csv);
    }
    print_summary(result);
    return result.failures() == 0 ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"tabular option-process learning toolkit"};
    app.require_subcommand(1);

    CliFlags run_flags, ablate_flags, trace_flags;
    std::uint64_t verify_seed = 2024;

    CLI::App* run = app.add_subcommand("run", "run a seeded experiment and emit CSV metrics");
    add_common_flags(run, run_flags);
    CLI::App* verify =
        app.add_subcommand("verify", "re-derive the library's identities and print residuals");
    verify->add_option("--seed", verify_seed, "RNG seed for the random instances");
    CLI::App* ablate =
        app.add_subcommand("ablate", "repeat the transfer experiment over option counts");
    add_common_flags(ablate, ablate_flags);
    CLI::App* trace =
        app.add_subcommand("trace", "run with per-step option recording and export traces");
    add_common_flags(trace, trace_flags);

    CLI11_PARSE(app, argc, argv);

    try {
        if (run->parsed()) return cmd_run(run_flags);
        if (verify->parsed()) return cmd_verify(verify_seed);
        if (ablate->parsed()) return cmd_ablate(ablate_flags);
        if (trace->parsed()) return cmd_trace(trace_flags);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
