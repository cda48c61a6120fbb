#pragma once

// Experiment driver: seeded runs with incremental CSV emission, transfer
// switches, episode-return smoothing, cross-seed aggregation, option-trace
// export, and the option-count ablation. Seeds run independently (optionally
// in parallel) and merge deterministically by their position in the seed
// list, so output never depends on scheduling.

#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "optionkit/agents.hpp"
#include "optionkit/config.hpp"
#include "optionkit/environments.hpp"

namespace optionkit {

struct ExperimentConfig {
    std::string algo = "dac-ppo";
    std::string env = "four_rooms";
    std::string env_switch;  // transfer target; empty = single task
    long steps = 100000;
    long switch_at = 0;  // 0 with env_switch set = midpoint
    std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
    std::string out_dir;  // empty = no files, results in memory only
    int smoothing_window = 20;
    int aggregate_points = 200;
    int threads = 0;  // 0 = hardware; OPTIONKIT_THREADS caps either way
    bool trace_options = false;
    int chain_n = 5;
    AgentConfig agent;

    /// Step the task switch happens after; 0 when there is no switch.
    long effective_switch() const {
        if (env_switch.empty()) return 0;
        return switch_at > 0 ? switch_at : steps / 2;
    }

    void validate() const {
        if (steps <= 0) throw ConfigError("steps must be positive");
        if (seeds.empty()) throw ConfigError("need at least one seed");
        for (std::size_t i = 0; i < seeds.size(); ++i)
            for (std::size_t j = i + 1; j < seeds.size(); ++j)
                if (seeds[i] == seeds[j]) throw ConfigError("seeds must be distinct");
        if (!env_switch.empty() && effective_switch() >= steps)
            throw ConfigError("switch step must fall before the end of the run");
        if (smoothing_window <= 0) throw ConfigError("smoothing window must be positive");
        if (aggregate_points <= 0) throw ConfigError("aggregate points must be positive");
    }
};

/// One completed-episode record, mirroring the CSV row layout.
struct RunRow {
    std::uint64_t seed = 0;
    long step = 0;
    long episode = 0;
    double ret = 0.0;
    double smoothed = 0.0;
    std::string env;
};

struct TraceRow {
    long step = 0;
    int option = 0;
    long episode = 0;
};

struct SeedRunResult {
    std::uint64_t seed = 0;
    int n_options = 0;  // the agent's effective count, not the config knob
    std::vector<RunRow> rows;
    std::vector<TraceRow> trace;
    bool failed = false;
    std::string error;
};

struct AggregateRow {
    long step = 0;
    double mean = 0.0;
    double stderr_of_mean = 0.0;
    int n_seeds = 0;
    std::string env;
};

struct ExperimentResult {
    ExperimentConfig config;
    std::vector<SeedRunResult> runs;  // ordered by seed-list position
    std::vector<AggregateRow> aggregate;

    int failures() const {
        int n = 0;
        for (const auto& r : runs) n += r.failed ? 1 : 0;
        return n;
    }
};

namespace detail {

/// Shortest round-trip decimal form; deterministic across runs.
inline std::string fmt_double(double x) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
}

/// Mean of the last at-most-`window` entries.
inline double smoothed_tail(const std::vector<double>& returns, int window) {
    const std::size_t n = returns.size();
    const std::size_t take = std::min<std::size_t>(n, static_cast<std::size_t>(window));
    double sum = 0.0;
    for (std::size_t i = n - take; i < n; ++i) sum += returns[i];
    return take == 0 ? 0.0 : sum / static_cast<double>(take);
}

inline std::string csv_header() {
    return "seed,step,episode,return,smoothed_return,algorithm,env,n_options";
}

inline std::string csv_row(const RunRow& r, const std::string& algo, int n_options) {
    std::ostringstream out;
    out << r.seed << ',' << r.step << ',' << r.episode << ',' << fmt_double(r.ret) << ','
        << fmt_double(r.smoothed) << ',' << algo << ',' << r.env << ',' << n_options;
    return out.str();
}

}  // namespace detail

/// Evenly spaced evaluation steps ending at `steps`.
inline std::vector<long> aggregate_grid(long steps, int points) {
    std::vector<long> grid;
    grid.reserve(static_cast<std::size_t>(points));
    for (int i = 1; i <= points; ++i) {
        const long s = static_cast<long>(static_cast<double>(steps) * i / points);
        if (s >= 1 && (grid.empty() || s > grid.back())) grid.push_back(s);
    }
    return grid;
}

/// Latest smoothed return at or before each grid step; empty before the
/// first completed episode.
inline std::vector<std::optional<double>> carry_forward_series(const std::vector<RunRow>& rows,
                                                               const std::vector<long>& grid) {
    std::vector<std::optional<double>> out(grid.size());
    std::size_t r = 0;
    std::optional<double> last;
    for (std::size_t g = 0; g < grid.size(); ++g) {
        while (r < rows.size() && rows[r].step <= grid[g]) {
            last = rows[r].smoothed;
            ++r;
        }
        out[g] = last;
    }
    return out;
}

/// Run one seed to completion. Throws on learner failure; the multi-seed
/// driver catches and records.
inline SeedRunResult run_single_seed(const ExperimentConfig& cfg, std::uint64_t seed,
                                     std::ostream* csv) {
    KeyValueConfig env_params;
    env_params.set("gamma", detail::fmt_double(cfg.agent.gamma));
    env_params.set("n", std::to_string(cfg.chain_n));
    const BuiltEnvironment env_a = make_environment(cfg.env, env_params);

    SeedRunResult res;
    res.seed = seed;
    auto agent = make_agent(cfg.algo, env_a, cfg.agent, seed);
    const int n_options = agent->n_options();
    res.n_options = n_options;

    const long switch_step = cfg.effective_switch();
    std::string env_name = env_a.name;
    std::vector<double> returns;
    long episode = 0;

    auto emit = [&](long step, double ret) {
        returns.push_back(ret);
        RunRow row;
        row.seed = seed;
        row.step = step;
        row.episode = episode++;
        row.ret = ret;
        row.smoothed = detail::smoothed_tail(returns, cfg.smoothing_window);
        row.env = env_name;
        res.rows.push_back(row);
        if (csv) *csv << detail::csv_row(row, cfg.algo, n_options) << '\n' << std::flush;
    };

    for (long step = 1; step <= cfg.steps; ++step) {
        if (switch_step > 0 && step == switch_step + 1) {
            // the forced episode end belongs to the phase that produced it
            const BuiltEnvironment env_b = make_environment(cfg.env_switch, env_params);
            if (const auto truncated = agent->switch_environment(env_b))
                emit(switch_step, *truncated);
            env_name = env_b.name;
        }
        const StepResult sr = agent->advance();
        if (cfg.trace_options) res.trace.push_back({step, sr.option, episode});
        if (sr.episode_end) emit(step, sr.episode_return);
    }
    return res;
}

namespace detail {

inline int resolve_threads(int requested, int n_jobs) {
    int cap = requested > 0 ? requested : static_cast<int>(std::thread::hardware_concurrency());
    if (cap <= 0) cap = 1;
    if (const char* env = std::getenv("OPTIONKIT_THREADS")) {
        const int v = std::atoi(env);
        if (v > 0) cap = std::min(cap, v);
    }
    return std::max(1, std::min(cap, n_jobs));
}

inline std::string run_basename(const ExperimentConfig& cfg) {
    return cfg.algo + "_" + cfg.env;
}

}  // namespace detail

/// Mean and standard error of the smoothed return across seeds on an even
/// step grid. Seeds that have not completed an episode by a grid step are
/// left out of that step's statistics; failed seeds are left out entirely.
inline std::vector<AggregateRow> aggregate_runs(const ExperimentConfig& cfg,
                                                const std::vector<SeedRunResult>& runs) {
    const std::vector<long> grid = aggregate_grid(cfg.steps, cfg.aggregate_points);
    std::vector<std::vector<std::optional<double>>> series;
    for (const auto& r : runs)
        if (!r.failed) series.push_back(carry_forward_series(r.rows, grid));

    const long switch_step = cfg.effective_switch();
    std::vector<AggregateRow> out;
    for (std::size_t g = 0; g < grid.size(); ++g) {
        AggregateRow row;
        row.step = grid[g];
        row.env = (switch_step > 0 && grid[g] > switch_step) ? cfg.env_switch : cfg.env;
        double sum = 0.0;
        int n = 0;
        for (const auto& s : series)
            if (s[g]) {
                sum += *s[g];
                n += 1;
            }
        row.n_seeds = n;
        if (n > 0) {
            row.mean = sum / n;
            if (n > 1) {
                double ss = 0.0;
                for (const auto& s : series)
                    if (s[g]) ss += (*s[g] - row.mean) * (*s[g] - row.mean);
                row.stderr_of_mean = std::sqrt(ss / (n - 1)) / std::sqrt(static_cast<double>(n));
            }
        }
        out.push_back(row);
    }
    return out;
}

/// Run every seed (parallel up to the thread cap), write per-seed CSVs and
/// the cross-seed aggregate, and return everything in memory. A seed that
/// throws is recorded as failed and the rest continue.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg) {
    cfg.validate();
    namespace fs = std::filesystem;
    const bool to_disk = !cfg.out_dir.empty();
    if (to_disk) fs::create_directories(cfg.out_dir);

    const int n_seeds = static_cast<int>(cfg.seeds.size());
    ExperimentResult result;
    result.config = cfg;
    result.runs.resize(static_cast<std::size_t>(n_seeds));

    std::atomic<int> next{0};
    auto worker = [&]() {
        for (;;) {
            const int i = next.fetch_add(1);
            if (i >= n_seeds) return;
            const std::uint64_t seed = cfg.seeds[static_cast<std::size_t>(i)];
            SeedRunResult& slot = result.runs[static_cast<std::size_t>(i)];
            std::ofstream csv;
            if (to_disk) {
                const fs::path p = fs::path(cfg.out_dir) /
                                   (detail::run_basename(cfg) + "_seed" + std::to_string(seed) +
                                    ".csv");
                csv.open(p);
                csv << detail::csv_header() << '\n';
            }
            try {
                slot = run_single_seed(cfg, seed, to_disk ? &csv : nullptr);
            } catch (const std::exception& e) {
                slot.seed = seed;
                slot.failed = true;
                slot.error = e.what();
                if (to_disk) csv << "# failed: " << e.what() << '\n';
            }
        }
    };

    const int n_threads = detail::resolve_threads(cfg.threads, n_seeds);
    if (n_threads <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }

    result.aggregate = aggregate_runs(cfg, result.runs);
    if (to_disk) {
        const fs::path p =
            fs::path(cfg.out_dir) / (detail::run_basename(cfg) + "_aggregate.csv");
        std::ofstream out(p);
        int n_options = cfg.agent.n_options;
        for (const auto& r : result.runs)
            if (!r.failed) {
                n_options = r.n_options;
                break;
            }
        out << "step,mean_smoothed_return,stderr,n_seeds,algorithm,env,n_options\n";
        for (const auto& row : result.aggregate)
            out << row.step << ',' << detail::fmt_double(row.mean) << ','
                << detail::fmt_double(row.stderr_of_mean) << ',' << row.n_seeds << ','
                << cfg.algo << ',' << row.env << ',' << n_options << '\n';
    }
    return result;
}

// ---------------------------------------------------------------------------
// option traces
// ---------------------------------------------------------------------------

/// Fraction of steps each option was active, split at the switch step
/// (everything is one phase when switch_step is 0). Rows are phases.
inline std::vector<std::vector<double>> option_occupancy(const std::vector<TraceRow>& trace,
                                                         int n_options, long switch_step) {
    const int phases = switch_step > 0 ? 2 : 1;
    std::vector<std::vector<double>> counts(
        static_cast<std::size_t>(phases),
        std::vector<double>(static_cast<std::size_t>(n_options), 0.0));
    std::vector<long> totals(static_cast<std::size_t>(phases), 0);
    for (const auto& t : trace) {
        if (t.option < 0 || t.option >= n_options)
            throw std::invalid_argument("option_occupancy: option index out of range");
        const std::size_t phase = (switch_step > 0 && t.step > switch_step) ? 1 : 0;
        counts[phase][static_cast<std::size_t>(t.option)] += 1.0;
        totals[phase] += 1;
    }
    for (std::size_t ph = 0; ph < counts.size(); ++ph)
        if (totals[ph] > 0)
            for (auto& c : counts[ph]) c /= static_cast<double>(totals[ph]);
    return counts;
}

/// Per-step active-option CSV plus per-phase occupancy fractions.
inline void export_option_trace(const ExperimentConfig& cfg, const SeedRunResult& run,
                                std::ostream& steps_csv, std::ostream& occupancy_csv) {
    steps_csv << "step,episode,option,env\n";
    const long switch_step = cfg.effective_switch();
    for (const auto& t : run.trace) {
        const std::string& env =
            (switch_step > 0 && t.step > switch_step) ? cfg.env_switch : cfg.env;
        steps_csv << t.step << ',' << t.episode << ',' << t.option << ',' << env << '\n';
    }
    const auto occ = option_occupancy(
        run.trace, run.n_options > 0 ? run.n_options : cfg.agent.n_options, switch_step);
    occupancy_csv << "phase,env,option,fraction\n";
    for (std::size_t ph = 0; ph < occ.size(); ++ph) {
        const std::string& env = ph == 0 ? cfg.env : cfg.env_switch;
        for (std::size_t o = 0; o < occ[ph].size(); ++o)
            occupancy_csv << ph << ',' << env << ',' << o << ','
                          << detail::fmt_double(occ[ph][o]) << '\n';
    }
}

// ---------------------------------------------------------------------------
// ablation
// ---------------------------------------------------------------------------

/// Repeat the (transfer) experiment across option counts; one aggregate
/// series per count, joined into a single summary keyed by n_options.
inline std::vector<ExperimentResult> ablation_n_options(ExperimentConfig cfg,
                                                        const std::vector<int>& counts = {2, 4,
                                                                                          8}) {
    std::vector<ExperimentResult> results;
    const std::string base_out = cfg.out_dir;
    for (int n : counts) {
        ExperimentConfig c = cfg;
        c.agent.n_options = n;
        if (!base_out.empty())
            c.out_dir = (std::filesystem::path(base_out) / ("options_" + std::to_string(n)))
                            .string();
        results.push_back(run_experiment(c));
    }
    if (!base_out.empty()) {
        const std::filesystem::path p =
            std::filesystem::path(base_out) / (detail::run_basename(cfg) + "_ablation.csv");
        std::ofstream out(p);
        out << "step,mean_smoothed_return,stderr,n_seeds,algorithm,env,n_options\n";
        for (std::size_t i = 0; i < results.size(); ++i)
            for (const auto& row : results[i].aggregate)
                out << row.step << ',' << detail::fmt_double(row.mean) << ','
                    << detail::fmt_double(row.stderr_of_mean) << ',' << row.n_seeds << ','
                    << cfg.algo << ',' << row.env << ',' << counts[i] << '\n';
    }
    return results;
}

// ---------------------------------------------------------------------------
// config file binding
// ---------------------------------------------------------------------------

/// Documented config schema: every key optional, command-line flags override.
///
///   algo, env, env_switch        strings (see make_agent / make_environment)
///   steps, switch_at             longs
///   seeds                        whitespace-separated integers
///   out                          output directory
///   smoothing_window, aggregate_points, threads, chain_n   ints
///   trace_options                bool
///   n_options, kind, hidden, gamma, max_episode_steps      agent shape
///   lr, adam_eps, grad_clip, gae_lambda, clip_ratio        optimizer
///   rollout_steps, epochs_flat, epochs_high, epochs_low,
///   minibatch, entropy_high, entropy_low, value_coef       pg family
///   normalize_advantages, two_critics, alternating         pg flags
///   alpha, epsilon, off_option, target_refresh,
///   switch_penalty                                         tabular family
inline void apply_config(ExperimentConfig& cfg, const KeyValueConfig& kv) {
    static const std::vector<std::string> known = {
        "algo",          "env",           "env_switch",     "steps",
        "switch_at",     "seeds",         "out",            "smoothing_window",
        "aggregate_points", "threads",    "trace_options",  "chain_n",
        "n_options",     "kind",          "hidden",         "gamma",
        "max_episode_steps", "lr",        "adam_eps",       "grad_clip",
        "gae_lambda",    "clip_ratio",    "rollout_steps",  "epochs_flat",
        "epochs_high",   "epochs_low",    "minibatch",      "entropy_high",
        "entropy_low",   "value_coef",    "normalize_advantages", "two_critics",
        "alternating",   "alpha",         "epsilon",        "off_option",
        "target_refresh", "switch_penalty"};
    for (const auto& k : kv.keys())
        if (std::find(known.begin(), known.end(), k) == known.end())
            throw ConfigError("unknown config key: " + k);

    cfg.algo = kv.get_string("algo", cfg.algo);
    cfg.env = kv.get_string("env", cfg.env);
    cfg.env_switch = kv.get_string("env_switch", cfg.env_switch);
    cfg.steps = kv.get_int("steps", static_cast<int>(cfg.steps));
    cfg.switch_at = kv.get_int("switch_at", static_cast<int>(cfg.switch_at));
    if (kv.has("seeds")) {
        cfg.seeds.clear();
        for (int s : kv.get_int_vector("seeds")) {
            if (s < 0) throw ConfigError("seeds must be non-negative");
            cfg.seeds.push_back(static_cast<std::uint64_t>(s));
        }
    }
    cfg.out_dir = kv.get_string("out", cfg.out_dir);
    cfg.smoothing_window = kv.get_int("smoothing_window", cfg.smoothing_window);
    cfg.aggregate_points = kv.get_int("aggregate_points", cfg.aggregate_points);
    cfg.threads = kv.get_int("threads", cfg.threads);
    cfg.trace_options = kv.get_bool("trace_options", cfg.trace_options);
    cfg.chain_n = kv.get_int("chain_n", cfg.chain_n);

    AgentConfig& a = cfg.agent;
    a.n_options = kv.get_int("n_options", a.n_options);
    if (kv.has("kind")) {
        const std::string k = kv.get_string("kind");
        if (k == "softmax_tabular")
            a.kind = ParamKind::softmax_tabular;
        else if (k == "linear_gaussian")
            a.kind = ParamKind::linear_gaussian;
        else if (k == "feedforward")
            a.kind = ParamKind::feedforward;
        else
            throw ConfigError("unknown parameterization kind: " + k);
    }
    a.hidden = kv.get_int("hidden", a.hidden);
    a.gamma = kv.get_double("gamma", a.gamma);
    a.max_episode_steps = kv.get_int("max_episode_steps", a.max_episode_steps);
    a.lr = kv.get_double("lr", a.lr);
    a.adam_eps = kv.get_double("adam_eps", a.adam_eps);
    a.grad_clip = kv.get_double("grad_clip", a.grad_clip);
    a.gae_lambda = kv.get_double("gae_lambda", a.gae_lambda);
    a.clip_ratio = kv.get_double("clip_ratio", a.clip_ratio);
    a.rollout_steps = kv.get_int("rollout_steps", a.rollout_steps);
    a.epochs_flat = kv.get_int("epochs_flat", a.epochs_flat);
    a.epochs_high = kv.get_int("epochs_high", a.epochs_high);
    a.epochs_low = kv.get_int("epochs_low", a.epochs_low);
    a.minibatch = kv.get_int("minibatch", a.minibatch);
    a.entropy_high = kv.get_double("entropy_high", a.entropy_high);
    a.entropy_low = kv.get_double("entropy_low", a.entropy_low);
    a.value_coef = kv.get_double("value_coef", a.value_coef);
    a.normalize_advantages = kv.get_bool("normalize_advantages", a.normalize_advantages);
    a.two_critics = kv.get_bool("two_critics", a.two_critics);
    a.alternating = kv.get_bool("alternating", a.alternating);
    a.alpha = kv.get_double("alpha", a.alpha);
    a.epsilon = kv.get_double("epsilon", a.epsilon);
    a.off_option = kv.get_bool("off_option", a.off_option);
    a.target_refresh = kv.get_int("target_refresh", a.target_refresh);
    a.switch_penalty = kv.get_double("switch_penalty", a.switch_penalty);
}

/// Per-algorithm defaults that differ from the struct initializers; applied
/// before any file or flag override.
inline void apply_algo_defaults(ExperimentConfig& cfg) {
    if (cfg.algo == "a2c" || cfg.algo == "dac-a2c") {
        cfg.agent.rollout_steps = 5;
        cfg.agent.minibatch = 0;  // single batch per update
    }
}

}  // namespace optionkit
