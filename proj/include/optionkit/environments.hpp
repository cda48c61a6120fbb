#pragma once

// Built-in benchmark environments, grid helpers, fixed "runner" options, and
// plain-text (de)serialization of hand-written instances.

#include <cstdio>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "optionkit/config.hpp"
#include "optionkit/mdp.hpp"

namespace optionkit {

/// Grid geometry for environments backed by an ASCII layout ('w' = wall).
struct GridInfo {
    int rows = 0;
    int cols = 0;
    std::vector<std::string> layout;
    std::vector<int> cell_to_state;                 // rows*cols, -1 on walls
    std::vector<std::pair<int, int>> state_to_cell; // state -> (row, col)

    bool walkable(int r, int c) const {
        return r >= 0 && r < rows && c >= 0 && c < cols && layout[r][c] != 'w';
    }
    int state_at(int r, int c) const { return cell_to_state[r * cols + c]; }
};

struct BuiltEnvironment {
    TabularMDP mdp;
    std::string name;
    int goal_state = -1;
    GridInfo grid;

    bool has_grid() const { return grid.rows > 0; }
};

// Grid actions, fixed order: 0 moves up a row, 1 down, 2 right, 3 left.
constexpr int kGridActions = 4;

/// Deterministic gridworld: blocked moves stay in place, stepping onto the
/// goal pays goal_reward and ends the episode, every other step pays
/// step_reward. Start is uniform over walkable non-goal cells.
inline BuiltEnvironment make_grid_environment(const std::vector<std::string>& layout,
                                              std::pair<int, int> goal_cell, double gamma,
                                              double step_reward = 0.0, double goal_reward = 1.0) {
    static const int dr[kGridActions] = {-1, 1, 0, 0};
    static const int dc[kGridActions] = {0, 0, 1, -1};

    BuiltEnvironment env;
    GridInfo& g = env.grid;
    g.rows = static_cast<int>(layout.size());
    g.cols = g.rows > 0 ? static_cast<int>(layout[0].size()) : 0;
    g.layout = layout;
    if (g.rows == 0 || g.cols == 0) throw std::invalid_argument("grid: empty layout");
    for (const auto& row : layout)
        if (static_cast<int>(row.size()) != g.cols)
            throw std::invalid_argument("grid: ragged layout");

    g.cell_to_state.assign(static_cast<std::size_t>(g.rows) * g.cols, -1);
    for (int r = 0; r < g.rows; ++r)
        for (int c = 0; c < g.cols; ++c)
            if (g.walkable(r, c)) {
                g.cell_to_state[r * g.cols + c] = static_cast<int>(g.state_to_cell.size());
                g.state_to_cell.emplace_back(r, c);
            }

    if (!g.walkable(goal_cell.first, goal_cell.second))
        throw std::invalid_argument("grid: goal cell is not walkable");
    env.goal_state = g.state_at(goal_cell.first, goal_cell.second);

    TabularMDP& m = env.mdp;
    m.n_states = static_cast<int>(g.state_to_cell.size());
    m.n_actions = kGridActions;
    m.gamma = gamma;
    m.transition = Eigen::MatrixXd::Zero(static_cast<long>(m.n_states) * m.n_actions, m.n_states);
    m.reward = Eigen::MatrixXd::Zero(m.n_states, m.n_actions);
    m.initial = Eigen::VectorXd::Zero(m.n_states);
    m.terminal.assign(static_cast<std::size_t>(m.n_states), 0);
    m.terminal[static_cast<std::size_t>(env.goal_state)] = 1;

    for (int s = 0; s < m.n_states; ++s) {
        const auto [r, c] = g.state_to_cell[static_cast<std::size_t>(s)];
        for (int a = 0; a < kGridActions; ++a) {
            if (s == env.goal_state) {
                m.transition(m.sa_row(s, a), s) = 1.0;
                continue;
            }
            const int rn = r + dr[a], cn = c + dc[a];
            const int s_next = g.walkable(rn, cn) ? g.state_at(rn, cn) : s;
            m.transition(m.sa_row(s, a), s_next) = 1.0;
            m.reward(s, a) = (s_next == env.goal_state) ? goal_reward : step_reward;
        }
    }
    int n_starts = 0;
    for (int s = 0; s < m.n_states; ++s)
        if (s != env.goal_state) ++n_starts;
    for (int s = 0; s < m.n_states; ++s)
        if (s != env.goal_state) m.initial[s] = 1.0 / n_starts;
    m.validate();
    return env;
}

inline const std::vector<std::string>& four_rooms_layout() {
    static const std::vector<std::string> layout = {
        "wwwwwwwwwwwww",
        "w     w     w",
        "w     w     w",
        "w           w",
        "w     w     w",
        "w     w     w",
        "ww wwww     w",
        "w     www www",
        "w     w     w",
        "w     w     w",
        "w           w",
        "w     w     w",
        "wwwwwwwwwwwww",
    };
    return layout;
}

/// Environment registry.
///   four_rooms         13x13 four-room grid, goal in the south-east room
///   four_rooms_goal_b  same grid, goal moved to the north-west room
///   chain              left/right chain of `n` cells; stepping right off the
///                      last cell pays 1 and ends the episode
///   two_arm_bandit     one decision state, two actions paying 1.0 / 0.0,
///                      episode ends immediately
/// Recognized params: gamma (all), n (chain).
inline BuiltEnvironment make_environment(const std::string& name,
                                         const KeyValueConfig& params = {}) {
    const double gamma = params.get_double("gamma", 0.99);
    if (name == "four_rooms" || name == "four_rooms_goal_b") {
        const std::pair<int, int> goal =
            (name == "four_rooms") ? std::make_pair(9, 9) : std::make_pair(3, 3);
        BuiltEnvironment env = make_grid_environment(four_rooms_layout(), goal, gamma);
        env.name = name;
        return env;
    }
    if (name == "chain") {
        const int n = params.get_int("n", 5);
        if (n < 2) throw ConfigError("chain: need at least 2 cells");
        BuiltEnvironment env;
        env.name = name;
        TabularMDP& m = env.mdp;
        m.n_states = n + 1;  // cells 0..n-1 plus the absorbing end state
        m.n_actions = 2;     // 0 = left, 1 = right
        m.gamma = gamma;
        m.transition = Eigen::MatrixXd::Zero(static_cast<long>(m.n_states) * 2, m.n_states);
        m.reward = Eigen::MatrixXd::Zero(m.n_states, 2);
        m.initial = Eigen::VectorXd::Zero(m.n_states);
        m.terminal.assign(static_cast<std::size_t>(m.n_states), 0);
        m.terminal[static_cast<std::size_t>(n)] = 1;
        env.goal_state = n;
        for (int s = 0; s < n; ++s) {
            m.transition(m.sa_row(s, 0), s > 0 ? s - 1 : 0) = 1.0;
            if (s < n - 1) {
                m.transition(m.sa_row(s, 1), s + 1) = 1.0;
            } else {
                m.transition(m.sa_row(s, 1), n) = 1.0;
                m.reward(s, 1) = 1.0;
            }
        }
        m.transition(m.sa_row(n, 0), n) = 1.0;
        m.transition(m.sa_row(n, 1), n) = 1.0;
        m.initial[0] = 1.0;
        m.validate();
        return env;
    }
    if (name == "two_arm_bandit") {
        BuiltEnvironment env;
        env.name = name;
        TabularMDP& m = env.mdp;
        m.n_states = 2;
        m.n_actions = 2;
        m.gamma = gamma;
        m.transition = Eigen::MatrixXd::Zero(4, 2);
        m.reward = Eigen::MatrixXd::Zero(2, 2);
        m.initial = Eigen::VectorXd::Zero(2);
        m.terminal = {0, 1};
        env.goal_state = 1;
        m.transition(m.sa_row(0, 0), 1) = 1.0;
        m.transition(m.sa_row(0, 1), 1) = 1.0;
        m.transition(m.sa_row(1, 0), 1) = 1.0;
        m.transition(m.sa_row(1, 1), 1) = 1.0;
        m.reward(0, 0) = 1.0;
        m.reward(0, 1) = 0.0;
        m.initial[0] = 1.0;
        m.validate();
        return env;
    }
    throw ConfigError("unknown environment: " + name);
}

/// Fixed deterministic option that repeats one primitive action. It
/// terminates with probability 1 wherever the action is a no-op (blocked),
/// and with beta_continue elsewhere.
inline Option make_runner_option(const TabularMDP& mdp, int action, double beta_continue = 0.0) {
    check_index(action, mdp.n_actions, "action");
    Option o;
    o.pi = Eigen::MatrixXd::Zero(mdp.n_states, mdp.n_actions);
    o.beta = Eigen::VectorXd::Constant(mdp.n_states, beta_continue);
    for (int s = 0; s < mdp.n_states; ++s) {
        o.pi(s, action) = 1.0;
        if (mdp.transition(mdp.sa_row(s, action), s) == 1.0) o.beta[s] = 1.0;
    }
    return o;
}

/// One runner option per primitive action.
inline OptionSet make_runner_options(const TabularMDP& mdp, double beta_continue = 0.0) {
    OptionSet set;
    for (int a = 0; a < mdp.n_actions; ++a)
        set.options.push_back(make_runner_option(mdp, a, beta_continue));
    return set;
}

// ---------------------------------------------------------------------------
// Plain-text instance files.
//
// Schema (key = value, '#' comments):
//   n_states, n_actions, gamma         scalars
//   initial                            n_states numbers
//   terminal                           n_states 0/1 flags
//   reward[s]                          row over actions
//   transition[s][a]                   row over next states
// optionally:
//   n_options                          scalar
//   option[i].beta                     n_states numbers
//   option[i].pi[s]                    row over actions
//   master[s]                          row over options
// ---------------------------------------------------------------------------

struct LoadedInstance {
    TabularMDP mdp;
    std::optional<OptionSet> options;
    std::optional<MasterPolicy> master;
};

namespace detail {
inline Eigen::VectorXd config_row(const KeyValueConfig& cfg, const std::string& key, int n) {
    const std::vector<double> v = cfg.get_vector(key);
    if (static_cast<int>(v.size()) != n)
        throw ConfigError("config key " + key + " expects " + std::to_string(n) + " numbers");
    return Eigen::Map<const Eigen::VectorXd>(v.data(), n);
}
inline std::string fmt17(double x) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
}
inline std::string fmt_row(const Eigen::VectorXd& v) {
    std::string out;
    for (int i = 0; i < v.size(); ++i) {
        if (i) out += ' ';
        out += fmt17(v[i]);
    }
    return out;
}
}  // namespace detail

inline LoadedInstance parse_instance(const KeyValueConfig& cfg) {
    LoadedInstance inst;
    TabularMDP& m = inst.mdp;
    m.n_states = cfg.get_int("n_states");
    m.n_actions = cfg.get_int("n_actions");
    m.gamma = cfg.get_double("gamma");
    if (m.n_states <= 0 || m.n_actions <= 0)
        throw ConfigError("instance: n_states and n_actions must be positive");
    m.initial = detail::config_row(cfg, "initial", m.n_states);
    const Eigen::VectorXd term = detail::config_row(cfg, "terminal", m.n_states);
    m.terminal.resize(static_cast<std::size_t>(m.n_states));
    for (int s = 0; s < m.n_states; ++s) m.terminal[static_cast<std::size_t>(s)] = term[s] != 0.0;
    m.reward.resize(m.n_states, m.n_actions);
    m.transition.resize(static_cast<long>(m.n_states) * m.n_actions, m.n_states);
    for (int s = 0; s < m.n_states; ++s) {
        m.reward.row(s) =
            detail::config_row(cfg, "reward[" + std::to_string(s) + "]", m.n_actions).transpose();
        for (int a = 0; a < m.n_actions; ++a)
            m.transition.row(m.sa_row(s, a)) =
                detail::config_row(cfg,
                                   "transition[" + std::to_string(s) + "][" + std::to_string(a) + "]",
                                   m.n_states)
                    .transpose();
    }
    m.validate();

    if (cfg.has("n_options")) {
        const int n_opt = cfg.get_int("n_options");
        OptionSet set;
        for (int i = 0; i < n_opt; ++i) {
            const std::string p = "option[" + std::to_string(i) + "].";
            Option o;
            o.beta = detail::config_row(cfg, p + "beta", m.n_states);
            o.pi.resize(m.n_states, m.n_actions);
            for (int s = 0; s < m.n_states; ++s)
                o.pi.row(s) =
                    detail::config_row(cfg, p + "pi[" + std::to_string(s) + "]", m.n_actions)
                        .transpose();
            set.options.push_back(std::move(o));
        }
        set.validate(m);
        inst.options = std::move(set);
        if (cfg.has("master[0]")) {
            MasterPolicy master;
            master.pi.resize(m.n_states, n_opt);
            for (int s = 0; s < m.n_states; ++s)
                master.pi.row(s) =
                    detail::config_row(cfg, "master[" + std::to_string(s) + "]", n_opt).transpose();
            master.validate(m.n_states, n_opt);
            inst.master = std::move(master);
        }
    }
    return inst;
}

inline LoadedInstance load_instance(const std::string& path) {
    return parse_instance(KeyValueConfig::from_file(path));
}

inline KeyValueConfig instance_to_config(const TabularMDP& m, const OptionSet* options = nullptr,
                                         const MasterPolicy* master = nullptr) {
    KeyValueConfig cfg;
    cfg.set("n_states", std::to_string(m.n_states));
    cfg.set("n_actions", std::to_string(m.n_actions));
    cfg.set("gamma", detail::fmt17(m.gamma));
    cfg.set("initial", detail::fmt_row(m.initial));
    std::string term;
    for (int s = 0; s < m.n_states; ++s) {
        if (s) term += ' ';
        term += m.is_terminal(s) ? '1' : '0';
    }
    cfg.set("terminal", term);
    for (int s = 0; s < m.n_states; ++s) {
        cfg.set("reward[" + std::to_string(s) + "]", detail::fmt_row(m.reward.row(s).transpose()));
        for (int a = 0; a < m.n_actions; ++a)
            cfg.set("transition[" + std::to_string(s) + "][" + std::to_string(a) + "]",
                    detail::fmt_row(m.transition.row(m.sa_row(s, a)).transpose()));
    }
    if (options) {
        cfg.set("n_options", std::to_string(options->size()));
        for (int i = 0; i < options->size(); ++i) {
            const std::string p = "option[" + std::to_string(i) + "].";
            cfg.set(p + "beta", detail::fmt_row((*options)[i].beta));
            for (int s = 0; s < m.n_states; ++s)
                cfg.set(p + "pi[" + std::to_string(s) + "]",
                        detail::fmt_row((*options)[i].pi.row(s).transpose()));
        }
    }
    if (master)
        for (int s = 0; s < m.n_states; ++s)
            cfg.set("master[" + std::to_string(s) + "]",
                    detail::fmt_row(master->pi.row(s).transpose()));
    return cfg;
}

inline void save_instance(const std::string& path, const TabularMDP& m,
                          const OptionSet* options = nullptr,
                          const MasterPolicy* master = nullptr) {
    instance_to_config(m, options, master).save(path);
}

// ---------------------------------------------------------------------------
// Random instances for property tests: Dirichlet(1) rows, rewards in [-1, 1].
// ---------------------------------------------------------------------------

struct Instance {
    TabularMDP mdp;
    OptionSet options;
    MasterPolicy master;
};

namespace detail {
inline Eigen::VectorXd dirichlet_row(RandomStream& rng, int n) {
    Eigen::VectorXd v(n);
    for (int i = 0; i < n; ++i) v[i] = -std::log(1.0 - rng.uniform());
    return v / v.sum();
}
}  // namespace detail

/// Random fully dense instance. If with_terminal, the last state absorbs and
/// the start distribution covers only non-terminal states.
inline Instance random_instance(RandomStream& rng, int n_states, int n_actions, int n_options,
                                double gamma, bool with_terminal) {
    Instance inst;
    TabularMDP& m = inst.mdp;
    m.n_states = n_states;
    m.n_actions = n_actions;
    m.gamma = gamma;
    m.transition.resize(static_cast<long>(n_states) * n_actions, n_states);
    m.reward.resize(n_states, n_actions);
    m.initial = Eigen::VectorXd::Zero(n_states);
    m.terminal.assign(static_cast<std::size_t>(n_states), 0);
    if (with_terminal) m.terminal[static_cast<std::size_t>(n_states - 1)] = 1;
    for (int s = 0; s < n_states; ++s)
        for (int a = 0; a < n_actions; ++a) {
            if (m.is_terminal(s)) {
                m.transition.row(m.sa_row(s, a)).setZero();
                m.transition(m.sa_row(s, a), s) = 1.0;
                m.reward(s, a) = 0.0;
            } else {
                m.transition.row(m.sa_row(s, a)) = detail::dirichlet_row(rng, n_states).transpose();
                m.reward(s, a) = rng.uniform(-1.0, 1.0);
            }
        }
    const int n_start = with_terminal ? n_states - 1 : n_states;
    const Eigen::VectorXd start = detail::dirichlet_row(rng, n_start);
    for (int s = 0; s < n_start; ++s) m.initial[s] = start[s];
    m.validate();

    for (int i = 0; i < n_options; ++i) {
        Option o;
        o.pi.resize(n_states, n_actions);
        o.beta.resize(n_states);
        for (int s = 0; s < n_states; ++s) {
            o.pi.row(s) = detail::dirichlet_row(rng, n_actions).transpose();
            o.beta[s] = rng.uniform();
        }
        inst.options.options.push_back(std::move(o));
    }
    inst.options.validate(m);

    inst.master.pi.resize(n_states, n_options);
    for (int s = 0; s < n_states; ++s)
        inst.master.pi.row(s) = detail::dirichlet_row(rng, n_options).transpose();
    inst.master.validate(n_states, n_options);
    return inst;
}

}  // namespace optionkit
