#pragma once

// Finite MDPs with temporally extended actions executed call-and-return:
// a master policy picks an option, the option's internal policy acts until
// its termination condition fires, then control returns to the master.

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "optionkit/rng.hpp"

namespace optionkit {

constexpr double kRowSumTol = 1e-12;

inline void check_index(int i, int n, const char* what) {
    if (i < 0 || i >= n)
        throw std::out_of_range(std::string(what) + " index " + std::to_string(i) +
                                " out of range [0, " + std::to_string(n) + ")");
}

/// Dense finite MDP. Transition rows are indexed by s * n_actions + a.
/// Terminal states absorb: they self-loop under every action with zero
/// reward, and episode sampling stops on arrival.
struct TabularMDP {
    int n_states = 0;
    int n_actions = 0;
    Eigen::MatrixXd transition;  // (n_states * n_actions) x n_states
    Eigen::MatrixXd reward;      // n_states x n_actions
    Eigen::VectorXd initial;     // n_states, sums to 1
    double gamma = 0.99;
    std::vector<char> terminal;  // n_states, nonzero = absorbing

    int sa_row(int s, int a) const { return s * n_actions + a; }
    bool is_terminal(int s) const { return terminal[static_cast<std::size_t>(s)] != 0; }

    void validate() const {
        if (n_states <= 0 || n_actions <= 0)
            throw std::invalid_argument("TabularMDP: empty state or action space");
        if (transition.rows() != static_cast<long>(n_states) * n_actions ||
            transition.cols() != n_states)
            throw std::invalid_argument("TabularMDP: transition shape mismatch");
        if (reward.rows() != n_states || reward.cols() != n_actions)
            throw std::invalid_argument("TabularMDP: reward shape mismatch");
        if (initial.size() != n_states)
            throw std::invalid_argument("TabularMDP: initial shape mismatch");
        if (static_cast<int>(terminal.size()) != n_states)
            throw std::invalid_argument("TabularMDP: terminal mask shape mismatch");
        if (!(gamma >= 0.0 && gamma < 1.0))
            throw std::invalid_argument("TabularMDP: gamma must lie in [0, 1)");
        for (int s = 0; s < n_states; ++s) {
            for (int a = 0; a < n_actions; ++a) {
                const auto row = transition.row(sa_row(s, a));
                if (row.minCoeff() < -kRowSumTol)
                    throw std::invalid_argument("TabularMDP: negative transition probability");
                if (std::abs(row.sum() - 1.0) > kRowSumTol)
                    throw std::invalid_argument("TabularMDP: transition row for state " +
                                                std::to_string(s) + " does not sum to 1");
                if (is_terminal(s)) {
                    if (std::abs(row(s) - 1.0) > kRowSumTol)
                        throw std::invalid_argument("TabularMDP: terminal state " +
                                                    std::to_string(s) + " must self-loop");
                    if (std::abs(reward(s, a)) > kRowSumTol)
                        throw std::invalid_argument("TabularMDP: terminal state " +
                                                    std::to_string(s) + " must have zero reward");
                }
            }
        }
        if (initial.minCoeff() < -kRowSumTol || std::abs(initial.sum() - 1.0) > kRowSumTol)
            throw std::invalid_argument("TabularMDP: initial distribution does not sum to 1");
    }
};

/// One option: an internal policy over primitive actions plus a per-state
/// termination probability.
struct Option {
    Eigen::MatrixXd pi;    // n_states x n_actions, rows sum to 1
    Eigen::VectorXd beta;  // n_states, values in [0, 1]

    void validate(int n_states, int n_actions) const {
        if (pi.rows() != n_states || pi.cols() != n_actions)
            throw std::invalid_argument("Option: pi shape mismatch");
        if (beta.size() != n_states)
            throw std::invalid_argument("Option: beta shape mismatch");
        for (int s = 0; s < n_states; ++s) {
            if (pi.row(s).minCoeff() < -kRowSumTol || std::abs(pi.row(s).sum() - 1.0) > kRowSumTol)
                throw std::invalid_argument("Option: pi row " + std::to_string(s) +
                                            " is not a distribution");
            if (beta[s] < -kRowSumTol || beta[s] > 1.0 + kRowSumTol)
                throw std::invalid_argument("Option: beta outside [0, 1] at state " +
                                            std::to_string(s));
        }
    }

    /// True when the internal policy picks exactly one action in every state.
    bool deterministic() const {
        for (int s = 0; s < pi.rows(); ++s)
            if (pi.row(s).maxCoeff() < 1.0 - kRowSumTol) return false;
        return true;
    }
};

/// Ordered option collection. The slot held before the first selection of an
/// episode is the dummy marker below; it is never executed, and its
/// termination probability is fixed at 1 so the master always chooses fresh
/// at episode start.
struct OptionSet {
    std::vector<Option> options;

    /// Previous-option value used at episode start.
    static constexpr int dummy_index = -1;

    int size() const { return static_cast<int>(options.size()); }
    const Option& operator[](int i) const {
        check_index(i, size(), "option");
        return options[static_cast<std::size_t>(i)];
    }
    Option& operator[](int i) {
        check_index(i, size(), "option");
        return options[static_cast<std::size_t>(i)];
    }

    void validate(const TabularMDP& mdp) const {
        if (options.empty()) throw std::invalid_argument("OptionSet: no options");
        for (const auto& o : options) o.validate(mdp.n_states, mdp.n_actions);
    }
};

/// Policy over options, consulted whenever the previous option terminates.
struct MasterPolicy {
    Eigen::MatrixXd pi;  // n_states x n_options, rows sum to 1

    void validate(int n_states, int n_options) const {
        if (pi.rows() != n_states || pi.cols() != n_options)
            throw std::invalid_argument("MasterPolicy: shape mismatch");
        for (int s = 0; s < n_states; ++s)
            if (pi.row(s).minCoeff() < -kRowSumTol || std::abs(pi.row(s).sum() - 1.0) > kRowSumTol)
                throw std::invalid_argument("MasterPolicy: row " + std::to_string(s) +
                                            " is not a distribution");
    }
};

/// One sampled episode. states holds S_0..S_T; options, actions and rewards
/// hold the T per-step records. Option-level summaries (no actions recorded)
/// leave actions empty.
struct Trajectory {
    std::vector<int> states;
    std::vector<int> options;
    std::vector<int> actions;
    std::vector<double> rewards;
    bool terminated = false;

    int length() const { return static_cast<int>(options.size()); }

    void validate() const {
        const std::size_t T = options.size();
        if (states.size() != T + 1)
            throw std::invalid_argument("Trajectory: need one more state than steps");
        if (rewards.size() != T)
            throw std::invalid_argument("Trajectory: reward count mismatch");
        if (!actions.empty() && actions.size() != T)
            throw std::invalid_argument("Trajectory: action count mismatch");
    }
};

inline double discounted_return(const Trajectory& traj, double gamma) {
    double g = 0.0, scale = 1.0;
    for (double r : traj.rewards) {
        g += scale * r;
        scale *= gamma;
    }
    return g;
}

/// Distribution of the next option given the current state and the option
/// held on arrival: continue with probability 1 - beta, otherwise let the
/// master re-select. o_prev = OptionSet::dummy_index forces re-selection.
inline Eigen::VectorXd option_transition_kernel(const TabularMDP& mdp, const OptionSet& options,
                                                const MasterPolicy& master, int s, int o_prev) {
    check_index(s, mdp.n_states, "state");
    Eigen::VectorXd out = master.pi.row(s).transpose();
    if (o_prev == OptionSet::dummy_index) return out;
    check_index(o_prev, options.size(), "previous option");
    const double beta = options[o_prev].beta[s];
    out *= beta;
    out[o_prev] += 1.0 - beta;
    return out;
}

/// Next-state distribution and expected one-step reward of executing option
/// o's internal policy for a single step from s.
inline std::pair<Eigen::VectorXd, double> state_option_kernel(const TabularMDP& mdp,
                                                              const OptionSet& options, int s,
                                                              int o) {
    check_index(s, mdp.n_states, "state");
    check_index(o, options.size(), "option");
    const auto& pi = options[o].pi;
    Eigen::VectorXd next = Eigen::VectorXd::Zero(mdp.n_states);
    double r = 0.0;
    for (int a = 0; a < mdp.n_actions; ++a) {
        const double w = pi(s, a);
        if (w == 0.0) continue;
        next += w * mdp.transition.row(mdp.sa_row(s, a)).transpose();
        r += w * mdp.reward(s, a);
    }
    return {next, r};
}

/// Sample one episode under call-and-return execution. Per step the stream is
/// consumed in a fixed order: option, then action, then transition. Stops on
/// reaching a terminal state or after max_steps.
inline Trajectory sample_episode(const TabularMDP& mdp, const OptionSet& options,
                                 const MasterPolicy& master, RandomStream& rng, int max_steps) {
    Trajectory traj;
    int s = rng.categorical(mdp.initial);
    traj.states.push_back(s);
    int o_prev = OptionSet::dummy_index;
    for (int t = 0; t < max_steps && !mdp.is_terminal(s); ++t) {
        const int o = rng.categorical(option_transition_kernel(mdp, options, master, s, o_prev));
        const int a = rng.categorical(options[o].pi.row(s).transpose());
        const int s_next = rng.categorical(mdp.transition.row(mdp.sa_row(s, a)).transpose());
        traj.options.push_back(o);
        traj.actions.push_back(a);
        traj.rewards.push_back(mdp.reward(s, a));
        traj.states.push_back(s_next);
        s = s_next;
        o_prev = o;
    }
    traj.terminated = mdp.is_terminal(s);
    return traj;
}

}  // namespace optionkit
