#pragma once

// The call-and-return process rewritten as two ordinary MDPs over augmented
// state spaces, sharing the base samples.
//
//   high: states are (previous option, base state) pairs, actions are
//         options. Choosing option o moves the base state one step under o's
//         internal policy, marginalized over primitive actions.
//   low:  states are (base state, active option) pairs, actions are
//         primitive actions. After the base transition the option slot is
//         redrawn through the option transition kernel.
//
// Pair indexing is option-major: pair = option_slot * n_states + state. In
// the high MDP the previous-option slot 0 is reserved for the episode-start
// marker, so a real option o occupies slot o + 1. In the low MDP the active
// option o occupies slot o. Rows of both tables at pairs whose base state is
// terminal are overridden to exact self-loops; no trajectory factor ever
// reads them, and it keeps the absorbing-state convention intact.

#include <vector>

#include "optionkit/mdp.hpp"

namespace optionkit {

struct HighMDP {
    TabularMDP mdp;  // (n_options + 1) * n_base_states pair states, n_options actions
    int n_options = 0;
    int n_base_states = 0;

    /// o_prev may be OptionSet::dummy_index.
    int pair_index(int o_prev, int s) const { return (o_prev + 1) * n_base_states + s; }
    int pair_option(int pair) const { return pair / n_base_states - 1; }
    int pair_state(int pair) const { return pair % n_base_states; }
};

struct LowMDP {
    TabularMDP mdp;  // n_options * n_base_states pair states, n_base_actions actions
    int n_options = 0;
    int n_base_states = 0;

    int pair_index(int s, int o) const { return o * n_base_states + s; }
    int pair_option(int pair) const { return pair / n_base_states; }
    int pair_state(int pair) const { return pair % n_base_states; }
};

/// Policy of the high MDP: each pair row is exactly the option transition
/// kernel at that pair.
struct HighPolicy {
    Eigen::MatrixXd pi;  // ((n_options + 1) * n_states) x n_options
};

/// Policy of the low MDP: each (s, o) row is the option's internal policy.
struct LowPolicy {
    Eigen::MatrixXd pi;  // (n_options * n_states) x n_actions
};

inline HighMDP build_high_mdp(const TabularMDP& base, const OptionSet& options,
                              const MasterPolicy& master) {
    base.validate();
    options.validate(base);
    master.validate(base.n_states, options.size());

    HighMDP high;
    high.n_options = options.size();
    high.n_base_states = base.n_states;
    const int n_pairs = (high.n_options + 1) * base.n_states;

    TabularMDP& m = high.mdp;
    m.n_states = n_pairs;
    m.n_actions = high.n_options;
    m.gamma = base.gamma;
    m.transition = Eigen::MatrixXd::Zero(static_cast<long>(n_pairs) * m.n_actions, n_pairs);
    m.reward = Eigen::MatrixXd::Zero(n_pairs, m.n_actions);
    m.initial = Eigen::VectorXd::Zero(n_pairs);
    m.terminal.assign(static_cast<std::size_t>(n_pairs), 0);

    for (int slot = 0; slot <= high.n_options; ++slot) {
        for (int s = 0; s < base.n_states; ++s) {
            const int pair = slot * base.n_states + s;
            if (base.is_terminal(s)) {
                m.terminal[static_cast<std::size_t>(pair)] = 1;
                for (int o = 0; o < high.n_options; ++o)
                    m.transition(m.sa_row(pair, o), pair) = 1.0;
                continue;
            }
            for (int o = 0; o < high.n_options; ++o) {
                auto [next, r] = state_option_kernel(base, options, s, o);
                for (int s2 = 0; s2 < base.n_states; ++s2)
                    m.transition(m.sa_row(pair, o), high.pair_index(o, s2)) = next[s2];
                m.reward(pair, o) = r;
            }
        }
    }
    // episodes start in the dummy-slot copy of the base start distribution
    for (int s = 0; s < base.n_states; ++s)
        m.initial[high.pair_index(OptionSet::dummy_index, s)] = base.initial[s];
    m.validate();
    return high;
}

inline LowMDP build_low_mdp(const TabularMDP& base, const OptionSet& options,
                            const MasterPolicy& master) {
    base.validate();
    options.validate(base);
    master.validate(base.n_states, options.size());

    LowMDP low;
    low.n_options = options.size();
    low.n_base_states = base.n_states;
    const int n_pairs = low.n_options * base.n_states;

    TabularMDP& m = low.mdp;
    m.n_states = n_pairs;
    m.n_actions = base.n_actions;
    m.gamma = base.gamma;
    m.transition = Eigen::MatrixXd::Zero(static_cast<long>(n_pairs) * m.n_actions, n_pairs);
    m.reward = Eigen::MatrixXd::Zero(n_pairs, m.n_actions);
    m.initial = Eigen::VectorXd::Zero(n_pairs);
    m.terminal.assign(static_cast<std::size_t>(n_pairs), 0);

    // cache the option transition kernel at every (state, previous option)
    std::vector<Eigen::VectorXd> kernel(static_cast<std::size_t>(base.n_states) * low.n_options);
    for (int s = 0; s < base.n_states; ++s)
        for (int o = 0; o < low.n_options; ++o)
            kernel[static_cast<std::size_t>(s) * low.n_options + o] =
                option_transition_kernel(base, options, master, s, o);

    for (int o = 0; o < low.n_options; ++o) {
        for (int s = 0; s < base.n_states; ++s) {
            const int pair = low.pair_index(s, o);
            if (base.is_terminal(s)) {
                m.terminal[static_cast<std::size_t>(pair)] = 1;
                for (int a = 0; a < base.n_actions; ++a)
                    m.transition(m.sa_row(pair, a), pair) = 1.0;
                continue;
            }
            for (int a = 0; a < base.n_actions; ++a) {
                m.reward(pair, a) = base.reward(s, a);
                const auto base_row = base.transition.row(base.sa_row(s, a));
                for (int s2 = 0; s2 < base.n_states; ++s2) {
                    const double p = base_row[s2];
                    if (p == 0.0) continue;
                    const Eigen::VectorXd& k =
                        kernel[static_cast<std::size_t>(s2) * low.n_options + o];
                    for (int o2 = 0; o2 < low.n_options; ++o2)
                        m.transition(m.sa_row(pair, a), low.pair_index(s2, o2)) = p * k[o2];
                }
            }
        }
    }
    for (int s = 0; s < base.n_states; ++s)
        for (int o = 0; o < low.n_options; ++o)
            m.initial[low.pair_index(s, o)] = base.initial[s] * master.pi(s, o);
    m.validate();
    return low;
}

inline HighPolicy build_high_policy(const TabularMDP& base, const OptionSet& options,
                                    const MasterPolicy& master, const HighMDP& high) {
    HighPolicy pol;
    pol.pi.resize(high.mdp.n_states, high.n_options);
    for (int slot = 0; slot <= high.n_options; ++slot)
        for (int s = 0; s < base.n_states; ++s)
            pol.pi.row(slot * base.n_states + s) =
                option_transition_kernel(base, options, master, s, slot - 1).transpose();
    return pol;
}

inline LowPolicy build_low_policy(const TabularMDP& base, const OptionSet& options,
                                  const LowMDP& low) {
    LowPolicy pol;
    pol.pi.resize(low.mdp.n_states, base.n_actions);
    for (int o = 0; o < low.n_options; ++o)
        for (int s = 0; s < base.n_states; ++s)
            pol.pi.row(low.pair_index(s, o)) = options[o].pi.row(s);
    return pol;
}

/// Option-level trajectory on the high MDP: states are (previous option,
/// state) pairs, actions are the options chosen, rewards are copied.
struct HighTrajectory {
    std::vector<int> states;
    std::vector<int> actions;
    std::vector<double> rewards;
    bool terminated = false;
};

/// Action-level trajectory on the low MDP: states are (state, option) pairs
/// for every step taken; the final base state is kept separately with its
/// option slot marginalized, because the episode ends before the next option
/// is drawn (any concrete final draw sums to the same measure).
struct LowTrajectory {
    std::vector<int> states;  // pair per step, length = number of actions
    std::vector<int> actions;
    std::vector<double> rewards;
    int final_base_state = -1;
    bool terminated = false;
};

/// Map a base trajectory to its high-MDP twin (actions are forgotten; the
/// option sequence becomes the action sequence).
inline HighTrajectory lift_high(const HighMDP& high, const Trajectory& traj) {
    traj.validate();
    HighTrajectory out;
    const int T = traj.length();
    out.states.reserve(static_cast<std::size_t>(T) + 1);
    out.states.push_back(high.pair_index(OptionSet::dummy_index, traj.states[0]));
    for (int t = 0; t < T; ++t)
        out.states.push_back(high.pair_index(traj.options[static_cast<std::size_t>(t)],
                                             traj.states[static_cast<std::size_t>(t) + 1]));
    out.actions = traj.options;
    out.rewards = traj.rewards;
    out.terminated = traj.terminated;
    return out;
}

/// Invert lift_high. Actions of the base twin are unknown at the option
/// level, so the result has empty actions.
inline Trajectory lower_high(const HighMDP& high, const HighTrajectory& traj) {
    Trajectory out;
    out.states.reserve(traj.states.size());
    for (int pair : traj.states) out.states.push_back(high.pair_state(pair));
    for (std::size_t t = 1; t < traj.states.size(); ++t) {
        const int o = high.pair_option(traj.states[t]);
        if (o < 0 || o != traj.actions[t - 1])
            throw std::invalid_argument("lower_high: pair options disagree with actions");
    }
    out.options = traj.actions;
    out.rewards = traj.rewards;
    out.terminated = traj.terminated;
    return out;
}

/// Map a base trajectory (with actions) to its low-MDP twin.
inline LowTrajectory lift_low(const LowMDP& low, const Trajectory& traj) {
    traj.validate();
    if (traj.actions.size() != traj.options.size())
        throw std::invalid_argument("lift_low: base trajectory must record actions");
    LowTrajectory out;
    const int T = traj.length();
    for (int t = 0; t < T; ++t)
        out.states.push_back(low.pair_index(traj.states[static_cast<std::size_t>(t)],
                                            traj.options[static_cast<std::size_t>(t)]));
    out.actions = traj.actions;
    out.rewards = traj.rewards;
    out.final_base_state = traj.states.back();
    out.terminated = traj.terminated;
    return out;
}

/// Invert lift_low.
inline Trajectory lower_low(const LowMDP& low, const LowTrajectory& traj) {
    Trajectory out;
    for (int pair : traj.states) {
        out.states.push_back(low.pair_state(pair));
        out.options.push_back(low.pair_option(pair));
    }
    out.states.push_back(traj.final_base_state);
    out.actions = traj.actions;
    out.rewards = traj.rewards;
    out.terminated = traj.terminated;
    return out;
}

}  // namespace optionkit
