#pragma once

// Exact reference computations for the call-and-return process: trajectory
// enumeration, closed-form policy evaluation, discounted pair occupancies,
// analytic parameter gradients, and posterior enumeration. Nothing here is
// shared with the learning code, so these routines can stand witness
// against it in tests.
//
// Enumeration cost grows like (options * actions * states)^horizon; callers
// are expected to keep instances small (a handful of states, horizon <= 6).

#include <cmath>
#include <functional>
#include <stdexcept>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "optionkit/augmented.hpp"
#include "optionkit/funcapprox.hpp"
#include "optionkit/mdp.hpp"

namespace optionkit {

namespace detail {

/// Per-instance tables reused across enumeration nodes.
struct ProcessTables {
    const TabularMDP& mdp;
    const OptionSet& options;
    std::vector<Eigen::VectorXd> kernel;   // (o_prev slot, s) -> option distribution
    std::vector<Eigen::VectorXd> so_next;  // (s, o) -> next-state distribution
    std::vector<double> so_reward;         // (s, o) -> expected one-step reward

    ProcessTables(const TabularMDP& m, const OptionSet& opts, const MasterPolicy& master)
        : mdp(m), options(opts) {
        const int S = m.n_states, N = opts.size();
        kernel.resize(static_cast<std::size_t>(N + 1) * S);
        for (int slot = 0; slot <= N; ++slot)
            for (int s = 0; s < S; ++s)
                kernel[static_cast<std::size_t>(slot) * S + s] =
                    option_transition_kernel(m, opts, master, s, slot - 1);
        so_next.resize(static_cast<std::size_t>(N) * S);
        so_reward.resize(static_cast<std::size_t>(N) * S);
        for (int o = 0; o < N; ++o)
            for (int s = 0; s < S; ++s) {
                auto [next, r] = state_option_kernel(m, opts, s, o);
                so_next[static_cast<std::size_t>(o) * S + s] = std::move(next);
                so_reward[static_cast<std::size_t>(o) * S + s] = r;
            }
    }

    const Eigen::VectorXd& kernel_at(int s, int o_prev) const {
        return kernel[static_cast<std::size_t>(o_prev + 1) * mdp.n_states + s];
    }
    const Eigen::VectorXd& next_at(int s, int o) const {
        return so_next[static_cast<std::size_t>(o) * mdp.n_states + s];
    }
    double reward_at(int s, int o) const {
        return so_reward[static_cast<std::size_t>(o) * mdp.n_states + s];
    }
};

template <class Fn>
void option_level_dfs(const ProcessTables& tab, int horizon, Trajectory& t, double prob, Fn& fn) {
    const int s = t.states.back();
    if (tab.mdp.is_terminal(s) || t.length() == horizon) {
        t.terminated = tab.mdp.is_terminal(s);
        fn(static_cast<const Trajectory&>(t), prob);
        return;
    }
    const int o_prev = t.options.empty() ? OptionSet::dummy_index : t.options.back();
    const Eigen::VectorXd& k = tab.kernel_at(s, o_prev);
    for (int o = 0; o < tab.options.size(); ++o) {
        if (k[o] == 0.0) continue;
        const Eigen::VectorXd& next = tab.next_at(s, o);
        for (int s2 = 0; s2 < tab.mdp.n_states; ++s2) {
            if (next[s2] == 0.0) continue;
            t.options.push_back(o);
            t.rewards.push_back(tab.reward_at(s, o));
            t.states.push_back(s2);
            option_level_dfs(tab, horizon, t, prob * k[o] * next[s2], fn);
            t.states.pop_back();
            t.rewards.pop_back();
            t.options.pop_back();
        }
    }
}

template <class Fn>
void action_level_dfs(const ProcessTables& tab, int horizon, Trajectory& t, double prob, Fn& fn) {
    const int s = t.states.back();
    if (tab.mdp.is_terminal(s) || t.length() == horizon) {
        t.terminated = tab.mdp.is_terminal(s);
        fn(static_cast<const Trajectory&>(t), prob);
        return;
    }
    const int o_prev = t.options.empty() ? OptionSet::dummy_index : t.options.back();
    const Eigen::VectorXd& k = tab.kernel_at(s, o_prev);
    for (int o = 0; o < tab.options.size(); ++o) {
        if (k[o] == 0.0) continue;
        for (int a = 0; a < tab.mdp.n_actions; ++a) {
            const double pa = tab.options[o].pi(s, a);
            if (pa == 0.0) continue;
            const auto row = tab.mdp.transition.row(tab.mdp.sa_row(s, a));
            for (int s2 = 0; s2 < tab.mdp.n_states; ++s2) {
                if (row[s2] == 0.0) continue;
                t.options.push_back(o);
                t.actions.push_back(a);
                t.rewards.push_back(tab.mdp.reward(s, a));
                t.states.push_back(s2);
                action_level_dfs(tab, horizon, t, prob * k[o] * pa * row[s2], fn);
                t.states.pop_back();
                t.rewards.pop_back();
                t.actions.pop_back();
                t.options.pop_back();
            }
        }
    }
}

}  // namespace detail

/// Enumerate every positive-probability option-level trajectory (primitive
/// actions marginalized away; rewards are per-step expected rewards) up to
/// `horizon` steps, stopping early in terminal states. fn(trajectory, prob)
/// is called once per leaf; the probabilities include the initial-state
/// factor and sum to one.
template <class Fn>
void for_each_option_trajectory(const TabularMDP& mdp, const OptionSet& options,
                                const MasterPolicy& master, int horizon, Fn fn) {
    const detail::ProcessTables tab(mdp, options, master);
    for (int s0 = 0; s0 < mdp.n_states; ++s0) {
        if (mdp.initial[s0] == 0.0) continue;
        Trajectory t;
        t.states.push_back(s0);
        detail::option_level_dfs(tab, horizon, t, mdp.initial[s0], fn);
    }
}

/// Enumerate every positive-probability action-level trajectory (options and
/// primitive actions both explicit) up to `horizon` steps.
template <class Fn>
void for_each_action_trajectory(const TabularMDP& mdp, const OptionSet& options,
                                const MasterPolicy& master, int horizon, Fn fn) {
    const detail::ProcessTables tab(mdp, options, master);
    for (int s0 = 0; s0 < mdp.n_states; ++s0) {
        if (mdp.initial[s0] == 0.0) continue;
        Trajectory t;
        t.states.push_back(s0);
        detail::action_level_dfs(tab, horizon, t, mdp.initial[s0], fn);
    }
}

/// Probability of a base trajectory under the process, including the
/// initial-state factor. A trajectory without recorded actions is scored at
/// the option level (each step's action marginalized); one with actions is
/// scored in full.
inline double trajectory_probability(const TabularMDP& mdp, const OptionSet& options,
                                     const MasterPolicy& master, const Trajectory& traj) {
    traj.validate();
    const bool full = traj.actions.size() == traj.options.size();
    double p = mdp.initial[traj.states[0]];
    int o_prev = OptionSet::dummy_index;
    for (int t = 0; t < traj.length(); ++t) {
        const int s = traj.states[static_cast<std::size_t>(t)];
        const int s2 = traj.states[static_cast<std::size_t>(t) + 1];
        const int o = traj.options[static_cast<std::size_t>(t)];
        p *= option_transition_kernel(mdp, options, master, s, o_prev)[o];
        if (full) {
            const int a = traj.actions[static_cast<std::size_t>(t)];
            p *= options[o].pi(s, a) * mdp.transition(mdp.sa_row(s, a), s2);
        } else {
            p *= state_option_kernel(mdp, options, s, o).first[s2];
        }
        o_prev = o;
    }
    return p;
}

/// Probability of a trajectory of the high augmented chain under its policy,
/// including the initial factor.
inline double high_trajectory_probability(const HighMDP& high, const HighPolicy& pol,
                                          const HighTrajectory& traj) {
    if (traj.states.size() != traj.actions.size() + 1)
        throw std::invalid_argument("high trajectory shape mismatch");
    double p = high.mdp.initial[traj.states[0]];
    for (std::size_t t = 0; t < traj.actions.size(); ++t) {
        const int pair = traj.states[t], o = traj.actions[t];
        p *= pol.pi(pair, o) * high.mdp.transition(high.mdp.sa_row(pair, o), traj.states[t + 1]);
    }
    return p;
}

/// Probability of a trajectory of the low augmented chain under its policy.
/// The final pair's option slot is never observed (the episode ends before
/// the next option is drawn), so the last transition factor sums the slot
/// out; that sum equals the base transition row, keeping the measure exact.
inline double low_trajectory_probability(const LowMDP& low, const LowPolicy& pol,
                                         const LowTrajectory& traj) {
    const std::size_t T = traj.actions.size();
    if (traj.states.size() != T)
        throw std::invalid_argument("low trajectory shape mismatch");
    check_index(traj.final_base_state, low.n_base_states, "final base state");
    if (T == 0) {
        double p = 0.0;
        for (int o = 0; o < low.n_options; ++o)
            p += low.mdp.initial[low.pair_index(traj.final_base_state, o)];
        return p;
    }
    double p = low.mdp.initial[traj.states[0]];
    for (std::size_t t = 0; t + 1 < T; ++t) {
        const int pair = traj.states[t], a = traj.actions[t];
        p *= pol.pi(pair, a) * low.mdp.transition(low.mdp.sa_row(pair, a), traj.states[t + 1]);
    }
    const int pair = traj.states[T - 1], a = traj.actions[T - 1];
    double last = 0.0;
    for (int o = 0; o < low.n_options; ++o)
        last +=
            low.mdp.transition(low.mdp.sa_row(pair, a), low.pair_index(traj.final_base_state, o));
    return p * pol.pi(pair, a) * last;
}

// ---------------------------------------------------------------------------
// closed-form evaluation
// ---------------------------------------------------------------------------

/// State values of a fixed policy on an arbitrary tabular MDP:
/// v = (I - gamma P_pi)^(-1) r_pi, solved densely.
inline Eigen::VectorXd policy_state_values(const TabularMDP& mdp, const Eigen::MatrixXd& policy) {
    const int S = mdp.n_states;
    if (policy.rows() != S || policy.cols() != mdp.n_actions)
        throw std::invalid_argument("policy_state_values: policy shape mismatch");
    Eigen::MatrixXd a = Eigen::MatrixXd::Identity(S, S);
    Eigen::VectorXd b = Eigen::VectorXd::Zero(S);
    for (int s = 0; s < S; ++s) {
        for (int act = 0; act < mdp.n_actions; ++act) {
            const double w = policy(s, act);
            if (w == 0.0) continue;
            b[s] += w * mdp.reward(s, act);
            a.row(s) -= mdp.gamma * w * mdp.transition.row(mdp.sa_row(s, act));
        }
    }
    return a.partialPivLu().solve(b);
}

/// Start-distribution-weighted value of a fixed policy.
inline double exact_return(const TabularMDP& mdp, const Eigen::MatrixXd& policy) {
    return mdp.initial.dot(policy_state_values(mdp, policy));
}

/// All the fixed-point values of the call-and-return process at once.
struct ExactValues {
    Eigen::MatrixXd q_so;                // n_states x n_options
    std::vector<Eigen::MatrixXd> q_soa;  // per option: n_states x n_actions
    Eigen::VectorXd v;                   // n_states
    Eigen::MatrixXd u;                   // n_options x n_states
    double bellman_residual = 0.0;       // consistency of q_so against q_soa
};

/// Solve the coupled option-value equations exactly (dense LU over
/// (state, option) pairs), then derive v, u and the action values.
inline ExactValues exact_policy_evaluation(const TabularMDP& mdp, const OptionSet& options,
                                           const MasterPolicy& master) {
    mdp.validate();
    options.validate(mdp);
    master.validate(mdp.n_states, options.size());
    const int S = mdp.n_states, A = mdp.n_actions, N = options.size();
    const int P = S * N;
    const auto idx = [S](int s, int o) { return o * S + s; };

    Eigen::MatrixXd lhs = Eigen::MatrixXd::Identity(P, P);
    Eigen::VectorXd rhs(P);
    for (int o = 0; o < N; ++o) {
        for (int s = 0; s < S; ++s) {
            auto [next, r] = state_option_kernel(mdp, options, s, o);
            rhs[idx(s, o)] = r;
            for (int s2 = 0; s2 < S; ++s2) {
                const double p = next[s2];
                if (p == 0.0) continue;
                const double beta = options[o].beta[s2];
                lhs(idx(s, o), idx(s2, o)) -= mdp.gamma * p * (1.0 - beta);
                for (int o2 = 0; o2 < N; ++o2)
                    lhs(idx(s, o), idx(s2, o2)) -= mdp.gamma * p * beta * master.pi(s2, o2);
            }
        }
    }
    const Eigen::VectorXd q = lhs.partialPivLu().solve(rhs);

    ExactValues ev;
    ev.q_so.resize(S, N);
    for (int o = 0; o < N; ++o)
        for (int s = 0; s < S; ++s) ev.q_so(s, o) = q[idx(s, o)];
    ev.v.resize(S);
    for (int s = 0; s < S; ++s) ev.v[s] = master.pi.row(s).dot(ev.q_so.row(s));
    ev.u.resize(N, S);
    for (int o = 0; o < N; ++o)
        for (int s = 0; s < S; ++s)
            ev.u(o, s) = (1.0 - options[o].beta[s]) * ev.q_so(s, o) + options[o].beta[s] * ev.v[s];
    ev.q_soa.resize(static_cast<std::size_t>(N));
    for (int o = 0; o < N; ++o) {
        Eigen::MatrixXd& qa = ev.q_soa[static_cast<std::size_t>(o)];
        qa.resize(S, A);
        for (int s = 0; s < S; ++s)
            for (int a = 0; a < A; ++a) {
                double acc = mdp.reward(s, a);
                const auto row = mdp.transition.row(mdp.sa_row(s, a));
                for (int s2 = 0; s2 < S; ++s2)
                    if (row[s2] != 0.0) acc += mdp.gamma * row[s2] * ev.u(o, s2);
                qa(s, a) = acc;
            }
        // q(s,o) must re-emerge as the policy mixture of the action values
        for (int s = 0; s < S; ++s) {
            const double mix = options[o].pi.row(s).dot(qa.row(s));
            ev.bellman_residual = std::max(ev.bellman_residual, std::abs(mix - ev.q_so(s, o)));
        }
    }
    return ev;
}

/// Start-distribution-weighted value of the whole process.
inline double exact_return(const TabularMDP& mdp, const OptionSet& options,
                           const MasterPolicy& master) {
    return mdp.initial.dot(exact_policy_evaluation(mdp, options, master).v);
}

/// Expected discounted return truncated at `horizon`, by enumeration. The
/// truncation error is bounded by gamma^horizon * max|r| / (1 - gamma).
inline double enumerated_return(const TabularMDP& mdp, const OptionSet& options,
                                const MasterPolicy& master, int horizon,
                                bool action_level = false) {
    long double acc = 0.0L;
    auto fn = [&](const Trajectory& t, double prob) {
        acc += static_cast<long double>(prob) *
               static_cast<long double>(discounted_return(t, mdp.gamma));
    };
    if (action_level)
        for_each_action_trajectory(mdp, options, master, horizon, fn);
    else
        for_each_option_trajectory(mdp, options, master, horizon, fn);
    return static_cast<double>(acc);
}

/// Truncated expected return of a flat stationary policy on any tabular MDP,
/// by exhaustive branch enumeration. Lets the paired processes be evaluated
/// directly as ordinary MDPs, with no option structure in the loop.
inline double enumerated_flat_return(const TabularMDP& mdp, const Eigen::MatrixXd& policy,
                                     int horizon) {
    if (policy.rows() != mdp.n_states || policy.cols() != mdp.n_actions)
        throw std::invalid_argument("enumerated_flat_return: policy shape mismatch");
    long double acc = 0.0L;
    // DFS over (state, depth); prob and g carry the branch mass and the
    // discounted reward collected so far.
    std::function<void(int, int, double, double, double)> walk = [&](int s, int depth,
                                                                     double prob, double g,
                                                                     double scale) {
        if (depth == horizon || mdp.is_terminal(s)) {
            acc += static_cast<long double>(prob) * static_cast<long double>(g);
            return;
        }
        for (int a = 0; a < mdp.n_actions; ++a) {
            const double pa = policy(s, a);
            if (pa == 0.0) continue;
            const double g2 = g + scale * mdp.reward(s, a);
            const auto row = mdp.transition.row(mdp.sa_row(s, a));
            for (int s2 = 0; s2 < mdp.n_states; ++s2) {
                if (row[s2] == 0.0) continue;
                walk(s2, depth + 1, prob * pa * row[s2], g2, scale * mdp.gamma);
            }
        }
    };
    for (int s = 0; s < mdp.n_states; ++s)
        if (mdp.initial[s] > 0.0) walk(s, 0, mdp.initial[s], 0.0, 1.0);
    return static_cast<double>(acc);
}

/// Optimal primitive action values by value iteration.
inline Eigen::MatrixXd solve_optimal_q(const TabularMDP& mdp, double tol = 1e-13,
                                       int max_iter = 1000000) {
    const int S = mdp.n_states, A = mdp.n_actions;
    Eigen::MatrixXd q = Eigen::MatrixXd::Zero(S, A);
    for (int it = 0; it < max_iter; ++it) {
        Eigen::VectorXd best = q.rowwise().maxCoeff();
        Eigen::MatrixXd nq(S, A);
        for (int s = 0; s < S; ++s)
            for (int a = 0; a < A; ++a)
                nq(s, a) =
                    mdp.reward(s, a) + mdp.gamma * mdp.transition.row(mdp.sa_row(s, a)).dot(best);
        const double delta = (nq - q).cwiseAbs().maxCoeff();
        q = std::move(nq);
        if (delta < tol) return q;
    }
    throw std::runtime_error("solve_optimal_q: value iteration did not converge");
}

/// Optimal option values under fixed option internals: the greedy fixed
/// point of q(s,o) = r(s,o) + gamma sum_s' p(s'|s,o) [(1-beta) q(s',o) +
/// beta max_o' q(s',o')], by value iteration.
inline Eigen::MatrixXd solve_optimal_option_q(const TabularMDP& mdp, const OptionSet& options,
                                              double tol = 1e-13, int max_iter = 1000000) {
    const int S = mdp.n_states, N = options.size();
    std::vector<Eigen::VectorXd> next(static_cast<std::size_t>(S) * N);
    Eigen::MatrixXd r(S, N);
    for (int s = 0; s < S; ++s)
        for (int o = 0; o < N; ++o) {
            auto [nx, rr] = state_option_kernel(mdp, options, s, o);
            next[static_cast<std::size_t>(s) * N + o] = std::move(nx);
            r(s, o) = rr;
        }
    Eigen::MatrixXd q = Eigen::MatrixXd::Zero(S, N);
    for (int it = 0; it < max_iter; ++it) {
        Eigen::VectorXd best = q.rowwise().maxCoeff();
        Eigen::MatrixXd nq(S, N);
        for (int s = 0; s < S; ++s)
            for (int o = 0; o < N; ++o) {
                double acc = r(s, o);
                const Eigen::VectorXd& nx = next[static_cast<std::size_t>(s) * N + o];
                for (int s2 = 0; s2 < S; ++s2) {
                    if (nx[s2] == 0.0) continue;
                    const double beta = options[o].beta[s2];
                    acc += mdp.gamma * nx[s2] * ((1.0 - beta) * q(s2, o) + beta * best[s2]);
                }
                nq(s, o) = acc;
            }
        const double delta = (nq - q).cwiseAbs().maxCoeff();
        q = std::move(nq);
        if (delta < tol) return q;
    }
    throw std::runtime_error("solve_optimal_option_q: value iteration did not converge");
}

// ---------------------------------------------------------------------------
// discounted pair occupancies
// ---------------------------------------------------------------------------

/// Execution-pair chain over (option, state) pairs, indexed o * S + s: the
/// base state moves under the running option, then the slot is redrawn at the
/// new state: E[(s,o) -> (s',o')] = p(s'|s,o) * kernel(o'|s',o).
inline Eigen::MatrixXd execution_pair_chain(const TabularMDP& mdp, const OptionSet& options,
                                            const MasterPolicy& master) {
    const int S = mdp.n_states, N = options.size();
    Eigen::MatrixXd chain = Eigen::MatrixXd::Zero(S * N, S * N);
    for (int o = 0; o < N; ++o)
        for (int s = 0; s < S; ++s) {
            const Eigen::VectorXd next = state_option_kernel(mdp, options, s, o).first;
            for (int s2 = 0; s2 < S; ++s2) {
                if (next[s2] == 0.0) continue;
                const Eigen::VectorXd k = option_transition_kernel(mdp, options, master, s2, o);
                for (int o2 = 0; o2 < N; ++o2)
                    chain(o * S + s, o2 * S + s2) = next[s2] * k[o2];
            }
        }
    return chain;
}

/// Arrival-pair chain over (option, state) pairs, indexed o * S + s: the
/// slot is redrawn first at the current state, then the new option moves the
/// base state: A[(o,s) -> (o',s')] = kernel(o'|s,o) * p(s'|s,o').
inline Eigen::MatrixXd arrival_pair_chain(const TabularMDP& mdp, const OptionSet& options,
                                          const MasterPolicy& master) {
    const int S = mdp.n_states, N = options.size();
    Eigen::MatrixXd chain = Eigen::MatrixXd::Zero(S * N, S * N);
    for (int o = 0; o < N; ++o)
        for (int s = 0; s < S; ++s) {
            const Eigen::VectorXd k = option_transition_kernel(mdp, options, master, s, o);
            for (int o2 = 0; o2 < N; ++o2) {
                if (k[o2] == 0.0) continue;
                const Eigen::VectorXd next = state_option_kernel(mdp, options, s, o2).first;
                for (int s2 = 0; s2 < S; ++s2)
                    if (next[s2] != 0.0) chain(o * S + s, o2 * S + s2) = k[o2] * next[s2];
            }
        }
    return chain;
}

/// Discounted occupancy sum_t gamma^t Pr(pair_t = .) of the chain started
/// from `root`, via the dense solve (I - gamma chain^T) rho = root.
inline Eigen::VectorXd discounted_occupancy(const Eigen::MatrixXd& chain, double gamma,
                                            const Eigen::VectorXd& root) {
    if (chain.rows() != chain.cols() || chain.rows() != root.size())
        throw std::invalid_argument("discounted_occupancy: shape mismatch");
    const Eigen::MatrixXd lhs =
        Eigen::MatrixXd::Identity(chain.rows(), chain.rows()) - gamma * chain.transpose();
    return lhs.partialPivLu().solve(root);
}

// ---------------------------------------------------------------------------
// analytic parameter gradients (categorical heads)
// ---------------------------------------------------------------------------

/// d q(s0, o0) / d nu, assembled from the execution-pair occupancy rooted at
/// (s0, o0) and the exact action values:
///   sum_{s,o} rho(s,o) sum_a q(s,o,a) d pi_o(a|s) / d nu.
/// Returns a vector the size of the nu block.
inline Eigen::VectorXd grad_q_nu_exact(const TabularMDP& mdp, const PolicyParams& params, int s0,
                                       int o0) {
    const OptionSet options = options_from(params);
    const MasterPolicy master = master_from(params);
    const ExactValues ev = exact_policy_evaluation(mdp, options, master);
    const int S = mdp.n_states, N = options.size();
    Eigen::VectorXd root = Eigen::VectorXd::Zero(S * N);
    root[o0 * S + s0] = 1.0;
    const Eigen::VectorXd rho =
        discounted_occupancy(execution_pair_chain(mdp, options, master), mdp.gamma, root);
    Eigen::VectorXd gxi = Eigen::VectorXd::Zero(params.xi_size());
    for (int o = 0; o < N; ++o)
        for (int s = 0; s < S; ++s) {
            const double mass = rho[o * S + s];
            if (mass == 0.0) continue;
            for (int a = 0; a < mdp.n_actions; ++a) {
                const double cot = mass * ev.q_soa[static_cast<std::size_t>(o)](s, a) *
                                   options[static_cast<std::size_t>(o)].pi(s, a);
                if (cot != 0.0) pi_hat_logprob_backward(params, s, o, a, cot, gxi);
            }
        }
    return gxi.segment(params.nu_offset(), params.nu_size());
}

namespace detail {

inline Eigen::VectorXd termination_gradient_from_root(const TabularMDP& mdp,
                                                      const PolicyParams& params,
                                                      const OptionSet& options,
                                                      const MasterPolicy& master,
                                                      const Eigen::VectorXd& root) {
    const ExactValues ev = exact_policy_evaluation(mdp, options, master);
    const int S = mdp.n_states, N = options.size();
    const Eigen::VectorXd rho =
        discounted_occupancy(arrival_pair_chain(mdp, options, master), mdp.gamma, root);
    Eigen::VectorXd gxi = Eigen::VectorXd::Zero(params.xi_size());
    for (int o = 0; o < N; ++o)
        for (int s = 0; s < S; ++s) {
            const double mass = rho[o * S + s];
            if (mass == 0.0) continue;
            const double adv = ev.q_so(s, o) - ev.v[s];
            const double beta = options[static_cast<std::size_t>(o)].beta[s];
            const double cot = -mass * adv * beta * (1.0 - beta);
            if (cot != 0.0) params.termination_logit_backward(o, s, cot, gxi);
        }
    return gxi.segment(params.phi_offset(), params.phi_size());
}

}  // namespace detail

/// d u(o0, s1) / d phi: the arrival-pair occupancy rooted at (o0, s1) times
/// the termination advantages,
///   - sum_{o,s} rho(o,s) (q(s,o) - v(s)) d beta_o(s) / d phi.
/// Returns a vector the size of the phi block.
inline Eigen::VectorXd grad_u_phi_exact(const TabularMDP& mdp, const PolicyParams& params, int o0,
                                        int s1) {
    const OptionSet options = options_from(params);
    const MasterPolicy master = master_from(params);
    const int S = mdp.n_states;
    Eigen::VectorXd root = Eigen::VectorXd::Zero(S * options.size());
    root[o0 * S + s1] = 1.0;
    return detail::termination_gradient_from_root(mdp, params, options, master, root);
}

/// d v(s0) / d phi: one discount ahead of the arrival chain rooted in the
/// mixture mu0(o, s') = master(o|s0) p(s'|s0, o).
inline Eigen::VectorXd grad_v_phi_exact(const TabularMDP& mdp, const PolicyParams& params,
                                        int s0) {
    const OptionSet options = options_from(params);
    const MasterPolicy master = master_from(params);
    const int S = mdp.n_states;
    Eigen::VectorXd root = Eigen::VectorXd::Zero(S * options.size());
    for (int o = 0; o < options.size(); ++o) {
        const Eigen::VectorXd next = state_option_kernel(mdp, options, s0, o).first;
        for (int s1 = 0; s1 < S; ++s1) root[o * S + s1] += master.pi(s0, o) * next[s1];
    }
    return mdp.gamma * detail::termination_gradient_from_root(mdp, params, options, master, root);
}

// ---------------------------------------------------------------------------
// cross-chain value identities
// ---------------------------------------------------------------------------

/// Residuals between values computed on the two augmented chains (each by
/// the generic dense evaluator on its own tables) and the coupled fixed
/// point of the base process.
struct CrossChainResiduals {
    double low_vs_base = 0.0;   // v_low(s,o) against q(s,o)
    double high_vs_base = 0.0;  // v_high(o_prev,s) against u(o,s) / v(s)
    double synthesis = 0.0;     // v_high(pair) against its pi_bar mixture of v_low

    double max_residual() const {
        return std::max(low_vs_base, std::max(high_vs_base, synthesis));
    }
};

inline CrossChainResiduals cross_chain_value_residual(const TabularMDP& base,
                                                      const OptionSet& options,
                                                      const MasterPolicy& master) {
    const ExactValues ev = exact_policy_evaluation(base, options, master);
    const HighMDP high = build_high_mdp(base, options, master);
    const LowMDP low = build_low_mdp(base, options, master);
    const Eigen::VectorXd v_high =
        policy_state_values(high.mdp, build_high_policy(base, options, master, high).pi);
    const Eigen::VectorXd v_low =
        policy_state_values(low.mdp, build_low_policy(base, options, low).pi);

    CrossChainResiduals res;
    const int S = base.n_states, N = options.size();
    for (int o = 0; o < N; ++o)
        for (int s = 0; s < S; ++s)
            res.low_vs_base = std::max(
                res.low_vs_base, std::abs(v_low[low.pair_index(s, o)] - ev.q_so(s, o)));
    for (int slot = 0; slot <= N; ++slot)
        for (int s = 0; s < S; ++s) {
            const int pair = slot * S + s;
            const double want = slot == 0 ? ev.v[s] : ev.u(slot - 1, s);
            res.high_vs_base = std::max(res.high_vs_base, std::abs(v_high[pair] - want));
            const Eigen::VectorXd k = option_transition_kernel(base, options, master, s, slot - 1);
            double mix = 0.0;
            for (int o = 0; o < N; ++o) mix += k[o] * v_low[low.pair_index(s, o)];
            res.synthesis = std::max(res.synthesis, std::abs(v_high[pair] - mix));
        }
    return res;
}

// ---------------------------------------------------------------------------
// option posterior by enumeration
// ---------------------------------------------------------------------------

/// Posterior over the active option after observing states s_0..s_T and
/// actions a_0..a_{T-1}, i.e. Pr(O_T = o | history), by direct summation
/// over all option sequences o_0..o_T. Base transition factors are common
/// to every sequence and cancel in the normalization, so they are omitted.
inline Eigen::VectorXd option_posterior_enumeration(const TabularMDP& mdp,
                                                    const OptionSet& options,
                                                    const MasterPolicy& master,
                                                    const std::vector<int>& states,
                                                    const std::vector<int>& actions) {
    if (states.size() != actions.size() + 1)
        throw std::invalid_argument("option_posterior_enumeration: need one more state");
    const int N = options.size();
    const std::size_t T = actions.size();
    Eigen::VectorXd post = Eigen::VectorXd::Zero(N);

    // weight carries the product of kernel and action factors along one
    // partial option sequence; transition factors are deliberately absent
    const std::function<void(std::size_t, int, double)> dfs = [&](std::size_t t, int o_prev,
                                                                  double weight) {
        const Eigen::VectorXd k =
            option_transition_kernel(mdp, options, master, states[t], o_prev);
        for (int o = 0; o < N; ++o) {
            if (k[o] == 0.0) continue;
            const double w = weight * k[o];
            if (t == T) {
                post[o] += w;
                continue;
            }
            const double pa = options[static_cast<std::size_t>(o)].pi(states[t], actions[t]);
            if (pa == 0.0) continue;
            dfs(t + 1, o, w * pa);
        }
    };
    dfs(0, OptionSet::dummy_index, 1.0);
    const double total = post.sum();
    if (!(total > 0.0))
        throw std::domain_error("option_posterior_enumeration: history has zero probability");
    return post / total;
}

// ---------------------------------------------------------------------------
// finite differences and sampling cross-checks
// ---------------------------------------------------------------------------

constexpr double kFdStep = 1e-5;

/// Central difference of f() against coordinate i of x, perturbing in place.
template <class F>
double central_difference(Eigen::VectorXd& x, int i, double h, F&& f) {
    const double x0 = x[i];
    x[i] = x0 + h;
    const double fp = f();
    x[i] = x0 - h;
    const double fm = f();
    x[i] = x0;
    return (fp - fm) / (2.0 * h);
}

/// Central-difference gradient over the block [offset, offset + count).
template <class F>
Eigen::VectorXd fd_gradient_block(Eigen::VectorXd& x, int offset, int count, double h, F&& f) {
    Eigen::VectorXd g(count);
    for (int i = 0; i < count; ++i) g[i] = central_difference(x, offset + i, h, f);
    return g;
}

struct MonteCarloEstimate {
    double mean = 0.0;
    double stderr_of_mean = 0.0;
    long n = 0;
};

/// Sample-average discounted return with its standard error.
inline MonteCarloEstimate mc_return_estimate(const TabularMDP& mdp, const OptionSet& options,
                                             const MasterPolicy& master, RandomStream& rng,
                                             long episodes, int max_steps) {
    MonteCarloEstimate est;
    double m2 = 0.0;
    for (long i = 0; i < episodes; ++i) {
        const double g =
            discounted_return(sample_episode(mdp, options, master, rng, max_steps), mdp.gamma);
        est.n += 1;
        const double delta = g - est.mean;
        est.mean += delta / static_cast<double>(est.n);
        m2 += delta * (g - est.mean);
    }
    if (est.n > 1)
        est.stderr_of_mean = std::sqrt(m2 / (static_cast<double>(est.n) - 1.0) /
                                       static_cast<double>(est.n));
    return est;
}

}  // namespace optionkit
