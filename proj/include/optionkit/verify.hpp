#pragma once

// Self-check suite behind the `verify` subcommand: re-derives the library's
// central identities on random instances and reports the worst residual per
// check against its tolerance. These are faster, smaller-sample versions of
// the exhaustive suites in tests/; a clean pass here is a strong smoke
// signal on a new machine or after local changes.

#include <iomanip>
#include <ostream>
#include <string>
#include <vector>

#include "optionkit/environments.hpp"
#include "optionkit/learners.hpp"
#include "optionkit/oracle.hpp"

namespace optionkit {

struct VerifyRow {
    std::string name;
    double residual = 0.0;
    double tolerance = 0.0;
    bool pass() const { return residual <= tolerance; }
};

namespace detail {

inline PolicyParams random_point(const PolicyShapes& sh, RandomStream& rng, double scale) {
    PolicyParams p = PolicyParams::init(sh, rng);
    for (int i = 0; i < p.xi.size(); ++i) p.xi[i] += scale * rng.normal();
    for (int i = 0; i < p.w.size(); ++i) p.w[i] += scale * rng.normal();
    return p;
}

/// Value of the start state under the materialized tables; the quantity the
/// option-gradient identities differentiate.
inline double start_value_of(const TabularMDP& mdp, const PolicyParams& p, int s0) {
    return exact_policy_evaluation(mdp, options_from(p), master_from(p)).v[s0];
}

}  // namespace detail

inline std::vector<VerifyRow> run_verification(std::uint64_t seed = 2024) {
    std::vector<VerifyRow> rows;
    RandomStream rng(seed);

    // trajectory-measure equality of the base process and both pair chains
    {
        double worst = 0.0, mass_err = 0.0;
        for (int k = 0; k < 25; ++k) {
            const Instance inst =
                random_instance(rng, 2 + rng.uniform_int(3), 2 + rng.uniform_int(2),
                                2 + rng.uniform_int(2), 0.9, k % 2 == 0);
            const HighMDP high = build_high_mdp(inst.mdp, inst.options, inst.master);
            const HighPolicy hp = build_high_policy(inst.mdp, inst.options, inst.master, high);
            const LowMDP low = build_low_mdp(inst.mdp, inst.options, inst.master);
            const LowPolicy lp = build_low_policy(inst.mdp, inst.options, low);
            const int horizon = 3;
            long double mass_h = 0.0L, mass_l = 0.0L;
            for_each_option_trajectory(
                inst.mdp, inst.options, inst.master, horizon,
                [&](const Trajectory& t, double prob) {
                    const double ph = high_trajectory_probability(high, hp, lift_high(high, t));
                    worst = std::max(worst, std::abs(prob - ph));
                    mass_h += static_cast<long double>(ph);
                });
            for_each_action_trajectory(
                inst.mdp, inst.options, inst.master, horizon,
                [&](const Trajectory& t, double prob) {
                    const double pl = low_trajectory_probability(low, lp, lift_low(low, t));
                    worst = std::max(worst, std::abs(prob - pl));
                    mass_l += static_cast<long double>(pl);
                });
            mass_err = std::max(mass_err, std::abs(static_cast<double>(mass_h) - 1.0));
            mass_err = std::max(mass_err, std::abs(static_cast<double>(mass_l) - 1.0));
        }
        rows.push_back({"pair-chain trajectory measures match the base process", worst, 1e-12});
        rows.push_back({"pair-chain trajectory mass sums to one", mass_err, 1e-10});
    }

    // one return, three processes
    {
        double worst = 0.0;
        for (int k = 0; k < 25; ++k) {
            const Instance inst =
                random_instance(rng, 2 + rng.uniform_int(3), 2 + rng.uniform_int(2),
                                2 + rng.uniform_int(2), 0.85, k % 2 == 1);
            const HighMDP high = build_high_mdp(inst.mdp, inst.options, inst.master);
            const HighPolicy hp = build_high_policy(inst.mdp, inst.options, inst.master, high);
            const LowMDP low = build_low_mdp(inst.mdp, inst.options, inst.master);
            const LowPolicy lp = build_low_policy(inst.mdp, inst.options, low);
            const double base = enumerated_return(inst.mdp, inst.options, inst.master, 4);
            worst = std::max(worst,
                             std::abs(base - enumerated_flat_return(high.mdp, hp.pi, 4)));
            worst = std::max(worst, std::abs(base - enumerated_flat_return(low.mdp, lp.pi, 4)));
        }
        rows.push_back({"expected return agrees across all three processes", worst, 1e-12});
    }

    // closed-form evaluation consistency between the chains
    {
        double worst = 0.0;
        for (int k = 0; k < 25; ++k) {
            const Instance inst =
                random_instance(rng, 2 + rng.uniform_int(4), 2 + rng.uniform_int(2),
                                2 + rng.uniform_int(2), 0.9, k % 3 == 0);
            worst = std::max(
                worst,
                cross_chain_value_residual(inst.mdp, inst.options, inst.master).max_residual());
        }
        rows.push_back({"one-critic value identities across the chains", worst, 1e-9});
    }

    // analytic option gradients against central finite differences
    {
        double worst = 0.0;
        for (int k = 0; k < 8; ++k) {
            const Instance inst = random_instance(rng, 3, 2, 2, 0.9, false);
            PolicyShapes sh;
            sh.n_states = 3;
            sh.n_actions = 2;
            sh.n_options = 2;
            sh.kind = ParamKind::softmax_tabular;
            const PolicyParams p = detail::random_point(sh, rng, 0.6);
            const int s0 = rng.uniform_int(3);
            PolicyParams q = p;  // mutable copy perturbed by the FD helpers
            const auto f = [&]() { return detail::start_value_of(inst.mdp, q, s0); };
            const Eigen::VectorXd master_row = master_probs(p, s0);
            Eigen::VectorXd g_nu = Eigen::VectorXd::Zero(p.nu_size());
            for (int o = 0; o < 2; ++o)
                g_nu += master_row[o] * grad_q_nu_exact(inst.mdp, p, s0, o);
            const Eigen::VectorXd fd_nu =
                fd_gradient_block(q.xi, p.nu_offset(), p.nu_size(), kFdStep, f);
            const Eigen::VectorXd g_phi = grad_v_phi_exact(inst.mdp, p, s0);
            const Eigen::VectorXd fd_phi =
                fd_gradient_block(q.xi, p.phi_offset(), p.phi_size(), kFdStep, f);
            for (int i = 0; i < g_nu.size(); ++i)
                worst = std::max(worst, std::abs(g_nu[i] - fd_nu[i]) /
                                            std::max(1.0, std::abs(g_nu[i])));
            for (int i = 0; i < g_phi.size(); ++i)
                worst = std::max(worst, std::abs(g_phi[i] - fd_phi[i]) /
                                            std::max(1.0, std::abs(g_phi[i])));
        }
        rows.push_back({"option-gradient identities vs finite differences", worst, 1e-4});
    }

    // posterior recursion against enumeration
    {
        double worst = 0.0;
        for (int k = 0; k < 20; ++k) {
            const Instance inst = random_instance(rng, 4, 2, 3, 0.9, false);
            RandomStream episode_rng = rng.child(static_cast<std::uint64_t>(k) + 1);
            const Trajectory traj =
                sample_episode(inst.mdp, inst.options, inst.master, episode_rng, 4);
            PosteriorState st = iopg_posterior_init(inst.master, traj.states[0]);
            for (std::size_t t = 0;; ++t) {
                const std::vector<int> states(traj.states.begin(),
                                              traj.states.begin() + static_cast<long>(t) + 1);
                const std::vector<int> actions(traj.actions.begin(),
                                               traj.actions.begin() + static_cast<long>(t));
                const Eigen::VectorXd exact = option_posterior_enumeration(
                    inst.mdp, inst.options, inst.master, states, actions);
                worst = std::max(worst, (st.m - exact).cwiseAbs().maxCoeff());
                if (t + 1 >= traj.states.size()) break;
                iopg_posterior_step(st, inst.options, inst.master, traj.states[t],
                                    traj.actions[t], traj.states[t + 1]);
            }
        }
        rows.push_back({"option posterior recursion vs enumeration", worst, 1e-10});
    }

    // sampled-coordinate finite-difference sweep per parameterization kind
    {
        double worst = 0.0;
        for (ParamKind kind :
             {ParamKind::softmax_tabular, ParamKind::linear_gaussian, ParamKind::feedforward}) {
            PolicyShapes sh;
            sh.n_states = 3;
            sh.n_actions = 2;
            sh.n_options = 2;
            sh.kind = kind;
            sh.hidden = 8;
            if (kind == ParamKind::linear_gaussian) sh.action_head = ActionHeadKind::gaussian;
            const PolicyParams p = detail::random_point(sh, rng, 0.4);
            Eigen::VectorXd g = Eigen::VectorXd::Zero(p.xi_size());
            Eigen::VectorXd action(1);
            action.setZero();
            PolicyParams q = p;  // mutable copy perturbed by the FD helpers
            const auto f = [&]() {
                if (kind == ParamKind::linear_gaussian) return gaussian_logprob(q, 1, 2, action);
                return pi_bar_logprob(q, 0, 2, 1);
            };
            if (kind == ParamKind::linear_gaussian)
                gaussian_logprob_backward(p, 1, 2, action, 1.0, g);
            else
                pi_bar_logprob_backward(p, 0, 2, 1, 1.0, g);
            for (int k = 0; k < 12; ++k) {
                const int i = rng.uniform_int(p.xi_size());
                const double fd = central_difference(q.xi, i, kFdStep, f);
                worst =
                    std::max(worst, std::abs(g[i] - fd) / std::max(1.0, std::abs(g[i])));
            }
        }
        rows.push_back({"policy-gradient machinery vs finite differences", worst, 1e-5});
    }

    // frozen hand-computed update arithmetic
    {
        double worst = 0.0;
        QTable t(3, 2, 0.5, 0.1);
        smdp_q_update(t, 0, 1, 1.0, 2, 2, 0.9, false);
        worst = std::max(worst, std::abs(t.q(0, 1) - 0.5));
        RandomStream irng(9);
        const Instance inst = random_instance(irng, 3, 2, 2, 0.9, false);
        QTable t2(3, 2, 0.1, 0.1);
        intra_option_q_update(t2, inst.options, 0, 1, 0, 1.0, 2, false, 0.9);
        worst = std::max(worst, std::abs(t2.q(0, 1) - 0.1));
        const std::vector<double> a =
            gae_advantages({1.0, 1.0}, {0.0, 0.0, 0.0}, {0, 0}, 0.9, 0.5);
        worst = std::max(worst, std::abs(a[0] - 1.45));
        worst = std::max(worst, std::abs(a[1] - 1.0));
        rows.push_back({"frozen update-rule arithmetic", worst, 1e-15});
    }

    // surrogate gradient at old parameters is the vanilla policy gradient
    {
        PolicyShapes sh;
        sh.n_states = 3;
        sh.n_actions = 2;
        sh.n_options = 2;
        sh.kind = ParamKind::softmax_tabular;
        const PolicyParams p = detail::random_point(sh, rng, 0.5);
        std::vector<PgSample> samples;
        std::vector<int> idx;
        for (int i = 0; i < 12; ++i) {
            PgSample sm;
            sm.s = rng.uniform_int(3);
            sm.o = rng.uniform_int(2);
            sm.a = rng.uniform_int(2);
            sm.adv = rng.normal();
            sm.lp_old = pi_hat_logprob(p, sm.s, sm.o, sm.a);
            samples.push_back(sm);
            idx.push_back(i);
        }
        PgConfig cfg;
        Eigen::VectorXd gxi = Eigen::VectorXd::Zero(p.xi_size());
        Eigen::VectorXd gw = Eigen::VectorXd::Zero(p.w_size());
        PgDiagnostics diag;
        accumulate_pg_gradient(p, samples, idx, PgHead::action_under_option, PgCritic::none,
                               cfg, gxi, gw, diag);
        Eigen::VectorXd vanilla = Eigen::VectorXd::Zero(p.xi_size());
        const double inv_n = 1.0 / static_cast<double>(samples.size());
        for (const PgSample& sm : samples)
            pi_hat_logprob_backward(p, sm.s, sm.o, sm.a, -sm.adv * inv_n, vanilla);
        rows.push_back({"clipped surrogate equals vanilla gradient at old parameters",
                        (gxi - vanilla).cwiseAbs().maxCoeff(), 0.0});
    }

    return rows;
}

inline bool print_verification(const std::vector<VerifyRow>& rows, std::ostream& out) {
    bool all = true;
    std::size_t width = 0;
    for (const auto& r : rows) width = std::max(width, r.name.size());
    out << std::left << std::setw(static_cast<int>(width) + 2) << "check"
        << std::setw(14) << "residual" << std::setw(14) << "tolerance" << "status\n";
    for (const auto& r : rows) {
        all = all && r.pass();
        out << std::left << std::setw(static_cast<int>(width) + 2) << r.name
            << std::setw(14) << std::scientific << std::setprecision(2) << r.residual
            << std::setw(14) << r.tolerance << (r.pass() ? "pass" : "FAIL") << '\n';
    }
    out << (all ? "all checks passed\n" : "CHECKS FAILED\n");
    return all;
}

}  // namespace optionkit
