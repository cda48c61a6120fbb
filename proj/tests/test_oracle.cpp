#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "optionkit/environments.hpp"
#include "optionkit/oracle.hpp"

using namespace optionkit;

namespace {

bool near(double a, double b, double tol) { return std::abs(a - b) <= tol; }

Instance small_instance(std::uint64_t seed, bool with_terminal = true, double gamma = 0.9) {
    RandomStream rng(seed);
    return random_instance(rng, 4, 2, 2, gamma, with_terminal);
}

/// Finite-horizon value of the call-and-return process by backward induction
/// over (state, previous-option) pairs. Written against the one-step kernels
/// only, so it shares no code with the trajectory enumeration it checks.
double truncated_value_dp(const TabularMDP& mdp, const OptionSet& opts,
                          const MasterPolicy& master, int horizon) {
    const int S = mdp.n_states, N = opts.size();
    Eigen::MatrixXd v = Eigen::MatrixXd::Zero(S, N + 1);  // column 0: fresh start
    for (int k = 0; k < horizon; ++k) {
        Eigen::MatrixXd nv = Eigen::MatrixXd::Zero(S, N + 1);
        for (int s = 0; s < S; ++s) {
            if (mdp.is_terminal(s)) continue;
            for (int slot = 0; slot <= N; ++slot) {
                const Eigen::VectorXd kern =
                    option_transition_kernel(mdp, opts, master, s, slot - 1);
                double acc = 0.0;
                for (int o = 0; o < N; ++o) {
                    if (kern[o] == 0.0) continue;
                    const auto so = state_option_kernel(mdp, opts, s, o);
                    double inner = so.second;
                    for (int s2 = 0; s2 < S; ++s2)
                        if (so.first[s2] != 0.0) inner += mdp.gamma * so.first[s2] * v(s2, o + 1);
                    acc += kern[o] * inner;
                }
                nv(s, slot) = acc;
            }
        }
        v = std::move(nv);
    }
    double j = 0.0;
    for (int s = 0; s < S; ++s) j += mdp.initial[s] * v(s, 0);
    return j;
}

}  // namespace

TEST_CASE("option-level enumeration is a probability measure") {
    const Instance inst = small_instance(7);
    double mass = 0.0, worst = 0.0;
    long leaves = 0;
    for_each_option_trajectory(inst.mdp, inst.options, inst.master, 5,
                               [&](const Trajectory& t, double p) {
                                   mass += p;
                                   ++leaves;
                                   const double scored = trajectory_probability(
                                       inst.mdp, inst.options, inst.master, t);
                                   worst = std::max(worst, std::abs(p - scored));
                                   REQUIRE(t.actions.empty());
                               });
    REQUIRE(leaves > 100);
    REQUIRE(near(mass, 1.0, 1e-12));
    REQUIRE(worst < 1e-13);
}

TEST_CASE("action-level enumeration is a probability measure") {
    const Instance inst = small_instance(8);
    double mass = 0.0, worst = 0.0;
    for_each_action_trajectory(inst.mdp, inst.options, inst.master, 4,
                               [&](const Trajectory& t, double p) {
                                   mass += p;
                                   REQUIRE(t.actions.size() == t.options.size());
                                   const double scored = trajectory_probability(
                                       inst.mdp, inst.options, inst.master, t);
                                   worst = std::max(worst, std::abs(p - scored));
                               });
    REQUIRE(near(mass, 1.0, 1e-12));
    REQUIRE(worst < 1e-13);
}

TEST_CASE("option-level trajectories carry the same probability on the high chain") {
    const Instance inst = small_instance(9);
    const HighMDP high = build_high_mdp(inst.mdp, inst.options, inst.master);
    const HighPolicy pol = build_high_policy(inst.mdp, inst.options, inst.master, high);
    double mass = 0.0, worst = 0.0;
    for_each_option_trajectory(
        inst.mdp, inst.options, inst.master, 5, [&](const Trajectory& t, double p) {
            const double lifted = high_trajectory_probability(high, pol, lift_high(high, t));
            worst = std::max(worst, std::abs(p - lifted));
            mass += lifted;
        });
    REQUIRE(near(mass, 1.0, 1e-12));
    REQUIRE(worst < 1e-12);
}

TEST_CASE("action-level trajectories carry the same probability on the low chain") {
    const Instance inst = small_instance(10);
    const LowMDP low = build_low_mdp(inst.mdp, inst.options, inst.master);
    const LowPolicy pol = build_low_policy(inst.mdp, inst.options, low);
    double mass = 0.0, worst = 0.0;
    for_each_action_trajectory(
        inst.mdp, inst.options, inst.master, 4, [&](const Trajectory& t, double p) {
            const double lifted = low_trajectory_probability(low, pol, lift_low(low, t));
            worst = std::max(worst, std::abs(p - lifted));
            mass += lifted;
        });
    REQUIRE(near(mass, 1.0, 1e-12));
    REQUIRE(worst < 1e-12);

    // a length-zero history scores the base initial mass (slot marginalized)
    const Instance free_inst = small_instance(11, false);
    const LowMDP low2 = build_low_mdp(free_inst.mdp, free_inst.options, free_inst.master);
    Trajectory t0;
    t0.states.push_back(2);
    REQUIRE(near(low_trajectory_probability(low2, build_low_policy(free_inst.mdp,
                                                                   free_inst.options, low2),
                                            lift_low(low2, t0)),
                 free_inst.mdp.initial[2], 1e-15));
}

TEST_CASE("enumerated return equals an independent backward induction") {
    const Instance inst = small_instance(12);
    for (int h : {0, 1, 2, 3, 6}) {
        const double dp = truncated_value_dp(inst.mdp, inst.options, inst.master, h);
        const double en = enumerated_return(inst.mdp, inst.options, inst.master, h);
        REQUIRE(near(en, dp, 1e-12));
    }
    // the action-level enumeration marginalizes to the same expectation
    const double dp4 = truncated_value_dp(inst.mdp, inst.options, inst.master, 4);
    REQUIRE(near(enumerated_return(inst.mdp, inst.options, inst.master, 4, true), dp4, 1e-12));
}

TEST_CASE("exact return sits within the truncation bound of the enumeration") {
    const Instance inst = small_instance(13, true, 0.6);
    const double exact = exact_return(inst.mdp, inst.options, inst.master);
    const double rmax = inst.mdp.reward.cwiseAbs().maxCoeff();
    for (int h : {4, 6, 8}) {
        const double en = enumerated_return(inst.mdp, inst.options, inst.master, h);
        const double bound = std::pow(inst.mdp.gamma, h) * rmax / (1.0 - inst.mdp.gamma);
        REQUIRE(std::abs(exact - en) <= bound + 1e-12);
    }
}

TEST_CASE("coupled evaluation satisfies its own fixed-point equations") {
    for (std::uint64_t seed : {20, 21}) {
        const Instance inst = small_instance(seed, seed == 20);
        const ExactValues ev = exact_policy_evaluation(inst.mdp, inst.options, inst.master);
        REQUIRE(ev.bellman_residual < 1e-10);
        // q(s,o) = r(s,o) + gamma sum_s' p(s'|s,o) u(o,s'), recomposed here
        double worst = 0.0;
        for (int o = 0; o < inst.options.size(); ++o)
            for (int s = 0; s < inst.mdp.n_states; ++s) {
                const auto so = state_option_kernel(inst.mdp, inst.options, s, o);
                double acc = so.second;
                for (int s2 = 0; s2 < inst.mdp.n_states; ++s2)
                    acc += inst.mdp.gamma * so.first[s2] * ev.u(o, s2);
                worst = std::max(worst, std::abs(acc - ev.q_so(s, o)));
            }
        REQUIRE(worst < 1e-10);
    }
}

TEST_CASE("all three chains give the same start-weighted return") {
    const Instance inst = small_instance(22);
    const double base = exact_return(inst.mdp, inst.options, inst.master);

    const HighMDP high = build_high_mdp(inst.mdp, inst.options, inst.master);
    const double via_high = exact_return(
        high.mdp, build_high_policy(inst.mdp, inst.options, inst.master, high).pi);
    REQUIRE(near(base, via_high, 1e-10));

    const LowMDP low = build_low_mdp(inst.mdp, inst.options, inst.master);
    const double via_low =
        exact_return(low.mdp, build_low_policy(inst.mdp, inst.options, low).pi);
    REQUIRE(near(base, via_low, 1e-10));
}

TEST_CASE("state values on both augmented chains match the coupled fixed point") {
    for (std::uint64_t seed : {23, 24, 25}) {
        const Instance inst = small_instance(seed, seed != 24);
        const CrossChainResiduals res =
            cross_chain_value_residual(inst.mdp, inst.options, inst.master);
        CAPTURE(seed, res.low_vs_base, res.high_vs_base, res.synthesis);
        REQUIRE(res.max_residual() < 1e-9);
    }
}

TEST_CASE("sampled returns agree with the closed form") {
    const Instance inst = small_instance(26);
    const double exact = exact_return(inst.mdp, inst.options, inst.master);
    RandomStream rng(27);
    const MonteCarloEstimate est =
        mc_return_estimate(inst.mdp, inst.options, inst.master, rng, 40000, 400);
    REQUIRE(est.n == 40000);
    REQUIRE(est.stderr_of_mean > 0.0);
    REQUIRE(near(est.mean, exact, 4.0 * est.stderr_of_mean + 1e-4));
}

TEST_CASE("flat value iteration recovers the chain walk") {
    KeyValueConfig params;
    params.set("n", "5");
    const TabularMDP m = make_environment("chain", params).mdp;  // gamma 0.99
    const Eigen::MatrixXd q = solve_optimal_q(m);
    for (int s = 0; s < 5; ++s) {
        REQUIRE(near(q(s, 1), std::pow(0.99, 4 - s), 1e-10));  // walk right
        // stepping left wastes a move; at cell 0 it self-loops instead
        const int detour = s > 0 ? 6 - s : 5;
        REQUIRE(near(q(s, 0), std::pow(0.99, detour), 1e-10));
    }
    REQUIRE(q(5, 0) == 0.0);
    REQUIRE(q(5, 1) == 0.0);

    // greedy-policy evaluation closes the loop with the optimal values
    Eigen::MatrixXd greedy = Eigen::MatrixXd::Zero(m.n_states, m.n_actions);
    for (int s = 0; s < m.n_states; ++s) {
        int best = 0;
        for (int a = 1; a < m.n_actions; ++a)
            if (q(s, a) > q(s, best)) best = a;
        greedy(s, best) = 1.0;
    }
    const Eigen::VectorXd v = policy_state_values(m, greedy);
    for (int s = 0; s < m.n_states; ++s)
        REQUIRE(near(v[s], q.row(s).maxCoeff(), 1e-10));
}

TEST_CASE("option-level value iteration recovers runner-option plans") {
    KeyValueConfig params;
    params.set("n", "5");
    const TabularMDP m = make_environment("chain", params).mdp;
    const OptionSet runners = make_runner_options(m);  // option 0 = left, 1 = right
    const Eigen::MatrixXd q = solve_optimal_option_q(m, runners);
    REQUIRE(near(q(0, 1), std::pow(0.99, 4), 1e-12));
    // the left runner self-loops once at cell 0, terminates, then re-plans
    REQUIRE(near(q(0, 0), std::pow(0.99, 5), 1e-12));
    // fixed-internals options cannot beat the primitive optimum
    const Eigen::MatrixXd qflat = solve_optimal_q(m);
    for (int s = 0; s < m.n_states; ++s)
        REQUIRE(q.row(s).maxCoeff() <= qflat.row(s).maxCoeff() + 1e-9);
    REQUIRE(near(q(0, 1), qflat.row(0).maxCoeff(), 1e-10));
}

TEST_CASE("pair chains are stochastic and factor into move and redraw steps") {
    const Instance inst = small_instance(30, false);
    const int S = inst.mdp.n_states, N = inst.options.size();
    const Eigen::MatrixXd E = execution_pair_chain(inst.mdp, inst.options, inst.master);
    const Eigen::MatrixXd A = arrival_pair_chain(inst.mdp, inst.options, inst.master);
    for (int i = 0; i < S * N; ++i) {
        REQUIRE(near(E.row(i).sum(), 1.0, 1e-12));
        REQUIRE(near(A.row(i).sum(), 1.0, 1e-12));
    }

    // move: the base state advances under the running option, slot unchanged
    Eigen::MatrixXd move = Eigen::MatrixXd::Zero(S * N, S * N);
    // redraw: the slot is redrawn by the kernel, base state unchanged
    Eigen::MatrixXd redraw = Eigen::MatrixXd::Zero(S * N, S * N);
    for (int o = 0; o < N; ++o)
        for (int s = 0; s < S; ++s) {
            const Eigen::VectorXd next =
                state_option_kernel(inst.mdp, inst.options, s, o).first;
            for (int s2 = 0; s2 < S; ++s2) move(o * S + s, o * S + s2) = next[s2];
            const Eigen::VectorXd k =
                option_transition_kernel(inst.mdp, inst.options, inst.master, s, o);
            for (int o2 = 0; o2 < N; ++o2) redraw(o * S + s, o2 * S + s) = k[o2];
        }
    REQUIRE((E - move * redraw).cwiseAbs().maxCoeff() < 1e-14);
    REQUIRE((A - redraw * move).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("discounted occupancy matches its power series") {
    const Instance inst = small_instance(31, false);
    const double gamma = inst.mdp.gamma;
    for (const Eigen::MatrixXd& chain :
         {execution_pair_chain(inst.mdp, inst.options, inst.master),
          arrival_pair_chain(inst.mdp, inst.options, inst.master)}) {
        Eigen::VectorXd root = Eigen::VectorXd::Zero(chain.rows());
        root[3] = 1.0;
        const Eigen::VectorXd rho = discounted_occupancy(chain, gamma, root);
        // occupancies of a stochastic chain integrate to the discount horizon
        REQUIRE(near(rho.sum(), 1.0 / (1.0 - gamma), 1e-9));

        Eigen::VectorXd acc = root, x = root;
        for (int t = 1; t <= 2000; ++t) {
            x = gamma * chain.transpose() * x;
            acc += x;
        }
        REQUIRE((rho - acc).cwiseAbs().maxCoeff() < 1e-10);
    }
    REQUIRE_THROWS_AS(
        discounted_occupancy(Eigen::MatrixXd::Zero(3, 3), 0.9, Eigen::VectorXd::Zero(2)),
        std::invalid_argument);
}

TEST_CASE("action-preference gradient matches finite differences") {
    RandomStream rng(40);
    const Instance shape = [&] {
        RandomStream r(41);
        return random_instance(r, 3, 2, 2, 0.8, false);
    }();
    PolicyShapes sh;
    sh.n_states = 3;
    sh.n_actions = 2;
    sh.n_options = 2;
    sh.kind = ParamKind::softmax_tabular;
    PolicyParams p = PolicyParams::init(sh, rng);
    for (int i = 0; i < p.xi.size(); ++i) p.xi[i] += 0.6 * rng.normal();

    const int s0 = 0, o0 = 1;
    const Eigen::VectorXd g = grad_q_nu_exact(shape.mdp, p, s0, o0);
    const auto f = [&] {
        return exact_policy_evaluation(shape.mdp, options_from(p), master_from(p)).q_so(s0, o0);
    };
    const Eigen::VectorXd fd = fd_gradient_block(p.xi, p.nu_offset(), p.nu_size(), kFdStep, f);
    for (int i = 0; i < g.size(); ++i) {
        CAPTURE(i, g[i], fd[i]);
        REQUIRE(near(g[i], fd[i], 5e-6 * std::max(1.0, std::abs(g[i]))));
    }
}

TEST_CASE("termination gradients match finite differences") {
    for (std::uint64_t seed : {50, 51}) {
        RandomStream rng(seed);
        const Instance shape = [&] {
            RandomStream r(seed + 100);
            return random_instance(r, 3, 2, 2, 0.8, seed == 51);
        }();
        PolicyShapes sh;
        sh.n_states = 3;
        sh.n_actions = 2;
        sh.n_options = 2;
        sh.kind = ParamKind::softmax_tabular;
        PolicyParams p = PolicyParams::init(sh, rng);
        for (int i = 0; i < p.xi.size(); ++i) p.xi[i] += 0.6 * rng.normal();

        const int o0 = 1, s1 = 2;
        const Eigen::VectorXd gu = grad_u_phi_exact(shape.mdp, p, o0, s1);
        const auto fu = [&] {
            return exact_policy_evaluation(shape.mdp, options_from(p), master_from(p)).u(o0, s1);
        };
        const Eigen::VectorXd fdu =
            fd_gradient_block(p.xi, p.phi_offset(), p.phi_size(), kFdStep, fu);
        for (int i = 0; i < gu.size(); ++i) {
            CAPTURE(seed, i, gu[i], fdu[i]);
            REQUIRE(near(gu[i], fdu[i], 5e-6 * std::max(1.0, std::abs(gu[i]))));
        }

        const int s0 = 1;
        const Eigen::VectorXd gv = grad_v_phi_exact(shape.mdp, p, s0);
        const auto fv = [&] {
            return exact_policy_evaluation(shape.mdp, options_from(p), master_from(p)).v[s0];
        };
        const Eigen::VectorXd fdv =
            fd_gradient_block(p.xi, p.phi_offset(), p.phi_size(), kFdStep, fv);
        for (int i = 0; i < gv.size(); ++i) {
            CAPTURE(seed, i, gv[i], fdv[i]);
            REQUIRE(near(gv[i], fdv[i], 5e-6 * std::max(1.0, std::abs(gv[i]))));
        }
    }
}

TEST_CASE("central differences are exact on quadratics") {
    Eigen::VectorXd x(2);
    x << 1.3, -0.4;
    const double fd = central_difference(x, 0, 1e-5, [&] { return x[0] * x[0]; });
    REQUIRE(near(fd, 2.6, 1e-9));
    REQUIRE(x[0] == 1.3);  // restored after perturbation
}

TEST_CASE("option posterior matches hand-computed weights") {
    // two options, beta = 0.2 everywhere, master (0.6, 0.4) everywhere
    TabularMDP m;
    m.n_states = 2;
    m.n_actions = 2;
    m.gamma = 0.9;
    m.transition = Eigen::MatrixXd::Constant(4, 2, 0.5);
    m.reward = Eigen::MatrixXd::Zero(2, 2);
    m.initial = Eigen::VectorXd::Constant(2, 0.5);
    m.terminal = {0, 0};
    m.validate();

    OptionSet opts;
    Option o0, o1;
    o0.beta = Eigen::VectorXd::Constant(2, 0.2);
    o1.beta = o0.beta;
    o0.pi.resize(2, 2);
    o0.pi << 0.9, 0.1, 0.9, 0.1;
    o1.pi.resize(2, 2);
    o1.pi << 0.3, 0.7, 0.3, 0.7;
    opts.options = {o0, o1};
    MasterPolicy master;
    master.pi.resize(2, 2);
    master.pi << 0.6, 0.4, 0.6, 0.4;

    // no evidence yet: the posterior is the master row
    const Eigen::VectorXd p0 = option_posterior_enumeration(m, opts, master, {0}, {});
    REQUIRE(near(p0[0], 0.6, 1e-15));
    REQUIRE(near(p0[1], 0.4, 1e-15));

    // one observed action re-weights by the option likelihoods, then the
    // slot is pushed through the switching kernel
    const Eigen::VectorXd p1 = option_posterior_enumeration(m, opts, master, {0, 1}, {0});
    const double w0 = 0.6 * 0.9, w1 = 0.4 * 0.3;
    const double k00 = 0.8 + 0.2 * 0.6, k01 = 0.2 * 0.4;
    const double k10 = 0.2 * 0.6, k11 = 0.8 + 0.2 * 0.4;
    const double u0 = w0 * k00 + w1 * k10, u1 = w0 * k01 + w1 * k11;
    REQUIRE(near(p1[0], u0 / (u0 + u1), 1e-13));
    REQUIRE(near(p1[1], u1 / (u0 + u1), 1e-13));
    REQUIRE(near(p1.sum(), 1.0, 1e-15));

    // impossible histories are rejected
    OptionSet det;
    Option d = o0;
    d.pi << 1.0, 0.0, 1.0, 0.0;
    det.options = {d, d};
    REQUIRE_THROWS_AS(option_posterior_enumeration(m, det, master, {0, 1}, {1}),
                      std::domain_error);
    REQUIRE_THROWS_AS(option_posterior_enumeration(m, opts, master, {0, 1}, {}),
                      std::invalid_argument);
}

TEST_CASE("posterior stays normalized along sampled histories") {
    const Instance inst = small_instance(60, false);
    RandomStream rng(61);
    const Trajectory traj = sample_episode(inst.mdp, inst.options, inst.master, rng, 6);
    for (std::size_t t = 0; t + 1 <= traj.states.size(); ++t) {
        const std::vector<int> states(traj.states.begin(),
                                      traj.states.begin() + static_cast<long>(t) + 1);
        const std::vector<int> actions(traj.actions.begin(),
                                       traj.actions.begin() + static_cast<long>(t));
        const Eigen::VectorXd post =
            option_posterior_enumeration(inst.mdp, inst.options, inst.master, states, actions);
        REQUIRE(near(post.sum(), 1.0, 1e-12));
        REQUIRE(post.minCoeff() >= 0.0);
    }
}

TEST_CASE("flat enumeration agrees with truncated dynamic programming") {
    RandomStream rng(70);
    const Instance inst = random_instance(rng, 4, 3, 2, 0.85, true);
    // random flat policy over primitive actions
    Eigen::MatrixXd pol(4, 3);
    for (int s = 0; s < 4; ++s) {
        Eigen::VectorXd row(3);
        for (int a = 0; a < 3; ++a) row[a] = rng.uniform() + 0.05;
        pol.row(s) = (row / row.sum()).transpose();
    }

    for (int horizon : {0, 1, 3, 5}) {
        // backward induction on the same truncated objective
        Eigen::VectorXd v = Eigen::VectorXd::Zero(4);
        for (int k = 0; k < horizon; ++k) {
            Eigen::VectorXd nv = Eigen::VectorXd::Zero(4);
            for (int s = 0; s < 4; ++s) {
                if (inst.mdp.is_terminal(s)) continue;
                for (int a = 0; a < 3; ++a)
                    nv[s] += pol(s, a) *
                             (inst.mdp.reward(s, a) +
                              inst.mdp.gamma *
                                  inst.mdp.transition.row(inst.mdp.sa_row(s, a)).dot(v));
            }
            v = nv;
        }
        CAPTURE(horizon);
        REQUIRE(near(enumerated_flat_return(inst.mdp, pol, horizon), inst.mdp.initial.dot(v),
                     1e-12));
    }

    Eigen::MatrixXd bad(4, 2);
    REQUIRE_THROWS_AS(enumerated_flat_return(inst.mdp, bad, 2), std::invalid_argument);
}

TEST_CASE("both paired processes reproduce the base return as flat chains") {
    for (std::uint64_t seed : {71, 72, 73}) {
        const Instance inst = small_instance(seed, seed % 2 == 0);
        const HighMDP high = build_high_mdp(inst.mdp, inst.options, inst.master);
        const HighPolicy hp = build_high_policy(inst.mdp, inst.options, inst.master, high);
        const LowMDP low = build_low_mdp(inst.mdp, inst.options, inst.master);
        const LowPolicy lp = build_low_policy(inst.mdp, inst.options, low);
        for (int horizon : {0, 2, 4}) {
            const double base = enumerated_return(inst.mdp, inst.options, inst.master, horizon);
            CAPTURE(seed, horizon);
            REQUIRE(near(enumerated_flat_return(high.mdp, hp.pi, horizon), base, 1e-12));
            REQUIRE(near(enumerated_flat_return(low.mdp, lp.pi, horizon), base, 1e-12));
        }
    }
}
