#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "optionkit/environments.hpp"

using namespace optionkit;

namespace {

bool near(double a, double b, double tol) { return std::abs(a - b) <= tol; }

template <class A, class B>
bool exact_equal(const A& a, const B& b) {
    return a.rows() == b.rows() && a.cols() == b.cols() && (a - b).cwiseAbs().maxCoeff() == 0.0;
}

// state 0: action 0 moves to state 1 paying 1, action 1 stays paying 0;
// state 1 is absorbing
TabularMDP two_state_mdp(double gamma = 0.9) {
    TabularMDP m;
    m.n_states = 2;
    m.n_actions = 2;
    m.gamma = gamma;
    m.transition = Eigen::MatrixXd::Zero(4, 2);
    m.reward = Eigen::MatrixXd::Zero(2, 2);
    m.initial = Eigen::VectorXd::Zero(2);
    m.terminal = {0, 1};
    m.transition(m.sa_row(0, 0), 1) = 1.0;
    m.transition(m.sa_row(0, 1), 0) = 1.0;
    m.transition(m.sa_row(1, 0), 1) = 1.0;
    m.transition(m.sa_row(1, 1), 1) = 1.0;
    m.reward(0, 0) = 1.0;
    m.initial[0] = 1.0;
    return m;
}

Option uniform_option(int n_states, int n_actions, double beta) {
    Option o;
    o.pi = Eigen::MatrixXd::Constant(n_states, n_actions, 1.0 / n_actions);
    o.beta = Eigen::VectorXd::Constant(n_states, beta);
    return o;
}

MasterPolicy uniform_master(int n_states, int n_options) {
    MasterPolicy m;
    m.pi = Eigen::MatrixXd::Constant(n_states, n_options, 1.0 / n_options);
    return m;
}

}  // namespace

TEST_CASE("random stream draws are pinned") {
    RandomStream r(1);
    REQUIRE(r.raw() == 2469588189546311528ULL);
    RandomStream u(1);
    REQUIRE(u.uniform() == 0.13387664401253263);
    REQUIRE(u.uniform() == 0.13640703636619722);
    REQUIRE(u.uniform() == 0.45121490384453811);
}

TEST_CASE("random stream determinism and child streams") {
    RandomStream a(7), b(7);
    for (int i = 0; i < 100; ++i) REQUIRE(a.raw() == b.raw());
    RandomStream parent(7);
    RandomStream c0 = parent.child(0);
    RandomStream c1 = parent.child(1);
    int differing = 0;
    for (int i = 0; i < 16; ++i)
        if (c0.raw() != c1.raw()) ++differing;
    REQUIRE(differing > 0);
}

TEST_CASE("uniform interval and integer draws") {
    RandomStream r(3);
    for (int i = 0; i < 1000; ++i) {
        const double x = r.uniform(-2.0, 3.0);
        REQUIRE(x >= -2.0);
        REQUIRE(x < 3.0);
    }
    std::set<int> seen;
    for (int i = 0; i < 1000; ++i) {
        const int k = r.uniform_int(6);
        REQUIRE(k >= 0);
        REQUIRE(k < 6);
        seen.insert(k);
    }
    REQUIRE(seen.size() == 6);
    REQUIRE_THROWS_AS(r.uniform_int(0), std::invalid_argument);
}

TEST_CASE("normal draws match the first two moments") {
    RandomStream r(11);
    const int n = 100000;
    double mean = 0.0, m2 = 0.0;
    for (int i = 0; i < n; ++i) {
        const double x = r.normal();
        const double d = x - mean;
        mean += d / (i + 1);
        m2 += d * (x - mean);
    }
    const double var = m2 / (n - 1);
    // 3 standard errors: se(mean) ~ 1/sqrt(n), se(var) ~ sqrt(2/n)
    REQUIRE(near(mean, 0.0, 3.0 / std::sqrt(static_cast<double>(n))));
    REQUIRE(near(var, 1.0, 3.0 * std::sqrt(2.0 / n)));
}

TEST_CASE("categorical sampling follows the weights") {
    RandomStream r(5);
    Eigen::VectorXd w(3);
    w << 2.0, 3.0, 5.0;  // unnormalized on purpose
    const int n = 100000;
    int counts[3] = {0, 0, 0};
    for (int i = 0; i < n; ++i) counts[r.categorical(w)] += 1;
    const double probs[3] = {0.2, 0.3, 0.5};
    for (int k = 0; k < 3; ++k) {
        const double f = static_cast<double>(counts[k]) / n;
        const double se = std::sqrt(probs[k] * (1.0 - probs[k]) / n);
        REQUIRE(near(f, probs[k], 3.0 * se));
    }

    Eigen::VectorXd spike(3);
    spike << 0.0, 1.0, 0.0;
    for (int i = 0; i < 50; ++i) REQUIRE(r.categorical(spike) == 1);

    Eigen::VectorXd zero = Eigen::VectorXd::Zero(2);
    REQUIRE_THROWS_AS(r.categorical(zero), std::invalid_argument);
}

TEST_CASE("key-value config parsing") {
    const std::string text =
        "# header comment\n"
        "alpha = 0.5\n"
        "name = four_rooms   # trailing comment\n"
        "flag = true\n"
        "count = 12\n"
        "vec = 1 2.5 -3\n"
        "option[0].beta = 0.125\n"
        "alpha = 0.25\n";
    const KeyValueConfig cfg = KeyValueConfig::from_string(text, "inline");

    REQUIRE(cfg.get_double("alpha") == 0.25);  // later assignment wins
    REQUIRE(cfg.get_string("name") == "four_rooms");
    REQUIRE(cfg.get_bool("flag"));
    REQUIRE(cfg.get_bool("missing", false) == false);
    REQUIRE(cfg.get_int("count") == 12);
    const std::vector<double> v = cfg.get_vector("vec");
    REQUIRE(v.size() == 3);
    REQUIRE(v[0] == 1.0);
    REQUIRE(v[1] == 2.5);
    REQUIRE(v[2] == -3.0);
    REQUIRE(cfg.has("option[0].beta"));
    REQUIRE(cfg.get_double("option[0].beta") == 0.125);

    REQUIRE_THROWS_AS(cfg.get_int("alpha"), ConfigError);     // not integral
    REQUIRE_THROWS_AS(cfg.get_string("absent"), ConfigError);
    REQUIRE(cfg.get_double("absent", 7.0) == 7.0);

    const KeyValueConfig again = KeyValueConfig::from_string(cfg.to_string(), "round-trip");
    REQUIRE(again.get_double("alpha") == 0.25);
    REQUIRE(again.get_string("name") == "four_rooms");
    REQUIRE(again.get_vector("vec") == v);
}

TEST_CASE("config file round-trip") {
    namespace fs = std::filesystem;
    const fs::path path = fs::temp_directory_path() / "optionkit_cfg_test.cfg";
    KeyValueConfig cfg;
    cfg.set("gamma", "0.99");
    cfg.set("env", "chain");
    cfg.save(path.string());
    const KeyValueConfig loaded = KeyValueConfig::from_file(path.string());
    REQUIRE(loaded.get_double("gamma") == 0.99);
    REQUIRE(loaded.get_string("env") == "chain");
    fs::remove(path);
}

TEST_CASE("mdp validation accepts a sound instance and rejects broken ones") {
    REQUIRE_NOTHROW(two_state_mdp().validate());

    TabularMDP bad = two_state_mdp();
    bad.transition(bad.sa_row(0, 0), 1) = 0.9;  // row no longer sums to 1
    REQUIRE_THROWS_AS(bad.validate(), std::invalid_argument);

    bad = two_state_mdp();
    bad.transition(bad.sa_row(0, 0), 0) = -0.5;
    bad.transition(bad.sa_row(0, 0), 1) = 1.5;
    REQUIRE_THROWS_AS(bad.validate(), std::invalid_argument);

    bad = two_state_mdp();
    bad.reward(1, 0) = 1.0;  // terminal states must not pay
    REQUIRE_THROWS_AS(bad.validate(), std::invalid_argument);

    bad = two_state_mdp();
    bad.transition(bad.sa_row(1, 0), 1) = 0.0;  // terminal must self-loop
    bad.transition(bad.sa_row(1, 0), 0) = 1.0;
    REQUIRE_THROWS_AS(bad.validate(), std::invalid_argument);

    bad = two_state_mdp();
    bad.gamma = 1.0;
    REQUIRE_THROWS_AS(bad.validate(), std::invalid_argument);

    bad = two_state_mdp();
    bad.initial[0] = 0.5;  // no longer sums to 1
    REQUIRE_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("discounted return") {
    Trajectory t;
    t.states = {0, 0, 1};
    t.options = {0, 0};
    t.actions = {1, 0};
    t.rewards = {1.0, 0.5};
    REQUIRE(discounted_return(t, 0.9) == 1.0 + 0.9 * 0.5);
}

TEST_CASE("option transition kernel mixes continuation with the master") {
    const TabularMDP m = two_state_mdp();
    OptionSet opts;
    opts.options.push_back(uniform_option(2, 2, 0.3));
    opts.options.push_back(uniform_option(2, 2, 0.8));
    const MasterPolicy master = uniform_master(2, 2);

    // beta = 0.3, uniform master over 2: stay = 0.7 + 0.15, switch = 0.15
    const Eigen::VectorXd k = option_transition_kernel(m, opts, master, 0, 0);
    REQUIRE(near(k[0], 0.85, 1e-15));
    REQUIRE(near(k[1], 0.15, 1e-15));
    REQUIRE(near(k.sum(), 1.0, 1e-15));

    // at episode start the master row is returned as-is
    const Eigen::VectorXd k0 = option_transition_kernel(m, opts, master, 0, OptionSet::dummy_index);
    REQUIRE(k0[0] == master.pi(0, 0));
    REQUIRE(k0[1] == master.pi(0, 1));

    // beta = 0 keeps the option surely; beta = 1 is the bare master
    opts.options[0].beta[0] = 0.0;
    REQUIRE(option_transition_kernel(m, opts, master, 0, 0)[0] == 1.0);
    opts.options[0].beta[0] = 1.0;
    const Eigen::VectorXd k1 = option_transition_kernel(m, opts, master, 0, 0);
    REQUIRE(near(k1[0], 0.5, 1e-15));
    REQUIRE(near(k1[1], 0.5, 1e-15));
}

TEST_CASE("state-option kernel marginalizes the internal policy") {
    const TabularMDP m = two_state_mdp();
    OptionSet opts;
    opts.options.push_back(uniform_option(2, 2, 0.5));
    const auto [next, r] = state_option_kernel(m, opts, 0, 0);
    REQUIRE(near(next[0], 0.5, 1e-15));  // action 1 stays
    REQUIRE(near(next[1], 0.5, 1e-15));  // action 0 advances
    REQUIRE(r == 0.5);
}

TEST_CASE("episode sampling follows deterministic dynamics exactly") {
    const TabularMDP m = two_state_mdp();
    OptionSet opts;
    Option det;
    det.pi = Eigen::MatrixXd::Zero(2, 2);
    det.pi(0, 0) = 1.0;
    det.pi(1, 0) = 1.0;
    det.beta = Eigen::VectorXd::Zero(2);
    opts.options.push_back(det);
    MasterPolicy master;
    master.pi = Eigen::MatrixXd::Ones(2, 1);

    RandomStream rng(123);
    const Trajectory t = sample_episode(m, opts, master, rng, 50);
    REQUIRE(t.states == std::vector<int>{0, 1});
    REQUIRE(t.options == std::vector<int>{0});
    REQUIRE(t.actions == std::vector<int>{0});
    REQUIRE(t.rewards == std::vector<double>{1.0});
    REQUIRE(t.terminated);
}

TEST_CASE("episode sampling consumes the stream in a pinned order") {
    // two-arm bandit, uniform master over one runner option per arm; under
    // seed 42 the second stream value selects the losing arm
    const BuiltEnvironment env = make_environment("two_arm_bandit");
    const OptionSet opts = make_runner_options(env.mdp);
    const MasterPolicy master = uniform_master(2, 2);
    RandomStream rng(42);
    const Trajectory t = sample_episode(env.mdp, opts, master, rng, 10);
    REQUIRE(t.length() == 1);
    REQUIRE(t.options == std::vector<int>{1});
    REQUIRE(t.actions == std::vector<int>{1});
    REQUIRE(t.rewards == std::vector<double>{0.0});
    REQUIRE(t.terminated);
}

TEST_CASE("episode sampling respects the step cap") {
    KeyValueConfig params;
    params.set("n", "9");
    const BuiltEnvironment env = make_environment("chain", params);
    OptionSet opts;
    opts.options.push_back(make_runner_option(env.mdp, 0));  // always left
    MasterPolicy master;
    master.pi = Eigen::MatrixXd::Ones(env.mdp.n_states, 1);
    RandomStream rng(9);
    const Trajectory t = sample_episode(env.mdp, opts, master, rng, 7);
    REQUIRE(t.length() == 7);
    REQUIRE_FALSE(t.terminated);
}

TEST_CASE("episode sampling reproduces bitwise under a fixed seed") {
    const BuiltEnvironment env = make_environment("four_rooms");
    const OptionSet opts = make_runner_options(env.mdp, 0.3);
    const MasterPolicy master = uniform_master(env.mdp.n_states, 4);
    RandomStream r1(2024), r2(2024);
    for (int e = 0; e < 5; ++e) {
        const Trajectory a = sample_episode(env.mdp, opts, master, r1, 200);
        const Trajectory b = sample_episode(env.mdp, opts, master, r2, 200);
        REQUIRE(a.states == b.states);
        REQUIRE(a.options == b.options);
        REQUIRE(a.actions == b.actions);
        REQUIRE(a.rewards == b.rewards);
    }
}

TEST_CASE("episode sampling matches the master frequencies") {
    const BuiltEnvironment env = make_environment("two_arm_bandit");
    const OptionSet opts = make_runner_options(env.mdp);
    MasterPolicy master;
    master.pi.resize(2, 2);
    master.pi << 0.25, 0.75, 0.25, 0.75;
    RandomStream rng(77);
    const int n = 40000;
    int first_arm = 0;
    for (int i = 0; i < n; ++i) {
        const Trajectory t = sample_episode(env.mdp, opts, master, rng, 5);
        REQUIRE(t.length() == 1);
        if (t.options[0] == 0) ++first_arm;
    }
    const double f = static_cast<double>(first_arm) / n;
    const double se = std::sqrt(0.25 * 0.75 / n);
    REQUIRE(near(f, 0.25, 3.0 * se));
}

TEST_CASE("chain environment pays after the full walk") {
    const BuiltEnvironment env = make_environment("chain");  // n = 5
    REQUIRE(env.mdp.n_states == 6);
    REQUIRE(env.mdp.is_terminal(5));
    OptionSet opts;
    opts.options.push_back(make_runner_option(env.mdp, 1));  // always right
    MasterPolicy master;
    master.pi = Eigen::MatrixXd::Ones(6, 1);
    RandomStream rng(1);
    const Trajectory t = sample_episode(env.mdp, opts, master, rng, 100);
    REQUIRE(t.length() == 5);
    REQUIRE(t.terminated);
    // reward lands on the fifth step: gamma^4 = 0.99^4
    REQUIRE(near(discounted_return(t, env.mdp.gamma), 0.96059601, 1e-12));

    KeyValueConfig params;
    params.set("n", "1");
    REQUIRE_THROWS_AS(make_environment("chain", params), ConfigError);
}

TEST_CASE("four-rooms layout and dynamics") {
    const BuiltEnvironment env = make_environment("four_rooms");
    const GridInfo& g = env.grid;
    REQUIRE(env.mdp.n_states == 104);
    REQUIRE(g.rows == 13);
    REQUIRE(g.cols == 13);

    // the four doorways are walkable, the outer frame is not
    REQUIRE(g.walkable(3, 6));
    REQUIRE(g.walkable(6, 2));
    REQUIRE(g.walkable(7, 9));
    REQUIRE(g.walkable(10, 6));
    REQUIRE_FALSE(g.walkable(0, 0));
    REQUIRE_FALSE(g.walkable(6, 6));

    REQUIRE(env.goal_state == g.state_at(9, 9));
    REQUIRE(env.mdp.is_terminal(env.goal_state));

    // bumping the wall above (1,1) stays put
    const int s11 = g.state_at(1, 1);
    REQUIRE(env.mdp.transition(env.mdp.sa_row(s11, 0), s11) == 1.0);

    // stepping right from (9,8) reaches the goal and pays 1
    const int s98 = g.state_at(9, 8);
    REQUIRE(env.mdp.transition(env.mdp.sa_row(s98, 2), env.goal_state) == 1.0);
    REQUIRE(env.mdp.reward(s98, 2) == 1.0);

    // uniform start over every walkable non-goal cell
    REQUIRE(near(env.mdp.initial.sum(), 1.0, 1e-12));
    REQUIRE(env.mdp.initial[env.goal_state] == 0.0);
    int positive = 0;
    for (int s = 0; s < env.mdp.n_states; ++s)
        if (env.mdp.initial[s] > 0.0) {
            REQUIRE(near(env.mdp.initial[s], 1.0 / 103.0, 1e-15));
            ++positive;
        }
    REQUIRE(positive == 103);

    const BuiltEnvironment alt = make_environment("four_rooms_goal_b");
    REQUIRE(alt.goal_state == alt.grid.state_at(3, 3));
    REQUIRE(alt.mdp.is_terminal(alt.goal_state));
}

TEST_CASE("grid action deltas") {
    const std::vector<std::string> layout = {
        "wwwww",
        "w   w",
        "w   w",
        "w   w",
        "wwwww",
    };
    const BuiltEnvironment env = make_grid_environment(layout, {3, 3}, 0.9);
    const GridInfo& g = env.grid;
    REQUIRE(env.mdp.n_states == 9);
    const int c = g.state_at(2, 2);
    // action order: up, down, right, left
    REQUIRE(env.mdp.transition(env.mdp.sa_row(c, 0), g.state_at(1, 2)) == 1.0);
    REQUIRE(env.mdp.transition(env.mdp.sa_row(c, 1), g.state_at(3, 2)) == 1.0);
    REQUIRE(env.mdp.transition(env.mdp.sa_row(c, 2), g.state_at(2, 3)) == 1.0);
    REQUIRE(env.mdp.transition(env.mdp.sa_row(c, 3), g.state_at(2, 1)) == 1.0);
}

TEST_CASE("runner options terminate exactly where they are blocked") {
    const std::vector<std::string> layout = {
        "wwwww",
        "w   w",
        "w   w",
        "w   w",
        "wwwww",
    };
    const BuiltEnvironment env = make_grid_environment(layout, {3, 3}, 0.9);
    const GridInfo& g = env.grid;
    const Option right = make_runner_option(env.mdp, 2, 0.25);
    REQUIRE(right.deterministic());
    for (int r = 1; r <= 3; ++r)
        for (int c = 1; c <= 3; ++c) {
            const int s = g.state_at(r, c);
            if (s == env.goal_state) continue;  // terminal self-loops regardless
            REQUIRE(right.pi(s, 2) == 1.0);
            REQUIRE(right.beta[s] == (c == 3 ? 1.0 : 0.25));
        }
}

TEST_CASE("random instances validate and honor the terminal flag") {
    RandomStream rng(31);
    const Instance inst = random_instance(rng, 5, 3, 2, 0.9, true);
    REQUIRE_NOTHROW(inst.mdp.validate());
    REQUIRE_NOTHROW(inst.options.validate(inst.mdp));
    REQUIRE_NOTHROW(inst.master.validate(5, 2));
    REQUIRE(inst.mdp.is_terminal(4));
    REQUIRE(inst.mdp.initial[4] == 0.0);

    const Instance open = random_instance(rng, 4, 2, 3, 0.95, false);
    for (int s = 0; s < 4; ++s) REQUIRE_FALSE(open.mdp.is_terminal(s));
}

TEST_CASE("instance files round-trip exactly") {
    namespace fs = std::filesystem;
    RandomStream rng(8);
    const Instance inst = random_instance(rng, 4, 2, 2, 0.93, true);
    const fs::path path = fs::temp_directory_path() / "optionkit_instance_test.cfg";
    save_instance(path.string(), inst.mdp, &inst.options, &inst.master);
    const LoadedInstance back = load_instance(path.string());
    fs::remove(path);

    REQUIRE(back.mdp.n_states == 4);
    REQUIRE(back.mdp.gamma == inst.mdp.gamma);
    REQUIRE(exact_equal(back.mdp.transition, inst.mdp.transition));
    REQUIRE(exact_equal(back.mdp.reward, inst.mdp.reward));
    REQUIRE(exact_equal(back.mdp.initial, inst.mdp.initial));
    REQUIRE(back.mdp.terminal == inst.mdp.terminal);
    REQUIRE(back.options.has_value());
    REQUIRE(back.master.has_value());
    for (int o = 0; o < 2; ++o) {
        REQUIRE(exact_equal(back.options->options[o].pi, inst.options.options[o].pi));
        REQUIRE(exact_equal(back.options->options[o].beta, inst.options.options[o].beta));
    }
    REQUIRE(exact_equal(back.master->pi, inst.master.pi));
}

TEST_CASE("instance parsing reports missing keys") {
    KeyValueConfig cfg;
    cfg.set("n_states", "2");
    cfg.set("n_actions", "1");
    cfg.set("gamma", "0.9");
    REQUIRE_THROWS_AS(parse_instance(cfg), ConfigError);
}

TEST_CASE("unknown environment name is rejected") {
    REQUIRE_THROWS_AS(make_environment("no_such_env"), ConfigError);
}
