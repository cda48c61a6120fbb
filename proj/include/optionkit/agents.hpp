#pragma once

// Environment-stepping agents. Each one couples a learner to a tabular task
// and advances a single environment step per call, so the driver can
// interleave logging, task switches, and seeding uniformly across
// algorithms. Every agent owns its RNG; identical construction arguments
// give bitwise-identical runs.

#include <algorithm>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "optionkit/environments.hpp"
#include "optionkit/learners.hpp"

namespace optionkit {

/// Outcome of advancing one environment step.
struct StepResult {
    bool episode_end = false;
    double episode_return = 0.0;  // undiscounted sum, valid when episode_end
    int option = 0;               // option active during this step
};

/// Flat bag of knobs shared by every algorithm; the driver fills it from the
/// config file and command line. Fields an algorithm does not use are
/// ignored by it.
struct AgentConfig {
    int n_options = 4;
    ParamKind kind = ParamKind::softmax_tabular;
    int hidden = 64;
    double gamma = 0.99;
    int max_episode_steps = 500;

    // policy-gradient family
    double lr = 3e-4;
    double adam_eps = 1e-5;
    double grad_clip = 0.5;
    double gae_lambda = 0.95;
    double clip_ratio = 0.2;
    int rollout_steps = 2048;
    int epochs_flat = 10;
    int epochs_high = 5;
    int epochs_low = 5;
    int minibatch = 64;
    double entropy_high = 0.01;
    double entropy_low = 0.0;
    double value_coef = 0.5;
    bool normalize_advantages = false;
    bool two_critics = false;
    bool alternating = false;

    // tabular value-learning family
    double alpha = 0.1;
    double epsilon = 0.1;
    bool off_option = true;
    int target_refresh = 1000;
    double switch_penalty = 0.0;
};

class Agent {
public:
    virtual ~Agent() = default;

    virtual StepResult advance() = 0;

    /// Swap the task mid-run. Learner state is untouched. Any in-progress
    /// episode ends here; its return is handed back so the caller can log it
    /// against the phase that produced it.
    virtual std::optional<double> switch_environment(const BuiltEnvironment& env) = 0;

    virtual std::string name() const = 0;
    virtual long episodes() const = 0;

    /// How many options the agent actually runs with (1 for flat learners).
    virtual int n_options() const = 0;

    /// Introspection for tests and traces; null when an algorithm holds no
    /// such state.
    virtual const PolicyParams* params() const { return nullptr; }
    virtual const QTable* q_table() const { return nullptr; }
};

namespace detail {

/// Episode bookkeeping around a tabular MDP.
struct EnvCursor {
    TabularMDP mdp;
    int max_episode_steps = 500;
    int s = 0;
    double ep_return = 0.0;
    int ep_steps = 0;
    bool need_reset = true;

    void attach(const TabularMDP& m) {
        mdp = m;
        need_reset = true;
    }

    void reset(RandomStream& rng) {
        s = rng.categorical(mdp.initial);
        ep_return = 0.0;
        ep_steps = 0;
        need_reset = false;
    }

    /// End the running episode without a terminal transition (task switch).
    /// Returns its return when at least one step was taken.
    std::optional<double> force_end() {
        const bool live = !need_reset && ep_steps > 0;
        const double r = ep_return;
        need_reset = true;
        return live ? std::optional<double>(r) : std::nullopt;
    }

    struct Outcome {
        double r = 0.0;
        int s_next = 0;
        bool terminal = false;
        bool truncated = false;
        bool done() const { return terminal || truncated; }
    };

    Outcome apply(int a, RandomStream& rng) {
        Outcome out;
        out.r = mdp.reward(s, a);
        out.s_next = rng.categorical(mdp.transition.row(mdp.sa_row(s, a)).transpose());
        ep_return += out.r;
        ep_steps += 1;
        out.terminal = mdp.is_terminal(out.s_next);
        out.truncated = !out.terminal && ep_steps >= max_episode_steps;
        return out;
    }
};

}  // namespace detail

// ---------------------------------------------------------------------------
// policy-gradient agents
// ---------------------------------------------------------------------------

/// Two coupled actor-critic passes over the shared rollout: an option-level
/// pass on (previous option, state) pairs and an action-level pass on
/// (state, option) pairs. With flat_mode the option layer is pinned to a
/// single always-on option and only the action-level pass runs, which is
/// exactly a flat PPO/A2C baseline on the base task.
class DacAgent : public Agent {
public:
    DacAgent(const BuiltEnvironment& env, const AgentConfig& cfg, std::uint64_t seed,
             bool use_ppo, bool flat_mode)
        : env_(env), rng_(seed), use_ppo_(use_ppo), flat_mode_(flat_mode) {
        const int n_options = flat_mode ? 1 : cfg.n_options;
        PolicyShapes sh;
        sh.n_states = env.mdp.n_states;
        sh.n_actions = env.mdp.n_actions;
        sh.n_options = n_options;
        sh.kind = cfg.kind;
        sh.hidden = cfg.hidden;
        RandomStream init_rng = rng_.child(1);
        p_ = PolicyParams::init(sh, init_rng);

        dac_.use_ppo = use_ppo;
        dac_.two_critics = cfg.two_critics;
        dac_.high = pg_config(cfg, cfg.epochs_high, cfg.entropy_high);
        dac_.low = pg_config(cfg, flat_mode ? cfg.epochs_flat : cfg.epochs_low,
                             cfg.entropy_low);
        alternating_ = cfg.alternating;
        gamma_ = cfg.gamma;
        lambda_ = cfg.gae_lambda;
        rollout_steps_ = cfg.rollout_steps;
        cur_.attach(env.mdp);
        cur_.max_episode_steps = cfg.max_episode_steps;
        opt_high_ = std::make_unique<PgOptimizer>(p_);
        opt_low_ = std::make_unique<PgOptimizer>(p_);
    }

    StepResult advance() override {
        if (cur_.need_reset) {
            cur_.reset(rng_);
            o_prev_ = OptionSet::dummy_index;
        }
        const int s = cur_.s;
        const int o_prev = o_prev_;
        const int o = rng_.categorical(pi_bar_probs(p_, o_prev, s));
        const int a = rng_.categorical(option_action_probs(p_, o, s));

        RolloutStep st;
        st.s = s;
        st.o_prev = o_prev;
        st.o = o;
        st.a = a;
        st.stop = static_cast<std::uint8_t>(o != o_prev);
        st.lp_high = pi_bar_logprob(p_, o_prev, s, o);
        st.lp_low = pi_hat_logprob(p_, s, o, a);
        st.v_high = dac_.two_critics ? p_.value_high(o_prev, s) : value_high_synth(p_, o_prev, s);
        st.v_low = p_.value_low(s, o);

        const auto out = cur_.apply(a, rng_);
        st.reward = out.r;
        st.done = out.done() ? 1 : 0;
        buf_.steps.push_back(st);

        StepResult res;
        res.option = o;
        if (out.done()) {
            res.episode_end = true;
            res.episode_return = cur_.ep_return;
            episodes_ += 1;
            cur_.need_reset = true;
            o_prev_ = OptionSet::dummy_index;
        } else {
            cur_.s = out.s_next;
            o_prev_ = o;
        }
        if (static_cast<int>(buf_.size()) >= rollout_steps_) finish_rollout();
        return res;
    }

    std::optional<double> switch_environment(const BuiltEnvironment& env) override {
        env_ = env;
        const auto truncated = cur_.force_end();  // read before attach resets
        cur_.attach(env.mdp);
        if (!buf_.steps.empty()) buf_.steps.back().done = 1;  // episode ends at the switch
        o_prev_ = OptionSet::dummy_index;
        return truncated;
    }

    std::string name() const override {
        if (flat_mode_) return use_ppo_ ? "ppo" : "a2c";
        return use_ppo_ ? "dac-ppo" : "dac-a2c";
    }
    long episodes() const override { return episodes_; }
    int n_options() const override { return p_.shape.n_options; }
    const PolicyParams* params() const override { return &p_; }

private:
    static PgConfig pg_config(const AgentConfig& c, int epochs, double entropy) {
        PgConfig out;
        out.adam.lr = c.lr;
        out.adam.eps = c.adam_eps;
        out.adam.grad_clip = c.grad_clip;
        out.gamma = c.gamma;
        out.gae_lambda = c.gae_lambda;
        out.clip_ratio = c.clip_ratio;
        out.epochs = epochs;
        out.minibatch = c.minibatch;
        out.entropy_coef = entropy;
        out.value_coef = c.value_coef;
        out.rollout_steps = c.rollout_steps;
        out.normalize_advantages = c.normalize_advantages;
        return out;
    }

    void finish_rollout() {
        if (buf_.steps.empty()) return;
        if (buf_.steps.back().done) {
            buf_.bootstrap_high = 0.0;
            buf_.bootstrap_low = 0.0;
        } else {
            // The next low pair draws its option on arrival, so its value is
            // the option-kernel mixture of low values; that same mixture is
            // the synthesized high value of the next pair state.
            const double u = value_high_synth(p_, o_prev_, cur_.s);
            buf_.bootstrap_low = u;
            buf_.bootstrap_high =
                dac_.two_critics ? p_.value_high(o_prev_, cur_.s) : u;
        }
        buf_.compute_advantages(gamma_, lambda_);
        if (flat_mode_) {
            if (use_ppo_)
                ppo_update(p_, low_samples_from(buf_), PgHead::action_under_option,
                           PgCritic::low_value, dac_.low, *opt_low_, rng_);
            else
                a2c_update(p_, low_samples_from(buf_), PgHead::action_under_option,
                           PgCritic::low_value, dac_.low, *opt_low_, rng_);
        } else if (alternating_) {
            const PgCritic high_critic =
                dac_.two_critics ? PgCritic::high_learned : PgCritic::none;
            if (update_count_ % 2 == 0) {
                if (use_ppo_)
                    ppo_update(p_, high_samples_from(buf_), PgHead::option_over_pairs,
                               high_critic, dac_.high, *opt_high_, rng_);
                else
                    a2c_update(p_, high_samples_from(buf_), PgHead::option_over_pairs,
                               high_critic, dac_.high, *opt_high_, rng_);
            } else {
                if (use_ppo_)
                    ppo_update(p_, low_samples_from(buf_), PgHead::action_under_option,
                               PgCritic::low_value, dac_.low, *opt_low_, rng_);
                else
                    a2c_update(p_, low_samples_from(buf_), PgHead::action_under_option,
                               PgCritic::low_value, dac_.low, *opt_low_, rng_);
            }
        } else {
            dac_update(p_, buf_, dac_, *opt_high_, *opt_low_, rng_);
        }
        update_count_ += 1;
        buf_.clear();
    }

    BuiltEnvironment env_;
    PolicyParams p_;
    RandomStream rng_;
    detail::EnvCursor cur_;
    RolloutBuffer buf_;
    DacConfig dac_;
    std::unique_ptr<PgOptimizer> opt_high_, opt_low_;
    bool use_ppo_ = true;
    bool flat_mode_ = false;
    bool alternating_ = false;
    double gamma_ = 0.99, lambda_ = 0.95;
    int rollout_steps_ = 2048;
    int o_prev_ = OptionSet::dummy_index;
    long episodes_ = 0;
    long update_count_ = 0;
};

/// Augmented-state baseline: one policy over joint (stop, option, action)
/// decisions on (previous option, state), trained as a single flat PPO
/// problem with a learned critic over the augmented state.
class AhpAgent : public Agent {
public:
    AhpAgent(const BuiltEnvironment& env, const AgentConfig& cfg, std::uint64_t seed)
        : env_(env), rng_(seed) {
        PolicyShapes sh;
        sh.n_states = env.mdp.n_states;
        sh.n_actions = env.mdp.n_actions;
        sh.n_options = cfg.n_options;
        sh.kind = cfg.kind;
        sh.hidden = cfg.hidden;
        RandomStream init_rng = rng_.child(1);
        p_ = PolicyParams::init(sh, init_rng);

        pg_.adam.lr = cfg.lr;
        pg_.adam.eps = cfg.adam_eps;
        pg_.adam.grad_clip = cfg.grad_clip;
        pg_.gamma = cfg.gamma;
        pg_.gae_lambda = cfg.gae_lambda;
        pg_.clip_ratio = cfg.clip_ratio;
        pg_.epochs = cfg.epochs_flat;
        pg_.minibatch = cfg.minibatch;
        pg_.entropy_coef = cfg.entropy_high;
        pg_.value_coef = cfg.value_coef;
        pg_.rollout_steps = cfg.rollout_steps;
        pg_.normalize_advantages = cfg.normalize_advantages;
        cur_.attach(env.mdp);
        cur_.max_episode_steps = cfg.max_episode_steps;
        opt_ = std::make_unique<PgOptimizer>(p_);
    }

    StepResult advance() override {
        if (cur_.need_reset) {
            cur_.reset(rng_);
            o_prev_ = OptionSet::dummy_index;
        }
        const int s = cur_.s;
        const int o_prev = o_prev_;
        const bool at_start = o_prev == OptionSet::dummy_index;
        // Episode start forces a fresh pick with probability one; no coin.
        const bool stop = at_start || rng_.uniform() < beta_of(p_, o_prev, s);
        const int o = stop ? rng_.categorical(master_probs(p_, s)) : o_prev;
        const int a = rng_.categorical(option_action_probs(p_, o, s));

        RolloutStep st;
        st.s = s;
        st.o_prev = o_prev;
        st.o = o;
        st.a = a;
        st.stop = stop ? 1 : 0;
        st.lp_high = ahp_policy_logprob(p_, o_prev, s, {stop, o, a});
        st.lp_low = 0.0;
        st.v_high = p_.value_high(o_prev, s);
        st.v_low = st.v_high;

        const auto out = cur_.apply(a, rng_);
        st.reward = out.r;
        st.done = out.done() ? 1 : 0;
        buf_.steps.push_back(st);

        StepResult res;
        res.option = o;
        if (out.done()) {
            res.episode_end = true;
            res.episode_return = cur_.ep_return;
            episodes_ += 1;
            cur_.need_reset = true;
            o_prev_ = OptionSet::dummy_index;
        } else {
            cur_.s = out.s_next;
            o_prev_ = o;
        }
        if (static_cast<int>(buf_.size()) >= pg_.rollout_steps) finish_rollout();
        return res;
    }

    std::optional<double> switch_environment(const BuiltEnvironment& env) override {
        env_ = env;
        const auto truncated = cur_.force_end();  // read before attach resets
        cur_.attach(env.mdp);
        if (!buf_.steps.empty()) buf_.steps.back().done = 1;
        o_prev_ = OptionSet::dummy_index;
        return truncated;
    }

    std::string name() const override { return "ahp-ppo"; }
    long episodes() const override { return episodes_; }
    int n_options() const override { return p_.shape.n_options; }
    const PolicyParams* params() const override { return &p_; }

private:
    void finish_rollout() {
        if (buf_.steps.empty()) return;
        const bool done = buf_.steps.back().done != 0;
        buf_.bootstrap_high = done ? 0.0 : p_.value_high(o_prev_, cur_.s);
        buf_.bootstrap_low = buf_.bootstrap_high;
        buf_.compute_advantages(pg_.gamma, pg_.gae_lambda);
        ppo_update(p_, high_samples_from(buf_), PgHead::ahp_joint, PgCritic::high_learned,
                   pg_, *opt_, rng_);
        buf_.clear();
    }

    BuiltEnvironment env_;
    PolicyParams p_;
    RandomStream rng_;
    detail::EnvCursor cur_;
    RolloutBuffer buf_;
    PgConfig pg_;
    std::unique_ptr<PgOptimizer> opt_;
    int o_prev_ = OptionSet::dummy_index;
    long episodes_ = 0;
};

// ---------------------------------------------------------------------------
// option-critic agent
// ---------------------------------------------------------------------------

/// Gradient options under a value-based master: intra-option Q-learning for
/// the option values (with a periodically refreshed target table), sampled
/// likelihood-ratio updates for the intra-option policies, and termination
/// updates driven by the option's disadvantage at the arrival state, with an
/// optional switching penalty.
class OcAgent : public Agent {
public:
    OcAgent(const BuiltEnvironment& env, const AgentConfig& cfg, std::uint64_t seed)
        : env_(env),
          rng_(seed),
          table_(env.mdp.n_states, cfg.n_options, cfg.alpha, cfg.epsilon) {
        PolicyShapes sh;
        sh.n_states = env.mdp.n_states;
        sh.n_actions = env.mdp.n_actions;
        sh.n_options = cfg.n_options;
        sh.kind = cfg.kind;
        sh.hidden = cfg.hidden;
        RandomStream init_rng = rng_.child(1);
        p_ = PolicyParams::init(sh, init_rng);

        q_target_ = table_.q;
        adam_.lr = cfg.lr;
        adam_.eps = cfg.adam_eps;
        adam_.grad_clip = cfg.grad_clip;
        opt_ = AdamState(p_.xi_size());
        target_refresh_ = cfg.target_refresh;
        switch_penalty_ = cfg.switch_penalty;
        cur_.attach(env.mdp);
        cur_.max_episode_steps = cfg.max_episode_steps;
    }

    StepResult advance() override {
        if (cur_.need_reset) {
            cur_.reset(rng_);
            have_option_ = false;
        }
        const int s = cur_.s;
        if (!have_option_) {
            o_ = epsilon_greedy(table_, s, rng_);
            have_option_ = true;
        }
        const int o = o_;
        const int a = rng_.categorical(option_action_probs(p_, o, s));
        const auto out = cur_.apply(a, rng_);
        const double gamma = cur_.mdp.gamma;

        // critic backup on the executed option (arrival value from the
        // target table; terminal arrivals contribute nothing)
        double boot = 0.0;
        if (!out.terminal) {
            const double beta = beta_of(p_, o, out.s_next);
            boot = (1.0 - beta) * q_target_(out.s_next, o) +
                   beta * q_target_.row(out.s_next).maxCoeff();
        }
        const double target = out.r + gamma * boot;
        const double adv = target - table_.q(s, o);
        table_.q(s, o) += table_.alpha * adv;

        Eigen::VectorXd gxi = Eigen::VectorXd::Zero(p_.xi_size());
        pi_hat_logprob_backward(p_, s, o, a, -adv, gxi);
        if (!out.terminal) {
            // raising beta is favored exactly when holding the option at the
            // arrival state is worse than a fresh greedy pick
            const double beta = beta_of(p_, o, out.s_next);
            const double term_adv =
                table_.q(out.s_next, o) - table_.q.row(out.s_next).maxCoeff() + switch_penalty_;
            p_.termination_logit_backward(o, out.s_next, term_adv * beta * (1.0 - beta), gxi);
        }
        if (!gxi.allFinite()) throw std::runtime_error("oc update produced non-finite gradient");
        adam_step(opt_, adam_, p_.xi, gxi);
        updates_ += 1;
        if (target_refresh_ > 0 && updates_ % target_refresh_ == 0) q_target_ = table_.q;

        StepResult res;
        res.option = o;
        if (out.done()) {
            res.episode_end = true;
            res.episode_return = cur_.ep_return;
            episodes_ += 1;
            cur_.need_reset = true;
            have_option_ = false;
        } else {
            cur_.s = out.s_next;
            if (rng_.uniform() < beta_of(p_, o, out.s_next)) have_option_ = false;
        }
        return res;
    }

    std::optional<double> switch_environment(const BuiltEnvironment& env) override {
        env_ = env;
        const auto truncated = cur_.force_end();  // read before attach resets
        cur_.attach(env.mdp);
        have_option_ = false;
        return truncated;
    }

    std::string name() const override { return "oc"; }
    long episodes() const override { return episodes_; }
    int n_options() const override { return p_.shape.n_options; }
    const PolicyParams* params() const override { return &p_; }
    const QTable* q_table() const override { return &table_; }

private:
    BuiltEnvironment env_;
    PolicyParams p_;
    RandomStream rng_;
    detail::EnvCursor cur_;
    QTable table_;
    Eigen::MatrixXd q_target_;
    AdamConfig adam_;
    AdamState opt_;
    double switch_penalty_ = 0.0;
    int target_refresh_ = 1000;
    int o_ = 0;
    bool have_option_ = false;
    long episodes_ = 0;
    long updates_ = 0;
};

// ---------------------------------------------------------------------------
// tabular value-learning agents over fixed option sets
// ---------------------------------------------------------------------------

/// One single-step option per primitive action: the degenerate option set
/// that makes the value-learning agents runnable on any tabular task without
/// hand-designed options.
inline OptionSet primitive_options(const TabularMDP& mdp) {
    OptionSet out;
    for (int a = 0; a < mdp.n_actions; ++a) {
        Option o;
        o.pi = Eigen::MatrixXd::Zero(mdp.n_states, mdp.n_actions);
        o.pi.col(a).setOnes();
        o.beta = Eigen::VectorXd::Ones(mdp.n_states);
        out.options.push_back(std::move(o));
    }
    return out;
}

/// Q-learning at option boundaries only: accumulate the discounted segment
/// return while an option runs, back it up once when the option ends.
class SmdpQAgent : public Agent {
public:
    SmdpQAgent(const BuiltEnvironment& env, OptionSet options, const AgentConfig& cfg,
               std::uint64_t seed)
        : env_(env),
          options_(std::move(options)),
          table_(env.mdp.n_states, options_.size(), cfg.alpha, cfg.epsilon),
          rng_(seed) {
        options_.validate(env.mdp);
        cur_.attach(env.mdp);
        cur_.max_episode_steps = cfg.max_episode_steps;
    }

    StepResult advance() override {
        if (cur_.need_reset) {
            cur_.reset(rng_);
            running_ = false;
        }
        const int s = cur_.s;
        if (!running_) {
            o_ = epsilon_greedy(table_, s, rng_);
            seg_start_ = s;
            seg_return_ = 0.0;
            seg_scale_ = 1.0;
            seg_len_ = 0;
            running_ = true;
        }
        const int a = rng_.categorical(options_[o_].pi.row(s).transpose());
        const auto out = cur_.apply(a, rng_);
        seg_return_ += seg_scale_ * out.r;
        seg_scale_ *= cur_.mdp.gamma;
        seg_len_ += 1;

        const bool option_ends =
            out.done() || rng_.uniform() < options_[o_].beta[out.s_next];
        if (option_ends) {
            smdp_q_update(table_, seg_start_, o_, seg_return_, out.s_next, seg_len_,
                          cur_.mdp.gamma, out.terminal);
            running_ = false;
        }

        StepResult res;
        res.option = o_;
        if (out.done()) {
            res.episode_end = true;
            res.episode_return = cur_.ep_return;
            episodes_ += 1;
            cur_.need_reset = true;
            running_ = false;
        } else {
            cur_.s = out.s_next;
        }
        return res;
    }

    std::optional<double> switch_environment(const BuiltEnvironment& env) override {
        env_ = env;
        const auto truncated = cur_.force_end();  // read before attach resets
        cur_.attach(env.mdp);
        running_ = false;  // the pending segment dies with the episode
        return truncated;
    }

    std::string name() const override { return "smdpq"; }
    long episodes() const override { return episodes_; }
    int n_options() const override { return static_cast<int>(options_.size()); }
    const QTable* q_table() const override { return &table_; }

private:
    BuiltEnvironment env_;
    OptionSet options_;
    QTable table_;
    RandomStream rng_;
    detail::EnvCursor cur_;
    int o_ = 0;
    int seg_start_ = 0, seg_len_ = 0;
    double seg_return_ = 0.0, seg_scale_ = 1.0;
    bool running_ = false;
    long episodes_ = 0;
};

/// Every-step option-value learning; applies the off-option variant
/// automatically when the option set is deterministic.
class IoqAgent : public Agent {
public:
    IoqAgent(const BuiltEnvironment& env, OptionSet options, const AgentConfig& cfg,
             std::uint64_t seed)
        : env_(env),
          options_(std::move(options)),
          table_(env.mdp.n_states, options_.size(), cfg.alpha, cfg.epsilon),
          rng_(seed) {
        options_.validate(env.mdp);
        off_option_ = cfg.off_option && all_options_deterministic(options_);
        cur_.attach(env.mdp);
        cur_.max_episode_steps = cfg.max_episode_steps;
    }

    StepResult advance() override {
        if (cur_.need_reset) {
            cur_.reset(rng_);
            running_ = false;
        }
        const int s = cur_.s;
        if (!running_) {
            o_ = epsilon_greedy(table_, s, rng_);
            running_ = true;
        }
        const int a = rng_.categorical(options_[o_].pi.row(s).transpose());
        const auto out = cur_.apply(a, rng_);
        intra_option_q_update(table_, options_, s, o_, a, out.r, out.s_next, out.terminal,
                              cur_.mdp.gamma, off_option_);

        StepResult res;
        res.option = o_;
        if (out.done()) {
            res.episode_end = true;
            res.episode_return = cur_.ep_return;
            episodes_ += 1;
            cur_.need_reset = true;
            running_ = false;
        } else {
            cur_.s = out.s_next;
            if (rng_.uniform() < options_[o_].beta[out.s_next]) running_ = false;
        }
        return res;
    }

    std::optional<double> switch_environment(const BuiltEnvironment& env) override {
        env_ = env;
        const auto truncated = cur_.force_end();  // read before attach resets
        cur_.attach(env.mdp);
        running_ = false;
        return truncated;
    }

    std::string name() const override { return "ioq"; }
    long episodes() const override { return episodes_; }
    int n_options() const override { return static_cast<int>(options_.size()); }
    const QTable* q_table() const override { return &table_; }

private:
    BuiltEnvironment env_;
    OptionSet options_;
    QTable table_;
    RandomStream rng_;
    detail::EnvCursor cur_;
    int o_ = 0;
    bool running_ = false;
    bool off_option_ = false;
    long episodes_ = 0;
};

/// Fixed randomly-initialized option policies executed while the filtered
/// distribution over the active option is maintained step by step; useful
/// for inspecting what the recursion infers against the true sampled option.
class IopgPosteriorDemoAgent : public Agent {
public:
    IopgPosteriorDemoAgent(const BuiltEnvironment& env, const AgentConfig& cfg,
                           std::uint64_t seed)
        : env_(env), rng_(seed) {
        PolicyShapes sh;
        sh.n_states = env.mdp.n_states;
        sh.n_actions = env.mdp.n_actions;
        sh.n_options = cfg.n_options;
        sh.kind = ParamKind::softmax_tabular;
        RandomStream init_rng = rng_.child(1);
        p_ = PolicyParams::init(sh, init_rng);
        // spread the options apart so the posterior has something to infer
        for (int i = 0; i < p_.xi.size(); ++i) p_.xi[i] += 0.8 * init_rng.normal();
        options_ = options_from(p_);
        master_ = master_from(p_);
        cur_.attach(env.mdp);
        cur_.max_episode_steps = cfg.max_episode_steps;
    }

    StepResult advance() override {
        if (cur_.need_reset) {
            cur_.reset(rng_);
            o_prev_ = OptionSet::dummy_index;
            posterior_ = iopg_posterior_init(master_, cur_.s);
        }
        const int s = cur_.s;
        const int o = rng_.categorical(pi_bar_probs(p_, o_prev_, s));
        const int a = rng_.categorical(option_action_probs(p_, o, s));
        const auto out = cur_.apply(a, rng_);
        if (!out.done()) {
            iopg_posterior_step(posterior_, options_, master_, s, a, out.s_next);
            if (std::abs(posterior_.m.sum() - 1.0) > 1e-9)
                throw std::logic_error("posterior drifted off the simplex");
        }

        StepResult res;
        res.option = o;
        if (out.done()) {
            res.episode_end = true;
            res.episode_return = cur_.ep_return;
            episodes_ += 1;
            cur_.need_reset = true;
            o_prev_ = OptionSet::dummy_index;
        } else {
            cur_.s = out.s_next;
            o_prev_ = o;
        }
        return res;
    }

    std::optional<double> switch_environment(const BuiltEnvironment& env) override {
        env_ = env;
        const auto truncated = cur_.force_end();  // read before attach resets
        cur_.attach(env.mdp);
        o_prev_ = OptionSet::dummy_index;
        return truncated;
    }

    std::string name() const override { return "iopg-posterior-demo"; }
    long episodes() const override { return episodes_; }
    int n_options() const override { return static_cast<int>(options_.size()); }
    const PolicyParams* params() const override { return &p_; }
    const PosteriorState& posterior() const { return posterior_; }

private:
    BuiltEnvironment env_;
    PolicyParams p_;
    OptionSet options_;
    MasterPolicy master_;
    PosteriorState posterior_;
    RandomStream rng_;
    detail::EnvCursor cur_;
    int o_prev_ = OptionSet::dummy_index;
    long episodes_ = 0;
};

// ---------------------------------------------------------------------------
// factory
// ---------------------------------------------------------------------------

/// Algorithms the factory accepts. The command line exposes the benchmark
/// set; "a2c" exists for the degeneracy comparison and scripted experiments.
inline std::unique_ptr<Agent> make_agent(const std::string& algo, const BuiltEnvironment& env,
                                         const AgentConfig& cfg, std::uint64_t seed) {
    if (algo == "dac-ppo") return std::make_unique<DacAgent>(env, cfg, seed, true, false);
    if (algo == "dac-a2c") return std::make_unique<DacAgent>(env, cfg, seed, false, false);
    if (algo == "ppo") return std::make_unique<DacAgent>(env, cfg, seed, true, true);
    if (algo == "a2c") return std::make_unique<DacAgent>(env, cfg, seed, false, true);
    if (algo == "ahp-ppo") return std::make_unique<AhpAgent>(env, cfg, seed);
    if (algo == "oc") return std::make_unique<OcAgent>(env, cfg, seed);
    if (algo == "ioq")
        return std::make_unique<IoqAgent>(env, primitive_options(env.mdp), cfg, seed);
    if (algo == "smdpq")
        return std::make_unique<SmdpQAgent>(env, primitive_options(env.mdp), cfg, seed);
    if (algo == "iopg-posterior-demo")
        return std::make_unique<IopgPosteriorDemoAgent>(env, cfg, seed);
    throw std::invalid_argument("unknown algorithm: " + algo);
}

}  // namespace optionkit
