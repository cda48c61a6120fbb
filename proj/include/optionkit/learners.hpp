#pragma once

/// Update rules shared by every training algorithm: tabular value learning
/// over options (SMDP and intra-option variants), generalized advantage
/// estimation, clipped-surrogate and vanilla actor-critic updates on either
/// augmented chain, and the option-posterior recursion used by IOPG-style
/// master learning. Environment interaction loops live in agents.hpp; this
/// header only consumes recorded transitions.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "optionkit/funcapprox.hpp"
#include "optionkit/mdp.hpp"

namespace optionkit {

// ---------------------------------------------------------------------------
// tabular option values
// ---------------------------------------------------------------------------

/// Action-value table over (state, option) pairs with its learning knobs.
struct QTable {
    Eigen::MatrixXd q;  // n_states x n_options
    double alpha = 0.1;
    double epsilon = 0.1;

    QTable(int n_states, int n_options, double alpha_ = 0.1, double epsilon_ = 0.1)
        : q(Eigen::MatrixXd::Zero(n_states, n_options)), alpha(alpha_), epsilon(epsilon_) {
        if (!(alpha > 0.0 && alpha <= 1.0)) throw std::invalid_argument("QTable: alpha in (0,1]");
        if (!(epsilon >= 0.0 && epsilon <= 1.0))
            throw std::invalid_argument("QTable: epsilon in [0,1]");
    }
};

/// Index of the row maximum, ties broken by the lowest index so that greedy
/// behavior is reproducible.
inline int greedy_index(const Eigen::VectorXd& row) {
    int best = 0;
    for (int i = 1; i < row.size(); ++i)
        if (row[i] > row[best]) best = i;
    return best;
}

/// Epsilon-greedy option selection from the table's row at s.
inline int epsilon_greedy(const QTable& t, int s, RandomStream& rng) {
    if (t.epsilon > 0.0 && rng.uniform() < t.epsilon)
        return rng.uniform_int(static_cast<int>(t.q.cols()));
    return greedy_index(t.q.row(s).transpose());
}

/// One SMDP Q-learning update after an option ran to termination:
///   Q(s,o) += alpha (G + gamma^k max_o' Q(s_end,o') - Q(s,o))
/// where G is the discounted reward accumulated over the k executed steps.
/// Returns the TD error.
inline double smdp_q_update(QTable& t, int s_init, int o, double g, int s_end, int duration,
                            double gamma, bool terminal) {
    if (duration < 1) throw std::invalid_argument("smdp_q_update: duration must be >= 1");
    const double boot =
        terminal ? 0.0 : t.q.row(s_end).maxCoeff() * std::pow(gamma, duration);
    const double td = g + boot - t.q(s_init, o);
    t.q(s_init, o) += t.alpha * td;
    return td;
}

/// True when every intra-option policy is deterministic (each row puts all
/// its mass on one action).
inline bool all_options_deterministic(const OptionSet& options) {
    for (const Option& o : options.options)
        for (int s = 0; s < o.pi.rows(); ++s)
            if (o.pi.row(s).maxCoeff() != 1.0) return false;
    return true;
}

/// One intra-option update from the primitive transition (s, a, r, s') taken
/// while executing `executed`. The target bootstraps through the
/// arrival value U(o,s') = (1-beta_o(s')) Q(s',o) + beta_o(s') max_o' Q(s',o').
/// With off_option set, the same update is applied to every option whose
/// policy could have produced the action; that variant is sound only for
/// deterministic intra-option policies and is rejected otherwise.
inline void intra_option_q_update(QTable& t, const OptionSet& options, int s, int executed,
                                  int a, double r, int s2, bool terminal, double gamma,
                                  bool off_option = false) {
    if (off_option && !all_options_deterministic(options))
        throw std::invalid_argument(
            "intra_option_q_update: off-option updates need deterministic option policies");
    for (int o = 0; o < options.size(); ++o) {
        if (o != executed) {
            if (!off_option) continue;
            if (options[o].pi(s, a) == 0.0) continue;
        }
        double target = r;
        if (!terminal) {
            const double beta = options[o].beta[s2];
            const double u = (1.0 - beta) * t.q(s2, o) + beta * t.q.row(s2).maxCoeff();
            target += gamma * u;
        }
        t.q(s, o) += t.alpha * (target - t.q(s, o));
    }
}

// ---------------------------------------------------------------------------
// generalized advantage estimation
// ---------------------------------------------------------------------------

/// Backward GAE recursion over a (possibly multi-episode) reward stream.
/// values carries one trailing bootstrap entry (zero after a terminal step);
/// dones[t] marks that the episode ended entering step t+1, which cuts both
/// the bootstrap and the advantage tail.
inline std::vector<double> gae_advantages(const std::vector<double>& rewards,
                                          const std::vector<double>& values,
                                          const std::vector<std::uint8_t>& dones, double gamma,
                                          double lambda) {
    const std::size_t T = rewards.size();
    if (values.size() != T + 1 || dones.size() != T)
        throw std::invalid_argument("gae_advantages: need T rewards/dones and T+1 values");
    std::vector<double> adv(T, 0.0);
    double tail = 0.0;
    for (std::size_t i = T; i-- > 0;) {
        const double cont = dones[i] ? 0.0 : 1.0;
        const double delta = rewards[i] + gamma * cont * values[i + 1] - values[i];
        tail = delta + gamma * lambda * cont * tail;
        adv[i] = tail;
    }
    return adv;
}

/// In-place shift to zero mean and unit variance (population, floored sd).
inline void normalize_advantages(std::vector<double>& adv) {
    if (adv.size() < 2) return;
    double mean = 0.0;
    for (double a : adv) mean += a;
    mean /= static_cast<double>(adv.size());
    double var = 0.0;
    for (double a : adv) var += (a - mean) * (a - mean);
    const double sd = std::max(std::sqrt(var / static_cast<double>(adv.size())), 1e-8);
    for (double& a : adv) a = (a - mean) / sd;
}

// ---------------------------------------------------------------------------
// rollout storage
// ---------------------------------------------------------------------------

/// One collected environment step with everything both optimization passes
/// need: the pair states of the two chains, behavior log-probs, and critic
/// values at collection time.
struct RolloutStep {
    int s = 0;
    int o_prev = OptionSet::dummy_index;  // slot before the redraw at time t
    int o = 0;                            // option the action was taken under
    int a = 0;
    double reward = 0.0;
    std::uint8_t done = 0;  // episode terminated entering s_{t+1}
    std::uint8_t stop = 1;  // the redraw replaced the previous option
    double lp_high = 0.0;   // log pi_bar(o | o_prev, s) at collection
    double lp_low = 0.0;    // log pi_o(a | s) at collection
    double v_high = 0.0;    // critic value of the high pair (o_prev, s)
    double v_low = 0.0;     // critic value of the low pair (s, o)
};

struct RolloutBuffer {
    std::vector<RolloutStep> steps;
    // critic values bootstrapping the truncated tail; zero after a terminal
    double bootstrap_high = 0.0;
    double bootstrap_low = 0.0;

    std::vector<double> adv_high, adv_low, ret_high, ret_low;

    int size() const { return static_cast<int>(steps.size()); }

    void clear() {
        steps.clear();
        bootstrap_high = bootstrap_low = 0.0;
        adv_high.clear();
        adv_low.clear();
        ret_high.clear();
        ret_low.clear();
    }

    /// Fill advantages and empirical returns for both chains from the stored
    /// rewards and collection-time values.
    void compute_advantages(double gamma, double lambda) {
        const std::size_t T = steps.size();
        std::vector<double> rewards(T), vh(T + 1), vl(T + 1);
        std::vector<std::uint8_t> dones(T);
        for (std::size_t t = 0; t < T; ++t) {
            rewards[t] = steps[t].reward;
            dones[t] = steps[t].done;
            vh[t] = steps[t].v_high;
            vl[t] = steps[t].v_low;
        }
        vh[T] = bootstrap_high;
        vl[T] = bootstrap_low;
        adv_high = gae_advantages(rewards, vh, dones, gamma, lambda);
        adv_low = gae_advantages(rewards, vl, dones, gamma, lambda);
        ret_high.resize(T);
        ret_low.resize(T);
        for (std::size_t t = 0; t < T; ++t) {
            ret_high[t] = adv_high[t] + vh[t];
            ret_low[t] = adv_low[t] + vl[t];
        }
    }
};

// ---------------------------------------------------------------------------
// policy-gradient updates
// ---------------------------------------------------------------------------

/// Which conditional distribution an update pass differentiates.
enum class PgHead {
    option_over_pairs,    // pi_bar(o | o_prev, s): the high chain's policy
    action_under_option,  // pi_o(a | s): the low chain's policy
    ahp_joint             // joint (stop, option, action) decision
};

/// Which critic the value loss regresses (none: advantages come from a
/// derived critic and no value parameters are trained by this pass).
enum class PgCritic { none, low_value, high_learned, high_synth };

/// One transition prepared for an update pass.
struct PgSample {
    int s = 0;
    int o_prev = OptionSet::dummy_index;
    int o = 0;
    int a = 0;
    std::uint8_t stop = 1;
    double adv = 0.0;
    double ret = 0.0;
    double lp_old = 0.0;
};

struct PgConfig {
    AdamConfig adam;  // lr 3e-4, eps 1e-5, global-norm clip 0.5
    double gamma = 0.99;
    double gae_lambda = 0.95;
    double clip_ratio = 0.2;  // <= 0 disables the surrogate clip
    int epochs = 10;
    int minibatch = 64;  // <= 0 means one full batch
    double entropy_coef = 0.0;
    double value_coef = 0.5;
    int rollout_steps = 2048;
    bool normalize_advantages = false;
};

struct PgDiagnostics {
    double policy_loss = 0.0;
    double value_loss = 0.0;
    double entropy = 0.0;
    double clip_fraction = 0.0;
    double grad_norm = 0.0;  // max pre-clip norm seen across minibatches
    long minibatches = 0;
};

/// Adam moments for the policy and value blocks of one update pass.
struct PgOptimizer {
    AdamState xi, w;

    explicit PgOptimizer(const PolicyParams& p) : xi(p.xi_size()), w(p.w_size()) {}
};

namespace detail {

inline double pg_logprob(const PolicyParams& p, PgHead head, const PgSample& sm) {
    switch (head) {
        case PgHead::option_over_pairs:
            return pi_bar_logprob(p, sm.o_prev, sm.s, sm.o);
        case PgHead::action_under_option:
            return pi_hat_logprob(p, sm.s, sm.o, sm.a);
        case PgHead::ahp_joint:
            return ahp_policy_logprob(p, sm.o_prev, sm.s, {sm.stop != 0, sm.o, sm.a});
    }
    return 0.0;
}

inline void pg_logprob_backward(const PolicyParams& p, PgHead head, const PgSample& sm,
                                double cot, Eigen::VectorXd& gxi) {
    switch (head) {
        case PgHead::option_over_pairs:
            pi_bar_logprob_backward(p, sm.o_prev, sm.s, sm.o, cot, gxi);
            return;
        case PgHead::action_under_option:
            pi_hat_logprob_backward(p, sm.s, sm.o, sm.a, cot, gxi);
            return;
        case PgHead::ahp_joint:
            ahp_policy_logprob_backward(p, sm.o_prev, sm.s, {sm.stop != 0, sm.o, sm.a}, cot,
                                        gxi);
            return;
    }
}

inline double pg_entropy(const PolicyParams& p, PgHead head, const PgSample& sm) {
    switch (head) {
        case PgHead::option_over_pairs:
            return pi_bar_entropy(p, sm.o_prev, sm.s);
        case PgHead::action_under_option:
            return pi_hat_entropy(p, sm.s, sm.o);
        case PgHead::ahp_joint:
            return ahp_policy_entropy(p, sm.o_prev, sm.s);
    }
    return 0.0;
}

inline void pg_entropy_backward(const PolicyParams& p, PgHead head, const PgSample& sm,
                                double cot, Eigen::VectorXd& gxi) {
    switch (head) {
        case PgHead::option_over_pairs:
            pi_bar_entropy_backward(p, sm.o_prev, sm.s, cot, gxi);
            return;
        case PgHead::action_under_option:
            pi_hat_entropy_backward(p, sm.s, sm.o, cot, gxi);
            return;
        case PgHead::ahp_joint:
            ahp_policy_entropy_backward(p, sm.o_prev, sm.s, cot, gxi);
            return;
    }
}

inline double pg_critic_value(const PolicyParams& p, PgCritic critic, const PgSample& sm) {
    switch (critic) {
        case PgCritic::none:
            return 0.0;
        case PgCritic::low_value:
            return p.value_low(sm.s, sm.o);
        case PgCritic::high_learned:
            return p.value_high(sm.o_prev, sm.s);
        case PgCritic::high_synth:
            return value_high_synth(p, sm.o_prev, sm.s);
    }
    return 0.0;
}

/// Value-head backward. The synthesized high critic distributes the
/// cotangent over the low values with the selection probabilities treated
/// as constants (no gradient into the policy blocks).
inline void pg_critic_backward(const PolicyParams& p, PgCritic critic, const PgSample& sm,
                               double cot, Eigen::VectorXd& gw) {
    switch (critic) {
        case PgCritic::none:
            return;
        case PgCritic::low_value:
            p.value_low_backward(sm.s, sm.o, cot, gw);
            return;
        case PgCritic::high_learned:
            p.value_high_backward(sm.o_prev, sm.s, cot, gw);
            return;
        case PgCritic::high_synth: {
            const Eigen::VectorXd probs = pi_bar_probs(p, sm.o_prev, sm.s);
            for (int o = 0; o < p.shape.n_options; ++o)
                if (probs[o] != 0.0) p.value_low_backward(sm.s, o, cot * probs[o], gw);
            return;
        }
    }
}

}  // namespace detail

/// Accumulate the clipped-surrogate policy gradient, entropy bonus, and
/// value-regression gradient of the indexed samples into gxi/gw (means over
/// the index set). At old parameters the ratio is exactly one, ties resolve
/// to the unclipped branch, and the result equals the vanilla policy
/// gradient. Diagnostics are accumulated as sums; the caller normalizes.
inline void accumulate_pg_gradient(const PolicyParams& p, const std::vector<PgSample>& samples,
                                   const std::vector<int>& idx, PgHead head, PgCritic critic,
                                   const PgConfig& cfg, Eigen::VectorXd& gxi,
                                   Eigen::VectorXd& gw, PgDiagnostics& diag) {
    const double inv_n = 1.0 / static_cast<double>(idx.size());
    const bool do_clip = cfg.clip_ratio > 0.0;
    for (const int i : idx) {
        const PgSample& sm = samples[static_cast<std::size_t>(i)];
        const double lp = detail::pg_logprob(p, head, sm);
        const double ratio = std::exp(lp - sm.lp_old);
        const double surr1 = ratio * sm.adv;
        double surr = surr1;
        bool clipped = false;
        if (do_clip) {
            const double bounded =
                std::clamp(ratio, 1.0 - cfg.clip_ratio, 1.0 + cfg.clip_ratio);
            const double surr2 = bounded * sm.adv;
            if (surr2 < surr1) {
                surr = surr2;
                clipped = true;
                diag.clip_fraction += 1.0;
            }
        }
        diag.policy_loss -= surr;
        if (!clipped) detail::pg_logprob_backward(p, head, sm, -sm.adv * ratio * inv_n, gxi);

        if (cfg.entropy_coef != 0.0) {
            diag.entropy += detail::pg_entropy(p, head, sm);
            detail::pg_entropy_backward(p, head, sm, -cfg.entropy_coef * inv_n, gxi);
        }
        if (critic != PgCritic::none) {
            const double v = detail::pg_critic_value(p, critic, sm);
            const double vdiff = v - sm.ret;
            diag.value_loss += 0.5 * vdiff * vdiff;
            detail::pg_critic_backward(p, critic, sm, cfg.value_coef * vdiff * inv_n, gw);
        }
    }
}

/// Minibatched clipped-surrogate update over the given samples: `epochs`
/// passes, each visiting every sample once in shuffled minibatches (no
/// shuffle when a single batch covers the data, keeping single-batch
/// variants deterministic without consuming randomness). Advantages are
/// optionally normalized once, up front. Throws on non-finite losses.
inline PgDiagnostics ppo_update(PolicyParams& p, std::vector<PgSample> samples, PgHead head,
                                PgCritic critic, const PgConfig& cfg, PgOptimizer& opt,
                                RandomStream& rng) {
    PgDiagnostics diag;
    const int n = static_cast<int>(samples.size());
    if (n == 0) return diag;
    if (cfg.normalize_advantages && n > 1) {
        std::vector<double> adv(samples.size());
        for (std::size_t i = 0; i < samples.size(); ++i) adv[i] = samples[i].adv;
        normalize_advantages(adv);
        for (std::size_t i = 0; i < samples.size(); ++i) samples[i].adv = adv[i];
    }

    const int mb = cfg.minibatch <= 0 ? n : std::min(cfg.minibatch, n);
    const bool single_batch = mb >= n;
    std::vector<int> order(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;

    Eigen::VectorXd gxi(p.xi_size()), gw(p.w_size());
    long samples_seen = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        if (!single_batch)
            for (int i = n - 1; i > 0; --i)
                std::swap(order[static_cast<std::size_t>(i)],
                          order[static_cast<std::size_t>(rng.uniform_int(i + 1))]);
        for (int start = 0; start < n; start += mb) {
            const int count = std::min(mb, n - start);
            const std::vector<int> idx(order.begin() + start, order.begin() + start + count);
            gxi.setZero();
            gw.setZero();
            accumulate_pg_gradient(p, samples, idx, head, critic, cfg, gxi, gw, diag);
            samples_seen += count;
            if (!gxi.allFinite() || !gw.allFinite())
                throw std::runtime_error(
                    "ppo_update: non-finite gradient (policy_loss so far " +
                    std::to_string(diag.policy_loss) + ", value_loss " +
                    std::to_string(diag.value_loss) + ")");
            const double nx = adam_step(opt.xi, cfg.adam, p.xi, gxi);
            const double nw = adam_step(opt.w, cfg.adam, p.w, gw);
            diag.grad_norm = std::max(diag.grad_norm, std::max(nx, nw));
            diag.minibatches += 1;
        }
    }
    if (samples_seen > 0) {
        const double inv = 1.0 / static_cast<double>(samples_seen);
        diag.policy_loss *= inv;
        diag.value_loss *= inv;
        diag.entropy *= inv;
        diag.clip_fraction *= inv;
    }
    if (!std::isfinite(diag.policy_loss) || !std::isfinite(diag.value_loss))
        throw std::runtime_error("ppo_update: non-finite loss (policy " +
                                 std::to_string(diag.policy_loss) + ", value " +
                                 std::to_string(diag.value_loss) + ")");
    return diag;
}

/// Vanilla advantage actor-critic: the clipped update degenerates to the
/// plain policy gradient with one epoch, one full batch, and no clip (the
/// ratio is identically one at the single gradient evaluation).
inline PgDiagnostics a2c_update(PolicyParams& p, std::vector<PgSample> samples, PgHead head,
                                PgCritic critic, const PgConfig& cfg, PgOptimizer& opt,
                                RandomStream& rng) {
    PgConfig flat = cfg;
    flat.clip_ratio = 0.0;
    flat.epochs = 1;
    flat.minibatch = 0;
    return ppo_update(p, std::move(samples), head, critic, flat, opt, rng);
}

// ---------------------------------------------------------------------------
// double actor-critic composition
// ---------------------------------------------------------------------------

/// Both optimization passes of one double actor-critic update on a shared
/// rollout. The high pass trains the option-selection blocks (theta, phi)
/// on (o_prev, s) -> o transitions; the low pass trains the intra-option
/// block nu on (s, o) -> a transitions. With a single critic (default) the
/// high chain's values are synthesized from the low critic and the high pass
/// carries no value loss; two_critics trains a separate learned high head.
struct DacConfig {
    PgConfig high;  // entropy weight 0.01 per the reference defaults
    PgConfig low;
    bool use_ppo = true;  // false: vanilla actor-critic on both chains
    bool two_critics = false;

    DacConfig() {
        high.entropy_coef = 0.01;
        high.epochs = 5;
        low.epochs = 5;
    }
};

struct DacDiagnostics {
    PgDiagnostics high, low;
};

inline std::vector<PgSample> high_samples_from(const RolloutBuffer& buf) {
    std::vector<PgSample> out(buf.steps.size());
    for (std::size_t t = 0; t < buf.steps.size(); ++t) {
        const RolloutStep& st = buf.steps[t];
        PgSample& sm = out[t];
        sm.s = st.s;
        sm.o_prev = st.o_prev;
        sm.o = st.o;
        sm.a = st.a;
        sm.stop = st.stop;
        sm.adv = buf.adv_high[t];
        sm.ret = buf.ret_high[t];
        sm.lp_old = st.lp_high;
    }
    return out;
}

inline std::vector<PgSample> low_samples_from(const RolloutBuffer& buf) {
    std::vector<PgSample> out(buf.steps.size());
    for (std::size_t t = 0; t < buf.steps.size(); ++t) {
        const RolloutStep& st = buf.steps[t];
        PgSample& sm = out[t];
        sm.s = st.s;
        sm.o_prev = st.o_prev;
        sm.o = st.o;
        sm.a = st.a;
        sm.stop = st.stop;
        sm.adv = buf.adv_low[t];
        sm.ret = buf.ret_low[t];
        sm.lp_old = st.lp_low;
    }
    return out;
}

/// One DAC update: optimize the option-selection policy on the high chain's
/// view of the rollout, then the intra-option policy on the low chain's
/// view, both from the same samples.
inline DacDiagnostics dac_update(PolicyParams& p, const RolloutBuffer& buf,
                                 const DacConfig& cfg, PgOptimizer& opt_high,
                                 PgOptimizer& opt_low, RandomStream& rng) {
    DacDiagnostics diag;
    const PgCritic high_critic =
        cfg.two_critics ? PgCritic::high_learned : PgCritic::none;
    if (cfg.use_ppo) {
        diag.high = ppo_update(p, high_samples_from(buf), PgHead::option_over_pairs,
                               high_critic, cfg.high, opt_high, rng);
        diag.low = ppo_update(p, low_samples_from(buf), PgHead::action_under_option,
                              PgCritic::low_value, cfg.low, opt_low, rng);
    } else {
        diag.high = a2c_update(p, high_samples_from(buf), PgHead::option_over_pairs,
                               high_critic, cfg.high, opt_high, rng);
        diag.low = a2c_update(p, low_samples_from(buf), PgHead::action_under_option,
                              PgCritic::low_value, cfg.low, opt_low, rng);
    }
    return diag;
}

// ---------------------------------------------------------------------------
// option-posterior recursion
// ---------------------------------------------------------------------------

/// Filtered distribution over the active option given the action history.
struct PosteriorState {
    Eigen::VectorXd m;
    long t = 0;
};

/// Posterior at the first state, before any action: the master row.
inline PosteriorState iopg_posterior_init(const MasterPolicy& master, int s0) {
    PosteriorState st;
    st.m = master.pi.row(s0).transpose();
    st.t = 0;
    return st;
}

/// Advance the posterior by one observed transition (s_prev, a_prev, s):
/// re-weight by the action likelihood under each option, then push the
/// weights through the terminate-or-continue switching kernel at s.
inline void iopg_posterior_step(PosteriorState& st, const OptionSet& options,
                                const MasterPolicy& master, int s_prev, int a_prev, int s) {
    const int N = options.size();
    if (st.m.size() != N) throw std::invalid_argument("iopg_posterior_step: size mismatch");
    Eigen::VectorXd next = Eigen::VectorXd::Zero(N);
    for (int o_prev = 0; o_prev < N; ++o_prev) {
        const double w = st.m[o_prev] * options[o_prev].pi(s_prev, a_prev);
        if (w == 0.0) continue;
        const double beta = options[o_prev].beta[s];
        next[o_prev] += w * (1.0 - beta);
        for (int o = 0; o < N; ++o) next[o] += w * beta * master.pi(s, o);
    }
    const double total = next.sum();
    if (!(total > 0.0))
        throw std::domain_error("iopg_posterior_step: history has zero probability");
    st.m = next / total;
    st.t += 1;
}

}  // namespace optionkit
