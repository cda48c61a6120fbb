#pragma once

// Differentiable policy and value parameterizations.
//
// Parameters live in two flat vectors with a fixed block layout:
//   xi = [theta | nu | phi]     theta: master head over options
//                               nu:    per-option action heads
//                               phi:   per-option termination heads
//   w  = [w_low | w_high]       w_low:  value of (state, option) pairs
//                               w_high: value of (prev option, state) pairs
//
// Three kinds share this layout:
//   softmax_tabular   logits and values stored directly per state
//   linear_gaussian   linear heads over one-hot features; Gaussian actions
//                     with a state-independent log-std per option
//   feedforward       one small MLP per head (two hidden layers, no
//                     parameter sharing between options)
//
// The option-selection distribution used by the high-level process is never
// a free head: it is assembled from the termination and master heads as
//   (1 - beta) * [o = o_prev] + beta * master(o | s)
// so its gradients flow to (theta, phi) through exactly that expression.

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "optionkit/mdp.hpp"
#include "optionkit/rng.hpp"

namespace optionkit {

enum class ParamKind { softmax_tabular, linear_gaussian, feedforward };
enum class ActionHeadKind { categorical, gaussian };
enum class Activation { tanh_fn, relu_fn };

inline const char* to_string(ParamKind k) {
    switch (k) {
        case ParamKind::softmax_tabular: return "softmax_tabular";
        case ParamKind::linear_gaussian: return "linear_gaussian";
        case ParamKind::feedforward: return "feedforward";
    }
    return "?";
}

inline ParamKind param_kind_from(const std::string& s) {
    if (s == "softmax_tabular") return ParamKind::softmax_tabular;
    if (s == "linear_gaussian") return ParamKind::linear_gaussian;
    if (s == "feedforward") return ParamKind::feedforward;
    throw std::invalid_argument("unknown parameterization kind: " + s);
}

// ---------------------------------------------------------------------------
// numerics
// ---------------------------------------------------------------------------

inline double sigmoid(double z) {
    return z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
}

inline Eigen::VectorXd softmax(const Eigen::VectorXd& z) {
    const double m = z.maxCoeff();
    Eigen::VectorXd e = (z.array() - m).exp();
    return e / e.sum();
}

inline double log_sum_exp(const Eigen::VectorXd& z) {
    const double m = z.maxCoeff();
    return m + std::log((z.array() - m).exp().sum());
}

/// d(loss)/d(logits) given d(loss)/d(log p[outcome]) = cot.
inline void softmax_logprob_backward(const Eigen::VectorXd& probs, int outcome, double cot,
                                     Eigen::VectorXd& grad_logits) {
    grad_logits = -cot * probs;
    grad_logits[outcome] += cot;
}

// ---------------------------------------------------------------------------
// small MLP (two hidden layers), parameters in a flat slice
// ---------------------------------------------------------------------------

struct MlpDims {
    int in = 0, hidden = 0, out = 0;
    int size() const { return hidden * in + hidden + hidden * hidden + hidden + out * hidden + out; }
};

namespace detail {

inline double activate(double z, Activation act) {
    return act == Activation::tanh_fn ? std::tanh(z) : (z > 0.0 ? z : 0.0);
}
inline double activate_grad_from_output(double y, Activation act) {
    return act == Activation::tanh_fn ? 1.0 - y * y : (y > 0.0 ? 1.0 : 0.0);
}

struct MlpTrace {
    Eigen::VectorXd h1, h2, out;
};

inline MlpTrace mlp_forward(const double* p, const MlpDims& d, Activation act,
                            const Eigen::VectorXd& x) {
    using CM = Eigen::Map<const Eigen::MatrixXd>;
    using CV = Eigen::Map<const Eigen::VectorXd>;
    const double* q = p;
    CM w1(q, d.hidden, d.in); q += d.hidden * d.in;
    CV b1(q, d.hidden); q += d.hidden;
    CM w2(q, d.hidden, d.hidden); q += d.hidden * d.hidden;
    CV b2(q, d.hidden); q += d.hidden;
    CM w3(q, d.out, d.hidden); q += d.out * d.hidden;
    CV b3(q, d.out);
    MlpTrace t;
    t.h1 = w1 * x + b1;
    for (int i = 0; i < d.hidden; ++i) t.h1[i] = activate(t.h1[i], act);
    t.h2 = w2 * t.h1 + b2;
    for (int i = 0; i < d.hidden; ++i) t.h2[i] = activate(t.h2[i], act);
    t.out = w3 * t.h2 + b3;
    return t;
}

/// Accumulate d(loss)/d(params) into g given d(loss)/d(output) = cot.
inline void mlp_backward(const double* p, const MlpDims& d, Activation act,
                         const Eigen::VectorXd& x, const Eigen::VectorXd& cot, double* g) {
    using CM = Eigen::Map<const Eigen::MatrixXd>;
    using M = Eigen::Map<Eigen::MatrixXd>;
    using V = Eigen::Map<Eigen::VectorXd>;
    const MlpTrace t = mlp_forward(p, d, act, x);
    const double* q = p;
    double* r = g;
    CM w1(q, d.hidden, d.in); q += d.hidden * d.in + d.hidden;
    CM w2(q, d.hidden, d.hidden); q += d.hidden * d.hidden + d.hidden;
    CM w3(q, d.out, d.hidden);

    M gw1(r, d.hidden, d.in); r += d.hidden * d.in;
    V gb1(r, d.hidden); r += d.hidden;
    M gw2(r, d.hidden, d.hidden); r += d.hidden * d.hidden;
    V gb2(r, d.hidden); r += d.hidden;
    M gw3(r, d.out, d.hidden); r += d.out * d.hidden;
    V gb3(r, d.out);

    gw3 += cot * t.h2.transpose();
    gb3 += cot;
    Eigen::VectorXd d2 = w3.transpose() * cot;
    for (int i = 0; i < d.hidden; ++i) d2[i] *= activate_grad_from_output(t.h2[i], act);
    gw2 += d2 * t.h1.transpose();
    gb2 += d2;
    Eigen::VectorXd d1 = w2.transpose() * d2;
    for (int i = 0; i < d.hidden; ++i) d1[i] *= activate_grad_from_output(t.h1[i], act);
    gw1 += d1 * x.transpose();
    gb1 += d1;
}

inline void mlp_init(double* p, const MlpDims& d, RandomStream& rng, double out_scale) {
    auto fill = [&rng](double* q, int rows, int cols, double scale) {
        const double lim = scale * std::sqrt(6.0 / (rows + cols));
        for (int i = 0; i < rows * cols; ++i) q[i] = rng.uniform(-lim, lim);
    };
    double* q = p;
    fill(q, d.hidden, d.in, 1.0); q += d.hidden * d.in;
    for (int i = 0; i < d.hidden; ++i) *q++ = 0.0;
    fill(q, d.hidden, d.hidden, 1.0); q += d.hidden * d.hidden;
    for (int i = 0; i < d.hidden; ++i) *q++ = 0.0;
    fill(q, d.out, d.hidden, out_scale); q += d.out * d.hidden;
    for (int i = 0; i < d.out; ++i) *q++ = 0.0;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// parameter container
// ---------------------------------------------------------------------------

struct PolicyShapes {
    int n_states = 0;
    int n_actions = 0;  // categorical: count; gaussian: dimension
    int n_options = 0;
    ParamKind kind = ParamKind::softmax_tabular;
    ActionHeadKind action_head = ActionHeadKind::categorical;
    int hidden = 64;
    Activation activation = Activation::tanh_fn;
};

class PolicyParams {
public:
    PolicyShapes shape;
    Eigen::VectorXd xi;  // [theta | nu | phi]
    Eigen::VectorXd w;   // [w_low | w_high]

    PolicyParams() = default;

    /// Zero-initialized tabular/linear heads (uniform policies, beta = 1/2);
    /// Xavier-initialized networks with small output layers.
    static PolicyParams init(const PolicyShapes& shape, RandomStream& rng) {
        PolicyParams p;
        p.shape = shape;
        p.compute_layout();
        p.xi = Eigen::VectorXd::Zero(p.xi_size_);
        p.w = Eigen::VectorXd::Zero(p.w_size_);
        if (shape.kind == ParamKind::feedforward) {
            detail::mlp_init(p.xi.data() + p.theta_off_, p.master_dims(), rng, 0.01);
            for (int o = 0; o < shape.n_options; ++o) {
                detail::mlp_init(p.xi.data() + p.nu_off_ + o * p.nu_per_option_, p.action_dims(),
                                 rng, 0.01);
                detail::mlp_init(p.xi.data() + p.phi_off_ + o * p.phi_per_option_,
                                 p.scalar_dims(), rng, 0.01);
                detail::mlp_init(p.w.data() + o * p.wlow_per_slot_, p.scalar_dims(), rng, 1.0);
            }
            for (int slot = 0; slot <= shape.n_options; ++slot)
                detail::mlp_init(p.w.data() + p.whigh_off_ + slot * p.whigh_per_slot_,
                                 p.scalar_dims(), rng, 1.0);
        }
        return p;
    }

    int xi_size() const { return xi_size_; }
    int w_size() const { return w_size_; }
    int theta_offset() const { return theta_off_; }
    int theta_size() const { return nu_off_ - theta_off_; }
    int nu_offset() const { return nu_off_; }
    int nu_size() const { return phi_off_ - nu_off_; }
    int phi_offset() const { return phi_off_; }
    int phi_size() const { return xi_size_ - phi_off_; }
    int wlow_size() const { return whigh_off_; }

    // ---- forward ----------------------------------------------------------

    Eigen::VectorXd master_logits(int s) const {
        check_state(s);
        switch (shape.kind) {
            case ParamKind::softmax_tabular:
                return xi.segment(theta_off_ + s * shape.n_options, shape.n_options);
            case ParamKind::linear_gaussian:
                return linear_head(xi.data() + theta_off_, shape.n_options, s);
            case ParamKind::feedforward:
                return detail::mlp_forward(xi.data() + theta_off_, master_dims(),
                                           shape.activation, one_hot(s))
                    .out;
        }
        return {};
    }

    double termination_logit(int o, int s) const {
        check_option(o);
        check_state(s);
        switch (shape.kind) {
            case ParamKind::softmax_tabular:
                return xi[phi_off_ + o * shape.n_states + s];
            case ParamKind::linear_gaussian:
                return linear_head(xi.data() + phi_off_ + o * phi_per_option_, 1, s)[0];
            case ParamKind::feedforward:
                return detail::mlp_forward(xi.data() + phi_off_ + o * phi_per_option_,
                                           scalar_dims(), shape.activation, one_hot(s))
                    .out[0];
        }
        return 0.0;
    }

    Eigen::VectorXd action_logits(int o, int s) const {
        require_categorical();
        check_option(o);
        check_state(s);
        switch (shape.kind) {
            case ParamKind::softmax_tabular:
                return xi.segment(nu_off_ + (o * shape.n_states + s) * shape.n_actions,
                                  shape.n_actions);
            case ParamKind::linear_gaussian:
                return linear_head(xi.data() + nu_off_ + o * nu_per_option_, shape.n_actions, s);
            case ParamKind::feedforward:
                return detail::mlp_forward(xi.data() + nu_off_ + o * nu_per_option_,
                                           action_dims(), shape.activation, one_hot(s))
                    .out;
        }
        return {};
    }

    /// Gaussian head: mean from the option's net/linear head, log-std from a
    /// state-independent per-option parameter tail.
    void action_gaussian(int o, int s, Eigen::VectorXd& mean, Eigen::VectorXd& logstd) const {
        require_gaussian();
        check_option(o);
        check_state(s);
        const double* block = xi.data() + nu_off_ + o * nu_per_option_;
        if (shape.kind == ParamKind::linear_gaussian)
            mean = linear_head(block, shape.n_actions, s);
        else
            mean = detail::mlp_forward(block, action_dims(), shape.activation, one_hot(s)).out;
        logstd = Eigen::Map<const Eigen::VectorXd>(block + nu_per_option_ - shape.n_actions,
                                                   shape.n_actions);
    }

    double value_low(int s, int o) const {
        check_option(o);
        check_state(s);
        switch (shape.kind) {
            case ParamKind::softmax_tabular:
                return w[o * shape.n_states + s];
            case ParamKind::linear_gaussian:
                return linear_head(w.data() + o * wlow_per_slot_, 1, s)[0];
            case ParamKind::feedforward:
                return detail::mlp_forward(w.data() + o * wlow_per_slot_, scalar_dims(),
                                           shape.activation, one_hot(s))
                    .out[0];
        }
        return 0.0;
    }

    /// Learned value over (previous option, state); slot 0 is the
    /// episode-start marker. Used by the augmented-baseline critic and the
    /// two-critic ablation; the default trainer synthesizes this value from
    /// value_low instead.
    double value_high(int o_prev, int s) const {
        const int slot = slot_of(o_prev);
        check_state(s);
        switch (shape.kind) {
            case ParamKind::softmax_tabular:
                return w[whigh_off_ + slot * shape.n_states + s];
            case ParamKind::linear_gaussian:
                return linear_head(w.data() + whigh_off_ + slot * whigh_per_slot_, 1, s)[0];
            case ParamKind::feedforward:
                return detail::mlp_forward(w.data() + whigh_off_ + slot * whigh_per_slot_,
                                           scalar_dims(), shape.activation, one_hot(s))
                    .out[0];
        }
        return 0.0;
    }

    // ---- backward (accumulating) ------------------------------------------

    void master_logits_backward(int s, const Eigen::VectorXd& cot, Eigen::VectorXd& gxi) const {
        switch (shape.kind) {
            case ParamKind::softmax_tabular:
                gxi.segment(theta_off_ + s * shape.n_options, shape.n_options) += cot;
                return;
            case ParamKind::linear_gaussian:
                linear_head_backward(gxi.data() + theta_off_, shape.n_options, s, cot);
                return;
            case ParamKind::feedforward:
                detail::mlp_backward(xi.data() + theta_off_, master_dims(), shape.activation,
                                     one_hot(s), cot, gxi.data() + theta_off_);
                return;
        }
    }

    void termination_logit_backward(int o, int s, double cot, Eigen::VectorXd& gxi) const {
        Eigen::VectorXd c1 = Eigen::VectorXd::Constant(1, cot);
        switch (shape.kind) {
            case ParamKind::softmax_tabular:
                gxi[phi_off_ + o * shape.n_states + s] += cot;
                return;
            case ParamKind::linear_gaussian:
                linear_head_backward(gxi.data() + phi_off_ + o * phi_per_option_, 1, s, c1);
                return;
            case ParamKind::feedforward:
                detail::mlp_backward(xi.data() + phi_off_ + o * phi_per_option_, scalar_dims(),
                                     shape.activation, one_hot(s), c1,
                                     gxi.data() + phi_off_ + o * phi_per_option_);
                return;
        }
    }

    void action_logits_backward(int o, int s, const Eigen::VectorXd& cot,
                                Eigen::VectorXd& gxi) const {
        require_categorical();
        switch (shape.kind) {
            case ParamKind::softmax_tabular:
                gxi.segment(nu_off_ + (o * shape.n_states + s) * shape.n_actions,
                            shape.n_actions) += cot;
                return;
            case ParamKind::linear_gaussian:
                linear_head_backward(gxi.data() + nu_off_ + o * nu_per_option_, shape.n_actions, s,
                                     cot);
                return;
            case ParamKind::feedforward:
                detail::mlp_backward(xi.data() + nu_off_ + o * nu_per_option_, action_dims(),
                                     shape.activation, one_hot(s), cot,
                                     gxi.data() + nu_off_ + o * nu_per_option_);
                return;
        }
    }

    void action_gaussian_backward(int o, int s, const Eigen::VectorXd& cot_mean,
                                  const Eigen::VectorXd& cot_logstd, Eigen::VectorXd& gxi) const {
        require_gaussian();
        double* gblock = gxi.data() + nu_off_ + o * nu_per_option_;
        if (shape.kind == ParamKind::linear_gaussian)
            linear_head_backward(gblock, shape.n_actions, s, cot_mean);
        else
            detail::mlp_backward(xi.data() + nu_off_ + o * nu_per_option_, action_dims(),
                                 shape.activation, one_hot(s), cot_mean, gblock);
        Eigen::Map<Eigen::VectorXd>(gblock + nu_per_option_ - shape.n_actions, shape.n_actions) +=
            cot_logstd;
    }

    void value_low_backward(int s, int o, double cot, Eigen::VectorXd& gw) const {
        Eigen::VectorXd c1 = Eigen::VectorXd::Constant(1, cot);
        switch (shape.kind) {
            case ParamKind::softmax_tabular:
                gw[o * shape.n_states + s] += cot;
                return;
            case ParamKind::linear_gaussian:
                linear_head_backward(gw.data() + o * wlow_per_slot_, 1, s, c1);
                return;
            case ParamKind::feedforward:
                detail::mlp_backward(w.data() + o * wlow_per_slot_, scalar_dims(),
                                     shape.activation, one_hot(s), c1,
                                     gw.data() + o * wlow_per_slot_);
                return;
        }
    }

    void value_high_backward(int o_prev, int s, double cot, Eigen::VectorXd& gw) const {
        const int slot = slot_of(o_prev);
        Eigen::VectorXd c1 = Eigen::VectorXd::Constant(1, cot);
        switch (shape.kind) {
            case ParamKind::softmax_tabular:
                gw[whigh_off_ + slot * shape.n_states + s] += cot;
                return;
            case ParamKind::linear_gaussian:
                linear_head_backward(gw.data() + whigh_off_ + slot * whigh_per_slot_, 1, s, c1);
                return;
            case ParamKind::feedforward:
                detail::mlp_backward(w.data() + whigh_off_ + slot * whigh_per_slot_, scalar_dims(),
                                     shape.activation, one_hot(s), c1,
                                     gw.data() + whigh_off_ + slot * whigh_per_slot_);
                return;
        }
    }

    Eigen::VectorXd one_hot(int s) const {
        Eigen::VectorXd x = Eigen::VectorXd::Zero(shape.n_states);
        x[s] = 1.0;
        return x;
    }

private:
    friend PolicyParams load_checkpoint(const std::string&);

    void compute_layout() {
        const int S = shape.n_states, A = shape.n_actions, N = shape.n_options;
        if (S <= 0 || A <= 0 || N <= 0)
            throw std::invalid_argument("PolicyShapes: sizes must be positive");
        if (shape.kind == ParamKind::softmax_tabular &&
            shape.action_head != ActionHeadKind::categorical)
            throw std::invalid_argument("softmax_tabular supports only categorical actions");
        if (shape.kind == ParamKind::linear_gaussian &&
            shape.action_head != ActionHeadKind::gaussian)
            throw std::invalid_argument("linear_gaussian supports only gaussian actions");
        switch (shape.kind) {
            case ParamKind::softmax_tabular:
                theta_size_ = S * N;
                nu_per_option_ = S * A;
                phi_per_option_ = S;
                wlow_per_slot_ = S;
                whigh_per_slot_ = S;
                break;
            case ParamKind::linear_gaussian:
                theta_size_ = N * (S + 1);
                nu_per_option_ = A * (S + 1) + A;  // mean head + log-std tail
                phi_per_option_ = S + 1;
                wlow_per_slot_ = S + 1;
                whigh_per_slot_ = S + 1;
                break;
            case ParamKind::feedforward:
                theta_size_ = master_dims().size();
                nu_per_option_ =
                    action_dims().size() +
                    (shape.action_head == ActionHeadKind::gaussian ? A : 0);
                phi_per_option_ = scalar_dims().size();
                wlow_per_slot_ = scalar_dims().size();
                whigh_per_slot_ = scalar_dims().size();
                break;
        }
        theta_off_ = 0;
        nu_off_ = theta_off_ + theta_size_;
        phi_off_ = nu_off_ + N * nu_per_option_;
        xi_size_ = phi_off_ + N * phi_per_option_;
        whigh_off_ = N * wlow_per_slot_;
        w_size_ = whigh_off_ + (N + 1) * whigh_per_slot_;
    }

    MlpDims master_dims() const { return {shape.n_states, shape.hidden, shape.n_options}; }
    MlpDims action_dims() const { return {shape.n_states, shape.hidden, shape.n_actions}; }
    MlpDims scalar_dims() const { return {shape.n_states, shape.hidden, 1}; }

    Eigen::VectorXd linear_head(const double* p, int out, int s) const {
        // weight layout per output: [w_0 .. w_{S-1} | b], one-hot input
        Eigen::VectorXd y(out);
        for (int i = 0; i < out; ++i)
            y[i] = p[i * (shape.n_states + 1) + s] + p[i * (shape.n_states + 1) + shape.n_states];
        return y;
    }
    void linear_head_backward(double* g, int out, int s, const Eigen::VectorXd& cot) const {
        for (int i = 0; i < out; ++i) {
            g[i * (shape.n_states + 1) + s] += cot[i];
            g[i * (shape.n_states + 1) + shape.n_states] += cot[i];
        }
    }

    int slot_of(int o_prev) const {
        if (o_prev == OptionSet::dummy_index) return 0;
        check_option(o_prev);
        return o_prev + 1;
    }
    void check_state(int s) const { check_index(s, shape.n_states, "state"); }
    void check_option(int o) const { check_index(o, shape.n_options, "option"); }
    void require_categorical() const {
        if (shape.action_head != ActionHeadKind::categorical)
            throw std::logic_error("categorical action head required");
    }
    void require_gaussian() const {
        if (shape.action_head != ActionHeadKind::gaussian)
            throw std::logic_error("gaussian action head required");
    }

    int theta_size_ = 0, nu_per_option_ = 0, phi_per_option_ = 0;
    int wlow_per_slot_ = 0, whigh_per_slot_ = 0;
    int theta_off_ = 0, nu_off_ = 0, phi_off_ = 0, xi_size_ = 0;
    int whigh_off_ = 0, w_size_ = 0;
};

// ---------------------------------------------------------------------------
// composed distributions
// ---------------------------------------------------------------------------

inline Eigen::VectorXd master_probs(const PolicyParams& p, int s) {
    return softmax(p.master_logits(s));
}

inline double beta_of(const PolicyParams& p, int o, int s) {
    return sigmoid(p.termination_logit(o, s));
}

inline Eigen::VectorXd option_action_probs(const PolicyParams& p, int o, int s) {
    return softmax(p.action_logits(o, s));
}

/// Option-selection distribution at (previous option, state). With the
/// episode-start marker the previous option terminates surely, leaving the
/// bare master distribution.
inline Eigen::VectorXd pi_bar_probs(const PolicyParams& p, int o_prev, int s) {
    Eigen::VectorXd out = master_probs(p, s);
    if (o_prev == OptionSet::dummy_index) return out;
    const double beta = beta_of(p, o_prev, s);
    out *= beta;
    out[o_prev] += 1.0 - beta;
    return out;
}

inline double pi_bar_logprob(const PolicyParams& p, int o_prev, int s, int o) {
    const double prob = pi_bar_probs(p, o_prev, s)[o];
    if (!(prob > 0.0)) throw std::domain_error("pi_bar_logprob: outcome has zero probability");
    return std::log(prob);
}

/// d(loss)/d(xi) += cot * d log pi_bar(o | o_prev, s) / d xi.
inline void pi_bar_logprob_backward(const PolicyParams& p, int o_prev, int s, int o, double cot,
                                    Eigen::VectorXd& gxi) {
    const Eigen::VectorXd mp = master_probs(p, s);
    if (o_prev == OptionSet::dummy_index) {
        Eigen::VectorXd gl;
        softmax_logprob_backward(mp, o, cot, gl);
        p.master_logits_backward(s, gl, gxi);
        return;
    }
    const double beta = beta_of(p, o_prev, s);
    const double prob = beta * mp[o] + (o == o_prev ? 1.0 - beta : 0.0);
    if (!(prob > 0.0)) throw std::domain_error("pi_bar_logprob_backward: zero probability");
    // termination path: d prob / d beta = mp[o] - [o == o_prev]
    const double dprob_dbeta = mp[o] - (o == o_prev ? 1.0 : 0.0);
    const double cot_logit = cot * dprob_dbeta / prob * beta * (1.0 - beta);
    p.termination_logit_backward(o_prev, s, cot_logit, gxi);
    // master path: d prob / d mp[k] = beta * [k == o]
    const double c = cot * beta / prob;  // coefficient on d mp[o]
    Eigen::VectorXd gl = -(c * mp[o]) * mp;
    gl[o] += c * mp[o];
    p.master_logits_backward(s, gl, gxi);
}

inline double pi_bar_entropy(const PolicyParams& p, int o_prev, int s) {
    const Eigen::VectorXd probs = pi_bar_probs(p, o_prev, s);
    double h = 0.0;
    for (int o = 0; o < probs.size(); ++o)
        if (probs[o] > 0.0) h -= probs[o] * std::log(probs[o]);
    return h;
}

/// d(loss)/d(xi) += cot * d H(pi_bar(. | o_prev, s)) / d xi, assembled from
/// per-outcome log-prob gradients: dH = -sum_o dpi(o) (log pi(o) + 1).
inline void pi_bar_entropy_backward(const PolicyParams& p, int o_prev, int s, double cot,
                                    Eigen::VectorXd& gxi) {
    const Eigen::VectorXd probs = pi_bar_probs(p, o_prev, s);
    for (int o = 0; o < probs.size(); ++o) {
        if (!(probs[o] > 0.0)) continue;
        const double coeff = -cot * probs[o] * (std::log(probs[o]) + 1.0);
        pi_bar_logprob_backward(p, o_prev, s, o, coeff, gxi);
    }
}

inline double pi_hat_logprob(const PolicyParams& p, int s, int o, int a) {
    const Eigen::VectorXd logits = p.action_logits(o, s);
    return logits[a] - log_sum_exp(logits);
}

inline void pi_hat_logprob_backward(const PolicyParams& p, int s, int o, int a, double cot,
                                    Eigen::VectorXd& gxi) {
    const Eigen::VectorXd probs = option_action_probs(p, o, s);
    Eigen::VectorXd gl;
    softmax_logprob_backward(probs, a, cot, gl);
    p.action_logits_backward(o, s, gl, gxi);
}

inline double pi_hat_entropy(const PolicyParams& p, int s, int o) {
    const Eigen::VectorXd logits = p.action_logits(o, s);
    const double lse = log_sum_exp(logits);
    double h = 0.0;
    for (int a = 0; a < logits.size(); ++a) {
        const double logp = logits[a] - lse;
        h -= std::exp(logp) * logp;
    }
    return h;
}

inline void pi_hat_entropy_backward(const PolicyParams& p, int s, int o, double cot,
                                    Eigen::VectorXd& gxi) {
    const Eigen::VectorXd probs = option_action_probs(p, o, s);
    Eigen::VectorXd gl = Eigen::VectorXd::Zero(probs.size());
    for (int a = 0; a < probs.size(); ++a) {
        if (!(probs[a] > 0.0)) continue;
        const double coeff = -cot * probs[a] * (std::log(probs[a]) + 1.0);
        Eigen::VectorXd ga;
        softmax_logprob_backward(probs, a, coeff, ga);
        gl += ga;
    }
    p.action_logits_backward(o, s, gl, gxi);
}

inline double master_logprob(const PolicyParams& p, int s, int o) {
    const Eigen::VectorXd logits = p.master_logits(s);
    return logits[o] - log_sum_exp(logits);
}

inline void master_logprob_backward(const PolicyParams& p, int s, int o, double cot,
                                    Eigen::VectorXd& gxi) {
    Eigen::VectorXd gl;
    softmax_logprob_backward(softmax(p.master_logits(s)), o, cot, gl);
    p.master_logits_backward(s, gl, gxi);
}

/// Diagonal-Gaussian action log-density.
inline double gaussian_logprob(const PolicyParams& p, int o, int s,
                               const Eigen::VectorXd& action) {
    Eigen::VectorXd mean, logstd;
    p.action_gaussian(o, s, mean, logstd);
    double lp = -0.5 * action.size() * std::log(2.0 * M_PI);
    for (int i = 0; i < action.size(); ++i) {
        const double z = (action[i] - mean[i]) / std::exp(logstd[i]);
        lp -= logstd[i] + 0.5 * z * z;
    }
    return lp;
}

inline void gaussian_logprob_backward(const PolicyParams& p, int o, int s,
                                      const Eigen::VectorXd& action, double cot,
                                      Eigen::VectorXd& gxi) {
    Eigen::VectorXd mean, logstd;
    p.action_gaussian(o, s, mean, logstd);
    Eigen::VectorXd cot_mean(action.size()), cot_logstd(action.size());
    for (int i = 0; i < action.size(); ++i) {
        const double inv_var = std::exp(-2.0 * logstd[i]);
        const double diff = action[i] - mean[i];
        cot_mean[i] = cot * diff * inv_var;
        cot_logstd[i] = cot * (diff * diff * inv_var - 1.0);
    }
    p.action_gaussian_backward(o, s, cot_mean, cot_logstd, gxi);
}

/// High-level state value synthesized from the low-level one:
/// sum_o pi_bar(o | o_prev, s) * value_low(s, o).
inline double value_high_synth(const PolicyParams& p, int o_prev, int s) {
    const Eigen::VectorXd probs = pi_bar_probs(p, o_prev, s);
    double v = 0.0;
    for (int o = 0; o < probs.size(); ++o)
        if (probs[o] != 0.0) v += probs[o] * p.value_low(s, o);
    return v;
}

// ---------------------------------------------------------------------------
// augmented-action baseline decisions: (branch, option, action)
// ---------------------------------------------------------------------------

/// One augmented decision: keep the previous option (stop = false, option
/// must equal it) or terminate and pick afresh (stop = true), then act.
struct AhpDecision {
    bool stop = true;
    int option = 0;
    int action = 0;
};

/// log of the joint decision probability
///   continue: (1 - beta_prev(s)) * pi_opt(a | s)
///   stop:     beta_prev(s) * master(o | s) * pi_o(a | s)
/// At episode start the previous slot terminates surely, so continue has
/// probability zero (returns -inf, guarded against NaN).
inline double ahp_policy_logprob(const PolicyParams& p, int o_prev, int s, const AhpDecision& d) {
    check_index(d.option, p.shape.n_options, "option");
    const bool at_start = o_prev == OptionSet::dummy_index;
    if (!d.stop && at_start) return -std::numeric_limits<double>::infinity();
    if (!d.stop && d.option != o_prev)
        throw std::invalid_argument("ahp_policy_logprob: continue must keep the previous option");
    double lp = pi_hat_logprob(p, s, d.option, d.action);
    if (at_start) return lp + master_logprob(p, s, d.option);
    const double beta = beta_of(p, o_prev, s);
    if (d.stop) {
        lp += std::log(beta) + master_logprob(p, s, d.option);
    } else {
        if (beta >= 1.0) return -std::numeric_limits<double>::infinity();
        lp += std::log1p(-beta);
    }
    return lp;
}

inline void ahp_policy_logprob_backward(const PolicyParams& p, int o_prev, int s,
                                        const AhpDecision& d, double cot, Eigen::VectorXd& gxi) {
    const bool at_start = o_prev == OptionSet::dummy_index;
    if (!d.stop && at_start)
        throw std::domain_error("ahp_policy_logprob_backward: zero-probability branch");
    pi_hat_logprob_backward(p, s, d.option, d.action, cot, gxi);
    if (at_start) {
        master_logprob_backward(p, s, d.option, cot, gxi);
        return;
    }
    const double beta = beta_of(p, o_prev, s);
    if (d.stop) {
        // d log beta / d logit = 1 - beta
        p.termination_logit_backward(o_prev, s, cot * (1.0 - beta), gxi);
        master_logprob_backward(p, s, d.option, cot, gxi);
    } else {
        // d log(1 - beta) / d logit = -beta
        p.termination_logit_backward(o_prev, s, -cot * beta, gxi);
    }
}

/// Entropy of the joint (branch, option, action) decision distribution,
/// assembled from per-decision log-prob gradients.
inline double ahp_policy_entropy(const PolicyParams& p, int o_prev, int s) {
    double h = 0.0;
    const bool at_start = o_prev == OptionSet::dummy_index;
    const double beta = at_start ? 1.0 : beta_of(p, o_prev, s);
    const Eigen::VectorXd mp = master_probs(p, s);
    for (int o = 0; o < p.shape.n_options; ++o) {
        const Eigen::VectorXd ap = option_action_probs(p, o, s);
        for (int a = 0; a < p.shape.n_actions; ++a) {
            const double stop_prob = beta * mp[o] * ap[a];
            if (stop_prob > 0.0) h -= stop_prob * std::log(stop_prob);
            if (!at_start && o == o_prev) {
                const double cont_prob = (1.0 - beta) * ap[a];
                if (cont_prob > 0.0) h -= cont_prob * std::log(cont_prob);
            }
        }
    }
    return h;
}

inline void ahp_policy_entropy_backward(const PolicyParams& p, int o_prev, int s, double cot,
                                        Eigen::VectorXd& gxi) {
    const bool at_start = o_prev == OptionSet::dummy_index;
    const double beta = at_start ? 1.0 : beta_of(p, o_prev, s);
    const Eigen::VectorXd mp = master_probs(p, s);
    for (int o = 0; o < p.shape.n_options; ++o) {
        const Eigen::VectorXd ap = option_action_probs(p, o, s);
        for (int a = 0; a < p.shape.n_actions; ++a) {
            AhpDecision d{true, o, a};
            const double stop_prob = beta * mp[o] * ap[a];
            if (stop_prob > 0.0)
                ahp_policy_logprob_backward(p, o_prev, s, d, -cot * stop_prob * (std::log(stop_prob) + 1.0), gxi);
            if (!at_start && o == o_prev) {
                const double cont_prob = (1.0 - beta) * ap[a];
                if (cont_prob > 0.0) {
                    AhpDecision c{false, o, a};
                    ahp_policy_logprob_backward(p, o_prev, s, c, -cot * cont_prob * (std::log(cont_prob) + 1.0), gxi);
                }
            }
        }
    }
}

/// Sample an augmented decision: branch, then option, then action.
inline AhpDecision sample_ahp_decision(const PolicyParams& p, int o_prev, int s,
                                       RandomStream& rng) {
    AhpDecision d;
    const bool at_start = o_prev == OptionSet::dummy_index;
    const double beta = at_start ? 1.0 : beta_of(p, o_prev, s);
    d.stop = rng.uniform() < beta;
    d.option = d.stop ? rng.categorical(master_probs(p, s)) : o_prev;
    d.action = rng.categorical(option_action_probs(p, d.option, s));
    return d;
}

// ---------------------------------------------------------------------------
// materialized tables (categorical heads)
// ---------------------------------------------------------------------------

/// Evaluate the option heads at every state into explicit tables. Requires a
/// categorical action head; a Gaussian head has no finite action table.
inline OptionSet options_from(const PolicyParams& p) {
    if (p.shape.action_head != ActionHeadKind::categorical)
        throw std::logic_error("options_from: unsupported for non-categorical action heads");
    OptionSet set;
    for (int o = 0; o < p.shape.n_options; ++o) {
        Option opt;
        opt.pi.resize(p.shape.n_states, p.shape.n_actions);
        opt.beta.resize(p.shape.n_states);
        for (int s = 0; s < p.shape.n_states; ++s) {
            opt.pi.row(s) = option_action_probs(p, o, s).transpose();
            opt.beta[s] = beta_of(p, o, s);
        }
        set.options.push_back(std::move(opt));
    }
    return set;
}

inline MasterPolicy master_from(const PolicyParams& p) {
    MasterPolicy m;
    m.pi.resize(p.shape.n_states, p.shape.n_options);
    for (int s = 0; s < p.shape.n_states; ++s) m.pi.row(s) = master_probs(p, s).transpose();
    return m;
}

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

struct AdamConfig {
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-5;
    double grad_clip = 0.5;  // global-norm clip applied before the moments; <= 0 disables
};

struct AdamState {
    Eigen::VectorXd m, v;
    long long t = 0;

    explicit AdamState(int n = 0) { reset(n); }
    void reset(int n) {
        m = Eigen::VectorXd::Zero(n);
        v = Eigen::VectorXd::Zero(n);
        t = 0;
    }
};

/// One Adam step in place; returns the pre-clip gradient norm.
inline double adam_step(AdamState& st, const AdamConfig& cfg, Eigen::VectorXd& params,
                        Eigen::VectorXd grad) {
    if (params.size() != grad.size() || params.size() != st.m.size())
        throw std::invalid_argument("adam_step: size mismatch");
    const double norm = grad.norm();
    if (cfg.grad_clip > 0.0 && norm > cfg.grad_clip) grad *= cfg.grad_clip / norm;
    st.t += 1;
    st.m = cfg.beta1 * st.m + (1.0 - cfg.beta1) * grad;
    st.v = cfg.beta2 * st.v + (1.0 - cfg.beta2) * grad.cwiseProduct(grad);
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.t));
    for (int i = 0; i < params.size(); ++i) {
        const double mhat = st.m[i] / bc1;
        const double vhat = st.v[i] / bc2;
        params[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
    return norm;
}

// ---------------------------------------------------------------------------
// running observation normalizer (continuous encodings)
// ---------------------------------------------------------------------------

struct RunningNormalizer {
    long long count = 0;
    Eigen::VectorXd mean, m2;

    void observe(const Eigen::VectorXd& x) {
        if (count == 0) {
            mean = Eigen::VectorXd::Zero(x.size());
            m2 = Eigen::VectorXd::Zero(x.size());
        }
        count += 1;
        const Eigen::VectorXd delta = x - mean;
        mean += delta / static_cast<double>(count);
        m2 += delta.cwiseProduct(x - mean);
    }

    Eigen::VectorXd normalize(const Eigen::VectorXd& x) const {
        if (count == 0) return Eigen::VectorXd::Zero(x.size());
        Eigen::VectorXd sd = (m2 / static_cast<double>(count)).cwiseSqrt();
        for (int i = 0; i < sd.size(); ++i) sd[i] = std::max(sd[i], 1e-8);
        return (x - mean).cwiseQuotient(sd);
    }
};

/// Update the running statistics with x, then return the normalized value.
inline Eigen::VectorXd normalize_state(RunningNormalizer& n, const Eigen::VectorXd& x) {
    n.observe(x);
    return n.normalize(x);
}

// ---------------------------------------------------------------------------
// checkpoints: plain text, one value per line in flat-view order
// ---------------------------------------------------------------------------

inline void save_checkpoint(const std::string& path, const PolicyParams& p) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write checkpoint: " + path);
    out << "optionkit-checkpoint 1\n";
    out << "kind " << to_string(p.shape.kind) << "\n";
    out << "action_head "
        << (p.shape.action_head == ActionHeadKind::categorical ? "categorical" : "gaussian")
        << "\n";
    out << "n_states " << p.shape.n_states << "\n";
    out << "n_actions " << p.shape.n_actions << "\n";
    out << "n_options " << p.shape.n_options << "\n";
    out << "hidden " << p.shape.hidden << "\n";
    out << "activation " << (p.shape.activation == Activation::tanh_fn ? "tanh" : "relu") << "\n";
    char buf[40];
    out << "xi " << p.xi.size() << "\n";
    for (int i = 0; i < p.xi.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%.17g\n", p.xi[i]);
        out << buf;
    }
    out << "w " << p.w.size() << "\n";
    for (int i = 0; i < p.w.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%.17g\n", p.w[i]);
        out << buf;
    }
}

inline PolicyParams load_checkpoint(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read checkpoint: " + path);
    std::string tag;
    int version = 0;
    in >> tag >> version;
    if (tag != "optionkit-checkpoint" || version != 1)
        throw std::runtime_error("unrecognized checkpoint header in " + path);
    PolicyShapes shape;
    std::string key, val;
    in >> key >> val;
    shape.kind = param_kind_from(val);
    in >> key >> val;
    shape.action_head =
        val == "categorical" ? ActionHeadKind::categorical : ActionHeadKind::gaussian;
    in >> key >> shape.n_states >> key >> shape.n_actions >> key >> shape.n_options;
    in >> key >> shape.hidden >> key >> val;
    shape.activation = val == "tanh" ? Activation::tanh_fn : Activation::relu_fn;
    PolicyParams p;
    p.shape = shape;
    p.compute_layout();
    long n = 0;
    in >> key >> n;
    if (key != "xi" || n != p.xi_size()) throw std::runtime_error("checkpoint xi size mismatch");
    p.xi.resize(n);
    for (long i = 0; i < n; ++i) in >> p.xi[i];
    in >> key >> n;
    if (key != "w" || n != p.w_size()) throw std::runtime_error("checkpoint w size mismatch");
    p.w.resize(n);
    for (long i = 0; i < n; ++i) in >> p.w[i];
    if (!in) throw std::runtime_error("checkpoint truncated: " + path);
    return p;
}

}  // namespace optionkit
