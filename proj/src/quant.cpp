// Copyright (C) 2026 The blockquant authors
// SPDX-License-Identifier: Apache-2.0
#include "blockquant/quant.hpp"

#include <cmath>

#include "blockquant/errors.hpp"

namespace bq {

void validate_bits(int bits) {
    if (bits != 2 && bits != 3 && bits != 4 && bits != 8) {
        throw usage_error("unsupported bitwidth " + std::to_string(bits));
    }
}

double round_half_even(double x) { return std::nearbyint(x); }

QuantParams QuantParams::weights(int bits, Tensor step, bool per_channel, RoundingMode mode) {
    validate_bits(bits);
    QuantParams q;
    q.bits = bits;
    q.step = std::move(step);
    q.unsigned_grid = false;
    q.per_channel = per_channel;
    q.mode = mode;
    for (int64_t i = 0; i < q.step.numel(); ++i) {
        if (q.step[i] <= 0.0) throw usage_error("step size must be positive");
    }
    return q;
}

QuantParams QuantParams::activations(int bits, double step) {
    validate_bits(bits);
    if (step <= 0.0) throw usage_error("step size must be positive");
    QuantParams q;
    q.bits = bits;
    q.step = Tensor::scalar(step);
    q.unsigned_grid = true;
    return q;
}

namespace {
int64_t channel_stride_of(const Tensor& w, const QuantParams& q) {
    if (!q.per_channel) return w.numel();
    if (w.rank() < 1 || q.step.numel() != w.dim(0)) {
        throw usage_error("per-channel step length must match output channels");
    }
    return w.numel() / w.dim(0);
}
}  // namespace

Tensor quantize_rtn(const Tensor& w, const QuantParams& q) {
    for (int64_t i = 0; i < q.step.numel(); ++i) {
        if (q.step[i] <= 0.0) throw usage_error("quantize_rtn: step size must be positive");
    }
    const int64_t stride = channel_stride_of(w, q);
    const double lo = static_cast<double>(q.qmin());
    const double hi = static_cast<double>(q.qmax());
    Tensor out = w;
    for (int64_t i = 0; i < out.numel(); ++i) {
        const double s = q.step_for(i, stride);
        const double k = std::clamp(round_half_even(out[i] / s), lo, hi);
        out[i] = s * k;
    }
    return out;
}

namespace {
double scan_step(const double* data, int64_t count, int bits, bool unsigned_grid) {
    double max_abs = 0.0;
    for (int64_t i = 0; i < count; ++i) max_abs = std::max(max_abs, std::fabs(data[i]));
    if (max_abs <= 0.0) throw usage_error("init_step_size: all-zero tensor");
    const double lo = unsigned_grid ? 0.0 : -static_cast<double>(int64_t{1} << (bits - 1));
    const double hi = unsigned_grid ? static_cast<double>((int64_t{1} << bits) - 1)
                                    : static_cast<double>((int64_t{1} << (bits - 1)) - 1);
    const double base = max_abs / hi;
    double best_s = base;
    double best_err = std::numeric_limits<double>::infinity();
    // 100 candidates spanning (0.2, 1.2] in exact 0.01 steps, so step sizes
    // at simple fractions of max|w|/qmax are representable exactly
    constexpr int kCandidates = 100;
    for (int c = 0; c < kCandidates; ++c) {
        const double f = 0.2 + 0.01 * static_cast<double>(c + 1);
        const double s = f * base;
        double err = 0.0;
        for (int64_t i = 0; i < count; ++i) {
            const double k = std::clamp(round_half_even(data[i] / s), lo, hi);
            const double d = s * k - data[i];
            err += d * d;
        }
        if (err < best_err) {
            best_err = err;
            best_s = s;
        }
    }
    return best_s;
}
}  // namespace

double init_step_size(const Tensor& w, int bits, bool unsigned_grid) {
    validate_bits(bits);
    return scan_step(w.data(), w.numel(), bits, unsigned_grid);
}

Tensor init_step_size_per_channel(const Tensor& w, int bits) {
    validate_bits(bits);
    if (w.rank() < 1) throw usage_error("per-channel step needs rank >= 1");
    const int64_t channels = w.dim(0);
    const int64_t stride = w.numel() / channels;
    Tensor steps({channels});
    for (int64_t c = 0; c < channels; ++c) {
        steps[c] = scan_step(w.data() + c * stride, stride, bits, false);
    }
    return steps;
}

namespace {
inline double rect_sigmoid(double v, double zeta, double gamma) {
    const double sig = 1.0 / (1.0 + std::exp(-v));
    return std::clamp(sig * (zeta - gamma) + gamma, 0.0, 1.0);
}

inline double rect_sigmoid_deriv(double v, double zeta, double gamma) {
    const double sig = 1.0 / (1.0 + std::exp(-v));
    const double raw = sig * (zeta - gamma) + gamma;
    if (raw <= 0.0 || raw >= 1.0) return 0.0;
    return (zeta - gamma) * sig * (1.0 - sig);
}
}  // namespace

Tensor AdaRoundState::sigma() const {
    Tensor out = v;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = rect_sigmoid(out[i], zeta, gamma);
    return out;
}

double AdaRoundState::binarized_fraction(double tol) const {
    int64_t hits = 0;
    for (int64_t i = 0; i < v.numel(); ++i) {
        const double s = rect_sigmoid(v[i], zeta, gamma);
        if (s <= tol || s >= 1.0 - tol) ++hits;
    }
    return v.numel() == 0 ? 1.0 : static_cast<double>(hits) / static_cast<double>(v.numel());
}

AdaRoundState adaround_init(const Tensor& w, const QuantParams& q) {
    const int64_t stride = channel_stride_of(w, q);
    AdaRoundState state;
    state.v = Tensor(w.shape());
    for (int64_t i = 0; i < w.numel(); ++i) {
        const double s = q.step_for(i, stride);
        const double frac = w[i] / s - std::floor(w[i] / s);
        // invert the rectified sigmoid; frac in [0,1) keeps it off saturation
        const double target = (frac - state.gamma) / (state.zeta - state.gamma);
        state.v[i] = std::log(target / (1.0 - target));
    }
    return state;
}

namespace {
Tensor adaround_common(const Tensor& w, const QuantParams& q, const AdaRoundState& state, bool hard) {
    if (!w.same_shape(state.v)) throw usage_error("adaround: v shape must match weight");
    const int64_t stride = channel_stride_of(w, q);
    const double lo = static_cast<double>(q.qmin());
    const double hi = static_cast<double>(q.qmax());
    Tensor out = w;
    for (int64_t i = 0; i < out.numel(); ++i) {
        const double s = q.step_for(i, stride);
        double r = rect_sigmoid(state.v[i], state.zeta, state.gamma);
        if (hard) r = r >= 0.5 ? 1.0 : 0.0;
        const double t = std::floor(out[i] / s) + r;
        out[i] = s * std::clamp(t, lo, hi);
    }
    return out;
}
}  // namespace

Tensor adaround_apply(const Tensor& w, const QuantParams& q, const AdaRoundState& state) {
    return adaround_common(w, q, state, false);
}

Tensor adaround_hard(const Tensor& w, const QuantParams& q, const AdaRoundState& state) {
    return adaround_common(w, q, state, true);
}

double adaround_reg(const AdaRoundState& state, double beta) {
    double acc = 0.0;
    for (int64_t i = 0; i < state.v.numel(); ++i) {
        const double s = rect_sigmoid(state.v[i], state.zeta, state.gamma);
        acc += 1.0 - std::pow(std::fabs(2.0 * s - 1.0), beta);
    }
    return state.lambda * acc;
}

double beta_schedule(int iter, int total, double beta_start, double beta_end, double warmup) {
    if (iter < 0 || iter >= total) throw usage_error("beta_schedule: iter out of range");
    const int warm = static_cast<int>(warmup * total);
    if (iter < warm) return beta_start;
    const double span = std::max(1, total - warm);
    const double tau = static_cast<double>(iter - warm) / span;
    return beta_end + (beta_start - beta_end) * 0.5 * (1.0 + std::cos(M_PI * tau));
}

bool reg_active(int iter, int total, double warmup) {
    return iter >= static_cast<int>(warmup * total);
}

Tensor act_fake_quant(const Tensor& x, const QuantParams& q) {
    if (q.step[0] <= 0.0) throw usage_error("act_fake_quant: step size must be positive");
    const double s = q.step[0];
    const double hi = static_cast<double>(q.qmax());
    Tensor out = x;
    for (int64_t i = 0; i < out.numel(); ++i) {
        out[i] = s * std::clamp(round_half_even(out[i] / s), 0.0, hi);
    }
    return out;
}

double act_step_grad(const Tensor& x, const QuantParams& q, const Tensor& upstream) {
    if (!x.same_shape(upstream)) throw usage_error("act_step_grad: shape mismatch");
    const double s = q.step[0];
    const double hi = static_cast<double>(q.qmax());
    double acc = 0.0;
    for (int64_t i = 0; i < x.numel(); ++i) {
        if (x[i] <= 0.0) continue;
        const double k = round_half_even(x[i] / s);
        if (k > hi) {
            acc += upstream[i] * hi;
        } else {
            const double kc = std::max(k, 0.0);
            acc += upstream[i] * (kc - x[i] / s);
        }
    }
    return acc;
}

NodeId graph_adaround_weight(Graph& g, const Tensor& w, const QuantParams& q, NodeId v_node,
                             double zeta, double gamma) {
    const Tensor& v = g.value(v_node);
    if (!w.same_shape(v)) throw usage_error("graph_adaround_weight: v shape must match weight");
    const int64_t stride = channel_stride_of(w, q);
    const double lo = static_cast<double>(q.qmin());
    const double hi = static_cast<double>(q.qmax());
    Tensor out = w;
    for (int64_t i = 0; i < out.numel(); ++i) {
        const double s = q.step_for(i, stride);
        const double t = std::floor(out[i] / s) + rect_sigmoid(v[i], zeta, gamma);
        out[i] = s * std::clamp(t, lo, hi);
    }
    return g.custom(std::move(out), {v_node},
                    [v_node, w, q, stride, lo, hi, zeta, gamma](Graph& gr, NodeId self) {
                        const Tensor& go = gr.grad(self);
                        const Tensor& v = gr.value(v_node);
                        Tensor& gv = gr.grad(v_node);
                        for (int64_t i = 0; i < gv.numel(); ++i) {
                            const double s = q.step_for(i, stride);
                            const double t = std::floor(w[i] / s) + rect_sigmoid(v[i], zeta, gamma);
                            if (t < lo || t > hi) continue;  // clip saturated
                            gv[i] += go[i] * s * rect_sigmoid_deriv(v[i], zeta, gamma);
                        }
                    });
}

NodeId graph_act_fake_quant(Graph& g, NodeId x, NodeId step_node, int bits) {
    validate_bits(bits);
    const Tensor& xv = g.value(x);
    const double s = g.value(step_node)[0];
    if (s <= 0.0) throw usage_error("graph_act_fake_quant: step size must be positive");
    const double hi = static_cast<double>((int64_t{1} << bits) - 1);
    Tensor out = xv;
    for (int64_t i = 0; i < out.numel(); ++i) {
        out[i] = s * std::clamp(round_half_even(out[i] / s), 0.0, hi);
    }
    return g.custom(std::move(out), {x, step_node}, [x, step_node, s, hi](Graph& gr, NodeId self) {
        const Tensor& go = gr.grad(self);
        const Tensor& xv = gr.value(x);
        Tensor& gx = gr.grad(x);
        Tensor& gs = gr.grad(step_node);
        double s_acc = 0.0;
        for (int64_t i = 0; i < xv.numel(); ++i) {
            const double xi = xv[i];
            if (xi >= 0.0 && xi <= hi * s) gx[i] += go[i];  // straight-through
            if (xi <= 0.0) continue;
            const double k = round_half_even(xi / s);
            s_acc += k > hi ? go[i] * hi : go[i] * (std::max(k, 0.0) - xi / s);
        }
        gs[0] += s_acc;
    });
}

NodeId graph_adaround_reg(Graph& g, NodeId v_node, const AdaRoundState& state, double beta) {
    const Tensor& v = g.value(v_node);
    double acc = 0.0;
    for (int64_t i = 0; i < v.numel(); ++i) {
        const double sv = rect_sigmoid(v[i], state.zeta, state.gamma);
        acc += 1.0 - std::pow(std::fabs(2.0 * sv - 1.0), beta);
    }
    const double lambda = state.lambda;
    const double zeta = state.zeta;
    const double gamma = state.gamma;
    return g.custom(Tensor::scalar(lambda * acc), {v_node},
                    [v_node, lambda, zeta, gamma, beta](Graph& gr, NodeId self) {
                        const double go = gr.grad(self)[0];
                        const Tensor& v = gr.value(v_node);
                        Tensor& gv = gr.grad(v_node);
                        for (int64_t i = 0; i < gv.numel(); ++i) {
                            const double sv = rect_sigmoid(v[i], zeta, gamma);
                            const double u = 2.0 * sv - 1.0;
                            if (u == 0.0) continue;
                            const double d = -beta * std::pow(std::fabs(u), beta - 1.0) *
                                             (u > 0.0 ? 1.0 : -1.0) * 2.0 *
                                             rect_sigmoid_deriv(v[i], zeta, gamma);
                            gv[i] += go * lambda * d;
                        }
                    });
}

}  // namespace bq
