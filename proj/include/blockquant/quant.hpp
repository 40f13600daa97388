// Copyright (C) 2026 The blockquant authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>

#include "blockquant/autograd.hpp"
#include "blockquant/tensor.hpp"

namespace bq {

enum class RoundingMode { Nearest, AdaRound };

// Uniform symmetric grid s * {qmin..qmax}. Weights use the signed range
// [-2^(b-1), 2^(b-1)-1]; post-ReLU activations use [0, 2^b - 1].
struct QuantParams {
    int bits = 8;
    Tensor step;  // [1] scalar or [out_channels] when per_channel
    bool unsigned_grid = false;
    bool per_channel = false;
    RoundingMode mode = RoundingMode::Nearest;

    int64_t qmin() const { return unsigned_grid ? 0 : -(int64_t{1} << (bits - 1)); }
    int64_t qmax() const {
        return unsigned_grid ? (int64_t{1} << bits) - 1 : (int64_t{1} << (bits - 1)) - 1;
    }
    double step_for(int64_t flat_index, int64_t channel_stride) const {
        return per_channel ? step[flat_index / channel_stride] : step[0];
    }

    static QuantParams weights(int bits, Tensor step, bool per_channel = false,
                               RoundingMode mode = RoundingMode::Nearest);
    static QuantParams activations(int bits, double step);
};

void validate_bits(int bits);

// Round-half-to-even, the tie rule used across the toolkit.
double round_half_even(double x);

// Continuous rounding state: sigma(v) in [0,1] picks floor (0) or ceil (1).
struct AdaRoundState {
    Tensor v;
    double zeta = 1.1;
    double gamma = -0.1;
    double lambda = 0.01;

    Tensor sigma() const;  // rectified sigmoid, elementwise
    double binarized_fraction(double tol = 0.01) const;
};

// Rounding-to-nearest onto the grid: s * clip(round(w/s), n, p).
Tensor quantize_rtn(const Tensor& w, const QuantParams& q);

// MSE-optimal step size via a deterministic 100-candidate scan over
// [0.2, 1.2] * max|w| / qmax.
double init_step_size(const Tensor& w, int bits, bool unsigned_grid = false);
// One independent scan per output channel (dim 0 of the weight).
Tensor init_step_size_per_channel(const Tensor& w, int bits);

// Soft quantization s * clip(floor(w/s) + sigma(v), n, p).
Tensor adaround_apply(const Tensor& w, const QuantParams& q, const AdaRoundState& state);
// Deployment rounding: sigma(v) snapped to its nearest binary value.
Tensor adaround_hard(const Tensor& w, const QuantParams& q, const AdaRoundState& state);
// Initializes v so that sigma(v) equals the fractional part of w/s, i.e. the
// soft weights start exactly at w (inside the clip range).
AdaRoundState adaround_init(const Tensor& w, const QuantParams& q);

// lambda * sum_i (1 - |2 sigma(v_i) - 1|^beta); zero iff fully binarized.
double adaround_reg(const AdaRoundState& state, double beta);

// Annealing temperature: beta_start through warmup, then half-cosine decay to
// beta_end. The regularizer itself is disabled while in warmup.
double beta_schedule(int iter, int total, double beta_start, double beta_end, double warmup);
bool reg_active(int iter, int total, double warmup);

// Unsigned fake quantization for post-ReLU activations.
Tensor act_fake_quant(const Tensor& x, const QuantParams& q);

// dL/ds for the learned activation step: per element
//   0                      if x <= 0
//   g * (xhat/s - x/s)     in range
//   g * qmax               when clipped high
double act_step_grad(const Tensor& x, const QuantParams& q, const Tensor& upstream);

// --- autograd hooks -------------------------------------------------------

// Soft-quantized weight node, differentiable in v (zero where the rectified
// sigmoid or the clip saturates).
NodeId graph_adaround_weight(Graph& g, const Tensor& w, const QuantParams& q, NodeId v_node,
                             double zeta, double gamma);

// Fake-quantized activation with straight-through x-gradient inside
// [0, qmax*s] and the learned-step gradient above on the scalar step node.
NodeId graph_act_fake_quant(Graph& g, NodeId x, NodeId step_node, int bits);

// Regularizer as a scalar graph node so one backward pass covers both terms.
NodeId graph_adaround_reg(Graph& g, NodeId v_node, const AdaRoundState& state, double beta);

}  // namespace bq
