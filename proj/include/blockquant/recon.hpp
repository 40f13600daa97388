// Copyright (C) 2026 The blockquant authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <string>
#include <vector>

#include "blockquant/calibration.hpp"
#include "blockquant/mixedprec.hpp"
#include "blockquant/model.hpp"

namespace bq {

// Bias-corrected Adam over one parameter tensor.
struct AdamState {
    Tensor m, v;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    int64_t t = 0;

    AdamState() = default;
    AdamState(const std::vector<int64_t>& shape, double lr_);
    void step(Tensor& params, const Tensor& grads);
};

struct ReconConfig {
    int iterations = 2000;
    int batch_size = 32;
    double lr_round = 1e-3;
    double lr_step = 4e-5;
    double lambda_reg = 0.01;
    double beta_start = 20.0;
    double beta_end = 2.0;
    double warmup = 0.2;  // regularizer off and step size frozen for this fraction
    Granularity granularity = Granularity::Block;
    int weight_bits = 8;
    std::vector<int> layer_bits;  // per-layer override; empty = uniform
    bool quantize_activations = false;
    int act_bits = 8;
    bool first_last_8bit = true;
    bool per_channel = false;
    bool propagate_quantized = true;  // false = FP-input ablation
    uint64_t seed = 1;

    void validate(const NetworkModel& model) const;
    int bits_for_layer(const NetworkModel& model, int layer) const;
    // Paper-scale schedule (2e4 iterations); everything else is shared.
    static ReconConfig paper_profile();
};

// Boundary tensors captured for one reconstruction unit. Targets and output
// gradients always come from the unquantized model at the task loss; inputs
// come from the quantized prefix when propagation is on.
struct UnitCache {
    int unit_index = 0;
    std::vector<Tensor> inputs;                     // per batch, raw at the unit boundary
    std::vector<std::map<int, Tensor>> aux_inputs;  // residual sources from outside the unit
    std::vector<Tensor> fp_outputs;                 // z at unit.last from the FP model
    std::vector<Tensor> out_grads;                  // dL/dz at unit.last from FP backward
};

// FP-model capture of inputs, outputs and task-loss gradients for one unit.
UnitCache collect_unit_io(const NetworkModel& model, const CalibrationSet& calib,
                          const ReconUnit& unit);

// Eq-style weighted reconstruction error: mean over the batch of
// sum_i g_i^2 dz_i^2 (batch dim = extent 0).
double fim_weighted_loss(const Tensor& dz, const Tensor& g);

// Activation-quantizer sites: block inputs and non-block layer inputs, never
// the raw network input.
bool act_site(const NetworkModel& model, int layer);

// Runs the quantized prefix (layers before unit.first) and captures the raw
// tensor feeding the unit plus any out-of-unit residual sources.
struct PrefixCapture {
    Tensor input;
    std::map<int, Tensor> aux;
};
PrefixCapture run_prefix(const NetworkModel& model, const Tensor& batch, const ModelQuantState& qs,
                         const ReconUnit& unit);

struct CalibLogRow {
    std::string unit;
    int iteration;
    double recon_loss;  // objective at the deployed (hard) rounding
    double reg_loss;
    double beta;
};

struct UnitReconResult {
    std::string unit;
    double init_loss = 0.0;   // hard objective before optimization (RTN rounding)
    double final_loss = 0.0;  // hard objective after optimization
    double binarized_fraction = 1.0;
};

// Initializes the weight quantizer of one layer (step-size scan + rounding
// variable at the fractional part).
void init_layer_quant(const NetworkModel& model, int layer, int bits, bool per_channel,
                      ModelQuantState& qs);

// Optimizes the rounding variables of all quantizable layers in the unit (and
// the activation step sizes at sites inside it) against the cached FP
// targets. Step sizes of weights stay frozen after initialization.
UnitReconResult reconstruct_unit(const NetworkModel& model, const ReconUnit& unit,
                                 const UnitCache& cache, const ReconConfig& cfg,
                                 ModelQuantState& qs, std::vector<CalibLogRow>* log = nullptr);

struct CalibrationResult {
    ModelQuantState quant;
    std::vector<UnitReconResult> units;
    std::vector<CalibLogRow> log;
    SensitivityTable sensitivity;  // measured against FP reference weights
};

// Whole-model calibration: units in topological order, quantized-input
// propagation, per-layer sensitivities afterwards (2-bit runs also measure
// the intra-block permutations).
CalibrationResult calibrate_model(const NetworkModel& model, const CalibrationSet& calib,
                                  const ReconConfig& cfg);

void write_calibration_csv(const std::filesystem::path& path, const std::vector<CalibLogRow>& rows);

}  // namespace bq
