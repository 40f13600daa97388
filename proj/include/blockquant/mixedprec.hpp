// Copyright (C) 2026 The blockquant authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "blockquant/calibration.hpp"
#include "blockquant/model.hpp"

namespace bq {

// Per-layer weight bitwidth vector, entries in {2, 4, 8}.
using BitConfig = std::vector<int>;

inline const std::vector<int>& search_bit_choices() {
    static const std::vector<int> kChoices{2, 4, 8};
    return kChoices;
}

// Loss-degradation lookups driving the search. `groups` mirrors the model's
// blocks plus singleton groups for non-block layers; off-diagonal entries are
// keyed by the bitmask of group members held at 2-bit.
struct SensitivityTable {
    std::vector<std::string> layer_names;
    std::vector<std::vector<int>> groups;          // layer indices per group
    std::vector<bool> group_has_offdiag;           // false => diagonal-only fallback
    std::map<std::pair<int, int>, double> diag;    // (layer, bits) -> degradation
    std::map<std::pair<int, uint64_t>, double> offdiag2;  // (group, member mask) -> degradation
    std::string reference = "int8";

    int layer_count() const { return static_cast<int>(layer_names.size()); }
    double diag_at(int layer, int bits) const;
    // Asserts diag(l,8) <= diag(l,4) <= diag(l,2) + slack for every layer.
    void check_monotone(double slack = 1e-6) const;
};

// Declarative stand-in for the accelerator simulator: per-layer latency by
// weight bitwidth at a fixed activation bitwidth, plus element counts for the
// size constraint.
struct HardwareTable {
    std::string constraint = "latency";  // "latency" | "size"
    int act_bits = 8;
    struct Layer {
        std::string id;
        int64_t elements = 0;
        std::map<int, double> latency_ms;
    };
    std::vector<Layer> layers;

    void validate() const;  // positive latency, nonincreasing with fewer bits
};

// Total latency (ms) or weight size (MB, 2^20 bytes) of a bit assignment.
double hardware_measure(const BitConfig& c, const HardwareTable& table, int act_bits = -1);

// Fitness proxy for L(w_hat, c): diagonal terms for non-2-bit layers plus the
// per-group joint term for each group's 2-bit subset.
double fitness(const BitConfig& c, const SensitivityTable& table);

// Uniform per-gene choice between two archive parents.
BitConfig crossover(const std::vector<BitConfig>& topk, std::mt19937_64& rng);
// Each gene independently resampled uniformly from {2,4,8} with probability p.
BitConfig mutate(const BitConfig& parent, double p, std::mt19937_64& rng);

struct GAConfig {
    int population = 50;
    int generations = 100;
    double mutation_p = 0.1;
    int topk = 10;
    uint64_t seed = 0;
};

struct GAResult {
    BitConfig best;
    double best_fitness = 0.0;
    double hardware = 0.0;
    std::vector<BitConfig> topk;
    struct GenLog {
        int generation;
        double best_fitness;
        double best_hardware;
    };
    std::vector<GenLog> log;
};

// Observes every individual admitted to a population (constraint audits).
using AdmitHook = std::function<void(const BitConfig&, double hardware)>;

// Genetic search under H(c) <= delta. Every admitted individual satisfies the
// constraint; deterministic for a fixed seed. Throws constraint_error when
// even the all-2-bit configuration exceeds delta, or when rejection sampling
// stalls for 10^4 consecutive draws.
GAResult ga_search(const SensitivityTable& table, const HardwareTable& hw, double delta,
                   const GAConfig& cfg, const AdmitHook* hook = nullptr);

// Full 3^n enumeration (n <= 12): the ground-truth constrained optimum.
std::pair<BitConfig, double> exhaustive_search(const SensitivityTable& table,
                                               const HardwareTable& hw, double delta);

// FIM-weighted degradation of the network output for a given quantized weight
// assignment, measured against the FP model on the calibration set.
struct FpOutputReference {
    std::vector<Tensor> logits;     // per batch
    std::vector<Tensor> out_grads;  // per batch, dL/dlogits
};
FpOutputReference fp_output_reference(const NetworkModel& model, const CalibrationSet& calib);

double output_degradation(const NetworkModel& model, const ModelQuantState& qs,
                          const CalibrationSet& calib, const FpOutputReference& ref);

// Canonical table from the three unified-precision calibrations: diag(l,b)
// puts layer l at bit b with everything else at the 8-bit calibration;
// offdiag2 puts a block's subset at 2-bit. Groups of more than
// `offdiag_cap` layers fall back to diagonal-only 2-bit terms.
SensitivityTable measure_sensitivities(const NetworkModel& model,
                                       const ModelQuantState& q2, const ModelQuantState& q4,
                                       const ModelQuantState& q8, const CalibrationSet& calib,
                                       int offdiag_cap = 6);

// Partial table measured against FP reference weights for the other layers;
// emitted by single-bitwidth calibration runs.
SensitivityTable measure_sensitivities_single(const NetworkModel& model, const ModelQuantState& qs,
                                              int bits, const CalibrationSet& calib,
                                              int offdiag_cap = 6);

// JSON round-trips (schemas documented in README).
void save_sensitivity(const std::filesystem::path& path, const SensitivityTable& t);
SensitivityTable load_sensitivity(const std::filesystem::path& path);
void save_hardware(const std::filesystem::path& path, const HardwareTable& t);
HardwareTable load_hardware(const std::filesystem::path& path);

}  // namespace bq
