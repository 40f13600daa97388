// Copyright (C) 2026 The blockquant authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>

#include "blockquant/container.hpp"
#include "blockquant/model.hpp"

namespace bq {

// Gaussian class clusters in R^dim; labels are balanced round-robin.
struct ClusterSpec {
    int classes = 4;
    int64_t dim = 10;
    int64_t samples = 256;
    double center_std = 2.0;
    double noise = 0.8;
};
Dataset synth_clusters(const ClusterSpec& spec, uint64_t center_seed, uint64_t sample_seed);

// Class-specific smoothed spatial templates with amplitude jitter and noise.
struct ImageSpec {
    int classes = 4;
    int64_t channels = 3;
    int64_t height = 8;
    int64_t width = 8;
    int64_t samples = 1024;
    double noise = 0.45;
    double amp_lo = 0.7;
    double amp_hi = 1.3;
};
Dataset synth_images(const ImageSpec& spec, uint64_t template_seed, uint64_t sample_seed);

// Plain MLP: dims.front() inputs, dims.back() classes; every hidden layer is
// its own single-layer block.
NetworkModel build_mlp(const std::vector<int64_t>& dims, uint64_t seed);

// Stem conv, four two-conv residual blocks in two stages, linear head.
NetworkModel build_tiny_resnet(int channels, int classes, uint64_t seed);

struct TrainConfig {
    int steps = 2000;
    int batch = 32;
    double lr = 3e-3;
    uint64_t seed = 7;
};
// Minibatch Adam on cross-entropy over all weights and biases; returns the
// final minibatch loss.
double train_model(NetworkModel& model, const Dataset& train, const TrainConfig& cfg);

// Max-abs weight gradient of the mean loss over the full dataset.
double weight_grad_inf(const NetworkModel& model, const Dataset& ds);

// Full-batch Adam with a decaying learning-rate ladder until the weight
// gradient drops below `target`; returns the achieved norm.
double polish_to_convergence(NetworkModel& model, const Dataset& ds, double target, uint64_t seed);

// Wraps each trained conv as conv+bn with synthetic statistics such that
// folding reproduces the trained weights exactly.
void attach_synthetic_bn(NetworkModel& model, uint64_t seed);

// Writes the full fixture tree: tiny-mlp (converged + unconverged variants),
// tiny-resnet with batchnorm, calibration/test datasets, hardware tables.
void make_fixtures(const std::filesystem::path& dir, uint64_t seed);

}  // namespace bq
