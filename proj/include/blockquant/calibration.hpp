// Copyright (C) 2026 The blockquant authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "blockquant/container.hpp"
#include "blockquant/tensor.hpp"

namespace bq {

// Batched labeled inputs used to drive calibration and sensitivity passes.
struct CalibrationSet {
    std::vector<Tensor> batch_inputs;          // each [B, ...sample_shape]
    std::vector<std::vector<int>> batch_labels;
    int64_t sample_count = 0;
    uint64_t seed = 0;
    std::string source;

    int64_t batch_count() const { return static_cast<int64_t>(batch_inputs.size()); }
};

// Splits a dataset into ceil(count/batch_size) batches in order.
CalibrationSet batch_dataset(const Dataset& ds, int batch_size);

// Seeded uniform subsample without replacement; order fixed by the seed.
// The shuffle is a plain Fisher-Yates with j = rng() % (i + 1) so independent
// reimplementations can reproduce it exactly.
CalibrationSet load_calibration(const std::filesystem::path& path, int64_t samples, uint64_t seed,
                                int batch_size);

std::vector<size_t> seeded_sample_order(size_t total, uint64_t seed);

}  // namespace bq
