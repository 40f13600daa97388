// Copyright (C) 2026 The blockquant authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "blockquant/model.hpp"
#include "blockquant/tensor.hpp"

namespace bq {

// Tensor files: magic "BQTN", u32 rank, u32 extents[rank], f32 data.
// All fields little-endian; values stored at 32-bit precision.
void write_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor read_tensor(const std::filesystem::path& path);

// Labeled dataset: magic "BQTD", u32 sample count, u32 rank, u32 extents
// (per-sample shape), f32 data for all samples, then u32 labels.
struct Dataset {
    Tensor inputs;            // [count, ...sample_shape]
    std::vector<int> labels;  // length count
    int64_t count() const { return static_cast<int64_t>(labels.size()); }
};

void write_dataset(const std::filesystem::path& path, const Dataset& ds);
Dataset read_dataset(const std::filesystem::path& path);

// Model container: a directory holding manifest.json plus one tensor file per
// parameter. Quantization state rides along as extra tensors
// (<layer>.qstep, <layer>.vround, <layer>.astep) and manifest "quant" entries.
void save_model(const std::filesystem::path& dir, const NetworkModel& model,
                const ModelQuantState* qs = nullptr);

struct LoadedModel {
    NetworkModel model;
    ModelQuantState quant;  // empty layer states when the container is FP
};

LoadedModel load_model(const std::filesystem::path& dir);

}  // namespace bq
