// Copyright (C) 2026 The blockquant authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "blockquant/container.hpp"
#include "blockquant/model.hpp"

namespace bq {

struct EvalReport {
    double top1 = 0.0;
    double mean_ce = 0.0;
    int64_t samples = 0;
    double size_mb = 0.0;
    std::vector<std::pair<std::string, int>> layer_bits;  // 32 = unquantized
};

// Top-1 accuracy and mean task loss over a labeled dataset; quantizers are
// applied when a state is given.
EvalReport evaluate(const NetworkModel& model, const ModelQuantState* qs, const Dataset& ds,
                    int batch_size = 64);

// Weight storage in MB (2^20 bytes) at the assigned bitwidths.
double quantized_size_mb(const NetworkModel& model, const ModelQuantState* qs);

}  // namespace bq
