// Copyright (C) 2026 The blockquant authors
// SPDX-License-Identifier: Apache-2.0
#include "blockquant/calibration.hpp"

#include <random>

#include "blockquant/errors.hpp"

namespace bq {

std::vector<size_t> seeded_sample_order(size_t total, uint64_t seed) {
    std::vector<size_t> order(total);
    for (size_t i = 0; i < total; ++i) order[i] = i;
    std::mt19937_64 rng(seed);
    for (size_t i = total; i > 1; --i) {
        const size_t j = static_cast<size_t>(rng() % i);
        std::swap(order[i - 1], order[j]);
    }
    return order;
}

namespace {
CalibrationSet batch_selected(const Dataset& ds, const std::vector<size_t>& picks, int batch_size) {
    if (batch_size < 1) throw usage_error("batch size must be positive");
    const int64_t per_sample = ds.inputs.numel() / ds.count();
    std::vector<int64_t> sample_shape(ds.inputs.shape().begin() + 1, ds.inputs.shape().end());
    CalibrationSet out;
    out.sample_count = static_cast<int64_t>(picks.size());
    for (size_t start = 0; start < picks.size(); start += static_cast<size_t>(batch_size)) {
        const size_t end = std::min(picks.size(), start + static_cast<size_t>(batch_size));
        std::vector<int64_t> shape{static_cast<int64_t>(end - start)};
        shape.insert(shape.end(), sample_shape.begin(), sample_shape.end());
        Tensor batch(shape);
        std::vector<int> labels;
        for (size_t i = start; i < end; ++i) {
            const size_t src = picks[i];
            const double* from = ds.inputs.data() + static_cast<int64_t>(src) * per_sample;
            double* to = batch.data() + static_cast<int64_t>(i - start) * per_sample;
            std::copy(from, from + per_sample, to);
            labels.push_back(ds.labels[src]);
        }
        out.batch_inputs.push_back(std::move(batch));
        out.batch_labels.push_back(std::move(labels));
    }
    return out;
}
}  // namespace

CalibrationSet batch_dataset(const Dataset& ds, int batch_size) {
    std::vector<size_t> picks(static_cast<size_t>(ds.count()));
    for (size_t i = 0; i < picks.size(); ++i) picks[i] = i;
    return batch_selected(ds, picks, batch_size);
}

CalibrationSet load_calibration(const std::filesystem::path& path, int64_t samples, uint64_t seed,
                                int batch_size) {
    const Dataset ds = read_dataset(path);
    if (samples > ds.count()) {
        throw load_error("requested " + std::to_string(samples) + " calibration samples but " +
                         path.string() + " holds " + std::to_string(ds.count()));
    }
    if (samples < 1) throw usage_error("calibration set must hold at least one sample");
    std::vector<size_t> order = seeded_sample_order(static_cast<size_t>(ds.count()), seed);
    order.resize(static_cast<size_t>(samples));
    CalibrationSet out = batch_selected(ds, order, batch_size);
    out.seed = seed;
    out.source = path.string();
    return out;
}

}  // namespace bq
