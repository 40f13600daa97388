// Copyright (C) 2026 The blockquant authors
// SPDX-License-Identifier: Apache-2.0
#include "blockquant/evalutil.hpp"

#include <cmath>

#include "blockquant/errors.hpp"

namespace bq {

double quantized_size_mb(const NetworkModel& model, const ModelQuantState* qs) {
    double bytes = 0.0;
    for (int l = 0; l < model.layer_count(); ++l) {
        const int bits = qs && qs->layers[static_cast<size_t>(l)].enabled
                             ? qs->layers[static_cast<size_t>(l)].qp.bits
                             : 32;
        bytes += static_cast<double>(model.layers[static_cast<size_t>(l)].weight.numel()) * bits / 8.0;
    }
    return bytes / (1024.0 * 1024.0);
}

EvalReport evaluate(const NetworkModel& model, const ModelQuantState* qs, const Dataset& ds,
                    int batch_size) {
    if (ds.count() == 0) throw usage_error("evaluate: empty dataset");
    std::vector<int64_t> sample_shape(ds.inputs.shape().begin() + 1, ds.inputs.shape().end());
    {
        if (sample_shape != model.input_shape) {
            throw usage_error("evaluate: dataset sample shape does not match model input");
        }
    }
    const int64_t per_sample = ds.inputs.numel() / ds.count();
    EvalReport report;
    double ce_sum = 0.0;
    int64_t correct = 0;
    for (int64_t start = 0; start < ds.count(); start += batch_size) {
        const int64_t end = std::min(ds.count(), start + batch_size);
        std::vector<int64_t> shape{end - start};
        shape.insert(shape.end(), sample_shape.begin(), sample_shape.end());
        Tensor batch(shape);
        std::copy(ds.inputs.data() + start * per_sample, ds.inputs.data() + end * per_sample,
                  batch.data());
        const Tensor logits = forward_logits(model, batch, qs);
        const int64_t m = logits.dim(1);
        for (int64_t i = 0; i < end - start; ++i) {
            const int label = ds.labels[static_cast<size_t>(start + i)];
            if (label < 0 || label >= m) throw usage_error("evaluate: label out of range");
            int64_t arg = 0;
            double best = logits.at2(i, 0);
            double mx = best;
            for (int64_t j = 1; j < m; ++j) {
                const double v = logits.at2(i, j);
                if (v > best) {
                    best = v;
                    arg = j;
                }
                mx = std::max(mx, v);
            }
            double denom = 0.0;
            for (int64_t j = 0; j < m; ++j) denom += std::exp(logits.at2(i, j) - mx);
            ce_sum += std::log(denom) - (logits.at2(i, label) - mx);
            if (arg == label) ++correct;
        }
    }
    report.samples = ds.count();
    report.top1 = static_cast<double>(correct) / static_cast<double>(ds.count());
    report.mean_ce = ce_sum / static_cast<double>(ds.count());
    report.size_mb = quantized_size_mb(model, qs);
    for (int l = 0; l < model.layer_count(); ++l) {
        const int bits = qs && qs->layers[static_cast<size_t>(l)].enabled
                             ? qs->layers[static_cast<size_t>(l)].qp.bits
                             : 32;
        report.layer_bits.push_back({model.layers[static_cast<size_t>(l)].name, bits});
    }
    return report;
}

}  // namespace bq
