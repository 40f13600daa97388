// Copyright (C) 2026 The blockquant authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "blockquant/model.hpp"
#include "blockquant/tensor.hpp"

namespace bq {

// All quantizable weights stacked into one flat vector; round-trip lossless.
struct FlatParams {
    std::vector<int> layer_ids;
    std::vector<std::pair<int64_t, int64_t>> spans;  // (offset, length) per layer
    int64_t dim = 0;

    static FlatParams build(const NetworkModel& model);
    Tensor flatten(const NetworkModel& model) const;
    void scatter(NetworkModel& model, const Tensor& theta) const;
};

// Mean task loss and its flat weight gradient on one batch.
double batch_loss(const NetworkModel& model, const Tensor& inputs, const std::vector<int>& labels);
Tensor batch_loss_grad(const NetworkModel& model, const FlatParams& fp, const Tensor& inputs,
                       const std::vector<int>& labels);

// Full d x d Hessian by central differences of exact gradients, symmetrized.
// Oracle scale only (d <= 200).
Tensor full_hessian_fd(const NetworkModel& model, const FlatParams& fp, const Tensor& inputs,
                       const std::vector<int>& labels, double h = 1e-4, bool symmetrize = true);

// Same differencing scheme over an arbitrary gradient function.
template <typename GradFn>
Tensor hessian_fd(GradFn&& grad_fn, const Tensor& theta, double h, bool symmetrize = true) {
    const int64_t d = theta.numel();
    Tensor hess({d, d});
    Tensor probe = theta;
    for (int64_t j = 0; j < d; ++j) {
        const double saved = probe[j];
        probe[j] = saved + h;
        const Tensor up = grad_fn(probe);
        probe[j] = saved - h;
        const Tensor down = grad_fn(probe);
        probe[j] = saved;
        for (int64_t i = 0; i < d; ++i) hess.at2(i, j) = (up[i] - down[i]) / (2.0 * h);
    }
    if (symmetrize) {
        for (int64_t i = 0; i < d; ++i) {
            for (int64_t j = i + 1; j < d; ++j) {
                const double v = 0.5 * (hess.at2(i, j) + hess.at2(j, i));
                hess.at2(i, j) = v;
                hess.at2(j, i) = v;
            }
        }
    }
    return hess;
}

// Closed-form softmax-CE output Hessian per sample: diag(p) - p p^T.
std::vector<Tensor> output_hessian(const NetworkModel& model, const Tensor& inputs);
Tensor output_hessian_from_logits_row(const Tensor& logits, int64_t row);

// Per-sample Jacobians of the network output w.r.t. the flat weights (m x d).
std::vector<Tensor> output_jacobians(const NetworkModel& model, const FlatParams& fp,
                                     const Tensor& inputs);

// E[(J dtheta)^T H^z (J dtheta)]: the Gauss-Newton quadratic form.
double gn_quadratic(const NetworkModel& model, const FlatParams& fp, const Tensor& inputs,
                    const Tensor& dtheta);

// Diagonal pre-activation Fisher information: squared dL/dz averaged over the
// batch, elementwise over the layer's output features.
Tensor fim_diag_preact(const NetworkModel& model, const Tensor& inputs,
                       const std::vector<int>& labels, int layer);

struct QuadraticRung {
    double eps = 0.0;
    double perturb_norm = 0.0;
    double quad_hessian = 0.0;      // dtheta^T H dtheta, finite-difference H
    double quad_gn = 0.0;           // dtheta^T G dtheta
    double quad_true_output = 0.0;  // E[dz_true^T H^z dz_true]
    double rel_gn_vs_hessian = 0.0;
    double rel_linearization = 0.0;  // |gn - true| / gn
};

struct QuadraticReport {
    double grad_inf_norm = 0.0;
    std::vector<QuadraticRung> rungs;
    bool monotone_decreasing = false;  // rel_linearization shrinks down the ladder
};

// Theorem check at a converged minimum: one random unit direction, scaled by
// each epsilon. Requires ||grad||_inf < grad_tol, else precondition_error.
QuadraticReport verify_theorem1(const NetworkModel& model, const Tensor& inputs,
                                const std::vector<int>& labels, const std::vector<double>& eps_ladder,
                                uint64_t seed, double grad_tol = 1e-4);

void save_quadratic_report(const std::filesystem::path& path, const QuadraticReport& report);

}  // namespace bq
