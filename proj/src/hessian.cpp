// Copyright (C) 2026 The blockquant authors
// SPDX-License-Identifier: Apache-2.0
#include "blockquant/hessian.hpp"

#include <cmath>
#include <fstream>
#include <random>

#include <json.hpp>

#include "blockquant/errors.hpp"

namespace bq {

FlatParams FlatParams::build(const NetworkModel& model) {
    FlatParams fp;
    int64_t offset = 0;
    for (int l = 0; l < model.layer_count(); ++l) {
        if (!model.layers[static_cast<size_t>(l)].quantizable) continue;
        const int64_t len = model.layers[static_cast<size_t>(l)].weight.numel();
        fp.layer_ids.push_back(l);
        fp.spans.push_back({offset, len});
        offset += len;
    }
    fp.dim = offset;
    return fp;
}

Tensor FlatParams::flatten(const NetworkModel& model) const {
    Tensor theta({dim});
    for (size_t i = 0; i < layer_ids.size(); ++i) {
        const Tensor& w = model.layers[static_cast<size_t>(layer_ids[i])].weight;
        std::copy(w.data(), w.data() + spans[i].second, theta.data() + spans[i].first);
    }
    return theta;
}

void FlatParams::scatter(NetworkModel& model, const Tensor& theta) const {
    if (theta.numel() != dim) throw usage_error("scatter: flat vector length mismatch");
    for (size_t i = 0; i < layer_ids.size(); ++i) {
        Tensor& w = model.layers[static_cast<size_t>(layer_ids[i])].weight;
        std::copy(theta.data() + spans[i].first, theta.data() + spans[i].first + spans[i].second,
                  w.data());
    }
}

double batch_loss(const NetworkModel& model, const Tensor& inputs, const std::vector<int>& labels) {
    Graph g;
    ForwardTrace trace = forward_trace(g, model, g.constant(inputs));
    return g.value(g.cross_entropy(trace.logits, labels))[0];
}

namespace {
// Forward pass with weights registered as trainable leaves; returns the node
// ids so callers can harvest weight gradients.
struct ParamTrace {
    ForwardTrace trace;
    std::vector<NodeId> weight_nodes;  // aligned with FlatParams::layer_ids
};

ParamTrace param_forward(Graph& g, const NetworkModel& model, const FlatParams& fp,
                         const Tensor& inputs) {
    ParamTrace pt;
    pt.weight_nodes.assign(fp.layer_ids.size(), -1);
    NodeId x = g.constant(inputs);
    const int n = model.layer_count();
    pt.trace.z.assign(n, -1);
    pt.trace.x_in.assign(n, -1);
    for (int l = 0; l < n; ++l) {
        const LayerSpec& layer = model.layers[static_cast<size_t>(l)];
        if (layer.kind == LayerKind::Linear && g.value(x).rank() != 2) x = g.flatten_rows(x);
        pt.trace.x_in[l] = x;
        NodeId wn;
        auto it = std::find(fp.layer_ids.begin(), fp.layer_ids.end(), l);
        if (it != fp.layer_ids.end()) {
            wn = g.param(layer.weight);
            pt.weight_nodes[static_cast<size_t>(it - fp.layer_ids.begin())] = wn;
        } else {
            wn = g.constant(layer.weight);
        }
        NodeId bn = g.constant(layer.bias);
        NodeId z = layer.kind == LayerKind::Linear ? g.linear(x, wn, bn)
                                                   : g.conv2d(x, wn, bn, layer.stride, layer.padding);
        if (layer.bn) {
            NodeId gamma = g.constant(layer.bn->gamma);
            NodeId beta = g.constant(layer.bn->beta);
            z = g.channel_affine(z, gamma, beta, layer.bn->mean, layer.bn->var, layer.bn->epsilon);
        }
        for (const auto& link : model.residual_links) {
            if (link.to == l) z = g.add(z, pt.trace.x_in[link.from]);
        }
        pt.trace.z[l] = z;
        x = l == n - 1 ? z : g.relu(z);
    }
    pt.trace.logits = pt.trace.z[n - 1];
    return pt;
}

Tensor harvest_flat_grad(Graph& g, const FlatParams& fp, const std::vector<NodeId>& weight_nodes) {
    Tensor flat({fp.dim});
    for (size_t i = 0; i < weight_nodes.size(); ++i) {
        if (!g.has_grad(weight_nodes[i])) continue;
        const Tensor& wg = g.grad(weight_nodes[i]);
        std::copy(wg.data(), wg.data() + fp.spans[i].second, flat.data() + fp.spans[i].first);
    }
    return flat;
}
}  // namespace

Tensor batch_loss_grad(const NetworkModel& model, const FlatParams& fp, const Tensor& inputs,
                       const std::vector<int>& labels) {
    Graph g;
    ParamTrace pt = param_forward(g, model, fp, inputs);
    g.backward(g.cross_entropy(pt.trace.logits, labels));
    return harvest_flat_grad(g, fp, pt.weight_nodes);
}

Tensor full_hessian_fd(const NetworkModel& model, const FlatParams& fp, const Tensor& inputs,
                       const std::vector<int>& labels, double h, bool symmetrize) {
    if (fp.dim > 200) {
        throw usage_error("full_hessian_fd is an oracle for d <= 200 (got d = " +
                          std::to_string(fp.dim) + ")");
    }
    NetworkModel work = model;
    const Tensor theta = fp.flatten(work);
    return hessian_fd(
        [&](const Tensor& probe) {
            fp.scatter(work, probe);
            return batch_loss_grad(work, fp, inputs, labels);
        },
        theta, h, symmetrize);
}

Tensor output_hessian_from_logits_row(const Tensor& logits, int64_t row) {
    const int64_t m = logits.dim(1);
    std::vector<double> p(static_cast<size_t>(m));
    double mx = logits.at2(row, 0);
    for (int64_t j = 1; j < m; ++j) mx = std::max(mx, logits.at2(row, j));
    double denom = 0.0;
    for (int64_t j = 0; j < m; ++j) {
        p[static_cast<size_t>(j)] = std::exp(logits.at2(row, j) - mx);
        denom += p[static_cast<size_t>(j)];
    }
    for (auto& v : p) v /= denom;
    Tensor hz({m, m});
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t j = 0; j < m; ++j) {
            hz.at2(i, j) = (i == j ? p[static_cast<size_t>(i)] : 0.0) -
                           p[static_cast<size_t>(i)] * p[static_cast<size_t>(j)];
        }
    }
    return hz;
}

std::vector<Tensor> output_hessian(const NetworkModel& model, const Tensor& inputs) {
    if (model.num_classes > 32) throw usage_error("output_hessian is an oracle for m <= 32 classes");
    const Tensor logits = forward_logits(model, inputs);
    std::vector<Tensor> out;
    for (int64_t s = 0; s < logits.dim(0); ++s) out.push_back(output_hessian_from_logits_row(logits, s));
    return out;
}

std::vector<Tensor> output_jacobians(const NetworkModel& model, const FlatParams& fp,
                                     const Tensor& inputs) {
    const int64_t batch = inputs.dim(0);
    std::vector<int64_t> sample_shape = inputs.shape();
    sample_shape[0] = 1;
    const int64_t per_sample = inputs.numel() / batch;
    std::vector<Tensor> jacobians;
    for (int64_t s = 0; s < batch; ++s) {
        Tensor sample(sample_shape);
        std::copy(inputs.data() + s * per_sample, inputs.data() + (s + 1) * per_sample, sample.data());
        Graph g;
        ParamTrace pt = param_forward(g, model, fp, sample);
        const int64_t m = g.value(pt.trace.logits).dim(1);
        Tensor jac({m, fp.dim});
        for (int64_t k = 0; k < m; ++k) {
            g.zero_grads();
            Tensor seed({1, m});
            seed.at2(0, k) = 1.0;
            g.backward_seed(pt.trace.logits, seed);
            const Tensor row = harvest_flat_grad(g, fp, pt.weight_nodes);
            std::copy(row.data(), row.data() + fp.dim, jac.data() + k * fp.dim);
        }
        jacobians.push_back(std::move(jac));
    }
    return jacobians;
}

namespace {
double gn_quadratic_from(const std::vector<Tensor>& jacobians, const std::vector<Tensor>& hz,
                         const Tensor& dtheta) {
    double acc = 0.0;
    for (size_t s = 0; s < jacobians.size(); ++s) {
        const Tensor& jac = jacobians[s];
        const int64_t m = jac.dim(0);
        std::vector<double> dz(static_cast<size_t>(m), 0.0);
        for (int64_t k = 0; k < m; ++k) {
            double v = 0.0;
            for (int64_t i = 0; i < dtheta.numel(); ++i) v += jac.at2(k, i) * dtheta[i];
            dz[static_cast<size_t>(k)] = v;
        }
        for (int64_t i = 0; i < m; ++i)
            for (int64_t j = 0; j < m; ++j)
                acc += dz[static_cast<size_t>(i)] * hz[s].at2(i, j) * dz[static_cast<size_t>(j)];
    }
    return acc / static_cast<double>(jacobians.size());
}
}  // namespace

double gn_quadratic(const NetworkModel& model, const FlatParams& fp, const Tensor& inputs,
                    const Tensor& dtheta) {
    if (dtheta.numel() != fp.dim) throw usage_error("gn_quadratic: dtheta length mismatch");
    const std::vector<Tensor> jacobians = output_jacobians(model, fp, inputs);
    const std::vector<Tensor> hz = output_hessian(model, inputs);
    return gn_quadratic_from(jacobians, hz, dtheta);
}

Tensor fim_diag_preact(const NetworkModel& model, const Tensor& inputs,
                       const std::vector<int>& labels, int layer) {
    if (layer < 0 || layer >= model.layer_count()) throw usage_error("fim_diag_preact: bad layer");
    Graph g;
    ForwardTrace trace = forward_trace(g, model, g.constant(inputs));
    g.backward(g.cross_entropy(trace.logits, labels));
    const Tensor& gz = g.grad(trace.z[layer]);
    const int64_t batch = gz.dim(0);
    std::vector<int64_t> shape(gz.shape().begin() + 1, gz.shape().end());
    if (shape.empty()) shape.push_back(1);
    Tensor out(shape);
    const int64_t inner = out.numel();
    for (int64_t s = 0; s < batch; ++s) {
        for (int64_t i = 0; i < inner; ++i) {
            const double v = gz[s * inner + i];
            out[i] += v * v;
        }
    }
    for (int64_t i = 0; i < inner; ++i) out[i] /= static_cast<double>(batch);
    return out;
}

QuadraticReport verify_theorem1(const NetworkModel& model, const Tensor& inputs,
                                const std::vector<int>& labels, const std::vector<double>& eps_ladder,
                                uint64_t seed, double grad_tol) {
    const FlatParams fp = FlatParams::build(model);
    QuadraticReport report;
    report.grad_inf_norm = batch_loss_grad(model, fp, inputs, labels).max_abs();
    if (report.grad_inf_norm >= grad_tol) {
        throw precondition_error("model is not converged: ||grad||_inf = " +
                                 std::to_string(report.grad_inf_norm) + " >= " +
                                 std::to_string(grad_tol));
    }
    std::mt19937_64 rng(seed);
    Tensor direction = Tensor::randn({fp.dim}, rng);
    double norm = 0.0;
    for (int64_t i = 0; i < direction.numel(); ++i) norm += direction[i] * direction[i];
    norm = std::sqrt(norm);
    for (int64_t i = 0; i < direction.numel(); ++i) direction[i] /= norm;

    const Tensor hess = full_hessian_fd(model, fp, inputs, labels);
    const std::vector<Tensor> jacobians = output_jacobians(model, fp, inputs);
    const std::vector<Tensor> hz = output_hessian(model, inputs);
    const Tensor base_logits = forward_logits(model, inputs);
    const Tensor theta = fp.flatten(model);

    NetworkModel work = model;
    for (double eps : eps_ladder) {
        QuadraticRung rung;
        rung.eps = eps;
        rung.perturb_norm = eps;
        Tensor dtheta = scale(direction, eps);
        // dtheta^T H dtheta
        double quad_h = 0.0;
        for (int64_t i = 0; i < fp.dim; ++i) {
            double row = 0.0;
            for (int64_t j = 0; j < fp.dim; ++j) row += hess.at2(i, j) * dtheta[j];
            quad_h += dtheta[i] * row;
        }
        rung.quad_hessian = quad_h;
        rung.quad_gn = gn_quadratic_from(jacobians, hz, dtheta);
        // true output change
        Tensor perturbed = theta;
        for (int64_t i = 0; i < fp.dim; ++i) perturbed[i] += dtheta[i];
        fp.scatter(work, perturbed);
        const Tensor new_logits = forward_logits(work, inputs);
        const int64_t m = base_logits.dim(1);
        double quad_true = 0.0;
        for (int64_t s = 0; s < base_logits.dim(0); ++s) {
            std::vector<double> dz(static_cast<size_t>(m));
            for (int64_t k = 0; k < m; ++k) {
                dz[static_cast<size_t>(k)] = new_logits.at2(s, k) - base_logits.at2(s, k);
            }
            for (int64_t i = 0; i < m; ++i)
                for (int64_t j = 0; j < m; ++j)
                    quad_true += dz[static_cast<size_t>(i)] * hz[static_cast<size_t>(s)].at2(i, j) *
                                 dz[static_cast<size_t>(j)];
        }
        quad_true /= static_cast<double>(base_logits.dim(0));
        rung.quad_true_output = quad_true;
        const double tiny = 1e-30;
        rung.rel_gn_vs_hessian = std::fabs(quad_h - rung.quad_gn) / std::max(std::fabs(quad_h), tiny);
        rung.rel_linearization =
            std::fabs(rung.quad_gn - quad_true) / std::max(std::fabs(rung.quad_gn), tiny);
        report.rungs.push_back(rung);
    }
    fp.scatter(work, theta);
    report.monotone_decreasing = true;
    for (size_t i = 1; i < report.rungs.size(); ++i) {
        if (report.rungs[i].rel_linearization >= report.rungs[i - 1].rel_linearization) {
            report.monotone_decreasing = false;
        }
    }
    return report;
}

void save_quadratic_report(const std::filesystem::path& path, const QuadraticReport& report) {
    nlohmann::json j;
    j["grad_inf_norm"] = report.grad_inf_norm;
    j["monotone_decreasing"] = report.monotone_decreasing;
    nlohmann::json rungs = nlohmann::json::array();
    for (const auto& r : report.rungs) {
        rungs.push_back({{"eps", r.eps},
                         {"perturb_norm", r.perturb_norm},
                         {"quad_hessian", r.quad_hessian},
                         {"quad_gn", r.quad_gn},
                         {"quad_true_output", r.quad_true_output},
                         {"rel_gn_vs_hessian", r.rel_gn_vs_hessian},
                         {"rel_linearization", r.rel_linearization}});
    }
    j["rungs"] = rungs;
    std::ofstream os(path);
    if (!os) throw load_error("cannot write " + path.string());
    os << j.dump(2) << "\n";
}

}  // namespace bq
