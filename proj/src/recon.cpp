// Copyright (C) 2026 The blockquant authors
// SPDX-License-Identifier: Apache-2.0
#include "blockquant/recon.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include "blockquant/errors.hpp"

namespace bq {

AdamState::AdamState(const std::vector<int64_t>& shape, double lr_) : lr(lr_) {
    m = Tensor(shape);
    v = Tensor(shape);
}

void AdamState::step(Tensor& params, const Tensor& grads) {
    if (!params.same_shape(m) || !grads.same_shape(m)) {
        throw usage_error("adam_step: shape mismatch");
    }
    ++t;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (int64_t i = 0; i < params.numel(); ++i) {
        m[i] = beta1 * m[i] + (1.0 - beta1) * grads[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * grads[i] * grads[i];
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        params[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
}

void ReconConfig::validate(const NetworkModel& model) const {
    if (iterations <= 0) throw usage_error("iterations must be positive");
    if (batch_size <= 0) throw usage_error("batch size must be positive");
    if (lr_round <= 0.0 || lr_step <= 0.0) throw usage_error("learning rates must be positive");
    if (warmup < 0.0 || warmup >= 1.0) throw usage_error("warmup must lie in [0, 1)");
    validate_bits(weight_bits);
    validate_bits(act_bits);
    if (!layer_bits.empty()) {
        if (layer_bits.size() != static_cast<size_t>(model.layer_count())) {
            throw usage_error("layer_bits length must match the layer count");
        }
        for (int b : layer_bits) validate_bits(b);
    }
}

int ReconConfig::bits_for_layer(const NetworkModel& model, int layer) const {
    if (!layer_bits.empty()) return layer_bits[static_cast<size_t>(layer)];
    if (first_last_8bit && (layer == model.stem_id() || layer == model.head_id())) return 8;
    return weight_bits;
}

ReconConfig ReconConfig::paper_profile() {
    ReconConfig cfg;
    cfg.iterations = 20000;
    return cfg;
}

double fim_weighted_loss(const Tensor& dz, const Tensor& g) {
    if (!dz.same_shape(g)) throw usage_error("fim_weighted_loss: shape mismatch");
    double acc = 0.0;
    for (int64_t i = 0; i < dz.numel(); ++i) {
        const double w = g[i] * dz[i];
        acc += w * w;
    }
    return acc / static_cast<double>(dz.dim(0));
}

bool act_site(const NetworkModel& model, int layer) {
    if (layer <= 0) return false;  // the raw network input is never quantized
    const int block = model.block_of(layer);
    if (block < 0) return true;  // head and other non-block layers
    return model.blocks[static_cast<size_t>(block)].first == layer;
}

namespace {

// Residual sources the unit cannot compute internally: link targets inside
// the range whose source input is produced strictly before unit.first.
std::vector<int> external_sources(const NetworkModel& model, const ReconUnit& unit) {
    std::vector<int> out;
    for (const auto& link : model.residual_links) {
        if (link.to >= unit.first && link.to <= unit.last && link.from < unit.first) {
            out.push_back(link.from);
        }
    }
    return out;
}

WeightFn deploy_weight_fn(const ModelQuantState& qs) {
    return [&qs](int layer, const Tensor& w) { return qs.layers[static_cast<size_t>(layer)].deploy_weight(w); };
}

ActFn deploy_act_fn(const ModelQuantState& qs) {
    return [&qs](Graph& g, int layer, NodeId x) {
        const LayerQuantState& ls = qs.layers[static_cast<size_t>(layer)];
        if (!ls.has_act || ls.act_step <= 0.0) return x;
        return g.constant(act_fake_quant(g.value(x), QuantParams::activations(ls.act_bits, ls.act_step)));
    };
}

}  // namespace

PrefixCapture run_prefix(const NetworkModel& model, const Tensor& batch, const ModelQuantState& qs,
                         const ReconUnit& unit) {
    Graph g;
    const std::vector<int> aux = external_sources(model, unit);
    PrefixCapture cap;
    NodeId x = g.constant(batch);
    const WeightFn wfn = deploy_weight_fn(qs);
    const ActFn afn = deploy_act_fn(qs);
    for (int l = 0; l < unit.first; ++l) {
        const LayerSpec& layer = model.layers[static_cast<size_t>(l)];
        if (layer.kind == LayerKind::Linear && g.value(x).rank() != 2) x = g.flatten_rows(x);
        x = afn(g, l, x);
        if (std::find(aux.begin(), aux.end(), l) != aux.end()) cap.aux[l] = g.value(x);
        Tensor w = wfn(l, layer.weight);
        NodeId wn = g.constant(std::move(w));
        NodeId bn = g.constant(layer.bias);
        NodeId z = layer.kind == LayerKind::Linear ? g.linear(x, wn, bn)
                                                   : g.conv2d(x, wn, bn, layer.stride, layer.padding);
        if (layer.bn) {
            NodeId gamma = g.constant(layer.bn->gamma);
            NodeId beta = g.constant(layer.bn->beta);
            z = g.channel_affine(z, gamma, beta, layer.bn->mean, layer.bn->var, layer.bn->epsilon);
        }
        // links always resolve within the prefix because they cannot cross
        // the unit boundary forward
        for (const auto& link : model.residual_links) {
            if (link.to == l && cap.aux.count(link.from)) {
                z = g.add(z, g.constant(cap.aux[link.from]));
            } else if (link.to == l) {
                throw usage_error("run_prefix: unresolved residual source");
            }
        }
        x = g.relu(z);
    }
    // flatten for a linear unit head before capture
    if (model.layers[static_cast<size_t>(unit.first)].kind == LayerKind::Linear &&
        g.value(x).rank() != 2) {
        x = g.flatten_rows(x);
    }
    cap.input = g.value(x);
    return cap;
}

UnitCache collect_unit_io(const NetworkModel& model, const CalibrationSet& calib,
                          const ReconUnit& unit) {
    if (calib.batch_count() == 0) throw usage_error("collect_unit_io: empty calibration set");
    UnitCache cache;
    cache.unit_index = unit.first;
    const std::vector<int> aux = external_sources(model, unit);
    for (int64_t b = 0; b < calib.batch_count(); ++b) {
        Graph g;
        ForwardTrace trace = forward_trace(g, model, g.constant(calib.batch_inputs[b]));
        NodeId loss = g.cross_entropy(trace.logits, calib.batch_labels[b]);
        g.backward(loss);
        cache.inputs.push_back(g.value(trace.x_in[unit.first]));
        std::map<int, Tensor> aux_map;
        for (int src : aux) aux_map[src] = g.value(trace.x_in[src]);
        cache.aux_inputs.push_back(std::move(aux_map));
        cache.fp_outputs.push_back(g.value(trace.z[unit.last]));
        cache.out_grads.push_back(g.grad(trace.z[unit.last]));
    }
    return cache;
}

void init_layer_quant(const NetworkModel& model, int layer, int bits, bool per_channel,
                      ModelQuantState& qs) {
    const Tensor& w = model.layers[static_cast<size_t>(layer)].weight;
    Tensor step = per_channel ? init_step_size_per_channel(w, bits)
                              : Tensor::scalar(init_step_size(w, bits));
    LayerQuantState& ls = qs.layers[static_cast<size_t>(layer)];
    ls.qp = QuantParams::weights(bits, std::move(step), per_channel, RoundingMode::AdaRound);
    ls.ada = adaround_init(w, ls.qp);
    ls.enabled = true;
}

namespace {

// One evaluation of the unit forward. In soft mode the rounding variables and
// activation steps are trainable graph parameters; in hard mode the deployed
// quantization is baked in as constants.
struct UnitEval {
    NodeId z_out = -1;
    std::map<int, NodeId> v_params;     // layer -> rounding node
    std::map<int, NodeId> act_params;   // layer -> step node
};

UnitEval unit_forward(Graph& g, const NetworkModel& model, const ReconUnit& unit,
                      const ModelQuantState& qs, const Tensor& input,
                      const std::map<int, Tensor>& aux, bool soft, bool act_quant) {
    UnitEval eval;
    std::map<int, NodeId> x_in;  // actual input node per in-range layer
    NodeId x = g.constant(input);
    for (int l = unit.first; l <= unit.last; ++l) {
        const LayerSpec& layer = model.layers[static_cast<size_t>(l)];
        if (layer.kind == LayerKind::Linear && g.value(x).rank() != 2) x = g.flatten_rows(x);
        const LayerQuantState& ls = qs.layers[static_cast<size_t>(l)];
        if (act_quant && ls.has_act && ls.act_step > 0.0) {
            if (soft) {
                NodeId s = g.param(Tensor::scalar(ls.act_step));
                eval.act_params[l] = s;
                x = graph_act_fake_quant(g, x, s, ls.act_bits);
            } else {
                x = g.constant(
                    act_fake_quant(g.value(x), QuantParams::activations(ls.act_bits, ls.act_step)));
            }
        }
        x_in[l] = x;
        NodeId wn;
        if (ls.enabled && soft) {
            NodeId v = g.param(ls.ada.v);
            eval.v_params[l] = v;
            wn = graph_adaround_weight(g, layer.weight, ls.qp, v, ls.ada.zeta, ls.ada.gamma);
        } else {
            wn = g.constant(ls.deploy_weight(layer.weight));
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
            if (link.to != l) continue;
            if (link.from >= unit.first) {
                z = g.add(z, x_in.at(link.from));
            } else {
                const auto it = aux.find(link.from);
                if (it == aux.end()) throw usage_error("unit_forward: missing residual capture");
                z = g.add(z, g.constant(it->second));
            }
        }
        if (l == unit.last) {
            eval.z_out = z;
        } else {
            x = g.relu(z);
        }
    }
    return eval;
}

double hard_unit_loss(const NetworkModel& model, const ReconUnit& unit, const ModelQuantState& qs,
                      const UnitCache& cache, size_t batch, bool act_quant) {
    Graph g;
    UnitEval eval = unit_forward(g, model, unit, qs, cache.inputs[batch], cache.aux_inputs[batch],
                                 /*soft=*/false, act_quant);
    const Tensor dz = bq::sub(g.value(eval.z_out), cache.fp_outputs[batch]);
    return fim_weighted_loss(dz, cache.out_grads[batch]);
}

double hard_unit_loss_all(const NetworkModel& model, const ReconUnit& unit,
                          const ModelQuantState& qs, const UnitCache& cache, bool act_quant) {
    double acc = 0.0;
    int64_t samples = 0;
    for (size_t b = 0; b < cache.inputs.size(); ++b) {
        const int64_t n = cache.inputs[b].dim(0);
        acc += hard_unit_loss(model, unit, qs, cache, b, act_quant) * static_cast<double>(n);
        samples += n;
    }
    return acc / static_cast<double>(samples);
}

std::string unit_label(const NetworkModel& model, const ReconUnit& unit) {
    if (unit.first == unit.last) return model.layers[static_cast<size_t>(unit.first)].name;
    return model.layers[static_cast<size_t>(unit.first)].name + ".." +
           model.layers[static_cast<size_t>(unit.last)].name;
}

}  // namespace

UnitReconResult reconstruct_unit(const NetworkModel& model, const ReconUnit& unit,
                                 const UnitCache& cache, const ReconConfig& cfg,
                                 ModelQuantState& qs, std::vector<CalibLogRow>* log) {
    cfg.validate(model);
    if (cache.inputs.empty()) throw usage_error("reconstruct_unit: empty cache");
    for (int l : unit.quant_layers) {
        if (!qs.layers[static_cast<size_t>(l)].enabled) {
            throw precondition_error("reconstruct_unit: step sizes not initialized for layer " +
                                     model.layers[static_cast<size_t>(l)].name);
        }
    }
    const std::string label = unit_label(model, unit);
    const bool act_quant = cfg.quantize_activations;

    UnitReconResult result;
    result.unit = label;
    result.init_loss = hard_unit_loss_all(model, unit, qs, cache, act_quant);

    // optimizer state per trainable tensor
    std::map<int, AdamState> v_opt;
    std::map<int, AdamState> s_opt;
    for (int l : unit.quant_layers) {
        v_opt.emplace(l, AdamState(qs.layers[static_cast<size_t>(l)].ada.v.shape(), cfg.lr_round));
    }
    for (int l = unit.first; l <= unit.last; ++l) {
        if (act_quant && qs.layers[static_cast<size_t>(l)].has_act) {
            s_opt.emplace(l, AdamState({1}, cfg.lr_step));
        }
    }

    std::mt19937_64 rng(cfg.seed ^ (0x9E3779B97F4A7C15ULL * (static_cast<uint64_t>(unit.first) + 1)));
    const size_t batches = cache.inputs.size();
    std::vector<size_t> order(batches);
    for (size_t i = 0; i < batches; ++i) order[i] = i;
    size_t cursor = batches;  // trigger reshuffle on first use

    for (int iter = 0; iter < cfg.iterations; ++iter) {
        if (cursor >= batches) {
            for (size_t i = batches; i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
            cursor = 0;
        }
        const size_t b = order[cursor++];
        const double beta = beta_schedule(iter, cfg.iterations, cfg.beta_start, cfg.beta_end, cfg.warmup);
        const bool with_reg = reg_active(iter, cfg.iterations, cfg.warmup);
        double reg_value = 0.0;
        try {
            Graph g;
            UnitEval eval = unit_forward(g, model, unit, qs, cache.inputs[b], cache.aux_inputs[b],
                                         /*soft=*/true, act_quant);
            NodeId dz = g.sub(eval.z_out, g.constant(cache.fp_outputs[b]));
            NodeId weighted = g.mul(dz, g.constant(cache.out_grads[b]));
            NodeId loss = g.scale(g.sum_squares(weighted), 1.0 / static_cast<double>(cache.inputs[b].dim(0)));
            if (with_reg) {
                for (auto& [l, v_node] : eval.v_params) {
                    NodeId reg = graph_adaround_reg(g, v_node, qs.layers[static_cast<size_t>(l)].ada, beta);
                    reg_value += g.value(reg)[0];
                    loss = g.add(loss, reg);
                }
            }
            g.backward(loss);
            for (auto& [l, v_node] : eval.v_params) {
                if (!g.has_grad(v_node)) continue;
                v_opt.at(l).step(qs.layers[static_cast<size_t>(l)].ada.v, g.grad(v_node));
            }
            if (with_reg) {
                for (auto& [l, s_node] : eval.act_params) {
                    if (!g.has_grad(s_node)) continue;
                    Tensor s = Tensor::scalar(qs.layers[static_cast<size_t>(l)].act_step);
                    s_opt.at(l).step(s, g.grad(s_node));
                    qs.layers[static_cast<size_t>(l)].act_step = std::max(s[0], 1e-12);
                }
            }
        } catch (const numeric_error& e) {
            throw numeric_error("unit " + label + " diverged at iteration " + std::to_string(iter) +
                                ": " + e.what());
        }
        if (log) {
            log->push_back({label, iter, hard_unit_loss(model, unit, qs, cache, b, act_quant),
                            reg_value, beta});
        }
    }

    result.final_loss = hard_unit_loss_all(model, unit, qs, cache, act_quant);
    double binarized = 1.0;
    for (int l : unit.quant_layers) {
        binarized = std::min(binarized, qs.layers[static_cast<size_t>(l)].ada.binarized_fraction());
    }
    result.binarized_fraction = binarized;
    return result;
}

CalibrationResult calibrate_model(const NetworkModel& model, const CalibrationSet& calib,
                                  const ReconConfig& cfg) {
    cfg.validate(model);
    if (calib.batch_count() == 0) throw usage_error("calibrate_model: empty calibration set");
    for (const auto& layer : model.layers) {
        if (layer.bn) {
            throw precondition_error("calibrate_model requires a BN-folded model (layer " +
                                     layer.name + " still carries bn)");
        }
    }
    const std::vector<ReconUnit> units = partition(model, cfg.granularity);

    // FP targets and gradients, captured once up front
    std::vector<UnitCache> caches;
    caches.reserve(units.size());
    for (const auto& unit : units) caches.push_back(collect_unit_io(model, calib, unit));

    CalibrationResult result;
    result.quant.layers.assign(model.layers.size(), LayerQuantState{});

    for (size_t u = 0; u < units.size(); ++u) {
        const ReconUnit& unit = units[u];
        UnitCache& cache = caches[u];
        if (cfg.propagate_quantized && u > 0) {
            for (int64_t b = 0; b < calib.batch_count(); ++b) {
                PrefixCapture cap = run_prefix(model, calib.batch_inputs[b], result.quant, unit);
                cache.inputs[static_cast<size_t>(b)] = std::move(cap.input);
                cache.aux_inputs[static_cast<size_t>(b)] = std::move(cap.aux);
            }
        }
        for (int l : unit.quant_layers) {
            init_layer_quant(model, l, cfg.bits_for_layer(model, l), cfg.per_channel, result.quant);
        }
        if (cfg.quantize_activations) {
            for (int l = unit.first; l <= unit.last; ++l) {
                if (!act_site(model, l)) continue;
                LayerQuantState& ls = result.quant.layers[static_cast<size_t>(l)];
                double step;
                if (l == unit.first) {
                    // the unit input capture is pre-quantizer, so the scan
                    // sees the raw boundary activations
                    step = init_step_size(cache.inputs[0], cfg.act_bits, /*unsigned_grid=*/true);
                } else {
                    Graph g;
                    UnitEval ev = unit_forward(g, model, {unit.first, l - 1, {}}, result.quant,
                                               cache.inputs[0], cache.aux_inputs[0], false, true);
                    Tensor boundary = g.value(ev.z_out);
                    for (int64_t i = 0; i < boundary.numel(); ++i) {
                        boundary[i] = std::max(boundary[i], 0.0);
                    }
                    step = init_step_size(boundary, cfg.act_bits, /*unsigned_grid=*/true);
                }
                ls.has_act = true;
                ls.act_bits = cfg.act_bits;
                ls.act_step = step;
            }
        }
        result.units.push_back(reconstruct_unit(model, unit, cache, cfg, result.quant, &result.log));
    }

    const int sense_bits = cfg.layer_bits.empty() ? cfg.weight_bits : 0;
    if (sense_bits != 0) {
        result.sensitivity =
            measure_sensitivities_single(model, result.quant, sense_bits, calib);
    }
    return result;
}

void write_calibration_csv(const std::filesystem::path& path, const std::vector<CalibLogRow>& rows) {
    std::ofstream os(path);
    if (!os) throw load_error("cannot write " + path.string());
    os << "unit,iteration,recon_loss,reg_loss,beta\n";
    char buf[160];
    for (const auto& row : rows) {
        std::snprintf(buf, sizeof(buf), "%s,%d,%.12g,%.12g,%.12g\n", row.unit.c_str(),
                      row.iteration, row.recon_loss, row.reg_loss, row.beta);
        os << buf;
    }
}

}  // namespace bq
