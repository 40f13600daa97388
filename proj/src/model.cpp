// Copyright (C) 2026 The blockquant authors
// SPDX-License-Identifier: Apache-2.0
#include "blockquant/model.hpp"

#include <algorithm>
#include <cmath>

#include "blockquant/errors.hpp"

namespace bq {

int NetworkModel::block_of(int layer) const {
    for (size_t b = 0; b < blocks.size(); ++b) {
        if (layer >= blocks[b].first && layer <= blocks[b].second) return static_cast<int>(b);
    }
    return -1;
}

int NetworkModel::layer_index(const std::string& name) const {
    for (size_t i = 0; i < layers.size(); ++i) {
        if (layers[i].name == name) return static_cast<int>(i);
    }
    throw usage_error("unknown layer name: " + name);
}

std::vector<int> NetworkModel::quantizable_layers() const {
    std::vector<int> out;
    for (size_t i = 0; i < layers.size(); ++i) {
        if (layers[i].quantizable) out.push_back(static_cast<int>(i));
    }
    return out;
}

void NetworkModel::validate() const {
    const int n = layer_count();
    if (n < 1) throw load_error("model has no layers");
    int prev_end = -1;
    for (auto [first, last] : blocks) {
        if (first < 0 || last >= n || first > last) throw load_error("block range out of bounds");
        if (first <= prev_end) throw load_error("blocks must be disjoint and ordered");
        if (first == stem_id() || last == head_id()) {
            throw load_error("stem and head layers cannot be block members");
        }
        prev_end = last;
    }
    if (!blocks.empty()) {
        // the body (first block through last block) must be fully covered so
        // stage/net unit ranges stay contiguous
        for (int l = blocks.front().first; l <= blocks.back().second; ++l) {
            if (block_of(l) < 0) throw load_error("gap between blocks at layer " + std::to_string(l));
        }
    }
    if (!stages.empty()) {
        int next = 0;
        for (auto [first, last] : stages) {
            if (first != next || last < first || last >= static_cast<int>(blocks.size())) {
                throw load_error("stages must partition the block list");
            }
            next = last + 1;
        }
        if (next != static_cast<int>(blocks.size())) throw load_error("stages do not cover all blocks");
    }
    for (const auto& link : residual_links) {
        if (link.from < 0 || link.to >= n || link.from > link.to) {
            throw load_error("residual link endpoints out of order");
        }
        const int bf = block_of(link.from);
        if (bf < 0 || bf != block_of(link.to)) {
            throw load_error("residual link crosses a block boundary (" +
                             layers[link.from].name + " -> " + layers[link.to].name + ")");
        }
    }
    for (const auto& layer : layers) {
        if (layer.kind == LayerKind::Linear && layer.weight.rank() != 2) {
            throw load_error("linear layer " + layer.name + " needs a rank-2 weight");
        }
        if (layer.kind == LayerKind::Conv2d && layer.weight.rank() != 4) {
            throw load_error("conv layer " + layer.name + " needs a rank-4 weight");
        }
        if (layer.bias.numel() != layer.weight.dim(0)) {
            throw load_error("bias length mismatch in layer " + layer.name);
        }
        if (layer.bn) {
            const int64_t ch = layer.weight.dim(0);
            if (layer.bn->gamma.numel() != ch || layer.bn->beta.numel() != ch ||
                layer.bn->mean.numel() != ch || layer.bn->var.numel() != ch) {
                throw load_error("bn channel count mismatch in layer " + layer.name);
            }
        }
    }
}

Granularity granularity_from_string(const std::string& s) {
    if (s == "layer") return Granularity::Layer;
    if (s == "block") return Granularity::Block;
    if (s == "stage") return Granularity::Stage;
    if (s == "net") return Granularity::Net;
    throw usage_error("unknown granularity: " + s);
}

std::string to_string(Granularity g) {
    switch (g) {
        case Granularity::Layer: return "layer";
        case Granularity::Block: return "block";
        case Granularity::Stage: return "stage";
        case Granularity::Net: return "net";
    }
    return "?";
}

namespace {
ReconUnit make_unit(const NetworkModel& m, int first, int last) {
    ReconUnit u;
    u.first = first;
    u.last = last;
    for (int l = first; l <= last; ++l) {
        if (m.layers[l].quantizable) u.quant_layers.push_back(l);
    }
    return u;
}
}  // namespace

std::vector<ReconUnit> partition(const NetworkModel& model, Granularity g) {
    model.validate();
    std::vector<ReconUnit> units;
    // body units according to the requested granularity
    switch (g) {
        case Granularity::Layer:
            for (auto [first, last] : model.blocks)
                for (int l = first; l <= last; ++l)
                    if (model.layers[l].quantizable) units.push_back(make_unit(model, l, l));
            break;
        case Granularity::Block:
            for (auto [first, last] : model.blocks) units.push_back(make_unit(model, first, last));
            break;
        case Granularity::Stage: {
            auto stages = model.stages;
            if (stages.empty() && !model.blocks.empty()) {
                stages.push_back({0, static_cast<int>(model.blocks.size()) - 1});
            }
            for (auto [bf, bl] : stages) {
                units.push_back(make_unit(model, model.blocks[bf].first, model.blocks[bl].second));
            }
            break;
        }
        case Granularity::Net:
            if (!model.blocks.empty()) {
                units.push_back(make_unit(model, model.blocks.front().first, model.blocks.back().second));
            }
            break;
    }
    // non-block layers (stem, head) are singleton units at every granularity
    for (int l = 0; l < model.layer_count(); ++l) {
        if (model.block_of(l) < 0 && model.layers[l].quantizable) {
            units.push_back(make_unit(model, l, l));
        }
    }
    std::sort(units.begin(), units.end(),
              [](const ReconUnit& a, const ReconUnit& b) { return a.first < b.first; });
    return units;
}

NetworkModel fold_bn(const NetworkModel& model) {
    NetworkModel out = model;
    for (auto& layer : out.layers) {
        if (!layer.bn) continue;
        const BatchNormSpec& bn = *layer.bn;
        const int64_t channels = layer.weight.dim(0);
        const int64_t stride = layer.weight.numel() / channels;
        for (int64_t c = 0; c < channels; ++c) {
            const double denom = bn.var[c] + bn.epsilon;
            if (denom <= 0.0) {
                throw numeric_error("fold_bn: nonpositive variance + epsilon in layer " + layer.name);
            }
            const double scale = bn.gamma[c] / std::sqrt(denom);
            double* w = layer.weight.data() + c * stride;
            for (int64_t i = 0; i < stride; ++i) w[i] *= scale;
            layer.bias[c] = scale * (layer.bias[c] - bn.mean[c]) + bn.beta[c];
        }
        layer.bn.reset();
    }
    return out;
}

Tensor LayerQuantState::deploy_weight(const Tensor& fp_weight) const {
    if (!enabled) return fp_weight;
    if (qp.mode == RoundingMode::AdaRound) return adaround_hard(fp_weight, qp, ada);
    return quantize_rtn(fp_weight, qp);
}

bool ModelQuantState::any() const {
    for (const auto& l : layers) {
        if (l.enabled || l.has_act) return true;
    }
    return false;
}

ForwardTrace forward_trace(Graph& g, const NetworkModel& model, NodeId input,
                           const WeightFn* weight_fn, const ActFn* act_fn) {
    const int n = model.layer_count();
    ForwardTrace trace;
    trace.z.assign(n, -1);
    trace.x_in.assign(n, -1);
    NodeId x = input;
    for (int l = 0; l < n; ++l) {
        const LayerSpec& layer = model.layers[l];
        if (layer.kind == LayerKind::Linear && g.value(x).rank() != 2) x = g.flatten_rows(x);
        if (act_fn) x = (*act_fn)(g, l, x);
        trace.x_in[l] = x;
        Tensor w = weight_fn ? (*weight_fn)(l, layer.weight) : layer.weight;
        NodeId wn = g.constant(std::move(w));
        NodeId bn_node = g.constant(layer.bias);
        NodeId z = layer.kind == LayerKind::Linear
                       ? g.linear(x, wn, bn_node)
                       : g.conv2d(x, wn, bn_node, layer.stride, layer.padding);
        if (layer.bn) {
            NodeId gamma = g.constant(layer.bn->gamma);
            NodeId beta = g.constant(layer.bn->beta);
            z = g.channel_affine(z, gamma, beta, layer.bn->mean, layer.bn->var, layer.bn->epsilon);
        }
        for (const auto& link : model.residual_links) {
            if (link.to == l) z = g.add(z, trace.x_in[link.from]);
        }
        trace.z[l] = z;
        x = l == n - 1 ? z : g.relu(z);
    }
    trace.logits = trace.z[n - 1];
    return trace;
}

Tensor forward_to(const NetworkModel& model, const Tensor& input, int layer) {
    if (layer < 0 || layer >= model.layer_count()) {
        throw usage_error("forward_to: invalid layer id " + std::to_string(layer));
    }
    Graph g;
    ForwardTrace trace = forward_trace(g, model, g.constant(input));
    return g.value(trace.z[layer]);
}

Tensor forward_logits(const NetworkModel& model, const Tensor& input, const ModelQuantState* qs) {
    Graph g;
    WeightFn wfn;
    ActFn afn;
    const WeightFn* wp = nullptr;
    const ActFn* ap = nullptr;
    if (qs && qs->any()) {
        wfn = [qs](int layer, const Tensor& w) { return qs->layers[layer].deploy_weight(w); };
        afn = [qs](Graph& gr, int layer, NodeId x) {
            const LayerQuantState& ls = qs->layers[layer];
            if (!ls.has_act || ls.act_step <= 0.0) return x;
            return gr.constant(act_fake_quant(gr.value(x), QuantParams::activations(ls.act_bits, ls.act_step)));
        };
        wp = &wfn;
        ap = &afn;
    }
    ForwardTrace trace = forward_trace(g, model, g.constant(input), wp, ap);
    return g.value(trace.logits);
}

}  // namespace bq
