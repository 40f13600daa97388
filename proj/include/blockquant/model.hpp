// Copyright (C) 2026 The blockquant authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "blockquant/autograd.hpp"
#include "blockquant/quant.hpp"
#include "blockquant/tensor.hpp"

namespace bq {

enum class LayerKind { Linear, Conv2d };

struct BatchNormSpec {
    Tensor gamma, beta, mean, var;
    double epsilon = 1e-5;
};

struct LayerSpec {
    std::string name;
    LayerKind kind = LayerKind::Linear;
    Tensor weight;  // linear: [out, in]; conv: [K, C, kh, kw]
    Tensor bias;    // [out]
    int stride = 1;
    int padding = 0;
    std::optional<BatchNormSpec> bn;
    bool quantizable = true;
};

struct ResidualLink {
    int from = 0;  // the input of layer `from` is added to the
    int to = 0;    // pre-activation output of layer `to`
};

// Ordered layer list with block/stage partition metadata. The first layer is
// the stem, the last is the head; neither belongs to a block. Immutable after
// load, safe to share across threads.
struct NetworkModel {
    std::vector<LayerSpec> layers;
    std::vector<ResidualLink> residual_links;
    std::vector<std::pair<int, int>> blocks;  // inclusive layer index ranges
    std::vector<std::pair<int, int>> stages;  // inclusive block index ranges
    std::vector<int64_t> input_shape;         // per-sample
    int num_classes = 0;
    std::map<std::string, double> meta;

    int stem_id() const { return 0; }
    int head_id() const { return static_cast<int>(layers.size()) - 1; }
    int layer_count() const { return static_cast<int>(layers.size()); }
    int block_of(int layer) const;  // -1 when the layer is in no block
    int layer_index(const std::string& name) const;
    std::vector<int> quantizable_layers() const;

    // Structural invariants: block/stage consistency, residual links confined
    // to a single block, stem/head outside all blocks.
    void validate() const;
};

enum class Granularity { Layer, Block, Stage, Net };

Granularity granularity_from_string(const std::string& s);
std::string to_string(Granularity g);

// A contiguous layer range reconstructed as one unit.
struct ReconUnit {
    int first = 0;
    int last = 0;
    std::vector<int> quant_layers;  // quantizable layers inside the range
    bool contains(int layer) const { return layer >= first && layer <= last; }
};

// Splits the model into reconstruction units. Non-block layers (stem, head)
// always become singleton units regardless of granularity.
std::vector<ReconUnit> partition(const NetworkModel& model, Granularity g);

// Folds batchnorm statistics into the preceding convolution/linear weights
// and removes the bn records. Function-preserving.
NetworkModel fold_bn(const NetworkModel& model);

// Per-layer quantizer state, index-aligned with NetworkModel::layers.
struct LayerQuantState {
    bool enabled = false;
    QuantParams qp;
    AdaRoundState ada;
    bool has_act = false;  // quantizer on this layer's input activation
    double act_step = 0.0;
    int act_bits = 8;

    Tensor deploy_weight(const Tensor& fp_weight) const;
};

struct ModelQuantState {
    std::vector<LayerQuantState> layers;
    bool any() const;
};

// Hooks that swap weights / wrap layer inputs during a traced forward pass.
using WeightFn = std::function<Tensor(int layer, const Tensor& fp_weight)>;
using ActFn = std::function<NodeId(Graph&, int layer, NodeId x)>;

struct ForwardTrace {
    NodeId logits = -1;
    std::vector<NodeId> z;     // pre-activation per layer (post-bn, post-residual)
    std::vector<NodeId> x_in;  // node feeding each layer (post-flatten, post-act-quant)
};

// Builds the full forward pass on a graph. `input` is a batch node
// [N, ...input_shape]. Optional hooks substitute weights and wrap inputs.
ForwardTrace forward_trace(Graph& g, const NetworkModel& model, NodeId input,
                           const WeightFn* weight_fn = nullptr, const ActFn* act_fn = nullptr);

// Pre-activation output of layer `layer` including residual additions.
Tensor forward_to(const NetworkModel& model, const Tensor& input, int layer);

// Logits of the (optionally quantized) model on a batch.
Tensor forward_logits(const NetworkModel& model, const Tensor& input,
                      const ModelQuantState* qs = nullptr);

}  // namespace bq
