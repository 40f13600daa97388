// Copyright (C) 2026 The blockquant authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <vector>

#include "blockquant/tensor.hpp"

namespace bq {

using NodeId = int32_t;

struct Conv2dDims {
    int64_t batch, in_ch, in_h, in_w;
    int64_t out_ch, k_h, k_w;
    int64_t out_h, out_w;
    int stride, padding;
};

Conv2dDims conv2d_dims(const std::vector<int64_t>& x_shape, const std::vector<int64_t>& w_shape,
                       int stride, int padding);

// Patch-gather lowering: writes the (C*kh*kw) x (Ho*Wo) column matrix for one sample.
void im2col(const Tensor& x, int64_t sample, const Conv2dDims& d, double* cols);
// Scatter-add transpose of im2col, accumulates into the sample's input gradient.
void col2im_add(const double* cols, int64_t sample, const Conv2dDims& d, Tensor& x_grad);

// Tape of operation records in topological (creation) order. Reverse-mode
// differentiation walks the tape backwards, accumulating gradients additively
// over fan-out. Values are immutable once produced; one Graph per forward pass.
class Graph {
public:
    // Leaf holding a constant value.
    NodeId constant(Tensor value);
    // Leaf flagged trainable; receives a gradient after backward().
    NodeId param(Tensor value);

    const Tensor& value(NodeId id) const { return nodes_.at(static_cast<size_t>(id)).value; }
    bool is_trainable(NodeId id) const { return nodes_.at(static_cast<size_t>(id)).trainable; }
    size_t size() const { return nodes_.size(); }

    // Gradient of the last backward pass; zero tensor if the node was not reached.
    Tensor& grad(NodeId id);
    bool has_grad(NodeId id) const { return nodes_.at(static_cast<size_t>(id)).has_grad; }

    NodeId matmul(NodeId a, NodeId b);
    // x[N,in] * w[out,in]^T + bias[out] broadcast over rows.
    NodeId linear(NodeId x, NodeId w, NodeId bias);
    // Cross-correlation, bias per output channel (pass -1 to skip bias).
    NodeId conv2d(NodeId x, NodeId w, NodeId bias, int stride, int padding);
    NodeId relu(NodeId x);
    NodeId add(NodeId a, NodeId b);
    NodeId sub(NodeId a, NodeId b);
    NodeId mul(NodeId a, NodeId b);
    NodeId scale(NodeId a, double factor);
    NodeId sum(NodeId a);
    NodeId sum_squares(NodeId a);
    // Mean over the batch of -log softmax(logits)[label], max-stabilized.
    NodeId cross_entropy(NodeId logits, std::vector<int> labels);
    // Frozen-statistics batchnorm: per-channel affine with trainable gamma/beta.
    NodeId channel_affine(NodeId x, NodeId gamma, NodeId beta, Tensor mean, Tensor var, double eps);
    NodeId flatten_rows(NodeId x);  // [N, ...] -> [N, rest]

    // Escape hatch for ops with bespoke gradients (fake quantizers live here).
    // The callback reads grad(self) and accumulates into its parents' grads.
    NodeId custom(Tensor value, std::vector<NodeId> parents,
                  std::function<void(Graph&, NodeId)> backward);

    // Reverse accumulation from a scalar root (seeds d(root)/d(root) = 1).
    void backward(NodeId root);
    // Seeded variant for Jacobian rows: d(seed . node)/d(leaves).
    void backward_seed(NodeId node, const Tensor& seed);

    void zero_grads();

private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool trainable = false;
        bool has_grad = false;
        std::function<void(Graph&, NodeId)> backward;
    };

    NodeId push(Tensor value, std::function<void(Graph&, NodeId)> backward = nullptr);
    void run_backward(NodeId root);

    std::vector<Node> nodes_;
};

}  // namespace bq
