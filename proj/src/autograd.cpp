// Copyright (C) 2026 The blockquant authors
// SPDX-License-Identifier: Apache-2.0
#include "blockquant/autograd.hpp"

#include <cmath>
#include <utility>

#include "blockquant/errors.hpp"

namespace bq {

Conv2dDims conv2d_dims(const std::vector<int64_t>& x_shape, const std::vector<int64_t>& w_shape,
                       int stride, int padding) {
    if (x_shape.size() != 4 || w_shape.size() != 4) {
        throw usage_error("conv2d: input and kernel must be rank-4");
    }
    if (stride < 1 || padding < 0) throw usage_error("conv2d: bad stride/padding");
    Conv2dDims d;
    d.batch = x_shape[0];
    d.in_ch = x_shape[1];
    d.in_h = x_shape[2];
    d.in_w = x_shape[3];
    d.out_ch = w_shape[0];
    d.k_h = w_shape[2];
    d.k_w = w_shape[3];
    d.stride = stride;
    d.padding = padding;
    if (w_shape[1] != d.in_ch) throw usage_error("conv2d: channel counts differ");
    const int64_t num_h = d.in_h + 2 * padding - d.k_h;
    const int64_t num_w = d.in_w + 2 * padding - d.k_w;
    if (num_h < 0 || num_w < 0 || num_h % stride != 0 || num_w % stride != 0) {
        throw usage_error("conv2d: non-integral output extent");
    }
    d.out_h = num_h / stride + 1;
    d.out_w = num_w / stride + 1;
    return d;
}

void im2col(const Tensor& x, int64_t sample, const Conv2dDims& d, double* cols) {
    const int64_t patch = d.in_ch * d.k_h * d.k_w;
    const int64_t out_hw = d.out_h * d.out_w;
    const double* base = x.data() + sample * d.in_ch * d.in_h * d.in_w;
    for (int64_t c = 0; c < d.in_ch; ++c) {
        for (int64_t ki = 0; ki < d.k_h; ++ki) {
            for (int64_t kj = 0; kj < d.k_w; ++kj) {
                const int64_t row = (c * d.k_h + ki) * d.k_w + kj;
                double* out = cols + row * out_hw;
                for (int64_t oh = 0; oh < d.out_h; ++oh) {
                    const int64_t ih = oh * d.stride - d.padding + ki;
                    for (int64_t ow = 0; ow < d.out_w; ++ow) {
                        const int64_t iw = ow * d.stride - d.padding + kj;
                        const bool inside = ih >= 0 && ih < d.in_h && iw >= 0 && iw < d.in_w;
                        out[oh * d.out_w + ow] = inside ? base[(c * d.in_h + ih) * d.in_w + iw] : 0.0;
                    }
                }
            }
        }
    }
    (void)patch;
}

void col2im_add(const double* cols, int64_t sample, const Conv2dDims& d, Tensor& x_grad) {
    const int64_t out_hw = d.out_h * d.out_w;
    double* base = x_grad.data() + sample * d.in_ch * d.in_h * d.in_w;
    for (int64_t c = 0; c < d.in_ch; ++c) {
        for (int64_t ki = 0; ki < d.k_h; ++ki) {
            for (int64_t kj = 0; kj < d.k_w; ++kj) {
                const int64_t row = (c * d.k_h + ki) * d.k_w + kj;
                const double* in = cols + row * out_hw;
                for (int64_t oh = 0; oh < d.out_h; ++oh) {
                    const int64_t ih = oh * d.stride - d.padding + ki;
                    if (ih < 0 || ih >= d.in_h) continue;
                    for (int64_t ow = 0; ow < d.out_w; ++ow) {
                        const int64_t iw = ow * d.stride - d.padding + kj;
                        if (iw < 0 || iw >= d.in_w) continue;
                        base[(c * d.in_h + ih) * d.in_w + iw] += in[oh * d.out_w + ow];
                    }
                }
            }
        }
    }
}

NodeId Graph::push(Tensor value, std::function<void(Graph&, NodeId)> backward) {
    if (!value.all_finite()) throw numeric_error("non-finite value produced in graph");
    Node n;
    n.value = std::move(value);
    n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size() - 1);
}

NodeId Graph::constant(Tensor value) { return push(std::move(value)); }

NodeId Graph::param(Tensor value) {
    NodeId id = push(std::move(value));
    nodes_[static_cast<size_t>(id)].trainable = true;
    return id;
}

Tensor& Graph::grad(NodeId id) {
    Node& n = nodes_.at(static_cast<size_t>(id));
    if (!n.has_grad) {
        n.grad = Tensor::zeros(n.value.shape());
        n.has_grad = true;
    }
    return n.grad;
}

NodeId Graph::matmul(NodeId a, NodeId b) {
    Tensor out = matmul2d(value(a), value(b));
    return push(std::move(out), [a, b](Graph& g, NodeId self) {
        const Tensor& go = g.grad(self);
        // dA = G * B^T, dB = A^T * G
        Tensor da = matmul2d(go, g.value(b), false, true);
        Tensor db = matmul2d(g.value(a), go, true, false);
        Tensor& ga = g.grad(a);
        for (int64_t i = 0; i < ga.numel(); ++i) ga[i] += da[i];
        Tensor& gb = g.grad(b);
        for (int64_t i = 0; i < gb.numel(); ++i) gb[i] += db[i];
    });
}

NodeId Graph::linear(NodeId x, NodeId w, NodeId bias) {
    const Tensor& xv = value(x);
    const Tensor& wv = value(w);
    if (xv.rank() != 2 || wv.rank() != 2 || xv.dim(1) != wv.dim(1)) {
        throw usage_error("linear: x " + xv.shape_str() + " incompatible with w " + wv.shape_str());
    }
    Tensor out = matmul2d(xv, wv, false, true);
    if (bias >= 0) {
        const Tensor& bv = value(bias);
        if (bv.numel() != out.dim(1)) throw usage_error("linear: bias length mismatch");
        for (int64_t i = 0; i < out.dim(0); ++i)
            for (int64_t j = 0; j < out.dim(1); ++j) out.at2(i, j) += bv[j];
    }
    return push(std::move(out), [x, w, bias](Graph& g, NodeId self) {
        const Tensor& go = g.grad(self);
        Tensor dx = matmul2d(go, g.value(w), false, false);
        Tensor dw = matmul2d(go, g.value(x), true, false);
        Tensor& gx = g.grad(x);
        for (int64_t i = 0; i < gx.numel(); ++i) gx[i] += dx[i];
        Tensor& gw = g.grad(w);
        for (int64_t i = 0; i < gw.numel(); ++i) gw[i] += dw[i];
        if (bias >= 0) {
            Tensor& gb = g.grad(bias);
            for (int64_t i = 0; i < go.dim(0); ++i)
                for (int64_t j = 0; j < go.dim(1); ++j) gb[j] += go.at2(i, j);
        }
    });
}

NodeId Graph::conv2d(NodeId x, NodeId w, NodeId bias, int stride, int padding) {
    const Tensor& xv = value(x);
    const Tensor& wv = value(w);
    const Conv2dDims d = conv2d_dims(xv.shape(), wv.shape(), stride, padding);
    const int64_t patch = d.in_ch * d.k_h * d.k_w;
    const int64_t out_hw = d.out_h * d.out_w;
    Tensor out({d.batch, d.out_ch, d.out_h, d.out_w});
    std::vector<double> cols(static_cast<size_t>(patch * out_hw));
    const double* wp = wv.data();
    for (int64_t n = 0; n < d.batch; ++n) {
        im2col(xv, n, d, cols.data());
        double* op = out.data() + n * d.out_ch * out_hw;
        for (int64_t k = 0; k < d.out_ch; ++k) {
            for (int64_t r = 0; r < patch; ++r) {
                const double wkr = wp[k * patch + r];
                const double* col = cols.data() + r * out_hw;
                double* orow = op + k * out_hw;
                for (int64_t q = 0; q < out_hw; ++q) orow[q] += wkr * col[q];
            }
        }
    }
    if (bias >= 0) {
        const Tensor& bv = value(bias);
        if (bv.numel() != d.out_ch) throw usage_error("conv2d: bias length mismatch");
        for (int64_t n = 0; n < d.batch; ++n)
            for (int64_t k = 0; k < d.out_ch; ++k) {
                double* orow = out.data() + (n * d.out_ch + k) * out_hw;
                for (int64_t q = 0; q < out_hw; ++q) orow[q] += bv[k];
            }
    }
    return push(std::move(out), [x, w, bias, d](Graph& g, NodeId self) {
        const Tensor& go = g.grad(self);
        const Tensor& xv = g.value(x);
        const Tensor& wv = g.value(w);
        const int64_t patch = d.in_ch * d.k_h * d.k_w;
        const int64_t out_hw = d.out_h * d.out_w;
        Tensor& gx = g.grad(x);
        Tensor& gw = g.grad(w);
        std::vector<double> cols(static_cast<size_t>(patch * out_hw));
        std::vector<double> gcols(static_cast<size_t>(patch * out_hw));
        const double* wp = wv.data();
        for (int64_t n = 0; n < d.batch; ++n) {
            im2col(xv, n, d, cols.data());
            const double* gp = go.data() + n * d.out_ch * out_hw;
            // dW += G_n * cols^T
            for (int64_t k = 0; k < d.out_ch; ++k) {
                for (int64_t r = 0; r < patch; ++r) {
                    const double* grow = gp + k * out_hw;
                    const double* crow = cols.data() + r * out_hw;
                    double acc = 0.0;
                    for (int64_t q = 0; q < out_hw; ++q) acc += grow[q] * crow[q];
                    gw[k * patch + r] += acc;
                }
            }
            // dcols = W^T * G_n, scattered back through col2im
            std::fill(gcols.begin(), gcols.end(), 0.0);
            for (int64_t k = 0; k < d.out_ch; ++k) {
                const double* grow = gp + k * out_hw;
                for (int64_t r = 0; r < patch; ++r) {
                    const double wkr = wp[k * patch + r];
                    double* gc = gcols.data() + r * out_hw;
                    for (int64_t q = 0; q < out_hw; ++q) gc[q] += wkr * grow[q];
                }
            }
            col2im_add(gcols.data(), n, d, gx);
        }
        if (bias >= 0) {
            Tensor& gb = g.grad(bias);
            for (int64_t n = 0; n < d.batch; ++n)
                for (int64_t k = 0; k < d.out_ch; ++k) {
                    const double* grow = go.data() + (n * d.out_ch + k) * out_hw;
                    for (int64_t q = 0; q < out_hw; ++q) gb[k] += grow[q];
                }
        }
    });
}

NodeId Graph::relu(NodeId x) {
    Tensor out = value(x);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = out[i] > 0.0 ? out[i] : 0.0;
    return push(std::move(out), [x](Graph& g, NodeId self) {
        const Tensor& go = g.grad(self);
        const Tensor& xv = g.value(x);
        Tensor& gx = g.grad(x);
        // Subgradient at exactly 0 is 0.
        for (int64_t i = 0; i < gx.numel(); ++i) gx[i] += xv[i] > 0.0 ? go[i] : 0.0;
    });
}

NodeId Graph::add(NodeId a, NodeId b) {
    Tensor out = bq::add(value(a), value(b));
    return push(std::move(out), [a, b](Graph& g, NodeId self) {
        const Tensor& go = g.grad(self);
        Tensor& ga = g.grad(a);
        for (int64_t i = 0; i < ga.numel(); ++i) ga[i] += go[i];
        Tensor& gb = g.grad(b);
        for (int64_t i = 0; i < gb.numel(); ++i) gb[i] += go[i];
    });
}

NodeId Graph::sub(NodeId a, NodeId b) {
    Tensor out = bq::sub(value(a), value(b));
    return push(std::move(out), [a, b](Graph& g, NodeId self) {
        const Tensor& go = g.grad(self);
        Tensor& ga = g.grad(a);
        for (int64_t i = 0; i < ga.numel(); ++i) ga[i] += go[i];
        Tensor& gb = g.grad(b);
        for (int64_t i = 0; i < gb.numel(); ++i) gb[i] -= go[i];
    });
}

NodeId Graph::mul(NodeId a, NodeId b) {
    Tensor out = bq::mul(value(a), value(b));
    return push(std::move(out), [a, b](Graph& g, NodeId self) {
        const Tensor& go = g.grad(self);
        const Tensor& av = g.value(a);
        const Tensor& bv = g.value(b);
        Tensor& ga = g.grad(a);
        for (int64_t i = 0; i < ga.numel(); ++i) ga[i] += go[i] * bv[i];
        Tensor& gb = g.grad(b);
        for (int64_t i = 0; i < gb.numel(); ++i) gb[i] += go[i] * av[i];
    });
}

NodeId Graph::scale(NodeId a, double factor) {
    Tensor out = bq::scale(value(a), factor);
    return push(std::move(out), [a, factor](Graph& g, NodeId self) {
        const Tensor& go = g.grad(self);
        Tensor& ga = g.grad(a);
        for (int64_t i = 0; i < ga.numel(); ++i) ga[i] += factor * go[i];
    });
}

NodeId Graph::sum(NodeId a) {
    Tensor out = Tensor::scalar(value(a).sum());
    return push(std::move(out), [a](Graph& g, NodeId self) {
        const double go = g.grad(self)[0];
        Tensor& ga = g.grad(a);
        for (int64_t i = 0; i < ga.numel(); ++i) ga[i] += go;
    });
}

NodeId Graph::sum_squares(NodeId a) {
    const Tensor& av = value(a);
    double acc = 0.0;
    for (int64_t i = 0; i < av.numel(); ++i) acc += av[i] * av[i];
    return push(Tensor::scalar(acc), [a](Graph& g, NodeId self) {
        const double go = g.grad(self)[0];
        const Tensor& av = g.value(a);
        Tensor& ga = g.grad(a);
        for (int64_t i = 0; i < ga.numel(); ++i) ga[i] += 2.0 * av[i] * go;
    });
}

NodeId Graph::cross_entropy(NodeId logits, std::vector<int> labels) {
    const Tensor& lv = value(logits);
    if (lv.rank() != 2) throw usage_error("cross_entropy: logits must be [N, classes]");
    const int64_t n = lv.dim(0);
    const int64_t m = lv.dim(1);
    if (static_cast<int64_t>(labels.size()) != n) throw usage_error("cross_entropy: label count mismatch");
    for (int lab : labels) {
        if (lab < 0 || lab >= m) throw usage_error("cross_entropy: label out of range");
    }
    // softmax probabilities are cached for the backward rule
    Tensor probs({n, m});
    double loss = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        double mx = lv.at2(i, 0);
        for (int64_t j = 1; j < m; ++j) mx = std::max(mx, lv.at2(i, j));
        double denom = 0.0;
        for (int64_t j = 0; j < m; ++j) denom += std::exp(lv.at2(i, j) - mx);
        const double log_denom = std::log(denom);
        for (int64_t j = 0; j < m; ++j) probs.at2(i, j) = std::exp(lv.at2(i, j) - mx) / denom;
        loss += log_denom - (lv.at2(i, labels[static_cast<size_t>(i)]) - mx);
    }
    loss /= static_cast<double>(n);
    return push(Tensor::scalar(loss),
                [logits, labels = std::move(labels), probs = std::move(probs)](Graph& g, NodeId self) {
                    const double go = g.grad(self)[0];
                    const int64_t n = probs.dim(0);
                    const int64_t m = probs.dim(1);
                    Tensor& gl = g.grad(logits);
                    const double inv_n = 1.0 / static_cast<double>(n);
                    for (int64_t i = 0; i < n; ++i) {
                        for (int64_t j = 0; j < m; ++j) {
                            double v = probs.at2(i, j);
                            if (j == labels[static_cast<size_t>(i)]) v -= 1.0;
                            gl.at2(i, j) += go * inv_n * v;
                        }
                    }
                });
}

NodeId Graph::channel_affine(NodeId x, NodeId gamma, NodeId beta, Tensor mean, Tensor var, double eps) {
    const Tensor& xv = value(x);
    const int64_t channels = xv.rank() == 4 ? xv.dim(1) : xv.dim(1);
    if (value(gamma).numel() != channels || value(beta).numel() != channels ||
        mean.numel() != channels || var.numel() != channels) {
        throw usage_error("channel_affine: per-channel parameter length mismatch");
    }
    Tensor inv_std({channels});
    for (int64_t c = 0; c < channels; ++c) {
        const double denom = var[c] + eps;
        if (denom <= 0.0) throw numeric_error("channel_affine: nonpositive variance + epsilon");
        inv_std[c] = 1.0 / std::sqrt(denom);
    }
    const Tensor& gv = value(gamma);
    const Tensor& bv = value(beta);
    const int64_t inner = xv.rank() == 4 ? xv.dim(2) * xv.dim(3) : 1;
    const int64_t batch = xv.dim(0);
    Tensor out = xv;
    for (int64_t n = 0; n < batch; ++n)
        for (int64_t c = 0; c < channels; ++c) {
            double* p = out.data() + (n * channels + c) * inner;
            const double a = gv[c] * inv_std[c];
            const double b = bv[c] - gv[c] * mean[c] * inv_std[c];
            for (int64_t q = 0; q < inner; ++q) p[q] = a * p[q] + b;
        }
    return push(std::move(out), [x, gamma, beta, mean = std::move(mean), inv_std = std::move(inv_std),
                                 channels, inner, batch](Graph& g, NodeId self) {
        const Tensor& go = g.grad(self);
        const Tensor& xv = g.value(x);
        const Tensor& gv = g.value(gamma);
        Tensor& gx = g.grad(x);
        Tensor& gg = g.grad(gamma);
        Tensor& gb = g.grad(beta);
        for (int64_t n = 0; n < batch; ++n)
            for (int64_t c = 0; c < channels; ++c) {
                const int64_t off = (n * channels + c) * inner;
                const double a = gv[c] * inv_std[c];
                for (int64_t q = 0; q < inner; ++q) {
                    const double gout = go[off + q];
                    gx[off + q] += a * gout;
                    gg[c] += gout * (xv[off + q] - mean[c]) * inv_std[c];
                    gb[c] += gout;
                }
            }
    });
}

NodeId Graph::flatten_rows(NodeId x) {
    const Tensor& xv = value(x);
    if (xv.rank() < 2) throw usage_error("flatten_rows: rank must be >= 2");
    const int64_t n = xv.dim(0);
    Tensor out = xv.reshaped({n, xv.numel() / n});
    return push(std::move(out), [x](Graph& g, NodeId self) {
        const Tensor& go = g.grad(self);
        Tensor& gx = g.grad(x);
        for (int64_t i = 0; i < gx.numel(); ++i) gx[i] += go[i];
    });
}

NodeId Graph::custom(Tensor value, std::vector<NodeId> parents,
                     std::function<void(Graph&, NodeId)> backward) {
    (void)parents;  // parents are captured by the closure; kept for call-site clarity
    return push(std::move(value), std::move(backward));
}

void Graph::backward(NodeId root) {
    if (value(root).numel() != 1) throw usage_error("backward: root must be scalar");
    grad(root)[0] = 1.0;
    run_backward(root);
}

void Graph::backward_seed(NodeId node, const Tensor& seed) {
    if (!value(node).same_shape(seed)) throw usage_error("backward_seed: seed shape mismatch");
    Tensor& g = grad(node);
    for (int64_t i = 0; i < g.numel(); ++i) g[i] += seed[i];
    run_backward(node);
}

void Graph::run_backward(NodeId root) {
    for (NodeId id = root; id >= 0; --id) {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (n.has_grad && n.backward) n.backward(*this, id);
    }
}

void Graph::zero_grads() {
    for (Node& n : nodes_) {
        n.has_grad = false;
        n.grad = Tensor();
    }
}

}  // namespace bq
