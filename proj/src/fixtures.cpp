// Copyright (C) 2026 The blockquant authors
// SPDX-License-Identifier: Apache-2.0
#include "blockquant/fixtures.hpp"

#include <cmath>
#include <random>

#include "blockquant/evalutil.hpp"
#include "blockquant/hessian.hpp"
#include "blockquant/mixedprec.hpp"
#include "blockquant/recon.hpp"

namespace bq {

namespace fs = std::filesystem;

Dataset synth_clusters(const ClusterSpec& spec, uint64_t center_seed, uint64_t sample_seed) {
    std::mt19937_64 crng(center_seed);
    Tensor centers = Tensor::randn({spec.classes, spec.dim}, crng, spec.center_std);
    std::mt19937_64 srng(sample_seed);
    std::normal_distribution<double> noise(0.0, spec.noise);
    Dataset ds;
    ds.inputs = Tensor({spec.samples, spec.dim});
    ds.labels.resize(static_cast<size_t>(spec.samples));
    for (int64_t i = 0; i < spec.samples; ++i) {
        const int label = static_cast<int>(i % spec.classes);
        ds.labels[static_cast<size_t>(i)] = label;
        for (int64_t j = 0; j < spec.dim; ++j) {
            ds.inputs[i * spec.dim + j] = centers.at2(label, j) + noise(srng);
        }
    }
    return ds;
}

Dataset synth_images(const ImageSpec& spec, uint64_t template_seed, uint64_t sample_seed) {
    const int64_t chw = spec.channels * spec.height * spec.width;
    std::mt19937_64 trng(template_seed);
    Tensor templates = Tensor::randn({spec.classes, spec.channels, spec.height, spec.width}, trng);
    // one box-blur pass for spatial coherence, then unit-std normalization
    Tensor blurred = templates;
    for (int c = 0; c < spec.classes; ++c) {
        for (int64_t ch = 0; ch < spec.channels; ++ch) {
            for (int64_t i = 0; i < spec.height; ++i) {
                for (int64_t j = 0; j < spec.width; ++j) {
                    double acc = 0.0;
                    int count = 0;
                    for (int64_t di = -1; di <= 1; ++di) {
                        for (int64_t dj = -1; dj <= 1; ++dj) {
                            const int64_t ii = i + di, jj = j + dj;
                            if (ii < 0 || ii >= spec.height || jj < 0 || jj >= spec.width) continue;
                            acc += templates[((c * spec.channels + ch) * spec.height + ii) * spec.width + jj];
                            ++count;
                        }
                    }
                    blurred[((c * spec.channels + ch) * spec.height + i) * spec.width + j] =
                        acc / count;
                }
            }
        }
        double var = 0.0;
        for (int64_t k = 0; k < chw; ++k) {
            const double v = blurred[c * chw + k];
            var += v * v;
        }
        const double inv = 1.0 / std::sqrt(var / static_cast<double>(chw) + 1e-12);
        for (int64_t k = 0; k < chw; ++k) blurred[c * chw + k] *= inv;
    }
    std::mt19937_64 srng(sample_seed);
    std::normal_distribution<double> noise(0.0, spec.noise);
    std::uniform_real_distribution<double> amp(spec.amp_lo, spec.amp_hi);
    Dataset ds;
    ds.inputs = Tensor({spec.samples, spec.channels, spec.height, spec.width});
    ds.labels.resize(static_cast<size_t>(spec.samples));
    for (int64_t i = 0; i < spec.samples; ++i) {
        const int label = static_cast<int>(i % spec.classes);
        ds.labels[static_cast<size_t>(i)] = label;
        const double a = amp(srng);
        for (int64_t k = 0; k < chw; ++k) {
            ds.inputs[i * chw + k] = a * blurred[label * chw + k] + noise(srng);
        }
    }
    return ds;
}

namespace {
Tensor he_init(std::vector<int64_t> shape, int64_t fan_in, std::mt19937_64& rng) {
    return Tensor::randn(std::move(shape), rng, std::sqrt(2.0 / static_cast<double>(fan_in)));
}
}  // namespace

NetworkModel build_mlp(const std::vector<int64_t>& dims, uint64_t seed) {
    std::mt19937_64 rng(seed);
    NetworkModel model;
    model.input_shape = {dims.front()};
    model.num_classes = static_cast<int>(dims.back());
    for (size_t i = 0; i + 1 < dims.size(); ++i) {
        LayerSpec layer;
        layer.name = i == 0 ? "stem" : (i + 2 == dims.size() ? "head" : "fc" + std::to_string(i));
        layer.kind = LayerKind::Linear;
        layer.weight = he_init({dims[i + 1], dims[i]}, dims[i], rng);
        layer.bias = Tensor({dims[i + 1]});
        model.layers.push_back(std::move(layer));
    }
    for (int l = 1; l + 1 < model.layer_count(); ++l) model.blocks.push_back({l, l});
    if (!model.blocks.empty()) {
        model.stages.push_back({0, static_cast<int>(model.blocks.size()) - 1});
    }
    model.validate();
    return model;
}

NetworkModel build_tiny_resnet(int channels, int classes, uint64_t seed) {
    std::mt19937_64 rng(seed);
    NetworkModel model;
    model.input_shape = {3, 8, 8};
    model.num_classes = classes;
    auto conv = [&](const std::string& name, int64_t in_ch, int64_t out_ch) {
        LayerSpec layer;
        layer.name = name;
        layer.kind = LayerKind::Conv2d;
        layer.stride = 1;
        layer.padding = 1;
        layer.weight = he_init({out_ch, in_ch, 3, 3}, in_ch * 9, rng);
        layer.bias = Tensor({out_ch});
        return layer;
    };
    model.layers.push_back(conv("stem", 3, channels));
    for (int b = 0; b < 4; ++b) {
        const std::string prefix = "b" + std::to_string(b + 1);
        model.layers.push_back(conv(prefix + "c1", channels, channels));
        model.layers.push_back(conv(prefix + "c2", channels, channels));
        const int first = 1 + 2 * b;
        model.blocks.push_back({first, first + 1});
        model.residual_links.push_back({first, first + 1});
    }
    LayerSpec head;
    head.name = "head";
    head.kind = LayerKind::Linear;
    const int64_t feat = channels * 8 * 8;
    head.weight = he_init({classes, feat}, feat, rng);
    head.bias = Tensor({static_cast<int64_t>(classes)});
    model.layers.push_back(std::move(head));
    model.stages = {{0, 1}, {2, 3}};
    model.validate();
    return model;
}

namespace {

struct ParamSet {
    std::vector<Tensor*> tensors;
    std::vector<AdamState> opt;
};

ParamSet collect_params(NetworkModel& model, double lr) {
    ParamSet ps;
    for (auto& layer : model.layers) {
        ps.tensors.push_back(&layer.weight);
        ps.tensors.push_back(&layer.bias);
    }
    for (Tensor* t : ps.tensors) ps.opt.emplace_back(t->shape(), lr);
    return ps;
}

// Forward pass with every weight and bias as a trainable leaf.
NodeId training_forward(Graph& g, const NetworkModel& model, const Tensor& batch,
                        std::vector<NodeId>& param_nodes) {
    param_nodes.clear();
    std::vector<NodeId> x_in(model.layers.size(), -1);
    NodeId x = g.constant(batch);
    const int n = model.layer_count();
    NodeId logits = -1;
    for (int l = 0; l < n; ++l) {
        const LayerSpec& layer = model.layers[static_cast<size_t>(l)];
        if (layer.kind == LayerKind::Linear && g.value(x).rank() != 2) x = g.flatten_rows(x);
        x_in[static_cast<size_t>(l)] = x;
        NodeId wn = g.param(layer.weight);
        NodeId bn = g.param(layer.bias);
        param_nodes.push_back(wn);
        param_nodes.push_back(bn);
        NodeId z = layer.kind == LayerKind::Linear ? g.linear(x, wn, bn)
                                                   : g.conv2d(x, wn, bn, layer.stride, layer.padding);
        for (const auto& link : model.residual_links) {
            if (link.to == l) z = g.add(z, x_in[static_cast<size_t>(link.from)]);
        }
        if (l == n - 1) {
            logits = z;
        } else {
            x = g.relu(z);
        }
    }
    return logits;
}

Tensor slice_batch(const Dataset& ds, const std::vector<size_t>& order, size_t start, size_t end,
                   std::vector<int>& labels) {
    const int64_t per_sample = ds.inputs.numel() / ds.count();
    std::vector<int64_t> shape{static_cast<int64_t>(end - start)};
    shape.insert(shape.end(), ds.inputs.shape().begin() + 1, ds.inputs.shape().end());
    Tensor batch(shape);
    labels.clear();
    for (size_t i = start; i < end; ++i) {
        const size_t src = order[i];
        std::copy(ds.inputs.data() + static_cast<int64_t>(src) * per_sample,
                  ds.inputs.data() + static_cast<int64_t>(src + 1) * per_sample,
                  batch.data() + static_cast<int64_t>(i - start) * per_sample);
        labels.push_back(ds.labels[src]);
    }
    return batch;
}

double adam_pass(NetworkModel& model, ParamSet& ps, const Tensor& batch,
                 const std::vector<int>& labels) {
    Graph g;
    std::vector<NodeId> nodes;
    NodeId logits = training_forward(g, model, batch, nodes);
    NodeId loss = g.cross_entropy(logits, labels);
    g.backward(loss);
    for (size_t p = 0; p < nodes.size(); ++p) {
        if (g.has_grad(nodes[p])) ps.opt[p].step(*ps.tensors[p], g.grad(nodes[p]));
    }
    return g.value(loss)[0];
}

}  // namespace

double train_model(NetworkModel& model, const Dataset& train, const TrainConfig& cfg) {
    ParamSet ps = collect_params(model, cfg.lr);
    std::mt19937_64 rng(cfg.seed);
    std::vector<size_t> order(static_cast<size_t>(train.count()));
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    size_t cursor = order.size();
    double loss = 0.0;
    std::vector<int> labels;
    for (int step = 0; step < cfg.steps; ++step) {
        if (cursor + static_cast<size_t>(cfg.batch) > order.size()) {
            for (size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
            cursor = 0;
        }
        const Tensor batch = slice_batch(train, order, cursor, cursor + static_cast<size_t>(cfg.batch), labels);
        cursor += static_cast<size_t>(cfg.batch);
        loss = adam_pass(model, ps, batch, labels);
    }
    return loss;
}

double weight_grad_inf(const NetworkModel& model, const Dataset& ds) {
    const FlatParams fp = FlatParams::build(model);
    return batch_loss_grad(model, fp, ds.inputs, ds.labels).max_abs();
}

double polish_to_convergence(NetworkModel& model, const Dataset& ds, double target, uint64_t seed) {
    (void)seed;  // full-batch passes are deterministic
    const std::vector<std::pair<double, int>> ladder = {
        {3e-3, 3000}, {1e-3, 3000}, {3e-4, 4000}, {1e-4, 6000}, {3e-5, 10000}};
    std::vector<int> labels = ds.labels;
    for (const auto& [lr, iters] : ladder) {
        ParamSet ps = collect_params(model, lr);
        for (int i = 0; i < iters; ++i) {
            adam_pass(model, ps, ds.inputs, labels);
            if ((i & 0xFF) == 0xFF && weight_grad_inf(model, ds) < target) {
                return weight_grad_inf(model, ds);
            }
        }
        if (weight_grad_inf(model, ds) < target) break;
    }
    return weight_grad_inf(model, ds);
}

void attach_synthetic_bn(NetworkModel& model, uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> gamma_dist(0.6, 1.4);
    std::uniform_real_distribution<double> var_dist(0.5, 1.5);
    std::normal_distribution<double> small(0.0, 0.2);
    for (auto& layer : model.layers) {
        if (layer.kind != LayerKind::Conv2d) continue;
        const int64_t ch = layer.weight.dim(0);
        BatchNormSpec bn;
        bn.gamma = Tensor({ch});
        bn.beta = Tensor({ch});
        bn.mean = Tensor({ch});
        bn.var = Tensor({ch});
        bn.epsilon = 1e-5;
        const int64_t stride = layer.weight.numel() / ch;
        for (int64_t c = 0; c < ch; ++c) {
            bn.gamma[c] = gamma_dist(rng);
            bn.beta[c] = small(rng);
            bn.mean[c] = small(rng);
            bn.var[c] = var_dist(rng);
            const double scale = bn.gamma[c] / std::sqrt(bn.var[c] + bn.epsilon);
            double* w = layer.weight.data() + c * stride;
            for (int64_t i = 0; i < stride; ++i) w[i] /= scale;
            layer.bias[c] = bn.mean[c] + (layer.bias[c] - bn.beta[c]) / scale;
        }
        layer.bn = bn;
    }
}

namespace {

HardwareTable tiny_resnet_latency_table(const NetworkModel& model) {
    HardwareTable t;
    t.constraint = "latency";
    t.act_bits = 8;
    const std::map<int, double> bit_factor{{2, 1.0}, {4, 1.55}, {8, 2.4}};
    for (const auto& layer : model.layers) {
        HardwareTable::Layer hl;
        hl.id = layer.name;
        hl.elements = layer.weight.numel();
        double macs;
        if (layer.kind == LayerKind::Conv2d) {
            // output positions stay 8x8 under stride-1 same padding
            macs = 64.0 * static_cast<double>(layer.weight.numel());
        } else {
            macs = static_cast<double>(layer.weight.numel());
        }
        for (const auto& [bits, f] : bit_factor) {
            hl.latency_ms[bits] = macs / 1000.0 * f + 0.05;
        }
        t.layers.push_back(std::move(hl));
    }
    return t;
}

HardwareTable resnet18_size_table() {
    HardwareTable t;
    t.constraint = "size";
    t.act_bits = 8;
    const std::vector<std::pair<std::string, int64_t>> layers = {
        {"conv1", 9408},
        {"l1.b1.c1", 36864},   {"l1.b1.c2", 36864},
        {"l1.b2.c1", 36864},   {"l1.b2.c2", 36864},
        {"l2.b1.c1", 73728},   {"l2.b1.c2", 147456},  {"l2.b1.ds", 8192},
        {"l2.b2.c1", 147456},  {"l2.b2.c2", 147456},
        {"l3.b1.c1", 294912},  {"l3.b1.c2", 589824},  {"l3.b1.ds", 32768},
        {"l3.b2.c1", 589824},  {"l3.b2.c2", 589824},
        {"l4.b1.c1", 1179648}, {"l4.b1.c2", 2359296}, {"l4.b1.ds", 131072},
        {"l4.b2.c1", 2359296}, {"l4.b2.c2", 2359296},
        {"fc", 512000},
    };
    for (const auto& [id, elements] : layers) {
        HardwareTable::Layer hl;
        hl.id = id;
        hl.elements = elements;
        t.layers.push_back(std::move(hl));
    }
    return t;
}

}  // namespace

void make_fixtures(const fs::path& dir, uint64_t seed) {
    fs::create_directories(dir / "data");
    fs::create_directories(dir / "hw");

    // --- tiny-mlp ---------------------------------------------------------
    ClusterSpec cspec;
    const Dataset mlp_train = synth_clusters(cspec, seed + 1, seed + 2);
    {
        ClusterSpec pool = cspec;
        pool.samples = 4096;
        const Dataset calib = synth_clusters(pool, seed + 1, seed + 3);
        write_dataset(dir / "data" / "tiny-mlp-calib.bqtd", calib);
        pool.samples = 1024;
        const Dataset test = synth_clusters(pool, seed + 1, seed + 4);
        write_dataset(dir / "data" / "tiny-mlp-test.bqtd", test);

        NetworkModel mlp = build_mlp({10, 8, 8, 4}, seed + 5);
        TrainConfig tc;
        tc.steps = 1500;
        tc.batch = 32;
        tc.lr = 5e-3;
        tc.seed = seed + 6;
        train_model(mlp, mlp_train, tc);
        const double grad_inf = polish_to_convergence(mlp, mlp_train, 5e-5, seed + 7);
        mlp.meta["grad_inf_norm"] = grad_inf;
        mlp.meta["checkpoint_accuracy"] = evaluate(mlp, nullptr, test).top1;
        save_model(dir / "tiny-mlp", mlp);

        NetworkModel rough = build_mlp({10, 8, 8, 4}, seed + 8);
        TrainConfig short_tc;
        short_tc.steps = 3;
        short_tc.batch = 32;
        short_tc.seed = seed + 9;
        train_model(rough, mlp_train, short_tc);
        rough.meta["grad_inf_norm"] = weight_grad_inf(rough, mlp_train);
        rough.meta["checkpoint_accuracy"] = evaluate(rough, nullptr, test).top1;
        save_model(dir / "tiny-mlp-unconverged", rough);
    }

    // --- tiny-resnet ------------------------------------------------------
    {
        ImageSpec ispec;
        ispec.samples = 2048;
        const Dataset train = synth_images(ispec, seed + 21, seed + 22);
        ImageSpec pool = ispec;
        pool.samples = 2048;
        const Dataset calib = synth_images(pool, seed + 21, seed + 23);
        write_dataset(dir / "data" / "tiny-resnet-calib.bqtd", calib);
        pool.samples = 1024;
        const Dataset test = synth_images(pool, seed + 21, seed + 24);
        write_dataset(dir / "data" / "tiny-resnet-test.bqtd", test);

        NetworkModel net = build_tiny_resnet(8, 4, seed + 25);
        TrainConfig tc;
        tc.steps = 1600;
        tc.batch = 32;
        tc.lr = 3e-3;
        tc.seed = seed + 26;
        train_model(net, train, tc);
        attach_synthetic_bn(net, seed + 27);
        net.meta["checkpoint_accuracy"] = evaluate(net, nullptr, test).top1;
        net.meta["grad_inf_norm"] = weight_grad_inf(net, train);
        save_model(dir / "tiny-resnet", net);

        save_hardware(dir / "hw" / "tiny-resnet-latency.json", tiny_resnet_latency_table(net));
    }

    save_hardware(dir / "hw" / "resnet18-size.json", resnet18_size_table());
}

}  // namespace bq
