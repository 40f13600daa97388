// Copyright (C) 2026 The blockquant authors
// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <filesystem>
#include <random>

#include "blockquant/calibration.hpp"
#include "blockquant/container.hpp"
#include "blockquant/errors.hpp"
#include "blockquant/fixtures.hpp"
#include "blockquant/model.hpp"

using namespace bq;
namespace fs = std::filesystem;

namespace {

NetworkModel linear_chain(const std::vector<int64_t>& dims, uint64_t seed) {
    return build_mlp(dims, seed);
}

// stem + two 2-layer blocks + head, conv body
NetworkModel small_block_net(uint64_t seed) {
    NetworkModel m = build_tiny_resnet(4, 3, seed);
    return m;
}

fs::path temp_dir(const std::string& tag) {
    fs::path p = fs::temp_directory_path() / ("bqtest_" + tag);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

double forward_rel_gap(const NetworkModel& a, const NetworkModel& b, const Tensor& x) {
    const Tensor za = forward_logits(a, x);
    const Tensor zb = forward_logits(b, x);
    double worst = 0.0;
    for (int64_t i = 0; i < za.numel(); ++i) {
        worst = std::max(worst, std::fabs(za[i] - zb[i]));
    }
    return worst / std::max(zb.max_abs(), 1e-12);
}

}  // namespace

TEST_CASE("fold_bn identity and scaling") {
    std::mt19937_64 rng(3);
    NetworkModel m;
    m.input_shape = {2, 4, 4};
    m.num_classes = 2;
    LayerSpec conv;
    conv.name = "stem";
    conv.kind = LayerKind::Conv2d;
    conv.padding = 1;
    conv.weight = Tensor::randn({3, 2, 3, 3}, rng);
    conv.bias = Tensor::randn({3}, rng);
    BatchNormSpec bn;
    bn.gamma = Tensor::full({3}, 1.0);
    bn.beta = Tensor({3});
    bn.mean = Tensor({3});
    bn.var = Tensor::full({3}, 1.0);
    bn.epsilon = 0.0;
    conv.bn = bn;
    LayerSpec head;
    head.name = "head";
    head.kind = LayerKind::Linear;
    head.weight = Tensor::randn({2, 48}, rng);
    head.bias = Tensor({2});
    m.layers = {conv, head};

    // gamma=1, beta=0, mu=0, var=1, eps=0: weights unchanged
    NetworkModel folded = fold_bn(m);
    CHECK(!folded.layers[0].bn.has_value());
    for (int64_t i = 0; i < conv.weight.numel(); ++i) {
        CHECK(folded.layers[0].weight[i] == conv.weight[i]);
    }

    // gamma=2 doubles weights and bias
    m.layers[0].bn->gamma = Tensor::full({3}, 2.0);
    NetworkModel doubled = fold_bn(m);
    for (int64_t i = 0; i < conv.weight.numel(); ++i) {
        CHECK(doubled.layers[0].weight[i] == doctest::Approx(2.0 * conv.weight[i]));
    }
    for (int64_t c = 0; c < 3; ++c) {
        CHECK(doubled.layers[0].bias[c] == doctest::Approx(2.0 * conv.bias[c]));
    }

    m.layers[0].bn->var = Tensor::full({3}, -1.0);
    CHECK_THROWS_AS(fold_bn(m), numeric_error);
}

TEST_CASE("fold_bn preserves the network function") {
    NetworkModel net = small_block_net(17);
    attach_synthetic_bn(net, 18);
    NetworkModel folded = fold_bn(net);
    std::mt19937_64 rng(19);
    for (int trial = 0; trial < 50; ++trial) {
        Tensor x = Tensor::randn({2, 3, 8, 8}, rng);
        CHECK(forward_rel_gap(folded, net, x) < 1e-6);
    }
}

TEST_CASE("partition granularities") {
    // blocks [[1,2],[3,4]] with stem 0 and head 5
    NetworkModel m = linear_chain({6, 5, 5, 5, 5, 4}, 11);
    m.blocks = {{1, 2}, {3, 4}};
    m.stages = {{0, 1}};

    auto units = partition(m, Granularity::Block);
    REQUIRE(units.size() == 4);  // stem, {1,2}, {3,4}, head
    CHECK(units[0].first == 0);
    CHECK(units[1].first == 1);
    CHECK(units[1].last == 2);
    CHECK(units[2].first == 3);
    CHECK(units[2].last == 4);
    CHECK(units[3].first == 5);

    auto net_units = partition(m, Granularity::Net);
    REQUIRE(net_units.size() == 3);
    CHECK(net_units[1].first == 1);
    CHECK(net_units[1].last == 4);

    auto layer_units = partition(m, Granularity::Layer);
    CHECK(layer_units.size() == 6);  // every quantizable layer

    // units cover all quantizable layers exactly once, at every granularity
    for (Granularity g :
         {Granularity::Layer, Granularity::Block, Granularity::Stage, Granularity::Net}) {
        std::vector<int> covered;
        for (const auto& u : partition(m, g)) {
            for (int l : u.quant_layers) covered.push_back(l);
        }
        std::sort(covered.begin(), covered.end());
        CHECK(covered == m.quantizable_layers());
    }
}

TEST_CASE("partition of a 19-body-layer topology") {
    // resnet-18-style block sizes {2,2,3,2,3,2,3,2} over 4 stages
    std::vector<int64_t> dims(22, 6);
    dims.back() = 4;
    NetworkModel m = linear_chain(dims, 13);  // 21 layers: stem + 19 body + head
    m.blocks.clear();
    m.stages.clear();
    const std::vector<int> sizes{2, 2, 3, 2, 3, 2, 3, 2};
    int next = 1;
    for (int s : sizes) {
        m.blocks.push_back({next, next + s - 1});
        next += s;
    }
    REQUIRE(next == 20);  // 19 body layers end at index 19
    m.stages = {{0, 1}, {2, 3}, {4, 5}, {6, 7}};

    auto layer_units = partition(m, Granularity::Layer);
    int body_units = 0;
    for (const auto& u : layer_units) {
        if (m.block_of(u.first) >= 0) ++body_units;
    }
    CHECK(body_units == 19);
    auto block_units = partition(m, Granularity::Block);
    int body_blocks = 0;
    for (const auto& u : block_units) {
        if (m.block_of(u.first) >= 0) ++body_blocks;
    }
    CHECK(body_blocks == 8);
    auto stage_units = partition(m, Granularity::Stage);
    int body_stages = 0;
    for (const auto& u : stage_units) {
        if (m.block_of(u.first) >= 0) ++body_stages;
    }
    CHECK(body_stages == 4);
}

TEST_CASE("forward_to") {
    // single linear layer with identity weight: z = x
    NetworkModel m;
    m.input_shape = {3};
    m.num_classes = 3;
    LayerSpec eye;
    eye.name = "stem";
    eye.kind = LayerKind::Linear;
    eye.weight = Tensor::matrix(3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    eye.bias = Tensor({3});
    m.layers = {eye};
    Tensor x = Tensor({1, 3}, {0.3, -0.4, 2.0});
    Tensor z = forward_to(m, x, 0);
    for (int64_t i = 0; i < 3; ++i) CHECK(z[i] == doctest::Approx(x[i]));

    CHECK_THROWS_AS(forward_to(m, x, 7), usage_error);
}

TEST_CASE("residual link adds the branch input") {
    // stem -> block(fc1) with link fc1->fc1: z = Wx + x
    NetworkModel m = linear_chain({4, 4, 4, 3}, 29);
    REQUIRE(m.layer_count() == 3);
    m.residual_links = {{1, 1}};
    std::mt19937_64 rng(31);
    Tensor x = Tensor::randn({2, 4}, rng);
    const Tensor z1 = forward_to(m, x, 1);
    // manual: z = W1 relu(W0 x + b0) + b1 + relu(W0 x + b0)
    Graph g;
    NodeId h = g.relu(g.linear(g.constant(x), g.constant(m.layers[0].weight),
                               g.constant(m.layers[0].bias)));
    NodeId z = g.add(g.linear(h, g.constant(m.layers[1].weight), g.constant(m.layers[1].bias)), h);
    const Tensor& want = g.value(z);
    for (int64_t i = 0; i < want.numel(); ++i) CHECK(z1[i] == doctest::Approx(want[i]));
}

TEST_CASE("forward_to matches the trace cache on a random net") {
    NetworkModel net = small_block_net(41);
    std::mt19937_64 rng(43);
    Tensor x = Tensor::randn({2, 3, 8, 8}, rng);
    Graph g;
    ForwardTrace trace = forward_trace(g, net, g.constant(x));
    for (int l = 0; l < net.layer_count(); ++l) {
        const Tensor via_op = forward_to(net, x, l);
        const Tensor& cached = g.value(trace.z[l]);
        for (int64_t i = 0; i < cached.numel(); ++i) CHECK(via_op[i] == cached[i]);
    }
}

TEST_CASE("cross-block residual links are rejected") {
    NetworkModel m = linear_chain({4, 4, 4, 4, 4, 3}, 51);
    m.blocks = {{1, 2}, {3, 4}};
    m.residual_links = {{2, 3}};
    CHECK_THROWS_AS(m.validate(), load_error);
    m.residual_links = {{1, 4}};
    CHECK_THROWS_AS(m.validate(), load_error);
    m.residual_links = {{3, 4}};
    CHECK_NOTHROW(m.validate());
}

TEST_CASE("tensor and dataset container round trips") {
    const fs::path dir = temp_dir("container");
    std::mt19937_64 rng(61);
    Tensor t = Tensor::randn({3, 4, 2}, rng);
    write_tensor(dir / "t.bqt", t);
    Tensor back = read_tensor(dir / "t.bqt");
    REQUIRE(back.shape() == t.shape());
    for (int64_t i = 0; i < t.numel(); ++i) {
        CHECK(back[i] == doctest::Approx(t[i]).epsilon(1e-6));  // f32 storage
    }

    Dataset ds;
    ds.inputs = Tensor::randn({5, 2, 3, 3}, rng);
    ds.labels = {0, 1, 2, 1, 0};
    write_dataset(dir / "d.bqtd", ds);
    Dataset dback = read_dataset(dir / "d.bqtd");
    CHECK(dback.count() == 5);
    CHECK(dback.labels == ds.labels);
    CHECK(dback.inputs.shape() == ds.inputs.shape());
}

TEST_CASE("model container round trip with quant state") {
    const fs::path dir = temp_dir("model");
    NetworkModel net = small_block_net(71);
    attach_synthetic_bn(net, 72);
    net.meta["checkpoint_accuracy"] = 0.875;
    save_model(dir / "m", net);
    LoadedModel loaded = load_model(dir / "m");
    CHECK(loaded.model.layer_count() == net.layer_count());
    CHECK(loaded.model.blocks == net.blocks);
    CHECK(loaded.model.stages == net.stages);
    CHECK(loaded.model.meta.at("checkpoint_accuracy") == doctest::Approx(0.875));
    CHECK(loaded.model.layers[0].bn.has_value());
    CHECK(!loaded.quant.any());

    // forward agreement at f32 container precision
    std::mt19937_64 rng(73);
    Tensor x = Tensor::randn({2, 3, 8, 8}, rng);
    CHECK(forward_rel_gap(loaded.model, net, x) < 1e-5);

    // quantized round trip
    ModelQuantState qs;
    qs.layers.assign(net.layers.size(), LayerQuantState{});
    qs.layers[0].enabled = true;
    qs.layers[0].qp = QuantParams::weights(4, Tensor::scalar(0.017), false, RoundingMode::AdaRound);
    qs.layers[0].ada = adaround_init(fold_bn(net).layers[0].weight, qs.layers[0].qp);
    qs.layers[2].has_act = true;
    qs.layers[2].act_bits = 8;
    qs.layers[2].act_step = 0.01375;
    save_model(dir / "q", net, &qs);
    LoadedModel qloaded = load_model(dir / "q");
    CHECK(qloaded.quant.any());
    CHECK(qloaded.quant.layers[0].enabled);
    CHECK(qloaded.quant.layers[0].qp.bits == 4);
    CHECK(qloaded.quant.layers[0].qp.mode == RoundingMode::AdaRound);
    CHECK(qloaded.quant.layers[2].has_act);
    CHECK(qloaded.quant.layers[2].act_step == doctest::Approx(0.01375));
}

TEST_CASE("missing manifest reports a load error") {
    const fs::path dir = temp_dir("nomanifest");
    CHECK_THROWS_WITH_AS(load_model(dir), doctest::Contains("manifest.json not found"), load_error);
}

TEST_CASE("calibration loading is seeded and reproducible") {
    const fs::path dir = temp_dir("calib");
    Dataset ds;
    std::mt19937_64 rng(81);
    ds.inputs = Tensor::randn({100, 6}, rng);
    for (int i = 0; i < 100; ++i) ds.labels.push_back(i % 4);
    write_dataset(dir / "d.bqtd", ds);

    CalibrationSet a = load_calibration(dir / "d.bqtd", 40, 9, 16);
    CalibrationSet b = load_calibration(dir / "d.bqtd", 40, 9, 16);
    REQUIRE(a.batch_count() == 3);  // ceil(40/16)
    CHECK(a.sample_count == 40);
    for (int64_t i = 0; i < a.batch_count(); ++i) {
        CHECK(a.batch_labels[i] == b.batch_labels[i]);
        for (int64_t j = 0; j < a.batch_inputs[i].numel(); ++j) {
            CHECK(a.batch_inputs[i][j] == b.batch_inputs[i][j]);
        }
    }

    // independent reimplementation of the documented Fisher-Yates order
    std::vector<size_t> order(100);
    for (size_t i = 0; i < 100; ++i) order[i] = i;
    std::mt19937_64 r2(9);
    for (size_t i = 100; i > 1; --i) std::swap(order[i - 1], order[r2() % i]);
    CHECK(order == seeded_sample_order(100, 9));
    // the first picked sample's label matches the dataset
    CHECK(a.batch_labels[0][0] == ds.labels[order[0]]);

    CHECK_THROWS_AS(load_calibration(dir / "d.bqtd", 101, 9, 16), load_error);

    // full-set load keeps every sample exactly once
    CalibrationSet full = load_calibration(dir / "d.bqtd", 100, 5, 32);
    int histogram[4] = {0, 0, 0, 0};
    for (const auto& labels : full.batch_labels) {
        for (int l : labels) ++histogram[l];
    }
    CHECK(histogram[0] == 25);
    CHECK(histogram[3] == 25);
}
