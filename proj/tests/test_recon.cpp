// Copyright (C) 2026 The blockquant authors
// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <random>

#include "blockquant/errors.hpp"
#include "blockquant/evalutil.hpp"
#include "blockquant/fixtures.hpp"
#include "blockquant/recon.hpp"

using namespace bq;

namespace {

CalibrationSet batches_from(const Dataset& ds, int batch) { return batch_dataset(ds, batch); }

// single linear layer model in R^d
NetworkModel one_layer(const Tensor& w, const Tensor& b) {
    NetworkModel m;
    m.input_shape = {w.dim(1)};
    m.num_classes = static_cast<int>(w.dim(0));
    LayerSpec layer;
    layer.name = "stem";
    layer.kind = LayerKind::Linear;
    layer.weight = w;
    layer.bias = b;
    m.layers = {layer};
    return m;
}

}  // namespace

TEST_CASE("adam steps") {
    // zero gradient leaves parameters unchanged
    AdamState opt({3}, 0.1);
    Tensor p = Tensor::from({1.0, -2.0, 0.5});
    const Tensor before = p;
    opt.step(p, Tensor({3}));
    for (int64_t i = 0; i < 3; ++i) CHECK(p[i] == before[i]);

    // constant gradient: step magnitude approaches lr
    AdamState opt2({1}, 0.01);
    Tensor q = Tensor::scalar(0.0);
    double prev = q[0];
    double step_size = 0.0;
    for (int i = 0; i < 500; ++i) {
        opt2.step(q, Tensor::scalar(3.7));
        step_size = prev - q[0];
        prev = q[0];
    }
    CHECK(step_size == doctest::Approx(0.01).epsilon(1e-3));

    CHECK_THROWS_AS(opt2.step(p, Tensor({3})), usage_error);
}

TEST_CASE("adam matches an independent scalar reimplementation") {
    // minimize f(x) = (x-2)^2 / 2, gradient x-2
    AdamState opt({1}, 0.05);
    Tensor x = Tensor::scalar(-1.0);
    double rx = -1.0;
    double m = 0.0, v = 0.0;
    for (int t = 1; t <= 100; ++t) {
        const double g = x[0] - 2.0;
        opt.step(x, Tensor::scalar(g));
        const double rg = rx - 2.0;
        m = 0.9 * m + 0.1 * rg;
        v = 0.999 * v + 0.001 * rg * rg;
        const double mhat = m / (1.0 - std::pow(0.9, t));
        const double vhat = v / (1.0 - std::pow(0.999, t));
        rx -= 0.05 * mhat / (std::sqrt(vhat) + 1e-8);
        CHECK(std::fabs(x[0] - rx) <= 1e-10);
    }
}

TEST_CASE("fim weighted loss") {
    CHECK(fim_weighted_loss(Tensor({1, 4}), Tensor::full({1, 4}, 2.0)) == 0.0);

    // g = 1 recovers the plain squared error
    Tensor dz({1, 3}, {1.0, -2.0, 0.5});
    CHECK(fim_weighted_loss(dz, Tensor::full({1, 3}, 1.0)) == doctest::Approx(5.25));

    Tensor d2({1, 2}, {1.0, 2.0});
    Tensor g2({1, 2}, {3.0, 0.0});
    CHECK(fim_weighted_loss(d2, g2) == doctest::Approx(9.0));

    // batch mean over extent 0
    Tensor d3({2, 1}, {1.0, 1.0});
    Tensor g3({2, 1}, {2.0, 4.0});
    CHECK(fim_weighted_loss(d3, g3) == doctest::Approx((4.0 + 16.0) / 2.0));

    CHECK_THROWS_AS(fim_weighted_loss(Tensor({1, 2}), Tensor({1, 3})), usage_error);
}

TEST_CASE("collect_unit_io") {
    // identity unit: inputs equal outputs
    Tensor eye = Tensor::matrix(3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    NetworkModel id_model = one_layer(eye, Tensor({3}));
    Dataset ds;
    std::mt19937_64 rng(5);
    ds.inputs = Tensor::randn({8, 3}, rng);
    ds.labels = {0, 1, 2, 0, 1, 2, 0, 1};
    CalibrationSet calib = batches_from(ds, 3);
    const auto units = partition(id_model, Granularity::Block);
    REQUIRE(units.size() == 1);
    UnitCache cache = collect_unit_io(id_model, calib, units[0]);
    REQUIRE(cache.inputs.size() == 3);  // ceil(8/3)
    for (size_t b = 0; b < cache.inputs.size(); ++b) {
        for (int64_t i = 0; i < cache.inputs[b].numel(); ++i) {
            CHECK(cache.inputs[b][i] == cache.fp_outputs[b][i]);
        }
    }

    // last-layer gradients equal (softmax - onehot)/N
    std::mt19937_64 rng2(7);
    Tensor w = Tensor::randn({3, 5}, rng2);
    NetworkModel m = one_layer(w, Tensor::randn({3}, rng2, 0.1));
    Dataset ds2;
    ds2.inputs = Tensor::randn({6, 5}, rng2);
    ds2.labels = {0, 1, 2, 2, 1, 0};
    CalibrationSet calib2 = batches_from(ds2, 6);
    UnitCache c2 = collect_unit_io(m, calib2, partition(m, Granularity::Block)[0]);
    const Tensor logits = forward_logits(m, ds2.inputs);
    for (int64_t i = 0; i < 6; ++i) {
        double mx = logits.at2(i, 0);
        for (int64_t j = 1; j < 3; ++j) mx = std::max(mx, logits.at2(i, j));
        double denom = 0.0;
        for (int64_t j = 0; j < 3; ++j) denom += std::exp(logits.at2(i, j) - mx);
        for (int64_t j = 0; j < 3; ++j) {
            double want = std::exp(logits.at2(i, j) - mx) / denom;
            if (j == ds2.labels[static_cast<size_t>(i)]) want -= 1.0;
            want /= 6.0;
            CHECK(c2.out_grads[0].at2(i, j) == doctest::Approx(want).epsilon(1e-9));
        }
    }

    CHECK_THROWS_AS(collect_unit_io(m, CalibrationSet{}, partition(m, Granularity::Block)[0]),
                    usage_error);
}

TEST_CASE("grid-exact weights stay untouched at lambda zero") {
    const double s0 = 0.125;
    Tensor w({2, 3}, {2 * s0, -s0, 0.0, s0, -2 * s0, s0});
    NetworkModel m = one_layer(w, Tensor({2}));
    Dataset ds;
    std::mt19937_64 rng(11);
    ds.inputs = Tensor::randn({16, 3}, rng);
    for (int i = 0; i < 16; ++i) ds.labels.push_back(i % 2);
    CalibrationSet calib = batches_from(ds, 8);

    ModelQuantState qs;
    qs.layers.assign(1, LayerQuantState{});
    init_layer_quant(m, 0, 4, false, qs);
    // force the exact grid step
    qs.layers[0].qp.step = Tensor::scalar(s0);
    qs.layers[0].ada = adaround_init(w, qs.layers[0].qp);
    const Tensor v_before = qs.layers[0].ada.v;

    ReconConfig cfg;
    cfg.iterations = 50;
    cfg.batch_size = 8;
    cfg.lambda_reg = 0.0;
    cfg.seed = 3;
    const auto unit = partition(m, Granularity::Layer)[0];
    UnitCache cache = collect_unit_io(m, calib, unit);
    UnitReconResult res = reconstruct_unit(m, unit, cache, cfg, qs);
    CHECK(res.init_loss == doctest::Approx(0.0));
    CHECK(res.final_loss == doctest::Approx(0.0));
    for (int64_t i = 0; i < v_before.numel(); ++i) {
        CHECK(qs.layers[0].ada.v[i] == doctest::Approx(v_before[i]).epsilon(1e-9));
    }
}

TEST_CASE("3-weight unit reaches the brute-force optimal rounding") {
    std::mt19937_64 rng(13);
    Tensor w = Tensor::rand_uniform({1, 3}, rng, -0.6, 0.6);
    NetworkModel m = one_layer(w, Tensor({1}));
    m.num_classes = 1;
    Dataset ds;
    ds.inputs = Tensor::randn({32, 3}, rng);
    ds.labels.assign(32, 0);
    CalibrationSet calib = batches_from(ds, 32);
    const auto unit = partition(m, Granularity::Layer)[0];
    UnitCache cache = collect_unit_io(m, calib, unit);
    // single logit network: CE gradient is zero, so weight the output directly
    for (auto& g : cache.out_grads) g = Tensor::full(g.shape(), 1.0);

    ModelQuantState qs;
    qs.layers.assign(1, LayerQuantState{});
    init_layer_quant(m, 0, 2, false, qs);

    ReconConfig cfg;
    cfg.iterations = 600;
    cfg.batch_size = 32;
    cfg.seed = 17;
    UnitReconResult res = reconstruct_unit(m, unit, cache, cfg, qs);
    CHECK(res.binarized_fraction >= 0.99);

    // brute force over the 2^3 floor/ceil assignments
    const QuantParams& qp = qs.layers[0].qp;
    double best = std::numeric_limits<double>::infinity();
    for (int mask = 0; mask < 8; ++mask) {
        Tensor wq = w;
        for (int64_t i = 0; i < 3; ++i) {
            const double s = qp.step[0];
            const double t = std::floor(w[i] / s) + ((mask >> i) & 1);
            wq[i] = s * std::clamp(t, static_cast<double>(qp.qmin()), static_cast<double>(qp.qmax()));
        }
        NetworkModel cand = m;
        cand.layers[0].weight = wq;
        const Tensor z = forward_logits(cand, ds.inputs);
        const Tensor dz = sub(z, cache.fp_outputs[0]);
        best = std::min(best, fim_weighted_loss(dz, cache.out_grads[0]));
    }
    CHECK(res.final_loss <= best + 1e-6);
}

TEST_CASE("reconstruction with unit gradients degenerates to plain MSE") {
    std::mt19937_64 rng(23);
    Tensor w = Tensor::randn({4, 5}, rng);
    NetworkModel m = one_layer(w, Tensor::randn({4}, rng, 0.1));
    m.num_classes = 4;
    Dataset ds;
    ds.inputs = Tensor::randn({24, 5}, rng);
    for (int i = 0; i < 24; ++i) ds.labels.push_back(i % 4);
    CalibrationSet calib = batches_from(ds, 24);
    const auto unit = partition(m, Granularity::Layer)[0];
    UnitCache cache = collect_unit_io(m, calib, unit);
    for (auto& g : cache.out_grads) g = Tensor::full(g.shape(), 1.0);

    ModelQuantState qs;
    qs.layers.assign(1, LayerQuantState{});
    init_layer_quant(m, 0, 4, false, qs);
    ReconConfig cfg;
    cfg.iterations = 200;
    cfg.batch_size = 24;
    cfg.seed = 5;
    UnitReconResult res = reconstruct_unit(m, unit, cache, cfg, qs);

    // the engine objective equals an independently computed plain MSE
    NetworkModel deployed = m;
    deployed.layers[0].weight = qs.layers[0].deploy_weight(w);
    const Tensor z = forward_logits(deployed, ds.inputs);
    double mse = 0.0;
    for (int64_t i = 0; i < z.numel(); ++i) {
        const double d = z[i] - cache.fp_outputs[0][i];
        mse += d * d;
    }
    mse /= 24.0;
    CHECK(res.final_loss == doctest::Approx(mse).epsilon(1e-12));
}

TEST_CASE("calibrate_model propagates quantized inputs") {
    NetworkModel net = fold_bn([] {
        NetworkModel n = build_tiny_resnet(4, 3, 31);
        attach_synthetic_bn(n, 32);
        return n;
    }());
    ImageSpec spec;
    spec.classes = 3;
    spec.samples = 32;
    Dataset ds = synth_images(spec, 33, 34);
    CalibrationSet calib = batch_dataset(ds, 16);

    ReconConfig cfg;
    cfg.iterations = 40;
    cfg.batch_size = 16;
    cfg.weight_bits = 4;
    cfg.seed = 7;
    CalibrationResult result = calibrate_model(net, calib, cfg);

    // cached inputs for a later unit must equal the quantized model's actual
    // activations, byte for byte
    const auto units = partition(net, cfg.granularity);
    const ReconUnit& second = units[1];
    PrefixCapture cap = run_prefix(net, calib.batch_inputs[0], result.quant, second);
    Graph g;
    WeightFn wfn = [&](int layer, const Tensor& w) {
        return result.quant.layers[static_cast<size_t>(layer)].deploy_weight(w);
    };
    ForwardTrace trace = forward_trace(g, net, g.constant(calib.batch_inputs[0]), &wfn, nullptr);
    const Tensor& expect = g.value(trace.x_in[second.first]);
    REQUIRE(cap.input.numel() == expect.numel());
    for (int64_t i = 0; i < expect.numel(); ++i) CHECK(cap.input[i] == expect[i]);
}

TEST_CASE("calibration is deterministic for a fixed seed") {
    NetworkModel net = fold_bn([] {
        NetworkModel n = build_tiny_resnet(4, 3, 41);
        attach_synthetic_bn(n, 42);
        return n;
    }());
    ImageSpec spec;
    spec.classes = 3;
    spec.samples = 32;
    Dataset ds = synth_images(spec, 43, 44);
    CalibrationSet calib = batch_dataset(ds, 16);
    ReconConfig cfg;
    cfg.iterations = 30;
    cfg.batch_size = 16;
    cfg.weight_bits = 2;
    cfg.seed = 99;
    CalibrationResult a = calibrate_model(net, calib, cfg);
    CalibrationResult b = calibrate_model(net, calib, cfg);
    for (int l = 0; l < net.layer_count(); ++l) {
        const Tensor wa = a.quant.layers[static_cast<size_t>(l)].deploy_weight(net.layers[static_cast<size_t>(l)].weight);
        const Tensor wb = b.quant.layers[static_cast<size_t>(l)].deploy_weight(net.layers[static_cast<size_t>(l)].weight);
        for (int64_t i = 0; i < wa.numel(); ++i) CHECK(wa[i] == wb[i]);
    }
}

TEST_CASE("calibrate_model rejects unfolded batchnorm") {
    NetworkModel net = build_tiny_resnet(4, 3, 51);
    attach_synthetic_bn(net, 52);
    ImageSpec spec;
    spec.classes = 3;
    spec.samples = 16;
    Dataset ds = synth_images(spec, 53, 54);
    CalibrationSet calib = batch_dataset(ds, 16);
    ReconConfig cfg;
    CHECK_THROWS_AS(calibrate_model(net, calib, cfg), precondition_error);
}

TEST_CASE("block reconstruction beats rounding-to-nearest on the cache") {
    NetworkModel net = fold_bn([] {
        NetworkModel n = build_tiny_resnet(8, 4, 61);
        ImageSpec spec;
        spec.samples = 512;
        Dataset train = synth_images(spec, 63, 64);
        TrainConfig tc;
        tc.steps = 300;
        tc.seed = 65;
        train_model(n, train, tc);
        attach_synthetic_bn(n, 62);
        return n;
    }());
    ImageSpec spec;
    spec.samples = 64;
    Dataset ds = synth_images(spec, 63, 66);
    CalibrationSet calib = batch_dataset(ds, 32);

    const auto units = partition(net, Granularity::Block);
    const ReconUnit& block = units[1];
    UnitCache cache = collect_unit_io(net, calib, block);
    ModelQuantState qs;
    qs.layers.assign(net.layers.size(), LayerQuantState{});
    for (int l : block.quant_layers) init_layer_quant(net, l, 2, false, qs);

    ReconConfig cfg;
    cfg.iterations = 500;
    cfg.batch_size = 32;
    cfg.weight_bits = 2;
    cfg.seed = 67;
    UnitReconResult res = reconstruct_unit(net, block, cache, cfg, qs);
    // init_loss is the RTN baseline (rounding variables start at the nearest
    // assignment); the optimized rounding must not be worse
    CHECK(res.final_loss < res.init_loss);
    CHECK(res.binarized_fraction >= 0.99);
}
