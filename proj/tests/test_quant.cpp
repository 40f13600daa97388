// Copyright (C) 2026 The blockquant authors
// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <random>

#include "blockquant/errors.hpp"
#include "blockquant/quant.hpp"

using namespace bq;

namespace {
QuantParams wq(int bits, double step) { return QuantParams::weights(bits, Tensor::scalar(step)); }

std::vector<double> grid_points(const QuantParams& q, double step) {
    std::vector<double> pts;
    for (int64_t k = q.qmin(); k <= q.qmax(); ++k) pts.push_back(step * static_cast<double>(k));
    return pts;
}
}  // namespace

TEST_CASE("quantize_rtn basics") {
    CHECK(quantize_rtn(Tensor::scalar(0.0), wq(4, 0.37))[0] == 0.0);

    // b=2, s=1: grid {-2,-1,0,1}; 1.7 clips to 1
    QuantParams q2 = wq(2, 1.0);
    CHECK(quantize_rtn(Tensor::scalar(1.7), q2)[0] == 1.0);
    CHECK(quantize_rtn(Tensor::scalar(-2.9), q2)[0] == -2.0);

    QuantParams bad = wq(4, 1.0);
    bad.step[0] = -1.0;
    CHECK_THROWS_AS(quantize_rtn(Tensor::scalar(1.0), bad), usage_error);
}

TEST_CASE("rtn equals exhaustive grid argmin") {
    std::mt19937_64 rng(42);
    for (int bits : {2, 3, 4, 8}) {
        QuantParams q = wq(bits, 0.173);
        Tensor w = Tensor::randn({200}, rng, 0.6);
        Tensor out = quantize_rtn(w, q);
        const auto grid = grid_points(q, 0.173);
        for (int64_t i = 0; i < w.numel(); ++i) {
            double best = std::numeric_limits<double>::infinity();
            for (double g : grid) best = std::min(best, std::fabs(g - w[i]));
            CHECK(std::fabs(out[i] - w[i]) <= best + 1e-15);
        }
    }
}

TEST_CASE("rtn idempotence and grid membership") {
    std::mt19937_64 rng(7);
    for (int bits : {2, 3, 4, 8}) {
        QuantParams q = wq(bits, 0.00931);
        Tensor w = Tensor::randn({500}, rng);
        Tensor once = quantize_rtn(w, q);
        Tensor twice = quantize_rtn(once, q);
        const auto grid = grid_points(q, 0.00931);
        for (int64_t i = 0; i < w.numel(); ++i) {
            CHECK(once[i] == twice[i]);  // bit-exact
            double best = std::numeric_limits<double>::infinity();
            for (double g : grid) best = std::min(best, std::fabs(g - once[i]));
            CHECK(best == 0.0);
        }
    }
}

TEST_CASE("rtn error bound inside range") {
    std::mt19937_64 rng(9);
    QuantParams q = wq(4, 0.1);
    Tensor w = Tensor::rand_uniform({300}, rng, -0.7, 0.7);  // all inside [n*s, p*s]
    Tensor out = quantize_rtn(w, q);
    for (int64_t i = 0; i < w.numel(); ++i) CHECK(std::fabs(out[i] - w[i]) <= 0.05 + 1e-12);
}

TEST_CASE("init_step_size") {
    std::mt19937_64 rng(21);
    Tensor w = Tensor::rand_uniform({4000}, rng, -1.0, 1.0);
    const double s = init_step_size(w, 8);
    const double ref = w.max_abs() / 127.0;
    CHECK(s > 0.9 * ref);
    CHECK(s < 1.01 * ref);

    // exactly representable weights recover a zero-error step
    const double s0 = 0.05;
    Tensor grid_w = Tensor::from({-2 * s0, -s0, 0.0, s0, s0, -s0});
    const double rec = init_step_size(grid_w, 2);
    Tensor back = quantize_rtn(grid_w, wq(2, rec));
    for (int64_t i = 0; i < grid_w.numel(); ++i) {
        CHECK(back[i] == doctest::Approx(grid_w[i]).epsilon(1e-12));
    }

    // returned s attains the scan minimum
    const double base = w.max_abs() / 127.0;
    double best_err = std::numeric_limits<double>::infinity();
    double best_s = 0.0;
    for (int c = 0; c < 100; ++c) {
        const double cand = (0.2 + 0.01 * (c + 1)) * base;
        Tensor qw = quantize_rtn(w, wq(8, cand));
        double err = 0.0;
        for (int64_t i = 0; i < w.numel(); ++i) err += (qw[i] - w[i]) * (qw[i] - w[i]);
        if (err < best_err) {
            best_err = err;
            best_s = cand;
        }
    }
    CHECK(s == best_s);

    CHECK_THROWS_AS(init_step_size(Tensor({16}), 4), usage_error);
}

TEST_CASE("adaround apply saturated directions") {
    std::mt19937_64 rng(31);
    Tensor w = Tensor::randn({40}, rng, 0.3);
    QuantParams q = wq(4, 0.07);
    AdaRoundState floor_state;
    floor_state.v = Tensor::full(w.shape(), -10.0);  // sigma = 0
    Tensor floored = adaround_apply(w, q, floor_state);
    AdaRoundState ceil_state;
    ceil_state.v = Tensor::full(w.shape(), 10.0);  // sigma = 1
    Tensor ceiled = adaround_apply(w, q, ceil_state);
    for (int64_t i = 0; i < w.numel(); ++i) {
        const double f = std::floor(w[i] / 0.07);
        CHECK(floored[i] ==
              doctest::Approx(0.07 * std::clamp(f, -8.0, 7.0)).epsilon(1e-12));
        CHECK(ceiled[i] ==
              doctest::Approx(0.07 * std::clamp(f + 1.0, -8.0, 7.0)).epsilon(1e-12));
    }
    // saturated v matches brute-force ceil exactly
    for (int64_t i = 0; i < w.numel(); ++i) {
        const double brute = 0.07 * std::clamp(std::floor(w[i] / 0.07) + 1.0, -8.0, 7.0);
        CHECK(ceiled[i] == brute);
    }
}

TEST_CASE("adaround init reproduces the weight and hard rounding is adjacent") {
    std::mt19937_64 rng(33);
    Tensor w = Tensor::rand_uniform({64}, rng, -0.4, 0.4);
    QuantParams q = wq(4, 0.07);
    AdaRoundState st = adaround_init(w, q);
    Tensor soft = adaround_apply(w, q, st);
    for (int64_t i = 0; i < w.numel(); ++i) {
        CHECK(soft[i] == doctest::Approx(w[i]).epsilon(1e-9));
    }
    Tensor hard = adaround_hard(w, q, st);
    for (int64_t i = 0; i < w.numel(); ++i) {
        const double f = std::floor(w[i] / 0.07);
        const bool is_floor = hard[i] == doctest::Approx(0.07 * f).epsilon(1e-12);
        const bool is_ceil = hard[i] == doctest::Approx(0.07 * (f + 1)).epsilon(1e-12);
        CHECK((is_floor || is_ceil));
    }
    CHECK_THROWS_AS(adaround_apply(Tensor({3}), q, st), usage_error);
}

TEST_CASE("adaround regularizer") {
    AdaRoundState st;
    st.lambda = 1.0;
    st.v = Tensor::full({10}, -30.0);  // sigma exactly 0 after rectification
    CHECK(adaround_reg(st, 5.0) == doctest::Approx(0.0));

    // sigma = 0.5 -> penalty = count
    AdaRoundState half;
    half.lambda = 1.0;
    // sigma(v) = 0.5 => sigmoid(v) = (0.5 + 0.1)/1.2 = 0.5 => v = 0
    half.v = Tensor({7});
    CHECK(adaround_reg(half, 3.0) == doctest::Approx(7.0));
    CHECK(adaround_reg(half, 17.0) == doctest::Approx(7.0));

    // at sigma = 0.9 the penalty 1 - 0.8^beta shrinks as beta falls
    AdaRoundState point9;
    point9.lambda = 1.0;
    point9.v = Tensor({1});
    const double target = (0.9 + 0.1) / 1.2;
    point9.v[0] = std::log(target / (1.0 - target));
    const double p_high = adaround_reg(point9, 8.0);
    const double p_low = adaround_reg(point9, 2.0);
    CHECK(p_high > p_low);
}

TEST_CASE("beta schedule") {
    const int total = 1000;
    const double bs = 20.0, be = 2.0, warm = 0.2;
    CHECK(beta_schedule(0, total, bs, be, warm) == bs);
    CHECK(beta_schedule(199, total, bs, be, warm) == bs);
    CHECK(beta_schedule(200, total, bs, be, warm) == doctest::Approx(bs));
    CHECK(beta_schedule(total - 1, total, bs, be, warm) == doctest::Approx(be).epsilon(1e-3));
    // half-cosine midpoint
    CHECK(beta_schedule(600, total, bs, be, warm) == doctest::Approx((bs + be) / 2).epsilon(1e-9));
    // monotone nonincreasing
    double prev = bs;
    for (int i = 0; i < total; ++i) {
        const double b = beta_schedule(i, total, bs, be, warm);
        CHECK(b <= prev + 1e-12);
        prev = b;
    }
    CHECK(!reg_active(100, total, warm));
    CHECK(reg_active(200, total, warm));
    CHECK_THROWS_AS(beta_schedule(total, total, bs, be, warm), usage_error);
}

TEST_CASE("act_fake_quant") {
    QuantParams q = QuantParams::activations(4, 0.2);
    CHECK(act_fake_quant(Tensor::scalar(0.0), q)[0] == 0.0);
    CHECK(act_fake_quant(Tensor::scalar(99.0), q)[0] == doctest::Approx(15 * 0.2));
    CHECK(act_fake_quant(Tensor::scalar(-1.0), q)[0] == 0.0);

    std::mt19937_64 rng(77);
    Tensor x = Tensor::rand_uniform({400}, rng, 0.0, 4.0);
    Tensor out = act_fake_quant(x, q);
    for (int64_t i = 0; i < x.numel(); ++i) {
        const double k = out[i] / 0.2;
        CHECK(k == doctest::Approx(std::round(k)).epsilon(1e-12));
        CHECK(k >= 0.0);
        CHECK(k <= 15.0);
        if (x[i] <= 15 * 0.2) CHECK(std::fabs(out[i] - x[i]) <= 0.1 + 1e-12);
    }
}

TEST_CASE("act_step_grad branches") {
    QuantParams q = QuantParams::activations(4, 0.25);
    // x <= 0 contributes exactly zero
    Tensor xneg = Tensor::from({-0.5, 0.0, -2.0});
    Tensor up = Tensor::from({3.0, 5.0, -1.0});
    CHECK(act_step_grad(xneg, q, up) == 0.0);

    // exactly on an interior grid point contributes zero
    Tensor xon = Tensor::from({0.5});  // 0.5/0.25 = 2
    CHECK(act_step_grad(xon, q, Tensor::from({7.0})) == doctest::Approx(0.0));

    // clipped high contributes qmax
    Tensor xhi = Tensor::from({100.0});
    CHECK(act_step_grad(xhi, q, Tensor::from({2.0})) == doctest::Approx(2.0 * 15.0));

    CHECK_THROWS_AS(act_step_grad(xon, q, up), usage_error);
}

TEST_CASE("act_step_grad matches finite differences off rounding boundaries") {
    std::mt19937_64 rng(55);
    int done = 0;
    while (done < 20) {
        Tensor x = Tensor::rand_uniform({32}, rng, 0.01, 3.0);
        const double s = 0.21;
        bool ok = true;
        for (int64_t i = 0; i < x.numel(); ++i) {
            const double frac = std::fabs(x[i] / s - std::round(x[i] / s));
            if (frac <= 0.05 || frac >= 0.45) ok = false;
        }
        if (!ok) continue;
        ++done;
        QuantParams q = QuantParams::activations(4, s);
        Tensor upstream = Tensor::randn({32}, rng);
        const double got = act_step_grad(x, q, upstream);
        const double h = 1e-6 * s;
        auto loss_at = [&](double step) {
            QuantParams qq = QuantParams::activations(4, step);
            const Tensor xq = act_fake_quant(x, qq);
            double acc = 0.0;
            for (int64_t i = 0; i < x.numel(); ++i) acc += upstream[i] * xq[i];
            return acc;
        };
        const double fd = (loss_at(s + h) - loss_at(s - h)) / (2.0 * h);
        CHECK(got == doctest::Approx(fd).epsilon(1e-4));
    }
}

TEST_CASE("graph act fake quant propagates both gradients") {
    std::mt19937_64 rng(99);
    Tensor x = Tensor::rand_uniform({1, 16}, rng, 0.05, 2.5);
    const double s = 0.19;
    Graph g;
    NodeId xn = g.param(x);
    NodeId sn = g.param(Tensor::scalar(s));
    NodeId out = graph_act_fake_quant(g, xn, sn, 4);
    Tensor upstream = Tensor::randn({1, 16}, rng);
    NodeId loss = g.sum(g.mul(out, g.constant(upstream)));
    g.backward(loss);
    // step gradient agrees with the standalone op
    const double expect = act_step_grad(x, QuantParams::activations(4, s), upstream);
    CHECK(g.grad(sn)[0] == doctest::Approx(expect).epsilon(1e-12));
    // straight-through: in-range x passes the upstream gradient
    for (int64_t i = 0; i < x.numel(); ++i) {
        if (x[i] > 0.0 && x[i] <= 15 * s) {
            CHECK(g.grad(xn)[i] == doctest::Approx(upstream[i]));
        }
    }
}

TEST_CASE("graph adaround weight gradient vs finite differences") {
    std::mt19937_64 rng(123);
    Tensor w = Tensor::rand_uniform({24}, rng, -0.5, 0.5);
    QuantParams q = wq(4, 0.11);
    AdaRoundState st = adaround_init(w, q);
    Tensor upstream = Tensor::randn({24}, rng);
    Graph g;
    NodeId vn = g.param(st.v);
    NodeId wn = graph_adaround_weight(g, w, q, vn, st.zeta, st.gamma);
    g.backward(g.sum(g.mul(wn, g.constant(upstream))));
    const Tensor got = g.grad(vn);
    const Tensor fd = finite_diff_grad(
        [&](const Tensor& probe) {
            AdaRoundState ps = st;
            ps.v = probe;
            const Tensor soft = adaround_apply(w, q, ps);
            double acc = 0.0;
            for (int64_t i = 0; i < soft.numel(); ++i) acc += upstream[i] * soft[i];
            return acc;
        },
        st.v, 1e-6);
    for (int64_t i = 0; i < got.numel(); ++i) {
        CHECK(got[i] == doctest::Approx(fd[i]).epsilon(1e-5));
    }
}
