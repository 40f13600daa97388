// Copyright (C) 2026 The blockquant authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace bq {

// Dense row-major tensor of doubles. The calibration and oracle paths run in
// 64-bit throughout; container files store 32-bit floats and convert on load.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<int64_t> shape);
    Tensor(std::vector<int64_t> shape, std::vector<double> data);

    static Tensor zeros(std::vector<int64_t> shape) { return Tensor(std::move(shape)); }
    static Tensor full(std::vector<int64_t> shape, double value);
    static Tensor scalar(double value) { return Tensor({1}, {value}); }
    static Tensor from(std::initializer_list<double> values);
    // Row-major m x n matrix literal.
    static Tensor matrix(int64_t m, int64_t n, std::initializer_list<double> values);

    const std::vector<int64_t>& shape() const { return shape_; }
    int64_t dim(size_t i) const { return shape_.at(i); }
    size_t rank() const { return shape_.size(); }
    int64_t numel() const { return static_cast<int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::span<double> span() { return data_; }
    std::span<const double> span() const { return data_; }
    double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    // Element access for low-rank tensors (tests and small kernels).
    double& at2(int64_t i, int64_t j) { return data_[static_cast<size_t>(i * shape_[1] + j)]; }
    double at2(int64_t i, int64_t j) const { return data_[static_cast<size_t>(i * shape_[1] + j)]; }
    double& at4(int64_t n, int64_t c, int64_t h, int64_t w);
    double at4(int64_t n, int64_t c, int64_t h, int64_t w) const;

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
    // View the same data under a different shape (copies the buffer).
    Tensor reshaped(std::vector<int64_t> shape) const;

    bool all_finite() const;
    double max_abs() const;
    double sum() const;
    std::string shape_str() const;

    static Tensor randn(std::vector<int64_t> shape, std::mt19937_64& rng, double stddev = 1.0);
    static Tensor rand_uniform(std::vector<int64_t> shape, std::mt19937_64& rng, double lo, double hi);

private:
    std::vector<int64_t> shape_;
    std::vector<double> data_;
};

int64_t shape_numel(const std::vector<int64_t>& shape);

// Elementwise arithmetic on matching shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);

// c = a * b for 2-D operands, optional transposes.
Tensor matmul2d(const Tensor& a, const Tensor& b, bool trans_a = false, bool trans_b = false);

// Central-difference gradient of a scalar function, one probe per coordinate.
// Kept independent of the autograd path so it can serve as its oracle.
template <typename F>
Tensor finite_diff_grad(F&& f, const Tensor& x, double h) {
    if (h <= 0.0) throw std::invalid_argument("finite_diff_grad: h must be positive");
    Tensor grad(x.shape());
    Tensor probe = x;
    for (int64_t i = 0; i < x.numel(); ++i) {
        const double saved = probe[i];
        probe[i] = saved + h;
        const double up = f(probe);
        probe[i] = saved - h;
        const double down = f(probe);
        probe[i] = saved;
        grad[i] = (up - down) / (2.0 * h);
    }
    return grad;
}

}  // namespace bq
