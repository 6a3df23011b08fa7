// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "lopr/errors.hpp"

namespace lopr {

using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& shape) {
    std::int64_t n = 1;
    for (int d : shape) {
        if (d <= 0) {
            throw ShapeError("non-positive dimension in shape");
        }
        n *= d;
    }
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << shape[i] << (i + 1 < shape.size() ? "x" : "");
    }
    os << ']';
    return os.str();
}

// Dense row-major n-d array. Plain value storage; gradient bookkeeping
// lives on autograd nodes.
template <typename S>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, S fill = S(0))
        : shape_(std::move(shape)), data_(static_cast<std::size_t>(shape_numel(shape_)), fill) {}

    Tensor(Shape shape, std::vector<S> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (static_cast<std::int64_t>(data_.size()) != shape_numel(shape_)) {
            throw ShapeError("data length does not match shape " + shape_str(shape_));
        }
    }

    static Tensor scalar(S v) { return Tensor({1}, std::vector<S>{v}); }

    const Shape& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
    std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    S* data() { return data_.data(); }
    const S* data() const { return data_.data(); }
    std::vector<S>& vec() { return data_; }
    const std::vector<S>& vec() const { return data_; }

    S& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
    S operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

    S& at2(int i, int j) { return data_[static_cast<std::size_t>(i) * dim(1) + j]; }
    S at2(int i, int j) const { return data_[static_cast<std::size_t>(i) * dim(1) + j]; }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    void fill(S v) { std::fill(data_.begin(), data_.end(), v); }

    bool all_finite() const {
        for (S v : data_) {
            if (!std::isfinite(v)) {
                return false;
            }
        }
        return true;
    }

    template <typename T>
    Tensor<T> cast() const {
        std::vector<T> out(data_.size());
        for (std::size_t i = 0; i < data_.size(); ++i) {
            out[i] = static_cast<T>(data_[i]);
        }
        return Tensor<T>(shape_, std::move(out));
    }

private:
    Shape shape_;
    std::vector<S> data_;
};

// Integer id matrix (token batches, targets).
struct IdMatrix {
    int rows = 0;
    int cols = 0;
    std::vector<int> ids;

    IdMatrix() = default;
    IdMatrix(int r, int c, int fill = 0) : rows(r), cols(c), ids(static_cast<std::size_t>(r) * c, fill) {}

    int& at(int r, int c) { return ids[static_cast<std::size_t>(r) * cols + c]; }
    int at(int r, int c) const { return ids[static_cast<std::size_t>(r) * cols + c]; }
};

// Deterministic random source. Box-Muller on top of mt19937_64 so draws
// depend only on the seed and call sequence.
class RandomSource {
public:
    explicit RandomSource(std::uint64_t seed) : engine_(seed) {}

    double uniform01() {
        return (static_cast<double>(engine_() >> 11)) * (1.0 / 9007199254740992.0);
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    std::uint64_t next_u64() { return engine_(); }

    // uniform integer in [0, n)
    std::int64_t below(std::int64_t n) {
        return static_cast<std::int64_t>(uniform01() * static_cast<double>(n)) % n;
    }

    double normal(double mean = 0.0, double stddev = 1.0) {
        if (have_spare_) {
            have_spare_ = false;
            return mean + stddev * spare_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform01();
        } while (u1 <= 1e-300);
        const double u2 = uniform01();
        const double mag = std::sqrt(-2.0 * std::log(u1));
        const double two_pi = 6.283185307179586476925286766559;
        spare_ = mag * std::sin(two_pi * u2);
        have_spare_ = true;
        return mean + stddev * mag * std::cos(two_pi * u2);
    }

    // redraw until within cut standard deviations
    double truncated_normal(double stddev, double cut = 2.0) {
        double v = 0.0;
        do {
            v = normal(0.0, stddev);
        } while (std::abs(v) > cut * stddev);
        return v;
    }

private:
    std::mt19937_64 engine_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

} // namespace lopr
