// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstring>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "lopr/autograd.hpp"
#include "lopr/tensor.hpp"

namespace lopr {

template <typename S>
struct GradCheckInput {
    std::string name;
    Tensor<S> value;
    bool trainable = true;
};

// Scalar-valued graph builder over named leaves.
template <typename S>
using GraphBuilder = std::function<Var<S>(const std::map<std::string, Var<S>>&)>;

// Central-difference check of reverse-mode gradients. Returns the max over
// all trainable coordinates of
//   |analytic - central| / (|analytic| + |central| + 1e-12).
// Verifies the builder is deterministic across two probe evaluations and
// that frozen leaves receive no gradient.
template <typename S>
double finite_diff_check(const GraphBuilder<S>& f, const std::vector<GradCheckInput<S>>& point,
                         S epsilon) {
    auto bind = [&](const std::vector<GradCheckInput<S>>& inputs) {
        std::map<std::string, Var<S>> leaves;
        for (const auto& in : inputs) {
            leaves.emplace(in.name, Var<S>::leaf(in.value, in.trainable));
        }
        return leaves;
    };

    auto eval_scalar = [&](const std::vector<GradCheckInput<S>>& inputs) -> S {
        NoGradGuard ng;
        auto leaves = bind(inputs);
        Var<S> y = f(leaves);
        if (y.numel() != 1) {
            throw ShapeError("finite_diff_check: builder must be scalar-valued");
        }
        return y.value()[0];
    };

    // determinism probe
    {
        const S y1 = eval_scalar(point);
        const S y2 = eval_scalar(point);
        if (std::memcmp(&y1, &y2, sizeof(S)) != 0) {
            throw NumericError("finite_diff_check: builder is non-deterministic between probes");
        }
    }

    // analytic gradients
    auto leaves = bind(point);
    Var<S> y = f(leaves);
    if (y.numel() != 1) {
        throw ShapeError("finite_diff_check: builder must be scalar-valued");
    }
    backward(y);
    for (const auto& in : point) {
        const Var<S>& leaf = leaves.at(in.name);
        if (!in.trainable && leaf.has_grad()) {
            throw NumericError("finite_diff_check: frozen leaf '" + in.name + "' received a gradient");
        }
    }

    double max_err = 0.0;
    std::vector<GradCheckInput<S>> probe = point;
    for (std::size_t which = 0; which < point.size(); ++which) {
        if (!point[which].trainable) {
            continue;
        }
        const Var<S>& leaf = leaves.at(point[which].name);
        const Tensor<S>& g = leaf.grad();
        const std::int64_t n = point[which].value.numel();
        for (std::int64_t i = 0; i < n; ++i) {
            const S saved = probe[which].value[i];
            probe[which].value[i] = saved + epsilon;
            const S up = eval_scalar(probe);
            probe[which].value[i] = saved - epsilon;
            const S down = eval_scalar(probe);
            probe[which].value[i] = saved;
            const double central = (static_cast<double>(up) - static_cast<double>(down)) /
                                   (2.0 * static_cast<double>(epsilon));
            const double analytic = leaf.has_grad() ? static_cast<double>(g[i]) : 0.0;
            const double err =
                std::abs(analytic - central) / (std::abs(analytic) + std::abs(central) + 1e-12);
            max_err = std::max(max_err, err);
        }
    }
    return max_err;
}

} // namespace lopr
