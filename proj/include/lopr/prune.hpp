// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <unordered_map>
#include <vector>

#include "lopr/model.hpp"

namespace lopr {

// Per-stack layer drop plan. Dropped layers are the even indices in
// [4, n-2]; layers 1-3 and the top layer always survive for n >= 6.
struct PrunePlan {
    int n = 0;
    std::vector<int> kept;    // ascending, 1-based
    std::vector<int> dropped; // complement

    double dropped_fraction() const {
        return n == 0 ? 0.0 : static_cast<double>(dropped.size()) / static_cast<double>(n);
    }
};

inline PrunePlan prune_plan(int n) {
    if (n < 1) {
        throw ConfigError("prune_plan: layer count must be >= 1");
    }
    PrunePlan plan;
    plan.n = n;
    for (int i = 1; i <= n; ++i) {
        const bool drop = (i % 2 == 0) && i >= 4 && i <= n - 2;
        (drop ? plan.dropped : plan.kept).push_back(i);
    }
    return plan;
}

// Applies the same plan symmetrically to encoder and decoder. Surviving
// layers keep their tensors bitwise and their original 1-based indices.
template <typename S>
TransformerModel<S> apply_prune(const TransformerModel<S>& model, const PrunePlan& plan) {
    const int enc_depth = static_cast<int>(model.encoder().size());
    const int dec_depth = static_cast<int>(model.decoder().size());
    if (enc_depth != plan.n || dec_depth != plan.n) {
        throw ConfigError("apply_prune: plan depth " + std::to_string(plan.n) +
                          " does not match model stacks (" + std::to_string(enc_depth) + "+" +
                          std::to_string(dec_depth) + ")");
    }
    std::unordered_map<std::string, Tensor<S>> tensors;
    for (const auto& p : model.named_params()) {
        tensors.emplace(p.name, p.var.value());
    }
    return TransformerModel<S>::from_tensors(model.descriptor(), tensors, plan.kept, plan.kept);
}

} // namespace lopr
