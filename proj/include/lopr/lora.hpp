// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "lopr/kernels.hpp"
#include "lopr/model.hpp"

namespace lopr {

enum class LoraPlacement { QV, FF };

inline std::string placement_name(LoraPlacement p) { return p == LoraPlacement::QV ? "qv" : "ff"; }

inline LoraPlacement parse_placement(const std::string& s) {
    if (s == "qv" || s == "QV") {
        return LoraPlacement::QV;
    }
    if (s == "ff" || s == "FF") {
        return LoraPlacement::FF;
    }
    throw ConfigError("unknown LoRA placement '" + s + "'");
}

struct LoraConfig {
    int rank = 16;
    double alpha = 32.0;
    LoraPlacement placement = LoraPlacement::FF;

    double scaling() const { return alpha / static_cast<double>(rank); }

    void validate() const {
        if (rank < 1) {
            throw ConfigError("lora: rank must be >= 1");
        }
        if (!(alpha > 0.0) || !std::isfinite(alpha / rank)) {
            throw ConfigError("lora: alpha/r must be finite and positive");
        }
    }
};

namespace detail {

// (name, d_out, d_in) of every injection target under the placement rule:
// QV covers the query and value projections of all attention blocks
// (self and cross); FF covers both dense layers of every feed-forward.
template <typename S>
std::vector<std::tuple<std::string, int, int>> lora_targets(const TransformerModel<S>& model,
                                                            LoraPlacement placement) {
    const ArchDescriptor& a = model.descriptor();
    std::vector<std::tuple<std::string, int, int>> out;
    auto attn_targets = [&](const AttentionBlock<S>& blk) {
        out.emplace_back(blk.q.name, a.d_model, a.d_model);
        out.emplace_back(blk.v.name, a.d_model, a.d_model);
    };
    auto ffn_targets = [&](const FeedForward<S>& ffn) {
        out.emplace_back(ffn.fc1.name, a.d_ffn, a.d_model);
        out.emplace_back(ffn.fc2.name, a.d_model, a.d_ffn);
    };
    for (const auto& layer : model.encoder()) {
        if (placement == LoraPlacement::QV) {
            attn_targets(layer.attn);
        } else {
            ffn_targets(layer.ffn);
        }
    }
    for (const auto& layer : model.decoder()) {
        if (placement == LoraPlacement::QV) {
            attn_targets(layer.self_attn);
            attn_targets(layer.cross_attn);
        } else {
            ffn_targets(layer.ffn);
        }
    }
    return out;
}

} // namespace detail

// Frozen base plus trainable adapters; forward routes through the adapter
// set so each target computes W0*x + (alpha/r) * W_up * W_down * x.
template <typename S>
struct AdaptedModel {
    TransformerModel<S> base;
    AdapterSet<S> adapters;
    LoraConfig config;

    Var<S> forward(const IdMatrix& src, const std::vector<int>& src_len, const IdMatrix& tgt_in) const {
        return base.forward(src, src_len, tgt_in, &adapters);
    }

    // down/up pairs in target order; the only trainable tensors
    std::vector<NamedParam<S>> named_adapter_params() const {
        std::vector<NamedParam<S>> out;
        for (const auto& target : target_order) {
            const LoraAdapter<S>& a = adapters.items.at(target);
            out.push_back({target + ".lora_down", a.down});
            out.push_back({target + ".lora_up", a.up});
        }
        return out;
    }

    std::int64_t trainable_param_count() const {
        std::int64_t n = 0;
        for (const auto& p : named_adapter_params()) {
            n += p.var.numel();
        }
        return n;
    }

    std::vector<std::string> target_order;
};

// Freezes every base parameter and attaches zero-initialized adapters:
// W_down ~ normal(0, 0.02^2), W_up = 0, so the adapted forward equals the
// base forward exactly at injection time.
template <typename S>
AdaptedModel<S> inject(TransformerModel<S> model, const LoraConfig& config, std::uint64_t seed) {
    config.validate();
    AdaptedModel<S> adapted;
    adapted.config = config;

    const auto targets = detail::lora_targets(model, config.placement);
    RandomSource rng(seed);
    for (const auto& [name, d_out, d_in] : targets) {
        if (config.rank > d_in || config.rank > d_out) {
            throw ConfigError("lora: rank " + std::to_string(config.rank) + " exceeds target '" + name +
                              "' with dims " + std::to_string(d_out) + "x" + std::to_string(d_in));
        }
        Tensor<S> down({config.rank, d_in});
        for (std::int64_t i = 0; i < down.numel(); ++i) {
            down[i] = static_cast<S>(rng.normal(0.0, kInitStd));
        }
        Tensor<S> up({d_out, config.rank}, S(0));
        LoraAdapter<S> a{Var<S>::leaf(std::move(down), /*requires_grad=*/true),
                         Var<S>::leaf(std::move(up), /*requires_grad=*/true)};
        adapted.adapters.items.emplace(name, std::move(a));
        adapted.target_order.push_back(name);
    }
    adapted.adapters.scaling = static_cast<S>(config.scaling());

    model.set_all_requires_grad(false);
    adapted.base = std::move(model);
    return adapted;
}

// Folds every adapter into its frozen target: W = W0 + (alpha/r)*W_up*W_down.
// Returns a plain model; all other parameters are copied unchanged.
template <typename S>
TransformerModel<S> merge(const AdaptedModel<S>& adapted) {
    TransformerModel<S> merged = adapted.base.clone();
    merged.set_all_requires_grad(true);
    for (const auto& target : adapted.target_order) {
        const LoraAdapter<S>& a = adapted.adapters.items.at(target);
        Var<S> w = merged.param(target + ".w");
        const int d_out = a.up.shape()[0];
        const int r = a.up.shape()[1];
        const int d_in = a.down.shape()[1];
        Tensor<S> delta({d_out, d_in});
        kern::gemm_nn(a.up.value().data(), a.down.value().data(), delta.data(), d_out, d_in, r);
        Tensor<S>& dst = w.mutable_value();
        const S s = adapted.adapters.scaling;
        for (std::int64_t i = 0; i < dst.numel(); ++i) {
            dst[i] += s * delta[i];
        }
    }
    return merged;
}

// Closed-form trainable-parameter count: r*(d_in + d_out) per target.
inline std::int64_t count_lora_params(const ArchDescriptor& a, const LoraConfig& config) {
    a.validate();
    config.validate();
    const std::int64_t r = config.rank;
    const std::int64_t d = a.d_model;
    const std::int64_t dff = a.d_ffn;
    if (config.placement == LoraPlacement::QV) {
        const std::int64_t blocks = a.n_enc + 2LL * a.n_dec; // decoder adds cross attention
        return blocks * 2 * (r * (d + d));
    }
    const std::int64_t ffns = a.n_enc + a.n_dec;
    return ffns * (r * (d + dff) + r * (dff + d));
}

} // namespace lopr
