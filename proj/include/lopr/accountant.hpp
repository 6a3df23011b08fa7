// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>

#include "lopr/lora.hpp"
#include "lopr/model.hpp"
#include "lopr/prune.hpp"

namespace lopr {

enum class Regime { full, prune, lora, lora_prune };

inline std::string regime_name(Regime r) {
    switch (r) {
    case Regime::full:
        return "full";
    case Regime::prune:
        return "prune";
    case Regime::lora:
        return "lora";
    case Regime::lora_prune:
        return "lora+prune";
    }
    return "?";
}

inline Regime parse_regime(const std::string& s) {
    if (s == "full") {
        return Regime::full;
    }
    if (s == "prune" || s == "l-prun" || s == "lprun") {
        return Regime::prune;
    }
    if (s == "lora") {
        return Regime::lora;
    }
    if (s == "lora+prune" || s == "lora_prune" || s == "lora+l-prun") {
        return Regime::lora_prune;
    }
    throw ConfigError("unknown regime '" + s + "'");
}

inline bool regime_has_lora(Regime r) { return r == Regime::lora || r == Regime::lora_prune; }
inline bool regime_has_prune(Regime r) { return r == Regime::prune || r == Regime::lora_prune; }

// Closed-form total parameter count; matches the model's enumeration exactly.
inline std::int64_t count_params(const ArchDescriptor& a) {
    a.validate();
    const std::int64_t d = a.d_model;
    const std::int64_t dff = a.d_ffn;
    const std::int64_t bias = a.biases ? 1 : 0;
    const std::int64_t dense_dd = d * d + bias * d;
    const std::int64_t ln = 2 * d;
    const std::int64_t attn = 4 * dense_dd + ln;
    const std::int64_t ffn = (dff * d + bias * dff) + (d * dff + bias * d) + ln;
    const std::int64_t enc_layer = attn + ffn;
    const std::int64_t dec_layer = 2 * attn + ffn;

    std::int64_t total = static_cast<std::int64_t>(a.vocab_size) * d; // token embedding
    total += 2 * static_cast<std::int64_t>(a.max_positions) * d;      // positions per stack
    total += 2 * ln;                                                  // embedding layer norms
    total += a.n_enc * enc_layer + a.n_dec * dec_layer;
    if (!a.tie_embeddings) {
        total += static_cast<std::int64_t>(a.vocab_size) * d;
    }
    return total;
}

// Parameter, storage and training-memory footprint of one fine-tuning regime.
struct FootprintReport {
    Regime regime = Regime::full;
    std::int64_t base_params = 0;      // P_m
    std::int64_t post_prune_params = 0; // P_prun (== P_m when unpruned)
    std::int64_t total_params = 0;     // parameters present during training
    std::int64_t trained_params = 0;
    int tasks = 1;
    std::int64_t storage_params = 0; // params stored for N tasks
    std::int64_t est_training_bytes = 0;
};

// Storage follows the multi-task pattern: full fine-tuning stores N copies,
// adapter regimes store N adapter sets plus one (possibly pruned) base.
// Training memory counts parameters, gradients and two optimizer moments in
// 32-bit units; activation memory is out of model.
inline FootprintReport footprint(const ArchDescriptor& desc, Regime regime, const LoraConfig& lora_cfg,
                                 int tasks) {
    if (tasks < 1) {
        throw ConfigError("footprint: task count must be >= 1");
    }
    FootprintReport rep;
    rep.regime = regime;
    rep.tasks = tasks;
    rep.base_params = count_params(desc);

    ArchDescriptor eff = desc;
    if (regime_has_prune(regime)) {
        if (desc.n_enc != desc.n_dec) {
            throw ConfigError("footprint: pruning expects equal encoder/decoder depth");
        }
        const PrunePlan plan = prune_plan(desc.n_enc);
        eff.n_enc = eff.n_dec = static_cast<int>(plan.kept.size());
    }
    rep.post_prune_params = count_params(eff);

    const std::int64_t N = tasks;
    switch (regime) {
    case Regime::full:
        rep.trained_params = rep.base_params;
        rep.total_params = rep.base_params;
        rep.storage_params = N * rep.base_params;
        break;
    case Regime::prune:
        rep.trained_params = rep.post_prune_params;
        rep.total_params = rep.post_prune_params;
        rep.storage_params = N * rep.post_prune_params;
        break;
    case Regime::lora: {
        const std::int64_t adapters = count_lora_params(desc, lora_cfg);
        rep.trained_params = adapters;
        rep.total_params = rep.base_params + adapters;
        rep.storage_params = N * adapters + rep.base_params;
        break;
    }
    case Regime::lora_prune: {
        const std::int64_t adapters = count_lora_params(eff, lora_cfg);
        rep.trained_params = adapters;
        rep.total_params = rep.post_prune_params + adapters;
        rep.storage_params = N * adapters + rep.post_prune_params;
        break;
    }
    }
    rep.est_training_bytes = 4 * rep.total_params + 4 * rep.trained_params + 8 * rep.trained_params;
    return rep;
}

} // namespace lopr
