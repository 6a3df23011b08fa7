// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "lopr/autograd.hpp"
#include "lopr/model.hpp"
#include "lopr/ops.hpp"

namespace lopr {

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double base_lr = 1e-4;
    double weight_decay = 0.0;
    long warmup_steps = 1000;
    int accumulation = 1;

    void validate() const {
        if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) {
            throw ConfigError("adamw: betas must lie in [0,1)");
        }
        if (eps <= 0.0 || base_lr <= 0.0) {
            throw ConfigError("adamw: eps and base_lr must be positive");
        }
        if (warmup_steps < 0 || accumulation < 1) {
            throw ConfigError("adamw: warmup_steps >= 0 and accumulation >= 1 required");
        }
    }
};

// Linear warmup to base_lr, constant afterwards.
inline double lr_at(long step, const AdamWConfig& cfg) {
    if (step < 0) {
        throw ConfigError("lr_at: negative step");
    }
    if (cfg.warmup_steps == 0 || step >= cfg.warmup_steps) {
        return cfg.base_lr;
    }
    return cfg.base_lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
}

// AdamW with decoupled multiplicative weight decay. Owns first/second
// moments for the trainable parameters only; frozen parameters are never
// touched. The warmup schedule is evaluated at the 1-based update index so
// the first update is small but nonzero.
template <typename S>
class AdamW {
public:
    struct Slot {
        std::string name;
        Var<S> param;
        Tensor<S> m;
        Tensor<S> v;
    };

    AdamW(const std::vector<NamedParam<S>>& params, AdamWConfig cfg) : cfg_(cfg) {
        cfg_.validate();
        for (const auto& p : params) {
            if (!p.var.requires_grad()) {
                continue;
            }
            slots_.push_back({p.name, p.var, Tensor<S>(p.var.shape(), S(0)),
                              Tensor<S>(p.var.shape(), S(0))});
        }
    }

    const AdamWConfig& config() const { return cfg_; }
    long step_count() const { return step_; }
    void set_step_count(long s) { step_ = s; }
    std::vector<Slot>& slots() { return slots_; }
    const std::vector<Slot>& slots() const { return slots_; }

    std::int64_t trainable_count() const {
        std::int64_t n = 0;
        for (const auto& s : slots_) {
            n += s.param.numel();
        }
        return n;
    }

    void zero_grads() {
        for (auto& s : slots_) {
            s.param.zero_grad();
        }
    }

    // divide accumulated gradients by the micro-batch count
    void scale_grads(S factor) {
        for (auto& s : slots_) {
            if (!s.param.has_grad()) {
                continue;
            }
            Tensor<S>& g = const_cast<Tensor<S>&>(s.param.grad());
            for (std::int64_t i = 0; i < g.numel(); ++i) {
                g[i] *= factor;
            }
        }
    }

    void step() {
        ++step_;
        const double lr = lr_at(step_, cfg_);
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
        for (auto& s : slots_) {
            if (!s.param.has_grad()) {
                throw ConfigError("adamw: missing gradient for '" + s.name + "'");
            }
            const Tensor<S>& g = s.param.grad();
            if (!g.all_finite()) {
                throw NumericError("adamw: non-finite gradient for '" + s.name + "'");
            }
            Tensor<S>& p = s.param.mutable_value();
            const S b1 = static_cast<S>(cfg_.beta1);
            const S b2 = static_cast<S>(cfg_.beta2);
            const S one = S(1);
            const S decay = static_cast<S>(lr * cfg_.weight_decay);
            const S step_size = static_cast<S>(lr);
            const S inv_bc1 = static_cast<S>(1.0 / bc1);
            const S inv_bc2 = static_cast<S>(1.0 / bc2);
            const S eps = static_cast<S>(cfg_.eps);
            for (std::int64_t i = 0; i < p.numel(); ++i) {
                if (decay != S(0)) {
                    p[i] -= decay * p[i];
                }
                s.m[i] = b1 * s.m[i] + (one - b1) * g[i];
                s.v[i] = b2 * s.v[i] + (one - b2) * g[i] * g[i];
                const S mhat = s.m[i] * inv_bc1;
                const S vhat = s.v[i] * inv_bc2;
                p[i] -= step_size * mhat / (std::sqrt(vhat) + eps);
            }
        }
    }

private:
    AdamWConfig cfg_;
    std::vector<Slot> slots_;
    long step_ = 0;
};

// One optimizer step over `accumulation` micro-batch losses. Each closure
// returns the mean loss of its micro-batch; gradients are averaged so the
// update matches a single step on the concatenated batch when micro-batches
// carry equal token counts.
template <typename S>
void accumulate_and_step(AdamW<S>& opt, const std::vector<std::function<Var<S>()>>& micro_losses) {
    const int k = opt.config().accumulation;
    if (static_cast<int>(micro_losses.size()) != k) {
        throw ConfigError("accumulate_and_step: expected " + std::to_string(k) + " micro-batches, got " +
                          std::to_string(micro_losses.size()));
    }
    opt.zero_grads();
    const S inv = S(1) / static_cast<S>(k);
    for (const auto& f : micro_losses) {
        Var<S> loss = f();
        backward(scale(loss, inv));
    }
    opt.step();
}

} // namespace lopr
