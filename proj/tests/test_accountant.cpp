// SPDX-License-Identifier: Apache-2.0
//
// Analytic parameter/storage/memory accounting against the published scales.

#include <doctest.h>

#include "lopr/accountant.hpp"

using namespace lopr;

namespace {
double rel_to(double value, double target) { return std::abs(value - target) / target; }
} // namespace

TEST_SUITE_BEGIN("accountant");

TEST_CASE("large-model parameter totals") {
    const auto bart = ArchDescriptor::bart_large();
    const auto t5 = ArchDescriptor::t5_large();
    CHECK(rel_to(static_cast<double>(count_params(bart)), 406.2e6) <= 0.01);
    CHECK(rel_to(static_cast<double>(count_params(t5)), 737.6e6) <= 0.015);

    // pruned variants per the alternating plan
    ArchDescriptor bart8 = bart;
    bart8.n_enc = bart8.n_dec = static_cast<int>(prune_plan(12).kept.size());
    CHECK(rel_to(static_cast<double>(count_params(bart8)), 288.7e6) <= 0.01);

    ArchDescriptor t5p = t5;
    t5p.n_enc = t5p.n_dec = static_cast<int>(prune_plan(24).kept.size());
    CHECK(rel_to(static_cast<double>(count_params(t5p)), 443.9e6) <= 0.015);
}

TEST_CASE("empty stacks leave embeddings and positions only") {
    ArchDescriptor a{0, 0, 16, 64, 2, 50, 10, true, true};
    const std::int64_t expect = 50LL * 16 + 2LL * 10 * 16 + 2LL * 2 * 16;
    CHECK(count_params(a) == expect);
}

TEST_CASE("storage formulas per regime") {
    const auto bart = ArchDescriptor::bart_large();
    LoraConfig ff{16, 32.0, LoraPlacement::FF};
    const std::int64_t pm = count_params(bart);

    auto full = footprint(bart, Regime::full, ff, 4);
    CHECK(full.storage_params == 4 * pm);
    CHECK(full.trained_params == pm);

    auto pr = footprint(bart, Regime::prune, ff, 4);
    CHECK(pr.storage_params == 4 * pr.post_prune_params);
    CHECK(rel_to(static_cast<double>(pr.post_prune_params), 288.7e6) <= 0.01);

    auto lo = footprint(bart, Regime::lora, ff, 4);
    CHECK(lo.trained_params == 3932160);
    CHECK(lo.storage_params == 4 * 3932160LL + pm);

    auto lp = footprint(bart, Regime::lora_prune, ff, 4);
    CHECK(lp.trained_params == 2621440);
    CHECK(lp.storage_params == 4 * 2621440LL + lp.post_prune_params);
}

TEST_CASE("training-memory ordering") {
    const auto bart = ArchDescriptor::bart_large();
    LoraConfig ff{16, 32.0, LoraPlacement::FF};
    const auto full = footprint(bart, Regime::full, ff, 1);
    const auto pr = footprint(bart, Regime::prune, ff, 1);
    const auto lo = footprint(bart, Regime::lora, ff, 1);
    const auto lp = footprint(bart, Regime::lora_prune, ff, 1);
    CHECK(lp.est_training_bytes < lo.est_training_bytes);
    CHECK(lo.est_training_bytes < full.est_training_bytes);
    CHECK(lp.est_training_bytes < pr.est_training_bytes);
    CHECK(pr.est_training_bytes < full.est_training_bytes);
}

TEST_CASE("footprint is pure and N-linear") {
    const auto bart = ArchDescriptor::bart_large();
    LoraConfig ff{16, 32.0, LoraPlacement::FF};
    for (Regime r : {Regime::full, Regime::prune, Regime::lora, Regime::lora_prune}) {
        const auto n1 = footprint(bart, r, ff, 1);
        const auto n2 = footprint(bart, r, ff, 2);
        const auto n3 = footprint(bart, r, ff, 3);
        CHECK(n2.storage_params - n1.storage_params == n3.storage_params - n2.storage_params);
        CHECK(footprint(bart, r, ff, 2).storage_params == n2.storage_params);
    }
}

TEST_SUITE_END();
