// SPDX-License-Identifier: Apache-2.0
//
// Alternating layer-drop plans and their application to built models.

#include <doctest.h>

#include <cstring>

#include "lopr/accountant.hpp"
#include "lopr/prune.hpp"

using namespace lopr;

TEST_SUITE_BEGIN("prune");

TEST_CASE("plan for 12 layers") {
    const auto plan = prune_plan(12);
    CHECK(plan.kept == std::vector<int>{1, 2, 3, 5, 7, 9, 11, 12});
    CHECK(plan.dropped == std::vector<int>{4, 6, 8, 10});
    CHECK(plan.dropped_fraction() == doctest::Approx(4.0 / 12.0));
}

TEST_CASE("plan for 24 layers") {
    const auto plan = prune_plan(24);
    CHECK(plan.kept == std::vector<int>{1, 2, 3, 5, 7, 9, 11, 13, 15, 17, 19, 21, 23, 24});
    CHECK(plan.dropped == std::vector<int>{4, 6, 8, 10, 12, 14, 16, 18, 20, 22});
    CHECK(plan.dropped_fraction() == doctest::Approx(10.0 / 24.0));
}

TEST_CASE("small stacks drop nothing") {
    CHECK(prune_plan(4).dropped.empty());
    CHECK(prune_plan(1).kept == std::vector<int>{1});
    CHECK(prune_plan(5).dropped.empty());
    // n=6 drops exactly layer 4
    const auto p6 = prune_plan(6);
    CHECK(p6.dropped == std::vector<int>{4});
    CHECK(p6.kept == std::vector<int>{1, 2, 3, 5, 6});
    CHECK_THROWS_AS(prune_plan(0), ConfigError);
}

TEST_CASE("plans are pure functions of n") {
    for (int n : {1, 6, 12, 24, 13}) {
        const auto a = prune_plan(n);
        const auto b = prune_plan(n);
        CHECK(a.kept == b.kept);
        CHECK(a.dropped == b.dropped);
        // partition
        CHECK(a.kept.size() + a.dropped.size() == static_cast<std::size_t>(n));
    }
}

TEST_CASE("apply_prune keeps survivor tensors bitwise with original indices") {
    ArchDescriptor desc{6, 6, 16, 64, 2, 23, 12, true, true};
    auto model = build_model<float>(desc, 77);
    const auto plan = prune_plan(6);
    auto pruned = apply_prune(model, plan);

    CHECK(pruned.encoder().size() == 5);
    CHECK(pruned.decoder().size() == 5);
    std::vector<int> indices;
    for (const auto& layer : pruned.encoder()) {
        indices.push_back(layer.index);
    }
    CHECK(indices == plan.kept);

    for (const auto& p : pruned.named_params()) {
        const auto& orig = model.param(p.name).value();
        REQUIRE(orig.numel() == p.var.numel());
        CHECK(std::memcmp(orig.data(), p.var.value().data(), orig.numel() * sizeof(float)) == 0);
    }

    // total decreases by exactly the dropped layers' counts
    std::int64_t dropped_sum = 0;
    for (const auto& p : model.named_params()) {
        if (p.name.rfind("encoder.4.", 0) == 0 || p.name.rfind("decoder.4.", 0) == 0) {
            dropped_sum += p.var.numel();
        }
    }
    CHECK(model.param_count() - pruned.param_count() == dropped_sum);

    // closed-form agreement on the pruned architecture
    ArchDescriptor eff = desc;
    eff.n_enc = eff.n_dec = 5;
    CHECK(pruned.param_count() == count_params(eff));
}

TEST_CASE("empty plan is the identity") {
    ArchDescriptor desc{4, 4, 8, 32, 2, 13, 8, true, true};
    auto model = build_model<float>(desc, 3);
    auto same = apply_prune(model, prune_plan(4));
    CHECK(same.param_count() == model.param_count());
    for (const auto& p : same.named_params()) {
        const auto& orig = model.param(p.name).value();
        CHECK(std::memcmp(orig.data(), p.var.value().data(), orig.numel() * sizeof(float)) == 0);
    }
}

TEST_CASE("depth mismatch raises") {
    ArchDescriptor desc{4, 4, 8, 32, 2, 13, 8, true, true};
    auto model = build_model<float>(desc, 3);
    CHECK_THROWS_AS(apply_prune(model, prune_plan(6)), ConfigError);
}

TEST_CASE("pruned forward still runs") {
    ArchDescriptor desc{6, 6, 16, 64, 2, 23, 12, true, true};
    auto model = build_model<float>(desc, 5);
    auto pruned = apply_prune(model, prune_plan(6));
    IdMatrix src(1, 3, 4);
    IdMatrix tgt(1, 2, 5);
    auto logits = pruned.forward(src, {3}, tgt);
    CHECK(logits.shape() == Shape{1, 2, 23});
}

TEST_SUITE_END();
