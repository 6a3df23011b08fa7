// SPDX-License-Identifier: Apache-2.0
//
// Transformer model: construction, forward contracts, gradient checks.

#include <doctest.h>

#include <cstring>
#include <map>

#include "lopr/accountant.hpp"
#include "lopr/model.hpp"
#include "test_support.hpp"

using namespace lopr;
using namespace lopr::testsupport;

namespace {

ArchDescriptor micro(int layers = 2, int d = 8, int heads = 2, int vocab = 11) {
    ArchDescriptor a;
    a.n_enc = layers;
    a.n_dec = layers;
    a.d_model = d;
    a.d_ffn = 4 * d;
    a.n_heads = heads;
    a.vocab_size = vocab;
    a.max_positions = 16;
    a.tie_embeddings = true;
    a.biases = true;
    return a;
}

} // namespace

TEST_SUITE_BEGIN("model");

TEST_CASE("construction matches descriptor") {
    auto m = build_model<float>(micro(), 42);
    CHECK(m.encoder().size() == 2);
    CHECK(m.decoder().size() == 2);
    CHECK(m.encoder()[0].index == 1);
    CHECK(m.decoder()[1].index == 2);
    // every attention head is d/heads wide
    CHECK(m.descriptor().d_model / m.descriptor().n_heads == 4);
    // decoder layers carry self + cross attention, encoder layers one block
    CHECK(m.has_param("decoder.1.cross.q.w"));
    CHECK_FALSE(m.has_param("encoder.1.cross.q.w"));

    ArchDescriptor bad = micro();
    bad.d_model = 10; // not divisible by heads=4
    bad.n_heads = 4;
    CHECK_THROWS_AS(build_model<float>(bad, 1), ConfigError);
}

TEST_CASE("same seed builds bitwise-identical parameters") {
    auto a = build_model<float>(micro(), 7);
    auto b = build_model<float>(micro(), 7);
    auto c = build_model<float>(micro(), 8);
    REQUIRE(a.named_params().size() == b.named_params().size());
    bool all_same = true, any_diff_c = false;
    for (std::size_t i = 0; i < a.named_params().size(); ++i) {
        const auto& ta = a.named_params()[i].var.value();
        const auto& tb = b.named_params()[i].var.value();
        const auto& tc = c.named_params()[i].var.value();
        all_same = all_same && std::memcmp(ta.data(), tb.data(), ta.numel() * sizeof(float)) == 0;
        any_diff_c = any_diff_c || std::memcmp(ta.data(), tc.data(), ta.numel() * sizeof(float)) != 0;
    }
    CHECK(all_same);
    CHECK(any_diff_c);
}

TEST_CASE("parameter registry is a partition of the closed-form count") {
    for (auto desc : {micro(), micro(3, 16, 4, 29), ArchDescriptor{1, 2, 12, 24, 3, 17, 9, false, false}}) {
        auto m = build_model<float>(desc, 3);
        CHECK(m.param_count() == count_params(desc));

        // per-layer + embedding counts partition the total
        std::int64_t by_prefix = 0;
        for (const auto& p : m.named_params()) {
            by_prefix += p.var.numel();
        }
        CHECK(by_prefix == m.param_count());
    }
}

TEST_CASE("shape enumeration reproduces the large-model scale counts") {
    std::int64_t bart = 0;
    for_each_param_shape(ArchDescriptor::bart_large(),
                         [&](const std::string&, const Shape& s) { bart += shape_numel(s); });
    CHECK(bart == count_params(ArchDescriptor::bart_large()));
    CHECK(std::abs(static_cast<double>(bart) - 406.2e6) / 406.2e6 <= 0.01);
}

TEST_CASE("forward shape contract and id validation") {
    auto m = build_model<float>(micro(), 1);
    IdMatrix src = ids_from({{4, 5, 6}});
    IdMatrix tgt = ids_from({{4, 7}});
    auto logits = m.forward(src, {3}, tgt);
    CHECK(logits.shape() == Shape{1, 2, 11});

    IdMatrix bad_src = ids_from({{4, 99, 6}});
    CHECK_THROWS_AS(m.forward(bad_src, {3}, tgt), ShapeError);

    IdMatrix long_src(1, 30, 4);
    CHECK_THROWS_AS(m.forward(long_src, {30}, tgt), ShapeError);
}

TEST_CASE("decoder causality is bitwise") {
    RandomSource rng(5);
    for (int trial = 0; trial < 5; ++trial) {
        auto desc = micro(2, 8 + 4 * (trial % 2), 2, 13);
        auto m = build_model<float>(desc, 100 + trial);
        IdMatrix src = random_ids(2, 4, 13, rng);
        IdMatrix tgt = random_ids(2, 5, 13, rng);
        std::vector<int> src_len = {4, 3};
        auto base = m.forward(src, src_len, tgt).value();

        const int k = 2;
        IdMatrix tgt2 = tgt;
        for (int t = k; t < tgt.cols; ++t) {
            tgt2.at(0, t) = 4 + (tgt.at(0, t) - 4 + 3) % 9;
            tgt2.at(1, t) = 4 + (tgt.at(1, t) - 4 + 5) % 9;
        }
        auto alt = m.forward(src, src_len, tgt2).value();
        const int V = desc.vocab_size;
        for (int b = 0; b < 2; ++b) {
            for (int t = 0; t < k; ++t) {
                const std::int64_t off = (static_cast<std::int64_t>(b) * tgt.cols + t) * V;
                CHECK(std::memcmp(base.data() + off, alt.data() + off, V * sizeof(float)) == 0);
            }
        }
    }
}

TEST_CASE("padding content never leaks into logits") {
    RandomSource rng(9);
    for (int trial = 0; trial < 5; ++trial) {
        auto m = build_model<float>(micro(2, 8, 2, 13), 50 + trial);
        IdMatrix src = random_ids(2, 6, 13, rng);
        IdMatrix tgt = random_ids(2, 3, 13, rng);
        std::vector<int> src_len = {3, 5}; // trailing positions are padding
        auto base = m.forward(src, src_len, tgt).value();

        IdMatrix src2 = src;
        src2.at(0, 3) = 4;
        src2.at(0, 4) = 5;
        src2.at(0, 5) = 6;
        src2.at(1, 5) = 7;
        auto alt = m.forward(src2, src_len, tgt).value();
        for (std::int64_t i = 0; i < base.numel(); ++i) {
            CHECK(std::abs(base[i] - alt[i]) <= 1e-6f);
        }
    }
}

TEST_CASE("seq_loss values") {
    // uniform logits -> ln V
    auto logits = Var<float>::leaf(Tensor<float>({1, 2, 7}, 0.0f));
    IdMatrix tgt = ids_from({{3, 5}});
    CHECK(seq_loss(logits, tgt, 0).value()[0] == doctest::Approx(std::log(7.0f)));

    // one-hot-correct extreme logits -> loss ~ 0
    Tensor<float> hot({1, 1, 4}, 0.0f);
    hot[2] = 60.0f;
    IdMatrix t2 = ids_from({{2}});
    CHECK(seq_loss(Var<float>::leaf(hot), t2, -1).value()[0] == doctest::Approx(0.0f).epsilon(1e-6));

    // hand-computed two-token example:
    // row0 logits [1, 0], target 0: loss0 = log(1+e^-1) = 0.31326169
    // row1 logits [2, -1], target 1: loss1 = log(1+e^3)  = 3.04858735
    Tensor<float> h({1, 2, 2}, std::vector<float>{1.f, 0.f, 2.f, -1.f});
    IdMatrix t3 = ids_from({{0, 1}});
    const double expect = 0.5 * (0.3132616875182228 + 3.0485873515737420);
    CHECK(seq_loss(Var<float>::leaf(h), t3, -1).value()[0] == doctest::Approx(expect).epsilon(1e-6));
}

TEST_CASE("pad-only rows are excluded from the loss") {
    auto m = build_model<float>(micro(), 2);
    IdMatrix src = ids_from({{4, 5}});
    IdMatrix tgt_in = ids_from({{1, 4}});
    IdMatrix tgt_out = ids_from({{0, 0}}); // all pad
    auto logits = m.forward(src, {2}, tgt_in);
    CHECK_THROWS_AS(seq_loss(logits, tgt_out, 0), ConfigError);
}

TEST_CASE("full micro-model gradient check in 64-bit") {
    auto desc = micro(2, 8, 2, 11);
    auto m = build_model<double>(desc, 11);
    randomize_params(m, 1234);
    IdMatrix src = ids_from({{4, 5, 6}, {7, 8, 0}});
    IdMatrix tgt_in = ids_from({{1, 4}, {1, 9}});
    IdMatrix tgt_out = ids_from({{4, 2}, {9, 2}});
    std::vector<int> src_len = {3, 2};
    auto loss_fn = [&]() { return seq_loss(m.forward(src, src_len, tgt_in), tgt_out, 0); };
    const double err = model_grad_check(m, loss_fn, 1e-5);
    CHECK(err <= 1e-4);
}

TEST_SUITE_END();
