// SPDX-License-Identifier: Apache-2.0
//
// ROUGE / BLEU / novel n-gram oracles: hand-computed values, brute-force LCS,
// symmetry properties.

#include <doctest.h>

#include "lopr/metrics.hpp"

using namespace lopr;

namespace {

std::vector<std::string> toks(const std::string& text) { return tokenize_for_metrics(text); }

// exhaustive common-subsequence search (exponential; oracle only)
int brute_lcs(const std::vector<std::string>& a, const std::vector<std::string>& b) {
    const int n = static_cast<int>(a.size());
    int best = 0;
    for (int mask = 0; mask < (1 << n); ++mask) {
        std::vector<std::string> sub;
        for (int i = 0; i < n; ++i) {
            if (mask & (1 << i)) {
                sub.push_back(a[static_cast<std::size_t>(i)]);
            }
        }
        // subsequence-of check against b
        std::size_t at = 0;
        bool ok = true;
        for (const auto& s : sub) {
            while (at < b.size() && b[at] != s) {
                ++at;
            }
            if (at == b.size()) {
                ok = false;
                break;
            }
            ++at;
        }
        if (ok) {
            best = std::max(best, static_cast<int>(sub.size()));
        }
    }
    return best;
}

void all_sequences(int max_len, std::vector<std::string>& prefix,
                   std::vector<std::vector<std::string>>& out) {
    static const std::vector<std::string> alphabet = {"a", "b", "c"};
    out.push_back(prefix);
    if (static_cast<int>(prefix.size()) == max_len) {
        return;
    }
    for (const auto& s : alphabet) {
        prefix.push_back(s);
        all_sequences(max_len, prefix, out);
        prefix.pop_back();
    }
}

} // namespace

TEST_SUITE_BEGIN("metrics");

TEST_CASE("metric tokenization") {
    CHECK(toks("Hello, World!") == std::vector<std::string>{"hello", ",", "world", "!"});
    CHECK(toks("  a  b ") == std::vector<std::string>{"a", "b"});
    CHECK(toks("") == std::vector<std::string>{});
}

TEST_CASE("rouge-n hand values") {
    const auto same = rouge_n(toks("x y z"), toks("x y z"), 1);
    CHECK(same.precision == doctest::Approx(100.0));
    CHECK(same.recall == doctest::Approx(100.0));
    CHECK(same.f1 == doctest::Approx(100.0));

    const auto r = rouge_n(toks("a b c"), toks("a b"), 1);
    CHECK(r.recall == doctest::Approx(100.0));
    CHECK(r.precision == doctest::Approx(100.0 * 2.0 / 3.0));
    CHECK(r.f1 == doctest::Approx(80.0));

    const auto none = rouge_n(toks("a b"), toks("x y"), 1);
    CHECK(none.precision == 0.0);
    CHECK(none.recall == 0.0);
    CHECK(none.f1 == 0.0);

    // clipping: repeated candidate tokens only match as often as in the ref
    const auto clip = rouge_n(toks("a a a"), toks("a"), 1);
    CHECK(clip.precision == doctest::Approx(100.0 / 3.0));
    CHECK(clip.recall == doctest::Approx(100.0));
}

TEST_CASE("rouge-l hand values") {
    CHECK(rouge_l(toks("q w e"), toks("q w e")).f1 == doctest::Approx(100.0));
    const auto r = rouge_l(toks("a x b"), toks("a b y"));
    CHECK(r.precision == doctest::Approx(100.0 * 2.0 / 3.0));
    CHECK(r.recall == doctest::Approx(100.0 * 2.0 / 3.0));
    CHECK(r.f1 == doctest::Approx(100.0 * 2.0 / 3.0));
    const auto empty = rouge_l({}, toks("a b"));
    CHECK(empty.f1 == 0.0);
}

TEST_CASE("rouge-l agrees with exhaustive search on short pairs") {
    std::vector<std::vector<std::string>> seqs;
    std::vector<std::string> prefix;
    all_sequences(4, prefix, seqs);
    for (const auto& a : seqs) {
        for (const auto& b : seqs) {
            CHECK(lcs_length(a, b) == brute_lcs(a, b));
        }
    }
}

TEST_CASE("bleu hand values") {
    CHECK(bleu(toks("t u v w"), toks("t u v w"), 4) == doctest::Approx(100.0));
    // no 4-grams in a 3-token candidate
    CHECK(bleu(toks("a b c"), toks("a b c d"), 4) == 0.0);
    // brevity penalty: unigram precision 1, BP = exp(1 - 4/3)
    CHECK(bleu(toks("the cat sat"), toks("the cat sat down"), 1) ==
          doctest::Approx(100.0 * std::exp(1.0 - 4.0 / 3.0)).epsilon(1e-6));
    // candidate longer than reference has no penalty
    CHECK(bleu(toks("a b c d"), toks("a b"), 1) == doctest::Approx(50.0));
}

TEST_CASE("bleu of a sequence with itself is 100") {
    for (const std::string s : {"a", "a b", "a b c d e", "x y z w"}) {
        const auto t = toks(s);
        for (int n = 1; n <= std::min<int>(4, static_cast<int>(t.size())); ++n) {
            CHECK(bleu(t, t, n) == doctest::Approx(100.0));
        }
    }
}

TEST_CASE("f1 symmetry under candidate/reference swap") {
    const std::vector<std::pair<std::string, std::string>> pairs = {
        {"a b c d", "a c d"}, {"x x y", "x y y"}, {"m n", "q r"}, {"a b a b", "b a b a"}};
    for (const auto& [c, r] : pairs) {
        for (int n : {1, 2}) {
            const auto fwd = rouge_n(toks(c), toks(r), n);
            const auto rev = rouge_n(toks(r), toks(c), n);
            CHECK(fwd.precision == doctest::Approx(rev.recall));
            CHECK(fwd.recall == doctest::Approx(rev.precision));
            CHECK(fwd.f1 == doctest::Approx(rev.f1));
        }
        const auto fl = rouge_l(toks(c), toks(r));
        const auto rl = rouge_l(toks(r), toks(c));
        CHECK(fl.f1 == doctest::Approx(rl.f1));
    }
}

TEST_CASE("novel n-gram ratio") {
    CHECK(novel_ngram_ratio(toks("a b c"), toks("b c"), 1) == doctest::Approx(0.0));
    CHECK(novel_ngram_ratio(toks("a b c"), toks("x y"), 1) == doctest::Approx(100.0));
    CHECK(novel_ngram_ratio(toks("a b c"), toks("a d"), 1) == doctest::Approx(50.0));
    CHECK_THROWS_AS(novel_ngram_ratio(toks("a b"), {}, 1), ConfigError);
    CHECK_THROWS_AS(novel_ngram_ratio(toks("a b"), toks("a"), 2), ConfigError);
}

TEST_CASE("sentence and word counting") {
    CHECK(sentence_count("A b. C d.") == 2);
    CHECK(whitespace_word_count("A b. C d.") == 4);
    CHECK(sentence_count("one two") == 1);
    CHECK(sentence_count("") == 0);
    CHECK(sentence_count("Dr. Who? Yes! ok") == 4); // "Dr." ends a segment too
}

TEST_CASE("score_pair and corpus mean") {
    const auto m = score_pair("a b c", "a b c");
    CHECK(m.rouge1 == doctest::Approx(100.0));
    CHECK(m.rougeL == doctest::Approx(100.0));
    CHECK(m.bleu1 == doctest::Approx(100.0));
    CHECK(m.bleu4 == 0.0); // only 3 tokens

    const auto mean = mean_report({m, MetricReport{}});
    CHECK(mean.rouge1 == doctest::Approx(50.0));
}

TEST_SUITE_END();
