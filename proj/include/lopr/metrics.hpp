// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "lopr/errors.hpp"

namespace lopr {

// Reference-based text metrics. All scores are reported x100.

// Fixed metric tokenization: lowercase, punctuation split into separate
// tokens, whitespace delimited.
inline std::vector<std::string> tokenize_for_metrics(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    auto flush = [&]() {
        if (!cur.empty()) {
            out.push_back(cur);
            cur.clear();
        }
    };
    for (unsigned char c : text) {
        if (std::isspace(c)) {
            flush();
        } else if (std::ispunct(c)) {
            flush();
            out.emplace_back(1, static_cast<char>(c));
        } else {
            cur.push_back(static_cast<char>(std::tolower(c)));
        }
    }
    flush();
    return out;
}

struct Prf {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};

namespace metricdetail {

inline Prf make_prf(double p, double r) {
    Prf out;
    out.precision = p;
    out.recall = r;
    out.f1 = (p + r) > 0.0 ? 2.0 * p * r / (p + r) : 0.0;
    return out;
}

// n-gram multiset as joined keys
inline std::unordered_map<std::string, int> ngram_counts(const std::vector<std::string>& tokens, int n) {
    std::unordered_map<std::string, int> counts;
    if (static_cast<int>(tokens.size()) < n) {
        return counts;
    }
    for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
        std::string key;
        for (int k = 0; k < n; ++k) {
            key += tokens[i + k];
            key.push_back('\x1f');
        }
        ++counts[key];
    }
    return counts;
}

} // namespace metricdetail

// Clipped n-gram overlap precision/recall/F1, x100.
inline Prf rouge_n(const std::vector<std::string>& candidate, const std::vector<std::string>& reference,
                   int n) {
    if (n < 1) {
        throw ConfigError("rouge_n: n must be >= 1");
    }
    const auto cand = metricdetail::ngram_counts(candidate, n);
    const auto ref = metricdetail::ngram_counts(reference, n);
    std::int64_t cand_total = 0, ref_total = 0, overlap = 0;
    for (const auto& [k, v] : cand) {
        cand_total += v;
    }
    for (const auto& [k, v] : ref) {
        ref_total += v;
    }
    for (const auto& [k, v] : cand) {
        auto it = ref.find(k);
        if (it != ref.end()) {
            overlap += std::min(v, it->second);
        }
    }
    if (cand_total == 0 || ref_total == 0) {
        return {};
    }
    const double p = 100.0 * static_cast<double>(overlap) / static_cast<double>(cand_total);
    const double r = 100.0 * static_cast<double>(overlap) / static_cast<double>(ref_total);
    return metricdetail::make_prf(p, r);
}

// longest common subsequence length over whole sequences
inline int lcs_length(const std::vector<std::string>& a, const std::vector<std::string>& b) {
    const std::size_t n = a.size(), m = b.size();
    std::vector<int> prev(m + 1, 0), cur(m + 1, 0);
    for (std::size_t i = 1; i <= n; ++i) {
        for (std::size_t j = 1; j <= m; ++j) {
            cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
        }
        std::swap(prev, cur);
    }
    return prev[m];
}

inline Prf rouge_l(const std::vector<std::string>& candidate, const std::vector<std::string>& reference) {
    if (candidate.empty() || reference.empty()) {
        return {};
    }
    const int l = lcs_length(candidate, reference);
    const double p = 100.0 * l / static_cast<double>(candidate.size());
    const double r = 100.0 * l / static_cast<double>(reference.size());
    return metricdetail::make_prf(p, r);
}

// Unsmoothed BLEU: geometric mean of clipped n-gram precisions with uniform
// weights and the standard brevity penalty. Any zero precision gives 0.
inline double bleu(const std::vector<std::string>& candidate, const std::vector<std::string>& reference,
                   int max_n) {
    if (max_n < 1) {
        throw ConfigError("bleu: max_n must be >= 1");
    }
    if (candidate.empty() || reference.empty()) {
        return 0.0;
    }
    double log_sum = 0.0;
    for (int n = 1; n <= max_n; ++n) {
        const auto cand = metricdetail::ngram_counts(candidate, n);
        const auto ref = metricdetail::ngram_counts(reference, n);
        std::int64_t total = 0, match = 0;
        for (const auto& [k, v] : cand) {
            total += v;
            auto it = ref.find(k);
            if (it != ref.end()) {
                match += std::min(v, it->second);
            }
        }
        if (total == 0 || match == 0) {
            return 0.0;
        }
        log_sum += std::log(static_cast<double>(match) / static_cast<double>(total));
    }
    const double geo = std::exp(log_sum / max_n);
    const double c = static_cast<double>(candidate.size());
    const double r = static_cast<double>(reference.size());
    const double bp = c >= r ? 1.0 : std::exp(1.0 - r / c);
    return 100.0 * bp * geo;
}

// Percentage of distinct reference n-grams absent from the source n-gram set.
inline double novel_ngram_ratio(const std::vector<std::string>& source,
                                const std::vector<std::string>& reference_output, int n) {
    if (n < 1) {
        throw ConfigError("novel_ngram_ratio: n must be >= 1");
    }
    const auto ref = metricdetail::ngram_counts(reference_output, n);
    if (ref.empty()) {
        throw ConfigError("novel_ngram_ratio: reference output has no n-grams");
    }
    const auto src = metricdetail::ngram_counts(source, n);
    std::int64_t novel = 0;
    for (const auto& [k, v] : ref) {
        if (!src.count(k)) {
            ++novel;
        }
    }
    return 100.0 * static_cast<double>(novel) / static_cast<double>(ref.size());
}

// sentences end at . ! ? followed by whitespace or end of text
inline int sentence_count(const std::string& text) {
    int count = 0;
    bool in_sentence = false;
    for (std::size_t i = 0; i < text.size(); ++i) {
        const unsigned char c = static_cast<unsigned char>(text[i]);
        const bool terminator = (c == '.' || c == '!' || c == '?') &&
                                (i + 1 >= text.size() ||
                                 std::isspace(static_cast<unsigned char>(text[i + 1])));
        if (terminator) {
            if (in_sentence) {
                ++count;
            }
            in_sentence = false;
        } else if (!std::isspace(c)) {
            in_sentence = true;
        }
    }
    if (in_sentence) {
        ++count;
    }
    return count;
}

inline int whitespace_word_count(const std::string& text) {
    int count = 0;
    bool in_word = false;
    for (unsigned char c : text) {
        if (std::isspace(c)) {
            in_word = false;
        } else if (!in_word) {
            in_word = true;
            ++count;
        }
    }
    return count;
}

// Per-example metric row and corpus means; ROUGE reported as F1.
struct MetricReport {
    double rouge1 = 0.0;
    double rouge2 = 0.0;
    double rougeL = 0.0;
    double bleu1 = 0.0;
    double bleu4 = 0.0;
};

inline MetricReport score_pair(const std::string& candidate, const std::string& reference) {
    const auto c = tokenize_for_metrics(candidate);
    const auto r = tokenize_for_metrics(reference);
    MetricReport m;
    m.rouge1 = rouge_n(c, r, 1).f1;
    m.rouge2 = rouge_n(c, r, 2).f1;
    m.rougeL = rouge_l(c, r).f1;
    m.bleu1 = bleu(c, r, 1);
    m.bleu4 = bleu(c, r, 4);
    return m;
}

// corpus mean = arithmetic mean of per-example scores
inline MetricReport mean_report(const std::vector<MetricReport>& rows) {
    MetricReport m;
    if (rows.empty()) {
        return m;
    }
    for (const auto& r : rows) {
        m.rouge1 += r.rouge1;
        m.rouge2 += r.rouge2;
        m.rougeL += r.rougeL;
        m.bleu1 += r.bleu1;
        m.bleu4 += r.bleu4;
    }
    const double n = static_cast<double>(rows.size());
    m.rouge1 /= n;
    m.rouge2 /= n;
    m.rougeL /= n;
    m.bleu1 /= n;
    m.bleu4 /= n;
    return m;
}

} // namespace lopr
