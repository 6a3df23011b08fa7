// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <type_traits>
#include <string>
#include <vector>

#include "lopr/data.hpp"
#include "lopr/kernels.hpp"
#include "lopr/model.hpp"

namespace lopr {

namespace decdetail {

template <typename S>
void dense_row(const Dense<S>& dense, const AdapterSet<S>* adapters, const S* x, S* y) {
    const int out = dense.w.shape()[0];
    const int in = dense.w.shape()[1];
    kern::gemm_nt(x, dense.w.value().data(), y, 1, out, in);
    if (adapters != nullptr) {
        if (const LoraAdapter<S>* a = adapters->find(dense.name)) {
            const int r = a->down.shape()[0];
            std::vector<S> mid(static_cast<std::size_t>(r));
            kern::gemm_nt(x, a->down.value().data(), mid.data(), 1, r, in);
            std::vector<S> branch(static_cast<std::size_t>(out));
            kern::gemm_nt(mid.data(), a->up.value().data(), branch.data(), 1, out, r);
            for (int i = 0; i < out; ++i) {
                y[i] += adapters->scaling * branch[i];
            }
        }
    }
    if (dense.b.defined()) {
        const S* b = dense.b.value().data();
        for (int i = 0; i < out; ++i) {
            y[i] += b[i];
        }
    }
}

template <typename S>
void ln_row(const LayerNormP<S>& ln, S* x, int d) {
    S mean = S(0);
    for (int j = 0; j < d; ++j) {
        mean += x[j];
    }
    mean /= static_cast<S>(d);
    S var = S(0);
    for (int j = 0; j < d; ++j) {
        const S c = x[j] - mean;
        var += c * c;
    }
    var /= static_cast<S>(d);
    const S inv = S(1) / std::sqrt(var + static_cast<S>(kLayerNormEps));
    const S* g = ln.gamma.value().data();
    const S* b = ln.beta.value().data();
    for (int j = 0; j < d; ++j) {
        x[j] = g[j] * (x[j] - mean) * inv + b[j];
    }
}

template <typename S>
void gelu_row(S* x, int d) {
    const S inv_sqrt2 = S(0.70710678118654752440);
    for (int j = 0; j < d; ++j) {
        x[j] = S(0.5) * x[j] * (S(1) + kern::fast_erf(x[j] * inv_sqrt2));
    }
}

// softmax-weighted sum over cached rows, one attention head at a time
template <typename S>
void attend_rows(const S* q, const std::vector<S>& k_rows, const std::vector<S>& v_rows, int rows,
                 int d, int heads, S* ctx) {
    const int dh = d / heads;
    const S inv_sqrt_dh = S(1) / std::sqrt(static_cast<S>(dh));
    std::vector<S> scores(static_cast<std::size_t>(rows));
    for (int h = 0; h < heads; ++h) {
        const int off = h * dh;
        S mx = S(0);
        for (int j = 0; j < rows; ++j) {
            scores[static_cast<std::size_t>(j)] =
                kern::dot(q + off, k_rows.data() + static_cast<std::size_t>(j) * d + off, dh) *
                inv_sqrt_dh;
            mx = j == 0 ? scores[0] : std::max(mx, scores[static_cast<std::size_t>(j)]);
        }
        S sum = S(0);
        for (int j = 0; j < rows; ++j) {
            scores[static_cast<std::size_t>(j)] =
                kern::fast_exp(scores[static_cast<std::size_t>(j)] - mx);
            sum += scores[static_cast<std::size_t>(j)];
        }
        const S inv = S(1) / sum;
        for (int e = 0; e < dh; ++e) {
            ctx[off + e] = S(0);
        }
        for (int j = 0; j < rows; ++j) {
            const S w = scores[static_cast<std::size_t>(j)] * inv;
            const S* vr = v_rows.data() + static_cast<std::size_t>(j) * d + off;
            for (int e = 0; e < dh; ++e) {
                ctx[off + e] += w * vr[e];
            }
        }
    }
}

} // namespace decdetail

// Single-sequence incremental decoder state. The encoder runs once; cross
// K/V are precomputed per layer and shared between beam forks. Self K/V
// grow one row per fed token. Copy a session to fork a hypothesis.
template <typename S>
class DecodeSession {
public:
    DecodeSession(const TransformerModel<S>& model, const AdapterSet<S>* adapters,
                  const std::vector<int>& src_ids)
        : model_(&model), adapters_(adapters) {
        if (src_ids.empty()) {
            throw ConfigError("decode: empty source");
        }
        const int d = model.descriptor().d_model;
        const int ls = static_cast<int>(src_ids.size());
        IdMatrix src(1, ls);
        for (int i = 0; i < ls; ++i) {
            src.at(0, i) = src_ids[static_cast<std::size_t>(i)];
        }
        Tensor<S> memory;
        {
            NoGradGuard ng;
            memory = model.encode(src, {ls}, adapters).value();
        }
        const std::size_t layers = model.decoder().size();
        auto cross_k = std::make_shared<std::vector<std::vector<S>>>(layers);
        auto cross_v = std::make_shared<std::vector<std::vector<S>>>(layers);
        for (std::size_t l = 0; l < layers; ++l) {
            const auto& layer = model.decoder()[l];
            (*cross_k)[l].resize(static_cast<std::size_t>(ls) * d);
            (*cross_v)[l].resize(static_cast<std::size_t>(ls) * d);
            for (int j = 0; j < ls; ++j) {
                decdetail::dense_row(layer.cross_attn.k, adapters,
                                     memory.data() + static_cast<std::size_t>(j) * d,
                                     (*cross_k)[l].data() + static_cast<std::size_t>(j) * d);
                decdetail::dense_row(layer.cross_attn.v, adapters,
                                     memory.data() + static_cast<std::size_t>(j) * d,
                                     (*cross_v)[l].data() + static_cast<std::size_t>(j) * d);
            }
        }
        cross_k_ = std::move(cross_k);
        cross_v_ = std::move(cross_v);
        src_rows_ = ls;
        self_k_.assign(layers, {});
        self_v_.assign(layers, {});
    }

    int fed() const { return fed_; }

    // feeds one token at the next position and returns the logits row [V]
    std::vector<S> feed(int token) {
        const ArchDescriptor& a = model_->descriptor();
        if (fed_ >= a.max_positions) {
            throw ConfigError("decode: position " + std::to_string(fed_) + " exceeds max_positions");
        }
        if (token < 0 || token >= a.vocab_size) {
            throw ConfigError("decode: token id out of range");
        }
        const int d = a.d_model;
        const int heads = a.n_heads;
        std::vector<S> x(static_cast<std::size_t>(d));
        {
            const S* emb = model_->tok_embed().value().data() + static_cast<std::size_t>(token) * d;
            const S* pos = model_->dec_pos().value().data() + static_cast<std::size_t>(fed_) * d;
            for (int j = 0; j < d; ++j) {
                x[static_cast<std::size_t>(j)] = emb[j] + pos[j];
            }
            decdetail::ln_row(model_->dec_emb_ln(), x.data(), d);
        }
        std::vector<S> tmp(static_cast<std::size_t>(d));
        std::vector<S> ctx(static_cast<std::size_t>(d));
        std::vector<S> q(static_cast<std::size_t>(d));
        for (std::size_t l = 0; l < model_->decoder().size(); ++l) {
            const auto& layer = model_->decoder()[l];
            // causal self attention over the grown cache
            decdetail::dense_row(layer.self_attn.q, adapters_, x.data(), q.data());
            const std::size_t old = self_k_[l].size();
            self_k_[l].resize(old + static_cast<std::size_t>(d));
            self_v_[l].resize(old + static_cast<std::size_t>(d));
            decdetail::dense_row(layer.self_attn.k, adapters_, x.data(), self_k_[l].data() + old);
            decdetail::dense_row(layer.self_attn.v, adapters_, x.data(), self_v_[l].data() + old);
            decdetail::attend_rows(q.data(), self_k_[l], self_v_[l], fed_ + 1, d, heads, ctx.data());
            decdetail::dense_row(layer.self_attn.o, adapters_, ctx.data(), tmp.data());
            for (int j = 0; j < d; ++j) {
                x[static_cast<std::size_t>(j)] += tmp[static_cast<std::size_t>(j)];
            }
            decdetail::ln_row(layer.self_attn.ln, x.data(), d);

            // cross attention over the precomputed source rows
            decdetail::dense_row(layer.cross_attn.q, adapters_, x.data(), q.data());
            decdetail::attend_rows(q.data(), (*cross_k_)[l], (*cross_v_)[l], src_rows_, d, heads,
                                   ctx.data());
            decdetail::dense_row(layer.cross_attn.o, adapters_, ctx.data(), tmp.data());
            for (int j = 0; j < d; ++j) {
                x[static_cast<std::size_t>(j)] += tmp[static_cast<std::size_t>(j)];
            }
            decdetail::ln_row(layer.cross_attn.ln, x.data(), d);

            // feed-forward
            const int dff = a.d_ffn;
            std::vector<S> h(static_cast<std::size_t>(dff));
            decdetail::dense_row(layer.ffn.fc1, adapters_, x.data(), h.data());
            decdetail::gelu_row(h.data(), dff);
            decdetail::dense_row(layer.ffn.fc2, adapters_, h.data(), tmp.data());
            for (int j = 0; j < d; ++j) {
                x[static_cast<std::size_t>(j)] += tmp[static_cast<std::size_t>(j)];
            }
            decdetail::ln_row(layer.ffn.ln, x.data(), d);
        }
        ++fed_;
        std::vector<S> logits(static_cast<std::size_t>(a.vocab_size));
        const Tensor<S>& w = a.tie_embeddings ? model_->tok_embed().value()
                                              : model_->param("out_proj.w").value();
        kern::gemm_nt(x.data(), w.data(), logits.data(), 1, a.vocab_size, d);
        return logits;
    }

private:
    const TransformerModel<S>* model_;
    const AdapterSet<S>* adapters_;
    std::shared_ptr<const std::vector<std::vector<S>>> cross_k_, cross_v_;
    std::vector<std::vector<S>> self_k_, self_v_;
    int src_rows_ = 0;
    int fed_ = 0;
};

struct GenOptions {
    int width = 6;
    int max_len = 128;
    double length_norm = 1.0; // score = sum_logp / len^length_norm
    int bos = Vocab::kBos;
    int eos = Vocab::kEos;
};

// Hypothesis over generated tokens (bos excluded, eos included when the
// hypothesis ended naturally). Cumulative log-probability never increases.
struct BeamHypothesis {
    std::vector<int> tokens;
    double sum_logp = 0.0;
    bool finished = false;

    double score(double length_norm) const {
        const double len = static_cast<double>(std::max<std::size_t>(1, tokens.size()));
        return sum_logp / std::pow(len, length_norm);
    }
};

namespace decdetail {

template <typename S>
std::vector<double> log_softmax_row(const std::vector<S>& logits) {
    double mx = static_cast<double>(logits[0]);
    for (S v : logits) {
        mx = std::max(mx, static_cast<double>(v));
    }
    double sum = 0.0;
    for (S v : logits) {
        sum += std::exp(static_cast<double>(v) - mx);
    }
    const double lse = mx + std::log(sum);
    std::vector<double> out(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = static_cast<double>(logits[i]) - lse;
    }
    return out;
}

} // namespace decdetail

// Breadth-limited best-first search. Per step every live hypothesis expands
// over the full vocabulary, the top `width` candidates by cumulative
// log-probability survive (ties to the lexicographically smallest token
// sequence), and candidates ending in EOS retire to the finished pool. The
// final answer maximizes sum_logp / len^length_norm over finished and
// length-capped hypotheses.
template <typename S>
BeamHypothesis beam_search_scored(const TransformerModel<S>& model, const AdapterSet<std::type_identity_t<S>>* adapters,
                                  const std::vector<int>& src_ids, const GenOptions& opts) {
    const ArchDescriptor& a = model.descriptor();
    if (opts.eos < 0 || opts.eos >= a.vocab_size || opts.bos < 0 || opts.bos >= a.vocab_size) {
        throw ConfigError("beam_search: vocabulary lacks the configured BOS/EOS id");
    }
    if (opts.width < 1 || opts.max_len < 1) {
        throw ConfigError("beam_search: width and max_len must be >= 1");
    }

    struct Live {
        std::vector<int> tokens;
        double sum_logp;
        DecodeSession<S> session;
        int pending; // token to feed next
    };
    std::vector<Live> live;
    live.push_back({{}, 0.0, DecodeSession<S>(model, adapters, src_ids), opts.bos});
    std::vector<BeamHypothesis> finished;

    struct Candidate {
        std::vector<int> tokens;
        double sum_logp;
        std::size_t from;
        int token;
    };

    for (int step = 0; step < opts.max_len && !live.empty(); ++step) {
        std::vector<Candidate> candidates;
        candidates.reserve(live.size() * static_cast<std::size_t>(a.vocab_size));
        for (std::size_t i = 0; i < live.size(); ++i) {
            const auto logp = decdetail::log_softmax_row(live[i].session.feed(live[i].pending));
            for (int tok = 0; tok < a.vocab_size; ++tok) {
                Candidate c;
                c.tokens = live[i].tokens;
                c.tokens.push_back(tok);
                c.sum_logp = live[i].sum_logp + logp[static_cast<std::size_t>(tok)];
                c.from = i;
                c.token = tok;
                candidates.push_back(std::move(c));
            }
        }
        std::sort(candidates.begin(), candidates.end(), [](const Candidate& x, const Candidate& y) {
            if (x.sum_logp != y.sum_logp) {
                return x.sum_logp > y.sum_logp;
            }
            return x.tokens < y.tokens;
        });
        const std::size_t keep = std::min<std::size_t>(candidates.size(),
                                                       static_cast<std::size_t>(opts.width));
        std::vector<Live> next;
        for (std::size_t c = 0; c < keep; ++c) {
            Candidate& cand = candidates[c];
            if (cand.token == opts.eos) {
                finished.push_back({std::move(cand.tokens), cand.sum_logp, true});
            } else if (step + 1 < opts.max_len) {
                next.push_back({std::move(cand.tokens), cand.sum_logp, live[cand.from].session,
                                cand.token});
            } else {
                // length cap reached without EOS
                finished.push_back({std::move(cand.tokens), cand.sum_logp, false});
            }
        }
        live = std::move(next);
    }

    if (finished.empty()) {
        throw NumericError("beam_search: no hypothesis produced");
    }
    const BeamHypothesis* best = &finished[0];
    for (const auto& h : finished) {
        const double s = h.score(opts.length_norm);
        const double bs = best->score(opts.length_norm);
        if (s > bs || (s == bs && h.tokens < best->tokens)) {
            best = &h;
        }
    }
    return *best;
}

template <typename S>
std::vector<int> beam_search(const TransformerModel<S>& model, const AdapterSet<std::type_identity_t<S>>* adapters,
                             const std::vector<int>& src_ids, const GenOptions& opts) {
    return beam_search_scored(model, adapters, src_ids, opts).tokens;
}

// Greedy argmax rollout; ties go to the lowest token id.
template <typename S>
std::vector<int> greedy_decode(const TransformerModel<S>& model, const AdapterSet<std::type_identity_t<S>>* adapters,
                               const std::vector<int>& src_ids, const GenOptions& opts) {
    const ArchDescriptor& a = model.descriptor();
    if (opts.eos < 0 || opts.eos >= a.vocab_size) {
        throw ConfigError("greedy_decode: vocabulary lacks the configured EOS id");
    }
    DecodeSession<S> session(model, adapters, src_ids);
    std::vector<int> out;
    int pending = opts.bos;
    for (int step = 0; step < opts.max_len; ++step) {
        const auto logits = session.feed(pending);
        int best = 0;
        for (int v = 1; v < a.vocab_size; ++v) {
            if (logits[static_cast<std::size_t>(v)] > logits[static_cast<std::size_t>(best)]) {
                best = v;
            }
        }
        out.push_back(best);
        if (best == opts.eos) {
            break;
        }
        pending = best;
    }
    return out;
}

} // namespace lopr
