// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "lopr/ops.hpp"

namespace lopr {

// Symbolic description of an encoder-decoder stack. Drives both model
// construction and the analytic parameter accountant.
struct ArchDescriptor {
    int n_enc = 0;
    int n_dec = 0;
    int d_model = 0;
    int d_ffn = 0;
    int n_heads = 1;
    int vocab_size = 0;
    int max_positions = 0;
    bool tie_embeddings = true;
    bool biases = true;

    void validate() const {
        if (n_enc < 0 || n_dec < 0) {
            throw ConfigError("descriptor: negative layer count");
        }
        if (d_model <= 0 || d_ffn <= 0 || n_heads <= 0 || vocab_size <= 0 || max_positions <= 0) {
            throw ConfigError("descriptor: all sizes must be positive");
        }
        if (d_model % n_heads != 0) {
            throw ConfigError("descriptor: d_model must be divisible by n_heads");
        }
    }

    // BART-large shape: 12+12, d=1024, ffn 4096, 50K vocab, biased dense layers
    static ArchDescriptor bart_large() {
        return {12, 12, 1024, 4096, 16, 50265, 1026, true, true};
    }

    // T5-large shape: 24+24, d=1024, ffn 4096, 32K vocab, bias-free dense layers
    static ArchDescriptor t5_large() {
        return {24, 24, 1024, 4096, 16, 32128, 512, true, false};
    }
};

// Walks every parameter of the architecture in construction order.
// Shared by build_model and by shape-level accounting checks.
inline void for_each_param_shape(const ArchDescriptor& a,
                                 const std::function<void(const std::string&, const Shape&)>& fn) {
    a.validate();
    const int d = a.d_model;
    auto dense = [&](const std::string& name, int out, int in) {
        fn(name + ".w", {out, in});
        if (a.biases) {
            fn(name + ".b", {out});
        }
    };
    auto lnorm = [&](const std::string& name) {
        fn(name + ".gamma", {d});
        fn(name + ".beta", {d});
    };
    auto attn = [&](const std::string& name) {
        dense(name + ".q", d, d);
        dense(name + ".k", d, d);
        dense(name + ".v", d, d);
        dense(name + ".o", d, d);
        lnorm(name + ".ln");
    };
    auto ffn = [&](const std::string& name) {
        dense(name + ".fc1", a.d_ffn, d);
        dense(name + ".fc2", d, a.d_ffn);
        lnorm(name + ".ln");
    };

    fn("embed.tokens", {a.vocab_size, d});
    fn("encoder.pos", {a.max_positions, d});
    lnorm("encoder.emb_ln");
    for (int i = 1; i <= a.n_enc; ++i) {
        const std::string base = "encoder." + std::to_string(i);
        attn(base + ".attn");
        ffn(base + ".ffn");
    }
    fn("decoder.pos", {a.max_positions, d});
    lnorm("decoder.emb_ln");
    for (int i = 1; i <= a.n_dec; ++i) {
        const std::string base = "decoder." + std::to_string(i);
        attn(base + ".self");
        attn(base + ".cross");
        ffn(base + ".ffn");
    }
    if (!a.tie_embeddings) {
        fn("out_proj.w", {a.vocab_size, d});
    }
}

// ---------------------------------------------------------------------------
// layer parameter bundles
// ---------------------------------------------------------------------------

template <typename S>
struct Dense {
    std::string name;
    Var<S> w;
    Var<S> b; // undefined when the architecture is bias-free
};

template <typename S>
struct LayerNormP {
    Var<S> gamma;
    Var<S> beta;
};

template <typename S>
struct AttentionBlock {
    Dense<S> q, k, v, o;
    LayerNormP<S> ln;
};

template <typename S>
struct FeedForward {
    Dense<S> fc1, fc2;
    LayerNormP<S> ln;
};

template <typename S>
struct EncoderLayer {
    int index = 0; // original 1-based position, survives pruning
    AttentionBlock<S> attn;
    FeedForward<S> ffn;
};

template <typename S>
struct DecoderLayer {
    int index = 0;
    AttentionBlock<S> self_attn;
    AttentionBlock<S> cross_attn;
    FeedForward<S> ffn;
};

// Low-rank bypass attached to one frozen dense layer: branch output is
// scaling * up(down(x)) added to the base product before the bias.
template <typename S>
struct LoraAdapter {
    Var<S> down; // [r, d_in]
    Var<S> up;   // [d_out, r]
};

template <typename S>
struct AdapterSet {
    std::unordered_map<std::string, LoraAdapter<S>> items; // keyed by dense-layer name
    S scaling = S(1);                                      // alpha / r

    const LoraAdapter<S>* find(const std::string& dense_name) const {
        auto it = items.find(dense_name);
        return it == items.end() ? nullptr : &it->second;
    }
};

template <typename S>
Var<S> apply_dense(const Dense<S>& dense, const Var<S>& x, const AdapterSet<S>* adapters) {
    Var<S> y = linear_nt(x, dense.w);
    if (adapters != nullptr) {
        if (const LoraAdapter<S>* a = adapters->find(dense.name)) {
            y = add(y, scale(linear_nt(linear_nt(x, a->down), a->up), adapters->scaling));
        }
    }
    if (dense.b.defined()) {
        y = add_bias(y, dense.b);
    }
    return y;
}

template <typename S>
struct NamedParam {
    std::string name;
    Var<S> var;
};

// ---------------------------------------------------------------------------
// the model
// ---------------------------------------------------------------------------

constexpr float kLayerNormEps = 1e-5f;
constexpr double kInitStd = 0.02;

// Encoder-decoder Transformer: post-norm residual blocks, learned absolute
// positions per stack, GELU feed-forward, optional tied output projection.
template <typename S>
class TransformerModel {
public:
    TransformerModel() = default;

    const ArchDescriptor& descriptor() const { return desc_; }
    std::vector<EncoderLayer<S>>& encoder() { return encoder_; }
    const std::vector<EncoderLayer<S>>& encoder() const { return encoder_; }
    std::vector<DecoderLayer<S>>& decoder() { return decoder_; }
    const std::vector<DecoderLayer<S>>& decoder() const { return decoder_; }

    // registry holds every parameter exactly once, in construction order
    const std::vector<NamedParam<S>>& named_params() const { return params_; }

    Var<S> param(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) {
            throw ConfigError("model: unknown parameter '" + name + "'");
        }
        return params_[it->second].var;
    }

    bool has_param(const std::string& name) const { return index_.count(name) > 0; }

    std::int64_t param_count() const {
        std::int64_t n = 0;
        for (const auto& p : params_) {
            n += p.var.numel();
        }
        return n;
    }

    void set_all_requires_grad(bool v) {
        for (auto& p : params_) {
            p.var.set_requires_grad(v);
        }
    }

    void zero_grads() {
        for (auto& p : params_) {
            p.var.zero_grad();
        }
    }

    // --- construction -------------------------------------------------

    static TransformerModel build(const ArchDescriptor& desc, std::uint64_t seed) {
        desc.validate();
        TransformerModel m;
        m.desc_ = desc;
        RandomSource rng(seed);

        std::unordered_map<std::string, Var<S>> made;
        for_each_param_shape(desc, [&](const std::string& name, const Shape& shape) {
            Tensor<S> t(shape);
            const bool is_gamma = name.size() > 6 && name.rfind(".gamma") == name.size() - 6;
            const bool is_bias_like = (name.size() > 2 && name.rfind(".b") == name.size() - 2) ||
                                      (name.size() > 5 && name.rfind(".beta") == name.size() - 5);
            if (is_gamma) {
                t.fill(S(1));
            } else if (is_bias_like) {
                t.fill(S(0));
            } else {
                for (std::int64_t i = 0; i < t.numel(); ++i) {
                    t[i] = static_cast<S>(rng.truncated_normal(kInitStd));
                }
            }
            Var<S> v = Var<S>::leaf(std::move(t), /*requires_grad=*/true);
            made.emplace(name, v);
            m.index_.emplace(name, m.params_.size());
            m.params_.push_back({name, v});
        });
        m.wire(made);
        return m;
    }

    // rebuilds layer structure from an existing name->tensor map (checkpoint
    // load, merge); missing names raise
    static TransformerModel from_tensors(const ArchDescriptor& desc,
                                         const std::unordered_map<std::string, Tensor<S>>& tensors,
                                         const std::vector<int>& enc_indices = {},
                                         const std::vector<int>& dec_indices = {}) {
        desc.validate();
        TransformerModel m;
        m.desc_ = desc;
        m.enc_indices_ = enc_indices;
        m.dec_indices_ = dec_indices;
        std::unordered_map<std::string, Var<S>> made;
        m.for_each_own_shape([&](const std::string& name, const Shape& shape) {
            auto it = tensors.find(name);
            if (it == tensors.end()) {
                throw ConfigError("model: missing tensor '" + name + "'");
            }
            if (!(it->second.shape() == shape)) {
                throw ShapeError("model: tensor '" + name + "' has shape " +
                                 shape_str(it->second.shape()) + ", expected " + shape_str(shape));
            }
            Var<S> v = Var<S>::leaf(it->second, /*requires_grad=*/true);
            made.emplace(name, v);
            m.index_.emplace(name, m.params_.size());
            m.params_.push_back({name, v});
        });
        m.wire(made);
        return m;
    }

    // deep copy: fresh leaves, same values
    TransformerModel clone() const {
        std::unordered_map<std::string, Tensor<S>> tensors;
        for (const auto& p : params_) {
            tensors.emplace(p.name, p.var.value());
        }
        return from_tensors(desc_, tensors, enc_indices_, dec_indices_);
    }

    // original 1-based indices of surviving layers (empty = unpruned 1..n)
    const std::vector<int>& encoder_indices() const { return enc_indices_; }
    const std::vector<int>& decoder_indices() const { return dec_indices_; }

    // --- forward -------------------------------------------------------

    Var<S> encode(const IdMatrix& src, const std::vector<int>& src_len,
                  const AdapterSet<S>* adapters = nullptr) const {
        check_ids(src, "source");
        if (static_cast<int>(src_len.size()) != src.rows) {
            throw ShapeError("forward: src_len size does not match batch");
        }
        AttnMask self_mask;
        self_mask.key_len = src_len;
        self_mask.query_len = src_len; // padded rows are dead

        Var<S> x = embed_stack(src, enc_pos_, enc_emb_ln_);
        for (const auto& layer : encoder_) {
            x = attention_block(layer.attn, x, x, self_mask, adapters);
            x = ffn_block(layer.ffn, x, adapters);
        }
        return x;
    }

    // teacher-forced logits [batch, tgt_len, vocab]; decoder self-attention
    // is causal, cross attention masks padded source keys; tgt_len marks the
    // live decoder rows (empty = all rows)
    Var<S> forward(const IdMatrix& src, const std::vector<int>& src_len, const IdMatrix& tgt_in,
                   const AdapterSet<S>* adapters = nullptr,
                   const std::vector<int>& tgt_len = {}) const {
        Var<S> memory = encode(src, src_len, adapters);
        return decode_train(memory, src_len, tgt_in, adapters, tgt_len);
    }

    Var<S> decode_train(const Var<S>& memory, const std::vector<int>& src_len, const IdMatrix& tgt_in,
                        const AdapterSet<S>* adapters = nullptr,
                        const std::vector<int>& tgt_len = {}) const {
        check_ids(tgt_in, "target");
        AttnMask causal;
        causal.causal = true;
        causal.query_len = tgt_len;
        AttnMask cross_mask;
        cross_mask.key_len = src_len;
        cross_mask.query_len = tgt_len;

        Var<S> x = embed_stack(tgt_in, dec_pos_, dec_emb_ln_);
        for (const auto& layer : decoder_) {
            x = attention_block(layer.self_attn, x, x, causal, adapters);
            x = attention_block(layer.cross_attn, x, memory, cross_mask, adapters);
            x = ffn_block(layer.ffn, x, adapters);
        }
        return output_logits(x);
    }

    Var<S> output_logits(const Var<S>& x) const {
        if (desc_.tie_embeddings) {
            return linear_nt(x, tok_embed_);
        }
        return linear_nt(x, out_proj_);
    }

    Var<S> tok_embed() const { return tok_embed_; }
    Var<S> enc_pos() const { return enc_pos_; }
    Var<S> dec_pos() const { return dec_pos_; }
    const LayerNormP<S>& enc_emb_ln() const { return enc_emb_ln_; }
    const LayerNormP<S>& dec_emb_ln() const { return dec_emb_ln_; }

    Var<S> embed_stack(const IdMatrix& ids, const Var<S>& pos_table, const LayerNormP<S>& ln) const {
        IdMatrix positions(ids.rows, ids.cols);
        for (int r = 0; r < ids.rows; ++r) {
            for (int c = 0; c < ids.cols; ++c) {
                positions.at(r, c) = c;
            }
        }
        Var<S> x = add(embedding(tok_embed_, ids), embedding(pos_table, positions));
        return layer_norm(x, ln.gamma, ln.beta, static_cast<S>(kLayerNormEps));
    }

    Var<S> attention_block(const AttentionBlock<S>& block, const Var<S>& xq, const Var<S>& xkv,
                           const AttnMask& mask, const AdapterSet<S>* adapters) const {
        Var<S> q = apply_dense(block.q, xq, adapters);
        Var<S> k = apply_dense(block.k, xkv, adapters);
        Var<S> v = apply_dense(block.v, xkv, adapters);
        Var<S> ctx = fused_attention(q, k, v, desc_.n_heads, mask);
        Var<S> out = apply_dense(block.o, ctx, adapters);
        return layer_norm(add(xq, out), block.ln.gamma, block.ln.beta, static_cast<S>(kLayerNormEps));
    }

    Var<S> ffn_block(const FeedForward<S>& ffn, const Var<S>& x, const AdapterSet<S>* adapters) const {
        Var<S> h = gelu(apply_dense(ffn.fc1, x, adapters));
        Var<S> out = apply_dense(ffn.fc2, h, adapters);
        return layer_norm(add(x, out), ffn.ln.gamma, ffn.ln.beta, static_cast<S>(kLayerNormEps));
    }

private:
    void check_ids(const IdMatrix& m, const char* what) const {
        if (m.cols > desc_.max_positions) {
            throw ShapeError(std::string("forward: ") + what + " length " + std::to_string(m.cols) +
                             " exceeds max_positions " + std::to_string(desc_.max_positions));
        }
        for (int id : m.ids) {
            if (id < 0 || id >= desc_.vocab_size) {
                throw ShapeError(std::string("forward: ") + what + " id " + std::to_string(id) +
                                 " out of range");
            }
        }
    }

    // shape walk honoring surviving layer indices
    void for_each_own_shape(const std::function<void(const std::string&, const Shape&)>& fn) const {
        std::vector<int> enc = enc_indices_;
        std::vector<int> dec = dec_indices_;
        if (enc.empty()) {
            for (int i = 1; i <= desc_.n_enc; ++i) {
                enc.push_back(i);
            }
        }
        if (dec.empty()) {
            for (int i = 1; i <= desc_.n_dec; ++i) {
                dec.push_back(i);
            }
        }
        ArchDescriptor full = desc_;
        full.n_enc = static_cast<int>(enc.size());
        full.n_dec = static_cast<int>(dec.size());
        // enumerate with contiguous counts, then rename to original indices
        for_each_param_shape(full, [&](const std::string& name, const Shape& shape) {
            fn(rename_layer(name, enc, dec), shape);
        });
    }

    static std::string rename_layer(const std::string& name, const std::vector<int>& enc,
                                    const std::vector<int>& dec) {
        auto remap = [&](const std::string& prefix, const std::vector<int>& order,
                         const std::string& s) -> std::string {
            if (s.rfind(prefix, 0) != 0) {
                return s;
            }
            const std::size_t start = prefix.size();
            const std::size_t dot = s.find('.', start);
            if (dot == std::string::npos) {
                return s;
            }
            const std::string num = s.substr(start, dot - start);
            if (num.empty() || num.find_first_not_of("0123456789") != std::string::npos) {
                return s;
            }
            const int contiguous = std::stoi(num);
            return prefix + std::to_string(order[static_cast<std::size_t>(contiguous - 1)]) +
                   s.substr(dot);
        };
        std::string out = remap("encoder.", enc, name);
        out = remap("decoder.", dec, out);
        return out;
    }

    void wire(const std::unordered_map<std::string, Var<S>>& made) {
        auto get = [&](const std::string& name) { return made.at(name); };
        auto maybe = [&](const std::string& name) -> Var<S> {
            auto it = made.find(name);
            return it == made.end() ? Var<S>() : it->second;
        };
        auto dense = [&](const std::string& name) {
            return Dense<S>{name, get(name + ".w"), desc_.biases ? get(name + ".b") : Var<S>()};
        };
        auto lnorm = [&](const std::string& name) {
            return LayerNormP<S>{get(name + ".gamma"), get(name + ".beta")};
        };
        auto attn = [&](const std::string& name) {
            return AttentionBlock<S>{dense(name + ".q"), dense(name + ".k"), dense(name + ".v"),
                                     dense(name + ".o"), lnorm(name + ".ln")};
        };
        auto ffn = [&](const std::string& name) {
            return FeedForward<S>{dense(name + ".fc1"), dense(name + ".fc2"), lnorm(name + ".ln")};
        };

        tok_embed_ = get("embed.tokens");
        enc_pos_ = get("encoder.pos");
        enc_emb_ln_ = lnorm("encoder.emb_ln");
        dec_pos_ = get("decoder.pos");
        dec_emb_ln_ = lnorm("decoder.emb_ln");
        out_proj_ = maybe("out_proj.w");

        std::vector<int> enc = enc_indices_;
        std::vector<int> dec = dec_indices_;
        if (enc.empty()) {
            for (int i = 1; i <= desc_.n_enc; ++i) {
                enc.push_back(i);
            }
        }
        if (dec.empty()) {
            for (int i = 1; i <= desc_.n_dec; ++i) {
                dec.push_back(i);
            }
        }
        encoder_.clear();
        decoder_.clear();
        for (int idx : enc) {
            const std::string base = "encoder." + std::to_string(idx);
            encoder_.push_back({idx, attn(base + ".attn"), ffn(base + ".ffn")});
        }
        for (int idx : dec) {
            const std::string base = "decoder." + std::to_string(idx);
            decoder_.push_back({idx, attn(base + ".self"), attn(base + ".cross"), ffn(base + ".ffn")});
        }
    }

    ArchDescriptor desc_;
    Var<S> tok_embed_;
    Var<S> enc_pos_, dec_pos_;
    LayerNormP<S> enc_emb_ln_, dec_emb_ln_;
    Var<S> out_proj_;
    std::vector<EncoderLayer<S>> encoder_;
    std::vector<DecoderLayer<S>> decoder_;
    std::vector<NamedParam<S>> params_;
    std::unordered_map<std::string, std::size_t> index_;
    std::vector<int> enc_indices_, dec_indices_; // empty = full stack
};

template <typename S>
TransformerModel<S> build_model(const ArchDescriptor& desc, std::uint64_t seed) {
    return TransformerModel<S>::build(desc, seed);
}

// mean token-level cross-entropy over non-pad target positions
template <typename S>
Var<S> seq_loss(const Var<S>& logits, const IdMatrix& targets, int pad_id) {
    return cross_entropy_mean(logits, targets, pad_id);
}

} // namespace lopr
