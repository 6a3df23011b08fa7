// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "lopr/lora.hpp"
#include "lopr/model.hpp"
#include "lopr/optim.hpp"

namespace lopr {

// Versioned container: magic "LOPR1", textual key=value metadata block,
// then named tensors as little-endian 32-bit floats with explicit shapes.
// Round trips are bit exact.

inline constexpr char kCheckpointMagic[] = "LOPR1\n";

namespace ckptdetail {

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) {
        out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
}

inline void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
        out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
}

struct Reader {
    const std::string& buf;
    std::size_t at = 0;

    void need(std::size_t n) const {
        if (at + n > buf.size()) {
            throw IoError("checkpoint: truncated file");
        }
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) {
            v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[at + i])) << (8 * i);
        }
        at += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) {
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[at + i])) << (8 * i);
        }
        at += 8;
        return v;
    }
    std::string bytes(std::size_t n) {
        need(n);
        std::string s = buf.substr(at, n);
        at += n;
        return s;
    }
};

} // namespace ckptdetail

// percent-escaping for metadata values (newline, '=', '%', control bytes)
inline std::string meta_escape(const std::string& s) {
    static const char* hex = "0123456789ABCDEF";
    std::string out;
    out.reserve(s.size());
    for (unsigned char c : s) {
        if (c < 0x21 || c == '%' || c == '=' || c == 0x7f) {
            out.push_back('%');
            out.push_back(hex[c >> 4]);
            out.push_back(hex[c & 0xf]);
        } else {
            out.push_back(static_cast<char>(c));
        }
    }
    return out;
}

inline std::string meta_unescape(const std::string& s) {
    auto nib = [](char c) -> int {
        if (c >= '0' && c <= '9') {
            return c - '0';
        }
        if (c >= 'A' && c <= 'F') {
            return c - 'A' + 10;
        }
        if (c >= 'a' && c <= 'f') {
            return c - 'a' + 10;
        }
        throw IoError("checkpoint: bad escape sequence");
    };
    std::string out;
    out.reserve(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (s[i] == '%') {
            if (i + 2 >= s.size()) {
                throw IoError("checkpoint: bad escape sequence");
            }
            out.push_back(static_cast<char>((nib(s[i + 1]) << 4) | nib(s[i + 2])));
            i += 2;
        } else {
            out.push_back(s[i]);
        }
    }
    return out;
}

struct Checkpoint {
    std::map<std::string, std::string> meta;
    std::vector<std::pair<std::string, Tensor<float>>> tensors;

    const Tensor<float>* find(const std::string& name) const {
        for (const auto& [n, t] : tensors) {
            if (n == name) {
                return &t;
            }
        }
        return nullptr;
    }

    std::string meta_at(const std::string& key) const {
        auto it = meta.find(key);
        if (it == meta.end()) {
            throw IoError("checkpoint: missing metadata key '" + key + "'");
        }
        return it->second;
    }

    long meta_long(const std::string& key) const { return std::stol(meta_at(key)); }
};

inline void write_checkpoint(const std::string& path, const std::map<std::string, std::string>& meta,
                             const std::vector<std::pair<std::string, const Tensor<float>*>>& tensors) {
    std::string meta_block;
    for (const auto& [k, v] : meta) {
        meta_block += k + "=" + meta_escape(v) + "\n";
    }
    std::string out;
    out += kCheckpointMagic;
    ckptdetail::put_u64(out, meta_block.size());
    out += meta_block;
    ckptdetail::put_u64(out, tensors.size());
    for (const auto& [name, t] : tensors) {
        ckptdetail::put_u32(out, static_cast<std::uint32_t>(name.size()));
        out += name;
        ckptdetail::put_u32(out, static_cast<std::uint32_t>(t->rank()));
        for (int i = 0; i < t->rank(); ++i) {
            ckptdetail::put_u64(out, static_cast<std::uint64_t>(t->dim(i)));
        }
        for (std::int64_t i = 0; i < t->numel(); ++i) {
            ckptdetail::put_u32(out, std::bit_cast<std::uint32_t>((*t)[i]));
        }
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) {
        throw IoError("checkpoint: cannot open '" + path + "' for writing");
    }
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) {
        throw IoError("checkpoint: write failed for '" + path + "'");
    }
}

inline Checkpoint read_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) {
        throw IoError("checkpoint: cannot open '" + path + "'");
    }
    std::ostringstream ss;
    ss << f.rdbuf();
    const std::string buf = ss.str();
    ckptdetail::Reader r{buf};
    if (r.bytes(6) != kCheckpointMagic) {
        throw IoError("checkpoint: bad magic in '" + path + "'");
    }
    Checkpoint ckpt;
    const std::uint64_t meta_len = r.u64();
    std::istringstream meta_stream(r.bytes(meta_len));
    std::string line;
    while (std::getline(meta_stream, line)) {
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            continue;
        }
        ckpt.meta[line.substr(0, eq)] = meta_unescape(line.substr(eq + 1));
    }
    const std::uint64_t count = r.u64();
    ckpt.tensors.reserve(count);
    for (std::uint64_t i = 0; i < count; ++i) {
        const std::uint32_t name_len = r.u32();
        const std::string name = r.bytes(name_len);
        const std::uint32_t rank = r.u32();
        Shape shape;
        for (std::uint32_t k = 0; k < rank; ++k) {
            shape.push_back(static_cast<int>(r.u64()));
        }
        Tensor<float> t(shape);
        for (std::int64_t k = 0; k < t.numel(); ++k) {
            t[k] = std::bit_cast<float>(r.u32());
        }
        ckpt.tensors.emplace_back(name, std::move(t));
    }
    return ckpt;
}

// FNV-1a over tensor names and raw little-endian payloads in registry order.
inline std::uint64_t content_hash(const std::vector<NamedParam<float>>& params) {
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&](const void* data, std::size_t n) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= p[i];
            h *= 1099511628211ull;
        }
    };
    for (const auto& p : params) {
        mix(p.name.data(), p.name.size());
        const auto& t = p.var.value();
        for (std::int64_t i = 0; i < t.numel(); ++i) {
            const std::uint32_t bits = std::bit_cast<std::uint32_t>(t[i]);
            mix(&bits, 4);
        }
    }
    return h;
}

// ---------------------------------------------------------------------------
// model / adapter / optimizer payloads
// ---------------------------------------------------------------------------

namespace ckptdetail {

inline std::string join_ints(const std::vector<int>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) {
        s += (i ? "," : "") + std::to_string(v[i]);
    }
    return s;
}

inline std::vector<int> split_ints(const std::string& s) {
    std::vector<int> out;
    std::istringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) {
            out.push_back(std::stoi(item));
        }
    }
    return out;
}

} // namespace ckptdetail

inline void descriptor_to_meta(const ArchDescriptor& a, std::map<std::string, std::string>& meta) {
    meta["arch.n_enc"] = std::to_string(a.n_enc);
    meta["arch.n_dec"] = std::to_string(a.n_dec);
    meta["arch.d_model"] = std::to_string(a.d_model);
    meta["arch.d_ffn"] = std::to_string(a.d_ffn);
    meta["arch.n_heads"] = std::to_string(a.n_heads);
    meta["arch.vocab_size"] = std::to_string(a.vocab_size);
    meta["arch.max_positions"] = std::to_string(a.max_positions);
    meta["arch.tie_embeddings"] = a.tie_embeddings ? "1" : "0";
    meta["arch.biases"] = a.biases ? "1" : "0";
}

inline ArchDescriptor descriptor_from_meta(const Checkpoint& c) {
    ArchDescriptor a;
    a.n_enc = static_cast<int>(c.meta_long("arch.n_enc"));
    a.n_dec = static_cast<int>(c.meta_long("arch.n_dec"));
    a.d_model = static_cast<int>(c.meta_long("arch.d_model"));
    a.d_ffn = static_cast<int>(c.meta_long("arch.d_ffn"));
    a.n_heads = static_cast<int>(c.meta_long("arch.n_heads"));
    a.vocab_size = static_cast<int>(c.meta_long("arch.vocab_size"));
    a.max_positions = static_cast<int>(c.meta_long("arch.max_positions"));
    a.tie_embeddings = c.meta_long("arch.tie_embeddings") != 0;
    a.biases = c.meta_long("arch.biases") != 0;
    return a;
}

// Full model checkpoint. The prune plan is stored as explicit kept-index
// lists so files are self-describing.
inline void save_model_checkpoint(const std::string& path, const TransformerModel<float>& model,
                                  std::map<std::string, std::string> meta = {}) {
    meta["kind"] = "model";
    descriptor_to_meta(model.descriptor(), meta);
    meta["prune.enc_kept"] = ckptdetail::join_ints(model.encoder_indices());
    meta["prune.dec_kept"] = ckptdetail::join_ints(model.decoder_indices());
    std::vector<std::pair<std::string, const Tensor<float>*>> tensors;
    for (const auto& p : model.named_params()) {
        tensors.emplace_back(p.name, &p.var.value());
    }
    write_checkpoint(path, meta, tensors);
}

inline TransformerModel<float> model_from_checkpoint(const Checkpoint& c) {
    if (c.meta_at("kind") != "model") {
        throw IoError("checkpoint: expected kind=model, got '" + c.meta_at("kind") + "'");
    }
    const ArchDescriptor desc = descriptor_from_meta(c);
    std::unordered_map<std::string, Tensor<float>> tensors;
    for (const auto& [name, t] : c.tensors) {
        tensors.emplace(name, t);
    }
    return TransformerModel<float>::from_tensors(desc, tensors,
                                                 ckptdetail::split_ints(c.meta_at("prune.enc_kept")),
                                                 ckptdetail::split_ints(c.meta_at("prune.dec_kept")));
}

inline TransformerModel<float> load_model_checkpoint(const std::string& path,
                                                     std::map<std::string, std::string>* meta_out = nullptr) {
    const Checkpoint c = read_checkpoint(path);
    if (meta_out != nullptr) {
        *meta_out = c.meta;
    }
    return model_from_checkpoint(c);
}

// Adapter-only checkpoint: stores the down/up pairs, the LoRA config and a
// content hash of the frozen base so N tasks can share one base file.
inline void save_adapter_checkpoint(const std::string& path, const AdaptedModel<float>& adapted,
                                    std::map<std::string, std::string> meta = {}) {
    meta["kind"] = "adapters";
    descriptor_to_meta(adapted.base.descriptor(), meta);
    meta["prune.enc_kept"] = ckptdetail::join_ints(adapted.base.encoder_indices());
    meta["prune.dec_kept"] = ckptdetail::join_ints(adapted.base.decoder_indices());
    meta["lora.rank"] = std::to_string(adapted.config.rank);
    meta["lora.alpha"] = std::to_string(adapted.config.alpha);
    meta["lora.placement"] = placement_name(adapted.config.placement);
    meta["base.hash"] = std::to_string(content_hash(adapted.base.named_params()));
    std::vector<std::pair<std::string, const Tensor<float>*>> tensors;
    const auto adapter_params = adapted.named_adapter_params();
    for (const auto& p : adapter_params) {
        tensors.emplace_back(p.name, &p.var.value());
    }
    write_checkpoint(path, meta, tensors);
}

// Rebuilds an adapted model over the given base; the stored base hash must
// match unless verify_hash is false.
inline AdaptedModel<float> load_adapter_checkpoint(const std::string& path,
                                                   TransformerModel<float> base,
                                                   bool verify_hash = true) {
    const Checkpoint c = read_checkpoint(path);
    if (c.meta_at("kind") != "adapters") {
        throw IoError("checkpoint: expected kind=adapters");
    }
    if (verify_hash &&
        std::to_string(content_hash(base.named_params())) != c.meta_at("base.hash")) {
        throw IoError("checkpoint: adapter file does not match this base model");
    }
    LoraConfig cfg;
    cfg.rank = static_cast<int>(c.meta_long("lora.rank"));
    cfg.alpha = std::stod(c.meta_at("lora.alpha"));
    cfg.placement = parse_placement(c.meta_at("lora.placement"));

    AdaptedModel<float> adapted = inject(std::move(base), cfg, /*seed=*/0);
    for (auto& target : adapted.target_order) {
        const Tensor<float>* down = c.find(target + ".lora_down");
        const Tensor<float>* up = c.find(target + ".lora_up");
        if (down == nullptr || up == nullptr) {
            throw IoError("checkpoint: missing adapter tensors for '" + target + "'");
        }
        adapted.adapters.items.at(target).down.mutable_value() = *down;
        adapted.adapters.items.at(target).up.mutable_value() = *up;
    }
    return adapted;
}

// Optimizer moments + step ride along in the same container for exact
// training resumption.
inline void optimizer_to_tensors(const AdamW<float>& opt,
                                 std::vector<std::pair<std::string, const Tensor<float>*>>& tensors,
                                 std::map<std::string, std::string>& meta) {
    meta["optim.step"] = std::to_string(opt.step_count());
    for (const auto& slot : opt.slots()) {
        tensors.emplace_back("optim.m." + slot.name, &slot.m);
        tensors.emplace_back("optim.v." + slot.name, &slot.v);
    }
}

inline void optimizer_from_checkpoint(const Checkpoint& c, AdamW<float>& opt) {
    opt.set_step_count(c.meta_long("optim.step"));
    for (auto& slot : opt.slots()) {
        const Tensor<float>* m = c.find("optim.m." + slot.name);
        const Tensor<float>* v = c.find("optim.v." + slot.name);
        if (m == nullptr || v == nullptr) {
            throw IoError("checkpoint: missing optimizer state for '" + slot.name + "'");
        }
        slot.m = *m;
        slot.v = *v;
    }
}

} // namespace lopr
