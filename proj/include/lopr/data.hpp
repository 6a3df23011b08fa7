// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "lopr/metrics.hpp"
#include "lopr/tensor.hpp"

namespace lopr {

// ---------------------------------------------------------------------------
// vocabulary
// ---------------------------------------------------------------------------

// Token <-> id bijection with reserved pad/bos/eos/unk ids.
class Vocab {
public:
    static constexpr int kPad = 0;
    static constexpr int kBos = 1;
    static constexpr int kEos = 2;
    static constexpr int kUnk = 3;
    static constexpr int kReserved = 4;

    enum class Mode { Char, Word };

    Vocab() = default;

    Mode mode() const { return mode_; }
    int size() const { return static_cast<int>(tokens_.size()); }
    const std::vector<std::string>& tokens() const { return tokens_; }

    int id_of(const std::string& token) const {
        auto it = index_.find(token);
        return it == index_.end() ? kUnk : it->second;
    }

    const std::string& token_of(int id) const { return tokens_[static_cast<std::size_t>(id)]; }

    std::vector<int> encode(const std::string& text) const {
        std::vector<int> out;
        if (mode_ == Mode::Char) {
            out.reserve(text.size());
            for (char c : text) {
                out.push_back(id_of(std::string(1, c)));
            }
        } else {
            for (const auto& w : split_words(text)) {
                out.push_back(id_of(w));
            }
        }
        return out;
    }

    std::string decode(const std::vector<int>& ids, bool strip_special = true) const {
        std::string out;
        bool first = true;
        for (int id : ids) {
            if (id < 0 || id >= size()) {
                throw ConfigError("vocab: id out of range in decode");
            }
            if (strip_special && id < kReserved) {
                continue;
            }
            if (mode_ == Mode::Word && !first) {
                out += " ";
            }
            out += tokens_[static_cast<std::size_t>(id)];
            first = false;
        }
        return out;
    }

    // frequency-ranked build; ties broken by token text for determinism
    static Vocab build(const std::vector<std::string>& texts, Mode mode, int max_size) {
        if (max_size < kReserved) {
            throw ConfigError("vocab: max_size below reserved token count");
        }
        std::map<std::string, std::int64_t> freq;
        for (const auto& text : texts) {
            if (mode == Mode::Char) {
                for (char c : text) {
                    ++freq[std::string(1, c)];
                }
            } else {
                for (const auto& w : split_words(text)) {
                    ++freq[w];
                }
            }
        }
        std::vector<std::pair<std::string, std::int64_t>> ranked(freq.begin(), freq.end());
        std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
            return a.second != b.second ? a.second > b.second : a.first < b.first;
        });
        Vocab v;
        v.mode_ = mode;
        v.tokens_ = {"<pad>", "<s>", "</s>", "<unk>"};
        for (const auto& [tok, n] : ranked) {
            if (v.size() >= max_size) {
                break;
            }
            v.tokens_.push_back(tok);
        }
        v.reindex();
        return v;
    }

    // single-string serialization for checkpoint metadata
    std::string to_string() const {
        std::string out = mode_ == Mode::Char ? "char" : "word";
        for (const auto& t : tokens_) {
            out.push_back('\x1f');
            out += t;
        }
        return out;
    }

    static Vocab from_string(const std::string& s) {
        Vocab v;
        std::vector<std::string> parts;
        std::string cur;
        for (char c : s) {
            if (c == '\x1f') {
                parts.push_back(cur);
                cur.clear();
            } else {
                cur.push_back(c);
            }
        }
        parts.push_back(cur);
        if (parts.size() < 5) {
            throw IoError("vocab: malformed serialized form");
        }
        v.mode_ = parts[0] == "word" ? Mode::Word : Mode::Char;
        v.tokens_.assign(parts.begin() + 1, parts.end());
        v.reindex();
        return v;
    }

    static std::vector<std::string> split_words(const std::string& text) {
        std::vector<std::string> out;
        std::string cur;
        for (unsigned char c : text) {
            if (std::isspace(c)) {
                if (!cur.empty()) {
                    out.push_back(cur);
                    cur.clear();
                }
            } else {
                cur.push_back(static_cast<char>(c));
            }
        }
        if (!cur.empty()) {
            out.push_back(cur);
        }
        return out;
    }

private:
    void reindex() {
        index_.clear();
        for (std::size_t i = 0; i < tokens_.size(); ++i) {
            index_[tokens_[i]] = static_cast<int>(i);
        }
    }

    Mode mode_ = Mode::Char;
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> index_;
};

// ---------------------------------------------------------------------------
// examples and dataset files
// ---------------------------------------------------------------------------

struct Seq2SeqExample {
    std::string id;
    std::string source;
    std::string target;
};

// one example per line, tab-separated source and target, UTF-8
inline std::vector<Seq2SeqExample> load_tsv(const std::string& path) {
    std::ifstream f(path);
    if (!f) {
        throw IoError("dataset: cannot open '" + path + "'");
    }
    std::vector<Seq2SeqExample> out;
    std::string line;
    long line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        if (line.empty()) {
            continue;
        }
        const auto tab = line.find('\t');
        if (tab == std::string::npos) {
            throw IoError("dataset: line " + std::to_string(line_no) + " of '" + path +
                          "' has no tab separator");
        }
        Seq2SeqExample ex;
        ex.id = std::to_string(line_no);
        ex.source = line.substr(0, tab);
        ex.target = line.substr(tab + 1);
        if (ex.source.empty() || ex.target.empty()) {
            throw IoError("dataset: line " + std::to_string(line_no) + " has an empty side");
        }
        out.push_back(std::move(ex));
    }
    return out;
}

inline void save_tsv(const std::string& path, const std::vector<Seq2SeqExample>& examples) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) {
        throw IoError("dataset: cannot open '" + path + "' for writing");
    }
    for (const auto& ex : examples) {
        std::string src = ex.source, tgt = ex.target;
        for (auto* s : {&src, &tgt}) {
            for (char& c : *s) {
                if (c == '\t' || c == '\n' || c == '\r') {
                    c = ' ';
                }
            }
        }
        f << src << '\t' << tgt << '\n';
    }
}

// deterministic 80/10/10 split by hash of the example id
enum class Split { train, valid, test };

inline Split split_of(const std::string& id) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : id) {
        h ^= c;
        h *= 1099511628211ull;
    }
    const std::uint64_t bucket = h % 10;
    if (bucket < 8) {
        return Split::train;
    }
    return bucket == 8 ? Split::valid : Split::test;
}

inline std::vector<Seq2SeqExample> take_split(const std::vector<Seq2SeqExample>& all, Split which) {
    std::vector<Seq2SeqExample> out;
    for (const auto& ex : all) {
        if (split_of(ex.id) == which) {
            out.push_back(ex);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// section-pattern extraction
// ---------------------------------------------------------------------------

// Literal section-title markers partitioning a report into body and summary
// content.
struct SectionPatternSpec {
    std::vector<std::string> body_markers;
    std::vector<std::string> summary_markers;
    bool case_insensitive = false;

    void validate() const {
        if (body_markers.empty() || summary_markers.empty()) {
            throw ConfigError("pattern spec: marker lists must be non-empty");
        }
        for (const auto& b : body_markers) {
            for (const auto& s : summary_markers) {
                if (b == s) {
                    throw ConfigError("pattern spec: marker '" + b + "' appears in both lists");
                }
            }
        }
    }

    static SectionPatternSpec radiology_default() {
        SectionPatternSpec spec;
        spec.body_markers = {"findings:"};
        spec.summary_markers = {"impression:"};
        return spec;
    }
};

// config file: one marker per line under [body] / [summary] headings;
// an optional [options] heading may set case_insensitive
inline SectionPatternSpec parse_pattern_spec_text(const std::string& text) {
    SectionPatternSpec spec;
    std::istringstream ss(text);
    std::string line;
    int section = 0; // 1=body 2=summary 3=options
    while (std::getline(ss, line)) {
        while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) {
            line.pop_back();
        }
        std::size_t start = line.find_first_not_of(" \t");
        if (start == std::string::npos) {
            continue;
        }
        const std::string item = line.substr(start);
        if (item[0] == '#') {
            continue;
        }
        if (item == "[body]") {
            section = 1;
        } else if (item == "[summary]") {
            section = 2;
        } else if (item == "[options]") {
            section = 3;
        } else if (section == 1) {
            spec.body_markers.push_back(item);
        } else if (section == 2) {
            spec.summary_markers.push_back(item);
        } else if (section == 3) {
            if (item == "case_insensitive=true" || item == "case_insensitive = true") {
                spec.case_insensitive = true;
            }
        } else {
            throw ConfigError("pattern spec: marker before any [body]/[summary] heading");
        }
    }
    spec.validate();
    return spec;
}

inline SectionPatternSpec parse_pattern_spec_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) {
        throw IoError("pattern spec: cannot open '" + path + "'");
    }
    std::ostringstream ss;
    ss << f.rdbuf();
    return parse_pattern_spec_text(ss.str());
}

namespace datadetail {

inline std::string lower(const std::string& s) {
    std::string out = s;
    for (char& c : out) {
        c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    }
    return out;
}

inline std::string trim(const std::string& s) {
    std::size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) {
        ++a;
    }
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) {
        --b;
    }
    return s.substr(a, b - a);
}

struct MarkerHit {
    std::size_t pos;
    std::size_t len;
    bool is_summary;
};

} // namespace datadetail

// Splits a document at every marker occurrence; each section runs to the
// next marker or end of text. Body sections concatenate into the source,
// summary sections into the target, both in document order. Returns nothing
// when either side ends up empty.
inline std::optional<Seq2SeqExample> extract_pairs(const std::string& document,
                                                   const SectionPatternSpec& spec,
                                                   const std::string& id = "") {
    spec.validate();
    const std::string haystack = spec.case_insensitive ? datadetail::lower(document) : document;
    std::vector<datadetail::MarkerHit> hits;
    auto scan = [&](const std::vector<std::string>& markers, bool is_summary) {
        for (const auto& m : markers) {
            const std::string needle = spec.case_insensitive ? datadetail::lower(m) : m;
            std::size_t at = 0;
            while ((at = haystack.find(needle, at)) != std::string::npos) {
                hits.push_back({at, needle.size(), is_summary});
                at += 1;
            }
        }
    };
    scan(spec.body_markers, false);
    scan(spec.summary_markers, true);
    std::sort(hits.begin(), hits.end(),
              [](const auto& a, const auto& b) { return a.pos < b.pos; });

    std::string source, target;
    for (std::size_t i = 0; i < hits.size(); ++i) {
        const std::size_t content_begin = hits[i].pos + hits[i].len;
        const std::size_t content_end = i + 1 < hits.size() ? hits[i + 1].pos : document.size();
        if (content_end <= content_begin) {
            continue;
        }
        const std::string content =
            datadetail::trim(document.substr(content_begin, content_end - content_begin));
        if (content.empty()) {
            continue;
        }
        std::string& dst = hits[i].is_summary ? target : source;
        if (!dst.empty()) {
            dst += " ";
        }
        dst += content;
    }
    if (source.empty() || target.empty()) {
        return std::nullopt;
    }
    return Seq2SeqExample{id, source, target};
}

// ---------------------------------------------------------------------------
// synthetic report corpus
// ---------------------------------------------------------------------------

// Deterministic report generator. Documents carry named sections; the
// summary is the first sentence of each designated section, so the target
// is an extractive function of the source. The noise knob paraphrases
// summary words into synonyms absent from the source lexicon, moving the
// novel-unigram ratio toward the configured value.
struct SynthSpec {
    int size = 1000;
    std::uint64_t seed = 1;
    double noise = 0.0;      // per-word paraphrase probability
    int lexicon_size = 40;
    int min_sections = 2;
    int max_sections = 3;
    int min_sentences = 1;
    int max_sentences = 2;
    int min_words = 3;
    int max_words = 5;

    void validate() const {
        if (size < 1 || lexicon_size < 5 || min_sections < 1 || max_sections < min_sections ||
            min_sentences < 1 || max_sentences < min_sentences || min_words < 1 ||
            max_words < min_words) {
            throw ConfigError("synth: invalid generator parameters");
        }
        if (noise < 0.0 || noise > 1.0) {
            throw ConfigError("synth: noise must lie in [0,1]");
        }
    }
};

struct SynthCorpus {
    std::vector<std::string> documents;
    std::vector<Seq2SeqExample> examples;
    SectionPatternSpec spec;
};

namespace datadetail {

// pseudo-words from syllables; 'x' never appears, so word+"x" synonyms are
// guaranteed novel against every source
inline std::vector<std::string> make_lexicon(int size) {
    static const char consonants[] = "bdfgklmnprstvz";
    static const char vowels[] = "aeiou";
    const int space = 14 * 5 * 14 * 5;
    if (size > space) {
        throw ConfigError("synth: lexicon size exceeds the syllable space");
    }
    std::vector<std::string> words;
    words.reserve(static_cast<std::size_t>(size));
    for (int i = 0; i < size; ++i) {
        // 2311 is coprime with 4900: a fixed permutation spreads prefixes
        int idx = static_cast<int>((static_cast<long long>(i) * 2311) % space);
        const int v2 = idx % 5;
        idx /= 5;
        const int c2 = idx % 14;
        idx /= 14;
        const int v1 = idx % 5;
        idx /= 5;
        const int c1 = idx % 14;
        words.push_back(std::string() + consonants[c1] + vowels[v1] + consonants[c2] + vowels[v2]);
    }
    return words;
}

} // namespace datadetail

inline SynthCorpus synth_corpus(const SynthSpec& spec) {
    spec.validate();
    const std::vector<std::string> lexicon = datadetail::make_lexicon(spec.lexicon_size);
    const std::vector<std::string> section_names = {"history:", "exam:", "labs:", "course:"};
    const std::vector<std::string> summary_sections = {"exam:", "course:"}; // contribute to target

    SynthCorpus out;
    out.spec.body_markers = section_names;
    out.spec.summary_markers = {"impression:"};

    RandomSource rng(spec.seed);
    auto word = [&]() { return lexicon[static_cast<std::size_t>(rng.below(lexicon.size()))]; };
    auto sentence = [&]() {
        const int n = spec.min_words + static_cast<int>(rng.below(spec.max_words - spec.min_words + 1));
        std::string s;
        for (int i = 0; i < n; ++i) {
            if (i) {
                s += " ";
            }
            s += word();
        }
        return s;
    };

    for (int ex = 0; ex < spec.size; ++ex) {
        const int n_sections =
            spec.min_sections + static_cast<int>(rng.below(spec.max_sections - spec.min_sections + 1));
        // "exam:" always present; remaining sections drawn without repeats
        std::vector<std::string> order = {"exam:"};
        std::vector<std::string> pool;
        for (const auto& s : section_names) {
            if (s != "exam:") {
                pool.push_back(s);
            }
        }
        for (int i = 1; i < n_sections; ++i) {
            const auto pick = static_cast<std::size_t>(rng.below(pool.size()));
            order.push_back(pool[pick]);
            pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(pick));
        }
        // deterministic document order
        std::sort(order.begin(), order.end(), [&](const std::string& a, const std::string& b) {
            auto rank = [&](const std::string& s) {
                return std::find(section_names.begin(), section_names.end(), s) -
                       section_names.begin();
            };
            return rank(a) < rank(b);
        });

        std::string document;
        std::vector<std::string> summary_parts;
        for (const auto& name : order) {
            const int n_sent =
                spec.min_sentences + static_cast<int>(rng.below(spec.max_sentences - spec.min_sentences + 1));
            // the section lead word survives marker-stripping extraction, so
            // the summary rule stays recoverable from the source alone
            const std::string lead = name.substr(0, name.size() - 1);
            std::string first;
            std::string body;
            for (int snt = 0; snt < n_sent; ++snt) {
                const std::string s = snt == 0 ? lead + " " + sentence() : sentence();
                if (snt == 0) {
                    first = s;
                }
                body += s + ". ";
            }
            document += name + " " + body;
            const bool contributes = std::find(summary_sections.begin(), summary_sections.end(),
                                               name) != summary_sections.end();
            if (contributes) {
                summary_parts.push_back(first);
            }
        }
        // paraphrase noise on summary words
        std::string summary;
        for (const auto& part : summary_parts) {
            for (const auto& w : Vocab::split_words(part)) {
                if (!summary.empty()) {
                    summary += " ";
                }
                summary += rng.uniform01() < spec.noise ? w + "x" : w;
            }
        }
        document += "impression: " + summary;
        out.documents.push_back(document);

        auto pair = extract_pairs(document, out.spec, "synth-" + std::to_string(ex));
        if (pair.has_value()) {
            out.examples.push_back(std::move(*pair));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// corpus statistics
// ---------------------------------------------------------------------------

struct CorpusStats {
    std::int64_t examples = 0;
    double avg_input_sentences = 0.0;
    double avg_input_words = 0.0;
    double avg_output_sentences = 0.0;
    double avg_output_words = 0.0;
    double novel_unigram_pct = 0.0;
    double novel_bigram_pct = 0.0;
};

inline CorpusStats corpus_stats(const std::vector<Seq2SeqExample>& dataset) {
    if (dataset.empty()) {
        throw ConfigError("corpus_stats: empty dataset");
    }
    CorpusStats st;
    st.examples = static_cast<std::int64_t>(dataset.size());
    double uni = 0.0, bi = 0.0;
    std::int64_t bi_count = 0;
    for (const auto& ex : dataset) {
        st.avg_input_sentences += sentence_count(ex.source);
        st.avg_input_words += whitespace_word_count(ex.source);
        st.avg_output_sentences += sentence_count(ex.target);
        st.avg_output_words += whitespace_word_count(ex.target);
        const auto src = tokenize_for_metrics(ex.source);
        const auto ref = tokenize_for_metrics(ex.target);
        uni += novel_ngram_ratio(src, ref, 1);
        if (static_cast<int>(ref.size()) >= 2) {
            bi += novel_ngram_ratio(src, ref, 2);
            ++bi_count;
        }
    }
    const double n = static_cast<double>(dataset.size());
    st.avg_input_sentences /= n;
    st.avg_input_words /= n;
    st.avg_output_sentences /= n;
    st.avg_output_words /= n;
    st.novel_unigram_pct = uni / n;
    st.novel_bigram_pct = bi_count > 0 ? bi / static_cast<double>(bi_count) : 0.0;
    return st;
}

// ---------------------------------------------------------------------------
// batching
// ---------------------------------------------------------------------------

struct Batch {
    IdMatrix src;
    std::vector<int> src_len;
    IdMatrix tgt_in;
    IdMatrix tgt_out;
    std::vector<int> tgt_len;       // live decoder rows per example
    std::int64_t target_tokens = 0; // non-pad supervised positions
};

struct EncodedExample {
    std::vector<int> src;
    std::vector<int> tgt; // without bos/eos
};

inline std::vector<EncodedExample> encode_dataset(const std::vector<Seq2SeqExample>& examples,
                                                  const Vocab& vocab, int max_src_len,
                                                  int max_tgt_len) {
    std::vector<EncodedExample> out;
    out.reserve(examples.size());
    for (const auto& ex : examples) {
        EncodedExample e;
        e.src = vocab.encode(ex.source);
        if (static_cast<int>(e.src.size()) > max_src_len) {
            e.src.resize(static_cast<std::size_t>(max_src_len));
        }
        e.tgt = vocab.encode(ex.target);
        if (static_cast<int>(e.tgt.size()) > max_tgt_len) {
            e.tgt.resize(static_cast<std::size_t>(max_tgt_len));
        }
        out.push_back(std::move(e));
    }
    return out;
}

// deterministic Fisher-Yates order per (seed, epoch)
inline std::vector<std::size_t> shuffled_order(std::size_t n, std::uint64_t seed, long epoch) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) {
        order[i] = i;
    }
    RandomSource rng(seed * 0x9e3779b97f4a7c15ull + static_cast<std::uint64_t>(epoch) + 1);
    for (std::size_t i = n; i > 1; --i) {
        const auto j = static_cast<std::size_t>(rng.below(static_cast<std::int64_t>(i)));
        std::swap(order[i - 1], order[j]);
    }
    return order;
}

inline Batch make_batch(const std::vector<EncodedExample>& data, const std::vector<std::size_t>& idx) {
    if (idx.empty()) {
        throw ConfigError("batch: empty example list");
    }
    int max_src = 1, max_tgt = 1;
    for (std::size_t i : idx) {
        max_src = std::max(max_src, static_cast<int>(data[i].src.size()));
        max_tgt = std::max(max_tgt, static_cast<int>(data[i].tgt.size()) + 1); // bos/eos shift
    }
    Batch b;
    const int rows = static_cast<int>(idx.size());
    b.src = IdMatrix(rows, max_src, Vocab::kPad);
    b.tgt_in = IdMatrix(rows, max_tgt, Vocab::kPad);
    b.tgt_out = IdMatrix(rows, max_tgt, Vocab::kPad);
    b.src_len.resize(static_cast<std::size_t>(rows));
    b.tgt_len.resize(static_cast<std::size_t>(rows));
    for (int r = 0; r < rows; ++r) {
        const auto& ex = data[idx[static_cast<std::size_t>(r)]];
        b.src_len[static_cast<std::size_t>(r)] = static_cast<int>(ex.src.size());
        b.tgt_len[static_cast<std::size_t>(r)] = static_cast<int>(ex.tgt.size()) + 1;
        for (std::size_t c = 0; c < ex.src.size(); ++c) {
            b.src.at(r, static_cast<int>(c)) = ex.src[c];
        }
        // teacher forcing: in = [bos, t...], out = [t..., eos]
        b.tgt_in.at(r, 0) = Vocab::kBos;
        for (std::size_t c = 0; c < ex.tgt.size(); ++c) {
            b.tgt_in.at(r, static_cast<int>(c) + 1) = ex.tgt[c];
            b.tgt_out.at(r, static_cast<int>(c)) = ex.tgt[c];
        }
        b.tgt_out.at(r, static_cast<int>(ex.tgt.size())) = Vocab::kEos;
        b.target_tokens += static_cast<std::int64_t>(ex.tgt.size()) + 1;
    }
    return b;
}

// padded batches in deterministic shuffled order; the tail batch may be short
inline std::vector<Batch> make_epoch_batches(const std::vector<EncodedExample>& data, int batch_size,
                                             std::uint64_t seed, long epoch) {
    if (batch_size < 1) {
        throw ConfigError("batch: batch_size must be >= 1");
    }
    const auto order = shuffled_order(data.size(), seed, epoch);
    std::vector<Batch> out;
    for (std::size_t at = 0; at < order.size(); at += static_cast<std::size_t>(batch_size)) {
        const std::size_t end = std::min(order.size(), at + static_cast<std::size_t>(batch_size));
        out.push_back(make_batch(data, {order.begin() + static_cast<std::ptrdiff_t>(at),
                                        order.begin() + static_cast<std::ptrdiff_t>(end)}));
    }
    return out;
}

} // namespace lopr
