// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "lopr/accountant.hpp"
#include "lopr/checkpoint.hpp"
#include "lopr/data.hpp"
#include "lopr/decode.hpp"
#include "lopr/metrics.hpp"
#include "lopr/optim.hpp"

namespace lopr {

// ---------------------------------------------------------------------------
// configuration
// ---------------------------------------------------------------------------

struct ExperimentConfig {
    // architecture (vocab size is filled from the built vocabulary)
    int n_enc = 6;
    int n_dec = 6;
    int d_model = 64;
    int d_ffn = 256;
    int n_heads = 4;
    int max_positions = 128;
    bool tie_embeddings = true;
    bool biases = true;

    Regime regime = Regime::full;
    int rank = 16;
    double alpha = 32.0;
    std::string placement = "ff";

    std::string data;  // single TSV, hash-split 80/10/10
    std::string train; // or explicit files
    std::string valid;
    std::string test;
    std::string vocab_mode = "char";
    int vocab_max = 4000;

    int epochs = 10;
    int batch_size = 8;
    int accumulation = 1;
    int max_src_len = 1024;
    int max_tgt_len = 128;
    double lr = 5e-5;      // full / pruned fine-tuning
    double lr_lora = 1e-4; // adapter training
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double weight_decay = 0.0;
    long warmup_steps = 1000;
    double eval_fraction = 0.3;
    int beam_width = 6;
    double length_norm = 1.0;
    bool greedy_eval = false; // greedy decoding for in-training evals
    double early_stop_r1 = -1.0;
    int max_gen_len = 0; // 0 -> max_tgt_len
    std::uint64_t seed = 1;
    int threads = 0; // 0 = keep the current kernel thread setting
    std::string init_checkpoint;
    std::string out_dir = "runs";

    void validate() const {
        if (epochs < 1 || batch_size < 1 || accumulation < 1) {
            throw ConfigError("config: epochs, batch_size and accumulation must be >= 1");
        }
        if (!(eval_fraction > 0.0) || eval_fraction > 1.0) {
            throw ConfigError("config: eval_fraction must lie in (0, 1]");
        }
        if (beam_width < 1 || max_src_len < 1 || max_tgt_len < 1) {
            throw ConfigError("config: beam_width and max lengths must be >= 1");
        }
        if (data.empty() && (train.empty() || valid.empty() || test.empty())) {
            throw ConfigError("config: provide either data= or all of train=/valid=/test=");
        }
        if (max_tgt_len + 1 > max_positions || max_src_len > max_positions) {
            throw ConfigError("config: max lengths exceed max_positions");
        }
    }

    ArchDescriptor descriptor(int vocab_size) const {
        ArchDescriptor a;
        a.n_enc = n_enc;
        a.n_dec = n_dec;
        a.d_model = d_model;
        a.d_ffn = d_ffn;
        a.n_heads = n_heads;
        a.vocab_size = vocab_size;
        a.max_positions = max_positions;
        a.tie_embeddings = tie_embeddings;
        a.biases = biases;
        return a;
    }

    LoraConfig lora_config() const { return LoraConfig{rank, alpha, parse_placement(placement)}; }

    double effective_lr() const { return regime_has_lora(regime) ? lr_lora : lr; }

    int gen_len() const { return max_gen_len > 0 ? max_gen_len : max_tgt_len; }
};

// flat key=value config surface shared by files and CLI flags
inline const std::vector<std::string>& config_keys() {
    static const std::vector<std::string> keys = {
        "n_enc",         "n_dec",         "d_model",      "d_ffn",         "n_heads",
        "max_positions", "tie_embeddings", "biases",       "regime",        "rank",
        "alpha",         "placement",      "data",         "train",         "valid",
        "test",          "vocab_mode",     "vocab_max",    "epochs",        "batch_size",
        "accumulation",  "max_src_len",    "max_tgt_len",  "lr",            "lr_lora",
        "beta1",         "beta2",          "adam_eps",     "weight_decay",  "warmup_steps",
        "eval_fraction", "beam_width",     "length_norm",  "greedy_eval",   "early_stop_r1",
        "max_gen_len",   "seed",           "threads",      "init_checkpoint", "out_dir"};
    return keys;
}

inline void apply_config_kv(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
    auto as_bool = [&]() {
        if (value == "1" || value == "true" || value == "yes") {
            return true;
        }
        if (value == "0" || value == "false" || value == "no") {
            return false;
        }
        throw ConfigError("config: bad boolean for " + key + ": '" + value + "'");
    };
    try {
        if (key == "n_enc") cfg.n_enc = std::stoi(value);
        else if (key == "n_dec") cfg.n_dec = std::stoi(value);
        else if (key == "d_model") cfg.d_model = std::stoi(value);
        else if (key == "d_ffn") cfg.d_ffn = std::stoi(value);
        else if (key == "n_heads") cfg.n_heads = std::stoi(value);
        else if (key == "max_positions") cfg.max_positions = std::stoi(value);
        else if (key == "tie_embeddings") cfg.tie_embeddings = as_bool();
        else if (key == "biases") cfg.biases = as_bool();
        else if (key == "regime") cfg.regime = parse_regime(value);
        else if (key == "rank") cfg.rank = std::stoi(value);
        else if (key == "alpha") cfg.alpha = std::stod(value);
        else if (key == "placement") cfg.placement = value;
        else if (key == "data") cfg.data = value;
        else if (key == "train") cfg.train = value;
        else if (key == "valid") cfg.valid = value;
        else if (key == "test") cfg.test = value;
        else if (key == "vocab_mode") cfg.vocab_mode = value;
        else if (key == "vocab_max") cfg.vocab_max = std::stoi(value);
        else if (key == "epochs") cfg.epochs = std::stoi(value);
        else if (key == "batch_size") cfg.batch_size = std::stoi(value);
        else if (key == "accumulation") cfg.accumulation = std::stoi(value);
        else if (key == "max_src_len") cfg.max_src_len = std::stoi(value);
        else if (key == "max_tgt_len") cfg.max_tgt_len = std::stoi(value);
        else if (key == "lr") cfg.lr = std::stod(value);
        else if (key == "lr_lora") cfg.lr_lora = std::stod(value);
        else if (key == "beta1") cfg.beta1 = std::stod(value);
        else if (key == "beta2") cfg.beta2 = std::stod(value);
        else if (key == "adam_eps") cfg.adam_eps = std::stod(value);
        else if (key == "weight_decay") cfg.weight_decay = std::stod(value);
        else if (key == "warmup_steps") cfg.warmup_steps = std::stol(value);
        else if (key == "eval_fraction") cfg.eval_fraction = std::stod(value);
        else if (key == "beam_width") cfg.beam_width = std::stoi(value);
        else if (key == "length_norm") cfg.length_norm = std::stod(value);
        else if (key == "greedy_eval") cfg.greedy_eval = as_bool();
        else if (key == "early_stop_r1") cfg.early_stop_r1 = std::stod(value);
        else if (key == "max_gen_len") cfg.max_gen_len = std::stoi(value);
        else if (key == "seed") cfg.seed = std::stoull(value);
        else if (key == "threads") cfg.threads = std::stoi(value);
        else if (key == "init_checkpoint") cfg.init_checkpoint = value;
        else if (key == "out_dir") cfg.out_dir = value;
        else throw ConfigError("config: unknown key '" + key + "'");
    } catch (const std::invalid_argument&) {
        throw ConfigError("config: bad value for " + key + ": '" + value + "'");
    } catch (const std::out_of_range&) {
        throw ConfigError("config: value out of range for " + key + ": '" + value + "'");
    }
}

// key=value lines; '#' comments
inline void load_config_file(ExperimentConfig& cfg, const std::string& path) {
    std::ifstream f(path);
    if (!f) {
        throw IoError("config: cannot open '" + path + "'");
    }
    std::string line;
    long line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) {
            line.pop_back();
        }
        const auto start = line.find_first_not_of(" \t");
        if (start == std::string::npos || line[start] == '#') {
            continue;
        }
        const auto eq = line.find('=', start);
        if (eq == std::string::npos) {
            throw ConfigError("config: line " + std::to_string(line_no) + " is not key=value");
        }
        std::string key = line.substr(start, eq - start);
        while (!key.empty() && key.back() == ' ') {
            key.pop_back();
        }
        std::string value = line.substr(eq + 1);
        const auto vstart = value.find_first_not_of(" \t");
        value = vstart == std::string::npos ? "" : value.substr(vstart);
        apply_config_kv(cfg, key, value);
    }
}

// ---------------------------------------------------------------------------
// reports
// ---------------------------------------------------------------------------

struct EvalPoint {
    long step = 0;
    MetricReport metrics;
    double train_loss = 0.0;
};

struct RegimeRow {
    std::string name;
    double rel_speed_pct = 100.0;
    double tokens_per_sec = 0.0;
    std::int64_t trained_params = 0;
    std::int64_t total_params = 0;
    std::int64_t est_training_bytes = 0;
    MetricReport test_metrics;
    long best_step = 0;
    double best_val_r1 = 0.0;
    std::vector<EvalPoint> curve;
};

struct ExperimentReport {
    std::vector<RegimeRow> rows;
};

namespace benchdetail {

inline std::string fmt2(double v) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(2) << v;
    return os.str();
}

} // namespace benchdetail

inline void write_report_csv(const ExperimentReport& report, const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) {
        throw IoError("report: cannot open '" + path + "'");
    }
    f << "regime,rel_speed_pct,tokens_per_sec,trained_params,total_params,est_training_bytes,"
         "r1,r2,rl,bleu1,bleu4,best_step\n";
    for (const auto& r : report.rows) {
        f << r.name << ',' << benchdetail::fmt2(r.rel_speed_pct) << ','
          << benchdetail::fmt2(r.tokens_per_sec) << ',' << r.trained_params << ',' << r.total_params
          << ',' << r.est_training_bytes << ',' << benchdetail::fmt2(r.test_metrics.rouge1) << ','
          << benchdetail::fmt2(r.test_metrics.rouge2) << ',' << benchdetail::fmt2(r.test_metrics.rougeL)
          << ',' << benchdetail::fmt2(r.test_metrics.bleu1) << ','
          << benchdetail::fmt2(r.test_metrics.bleu4) << ',' << r.best_step << '\n';
    }
}

inline void write_report_table(const ExperimentReport& report, const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) {
        throw IoError("report: cannot open '" + path + "'");
    }
    f << std::left << std::setw(12) << "regime" << std::right << std::setw(9) << "speed%"
      << std::setw(12) << "tokens/s" << std::setw(14) << "trained" << std::setw(14) << "total"
      << std::setw(16) << "train-bytes" << std::setw(8) << "R-1" << std::setw(8) << "R-2"
      << std::setw(8) << "R-L" << std::setw(8) << "B-1" << std::setw(8) << "B-4" << std::setw(10)
      << "best@" << '\n';
    for (const auto& r : report.rows) {
        f << std::left << std::setw(12) << r.name << std::right << std::setw(9)
          << benchdetail::fmt2(r.rel_speed_pct) << std::setw(12) << benchdetail::fmt2(r.tokens_per_sec)
          << std::setw(14) << r.trained_params << std::setw(14) << r.total_params << std::setw(16)
          << r.est_training_bytes << std::setw(8) << benchdetail::fmt2(r.test_metrics.rouge1)
          << std::setw(8) << benchdetail::fmt2(r.test_metrics.rouge2) << std::setw(8)
          << benchdetail::fmt2(r.test_metrics.rougeL) << std::setw(8)
          << benchdetail::fmt2(r.test_metrics.bleu1) << std::setw(8)
          << benchdetail::fmt2(r.test_metrics.bleu4) << std::setw(10) << r.best_step << '\n';
    }
}

inline void write_curve_csv(const RegimeRow& row, const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) {
        throw IoError("report: cannot open '" + path + "'");
    }
    f << "step,r1,r2,rl,bleu1,bleu4,train_loss\n";
    for (const auto& p : row.curve) {
        f << p.step << ',' << benchdetail::fmt2(p.metrics.rouge1) << ','
          << benchdetail::fmt2(p.metrics.rouge2) << ',' << benchdetail::fmt2(p.metrics.rougeL) << ','
          << benchdetail::fmt2(p.metrics.bleu1) << ',' << benchdetail::fmt2(p.metrics.bleu4) << ','
          << benchdetail::fmt2(p.train_loss) << '\n';
    }
}

// ---------------------------------------------------------------------------
// experiment runner
// ---------------------------------------------------------------------------

namespace benchdetail {

struct LoadedData {
    std::vector<Seq2SeqExample> train, valid, test;
};

inline LoadedData load_experiment_data(const ExperimentConfig& cfg) {
    LoadedData d;
    if (!cfg.data.empty()) {
        const auto all = load_tsv(cfg.data);
        d.train = take_split(all, Split::train);
        d.valid = take_split(all, Split::valid);
        d.test = take_split(all, Split::test);
    } else {
        d.train = load_tsv(cfg.train);
        d.valid = load_tsv(cfg.valid);
        d.test = load_tsv(cfg.test);
    }
    if (d.train.empty() || d.valid.empty() || d.test.empty()) {
        throw ConfigError("experiment: empty train/valid/test split");
    }
    return d;
}

// either a plain trainable model or a frozen base plus adapters
struct Subject {
    TransformerModel<float> model;
    std::optional<AdaptedModel<float>> adapted;

    const TransformerModel<float>& net() const { return adapted ? adapted->base : model; }
    const AdapterSet<float>* adapters() const { return adapted ? &adapted->adapters : nullptr; }

    std::vector<NamedParam<float>> trainable() const {
        return adapted ? adapted->named_adapter_params() : model.named_params();
    }

    Var<float> loss(const Batch& b) const {
        const auto& m = net();
        return seq_loss(m.forward(b.src, b.src_len, b.tgt_in, adapters(), b.tgt_len), b.tgt_out,
                        Vocab::kPad);
    }
};

inline MetricReport evaluate_split(const Subject& subject, const std::vector<EncodedExample>& enc,
                                   const std::vector<Seq2SeqExample>& raw, const Vocab& vocab,
                                   bool greedy, int beam_width, double length_norm, int max_len) {
    GenOptions opts;
    opts.width = greedy ? 1 : beam_width;
    opts.max_len = max_len;
    opts.length_norm = length_norm;
    std::vector<MetricReport> rows;
    rows.reserve(enc.size());
    for (std::size_t i = 0; i < enc.size(); ++i) {
        std::vector<int> out_ids =
            greedy ? greedy_decode(subject.net(), subject.adapters(), enc[i].src, opts)
                   : beam_search(subject.net(), subject.adapters(), enc[i].src, opts);
        const std::string candidate = vocab.decode(out_ids);
        rows.push_back(score_pair(candidate, raw[i].target));
    }
    return mean_report(rows);
}

} // namespace benchdetail

// Trains one regime end to end: build or load the base, prune and inject as
// configured, run the training loop with periodic validation, restore the
// best-R1 checkpoint and score the test split with beam decoding.
inline RegimeRow run_experiment(const ExperimentConfig& cfg) {
    cfg.validate();
    if (cfg.threads > 0) {
        kern::set_threads(cfg.threads);
    }
    namespace fs = std::filesystem;
    fs::create_directories(cfg.out_dir);

    const auto data = benchdetail::load_experiment_data(cfg);

    // vocabulary: from the init checkpoint when given, else from train text
    Vocab vocab;
    std::optional<Checkpoint> init_ckpt;
    if (!cfg.init_checkpoint.empty()) {
        init_ckpt = read_checkpoint(cfg.init_checkpoint);
        vocab = Vocab::from_string(init_ckpt->meta_at("vocab"));
    } else {
        std::vector<std::string> texts;
        texts.reserve(data.train.size() * 2);
        for (const auto& ex : data.train) {
            texts.push_back(ex.source);
            texts.push_back(ex.target);
        }
        vocab = Vocab::build(texts, cfg.vocab_mode == "word" ? Vocab::Mode::Word : Vocab::Mode::Char,
                             cfg.vocab_max);
    }

    // base model
    TransformerModel<float> model;
    if (init_ckpt) {
        model = model_from_checkpoint(*init_ckpt);
    } else {
        model = build_model<float>(cfg.descriptor(vocab.size()), cfg.seed);
    }
    const ArchDescriptor base_desc = model.descriptor();

    // regime transforms: prune first, then inject
    benchdetail::Subject subject;
    if (regime_has_prune(cfg.regime)) {
        const int depth = static_cast<int>(model.encoder().size());
        if (depth != static_cast<int>(model.decoder().size())) {
            throw ConfigError("experiment: pruning expects equal stack depths");
        }
        model = apply_prune(model, prune_plan(depth));
    }
    if (regime_has_lora(cfg.regime)) {
        subject.adapted = inject(std::move(model), cfg.lora_config(), cfg.seed ^ 0x5eedULL);
    } else {
        model.set_all_requires_grad(true);
        subject.model = std::move(model);
    }

    // optimizer over the trainable set
    AdamWConfig ocfg;
    ocfg.beta1 = cfg.beta1;
    ocfg.beta2 = cfg.beta2;
    ocfg.eps = cfg.adam_eps;
    ocfg.base_lr = cfg.effective_lr();
    ocfg.weight_decay = cfg.weight_decay;
    ocfg.warmup_steps = cfg.warmup_steps;
    ocfg.accumulation = cfg.accumulation;
    AdamW<float> opt(subject.trainable(), ocfg);

    const auto train_enc = encode_dataset(data.train, vocab, cfg.max_src_len, cfg.max_tgt_len);
    const auto valid_enc = encode_dataset(data.valid, vocab, cfg.max_src_len, cfg.max_tgt_len);
    const auto test_enc = encode_dataset(data.test, vocab, cfg.max_src_len, cfg.max_tgt_len);

    const long batches_per_epoch =
        static_cast<long>((train_enc.size() + cfg.batch_size - 1) / cfg.batch_size);
    const long steps_per_epoch = (batches_per_epoch + cfg.accumulation - 1) / cfg.accumulation;
    const long total_steps = steps_per_epoch * cfg.epochs;
    const long eval_interval =
        std::max<long>(1, static_cast<long>(std::ceil(cfg.eval_fraction * steps_per_epoch)));

    const std::string best_path = cfg.out_dir + "/best.ckpt";
    const std::string last_path = cfg.out_dir + "/last.ckpt";
    const std::string base_path = cfg.out_dir + "/base.ckpt";

    std::map<std::string, std::string> common_meta;
    common_meta["vocab"] = vocab.to_string();
    common_meta["regime"] = regime_name(cfg.regime);
    if (subject.adapted) {
        // adapters restore over this frozen base
        save_model_checkpoint(base_path, subject.adapted->base, common_meta);
    }
    auto save_subject = [&](const std::string& path, long step, bool with_optimizer = false) {
        auto meta = common_meta;
        meta["step"] = std::to_string(step);
        if (!with_optimizer) {
            if (subject.adapted) {
                save_adapter_checkpoint(path, *subject.adapted, meta);
            } else {
                save_model_checkpoint(path, subject.model, meta);
            }
            return;
        }
        // the last checkpoint carries moments + step for exact resumption
        std::vector<std::pair<std::string, const Tensor<float>*>> tensors;
        if (subject.adapted) {
            meta["kind"] = "adapters";
            descriptor_to_meta(subject.adapted->base.descriptor(), meta);
            meta["lora.rank"] = std::to_string(subject.adapted->config.rank);
            meta["lora.alpha"] = std::to_string(subject.adapted->config.alpha);
            meta["lora.placement"] = placement_name(subject.adapted->config.placement);
            meta["base.hash"] = std::to_string(content_hash(subject.adapted->base.named_params()));
            meta["prune.enc_kept"] =
                ckptdetail::join_ints(subject.adapted->base.encoder_indices());
            meta["prune.dec_kept"] =
                ckptdetail::join_ints(subject.adapted->base.decoder_indices());
            for (const auto& p : subject.adapted->named_adapter_params()) {
                tensors.emplace_back(p.name, &p.var.value());
            }
        } else {
            meta["kind"] = "model";
            descriptor_to_meta(subject.model.descriptor(), meta);
            meta["prune.enc_kept"] = ckptdetail::join_ints(subject.model.encoder_indices());
            meta["prune.dec_kept"] = ckptdetail::join_ints(subject.model.decoder_indices());
            for (const auto& p : subject.model.named_params()) {
                tensors.emplace_back(p.name, &p.var.value());
            }
        }
        optimizer_to_tensors(opt, tensors, meta);
        write_checkpoint(path, meta, tensors);
    };

    RegimeRow row;
    row.name = regime_name(cfg.regime);
    row.trained_params = opt.trainable_count();

    double best_r1 = -1.0;
    long best_step = 0;
    long step = 0;
    double last_loss = 0.0;
    std::int64_t timed_tokens = 0;
    double timed_seconds = 0.0;
    const long timing_skip = 3; // settle caches before measuring
    bool stop = false;

    auto run_eval = [&]() {
        const MetricReport m =
            benchdetail::evaluate_split(subject, valid_enc, data.valid, vocab, cfg.greedy_eval,
                                        cfg.beam_width, cfg.length_norm, cfg.gen_len());
        row.curve.push_back({step, m, last_loss});
        if (m.rouge1 > best_r1) {
            best_r1 = m.rouge1;
            best_step = step;
            save_subject(best_path, step);
        }
        if (cfg.early_stop_r1 > 0.0 && m.rouge1 >= cfg.early_stop_r1) {
            stop = true;
        }
    };

    for (int epoch = 0; epoch < cfg.epochs && !stop; ++epoch) {
        const auto batches = make_epoch_batches(train_enc, cfg.batch_size, cfg.seed, epoch);
        for (std::size_t at = 0; at < batches.size() && !stop; at += cfg.accumulation) {
            const std::size_t end = std::min(batches.size(), at + cfg.accumulation);
            const auto t0 = std::chrono::steady_clock::now();
            std::int64_t step_tokens = 0;
            try {
                opt.zero_grads();
                const float inv = 1.0f / static_cast<float>(end - at);
                for (std::size_t b = at; b < end; ++b) {
                    Var<float> loss = subject.loss(batches[b]);
                    last_loss = loss.value()[0];
                    step_tokens += batches[b].target_tokens;
                    backward(scale(loss, inv));
                }
                opt.step();
            } catch (const NumericError& e) {
                throw NumericError("training diverged at optimizer step " + std::to_string(step + 1) +
                                   ": " + e.what());
            }
            ++step;
            const auto t1 = std::chrono::steady_clock::now();
            if (step > timing_skip || total_steps <= timing_skip) {
                timed_tokens += step_tokens;
                timed_seconds += std::chrono::duration<double>(t1 - t0).count();
            }
            if (step % eval_interval == 0 || step == total_steps) {
                run_eval();
            }
        }
    }
    if (row.curve.empty() || row.curve.back().step != step) {
        run_eval(); // early-stop exits mid-epoch; close the curve
    }
    save_subject(last_path, step, /*with_optimizer=*/true);

    row.tokens_per_sec = timed_seconds > 0.0 ? static_cast<double>(timed_tokens) / timed_seconds : 0.0;
    row.best_step = best_step;
    row.best_val_r1 = best_r1;

    // restore the best checkpoint and score the test split with beam search
    benchdetail::Subject best_subject;
    if (subject.adapted) {
        best_subject.adapted =
            load_adapter_checkpoint(best_path, load_model_checkpoint(base_path));
    } else {
        best_subject.model = load_model_checkpoint(best_path);
    }
    row.test_metrics = benchdetail::evaluate_split(best_subject, test_enc, data.test, vocab,
                                                   /*greedy=*/false, cfg.beam_width, cfg.length_norm,
                                                   cfg.gen_len());

    row.total_params = best_subject.net().param_count() +
                       (best_subject.adapted ? best_subject.adapted->trainable_param_count() : 0);
    row.est_training_bytes =
        footprint(base_desc, cfg.regime, cfg.lora_config(), 1).est_training_bytes;
    return row;
}

// One row per regime over shared data and seed; relative speed is measured
// against the full fine-tuning row.
inline ExperimentReport run_grid(const ExperimentConfig& base, const std::vector<Regime>& regimes) {
    ExperimentReport report;
    for (Regime r : regimes) {
        ExperimentConfig cfg = base;
        cfg.regime = r;
        cfg.out_dir = base.out_dir + "/" + regime_name(r);
        report.rows.push_back(run_experiment(cfg));
    }
    double full_tps = 0.0;
    for (std::size_t i = 0; i < report.rows.size(); ++i) {
        if (regimes[i] == Regime::full) {
            full_tps = report.rows[i].tokens_per_sec;
        }
    }
    if (full_tps <= 0.0 && !report.rows.empty()) {
        full_tps = report.rows[0].tokens_per_sec; // no full row: first row is the baseline
    }
    for (std::size_t i = 0; i < report.rows.size(); ++i) {
        report.rows[i].rel_speed_pct =
            regimes[i] == Regime::full ? 100.0 : 100.0 * report.rows[i].tokens_per_sec / full_tps;
    }
    return report;
}

// One row per rank; trained-parameter counts are exactly linear in r.
inline ExperimentReport rank_sweep(const ExperimentConfig& base, const std::vector<int>& ranks) {
    for (int r : ranks) {
        if (r < 1) {
            throw ConfigError("sweep: ranks must be positive");
        }
    }
    ExperimentConfig proto = base;
    if (!regime_has_lora(proto.regime)) {
        proto.regime = Regime::lora;
    }
    ExperimentReport report;
    for (int r : ranks) {
        ExperimentConfig cfg = proto;
        cfg.rank = r;
        cfg.out_dir = base.out_dir + "/r" + std::to_string(r);
        RegimeRow row = run_experiment(cfg);
        row.name = regime_name(cfg.regime) + "_r" + std::to_string(r);
        report.rows.push_back(std::move(row));
    }
    return report;
}

} // namespace lopr
