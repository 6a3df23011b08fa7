// SPDX-License-Identifier: Apache-2.0
//
// lopr: seq2seq fine-tuning workbench.
//
// Subcommands: synth, dataset-stats, params, train, grid, sweep, generate,
// evaluate. Flat key=value config files; every config key has a CLI flag of
// the same name that takes precedence.

#include <CLI11.hpp>

#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "lopr/bench.hpp"

namespace {

using namespace lopr;

struct ConfigCli {
    std::string config_path;
    std::map<std::string, std::string> overrides;
    std::vector<std::pair<std::string, CLI::Option*>> options;

    void attach(CLI::App* cmd) {
        cmd->add_option("-c,--config", config_path, "flat key=value config file");
        for (const auto& key : config_keys()) {
            auto* opt = cmd->add_option("--" + key, overrides[key]);
            options.emplace_back(key, opt);
        }
    }

    ExperimentConfig build() const {
        ExperimentConfig cfg;
        if (!config_path.empty()) {
            load_config_file(cfg, config_path);
        }
        for (const auto& [key, opt] : options) {
            if (opt->count() > 0) {
                apply_config_kv(cfg, key, overrides.at(key));
            }
        }
        return cfg;
    }
};

std::vector<Regime> parse_regime_list(const std::string& csv) {
    std::vector<Regime> out;
    std::istringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) {
            out.push_back(parse_regime(item));
        }
    }
    if (out.empty()) {
        throw ConfigError("empty regime list");
    }
    return out;
}

std::vector<int> parse_int_list(const std::string& csv) {
    std::vector<int> out;
    std::istringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) {
            out.push_back(std::stoi(item));
        }
    }
    if (out.empty()) {
        throw ConfigError("empty list");
    }
    return out;
}

void print_report(const ExperimentReport& report, const std::string& out_dir) {
    std::filesystem::create_directories(out_dir);
    write_report_csv(report, out_dir + "/report.csv");
    write_report_table(report, out_dir + "/report.txt");
    for (const auto& row : report.rows) {
        write_curve_csv(row, out_dir + "/curve_" + row.name + ".csv");
    }
    std::ifstream table(out_dir + "/report.txt");
    std::cout << table.rdbuf();
    std::cout << "report written to " << out_dir << "/report.csv" << std::endl;
}

int cmd_synth(const std::string& out, SynthSpec spec, const std::string& emit_raw,
              const std::string& pattern_out) {
    const SynthCorpus corpus = synth_corpus(spec);
    save_tsv(out, corpus.examples);
    if (!emit_raw.empty()) {
        std::ofstream f(emit_raw, std::ios::trunc);
        if (!f) {
            throw IoError("synth: cannot open '" + emit_raw + "'");
        }
        for (const auto& doc : corpus.documents) {
            f << doc << '\n';
        }
    }
    if (!pattern_out.empty()) {
        std::ofstream f(pattern_out, std::ios::trunc);
        if (!f) {
            throw IoError("synth: cannot open '" + pattern_out + "'");
        }
        f << "[body]\n";
        for (const auto& m : corpus.spec.body_markers) {
            f << m << '\n';
        }
        f << "[summary]\n";
        for (const auto& m : corpus.spec.summary_markers) {
            f << m << '\n';
        }
    }
    std::cout << "wrote " << corpus.examples.size() << " examples to " << out << std::endl;
    return 0;
}

int cmd_dataset_stats(const std::string& data, const std::string& out) {
    const auto examples = load_tsv(data);
    const CorpusStats st = corpus_stats(examples);
    std::ostringstream csv;
    csv << "examples,avg_input_sents,avg_input_words,avg_output_sents,avg_output_words,"
           "novel_unigram_pct,novel_bigram_pct\n"
        << st.examples << ',' << std::fixed << std::setprecision(2) << st.avg_input_sentences << ','
        << st.avg_input_words << ',' << st.avg_output_sentences << ',' << st.avg_output_words << ','
        << st.novel_unigram_pct << ',' << st.novel_bigram_pct << '\n';
    if (out.empty()) {
        std::cout << csv.str();
    } else {
        std::ofstream f(out, std::ios::trunc);
        if (!f) {
            throw IoError("dataset-stats: cannot open '" + out + "'");
        }
        f << csv.str();
        std::cout << "stats written to " << out << std::endl;
    }
    return 0;
}

int cmd_params(const ConfigCli& cc, const std::string& preset, int vocab_size, int tasks) {
    ExperimentConfig cfg = cc.build();
    ArchDescriptor desc;
    if (preset == "bart-large") {
        desc = ArchDescriptor::bart_large();
    } else if (preset == "t5-large") {
        desc = ArchDescriptor::t5_large();
    } else if (preset.empty()) {
        desc = cfg.descriptor(vocab_size);
    } else {
        throw ConfigError("params: unknown preset '" + preset + "'");
    }
    const LoraConfig lora = cfg.lora_config();
    std::cout << std::left << std::setw(12) << "regime" << std::right << std::setw(16) << "trained"
              << std::setw(16) << "total" << std::setw(20) << ("storage(N=" + std::to_string(tasks) + ")")
              << std::setw(18) << "train-bytes" << '\n';
    for (Regime r : {Regime::full, Regime::prune, Regime::lora, Regime::lora_prune}) {
        const FootprintReport fp = footprint(desc, r, lora, tasks);
        std::cout << std::left << std::setw(12) << regime_name(r) << std::right << std::setw(16)
                  << fp.trained_params << std::setw(16) << fp.total_params << std::setw(20)
                  << fp.storage_params << std::setw(18) << fp.est_training_bytes << '\n';
    }
    return 0;
}

int cmd_generate(const std::string& model_path, const std::string& base_path,
                 const std::string& input, const std::string& output, int beam, int max_len,
                 double length_norm, int max_src_len, bool with_scores) {
    const Checkpoint ckpt = read_checkpoint(model_path);
    const Vocab vocab = Vocab::from_string(ckpt.meta_at("vocab"));

    benchdetail::Subject subject;
    if (ckpt.meta_at("kind") == "adapters") {
        if (base_path.empty()) {
            throw ConfigError("generate: adapter checkpoint requires --base");
        }
        subject.adapted = load_adapter_checkpoint(model_path, load_model_checkpoint(base_path));
    } else {
        subject.model = model_from_checkpoint(ckpt);
    }

    std::ifstream in(input);
    if (!in) {
        throw IoError("generate: cannot open '" + input + "'");
    }
    std::ostream* os = &std::cout;
    std::ofstream file_out;
    if (!output.empty()) {
        file_out.open(output, std::ios::trunc);
        if (!file_out) {
            throw IoError("generate: cannot open '" + output + "'");
        }
        os = &file_out;
    }

    GenOptions opts;
    opts.width = beam;
    opts.max_len = std::min(max_len, subject.net().descriptor().max_positions);
    opts.length_norm = length_norm;
    const int src_cap = std::min(max_src_len, subject.net().descriptor().max_positions);
    std::string line;
    long count = 0;
    while (std::getline(in, line)) {
        if (line.empty()) {
            (*os) << '\n';
            continue;
        }
        std::vector<int> src = vocab.encode(line);
        if (static_cast<int>(src.size()) > src_cap) {
            src.resize(static_cast<std::size_t>(src_cap));
        }
        const BeamHypothesis hyp = beam_search_scored(subject.net(), subject.adapters(), src, opts);
        (*os) << vocab.decode(hyp.tokens);
        if (with_scores) {
            (*os) << '\t' << std::fixed << std::setprecision(4) << hyp.score(opts.length_norm);
        }
        (*os) << '\n';
        ++count;
    }
    if (!output.empty()) {
        std::cout << "generated " << count << " lines to " << output << std::endl;
    }
    return 0;
}

int cmd_evaluate(const std::string& candidates, const std::string& references,
                 const std::string& out) {
    std::ifstream fc(candidates), fr(references);
    if (!fc) {
        throw IoError("evaluate: cannot open '" + candidates + "'");
    }
    if (!fr) {
        throw IoError("evaluate: cannot open '" + references + "'");
    }
    std::ostringstream csv;
    csv << "example_id,r1,r2,rl,bleu1,bleu4\n";
    std::string cand, ref;
    long id = 0;
    std::vector<MetricReport> rows;
    while (true) {
        const bool has_c = static_cast<bool>(std::getline(fc, cand));
        const bool has_r = static_cast<bool>(std::getline(fr, ref));
        if (!has_c && !has_r) {
            break;
        }
        if (has_c != has_r) {
            throw ConfigError("evaluate: candidate and reference files differ in length");
        }
        ++id;
        const MetricReport m = score_pair(cand, ref);
        rows.push_back(m);
        csv << id << ',' << std::fixed << std::setprecision(2) << m.rouge1 << ',' << m.rouge2 << ','
            << m.rougeL << ',' << m.bleu1 << ',' << m.bleu4 << '\n';
    }
    if (rows.empty()) {
        throw ConfigError("evaluate: no examples");
    }
    const MetricReport mean = mean_report(rows);
    csv << "mean," << std::fixed << std::setprecision(2) << mean.rouge1 << ',' << mean.rouge2 << ','
        << mean.rougeL << ',' << mean.bleu1 << ',' << mean.bleu4 << '\n';
    if (out.empty()) {
        std::cout << csv.str();
    } else {
        std::ofstream f(out, std::ios::trunc);
        if (!f) {
            throw IoError("evaluate: cannot open '" + out + "'");
        }
        f << csv.str();
        std::cout << "metrics written to " << out << std::endl;
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"lopr: LoRA + structured layer pruning workbench for small seq2seq transformers"};
    app.require_subcommand(1);

    // synth
    auto* synth = app.add_subcommand("synth", "generate a synthetic section-summarization corpus");
    std::string synth_out, synth_raw, synth_pattern;
    SynthSpec synth_spec;
    synth->add_option("-o,--out", synth_out, "output TSV path")->required();
    synth->add_option("--size", synth_spec.size, "number of documents");
    synth->add_option("--seed", synth_spec.seed, "generator seed");
    synth->add_option("--noise", synth_spec.noise, "summary paraphrase probability [0,1]");
    synth->add_option("--lexicon", synth_spec.lexicon_size, "base lexicon size");
    synth->add_option("--min-sections", synth_spec.min_sections, "sections per document, lower bound");
    synth->add_option("--max-sections", synth_spec.max_sections, "sections per document, upper bound");
    synth->add_option("--min-sentences", synth_spec.min_sentences, "sentences per section, lower bound");
    synth->add_option("--max-sentences", synth_spec.max_sentences, "sentences per section, upper bound");
    synth->add_option("--min-words", synth_spec.min_words, "words per sentence, lower bound");
    synth->add_option("--max-words", synth_spec.max_words, "words per sentence, upper bound");
    synth->add_option("--emit-raw", synth_raw, "also write raw documents, one per line");
    synth->add_option("--pattern-out", synth_pattern, "write the matching section-pattern spec file");

    // dataset-stats
    auto* stats = app.add_subcommand("dataset-stats", "corpus statistics as CSV");
    std::string stats_data, stats_out;
    stats->add_option("-d,--data", stats_data, "TSV dataset")->required();
    stats->add_option("-o,--out", stats_out, "output CSV (default stdout)");

    // params
    auto* params = app.add_subcommand("params", "parameter/storage/memory accounting per regime");
    ConfigCli params_cfg;
    params_cfg.attach(params);
    std::string params_preset;
    int params_vocab = 50265;
    int params_tasks = 4;
    params->add_option("--preset", params_preset, "bart-large | t5-large");
    params->add_option("--vocab-size", params_vocab, "vocabulary size for custom descriptors");
    params->add_option("--tasks", params_tasks, "number of downstream tasks N");

    // train
    auto* train = app.add_subcommand("train", "train one regime and score the test split");
    ConfigCli train_cfg;
    train_cfg.attach(train);

    // grid
    auto* grid = app.add_subcommand("grid", "run a regime grid with shared data and seed");
    ConfigCli grid_cfg;
    grid_cfg.attach(grid);
    std::string grid_regimes = "full,prune,lora,lora+prune";
    grid->add_option("--regimes", grid_regimes, "comma list of regimes");

    // sweep
    auto* sweep = app.add_subcommand("sweep", "LoRA rank sweep");
    ConfigCli sweep_cfg;
    sweep_cfg.attach(sweep);
    std::string sweep_ranks = "4,8,16,32";
    sweep->add_option("--ranks", sweep_ranks, "comma list of ranks");

    // generate
    auto* gen = app.add_subcommand("generate", "decode one output line per input line");
    std::string gen_model, gen_base, gen_input, gen_output;
    int gen_beam = 6, gen_max_len = 128, gen_max_src = 1024;
    double gen_length_norm = 1.0;
    bool gen_scores = false;
    gen->add_option("-m,--model", gen_model, "model or adapter checkpoint")->required();
    gen->add_option("--base", gen_base, "base model checkpoint (for adapter files)");
    gen->add_option("-i,--input", gen_input, "input file, one source per line")->required();
    gen->add_option("-o,--output", gen_output, "output file (default stdout)");
    gen->add_option("--beam", gen_beam, "beam width");
    gen->add_option("--max-len", gen_max_len, "maximum generated length");
    gen->add_option("--max-src-len", gen_max_src, "source truncation length");
    gen->add_option("--length-norm", gen_length_norm, "length normalization exponent");
    gen->add_flag("--scores", gen_scores, "append a per-line score column");

    // evaluate
    auto* ev = app.add_subcommand("evaluate", "score candidates against references");
    std::string ev_cand, ev_ref, ev_out;
    ev->add_option("--candidates", ev_cand, "candidate file, one per line")->required();
    ev->add_option("--references", ev_ref, "reference file, one per line")->required();
    ev->add_option("-o,--out", ev_out, "output CSV (default stdout)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 2;
    }

    try {
        if (synth->parsed()) {
            return cmd_synth(synth_out, synth_spec, synth_raw, synth_pattern);
        }
        if (stats->parsed()) {
            return cmd_dataset_stats(stats_data, stats_out);
        }
        if (params->parsed()) {
            return cmd_params(params_cfg, params_preset, params_vocab, params_tasks);
        }
        if (train->parsed()) {
            const ExperimentConfig cfg = train_cfg.build();
            ExperimentReport report;
            report.rows.push_back(run_experiment(cfg));
            print_report(report, cfg.out_dir);
            return 0;
        }
        if (grid->parsed()) {
            const ExperimentConfig cfg = grid_cfg.build();
            const ExperimentReport report = run_grid(cfg, parse_regime_list(grid_regimes));
            print_report(report, cfg.out_dir);
            return 0;
        }
        if (sweep->parsed()) {
            const ExperimentConfig cfg = sweep_cfg.build();
            const ExperimentReport report = rank_sweep(cfg, parse_int_list(sweep_ranks));
            print_report(report, cfg.out_dir);
            return 0;
        }
        if (gen->parsed()) {
            return cmd_generate(gen_model, gen_base, gen_input, gen_output, gen_beam, gen_max_len,
                                gen_length_norm, gen_max_src, gen_scores);
        }
        if (ev->parsed()) {
            return cmd_evaluate(ev_cand, ev_ref, ev_out);
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << std::endl;
        return 2;
    } catch (const ShapeError& e) {
        std::cerr << "config error: " << e.what() << std::endl;
        return 2;
    } catch (const IoError& e) {
        std::cerr << "io error: " << e.what() << std::endl;
        return 3;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << std::endl;
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return 1;
    }
    return 0;
}
