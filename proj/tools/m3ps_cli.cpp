// m3ps command line: training, evaluation, generation, scoring and experiment drivers.
#include "m3ps/m3ps.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <fstream>
#include <iostream>
#include <sstream>

using namespace m3ps;
using nlohmann::json;

namespace {

// ---------------------------------------------------------------------------
// shared option groups

struct ConfigOpts {
    std::string file;
    std::string preset;
    std::vector<std::string> set;  // key=value overrides, applied last
    std::uint64_t seed = 0;
    int steps = 0;

    void attach(CLI::App* app) {
        app->add_option("--config", file, "TrainConfig file (.json, or key=value lines)")->check(CLI::ExistingFile);
        app->add_option("--preset", preset, "model preset: desk | paper");
        app->add_option("--set", set, "override a config key, e.g. --set lambda1=0.5");
        app->add_option("--seed", seed, "random seed");
        app->add_option("--steps", steps, "training steps");
    }

    TrainConfig build() const {
        TrainConfig c;
        if (!file.empty()) c = load_train_config(file);
        if (!preset.empty()) c.apply_preset(preset);
        if (seed) c.seed = seed;
        if (steps) c.steps = steps;
        if (!set.empty()) {
            std::ostringstream lines;
            for (const auto& kv : set) lines << kv << '\n';
            std::istringstream in(lines.str());
            c = parse_key_value_config(in, c);
        }
        c.validate();
        return c;
    }
};

/// Records come from JSONL + attribute vocabulary, or from the synthetic generator.
struct DataOpts {
    std::string path, attrs;
    int synthetic = 0;
    SynthSpec spec;
    std::string eval_path;
    int holdout = 0;

    void attach(CLI::App* app, bool with_eval) {
        app->add_option("--data", path, "training/evaluation records (JSONL)")->check(CLI::ExistingFile);
        app->add_option("--attrs", attrs, "attribute vocabulary file, one entry per line")->check(CLI::ExistingFile);
        app->add_option("--synthetic", synthetic, "use N synthetic records instead of --data");
        app->add_option("--synth-seed", spec.seed, "synthetic corpus seed");
        app->add_option("--concepts", spec.n_concepts, "synthetic concept count");
        app->add_option("--visual-only", spec.visual_only_concepts, "concepts expressed only in the image")->delimiter(',');
        if (with_eval) {
            app->add_option("--eval-data", eval_path, "held-out records (JSONL)")->check(CLI::ExistingFile);
            app->add_option("--holdout", holdout, "hold out the last N records for evaluation");
        }
    }

    struct Loaded {
        std::vector<ProductRecord> train, eval;
        AttributeVocabulary attributes;
        json source;
    };

    Loaded load(const TrainConfig& c) const {
        Loaded out;
        if (synthetic > 0) {
            if (!path.empty()) throw ConfigError("--data and --synthetic are exclusive");
            SynthSpec s = spec;
            s.n_samples = synthetic;
            s.d_img = c.d_img;
            auto corpus = generate_synthetic_dataset(s, c.limits());
            out.train = std::move(corpus.records);
            out.attributes = std::move(corpus.vocab);
            out.source = {{"synthetic", to_json(s)}};
        } else {
            if (path.empty()) throw ConfigError("no data: pass --data or --synthetic");
            out.attributes = attrs.empty() ? AttributeVocabulary{} : load_attribute_vocab(attrs);
            out.train = load_jsonl(path, out.attributes, c.limits());
            out.source = {{"data", path}, {"attrs", attrs}};
        }
        if (!eval_path.empty()) {
            out.eval = load_jsonl(eval_path, out.attributes, c.limits());
        } else if (holdout > 0) {
            if (static_cast<std::size_t>(holdout) >= out.train.size()) throw ConfigError("--holdout leaves no training data");
            out.eval.assign(out.train.end() - holdout, out.train.end());
            out.train.resize(out.train.size() - static_cast<std::size_t>(holdout));
        }
        return out;
    }
};

struct GenOpts {
    GenerationConfig gen;
    void attach(CLI::App* app) {
        app->add_option("--beam", gen.beam_width, "beam width (1 = greedy)");
        app->add_option("--max-len", gen.max_len, "maximum summary length");
        app->add_option("--length-penalty", gen.length_penalty, "exponent on hypothesis length");
    }
};

struct EvalOpts {
    EvalOptions opt;
    void attach(CLI::App* app) {
        app->add_option("--metric-tokenizer", opt.metric_tokenizer, "auto | word | char");
        app->add_option("--embedding-dim", opt.embedding_dim, "BERTScore hash-embedding width");
        app->add_option("--attr-subset", opt.attribute_subset, "extra attribute F1 over these entries")->delimiter(',');
        app->add_flag("--per-sample", opt.per_sample, "include per-sample scores");
    }
};

void write_text(const std::string& path, const std::string& text) {
    if (path.empty() || path == "-") {
        std::cout << text;
        return;
    }
    std::ofstream f(path);
    if (!f) throw Error("cannot write " + path);
    f << text;
}

std::string with_seed(std::string pattern, std::uint64_t seed) {
    const auto at = pattern.find("{seed}");
    if (at != std::string::npos) pattern.replace(at, 6, std::to_string(seed));
    return pattern;
}

void progress(const StepLog& l, int total) {
    if (l.step % 50 == 0 || l.step + 1 == total)
        std::cerr << "step " << l.step << " lr " << l.lr << " total " << l.loss.total << " ps " << l.loss.ps
                  << " mrm " << l.loss.mrm << " cmm " << l.loss.cmm << " fmm " << l.loss.fmm << '\n';
}

/// Train on `d.train` and evaluate on `d.eval`, once per seed.
std::vector<EvalReport> run_seeds(TrainConfig c, const DataOpts::Loaded& d, const std::vector<std::uint64_t>& seeds,
                                  const EvalOptions& opt, const std::string& label) {
    if (d.eval.empty()) throw ConfigError("no evaluation data: pass --eval-data or --holdout");
    std::vector<EvalReport> out;
    for (std::uint64_t s : seeds) {
        c.seed = s;
        std::cerr << label << " seed " << s << '\n';
        auto r = train(c, d.train, d.attributes, {}, [&](const StepLog& l) { progress(l, c.steps); });
        out.push_back(evaluate(r.checkpoint, d.eval, opt));
        out.back().label = label;
        out.back().predictions.clear();
    }
    return out;
}

std::string csv_row(const std::string& label, const json& agg, const std::vector<std::string>& cols) {
    std::ostringstream os;
    os << label;
    for (const auto& k : cols) {
        os << ',';
        if (agg["mean"].contains(k)) os << agg["mean"][k].get<double>();
    }
    os << '\n';
    return os.str();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Multi-modal product summarization: train, evaluate and score"};
    app.require_subcommand(1);

    // train ------------------------------------------------------------------
    auto* train_cmd = app.add_subcommand("train", "train a model and write a checkpoint");
    ConfigOpts t_cfg;
    DataOpts t_data;
    std::string t_val, t_out = "model.ckpt", t_log;
    bool t_print = false;
    t_cfg.attach(train_cmd);
    t_data.attach(train_cmd, false);
    train_cmd->add_option("--val", t_val, "validation records; the best validation step is kept")->check(CLI::ExistingFile);
    train_cmd->add_option("-o,--out", t_out, "checkpoint path");
    train_cmd->add_option("--log", t_log, "per-step loss log (CSV)");
    train_cmd->add_flag("--print-config", t_print, "print the resolved config and exit");

    // evaluate ---------------------------------------------------------------
    auto* eval_cmd = app.add_subcommand("evaluate", "generate and score summaries from checkpoints");
    std::vector<std::string> e_ckpts;
    std::vector<std::uint64_t> e_seeds;
    std::string e_data, e_attrs, e_out, e_csv, e_preds;
    bool e_lead = false;
    GenOpts e_gen;
    EvalOpts e_opt;
    eval_cmd->add_option("--ckpt", e_ckpts, "checkpoint(s); '{seed}' expands with --seeds")->required();
    eval_cmd->add_option("--seeds", e_seeds, "aggregate mean±std over these seeds")->delimiter(',');
    eval_cmd->add_option("--data", e_data, "evaluation records (JSONL)")->required()->check(CLI::ExistingFile);
    eval_cmd->add_option("--attrs", e_attrs, "attribute vocabulary of the data (default: the checkpoint's)");
    eval_cmd->add_option("-o,--out", e_out, "report JSON (default stdout)");
    eval_cmd->add_option("--csv", e_csv, "headline numbers as CSV");
    eval_cmd->add_option("--predictions", e_preds, "write predictions JSONL of the first checkpoint");
    eval_cmd->add_flag("--lead", e_lead, "also score the first-80-characters baseline");
    e_gen.attach(eval_cmd);
    e_opt.attach(eval_cmd);

    // generate ---------------------------------------------------------------
    auto* gen_cmd = app.add_subcommand("generate", "write summaries as {id, candidate, reference} JSONL");
    std::string g_ckpt, g_data, g_out;
    GenOpts g_gen;
    gen_cmd->add_option("--ckpt", g_ckpt, "checkpoint")->required()->check(CLI::ExistingFile);
    gen_cmd->add_option("--data", g_data, "records (JSONL)")->required()->check(CLI::ExistingFile);
    gen_cmd->add_option("-o,--out", g_out, "output JSONL (default stdout)");
    g_gen.attach(gen_cmd);

    // score ------------------------------------------------------------------
    auto* score_cmd = app.add_subcommand("score", "score {id, candidate, reference} JSONL");
    std::string s_in, s_out, s_tok = "char";
    EvalOpts s_opt;
    score_cmd->add_option("--pred", s_in, "predictions JSONL")->required()->check(CLI::ExistingFile);
    score_cmd->add_option("--tokenizer", s_tok, "word | char");
    score_cmd->add_option("--embedding-dim", s_opt.opt.embedding_dim, "BERTScore hash-embedding width");
    score_cmd->add_flag("--per-sample", s_opt.opt.per_sample, "include per-sample scores");
    score_cmd->add_option("-o,--out", s_out, "report JSON (default stdout)");

    // synth-data -------------------------------------------------------------
    auto* synth_cmd = app.add_subcommand("synth-data", "write a synthetic corpus");
    SynthSpec sy;
    std::string sy_out = "synthetic.jsonl", sy_attrs;
    synth_cmd->add_option("-n,--samples", sy.n_samples, "record count");
    synth_cmd->add_option("--seed", sy.seed, "seed");
    synth_cmd->add_option("--concepts", sy.n_concepts, "concept count");
    synth_cmd->add_option("--vocab", sy.vocab_size, "word vocabulary size");
    synth_cmd->add_option("--d-img", sy.d_img, "region feature width");
    synth_cmd->add_option("--noise", sy.noise_std, "feature noise std");
    synth_cmd->add_option("--visual-only", sy.visual_only_concepts, "concepts absent from the text")->delimiter(',');
    synth_cmd->add_option("-o,--out", sy_out, "records JSONL");
    synth_cmd->add_option("--attrs-out", sy_attrs, "attribute vocabulary file");

    // build-attr-vocab -------------------------------------------------------
    auto* vocab_cmd = app.add_subcommand("build-attr-vocab", "attribute vocabulary from summary document frequency");
    std::string v_data, v_out = "-", v_category, v_tok = "word";
    int v_threshold = 0;
    vocab_cmd->add_option("--data", v_data, "records JSONL (only 'summary' is read)")->required()->check(CLI::ExistingFile);
    vocab_cmd->add_option("--threshold", v_threshold, "keep tokens in more than this many summaries");
    vocab_cmd->add_option("--category", v_category, "home_appliances | clothing | cases_bags (sets the threshold)");
    vocab_cmd->add_option("--tokenizer", v_tok, "word | char");
    vocab_cmd->add_option("-o,--out", v_out, "output file (default stdout)");

    // ablate -----------------------------------------------------------------
    auto* ablate_cmd = app.add_subcommand("ablate", "train/evaluate the full model and its ablations");
    ConfigOpts a_cfg;
    DataOpts a_data;
    std::vector<std::string> a_variants;
    std::vector<std::uint64_t> a_seeds{1, 2, 3};
    std::string a_out, a_csv;
    bool a_print = false;
    EvalOpts a_opt;
    a_cfg.attach(ablate_cmd);
    a_data.attach(ablate_cmd, true);
    a_opt.attach(ablate_cmd);
    ablate_cmd->add_option("--variant", a_variants, "w/o-MRM | w/o-CMM | w/o-FMM (default: all)");
    ablate_cmd->add_option("--seeds", a_seeds, "seeds")->delimiter(',');
    ablate_cmd->add_option("-o,--out", a_out, "report JSON (default stdout)");
    ablate_cmd->add_option("--csv", a_csv, "table CSV");
    ablate_cmd->add_flag("--print-config", a_print, "print the ablated configs and exit");

    // sweep ------------------------------------------------------------------
    auto* sweep_cmd = app.add_subcommand("sweep", "λ grid sweep");
    ConfigOpts w_cfg;
    DataOpts w_data;
    SweepSpec w_spec = SweepSpec::full_grid();
    std::string w_out, w_csv;
    EvalOpts w_opt;
    w_cfg.attach(sweep_cmd);
    w_data.attach(sweep_cmd, true);
    w_opt.attach(sweep_cmd);
    sweep_cmd->add_option("--l1", w_spec.lambda1, "λ1 values (default 0..1 step 0.1)")->delimiter(',');
    sweep_cmd->add_option("--l2", w_spec.lambda2, "λ2 values")->delimiter(',');
    sweep_cmd->add_option("--l3", w_spec.lambda3, "λ3 values")->delimiter(',');
    sweep_cmd->add_option("--seeds", w_spec.seeds, "seeds shared by every cell")->delimiter(',');
    sweep_cmd->add_option("-o,--out", w_out, "table JSON (default stdout)");
    sweep_cmd->add_option("--csv", w_csv, "plot-ready CSV");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*train_cmd) {
            TrainConfig c = t_cfg.build();
            if (t_print) {
                std::cout << to_key_value(c);
                return 0;
            }
            auto d = t_data.load(c);
            const auto val = t_val.empty() ? std::vector<ProductRecord>{} : load_jsonl(t_val, d.attributes, c.limits());
            auto r = train(c, d.train, d.attributes, val, [&](const StepLog& l) { progress(l, c.steps); });
            r.checkpoint.data = d.source;
            save_checkpoint(r.checkpoint, t_out);
            if (!t_log.empty()) write_text(t_log, loss_log_csv(r.log));
            std::cerr << "saved " << t_out << " (kept step " << r.selected_step << ")\n";
        } else if (*eval_cmd) {
            std::vector<std::string> paths;
            if (e_seeds.empty())
                paths = e_ckpts;
            else
                for (const auto& p : e_ckpts)
                    for (auto s : e_seeds) paths.push_back(with_seed(p, s));
            EvalOptions opt = e_opt.opt;
            opt.gen = e_gen.gen;
            std::vector<EvalReport> runs;
            std::optional<TokenizerMode> mode;
            for (const auto& p : paths) {
                Checkpoint c = load_checkpoint(p);
                const AttributeVocabulary attrs = e_attrs.empty() ? c.attributes : load_attribute_vocab(e_attrs);
                const auto data = load_jsonl(e_data, attrs, c.config.limits());
                runs.push_back(evaluate(c, data, opt, &attrs));
                if (!e_preds.empty() && runs.size() == 1) {
                    std::ostringstream os;
                    for (const auto& pr : runs.back().predictions)
                        os << json{{"id", pr.id}, {"candidate", pr.summary}, {"reference", pr.reference}}.dump() << '\n';
                    write_text(e_preds, os.str());
                }
                mode = c.config.tokenizer_mode();
            }
            json report;
            report["runs"] = json::array();
            for (const auto& r : runs) report["runs"].push_back(to_json(r));
            report["aggregate"] = aggregate_reports(runs);
            std::vector<std::string> cols;
            for (const auto& [k, v] : headline_numbers(runs.front())) cols.push_back(k);
            std::string csv = "label";
            for (const auto& k : cols) csv += "," + k;
            csv += "\n" + csv_row("m3ps", report["aggregate"], cols);
            if (e_lead) {
                Checkpoint c = load_checkpoint(paths.front());
                const auto data = load_jsonl(e_data, c.attributes, c.config.limits());
                const auto lead = evaluate_lead(data, opt, 80, *mode);
                report["lead"] = to_json(lead);
                csv += csv_row("lead", aggregate_reports({lead}), cols);
            }
            write_text(e_out, report.dump(2) + "\n");
            if (!e_csv.empty()) write_text(e_csv, csv);
        } else if (*gen_cmd) {
            Checkpoint c = load_checkpoint(g_ckpt);
            const auto data = load_jsonl(g_data, c.attributes, c.config.limits());
            check_compatible(c, data);
            std::ostringstream os;
            for (const auto& r : data) {
                const Prediction p = predict(c, r, &g_gen.gen);
                os << json{{"id", p.id}, {"candidate", p.summary}, {"reference", p.reference}}.dump() << '\n';
            }
            write_text(g_out, os.str());
        } else if (*score_cmd) {
            std::ifstream f(s_in);
            std::vector<std::string> cands, refs, ids;
            std::string line;
            std::size_t lineno = 0;
            while (std::getline(f, line)) {
                ++lineno;
                if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
                try {
                    const json j = json::parse(line);
                    ids.push_back(j.value("id", std::to_string(lineno)));
                    cands.push_back(j.at("candidate").get<std::string>());
                    refs.push_back(j.at("reference").get<std::string>());
                } catch (const json::exception& e) {
                    throw ValidationError("line " + std::to_string(lineno) + ": " + e.what());
                }
            }
            if (cands.empty()) throw ContractError("no predictions to score");
            const auto r = score_texts(cands, refs, ids, tokenizer_mode_from_string(s_tok), s_opt.opt);
            write_text(s_out, metrics::to_json(r).dump(2) + "\n");
        } else if (*synth_cmd) {
            const auto corpus = generate_synthetic_dataset(sy, {});
            save_jsonl(sy_out, corpus.records, corpus.vocab);
            if (!sy_attrs.empty()) save_attribute_vocab(corpus.vocab, sy_attrs);
            std::cerr << "wrote " << corpus.records.size() << " records to " << sy_out << '\n';
        } else if (*vocab_cmd) {
            int thr = v_threshold;
            if (!v_category.empty()) {
                const auto& t = category_thresholds();
                auto it = t.find(v_category);
                if (it == t.end()) throw ConfigError("unknown category '" + v_category + "'");
                if (thr == 0) thr = it->second;
            }
            if (thr < 1) throw ConfigError("pass --threshold or --category");
            std::ifstream f(v_data);
            std::vector<std::string> summaries;
            std::string line;
            while (std::getline(f, line))
                if (line.find_first_not_of(" \t\r") != std::string::npos)
                    summaries.push_back(json::parse(line).at("summary").get<std::string>());
            const auto v = build_attribute_vocab(summaries, accept_all_tagger, thr, tokenizer_mode_from_string(v_tok));
            std::ostringstream os;
            for (const auto& e : v.entries) os << e << '\n';
            write_text(v_out, os.str());
            std::cerr << v.size() << " attributes\n";
        } else if (*ablate_cmd) {
            const TrainConfig base = a_cfg.build();
            const auto variants = a_variants.empty() ? ablation_variants() : a_variants;
            if (a_print) {
                for (const auto& v : variants) std::cout << "# " << v << '\n' << to_key_value(ablate(v, base)) << '\n';
                return 0;
            }
            const auto d = a_data.load(base);
            json rows = json::array();
            std::vector<std::vector<EvalReport>> all;
            std::vector<std::string> labels{"M3PS"};
            all.push_back(run_seeds(base, d, a_seeds, a_opt.opt, "M3PS"));
            for (const auto& v : variants) {
                labels.push_back(v);
                all.push_back(run_seeds(ablate(v, base), d, a_seeds, a_opt.opt, v));
            }
            std::vector<std::string> cols;
            for (const auto& [k, v] : headline_numbers(all.front().front())) cols.push_back(k);
            std::string csv = "variant";
            for (const auto& k : cols) csv += "," + k;
            csv += "\n";
            for (std::size_t i = 0; i < all.size(); ++i) {
                const json agg = aggregate_reports(all[i]);
                rows.push_back({{"variant", labels[i]}, {"report", agg}});
                csv += csv_row(labels[i], agg, cols);
            }
            write_text(a_out, rows.dump(2) + "\n");
            if (!a_csv.empty()) write_text(a_csv, csv);
        } else if (*sweep_cmd) {
            const TrainConfig base = w_cfg.build();
            const auto d = w_data.load(base);
            if (d.eval.empty()) throw ConfigError("no evaluation data: pass --eval-data or --holdout");
            const auto cells = sweep(w_spec, base, d.train, d.attributes, d.eval, w_opt.opt, [](const SweepCell& c) {
                std::cerr << "cell " << c.weights.lambda1 << ',' << c.weights.lambda2 << ',' << c.weights.lambda3
                          << (c.ok() ? " ok" : " error: " + c.error) << '\n';
            });
            write_text(w_out, sweep_table(cells).dump(2) + "\n");
            if (!w_csv.empty()) write_text(w_csv, sweep_csv(cells));
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
