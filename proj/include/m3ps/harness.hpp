#pragma once

#include "m3ps/checkpoint.hpp"
#include "m3ps/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <numeric>
#include <optional>

namespace m3ps {

// ---------------------------------------------------------------------------
// Optimizer

/// Learning rate at `step` (0-based): linear warmup, then cosine decay to 0 at the final step.
inline double learning_rate_at(const TrainConfig& c, int step) {
    if (step < c.warmup_steps) return c.learning_rate * static_cast<double>(step + 1) / c.warmup_steps;
    if (c.schedule == "constant") return c.learning_rate;
    const int span = std::max(1, c.steps - 1 - c.warmup_steps);
    const double progress = std::min(1.0, static_cast<double>(step - c.warmup_steps) / span);
    return c.learning_rate * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

class Adam {
public:
    Adam(double beta1, double beta2, double eps) : b1_(beta1), b2_(beta2), eps_(eps) {}

    void step(M3PSModel& m, double lr) {
        ++t_;
        const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
        std::size_t k = 0;
        m.for_each_param([&](const std::string&, Param& p) {
            if (k == m_.size()) {
                m_.push_back(Mat::Zero(p.rows(), p.cols()));
                v_.push_back(Mat::Zero(p.rows(), p.cols()));
            }
            Mat& mm = m_[k];
            Mat& vv = v_[k];
            mm = b1_ * mm + (1.0 - b1_) * p.grad;
            vv = b2_ * vv + (1.0 - b2_) * p.grad.cwiseProduct(p.grad);
            p.value.array() -= lr * (mm.array() / c1) / ((vv.array() / c2).sqrt() + eps_);
            ++k;
        });
    }

private:
    double b1_, b2_, eps_;
    long long t_ = 0;
    std::vector<Mat> m_, v_;
};

inline double global_grad_norm(M3PSModel& m) {
    double s = 0.0;
    m.for_each_param([&](const std::string&, Param& p) { s += p.grad.squaredNorm(); });
    return std::sqrt(s);
}

// ---------------------------------------------------------------------------
// Training

/// Refuse configurations this CPU implementation cannot hold.
inline constexpr long long kMaxParameters = 30'000'000;

inline void check_scale(const TrainConfig& c, const ModelDims& d) {
    const long long n = d.approx_parameters();
    if (n > kMaxParameters && !c.allow_large)
        throw ConfigError("configuration has ~" + std::to_string(n) +
                          " parameters, beyond what this CPU trainer supports; use the desk preset or set "
                          "allow_large=true if you really mean it");
}

/// Label-space sizes read off the records.
inline std::pair<int, int> region_shape(const std::vector<ProductRecord>& records) {
    for (const auto& r : records)
        if (!r.region_set.slots.empty()) return {r.region_set.feature_dim(), r.region_set.class_dim()};
    return {0, 0};
}

struct StepLog {
    int step = 0;
    double lr = 0.0;
    LossBreakdown loss;
};

/// Owns model, optimizer and data order for one run. train() drives it to completion;
/// tests use it directly to inspect gradients between steps.
class Trainer {
public:
    Trainer(const TrainConfig& cfg, std::vector<ProductRecord> train, AttributeVocabulary attributes,
            std::vector<ProductRecord> validation = {})
        : cfg_(cfg),
          data_(std::move(train)),
          val_data_(std::move(validation)),
          adam_(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps),
          rng_(cfg.seed ^ 0x5DEECE66DULL) {
        cfg_.validate();
        require(!data_.empty(), "training data must be nonempty");
        const TokenizerMode mode = cfg_.tokenizer_mode();

        if (cfg_.val_fraction > 0.0 && val_data_.empty()) {
            Rng split(cfg_.seed ^ 0xA5A5A5A5ULL);
            std::shuffle(data_.begin(), data_.end(), split);
            const auto n_val = static_cast<std::size_t>(std::floor(cfg_.val_fraction * data_.size()));
            require(n_val < data_.size(), "val_fraction leaves no training data");
            val_data_.assign(data_.end() - static_cast<std::ptrdiff_t>(n_val), data_.end());
            data_.resize(data_.size() - n_val);
        }

        const auto [feat_dim, k_cls] = region_shape(data_);
        if (feat_dim != 0 && feat_dim != cfg_.d_img)
            throw ConfigError("region feature dimension " + std::to_string(feat_dim) + " != d_img " +
                              std::to_string(cfg_.d_img));
        for (const auto& r : data_)
            if (static_cast<int>(r.attributes.size()) != attributes.size())
                throw ValidationError("record '" + r.id + "' attribute vector does not match the attribute vocabulary");

        ckpt_.config = cfg_;
        ckpt_.vocab = TokenVocabulary::build(data_, mode);
        ckpt_.attributes = std::move(attributes);
        const ModelDims dims = cfg_.dims(ckpt_.vocab.size(), std::max(1, k_cls), ckpt_.attributes.size());
        check_scale(cfg_, dims);
        ckpt_.model = M3PSModel(dims);
        ckpt_.model.init(cfg_.seed, cfg_.tau_init);
        if (cfg_.saturate_gate) ckpt_.model.saturate_gate();

        for (const auto& r : data_) examples_.push_back(make_example(r, ckpt_.vocab, dims, mode));
        for (const auto& r : val_data_) val_examples_.push_back(make_example(r, ckpt_.vocab, dims, mode));
        order_.resize(examples_.size());
        std::iota(order_.begin(), order_.end(), std::size_t{0});
        cursor_ = order_.size();
    }

    /// Called after backward, before the parameter update.
    void set_gradient_observer(std::function<void(M3PSModel&, const StepLog&)> f) { observer_ = std::move(f); }

    StepLog step() {
        const int s = static_cast<int>(ckpt_.step);
        std::vector<const Example*> batch = next_batch();
        M3PSModel& m = ckpt_.model;
        m.zero_grad();

        StepLog log;
        log.step = s;
        log.lr = learning_rate_at(cfg_, s);
        {
            Tape t(true);
            t.set_training(cfg_.dropout > 0.0, &rng_);
            BatchOptions opt{cfg_.weights(), cfg_.mask_rate, cfg_.dropout};
            BatchLoss bl;
            try {
                bl = batch_loss(t, m, batch, opt, rng_);
            } catch (const TrainingAbort& e) {
                throw TrainingAbort(e.task(), std::string(e.what()) + " at step " + std::to_string(s));
            }
            log.loss = bl.parts;
            t.backward(bl.objective);
        }
        if (cfg_.grad_clip > 0.0) {
            const double norm = global_grad_norm(m);
            if (norm > cfg_.grad_clip) {
                const double k = cfg_.grad_clip / norm;
                m.for_each_param([&](const std::string&, Param& p) { p.grad *= k; });
            }
        }
        if (observer_) observer_(m, log);
        adam_.step(m, log.lr);
        ++ckpt_.step;
        ckpt_.rng_state = rng_to_string(rng_);
        return log;
    }

    /// Mean teacher-forced L_PS over the validation split (no dropout, no masking).
    double validation_loss() {
        require(!val_examples_.empty(), "no validation data");
        double s = 0.0;
        for (const auto& ex : val_examples_) {
            Tape t(false);
            SampleForward f = forward_sample(t, ckpt_.model, ex, MaskPlan{}, 0.0);
            std::vector<int> input(ex.target.begin(), ex.target.end() - 1);
            std::vector<int> gold(ex.target.begin() + 1, ex.target.end());
            s += loss_ps(forward_teacher_forced(t, f.fused, input, ckpt_.model.decoder), gold).scalar();
        }
        return s / static_cast<double>(val_examples_.size());
    }

    bool has_validation() const { return !val_examples_.empty(); }
    Checkpoint& checkpoint() { return ckpt_; }
    M3PSModel& model() { return ckpt_.model; }
    const TrainConfig& config() const { return cfg_; }
    const std::vector<Example>& examples() const { return examples_; }

private:
    std::vector<const Example*> next_batch() {
        const std::size_t b = std::min<std::size_t>(static_cast<std::size_t>(cfg_.batch_size), examples_.size());
        std::vector<const Example*> out;
        while (out.size() < b) {
            if (cursor_ >= order_.size()) {
                std::shuffle(order_.begin(), order_.end(), rng_);
                cursor_ = 0;
            }
            out.push_back(&examples_[order_[cursor_++]]);
        }
        return out;
    }

    TrainConfig cfg_;
    std::vector<ProductRecord> data_, val_data_;
    std::vector<Example> examples_, val_examples_;
    Checkpoint ckpt_;
    Adam adam_;
    Rng rng_;
    std::vector<std::size_t> order_;
    std::size_t cursor_ = 0;
    std::function<void(M3PSModel&, const StepLog&)> observer_;
};

struct TrainResult {
    Checkpoint checkpoint;
    std::vector<StepLog> log;
    std::vector<std::pair<int, double>> validation;  // (step, mean L_PS)
    int selected_step = -1;                          // step of the kept parameters
};

/// Runs the full step budget. With validation data the parameters with the
/// lowest validation L_PS are kept.
inline TrainResult train(const TrainConfig& cfg, const std::vector<ProductRecord>& data,
                         const AttributeVocabulary& attributes, const std::vector<ProductRecord>& validation = {},
                         const std::function<void(const StepLog&)>& on_step = {}) {
    Trainer tr(cfg, data, attributes, validation);
    TrainResult out;
    std::optional<M3PSModel> best;
    double best_val = std::numeric_limits<double>::infinity();
    const int every = cfg.eval_every > 0 ? cfg.eval_every : cfg.steps;
    for (int s = 0; s < cfg.steps; ++s) {
        out.log.push_back(tr.step());
        if (on_step) on_step(out.log.back());
        if (tr.has_validation() && ((s + 1) % every == 0 || s + 1 == cfg.steps)) {
            const double v = tr.validation_loss();
            out.validation.emplace_back(s + 1, v);
            if (v < best_val) {
                best_val = v;
                best = tr.model();
                out.selected_step = s + 1;
            }
        }
    }
    out.checkpoint = std::move(tr.checkpoint());
    if (best) out.checkpoint.model = *best;
    if (out.selected_step < 0) out.selected_step = cfg.steps;
    return out;
}

inline nlohmann::json to_json(const LossBreakdown& b) {
    return {{"ps", b.ps}, {"mrm", b.mrm}, {"cmm", b.cmm}, {"hd", b.hd}, {"att", b.att}, {"fmm", b.fmm}, {"total", b.total}};
}

inline std::string loss_log_csv(const std::vector<StepLog>& log) {
    std::ostringstream os;
    os.precision(17);
    os << "step,lr,ps,mrm,cmm,hd,att,fmm,total\n";
    for (const auto& s : log)
        os << s.step << ',' << s.lr << ',' << s.loss.ps << ',' << s.loss.mrm << ',' << s.loss.cmm << ',' << s.loss.hd
           << ',' << s.loss.att << ',' << s.loss.fmm << ',' << s.loss.total << '\n';
    return os.str();
}

// ---------------------------------------------------------------------------
// Inference

/// Forward pass without dropout or masking.
inline SampleForward infer(M3PSModel& m, Tape& t, const Example& ex) { return forward_sample(t, m, ex, MaskPlan{}, 0.0); }

inline void check_compatible(const Checkpoint& c, const std::vector<ProductRecord>& data,
                             const AttributeVocabulary* data_attributes = nullptr) {
    if (data_attributes && data_attributes->entries != c.attributes.entries)
        throw ValidationError("attribute vocabulary of the data does not match the checkpoint");
    for (const auto& r : data) {
        if (static_cast<int>(r.attributes.size()) != c.attributes.size())
            throw ValidationError("record '" + r.id + "': attribute vector length does not match the checkpoint");
        if (!r.region_set.slots.empty() && r.region_set.feature_dim() != c.model.dims.d_img)
            throw ValidationError("record '" + r.id + "': region feature dimension does not match the checkpoint");
        if (!r.region_set.slots.empty() && r.region_set.class_dim() != c.model.dims.k_cls)
            throw ValidationError("record '" + r.id + "': region class count does not match the checkpoint");
    }
}

struct Prediction {
    std::string id;
    std::string summary;
    std::string reference;
    std::vector<double> attributes;  // ŷ^a
    double log_prob = 0.0;
};

inline GenerationConfig clamp_generation(const GenerationConfig& g, const ModelDims& d) {
    GenerationConfig out = g;
    out.max_len = std::min(g.max_len, d.max_summary_len);
    return out;
}

/// `gen == nullptr` skips summary generation (attribute predictions only).
inline Prediction predict(Checkpoint& c, const ProductRecord& r, const GenerationConfig* gen) {
    const TokenizerMode mode = c.config.tokenizer_mode();
    M3PSModel& m = c.model;
    const Example ex = make_example(r, c.vocab, m.dims, mode);
    Tape t(false);
    SampleForward f = infer(m, t, ex);
    Prediction p;
    p.id = r.id;
    p.reference = r.summary;
    if (gen) {
        const GeneratedSummary g = generate_scored(f.fused, clamp_generation(*gen, m.dims), m.decoder);
        p.summary = join(c.vocab.decode(g.tokens), mode);
        p.log_prob = g.log_prob;
    }
    if (m.dims.n_attr > 0) {
        const Mat a = predict_attributes(t, f.fused, f.text, m.heads).value();
        p.attributes.assign(a.data(), a.data() + a.size());
    }
    return p;
}

inline std::vector<Prediction> predict_all(Checkpoint& c, const std::vector<ProductRecord>& data,
                                           const GenerationConfig* gen) {
    std::vector<Prediction> out;
    out.reserve(data.size());
    for (const auto& r : data) out.push_back(predict(c, r, gen));
    return out;
}

// ---------------------------------------------------------------------------
// Evaluation

struct AttributeScores {
    double precision = 0, recall = 0, f1 = 0;
    long long tp = 0, fp = 0, fn = 0;
};

/// Micro-averaged over (record, attribute) pairs; `columns` restricts the attributes (all if empty).
inline AttributeScores attribute_scores(const std::vector<Prediction>& preds, const std::vector<ProductRecord>& data,
                                        const std::vector<int>& columns = {}, double threshold = 0.5) {
    require(preds.size() == data.size(), "prediction/record count mismatch");
    AttributeScores s;
    for (std::size_t i = 0; i < data.size(); ++i) {
        const auto& gold = data[i].attributes;
        const auto& pred = preds[i].attributes;
        if (pred.empty()) continue;
        auto visit = [&](std::size_t k) {
            const bool p = pred[k] >= threshold;
            const bool y = gold[k] >= 0.5;
            s.tp += p && y;
            s.fp += p && !y;
            s.fn += !p && y;
        };
        if (columns.empty())
            for (std::size_t k = 0; k < gold.size(); ++k) visit(k);
        else
            for (int k : columns) visit(static_cast<std::size_t>(k));
    }
    s.precision = s.tp + s.fp > 0 ? static_cast<double>(s.tp) / static_cast<double>(s.tp + s.fp) : 0.0;
    s.recall = s.tp + s.fn > 0 ? static_cast<double>(s.tp) / static_cast<double>(s.tp + s.fn) : 0.0;
    s.f1 = metrics::detail::f1(s.precision, s.recall);
    return s;
}

struct EvalOptions {
    GenerationConfig gen;
    std::string metric_tokenizer = "auto";  // auto = the checkpoint's tokenizer
    int embedding_dim = 256;
    std::uint64_t embedding_seed = 0;
    bool per_sample = false;
    double attribute_threshold = 0.5;
    std::vector<std::string> attribute_subset;  // extra F1 over these attributes
};

struct EvalReport {
    std::string label = "m3ps";
    metrics::MetricsReport metrics;
    std::optional<AttributeScores> attributes;
    std::optional<AttributeScores> attribute_subset;
    GenerationConfig gen;
    std::vector<Prediction> predictions;
};

inline metrics::MetricsReport score_texts(const std::vector<std::string>& candidates,
                                          const std::vector<std::string>& references,
                                          const std::vector<std::string>& ids, TokenizerMode mode,
                                          const EvalOptions& opt) {
    require(candidates.size() == references.size(), "candidate/reference count mismatch");
    std::vector<metrics::EvalPair> pairs;
    for (std::size_t i = 0; i < candidates.size(); ++i)
        pairs.push_back({tokenize(candidates[i], mode), tokenize(references[i], mode)});
    const metrics::HashEmbeddingProvider emb(opt.embedding_dim, opt.embedding_seed);
    auto r = metrics::score_corpus(pairs, emb, ids, opt.per_sample);
    r.tokenizer = to_string(mode);
    return r;
}

inline TokenizerMode metric_mode(const EvalOptions& opt, TokenizerMode fallback) {
    return opt.metric_tokenizer == "auto" ? fallback : tokenizer_mode_from_string(opt.metric_tokenizer);
}

inline EvalReport evaluate(Checkpoint& c, const std::vector<ProductRecord>& data, const EvalOptions& opt = {},
                           const AttributeVocabulary* data_attributes = nullptr) {
    if (data.empty()) throw ContractError("evaluation set is empty");
    check_compatible(c, data, data_attributes);
    EvalReport rep;
    rep.gen = clamp_generation(opt.gen, c.model.dims);
    rep.predictions = predict_all(c, data, &rep.gen);

    std::vector<std::string> cands, refs, ids;
    for (const auto& p : rep.predictions) {
        cands.push_back(p.summary);
        refs.push_back(p.reference);
        ids.push_back(p.id);
    }
    rep.metrics = score_texts(cands, refs, ids, metric_mode(opt, c.config.tokenizer_mode()), opt);
    if (c.attributes.size() > 0) {
        rep.attributes = attribute_scores(rep.predictions, data, {}, opt.attribute_threshold);
        if (!opt.attribute_subset.empty()) {
            std::vector<int> cols;
            for (const auto& a : opt.attribute_subset) {
                const int k = c.attributes.find(a);
                if (k < 0) throw ValidationError("attribute '" + a + "' is not in the checkpoint vocabulary");
                cols.push_back(k);
            }
            rep.attribute_subset = attribute_scores(rep.predictions, data, cols, opt.attribute_threshold);
        }
    }
    return rep;
}

/// The same scoring pipeline applied to the first-k-characters baseline.
inline EvalReport evaluate_lead(const std::vector<ProductRecord>& data, const EvalOptions& opt = {},
                                std::size_t k = 80, TokenizerMode fallback = TokenizerMode::Char) {
    if (data.empty()) throw ContractError("evaluation set is empty");
    EvalReport rep;
    rep.label = "lead";
    std::vector<std::string> cands, refs, ids;
    for (const auto& r : data) {
        Prediction p{r.id, metrics::lead_baseline(r.description, k), r.summary, {}, 0.0};
        cands.push_back(p.summary);
        refs.push_back(p.reference);
        ids.push_back(p.id);
        rep.predictions.push_back(std::move(p));
    }
    rep.metrics = score_texts(cands, refs, ids, metric_mode(opt, fallback), opt);
    return rep;
}

inline nlohmann::json to_json(const AttributeScores& s) {
    return {{"precision", s.precision}, {"recall", s.recall}, {"f1", s.f1}, {"tp", s.tp}, {"fp", s.fp}, {"fn", s.fn}};
}

inline nlohmann::json to_json(const GenerationConfig& g) {
    return {{"max_len", g.max_len}, {"beam_width", g.beam_width}, {"length_penalty", g.length_penalty}};
}

inline nlohmann::json to_json(const EvalReport& r, bool with_predictions = false) {
    nlohmann::json j{{"label", r.label}, {"metrics", metrics::to_json(r.metrics)}, {"generation", to_json(r.gen)}};
    if (r.attributes) j["attributes"] = to_json(*r.attributes);
    if (r.attribute_subset) j["attribute_subset"] = to_json(*r.attribute_subset);
    if (with_predictions) {
        nlohmann::json rows = nlohmann::json::array();
        for (const auto& p : r.predictions)
            rows.push_back({{"id", p.id}, {"summary", p.summary}, {"reference", p.reference}});
        j["predictions"] = rows;
    }
    return j;
}

/// Flat name → value view used for seed aggregation and sweep tables.
inline std::vector<std::pair<std::string, double>> headline_numbers(const EvalReport& r) {
    const auto& m = r.metrics;
    std::vector<std::pair<std::string, double>> out{
        {"R-1", metrics::percent(m.rouge1)}, {"R-2", metrics::percent(m.rouge2)}, {"R-L", metrics::percent(m.rougeL)},
        {"B-1", metrics::percent(m.bleu[0])}, {"B-2", metrics::percent(m.bleu[1])},
        {"B-3", metrics::percent(m.bleu[2])}, {"B-4", metrics::percent(m.bleu[3])},
        {"S-B", metrics::percent(m.sbleu)},   {"M", metrics::percent(m.meteor)},   {"BS", metrics::percent(m.bertscore)}};
    if (r.attributes) out.emplace_back("attr-F1", metrics::percent(r.attributes->f1));
    if (r.attribute_subset) out.emplace_back("subset-F1", metrics::percent(r.attribute_subset->f1));
    return out;
}

/// mean ± sample std of each headline number across seeds.
inline nlohmann::json aggregate_reports(const std::vector<EvalReport>& runs) {
    require(!runs.empty(), "nothing to aggregate");
    nlohmann::json mean = nlohmann::json::object(), stdev = nlohmann::json::object();
    const auto keys = headline_numbers(runs.front());
    const double n = static_cast<double>(runs.size());
    for (std::size_t k = 0; k < keys.size(); ++k) {
        double s = 0.0, ss = 0.0;
        for (const auto& r : runs) s += headline_numbers(r).at(k).second;
        const double mu = s / n;
        for (const auto& r : runs) ss += std::pow(headline_numbers(r).at(k).second - mu, 2);
        mean[keys[k].first] = mu;
        stdev[keys[k].first] = runs.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
    }
    return {{"label", runs.front().label}, {"runs", runs.size()}, {"mean", mean}, {"std", stdev}};
}

/// Image→text retrieval over consecutive full batches of size B: the fraction
/// of images whose most similar in-batch text is their own.
inline double retrieval_accuracy(Checkpoint& c, const std::vector<ProductRecord>& data, int batch_size) {
    require(batch_size >= 1, "batch size must be >= 1");
    const auto n_batches = data.size() / static_cast<std::size_t>(batch_size);
    require(n_batches > 0, "not enough records for one full batch");
    M3PSModel& m = c.model;
    long long hits = 0;
    for (std::size_t b = 0; b < n_batches; ++b) {
        Tape t(false);
        std::vector<Var> g, z;
        for (int i = 0; i < batch_size; ++i) {
            const auto ex = make_example(data[b * batch_size + static_cast<std::size_t>(i)], c.vocab, m.dims,
                                         c.config.tokenizer_mode());
            g.push_back(encode_image(t, ex.regions, m.encoder).cls());
            z.push_back(encode_text(t, ex.source, m.encoder).cls());
        }
        const Mat sim = contrastive_similarity(t, ad::concat_rows(g), ad::concat_rows(z), m.heads);
        for (Eigen::Index i = 0; i < sim.rows(); ++i) {
            Eigen::Index j = 0;
            sim.row(i).maxCoeff(&j);
            hits += (j == i);
        }
    }
    return static_cast<double>(hits) / static_cast<double>(n_batches * static_cast<std::size_t>(batch_size));
}

// ---------------------------------------------------------------------------
// Ablation and sweep

inline const std::vector<std::string>& ablation_variants() {
    static const std::vector<std::string> v{"w/o-MRM", "w/o-CMM", "w/o-FMM"};
    return v;
}

/// Zeroes exactly one task weight.
inline TrainConfig ablate(std::string_view variant, TrainConfig c) {
    if (variant == "w/o-MRM")
        c.lambda1 = 0.0;
    else if (variant == "w/o-CMM")
        c.lambda2 = 0.0;
    else if (variant == "w/o-FMM")
        c.lambda3 = 0.0;
    else
        throw ConfigError("unknown ablation variant '" + std::string(variant) + "' (expected w/o-MRM|w/o-CMM|w/o-FMM)");
    return c;
}

struct SweepSpec {
    std::vector<double> lambda1, lambda2, lambda3;
    std::vector<std::uint64_t> seeds{1, 2, 3};

    /// 0, 0.1, …, 1.0 on every axis.
    static SweepSpec full_grid() {
        std::vector<double> v;
        for (int i = 0; i <= 10; ++i) v.push_back(i / 10.0);
        return SweepSpec{v, v, v, {1, 2, 3}};
    }

    void validate() const {
        if (lambda1.empty() || lambda2.empty() || lambda3.empty()) throw ConfigError("sweep grid is empty");
        if (seeds.empty()) throw ConfigError("sweep needs at least one seed");
    }

    std::vector<TaskWeights> cells() const {
        validate();
        std::vector<TaskWeights> out;
        for (double a : lambda1)
            for (double b : lambda2)
                for (double c : lambda3) out.push_back(TaskWeights{a, b, c});
        return out;
    }
};

struct SweepCell {
    TaskWeights weights;
    std::vector<EvalReport> reports;  // one per seed
    std::vector<std::vector<StepLog>> logs;
    std::string error;
    bool ok() const { return error.empty(); }
};

inline std::vector<SweepCell> sweep(const SweepSpec& spec, const TrainConfig& base,
                                    const std::vector<ProductRecord>& train_data, const AttributeVocabulary& attributes,
                                    const std::vector<ProductRecord>& eval_data, const EvalOptions& opt = {},
                                    const std::function<void(const SweepCell&)>& on_cell = {}) {
    std::vector<SweepCell> out;
    for (const TaskWeights& w : spec.cells()) {
        SweepCell cell;
        cell.weights = w;
        try {
            for (std::uint64_t seed : spec.seeds) {
                TrainConfig c = base;
                c.set_weights(w);
                c.seed = seed;
                TrainResult r = train(c, train_data, attributes);
                cell.logs.push_back(std::move(r.log));
                cell.reports.push_back(evaluate(r.checkpoint, eval_data, opt));
                cell.reports.back().predictions.clear();
            }
        } catch (const std::exception& e) {
            cell.error = e.what();
        }
        if (on_cell) on_cell(cell);
        out.push_back(std::move(cell));
    }
    return out;
}

inline nlohmann::json sweep_table(const std::vector<SweepCell>& cells) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& c : cells) {
        nlohmann::json row{{"lambda1", c.weights.lambda1}, {"lambda2", c.weights.lambda2}, {"lambda3", c.weights.lambda3}};
        if (c.ok())
            row["report"] = aggregate_reports(c.reports);
        else
            row["error"] = c.error;
        rows.push_back(std::move(row));
    }
    return rows;
}

/// One row per cell: the three weights, then the seed-mean of each metric.
inline std::string sweep_csv(const std::vector<SweepCell>& cells) {
    std::vector<std::string> cols;
    for (const auto& c : cells)
        if (c.ok()) {
            for (const auto& [k, v] : headline_numbers(c.reports.front())) cols.push_back(k);
            break;
        }
    std::ostringstream os;
    os << "lambda1,lambda2,lambda3";
    for (const auto& k : cols) os << ',' << k;
    os << ",error\n";
    for (const auto& c : cells) {
        os << c.weights.lambda1 << ',' << c.weights.lambda2 << ',' << c.weights.lambda3;
        if (c.ok()) {
            const auto agg = aggregate_reports(c.reports);
            for (const auto& k : cols) os << ',' << agg["mean"][k].get<double>();
            os << ",\n";
        } else {
            for (std::size_t i = 0; i < cols.size(); ++i) os << ',';
            std::string e = c.error;
            std::replace(e.begin(), e.end(), ',', ';');
            std::replace(e.begin(), e.end(), '\n', ' ');
            os << ',' << e << '\n';
        }
    }
    return os.str();
}

}  // namespace m3ps
