#pragma once

#include "m3ps/datamodel.hpp"

#include "json.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace m3ps::metrics {

using Tokens = std::vector<std::string>;

/// Candidate and reference tokenized with the same tokenizer.
struct EvalPair {
    Tokens candidate;
    Tokens reference;
};

namespace detail {

using NgramCounts = std::unordered_map<std::string, int>;

inline NgramCounts ngrams(const Tokens& toks, int n) {
    NgramCounts out;
    if (static_cast<int>(toks.size()) < n) return out;
    for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= toks.size(); ++i) {
        std::string key;
        for (int k = 0; k < n; ++k) {
            if (k > 0) key.push_back('\x1f');
            key += toks[i + static_cast<std::size_t>(k)];
        }
        ++out[key];
    }
    return out;
}

/// (clipped overlap, candidate total, reference total)
inline std::array<long long, 3> overlap(const Tokens& cand, const Tokens& ref, int n) {
    const auto c = ngrams(cand, n);
    const auto r = ngrams(ref, n);
    long long match = 0, ct = 0, rt = 0;
    for (const auto& [k, v] : c) {
        ct += v;
        if (auto it = r.find(k); it != r.end()) match += std::min(v, it->second);
    }
    for (const auto& [k, v] : r) rt += v;
    return {match, ct, rt};
}

inline double f1(double p, double r) { return p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0; }

inline std::size_t lcs_length(const Tokens& a, const Tokens& b) {
    std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
    for (std::size_t i = 1; i <= a.size(); ++i) {
        for (std::size_t j = 1; j <= b.size(); ++j)
            cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// ROUGE

/// F1 over clipped n-gram overlap.
inline double rouge_n(const EvalPair& p, int n) {
    require(n >= 1, "rouge_n needs n >= 1");
    require(!p.reference.empty(), "rouge needs a nonempty reference");
    if (p.candidate.empty()) return 0.0;
    const auto [match, ct, rt] = detail::overlap(p.candidate, p.reference, n);
    if (match == 0 || ct == 0 || rt == 0) return 0.0;
    return detail::f1(static_cast<double>(match) / ct, static_cast<double>(match) / rt);
}

/// F1 over the longest common subsequence.
inline double rouge_l(const EvalPair& p) {
    require(!p.reference.empty(), "rouge needs a nonempty reference");
    if (p.candidate.empty()) return 0.0;
    const double lcs = static_cast<double>(detail::lcs_length(p.candidate, p.reference));
    return detail::f1(lcs / static_cast<double>(p.candidate.size()), lcs / static_cast<double>(p.reference.size()));
}

// ---------------------------------------------------------------------------
// BLEU

struct BleuScores {
    std::array<double, 4> bleu{};  // BLEU-1..4
    std::array<double, 4> precision{};
    double brevity_penalty = 0.0;
};

inline double brevity_penalty(double cand_len, double ref_len) {
    if (cand_len <= 0.0) return 0.0;
    return cand_len > ref_len ? 1.0 : std::exp(1.0 - ref_len / cand_len);
}

/// Corpus BLEU: clipped counts summed over pairs, BLEU-k uses uniform weights over orders 1..k.
inline BleuScores bleu_corpus(std::span<const EvalPair> pairs, int max_n = 4) {
    require(!pairs.empty(), "bleu_corpus needs a nonempty corpus");
    require(max_n >= 1 && max_n <= 4, "bleu max order must be in 1..4");
    std::array<long long, 4> match{}, total{};
    double c = 0, r = 0;
    for (const auto& p : pairs) {
        c += static_cast<double>(p.candidate.size());
        r += static_cast<double>(p.reference.size());
        for (int n = 1; n <= max_n; ++n) {
            const auto o = detail::overlap(p.candidate, p.reference, n);
            match[static_cast<std::size_t>(n - 1)] += o[0];
            total[static_cast<std::size_t>(n - 1)] += o[1];
        }
    }
    BleuScores s;
    s.brevity_penalty = brevity_penalty(c, r);
    double log_sum = 0.0;
    bool zero = false;
    for (int n = 1; n <= max_n; ++n) {
        const auto k = static_cast<std::size_t>(n - 1);
        s.precision[k] = total[k] > 0 ? static_cast<double>(match[k]) / static_cast<double>(total[k]) : 0.0;
        if (s.precision[k] <= 0.0) zero = true;
        if (!zero) log_sum += std::log(s.precision[k]);
        s.bleu[k] = zero ? 0.0 : s.brevity_penalty * std::exp(log_sum / n);
    }
    return s;
}

/// Sentence BLEU with zero n-gram matches replaced by eps (add-ε smoothing).
inline double sentence_bleu(const EvalPair& p, int max_n = 4, double eps = 1e-9) {
    if (p.candidate.empty()) return 0.0;
    double log_sum = 0.0;
    for (int n = 1; n <= max_n; ++n) {
        const auto o = detail::overlap(p.candidate, p.reference, n);
        const double prec = o[0] > 0 ? static_cast<double>(o[0]) / static_cast<double>(o[1])
                                     : eps / static_cast<double>(std::max<long long>(o[1], 1));
        log_sum += std::log(prec);
    }
    return brevity_penalty(static_cast<double>(p.candidate.size()), static_cast<double>(p.reference.size())) *
           std::exp(log_sum / max_n);
}

/// Mean of per-sentence BLEU-4.
inline double sbleu(std::span<const EvalPair> pairs, double eps = 1e-9) {
    require(!pairs.empty(), "sbleu needs a nonempty corpus");
    double s = 0.0;
    for (const auto& p : pairs) s += sentence_bleu(p, 4, eps);
    return s / static_cast<double>(pairs.size());
}

// ---------------------------------------------------------------------------
// METEOR (exact matching only)

struct MeteorParams {
    double alpha = 0.9;
    double beta = 3.0;
    double gamma = 0.5;
};

struct MeteorStats {
    int matches = 0;
    int chunks = 0;
    double precision = 0, recall = 0, fmean = 0, penalty = 0, score = 0;
    bool exact_search = true;  // false when the search budget ran out
};

namespace detail {

/// Finds a maximum one-to-one exact alignment with the fewest chunks by
/// depth-first search over candidate positions.
class ChunkSearch {
public:
    ChunkSearch(const Tokens& cand, const Tokens& ref, long budget) : cand_(cand), ref_(ref), budget_(budget) {
        std::map<std::string, int> cc, rc;
        for (const auto& w : cand) ++cc[w];
        for (const auto& w : ref) ++rc[w];
        for (const auto& [w, n] : cc) {
            const int id = static_cast<int>(word_id_.size());
            word_id_[w] = id;
            const auto it = rc.find(w);
            required_.push_back(it == rc.end() ? 0 : std::min(n, it->second));
            cand_left_.push_back(n);
        }
        cand_word_.reserve(cand.size());
        for (const auto& w : cand) cand_word_.push_back(word_id_[w]);
        ref_positions_.resize(word_id_.size());
        for (std::size_t j = 0; j < ref.size(); ++j)
            if (auto it = word_id_.find(ref[j]); it != word_id_.end()) ref_positions_[static_cast<std::size_t>(it->second)].push_back(static_cast<int>(j));
        used_.assign(ref.size(), false);
        for (int r : required_) total_matches_ += r;
    }

    int matches() const { return total_matches_; }

    /// Minimal chunk count, or -1 when there are no matches.
    int run() {
        if (total_matches_ == 0) return -1;
        best_ = std::numeric_limits<int>::max();
        dfs(0, -2, 0);
        return best_;
    }

    bool exhausted() const { return budget_ < 0; }

private:
    void dfs(std::size_t i, int last_j, int chunks) {
        if (chunks >= best_ || --budget_ < 0) return;
        if (i == cand_.size()) {
            best_ = chunks;
            return;
        }
        const auto w = static_cast<std::size_t>(cand_word_[i]);
        --cand_left_[w];
        if (required_[w] > 0) {
            // Continuing the current chunk first finds good bounds early.
            auto try_j = [&](int j) {
                if (used_[static_cast<std::size_t>(j)]) return;
                used_[static_cast<std::size_t>(j)] = true;
                --required_[w];
                const bool extends = last_j >= 0 && j == last_j + 1;
                dfs(i + 1, j, chunks + (extends ? 0 : 1));
                ++required_[w];
                used_[static_cast<std::size_t>(j)] = false;
            };
            const auto& pos = ref_positions_[w];
            if (last_j >= 0 && std::binary_search(pos.begin(), pos.end(), last_j + 1)) try_j(last_j + 1);
            for (int j : pos)
                if (!(last_j >= 0 && j == last_j + 1)) try_j(j);
        }
        // Leaving position i unmatched is allowed only if enough later occurrences remain.
        if (cand_left_[w] >= required_[w]) dfs(i + 1, -2, chunks);
        ++cand_left_[w];
    }

    const Tokens& cand_;
    const Tokens& ref_;
    long budget_;
    std::map<std::string, int> word_id_;
    std::vector<int> required_, cand_left_, cand_word_;
    std::vector<std::vector<int>> ref_positions_;
    std::vector<bool> used_;
    int total_matches_ = 0;
    int best_ = 0;
};

}  // namespace detail

inline MeteorStats meteor_exact_stats(const EvalPair& p, const MeteorParams& mp = {}, long budget = 2'000'000) {
    require(!p.reference.empty(), "meteor needs a nonempty reference");
    MeteorStats s;
    if (p.candidate.empty()) return s;
    detail::ChunkSearch search(p.candidate, p.reference, budget);
    const int chunks = search.run();
    if (chunks < 0) return s;
    s.matches = search.matches();
    s.chunks = chunks;
    s.exact_search = !search.exhausted();
    s.precision = static_cast<double>(s.matches) / static_cast<double>(p.candidate.size());
    s.recall = static_cast<double>(s.matches) / static_cast<double>(p.reference.size());
    s.fmean = s.precision * s.recall / (mp.alpha * s.precision + (1.0 - mp.alpha) * s.recall);
    s.penalty = mp.gamma * std::pow(static_cast<double>(s.chunks) / s.matches, mp.beta);
    s.score = s.fmean * (1.0 - s.penalty);
    return s;
}

inline double meteor_exact(const EvalPair& p, const MeteorParams& mp = {}) { return meteor_exact_stats(p, mp).score; }

// ---------------------------------------------------------------------------
// BERTScore

/// Maps a token to a unit-norm vector; same token, same vector.
class EmbeddingProvider {
public:
    virtual ~EmbeddingProvider() = default;
    virtual Eigen::VectorXd embed(const std::string& token) const = 0;
    virtual std::string name() const = 0;
};

/// Gaussian vectors seeded by a 64-bit FNV-1a hash of the token, normalized.
/// Distinct tokens are nearly orthogonal for large `dim`.
class HashEmbeddingProvider final : public EmbeddingProvider {
public:
    explicit HashEmbeddingProvider(int dim = 256, std::uint64_t seed = 0) : dim_(dim), seed_(seed) {
        require(dim >= 1, "embedding dimension must be >= 1");
    }

    Eigen::VectorXd embed(const std::string& token) const override {
        std::uint64_t h = 1469598103934665603ULL ^ seed_;
        for (unsigned char c : token) {
            h ^= c;
            h *= 1099511628211ULL;
        }
        Rng rng(h);
        std::normal_distribution<double> n(0.0, 1.0);
        Eigen::VectorXd v(dim_);
        for (int i = 0; i < dim_; ++i) v(i) = n(rng);
        return v / v.norm();
    }

    std::string name() const override { return "hash-gaussian-" + std::to_string(dim_); }

private:
    int dim_;
    std::uint64_t seed_;
};

/// Token → vector table; unknown tokens map to the zero vector.
class TableEmbeddingProvider final : public EmbeddingProvider {
public:
    explicit TableEmbeddingProvider(std::map<std::string, Eigen::VectorXd> table) : table_(std::move(table)) {
        require(!table_.empty(), "embedding table is empty");
    }
    Eigen::VectorXd embed(const std::string& token) const override {
        auto it = table_.find(token);
        if (it == table_.end()) return Eigen::VectorXd::Zero(table_.begin()->second.size());
        return it->second;
    }
    std::string name() const override { return "table"; }

private:
    std::map<std::string, Eigen::VectorXd> table_;
};

struct BertScoreParts {
    double precision = 0, recall = 0, f1 = 0;
};

/// Greedy max-cosine matching in both directions, F = 2PR/(P+R).
inline BertScoreParts bertscore_parts(const EvalPair& p, const EmbeddingProvider& emb) {
    require(!p.candidate.empty() && !p.reference.empty(), "bertscore needs nonempty candidate and reference");
    auto stack = [&](const Tokens& toks) {
        std::map<std::string, Eigen::VectorXd> cache;
        Mat out;
        for (std::size_t i = 0; i < toks.size(); ++i) {
            auto it = cache.find(toks[i]);
            if (it == cache.end()) it = cache.emplace(toks[i], emb.embed(toks[i])).first;
            if (i == 0) out.resize(static_cast<Eigen::Index>(toks.size()), it->second.size());
            out.row(static_cast<Eigen::Index>(i)) = it->second.transpose();
        }
        return out;
    };
    const Mat s = stack(p.reference);
    const Mat c = stack(p.candidate);
    const Mat sim = s * c.transpose();  // |y| × |ŷ|
    BertScoreParts b;
    b.recall = sim.rowwise().maxCoeff().mean();
    b.precision = sim.colwise().maxCoeff().mean();
    b.f1 = b.precision + b.recall != 0.0 ? 2.0 * b.precision * b.recall / (b.precision + b.recall) : 0.0;
    return b;
}

inline double bertscore(const EvalPair& p, const EmbeddingProvider& emb) { return bertscore_parts(p, emb).f1; }

// ---------------------------------------------------------------------------
// Lead baseline

/// First k characters of the description.
inline std::string lead_baseline(const std::string& description, std::size_t k = 80) {
    const auto chars = utf8_chars(description);
    std::string out;
    for (std::size_t i = 0; i < std::min(k, chars.size()); ++i) out += chars[i];
    return out;
}

// ---------------------------------------------------------------------------
// Corpus report

struct SampleScores {
    std::string id;
    double rouge1 = 0, rouge2 = 0, rougeL = 0, sbleu = 0, meteor = 0, bertscore = 0;
};

struct MetricsReport {
    double rouge1 = 0, rouge2 = 0, rougeL = 0;
    std::array<double, 4> bleu{};
    double sbleu = 0, meteor = 0, bertscore = 0;
    std::string tokenizer = "char";
    std::string embedding = "";
    std::size_t samples = 0;
    std::vector<SampleScores> per_sample;
};

/// ×100 with two decimals.
inline double percent(double x) { return std::round(x * 10000.0) / 100.0; }

inline MetricsReport score_corpus(const std::vector<EvalPair>& pairs, const EmbeddingProvider& emb,
                                  const std::vector<std::string>& ids = {}, bool keep_per_sample = false) {
    require(!pairs.empty(), "cannot score an empty corpus");
    MetricsReport r;
    r.samples = pairs.size();
    r.embedding = emb.name();
    const double n = static_cast<double>(pairs.size());
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        const auto& p = pairs[i];
        SampleScores s;
        s.id = i < ids.size() ? ids[i] : std::to_string(i);
        s.rouge1 = rouge_n(p, 1);
        s.rouge2 = rouge_n(p, 2);
        s.rougeL = rouge_l(p);
        s.sbleu = sentence_bleu(p);
        s.meteor = meteor_exact(p);
        s.bertscore = p.candidate.empty() ? 0.0 : bertscore(p, emb);
        r.rouge1 += s.rouge1 / n;
        r.rouge2 += s.rouge2 / n;
        r.rougeL += s.rougeL / n;
        r.sbleu += s.sbleu / n;
        r.meteor += s.meteor / n;
        r.bertscore += s.bertscore / n;
        if (keep_per_sample) r.per_sample.push_back(std::move(s));
    }
    r.bleu = bleu_corpus(pairs).bleu;
    return r;
}

inline nlohmann::json to_json(const MetricsReport& r) {
    nlohmann::json j{{"R-1", percent(r.rouge1)},   {"R-2", percent(r.rouge2)},   {"R-L", percent(r.rougeL)},
                     {"B-1", percent(r.bleu[0])},  {"B-2", percent(r.bleu[1])},  {"B-3", percent(r.bleu[2])},
                     {"B-4", percent(r.bleu[3])},  {"S-B", percent(r.sbleu)},    {"M", percent(r.meteor)},
                     {"BS", percent(r.bertscore)}, {"tokenizer", r.tokenizer},   {"embedding", r.embedding},
                     {"sbleu_smoothing", "add-epsilon 1e-9"}, {"samples", r.samples}};
    if (!r.per_sample.empty()) {
        nlohmann::json rows = nlohmann::json::array();
        for (const auto& s : r.per_sample)
            rows.push_back({{"id", s.id},
                            {"R-1", percent(s.rouge1)},
                            {"R-2", percent(s.rouge2)},
                            {"R-L", percent(s.rougeL)},
                            {"S-B", percent(s.sbleu)},
                            {"M", percent(s.meteor)},
                            {"BS", percent(s.bertscore)}});
        j["per_sample"] = rows;
    }
    return j;
}

}  // namespace m3ps::metrics
