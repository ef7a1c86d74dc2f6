#pragma once

#include "m3ps/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

namespace m3ps {

struct DecoderLayer {
    nn::LayerNorm ln_self, ln_cross, ln_ffn;
    nn::MultiHeadAttention self_attn, cross_attn;
    nn::FeedForward ffn;
};

struct DecoderParams {
    Param* embedding = nullptr;  // shared token table, owned by the encoder
    Param positions;
    std::vector<DecoderLayer> layers;
    nn::LayerNorm final_norm;
    nn::Linear output;  // d_txt -> vocab
    bool layer_norm = true;

    DecoderParams() = default;
    DecoderParams(const ModelDims& d, Param& shared_embedding)
        : embedding(&shared_embedding),
          positions(d.max_summary_len + 2, d.d_txt),
          final_norm(d.d_txt),
          output(d.d_txt, d.vocab_size),
          layer_norm(d.text_layer_norm) {
        for (int l = 0; l < d.dec_layers; ++l)
            layers.push_back(DecoderLayer{nn::LayerNorm(d.d_txt), nn::LayerNorm(d.d_txt), nn::LayerNorm(d.d_txt),
                                          nn::MultiHeadAttention(d.d_txt, d.dec_heads),
                                          nn::MultiHeadAttention(d.d_txt, d.dec_heads),
                                          nn::FeedForward(d.d_txt, d.ffn_mult * d.d_txt)});
    }

    void init(Rng& rng) {
        init::normal(positions, rng, 0.02);
        for (auto& l : layers) {
            l.self_attn.init(rng);
            l.cross_attn.init(rng);
            l.ffn.init(rng);
        }
        output.init(rng);
    }

    int vocab_size() const { return output.out_dim(); }
    int max_target_len() const { return static_cast<int>(positions.rows()); }

    template <typename F>
    void for_each_param(F&& f) {
        f("decoder.positions", positions);
        for (std::size_t l = 0; l < layers.size(); ++l) {
            const std::string p = "decoder.layer" + std::to_string(l);
            layers[l].ln_self.for_each_param(p + ".ln_self", f);
            layers[l].self_attn.for_each_param(p + ".self_attn", f);
            layers[l].ln_cross.for_each_param(p + ".ln_cross", f);
            layers[l].cross_attn.for_each_param(p + ".cross_attn", f);
            layers[l].ln_ffn.for_each_param(p + ".ln_ffn", f);
            layers[l].ffn.for_each_param(p + ".ffn", f);
        }
        final_norm.for_each_param("decoder.final_ln", f);
        output.for_each_param("decoder.output", f);
    }
};

struct GenerationConfig {
    int max_len = 80;
    int beam_width = 1;
    double length_penalty = 0.0;  // score = log p / len^length_penalty

    void validate() const {
        require(max_len >= 1, "max_len must be >= 1");
        require(beam_width >= 1, "beam_width must be >= 1");
    }
};

/// Logits for a decoder input prefix attending to `memory` (rows masked by `memory_mask`).
inline Var decode_logits(Tape& t, Var memory, const std::vector<bool>& memory_mask, const std::vector<int>& input,
                         DecoderParams& p) {
    require(p.embedding != nullptr, "decoder is not bound to a token embedding");
    require(!input.empty() && input.front() == special::kBos, "decoder input must begin with BOS");
    require(static_cast<int>(input.size()) <= p.max_target_len(), "decoder input exceeds the position table");
    for (int id : input)
        if (id < 0 || id >= p.vocab_size()) throw ContractError("target token id outside the vocabulary");

    const int n = static_cast<int>(input.size());
    std::vector<int> pos(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) pos[static_cast<std::size_t>(i)] = i;
    Var x = ad::add(ad::select_rows(t.param(*p.embedding), input), ad::select_rows(t.param(p.positions), pos));
    const std::vector<bool> self_mask(static_cast<std::size_t>(n), true);
    for (auto& layer : p.layers) {
        if (p.layer_norm) {
            Var h = layer.ln_self(t, x);
            x = ad::add(x, layer.self_attn(t, h, h, self_mask, true));
            x = ad::add(x, layer.cross_attn(t, layer.ln_cross(t, x), memory, memory_mask));
            x = ad::add(x, layer.ffn(t, layer.ln_ffn(t, x)));
        } else {
            x = ad::add(x, layer.self_attn(t, x, x, self_mask, true));
            x = ad::add(x, layer.cross_attn(t, x, memory, memory_mask));
            x = ad::add(x, layer.ffn(t, x));
        }
    }
    if (p.layer_norm) x = p.final_norm(t, x);
    return p.output(t, x);
}

/// Row t holds the logits for the token following target[0..t].
inline Var forward_teacher_forced(Tape& t, const FusedFeatures& fused, const std::vector<int>& target,
                                  DecoderParams& p) {
    return decode_logits(t, fused.per_token, fused.mask, target, p);
}

namespace decoder_detail {

struct Hypothesis {
    std::vector<int> tokens;  // generated tokens, EOS excluded
    double log_prob = 0.0;
    bool ended_with_eos = false;
};

inline double hypothesis_score(const Hypothesis& h, double length_penalty) {
    const double len = static_cast<double>(h.tokens.size() + (h.ended_with_eos ? 1 : 0));
    if (length_penalty == 0.0) return h.log_prob;
    return h.log_prob / std::pow(std::max(1.0, len), length_penalty);
}

/// Log-probabilities of the next token after BOS + prefix.
inline Eigen::RowVectorXd next_log_probs(const Mat& memory, const std::vector<bool>& memory_mask,
                                         const std::vector<int>& prefix, DecoderParams& p) {
    Tape t(false);
    std::vector<int> input{special::kBos};
    input.insert(input.end(), prefix.begin(), prefix.end());
    Var logits = decode_logits(t, t.constant(memory), memory_mask, input, p);
    Mat last = logits.value().bottomRows(1);
    return ad::log_softmax_rows_value(last).row(0);
}

inline Hypothesis greedy(const Mat& memory, const std::vector<bool>& mask, const GenerationConfig& cfg,
                         DecoderParams& p) {
    Hypothesis h;
    while (static_cast<int>(h.tokens.size()) < cfg.max_len) {
        const Eigen::RowVectorXd lp = next_log_probs(memory, mask, h.tokens, p);
        Eigen::Index best = 0;
        lp.maxCoeff(&best);
        h.log_prob += lp(best);
        if (best == special::kEos) {
            h.ended_with_eos = true;
            break;
        }
        h.tokens.push_back(static_cast<int>(best));
    }
    return h;
}

}  // namespace decoder_detail

/// Scored hypothesis returned by generate_scored().
struct GeneratedSummary {
    std::vector<int> tokens;
    double log_prob = 0.0;
    double score = 0.0;
};

/// Beam search over next-token log-probabilities. Each step keeps the
/// beam_width best expansions; an expansion ending in EOS leaves the beam.
/// The greedy trace is always a candidate, so the result never scores below it.
inline GeneratedSummary generate_scored(const FusedFeatures& fused, const GenerationConfig& cfg, DecoderParams& p) {
    using decoder_detail::Hypothesis;
    cfg.validate();
    const Mat memory = fused.per_token.value();
    const auto& mask = fused.mask;

    Hypothesis greedy = decoder_detail::greedy(memory, mask, cfg, p);
    std::vector<Hypothesis> finished;
    finished.push_back(greedy);

    if (cfg.beam_width > 1) {
        std::vector<Hypothesis> alive{Hypothesis{}};
        for (int step = 0; step < cfg.max_len && !alive.empty(); ++step) {
            struct Candidate {
                std::size_t parent;
                int token;
                double log_prob;
            };
            std::vector<Candidate> cands;
            for (std::size_t b = 0; b < alive.size(); ++b) {
                const Eigen::RowVectorXd lp = decoder_detail::next_log_probs(memory, mask, alive[b].tokens, p);
                for (Eigen::Index v = 0; v < lp.size(); ++v)
                    cands.push_back({b, static_cast<int>(v), alive[b].log_prob + lp(v)});
            }
            const std::size_t keep = std::min<std::size_t>(static_cast<std::size_t>(cfg.beam_width), cands.size());
            std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep), cands.end(),
                              [](const Candidate& a, const Candidate& b) {
                                  if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
                                  if (a.parent != b.parent) return a.parent < b.parent;
                                  return a.token < b.token;
                              });
            std::vector<Hypothesis> next;
            for (std::size_t c = 0; c < keep; ++c) {
                Hypothesis h = alive[cands[c].parent];
                h.log_prob = cands[c].log_prob;
                if (cands[c].token == special::kEos) {
                    h.ended_with_eos = true;
                    finished.push_back(std::move(h));
                } else {
                    h.tokens.push_back(cands[c].token);
                    if (static_cast<int>(h.tokens.size()) >= cfg.max_len)
                        finished.push_back(std::move(h));
                    else
                        next.push_back(std::move(h));
                }
            }
            alive = std::move(next);
        }
        for (auto& h : alive) finished.push_back(std::move(h));
    }

    std::size_t best = 0;
    double best_score = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < finished.size(); ++i) {
        const double s = decoder_detail::hypothesis_score(finished[i], cfg.length_penalty);
        if (s > best_score) {
            best_score = s;
            best = i;
        }
    }
    return GeneratedSummary{finished[best].tokens, finished[best].log_prob, best_score};
}

inline std::vector<int> generate(const FusedFeatures& fused, const GenerationConfig& cfg, DecoderParams& p) {
    return generate_scored(fused, cfg, p).tokens;
}

/// Length-penalized score of an arbitrary continuation under the model.
inline double sequence_score(const FusedFeatures& fused, const std::vector<int>& tokens, bool ends_with_eos,
                             double length_penalty, DecoderParams& p) {
    Tape t(false);
    std::vector<int> input{special::kBos};
    input.insert(input.end(), tokens.begin(), tokens.end());
    Var logits = decode_logits(t, t.constant(fused.per_token.value()), fused.mask, input, p);
    const Mat lp = ad::log_softmax_rows_value(logits.value());
    decoder_detail::Hypothesis h{tokens, 0.0, ends_with_eos};
    for (std::size_t i = 0; i < tokens.size(); ++i) h.log_prob += lp(static_cast<Eigen::Index>(i), tokens[i]);
    if (ends_with_eos) h.log_prob += lp(static_cast<Eigen::Index>(tokens.size()), special::kEos);
    return decoder_detail::hypothesis_score(h, length_penalty);
}

}  // namespace m3ps
