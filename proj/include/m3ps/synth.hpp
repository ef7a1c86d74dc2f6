#pragma once

#include "m3ps/datamodel.hpp"

#include <algorithm>
#include <random>
#include <string>
#include <vector>

namespace m3ps {

class ConfigError : public Error {
public:
    using Error::Error;
};

/// Parameters of the synthetic multi-modal corpus.
///
/// Every concept owns a disjoint token template and a region-feature
/// centroid. Concepts listed in `visual_only_concepts` are shown in the image
/// and named in the summary but never mentioned in the description.
struct SynthSpec {
    int n_concepts = 8;
    int n_samples = 64;
    int vocab_size = 64;
    int d_img = 64;
    std::vector<int> visual_only_concepts;
    double noise_std = 0.1;
    std::uint64_t seed = 1;

    double concept_prob = 0.35;
    int template_len = 2;
    int noise_tokens_min = 6;
    int noise_tokens_max = 12;
};

struct SynthCorpus {
    std::vector<ProductRecord> records;
    AttributeVocabulary vocab;
    std::vector<std::vector<std::string>> templates;  // per concept
    std::vector<std::vector<int>> concepts;           // per record, ascending
};

namespace synth_detail {

inline const std::vector<std::string>& filler_words() {
    static const std::vector<std::string> w{"this", "item", "has", "and", "."};
    return w;
}

/// Deterministic consonant-vowel word for an index; distinct per index.
inline std::string word(int index) {
    static const std::string consonants = "bdfgklmnprstvz";
    static const std::string vowels = "aeiou";
    const int syllables = static_cast<int>(consonants.size() * vowels.size());
    std::string out;
    int i = index;
    int n = 0;
    do {
        const int s = i % syllables;
        out.push_back(consonants[static_cast<std::size_t>(s / static_cast<int>(vowels.size()))]);
        out.push_back(vowels[static_cast<std::size_t>(s % static_cast<int>(vowels.size()))]);
        i /= syllables;
        ++n;
    } while (i > 0 || n < 2);
    return out;
}

}  // namespace synth_detail

inline void validate(const SynthSpec& s) {
    if (s.n_concepts < 1) throw ConfigError("n_concepts must be >= 1");
    if (s.n_samples <= 0) throw ConfigError("n_samples must be > 0");
    if (s.d_img < 1) throw ConfigError("d_img must be >= 1");
    if (s.template_len < 1) throw ConfigError("template_len must be >= 1");
    if (s.noise_std < 0.0) throw ConfigError("noise_std must be >= 0");
    if (s.noise_tokens_min < 0 || s.noise_tokens_max < s.noise_tokens_min)
        throw ConfigError("noise token range is invalid");
    if (!(s.concept_prob > 0.0 && s.concept_prob <= 1.0)) throw ConfigError("concept_prob must be in (0,1]");
    for (int k : s.visual_only_concepts)
        if (k < 0 || k >= s.n_concepts) throw ConfigError("visual_only_concepts must lie in [0, n_concepts)");
    const int needed = s.n_concepts * s.template_len + static_cast<int>(synth_detail::filler_words().size()) + 1;
    if (s.vocab_size < needed)
        throw ConfigError("vocab_size " + std::to_string(s.vocab_size) + " cannot host " +
                          std::to_string(s.n_concepts) + " disjoint templates plus fillers and noise (need >= " +
                          std::to_string(needed) + ")");
}

inline SynthCorpus generate_synthetic_dataset(const SynthSpec& spec, const Limits& limits = {}) {
    validate(spec);
    const int n_template_words = spec.n_concepts * spec.template_len;
    const int n_noise = spec.vocab_size - n_template_words - static_cast<int>(synth_detail::filler_words().size());

    SynthCorpus corpus;
    for (int k = 0; k < spec.n_concepts; ++k) {
        std::vector<std::string> t;
        for (int w = 0; w < spec.template_len; ++w) t.push_back(synth_detail::word(k * spec.template_len + w));
        corpus.templates.push_back(std::move(t));
    }
    std::vector<std::string> noise_pool;
    for (int w = 0; w < n_noise; ++w) noise_pool.push_back(synth_detail::word(n_template_words + w));

    std::vector<std::string> attr_names;
    for (const auto& t : corpus.templates) attr_names.push_back(t.front());
    corpus.vocab = AttributeVocabulary(attr_names);

    // Centroids use their own stream so they do not depend on n_samples.
    Rng centroid_rng(spec.seed ^ 0x9E3779B97F4A7C15ULL);
    std::normal_distribution<double> unit(0.0, 1.0);
    std::vector<std::vector<double>> centroids(static_cast<std::size_t>(spec.n_concepts));
    for (auto& c : centroids) {
        c.resize(static_cast<std::size_t>(spec.d_img));
        for (double& v : c) v = unit(centroid_rng);
    }

    std::vector<bool> visual_only(static_cast<std::size_t>(spec.n_concepts), false);
    for (int k : spec.visual_only_concepts) visual_only[static_cast<std::size_t>(k)] = true;

    Rng rng(spec.seed);
    std::bernoulli_distribution draw(spec.concept_prob);
    std::uniform_int_distribution<int> pick_concept(0, spec.n_concepts - 1);
    std::uniform_int_distribution<int> pick_noise(0, n_noise - 1);
    std::uniform_int_distribution<int> noise_count(spec.noise_tokens_min, spec.noise_tokens_max);
    std::uniform_real_distribution<double> coord(0.0, 1.0);
    std::normal_distribution<double> feature_noise(0.0, 1.0);

    const auto& fill = synth_detail::filler_words();
    const int k_cls = spec.n_concepts;
    for (int i = 0; i < spec.n_samples; ++i) {
        std::vector<int> present;
        for (int k = 0; k < spec.n_concepts; ++k)
            if (draw(rng)) present.push_back(k);
        if (present.empty()) present.push_back(pick_concept(rng));

        std::vector<RegionDescriptor> regions;
        for (int k : present) {
            RegionDescriptor r;
            r.feature = centroids[static_cast<std::size_t>(k)];
            for (double& v : r.feature) v += spec.noise_std * feature_noise(rng);
            double xa = coord(rng), xb = coord(rng), ya = coord(rng), yb = coord(rng);
            r.box = {std::min(xa, xb), std::min(ya, yb), std::max(xa, xb), std::max(ya, yb)};
            r.class_dist.assign(static_cast<std::size_t>(k_cls), k_cls > 1 ? 0.1 / (k_cls - 1) : 0.0);
            r.class_dist[static_cast<std::size_t>(k)] = k_cls > 1 ? 0.9 : 1.0;
            validate_region(r);
            regions.push_back(std::move(r));
        }

        std::vector<std::vector<std::string>> chunks;
        for (int k : present)
            if (!visual_only[static_cast<std::size_t>(k)]) chunks.push_back(corpus.templates[static_cast<std::size_t>(k)]);
        const int n_noise_tokens = noise_count(rng);
        for (int w = 0; w < n_noise_tokens; ++w) chunks.push_back({noise_pool[static_cast<std::size_t>(pick_noise(rng))]});
        std::shuffle(chunks.begin(), chunks.end(), rng);
        std::vector<std::string> desc;
        for (auto& c : chunks) desc.insert(desc.end(), c.begin(), c.end());

        std::vector<std::string> title{noise_pool[static_cast<std::size_t>(pick_noise(rng))],
                                       noise_pool[static_cast<std::size_t>(pick_noise(rng))]};

        std::vector<std::string> summary{fill[0], fill[1], fill[2]};
        for (std::size_t p = 0; p < present.size(); ++p) {
            if (p > 0) summary.push_back(fill[3]);
            const auto& t = corpus.templates[static_cast<std::size_t>(present[p])];
            summary.insert(summary.end(), t.begin(), t.end());
        }
        summary.push_back(fill[4]);

        ProductRecord rec;
        rec.id = "synth-" + std::to_string(spec.seed) + "-" + std::to_string(i);
        rec.title = join(title, TokenizerMode::Word);
        rec.description = join(desc, TokenizerMode::Word);
        rec.summary = join(summary, TokenizerMode::Word);
        rec.text_tokens = source_tokens(rec.title, rec.description, limits);
        rec.region_set = make_region_set(std::move(regions), limits.max_regions, spec.d_img, k_cls);
        std::vector<std::string> attrs;
        for (int k : present) attrs.push_back(attr_names[static_cast<std::size_t>(k)]);
        rec.attributes = attributes_to_multihot(attrs, corpus.vocab);
        corpus.records.push_back(std::move(rec));
        corpus.concepts.push_back(std::move(present));
    }
    return corpus;
}

}  // namespace m3ps
