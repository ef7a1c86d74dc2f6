#pragma once

#include "m3ps/m3ps.hpp"

#include <random>
#include <vector>

namespace m3ps::testing {

/// Small enough for finite differences over every parameter.
inline ModelDims toy_dims() {
    ModelDims d;
    d.vocab_size = 11;
    d.d_txt = 4;
    d.d_img = 4;
    d.text_layers = 1;
    d.text_heads = 2;
    d.img_layers = 1;
    d.img_heads = 2;
    d.dec_layers = 1;
    d.dec_heads = 2;
    d.fusion_heads = 2;
    d.ffn_mult = 2;
    d.max_text_len = 6;
    d.max_regions = 3;
    d.max_summary_len = 5;
    d.k_cls = 3;
    d.n_attr = 3;
    d.dropout = 0.0;
    return d;
}

inline Mat random_mat(Rng& rng, Eigen::Index r, Eigen::Index c, double scale = 1.0) {
    std::normal_distribution<double> n(0.0, scale);
    Mat m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
    return m;
}

inline std::vector<double> random_simplex(Rng& rng, int k) {
    std::uniform_real_distribution<double> u(0.05, 1.0);
    std::vector<double> p(static_cast<std::size_t>(k));
    double s = 0;
    for (double& x : p) s += (x = u(rng));
    for (double& x : p) x /= s;
    return p;
}

inline RegionDescriptor random_region(Rng& rng, int d_img, int k_cls) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::normal_distribution<double> n(0.0, 1.0);
    RegionDescriptor r;
    r.feature.resize(static_cast<std::size_t>(d_img));
    for (double& v : r.feature) v = n(rng);
    const double xa = u(rng), xb = u(rng), ya = u(rng), yb = u(rng);
    r.box = {std::min(xa, xb), std::min(ya, yb), std::max(xa, xb), std::max(ya, yb)};
    r.class_dist = random_simplex(rng, k_cls);
    validate_region(r);
    return r;
}

inline RegionSet random_region_set(Rng& rng, int valid, int capacity, int d_img, int k_cls) {
    std::vector<RegionDescriptor> rs;
    for (int i = 0; i < valid; ++i) rs.push_back(random_region(rng, d_img, k_cls));
    return make_region_set(std::move(rs), capacity, d_img, k_cls);
}

inline std::vector<int> random_ids(Rng& rng, int n, int vocab) {
    std::uniform_int_distribution<int> u(special::kCount, vocab - 1);
    std::vector<int> v(static_cast<std::size_t>(n));
    for (int& x : v) x = u(rng);
    return v;
}

/// An Example with random content sized for `d`.
inline Example random_example(Rng& rng, const ModelDims& d, int n_tokens, int n_regions, int n_target) {
    Example e;
    e.id = "toy";
    e.source = make_source_sequence(random_ids(rng, n_tokens, d.vocab_size), d.max_text_len);
    e.target = make_target_sequence(random_ids(rng, n_target, d.vocab_size), d.max_summary_len);
    e.regions = random_region_set(rng, n_regions, d.max_regions, d.d_img, d.k_cls);
    e.attributes = Mat::Zero(1, d.n_attr);
    std::bernoulli_distribution b(0.5);
    for (Eigen::Index k = 0; k < d.n_attr; ++k) e.attributes(0, k) = b(rng) ? 1.0 : 0.0;
    return e;
}

/// Every parameter of a model, for finite-difference sweeps.
inline std::vector<std::pair<std::string, Param*>> all_params(M3PSModel& m) {
    std::vector<std::pair<std::string, Param*>> out;
    m.for_each_param([&](const std::string& n, Param& p) { out.emplace_back(n, &p); });
    return out;
}

template <typename Params>
std::vector<std::pair<std::string, Param*>> params_of(Params& p) {
    std::vector<std::pair<std::string, Param*>> out;
    p.for_each_param([&](const std::string& n, Param& q) { out.emplace_back(n, &q); });
    return out;
}

/// Synthetic records for harness tests.
inline SynthCorpus small_corpus(int n, std::uint64_t seed = 1, std::vector<int> visual_only = {}) {
    SynthSpec s;
    s.n_samples = n;
    s.seed = seed;
    s.visual_only_concepts = std::move(visual_only);
    return generate_synthetic_dataset(s, {});
}

/// A tiny training config that finishes in well under a second per step.
inline TrainConfig tiny_config(int steps = 3) {
    TrainConfig c;
    c.d_txt = 8;
    c.d_img = 64;
    c.text_layers = 1;
    c.img_layers = 1;
    c.dec_layers = 1;
    c.text_heads = c.img_heads = c.dec_heads = c.fusion_heads = 2;
    c.batch_size = 4;
    c.steps = steps;
    c.max_summary_len = 40;
    return c;
}

}  // namespace m3ps::testing
