#pragma once

#include "m3ps/encoders.hpp"

namespace m3ps {

struct FusionParams {
    nn::Linear query;   // W_q: d_txt -> d_a
    nn::Linear key;     // W_k: d_img -> d_a
    nn::Linear value;   // W_v: d_img -> d_a
    nn::Linear gate;    // W_f, B_f: d_txt + d_a -> d_a
    nn::Linear output;  // W_z', B_z': d_txt + d_a -> d_txt
    nn::LayerNorm norm;
    int heads = 1;
    bool layer_norm = false;

    FusionParams() = default;
    FusionParams(int d_txt, int d_img, int n_heads, bool with_layer_norm = false, int d_a = 0)
        : query(d_txt, d_a > 0 ? d_a : d_txt, false),
          key(d_img, d_a > 0 ? d_a : d_txt, false),
          value(d_img, d_a > 0 ? d_a : d_txt, false),
          gate(d_txt + (d_a > 0 ? d_a : d_txt), d_a > 0 ? d_a : d_txt),
          output(d_txt + (d_a > 0 ? d_a : d_txt), d_txt),
          norm(d_txt),
          heads(n_heads),
          layer_norm(with_layer_norm) {
        require(n_heads >= 1 && query.out_dim() % n_heads == 0, "d_a must be divisible by the fusion head count");
    }

    explicit FusionParams(const ModelDims& d) : FusionParams(d.d_txt, d.d_img, d.fusion_heads, d.fusion_layer_norm) {}

    void init(Rng& rng) {
        query.init(rng);
        key.init(rng);
        value.init(rng);
        gate.init(rng);
        output.init(rng);
    }

    int d_txt() const { return output.out_dim(); }
    int d_a() const { return query.out_dim(); }

    template <typename F>
    void for_each_param(F&& f) {
        query.for_each_param("fusion.query", f);
        key.for_each_param("fusion.key", f);
        value.for_each_param("fusion.value", f);
        gate.for_each_param("fusion.gate", f);
        output.for_each_param("fusion.output", f);
        if (layer_norm) norm.for_each_param("fusion.norm", f);
    }
};

/// Z': same rows and mask as the text features it was built from.
struct FusedFeatures {
    Var per_token;
    std::vector<bool> mask;
    int cls_position = -1;
};

/// Fusion output together with the cross-attention context C and gate F.
struct FusionTrace {
    FusedFeatures fused;
    Var context;
    Var gate;
};

inline FusionTrace fuse_traced(Tape& t, const TextFeatures& text, const ImageFeatures& image, FusionParams& p,
                               double dropout = 0.0) {
    require_shape(static_cast<Eigen::Index>(text.mask.size()) == text.per_token.rows(), "text mask length");
    require_shape(static_cast<Eigen::Index>(image.mask.size()) == image.per_region.rows(), "image mask length");
    require(std::find(image.mask.begin(), image.mask.end(), true) != image.mask.end(),
            "fusion needs at least one valid image row");
    Var z = text.per_token;
    Var q = p.query(t, z);
    Var k = p.key(t, image.per_region);
    Var v = p.value(t, image.per_region);
    Var c = nn::attend(q, k, v, p.heads, image.mask, false);
    Var zc = ad::concat_cols(z, c);
    Var f = ad::sigmoid(p.gate(t, zc));
    Var out = p.output(t, ad::concat_cols(z, ad::mul(f, c)));
    if (p.layer_norm) out = p.norm(t, out);
    out = ad::dropout(out, dropout);
    return FusionTrace{FusedFeatures{out, text.mask, text.cls_position}, c, f};
}

/// Z' = [Z, F ⊗ C]·W_z' + B_z' with F = σ([Z, C]·W_f + B_f), C = CMA(ZW_q, GW_k, GW_v).
inline FusedFeatures fuse(Tape& t, const TextFeatures& text, const ImageFeatures& image, FusionParams& p,
                          double dropout = 0.0) {
    return fuse_traced(t, text, image, p, dropout).fused;
}

}  // namespace m3ps
