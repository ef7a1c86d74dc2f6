#pragma once

#include "m3ps/config.hpp"
#include "m3ps/datamodel.hpp"
#include "m3ps/nn.hpp"
#include "m3ps/tokens.hpp"

#include <string>
#include <vector>

namespace m3ps {

using ad::Tape;
using ad::Var;

/// Z: one row per sequence position (tokens, then [CLS], then padding).
struct TextFeatures {
    Var per_token;
    std::vector<bool> mask;
    int cls_position = -1;

    Var cls() const { return ad::slice_rows(per_token, cls_position, 1); }

    /// Valid rows other than [CLS].
    std::vector<bool> token_mask() const {
        auto m = mask;
        if (cls_position >= 0) m[static_cast<std::size_t>(cls_position)] = false;
        return m;
    }
};

/// G: row 0 is g_cls, rows 1..M are regions.
struct ImageFeatures {
    Var per_region;
    std::vector<bool> mask;

    Var cls() const { return ad::slice_rows(per_region, 0, 1); }

    std::vector<bool> region_mask() const {
        auto m = mask;
        m[0] = false;
        return m;
    }
};

struct TextLayer {
    nn::LayerNorm ln_attn, ln_ffn;
    nn::MultiHeadAttention attn;
    nn::FeedForward ffn;
};

struct ImageLayer {
    nn::MultiHeadAttention attn;
    nn::FeedForward ffn;
};

struct EncoderParams {
    // text tower
    Param token_embedding;  // shared with the decoder
    Param text_positions;
    std::vector<TextLayer> text_layers;
    nn::LayerNorm text_final;
    bool text_layer_norm = true;

    // image tower
    Param box_weight;      // W_e, 5 x d_img
    Param box_bias;        // B_e, 1 x d_img
    Param region_ids;      // e_reg table, M x d_img
    Param image_cls;       // o_cls, 1 x d_img
    std::vector<ImageLayer> image_layers;

    EncoderParams() = default;
    explicit EncoderParams(const ModelDims& d)
        : token_embedding(d.vocab_size, d.d_txt),
          text_positions(d.max_text_len + 1, d.d_txt),
          text_final(d.d_txt),
          text_layer_norm(d.text_layer_norm),
          box_weight(5, d.d_img),
          box_bias(1, d.d_img),
          region_ids(d.max_regions, d.d_img),
          image_cls(1, d.d_img) {
        for (int l = 0; l < d.text_layers; ++l)
            text_layers.push_back(TextLayer{nn::LayerNorm(d.d_txt), nn::LayerNorm(d.d_txt),
                                            nn::MultiHeadAttention(d.d_txt, d.text_heads),
                                            nn::FeedForward(d.d_txt, d.ffn_mult * d.d_txt)});
        for (int l = 0; l < d.img_layers; ++l)
            image_layers.push_back(ImageLayer{nn::MultiHeadAttention(d.d_img, d.img_heads),
                                              nn::FeedForward(d.d_img, d.ffn_mult * d.d_img)});
    }

    void init(Rng& rng) {
        init::normal(token_embedding, rng, 0.1);
        init::normal(text_positions, rng, 0.02);
        for (auto& l : text_layers) {
            l.attn.init(rng);
            l.ffn.init(rng);
        }
        init::xavier(box_weight, rng);
        init::constant(box_bias, 0.0);
        init::normal(region_ids, rng, 0.02);
        init::normal(image_cls, rng, 0.1);
        // The image tower has no normalization, so its residual branches start small.
        for (auto& l : image_layers) {
            l.attn.init(rng);
            l.ffn.init(rng);
            l.attn.o.weight.value *= 0.5;
            l.ffn.out.weight.value *= 0.5;
        }
    }

    int d_txt() const { return static_cast<int>(token_embedding.cols()); }
    int d_img() const { return static_cast<int>(box_weight.cols()); }
    int max_text_len() const { return static_cast<int>(text_positions.rows()) - 1; }
    int max_regions() const { return static_cast<int>(region_ids.rows()); }

    template <typename F>
    void for_each_param(F&& f) {
        f("text.token_embedding", token_embedding);
        f("text.positions", text_positions);
        for (std::size_t l = 0; l < text_layers.size(); ++l) {
            const std::string p = "text.layer" + std::to_string(l);
            text_layers[l].ln_attn.for_each_param(p + ".ln_attn", f);
            text_layers[l].attn.for_each_param(p + ".attn", f);
            text_layers[l].ln_ffn.for_each_param(p + ".ln_ffn", f);
            text_layers[l].ffn.for_each_param(p + ".ffn", f);
        }
        text_final.for_each_param("text.final_ln", f);
        f("image.box_weight", box_weight);
        f("image.box_bias", box_bias);
        f("image.region_ids", region_ids);
        f("image.cls", image_cls);
        for (std::size_t l = 0; l < image_layers.size(); ++l) {
            const std::string p = "image.layer" + std::to_string(l);
            image_layers[l].attn.for_each_param(p + ".attn", f);
            image_layers[l].ffn.for_each_param(p + ".ffn", f);
        }
    }
};

/// Bidirectional transformer over the valid positions of `seq`.
inline TextFeatures encode_text(Tape& t, const TokenSequence& seq, EncoderParams& p, double dropout = 0.0) {
    require(seq.valid_count() <= p.max_text_len() + 1, "sequence longer than L + [CLS]; truncate upstream");
    require(seq.cls_position >= 0 && seq.ids[static_cast<std::size_t>(seq.cls_position)] == special::kCls,
            "sequence must carry a trailing [CLS]");
    require_shape(seq.ids.size() == seq.mask.size(), "ids/mask length mismatch");
    for (int id : seq.ids)
        require(id >= 0 && id < p.token_embedding.rows(), "token id outside the vocabulary");

    const int n = seq.length();
    std::vector<int> positions(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) positions[static_cast<std::size_t>(i)] = std::min(i, p.max_text_len());
    Var x = ad::add(ad::select_rows(t.param(p.token_embedding), seq.ids),
                    ad::select_rows(t.param(p.text_positions), positions));
    for (auto& layer : p.text_layers) {
        if (p.text_layer_norm) {
            Var h = layer.ln_attn(t, x);
            x = ad::add(x, layer.attn(t, h, h, seq.mask));
            x = ad::add(x, layer.ffn(t, layer.ln_ffn(t, x)));
        } else {
            x = ad::add(x, layer.attn(t, x, x, seq.mask));
            x = ad::add(x, layer.ffn(t, x));
        }
    }
    if (p.text_layer_norm) x = p.text_final(t, x);
    x = ad::dropout(x, dropout);
    return TextFeatures{x, seq.mask, seq.cls_position};
}

/// o_i = v_i + [c_i, s_i]·W_e + B_e + e_reg(i) for a single region.
inline Eigen::RowVectorXd embed_region(const RegionDescriptor& r, int region_index, const EncoderParams& p) {
    require(region_index >= 0 && region_index < p.max_regions(), "region index outside [0, M)");
    require_shape(static_cast<int>(r.feature.size()) == p.d_img(), "region feature dimension != d_img");
    Eigen::RowVectorXd geom(5);
    geom << r.box[0], r.box[1], r.box[2], r.box[3], r.area;
    Eigen::RowVectorXd v = Eigen::Map<const Eigen::RowVectorXd>(r.feature.data(), p.d_img());
    return v + geom * p.box_weight.value + p.box_bias.value.row(0) + p.region_ids.value.row(region_index);
}

/// Region representations O (without o_cls). Padded slots are zero rows.
/// Slots flagged in `zero_feature` keep box and region-id terms but drop v_i.
inline Var embed_regions(Tape& t, const RegionSet& rs, EncoderParams& p,
                         const std::vector<bool>* zero_feature = nullptr) {
    const int m = rs.capacity;
    require(m <= p.max_regions(), "region set capacity exceeds M");
    require_shape(rs.feature_dim() == p.d_img(), "region feature dimension != d_img");
    Mat feats = Mat::Zero(m, p.d_img());
    Mat geom = Mat::Zero(m, 5);
    Mat keep = Mat::Zero(m, p.d_img());
    for (int i = 0; i < m; ++i) {
        if (!rs.valid[static_cast<std::size_t>(i)]) continue;
        const auto& r = rs.slots[static_cast<std::size_t>(i)];
        if (!(zero_feature && (*zero_feature)[static_cast<std::size_t>(i)]))
            feats.row(i) = Eigen::Map<const Eigen::RowVectorXd>(r.feature.data(), p.d_img());
        geom.row(i) << r.box[0], r.box[1], r.box[2], r.box[3], r.area;
        keep.row(i).setOnes();
    }
    std::vector<int> ids(static_cast<std::size_t>(m));
    for (int i = 0; i < m; ++i) ids[static_cast<std::size_t>(i)] = i;
    Var box = ad::add_row(ad::matmul(t.constant(std::move(geom)), t.param(p.box_weight)), t.param(p.box_bias));
    Var o = ad::add(ad::add(t.constant(std::move(feats)), box), ad::select_rows(t.param(p.region_ids), ids));
    return ad::mul(o, t.constant(std::move(keep)));
}

/// G = H layers of residual MHA then residual FFN over {o_cls, o_1..o_M}.
/// Attention sees o_cls and the valid regions only.
inline ImageFeatures encode_image(Tape& t, const RegionSet& rs, EncoderParams& p,
                                  const std::vector<bool>* zero_feature = nullptr, double dropout = 0.0) {
    Var o = embed_regions(t, rs, p, zero_feature);
    const Var rows[] = {t.param(p.image_cls), o};
    Var u = ad::concat_rows(std::span<const Var>(rows));
    std::vector<bool> mask;
    mask.reserve(rs.valid.size() + 1);
    mask.push_back(true);
    mask.insert(mask.end(), rs.valid.begin(), rs.valid.end());
    for (auto& layer : p.image_layers) {
        Var s = ad::add(layer.attn(t, u, u, mask), u);
        u = ad::add(layer.ffn(t, s), s);
    }
    u = ad::dropout(u, dropout);
    return ImageFeatures{u, std::move(mask)};
}

}  // namespace m3ps
