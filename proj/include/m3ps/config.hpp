#pragma once

#include "m3ps/tensor.hpp"

#include <algorithm>
#include <string>

namespace m3ps {

/// Sizes of every learnable block.
struct ModelDims {
    int vocab_size = 0;
    int d_txt = 64;
    int d_img = 64;
    int text_layers = 2;
    int text_heads = 4;
    int img_layers = 2;  // H
    int img_heads = 4;
    int dec_layers = 2;
    int dec_heads = 4;
    int fusion_heads = 4;
    int ffn_mult = 2;
    int max_text_len = 400;    // L
    int max_regions = 36;      // M
    int max_summary_len = 80;  // generation budget and target truncation
    int k_cls = 0;             // detector classes
    int n_attr = 0;            // attribute vocabulary size N
    int d_proj = 0;            // 0 means min(d_txt, d_img)
    bool text_layer_norm = true;
    bool fusion_layer_norm = false;
    double dropout = 0.1;

    int proj_dim() const { return d_proj > 0 ? d_proj : std::min(d_txt, d_img); }

    void validate() const {
        require(vocab_size > 0, "vocab_size must be positive");
        require(d_txt > 0 && d_img > 0, "model widths must be positive");
        require(text_layers >= 0 && img_layers >= 0 && dec_layers >= 0, "layer counts must be >= 0");
        require(text_heads > 0 && d_txt % text_heads == 0, "d_txt must be divisible by text_heads");
        require(dec_heads > 0 && d_txt % dec_heads == 0, "d_txt must be divisible by dec_heads");
        require(fusion_heads > 0 && d_txt % fusion_heads == 0, "d_txt must be divisible by fusion_heads");
        require(img_heads > 0 && d_img % img_heads == 0, "d_img must be divisible by img_heads");
        require(max_text_len >= 1 && max_regions >= 1 && max_summary_len >= 1, "limits must be >= 1");
        require(k_cls >= 1, "k_cls must be >= 1");
        require(n_attr >= 0, "n_attr must be >= 0");
        require(dropout >= 0.0 && dropout < 1.0, "dropout must be in [0,1)");
    }

    /// Approximate parameter count, used to refuse configurations that do not fit in memory.
    long long approx_parameters() const {
        const long long t = d_txt, i = d_img, v = vocab_size;
        const long long text = text_layers * (4 * t * t + 2 * ffn_mult * t * t);
        const long long img = img_layers * (4 * i * i + 2 * ffn_mult * i * i);
        const long long dec = dec_layers * (8 * t * t + 2 * ffn_mult * t * t);
        return v * t + text + img + dec + t * v + 3 * t * t + 3 * (t + t) * t;
    }
};

/// Desk-scale preset: small widths, two-layer towers.
inline ModelDims desk_dims() { return ModelDims{}; }

/// Widths and depths of the full-scale configuration (BART-base text side,
/// 4-layer 8-head 2048-wide image encoder).
inline ModelDims paper_dims() {
    ModelDims d;
    d.d_txt = 768;
    d.d_img = 2048;
    d.text_layers = 6;
    d.text_heads = 12;
    d.img_layers = 4;
    d.img_heads = 8;
    d.dec_layers = 6;
    d.dec_heads = 12;
    d.fusion_heads = 12;
    d.ffn_mult = 4;
    return d;
}

inline ModelDims dims_preset(const std::string& name) {
    if (name == "desk") return desk_dims();
    if (name == "paper") return paper_dims();
    throw Error("unknown model preset '" + name + "' (expected desk|paper)");
}

}  // namespace m3ps
