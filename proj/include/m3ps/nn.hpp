#pragma once

#include "m3ps/autodiff.hpp"

#include <string>
#include <vector>

namespace m3ps::nn {

using ad::Tape;
using ad::Var;

/// y = x·W + b with W stored as in×out.
struct Linear {
    Param weight;
    Param bias;
    bool has_bias = true;

    Linear() = default;
    Linear(int in, int out, bool with_bias = true)
        : weight(in, out), bias(1, with_bias ? out : 0), has_bias(with_bias) {}

    void init(Rng& rng) {
        init::xavier(weight, rng);
        if (has_bias) init::constant(bias, 0.0);
    }

    Var operator()(Tape& t, Var x) {
        Var y = ad::matmul(x, t.param(weight));
        return has_bias ? ad::add_row(y, t.param(bias)) : y;
    }

    int in_dim() const { return static_cast<int>(weight.rows()); }
    int out_dim() const { return static_cast<int>(weight.cols()); }

    template <typename F>
    void for_each_param(const std::string& prefix, F&& f) {
        f(prefix + ".weight", weight);
        if (has_bias) f(prefix + ".bias", bias);
    }
};

struct LayerNorm {
    Param gamma;
    Param beta;

    LayerNorm() = default;
    explicit LayerNorm(int d) : gamma(Mat::Ones(1, d)), beta(1, d) {}

    Var operator()(Tape& t, Var x) { return ad::layer_norm_rows(x, t.param(gamma), t.param(beta)); }

    template <typename F>
    void for_each_param(const std::string& prefix, F&& f) {
        f(prefix + ".gamma", gamma);
        f(prefix + ".beta", beta);
    }
};

/// Scaled dot-product attention split over `heads` column blocks of q/k/v.
/// Returns the concatenated per-head outputs (rows of q × cols of v).
inline Var attend(Var q, Var k, Var v, int heads, const std::vector<bool>& key_mask, bool causal) {
    require(heads >= 1, "attention needs at least one head");
    require_shape(q.cols() == k.cols() && k.rows() == v.rows(), "attention: q/k/v shapes");
    require_shape(q.cols() % heads == 0 && v.cols() % heads == 0, "attention: dims not divisible by heads");
    const Eigen::Index dk = q.cols() / heads;
    const Eigen::Index dv = v.cols() / heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dk));
    std::vector<Var> outs;
    outs.reserve(static_cast<std::size_t>(heads));
    for (int h = 0; h < heads; ++h) {
        Var qh = heads == 1 ? q : ad::slice_cols(q, h * dk, dk);
        Var kh = heads == 1 ? k : ad::slice_cols(k, h * dk, dk);
        Var vh = heads == 1 ? v : ad::slice_cols(v, h * dv, dv);
        Var scores = ad::scale(ad::matmul_nt(qh, kh), inv_sqrt);
        Var probs = ad::masked_softmax_rows(scores, key_mask, causal);
        outs.push_back(ad::matmul(probs, vh));
    }
    return heads == 1 ? outs.front() : ad::concat_cols(outs);
}

/// Standard multi-head attention with input and output projections.
struct MultiHeadAttention {
    Linear q, k, v, o;
    int heads = 1;

    MultiHeadAttention() = default;
    MultiHeadAttention(int d_model, int n_heads, int d_kv_source = 0)
        : q(d_model, d_model),
          k(d_kv_source > 0 ? d_kv_source : d_model, d_model),
          v(d_kv_source > 0 ? d_kv_source : d_model, d_model),
          o(d_model, d_model),
          heads(n_heads) {
        require(n_heads >= 1 && d_model % n_heads == 0, "d_model must be divisible by the head count");
    }

    void init(Rng& rng) {
        q.init(rng);
        k.init(rng);
        v.init(rng);
        o.init(rng);
    }

    Var operator()(Tape& t, Var query_src, Var kv_src, const std::vector<bool>& key_mask, bool causal = false) {
        Var ctx = attend(q(t, query_src), k(t, kv_src), v(t, kv_src), heads, key_mask, causal);
        return o(t, ctx);
    }

    template <typename F>
    void for_each_param(const std::string& prefix, F&& f) {
        q.for_each_param(prefix + ".q", f);
        k.for_each_param(prefix + ".k", f);
        v.for_each_param(prefix + ".v", f);
        o.for_each_param(prefix + ".o", f);
    }
};

/// Position-wise two-layer network with ReLU.
struct FeedForward {
    Linear in, out;

    FeedForward() = default;
    FeedForward(int d_model, int d_hidden) : in(d_model, d_hidden), out(d_hidden, d_model) {}
    FeedForward(int d_in, int d_hidden, int d_out) : in(d_in, d_hidden), out(d_hidden, d_out) {}

    void init(Rng& rng) {
        in.init(rng);
        out.init(rng);
    }

    Var operator()(Tape& t, Var x) { return out(t, ad::relu(in(t, x))); }

    template <typename F>
    void for_each_param(const std::string& prefix, F&& f) {
        in.for_each_param(prefix + ".in", f);
        out.for_each_param(prefix + ".out", f);
    }
};

}  // namespace m3ps::nn
