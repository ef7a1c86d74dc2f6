#pragma once

#include "m3ps/objectives.hpp"

#include <string>
#include <vector>

namespace m3ps {

/// Every learnable tensor: encoders, fusion, decoder and the task heads.
struct M3PSModel {
    ModelDims dims;
    EncoderParams encoder;
    FusionParams fusion;
    DecoderParams decoder;
    LossHeads heads;

    M3PSModel() = default;
    explicit M3PSModel(const ModelDims& d)
        : dims(d), encoder(d), fusion(d), decoder(d, encoder.token_embedding), heads(d) {
        d.validate();
    }

    M3PSModel(const M3PSModel& o)
        : dims(o.dims), encoder(o.encoder), fusion(o.fusion), decoder(o.decoder), heads(o.heads) {
        decoder.embedding = &encoder.token_embedding;
    }

    M3PSModel& operator=(const M3PSModel& o) {
        if (this != &o) {
            dims = o.dims;
            encoder = o.encoder;
            fusion = o.fusion;
            decoder = o.decoder;
            heads = o.heads;
            decoder.embedding = &encoder.token_embedding;
        }
        return *this;
    }

    void init(std::uint64_t seed, double tau = 0.07) {
        Rng rng(seed);
        encoder.init(rng);
        fusion.init(rng);
        decoder.init(rng);
        heads.init(rng, tau);
    }

    /// Forces the forget gate shut: F = σ(−10⁶) = 0, so Z' ignores the image.
    void saturate_gate(double bias = -1e6) {
        fusion.gate.bias.value.setConstant(bias);
        fusion.gate.weight.value.setZero();
    }

    template <typename F>
    void for_each_param(F&& f) {
        encoder.for_each_param(f);
        fusion.for_each_param(f);
        decoder.for_each_param(f);
        heads.for_each_param(f);
    }

    void zero_grad() {
        for_each_param([](const std::string&, Param& p) { p.zero_grad(); });
    }

    std::size_t parameter_count() {
        std::size_t n = 0;
        for_each_param([&](const std::string&, Param& p) { n += static_cast<std::size_t>(p.value.size()); });
        return n;
    }
};

/// One record converted to model inputs.
struct Example {
    std::string id;
    TokenSequence source;
    std::vector<int> target;  // BOS y_1..y_T EOS
    RegionSet regions;
    Mat attributes;  // 1 × N
};

inline Example make_example(const ProductRecord& r, const TokenVocabulary& vocab, const ModelDims& dims,
                            TokenizerMode mode) {
    Example e;
    e.id = r.id;
    auto src = vocab.encode(r.text_tokens);
    if (static_cast<int>(src.size()) > dims.max_text_len) src.resize(static_cast<std::size_t>(dims.max_text_len));
    e.source = make_source_sequence(src, dims.max_text_len);
    e.target = make_target_sequence(vocab.encode(tokenize(r.summary, mode)), dims.max_summary_len);
    e.regions = r.region_set;
    require(e.regions.capacity <= dims.max_regions, "record region capacity exceeds the model's M");
    e.attributes = Mat::Zero(1, static_cast<Eigen::Index>(r.attributes.size()));
    for (std::size_t k = 0; k < r.attributes.size(); ++k) e.attributes(0, static_cast<Eigen::Index>(k)) = r.attributes[k];
    return e;
}

/// Intermediate features of one forward pass.
struct SampleForward {
    TextFeatures text;
    ImageFeatures image;
    FusedFeatures fused;
    MaskPlan plan;
};

inline SampleForward forward_sample(Tape& t, M3PSModel& m, const Example& ex, const MaskPlan& plan,
                                    double dropout) {
    SampleForward f;
    f.plan = plan;
    f.text = encode_text(t, ex.source, m.encoder, dropout);
    const auto flags = plan.as_flags(ex.regions.capacity);
    f.image = encode_image(t, ex.regions, m.encoder, plan.masked_indices.empty() ? nullptr : &flags, dropout);
    f.fused = fuse(t, f.text, f.image, m.fusion, dropout);
    return f;
}

struct BatchOptions {
    TaskWeights weights;
    double mask_rate = 0.15;
    double dropout = 0.0;
};

struct BatchLoss {
    Var objective;   // differentiable total; tasks with λ = 0 are not attached
    LossBreakdown parts;
    Var ps, mrm, cmm, hd, att;
};

/// Per-sample losses averaged over the batch, plus the in-batch contrastive loss.
/// Region masking runs only when λ1 > 0 (without MRM there is nothing to recover).
inline BatchLoss batch_loss(Tape& t, M3PSModel& m, std::span<const Example* const> batch, const BatchOptions& opt,
                            Rng& rng) {
    require(!batch.empty(), "batch must be nonempty");
    opt.weights.validate();
    const double inv_b = 1.0 / static_cast<double>(batch.size());
    std::vector<Var> ps, mrm, hd, att, g_cls, z_cls;
    for (const Example* ex : batch) {
        MaskPlan plan;
        if (opt.weights.lambda1 > 0.0 && opt.mask_rate > 0.0) plan = sample_mask_regions(ex->regions, opt.mask_rate, rng);
        SampleForward f = forward_sample(t, m, *ex, plan, opt.dropout);

        std::vector<int> input(ex->target.begin(), ex->target.end() - 1);
        std::vector<int> gold(ex->target.begin() + 1, ex->target.end());
        ps.push_back(loss_ps(forward_teacher_forced(t, f.fused, input, m.decoder), gold));
        mrm.push_back(loss_mrm(t, f.image, plan, ex->regions, m.heads));
        if (ex->regions.valid_count() > 0)
            hd.push_back(loss_hd(t, f.image, f.text, m.heads));
        if (m.dims.n_attr > 0)
            att.push_back(loss_att(predict_attributes(t, f.fused, f.text, m.heads), ex->attributes));
        g_cls.push_back(f.image.cls());
        z_cls.push_back(f.text.cls());
    }
    auto mean = [&](const std::vector<Var>& xs) {
        if (xs.empty()) return t.constant(Mat::Zero(1, 1));
        Var s = xs.front();
        for (std::size_t i = 1; i < xs.size(); ++i) s = ad::add(s, xs[i]);
        return ad::scale(s, inv_b);
    };
    BatchLoss out;
    out.ps = mean(ps);
    out.mrm = mean(mrm);
    out.hd = mean(hd);
    out.att = mean(att);
    out.cmm = loss_cmm(t, ad::concat_rows(g_cls), ad::concat_rows(z_cls), m.heads);
    out.parts = total_loss(out.ps.scalar(), out.mrm.scalar(), out.cmm.scalar(), out.hd.scalar(), out.att.scalar(),
                           opt.weights);

    const auto& w = opt.weights;
    Var obj = out.ps;
    if (w.lambda1 > 0.0) obj = ad::add(obj, ad::scale(out.mrm, w.lambda1));
    if (w.lambda2 > 0.0) obj = ad::add(obj, ad::scale(out.cmm, w.lambda2));
    if (w.lambda3 > 0.0) obj = ad::add(obj, ad::scale(ad::add(out.hd, out.att), w.lambda3));
    out.objective = obj;
    return out;
}

}  // namespace m3ps
