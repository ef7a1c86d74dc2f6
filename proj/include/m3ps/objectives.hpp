#pragma once

#include "m3ps/decoder.hpp"

#include <cmath>
#include <limits>
#include <string>
#include <vector>

namespace m3ps {

/// Loss weights of the auxiliary tasks.
struct TaskWeights {
    double lambda1 = 0.8;   // masked region modeling
    double lambda2 = 0.05;  // coarse-grained contrastive matching
    double lambda3 = 0.3;   // fine-grained matching (Hausdorff + attributes)

    void validate() const {
        for (double l : {lambda1, lambda2, lambda3})
            require(std::isfinite(l) && l >= 0.0, "task weights must be finite and non-negative");
    }
    bool operator==(const TaskWeights&) const = default;
};

struct LossBreakdown {
    double ps = 0, mrm = 0, cmm = 0, hd = 0, att = 0, fmm = 0, total = 0;
    bool operator==(const LossBreakdown&) const = default;
};

/// Raised when a task loss is not finite.
class TrainingAbort : public Error {
public:
    TrainingAbort(std::string task, const std::string& what) : Error(what), task_(std::move(task)) {}
    const std::string& task() const { return task_; }

private:
    std::string task_;
};

/// fmm = hd + att; total = ps + λ1·mrm + λ2·cmm + λ3·fmm.
inline LossBreakdown total_loss(double ps, double mrm, double cmm, double hd, double att, const TaskWeights& w) {
    const std::pair<const char*, double> parts[] = {{"ps", ps}, {"mrm", mrm}, {"cmm", cmm}, {"hd", hd}, {"att", att}};
    for (const auto& [name, v] : parts)
        if (!std::isfinite(v)) throw TrainingAbort(name, std::string("non-finite loss in task '") + name + "'");
    LossBreakdown b;
    b.ps = ps;
    b.mrm = mrm;
    b.cmm = cmm;
    b.hd = hd;
    b.att = att;
    b.fmm = hd + att;
    b.total = ps + w.lambda1 * mrm + w.lambda2 * cmm + w.lambda3 * b.fmm;
    return b;
}

/// Learnable heads of the auxiliary tasks.
struct LossHeads {
    nn::FeedForward mrm_head;  // d_img -> K_cls
    nn::FeedForward hd_map;    // d_img -> d_txt
    nn::Linear cmm_image;      // W_g: d_img -> d_proj
    nn::Linear cmm_text;       // W_z: d_txt -> d_proj
    Param log_tau;             // τ = exp(log_tau)
    nn::Linear att_out;        // W_y^(1), B_y: hidden -> N
    nn::Linear att_fused;      // W_y^(2)
    nn::Linear att_text;       // W_y^(3)
    nn::Linear att_cls;        // W_y^(4)

    LossHeads() = default;
    explicit LossHeads(const ModelDims& d)
        : mrm_head(d.d_img, d.d_img, d.k_cls),
          hd_map(d.d_img, d.d_txt, d.d_txt),
          cmm_image(d.d_img, d.proj_dim(), false),
          cmm_text(d.d_txt, d.proj_dim(), false),
          log_tau(1, 1),
          att_out(d.d_txt, d.n_attr),
          att_fused(d.d_txt, d.d_txt, false),
          att_text(d.d_txt, d.d_txt, false),
          att_cls(d.d_txt, d.d_txt, false) {}

    void init(Rng& rng, double tau = 0.07) {
        mrm_head.init(rng);
        hd_map.init(rng);
        cmm_image.init(rng);
        cmm_text.init(rng);
        init::constant(log_tau, std::log(tau));
        att_out.init(rng);
        att_out.weight.value *= 0.1;  // the pooled inputs are sums over tokens; keep σ off its tails at init
        att_fused.init(rng);
        att_text.init(rng);
        att_cls.init(rng);
    }

    double tau() const { return std::exp(log_tau.value(0, 0)); }

    template <typename F>
    void for_each_param(F&& f) {
        mrm_head.for_each_param("heads.mrm", f);
        hd_map.for_each_param("heads.hd_map", f);
        cmm_image.for_each_param("heads.cmm_image", f);
        cmm_text.for_each_param("heads.cmm_text", f);
        f("heads.log_tau", log_tau);
        att_out.for_each_param("heads.att_out", f);
        att_fused.for_each_param("heads.att_fused", f);
        att_text.for_each_param("heads.att_text", f);
        att_cls.for_each_param("heads.att_cls", f);
    }
};

// ---------------------------------------------------------------------------
// Summarization

/// Σ_t w_t · −log softmax(logits_t)[gold_t]. Positions whose gold id is PAD are skipped.
inline Var loss_ps(Var logits, const std::vector<int>& gold) {
    require_shape(logits.rows() == static_cast<Eigen::Index>(gold.size()), "loss_ps: one gold id per logits row");
    Tape& t = *logits.tape();
    for (int g : gold) require(g >= 0 && g < logits.cols(), "loss_ps: gold id outside the vocabulary");
    const Mat lsm = ad::log_softmax_rows_value(logits.value());
    Mat out(1, 1);
    out(0, 0) = 0.0;
    for (std::size_t i = 0; i < gold.size(); ++i)
        if (gold[i] != special::kPad) out(0, 0) -= lsm(static_cast<Eigen::Index>(i), gold[i]);
    Mat p = lsm.array().exp().matrix();
    return t.record(std::move(out), {logits}, [&t, logits, gold, p = std::move(p)](const Mat& g) {
        Mat d = p;
        for (std::size_t i = 0; i < gold.size(); ++i) {
            const auto r = static_cast<Eigen::Index>(i);
            if (gold[i] == special::kPad)
                d.row(r).setZero();
            else
                d(r, gold[i]) -= 1.0;
        }
        t.accumulate(logits, d * g(0, 0));
    });
}

// ---------------------------------------------------------------------------
// Masked region modeling

struct MaskPlan {
    std::vector<int> masked_indices;  // region slots (0-based, excluding o_cls)
    double rate = 0.15;

    /// Per-slot flags for encode_image's feature zeroing.
    std::vector<bool> as_flags(int capacity) const {
        std::vector<bool> f(static_cast<std::size_t>(capacity), false);
        for (int i : masked_indices) f[static_cast<std::size_t>(i)] = true;
        return f;
    }
};

/// Each valid region is masked independently with probability `rate`.
inline MaskPlan sample_mask_regions(const RegionSet& rs, double rate, Rng& rng) {
    require(rate >= 0.0 && rate <= 1.0, "mask rate must be in [0,1]");
    MaskPlan plan;
    plan.rate = rate;
    std::bernoulli_distribution pick(rate);
    for (int i = 0; i < rs.capacity; ++i)
        if (rs.valid[static_cast<std::size_t>(i)] && pick(rng)) plan.masked_indices.push_back(i);
    return plan;
}

/// Σ_rows KL(target_row ‖ softmax(logits_row)), with 0·log 0 = 0.
inline Var kl_to_logits(const Mat& target, Var logits) {
    require_shape(target.rows() == logits.rows() && target.cols() == logits.cols(), "kl: shape mismatch");
    Tape& t = *logits.tape();
    const Mat lq = ad::log_softmax_rows_value(logits.value());
    double kl = 0.0;
    for (Eigen::Index i = 0; i < target.rows(); ++i)
        for (Eigen::Index j = 0; j < target.cols(); ++j) {
            const double r = target(i, j);
            if (r > 0.0) kl += r * (std::log(r) - lq(i, j));
        }
    Mat out(1, 1);
    out(0, 0) = kl;
    Mat q = lq.array().exp().matrix();
    return t.record(std::move(out), {logits}, [&t, logits, target, q = std::move(q)](const Mat& g) {
        Eigen::VectorXd mass = target.rowwise().sum();
        Mat d = (q.array().colwise() * mass.array()).matrix() - target;
        t.accumulate(logits, d * g(0, 0));
    });
}

/// Σ_s KL(r_s ‖ softmax(MLP(g_s))) over masked regions; zero when nothing is masked.
inline Var loss_mrm(Tape& t, const ImageFeatures& image, const MaskPlan& plan, const RegionSet& rs, LossHeads& heads) {
    if (plan.masked_indices.empty()) return t.constant(Mat::Zero(1, 1));
    std::vector<int> rows;
    Mat targets(static_cast<Eigen::Index>(plan.masked_indices.size()), rs.class_dim());
    for (std::size_t s = 0; s < plan.masked_indices.size(); ++s) {
        const int i = plan.masked_indices[s];
        require(i >= 0 && i < rs.capacity && rs.valid[static_cast<std::size_t>(i)], "mask plan names an invalid region");
        rows.push_back(i + 1);  // row 0 is g_cls
        const auto& r = rs.slots[static_cast<std::size_t>(i)].class_dist;
        targets.row(static_cast<Eigen::Index>(s)) = Eigen::Map<const Eigen::RowVectorXd>(r.data(), rs.class_dim());
    }
    Var logits = heads.mrm_head(t, ad::select_rows(image.per_region, rows));
    return kl_to_logits(targets, logits);
}

// ---------------------------------------------------------------------------
// Coarse-grained contrastive matching

/// L_i2t + L_t2i over a batch; each row of the inputs is one image / one text.
inline Var loss_cmm(Tape& t, Var g_cls_batch, Var z_cls_batch, LossHeads& heads) {
    require(g_cls_batch.rows() >= 1, "loss_cmm needs B >= 1");
    require_shape(g_cls_batch.rows() == z_cls_batch.rows(), "loss_cmm: batch sizes differ");
    const double batch = static_cast<double>(g_cls_batch.rows());
    Var g = ad::l2_normalize_rows(heads.cmm_image(t, g_cls_batch), 1e-12);
    Var z = ad::l2_normalize_rows(heads.cmm_text(t, z_cls_batch), 1e-12);
    Var inv_tau = ad::exp(ad::scale(t.param(heads.log_tau), -1.0));
    Var sim = ad::mul_scalar(ad::matmul_nt(g, z), inv_tau);
    Var i2t = ad::scale(ad::diagonal_sum(ad::log_softmax_rows(sim)), -1.0 / batch);
    Var t2i = ad::scale(ad::diagonal_sum(ad::log_softmax_rows(ad::transpose(sim))), -1.0 / batch);
    return ad::add(i2t, t2i);
}

/// Cosine similarity matrix (images × texts) in the contrastive space.
inline Mat contrastive_similarity(Tape& t, Var g_cls_batch, Var z_cls_batch, LossHeads& heads) {
    Var g = ad::l2_normalize_rows(heads.cmm_image(t, g_cls_batch), 1e-12);
    Var z = ad::l2_normalize_rows(heads.cmm_text(t, z_cls_batch), 1e-12);
    return ad::matmul_nt(g, z).value();
}

// ---------------------------------------------------------------------------
// Fine-grained matching

/// Indices realizing d_H on a distance table: max over rows of row-min and
/// max over columns of column-min, the larger of the two.
struct HausdorffArgs {
    Eigen::Index row = 0, col = 0;
    double value = 0.0;
};

inline HausdorffArgs hausdorff_argmax(const Mat& d) {
    require(d.rows() > 0 && d.cols() > 0, "Hausdorff distance needs two non-empty sets");
    HausdorffArgs best{0, 0, -1.0};
    for (Eigen::Index i = 0; i < d.rows(); ++i) {
        Eigen::Index j = 0;
        const double m = d.row(i).minCoeff(&j);
        if (m > best.value) best = {i, j, m};
    }
    for (Eigen::Index j = 0; j < d.cols(); ++j) {
        Eigen::Index i = 0;
        const double m = d.col(j).minCoeff(&i);
        if (m > best.value) best = {i, j, m};
    }
    return best;
}

/// d_H² between L2-normalized MLP(g_i) and L2-normalized z_j, valid
/// non-[CLS] rows on both sides.
inline Var loss_hd(Tape& t, const ImageFeatures& image, const TextFeatures& text, LossHeads& heads) {
    std::vector<int> regions, tokens;
    const auto rmask = image.region_mask();
    const auto tmask = text.token_mask();
    for (std::size_t i = 0; i < rmask.size(); ++i)
        if (rmask[i]) regions.push_back(static_cast<int>(i));
    for (std::size_t j = 0; j < tmask.size(); ++j)
        if (tmask[j]) tokens.push_back(static_cast<int>(j));
    require(!regions.empty() && !tokens.empty(), "loss_hd needs a valid region and a valid token");
    Var g = ad::l2_normalize_rows(heads.hd_map(t, ad::select_rows(image.per_region, regions)), 1e-12);
    Var z = ad::l2_normalize_rows(ad::select_rows(text.per_token, tokens), 1e-12);
    Var d = ad::pairwise_distance(g, z);
    const auto arg = hausdorff_argmax(d.value());
    Var dh = ad::element(d, arg.row, arg.col);
    return ad::mul(dh, dh);
}

/// ŷ^a = σ(W1·(W2·Σ z'_i + W3·Σ z_j + W4·z_cls) + B_y), sums over valid non-[CLS] rows.
inline Var predict_attributes(Tape& t, const FusedFeatures& fused, const TextFeatures& text, LossHeads& heads) {
    require_shape(fused.mask == text.mask, "fused and text masks differ");
    auto rows = text.token_mask();
    Var sum_fused = ad::sum_rows_masked(fused.per_token, rows);
    Var sum_text = ad::sum_rows_masked(text.per_token, rows);
    Var h = ad::add(ad::add(heads.att_fused(t, sum_fused), heads.att_text(t, sum_text)),
                    heads.att_cls(t, text.cls()));
    return ad::sigmoid(heads.att_out(t, h));
}

/// −Σ_k [y_k ln ŷ_k + (1−y_k) ln(1−ŷ_k)] with ŷ clamped to [ε, 1−ε]; rows are samples.
/// The clamp is straight-through in the backward pass: a saturated wrong
/// prediction still gets the (clamped-point) gradient instead of zero.
inline Var loss_att(Var pred, const Mat& gold, double eps = 1e-7) {
    require_shape(pred.rows() == gold.rows() && pred.cols() == gold.cols(), "loss_att: shape mismatch");
    Tape& t = *pred.tape();
    const Mat& p = pred.value();
    Mat pc = p.cwiseMax(eps).cwiseMin(1.0 - eps);
    Mat out(1, 1);
    out(0, 0) = -(gold.array() * pc.array().log() + (1.0 - gold.array()) * (1.0 - pc.array()).log()).sum();
    return t.record(std::move(out), {pred}, [&t, pred, gold, pc](const Mat& g) {
        const Mat d = -(gold.array() / pc.array() - (1.0 - gold.array()) / (1.0 - pc.array())).matrix();
        t.accumulate(pred, d * g(0, 0));
    });
}

}  // namespace m3ps
