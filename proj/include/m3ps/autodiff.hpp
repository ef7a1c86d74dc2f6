#pragma once

// Tape-based reverse-mode differentiation over dense matrices.
//
// Every op records its output value and a closure that maps the output
// gradient onto its inputs. Nodes that do not depend on a gradient-carrying
// leaf record no closure, so inference on a tape with gradients disabled is
// a plain forward pass.

#include "m3ps/tensor.hpp"

#include <algorithm>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <span>
#include <unordered_map>
#include <utility>
#include <vector>

namespace m3ps::ad {

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
class Var {
public:
    Var() = default;

    const Mat& value() const;
    Eigen::Index rows() const { return value().rows(); }
    Eigen::Index cols() const { return value().cols(); }
    double scalar() const { return value()(0, 0); }
    Tape* tape() const { return tape_; }
    std::size_t id() const { return id_; }
    bool valid() const { return tape_ != nullptr; }

private:
    friend class Tape;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

class Tape {
public:
    using Backward = std::function<void(const Mat& out_grad)>;

    explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Leaf that never receives a gradient.
    Var constant(Mat value) { return push(std::move(value), false, nullptr, {}); }

    /// Leaf whose gradient can be read back after backward().
    Var input(Mat value) { return push(std::move(value), grad_enabled_, nullptr, {}); }

    /// Leaf bound to a parameter; backward() accumulates into p.grad.
    /// Repeated calls with the same parameter return the same node.
    Var param(Param& p) {
        if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Var(this, it->second);
        Var v = push(p.value, grad_enabled_, &p, {});
        param_nodes_.emplace(&p, v.id());
        return v;
    }

    /// Records an op output. The closure is kept only when some input needs a gradient.
    Var record(Mat value, std::initializer_list<Var> inputs, Backward backward) {
        return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                      std::move(backward));
    }

    Var record(Mat value, std::span<const Var> inputs, Backward backward) {
        bool needs = false;
        for (const Var& in : inputs) {
            require(in.tape() == this, "op inputs must live on the same tape");
            needs = needs || nodes_[in.id()]->requires_grad;
        }
        return push(std::move(value), needs, nullptr, needs ? std::move(backward) : Backward{});
    }

    const Mat& value(std::size_t id) const { return nodes_[id]->value; }
    bool requires_grad(Var v) const { return nodes_[v.id()]->requires_grad; }

    template <typename Expr>
    void accumulate(Var v, const Expr& g) {
        Node& n = *nodes_[v.id()];
        if (!n.requires_grad) return;
        if (n.grad.size() == 0)
            n.grad = g;
        else
            n.grad += g;
    }

    /// Gradient of the last backward() root with respect to v (zeros if unreached).
    Mat grad(Var v) const {
        const Node& n = *nodes_[v.id()];
        if (n.grad.size() == 0) return Mat::Zero(n.value.rows(), n.value.cols());
        return n.grad;
    }

    void backward(Var root) { backward(root, Mat::Ones(root.rows(), root.cols())); }

    void backward(Var root, const Mat& seed) {
        require(root.tape() == this, "backward root must live on this tape");
        require_shape(seed.rows() == root.rows() && seed.cols() == root.cols(), "backward seed shape");
        for (auto& n : nodes_) n->grad.resize(0, 0);
        if (!nodes_[root.id()]->requires_grad) return;
        nodes_[root.id()]->grad = seed;
        for (std::size_t id = root.id() + 1; id-- > 0;) {
            Node& n = *nodes_[id];
            if (!n.requires_grad || n.grad.size() == 0) continue;
            if (n.backward) n.backward(n.grad);
            if (n.param != nullptr) n.param->grad += n.grad;
        }
    }

    bool grad_enabled() const { return grad_enabled_; }

    /// Training mode enables dropout; the rng drives its masks.
    void set_training(bool training, Rng* rng = nullptr) {
        training_ = training;
        rng_ = rng;
    }
    bool training() const { return training_; }
    Rng* rng() const { return rng_; }

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Mat value;
        Mat grad;
        bool requires_grad = false;
        Param* param = nullptr;
        Backward backward;
    };

    Var push(Mat value, bool requires_grad, Param* param, Backward backward) {
        auto n = std::make_unique<Node>();
        n->value = std::move(value);
        n->requires_grad = requires_grad;
        n->param = param;
        n->backward = std::move(backward);
        nodes_.push_back(std::move(n));
        return Var(this, nodes_.size() - 1);
    }

    std::vector<std::unique_ptr<Node>> nodes_;
    std::unordered_map<const Param*, std::size_t> param_nodes_;
    bool grad_enabled_;
    bool training_ = false;
    Rng* rng_ = nullptr;
};

inline const Mat& Var::value() const { return tape_->value(id_); }

// ---------------------------------------------------------------------------
// Linear algebra

inline Var matmul(Var a, Var b) {
    require_shape(a.cols() == b.rows(), "matmul: inner dimensions differ");
    Tape& t = *a.tape();
    Mat out = a.value() * b.value();
    return t.record(std::move(out), {a, b}, [&t, a, b](const Mat& g) {
        t.accumulate(a, g * b.value().transpose());
        t.accumulate(b, a.value().transpose() * g);
    });
}

/// a · bᵀ
inline Var matmul_nt(Var a, Var b) {
    require_shape(a.cols() == b.cols(), "matmul_nt: inner dimensions differ");
    Tape& t = *a.tape();
    Mat out = a.value() * b.value().transpose();
    return t.record(std::move(out), {a, b}, [&t, a, b](const Mat& g) {
        t.accumulate(a, g * b.value());
        t.accumulate(b, g.transpose() * a.value());
    });
}

inline Var transpose(Var a) {
    Tape& t = *a.tape();
    Mat out = a.value().transpose();
    return t.record(std::move(out), {a}, [&t, a](const Mat& g) { t.accumulate(a, g.transpose()); });
}

inline Var add(Var a, Var b) {
    require_shape(a.rows() == b.rows() && a.cols() == b.cols(), "add: shape mismatch");
    Tape& t = *a.tape();
    Mat out = a.value() + b.value();
    return t.record(std::move(out), {a, b}, [&t, a, b](const Mat& g) {
        t.accumulate(a, g);
        t.accumulate(b, g);
    });
}

inline Var sub(Var a, Var b) {
    require_shape(a.rows() == b.rows() && a.cols() == b.cols(), "sub: shape mismatch");
    Tape& t = *a.tape();
    Mat out = a.value() - b.value();
    return t.record(std::move(out), {a, b}, [&t, a, b](const Mat& g) {
        t.accumulate(a, g);
        t.accumulate(b, -g);
    });
}

/// Elementwise product.
inline Var mul(Var a, Var b) {
    require_shape(a.rows() == b.rows() && a.cols() == b.cols(), "mul: shape mismatch");
    Tape& t = *a.tape();
    Mat out = a.value().cwiseProduct(b.value());
    return t.record(std::move(out), {a, b}, [&t, a, b](const Mat& g) {
        t.accumulate(a, g.cwiseProduct(b.value()));
        t.accumulate(b, g.cwiseProduct(a.value()));
    });
}

/// a + 1·bias, bias is 1×cols.
inline Var add_row(Var a, Var bias) {
    require_shape(bias.rows() == 1 && bias.cols() == a.cols(), "add_row: bias must be 1 x cols");
    Tape& t = *a.tape();
    Mat out = a.value().rowwise() + bias.value().row(0);
    return t.record(std::move(out), {a, bias}, [&t, a, bias](const Mat& g) {
        t.accumulate(a, g);
        t.accumulate(bias, g.colwise().sum());
    });
}

inline Var scale(Var a, double c) {
    Tape& t = *a.tape();
    Mat out = a.value() * c;
    return t.record(std::move(out), {a}, [&t, a, c](const Mat& g) { t.accumulate(a, g * c); });
}

/// s · a with s a 1×1 node.
inline Var mul_scalar(Var a, Var s) {
    require_shape(s.rows() == 1 && s.cols() == 1, "mul_scalar: s must be 1 x 1");
    Tape& t = *a.tape();
    Mat out = a.value() * s.scalar();
    return t.record(std::move(out), {a, s}, [&t, a, s](const Mat& g) {
        t.accumulate(a, g * s.scalar());
        Mat gs(1, 1);
        gs(0, 0) = g.cwiseProduct(a.value()).sum();
        t.accumulate(s, gs);
    });
}

// ---------------------------------------------------------------------------
// Pointwise nonlinearities

inline Var exp(Var a) {
    Tape& t = *a.tape();
    Mat out = a.value().array().exp().matrix();
    Mat e = out;
    return t.record(std::move(out), {a}, [&t, a, e = std::move(e)](const Mat& g) {
        t.accumulate(a, g.cwiseProduct(e));
    });
}

inline Var relu(Var a) {
    Tape& t = *a.tape();
    Mat out = a.value().cwiseMax(0.0);
    return t.record(std::move(out), {a}, [&t, a](const Mat& g) {
        t.accumulate(a, (a.value().array() > 0.0).select(g, 0.0).matrix());
    });
}

inline double stable_sigmoid(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline Var sigmoid(Var a) {
    Tape& t = *a.tape();
    Mat out = a.value().unaryExpr([](double x) { return stable_sigmoid(x); });
    Mat s = out;
    return t.record(std::move(out), {a}, [&t, a, s = std::move(s)](const Mat& g) {
        t.accumulate(a, g.cwiseProduct(s.cwiseProduct((1.0 - s.array()).matrix())));
    });
}

// ---------------------------------------------------------------------------
// Row-wise normalizations

inline Mat log_softmax_rows_value(const Mat& a) {
    Mat out(a.rows(), a.cols());
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
        const double m = a.row(i).maxCoeff();
        const double lse = m + std::log((a.row(i).array() - m).exp().sum());
        out.row(i) = a.row(i).array() - lse;
    }
    return out;
}

inline Var log_softmax_rows(Var a) {
    Tape& t = *a.tape();
    Mat out = log_softmax_rows_value(a.value());
    Mat p = out.array().exp().matrix();
    return t.record(std::move(out), {a}, [&t, a, p = std::move(p)](const Mat& g) {
        Mat d = g - (p.array().colwise() * g.rowwise().sum().array()).matrix();
        t.accumulate(a, d);
    });
}

/// Row softmax where column j participates only if key_mask[j] is set, and,
/// when causal, only if j <= i. Rows with no admissible column become zero.
inline Var masked_softmax_rows(Var a, const std::vector<bool>& key_mask, bool causal = false) {
    require_shape(static_cast<Eigen::Index>(key_mask.size()) == a.cols(), "masked_softmax: mask length");
    Tape& t = *a.tape();
    const Mat& x = a.value();
    Mat p = Mat::Zero(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        double m = -std::numeric_limits<double>::infinity();
        for (Eigen::Index j = 0; j < x.cols(); ++j)
            if (key_mask[j] && (!causal || j <= i)) m = std::max(m, x(i, j));
        if (!std::isfinite(m)) continue;
        double z = 0;
        for (Eigen::Index j = 0; j < x.cols(); ++j)
            if (key_mask[j] && (!causal || j <= i)) z += (p(i, j) = std::exp(x(i, j) - m));
        p.row(i) /= z;
    }
    Mat out = p;
    return t.record(std::move(out), {a}, [&t, a, p = std::move(p)](const Mat& g) {
        Eigen::VectorXd dot = g.cwiseProduct(p).rowwise().sum();
        Mat d = p.cwiseProduct((g.array().colwise() - dot.array()).matrix());
        t.accumulate(a, d);
    });
}

inline Var layer_norm_rows(Var x, Var gamma, Var beta, double eps = 1e-5) {
    require_shape(gamma.rows() == 1 && gamma.cols() == x.cols(), "layer_norm: gamma shape");
    require_shape(beta.rows() == 1 && beta.cols() == x.cols(), "layer_norm: beta shape");
    Tape& t = *x.tape();
    const Mat& xv = x.value();
    const auto d = static_cast<double>(xv.cols());
    Mat xhat(xv.rows(), xv.cols());
    Eigen::VectorXd inv_std(xv.rows());
    for (Eigen::Index i = 0; i < xv.rows(); ++i) {
        const double mu = xv.row(i).mean();
        const double var = (xv.row(i).array() - mu).square().sum() / d;
        inv_std(i) = 1.0 / std::sqrt(var + eps);
        xhat.row(i) = (xv.row(i).array() - mu) * inv_std(i);
    }
    Mat out = (xhat.array().rowwise() * gamma.value().row(0).array()).matrix().rowwise() +
              beta.value().row(0);
    return t.record(std::move(out), {x, gamma, beta},
                    [&t, x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std), d](const Mat& g) {
                        t.accumulate(gamma, g.cwiseProduct(xhat).colwise().sum());
                        t.accumulate(beta, g.colwise().sum());
                        if (!t.requires_grad(x)) return;
                        Mat dxhat = (g.array().rowwise() * gamma.value().row(0).array()).matrix();
                        Mat dx(g.rows(), g.cols());
                        for (Eigen::Index i = 0; i < g.rows(); ++i) {
                            const double m1 = dxhat.row(i).sum() / d;
                            const double m2 = dxhat.row(i).dot(xhat.row(i)) / d;
                            dx.row(i) = (dxhat.row(i).array() - m1 - xhat.row(i).array() * m2) * inv_std(i);
                        }
                        t.accumulate(x, dx);
                    });
}

/// y = a / sqrt(|a|² + eps), row by row.
inline Var l2_normalize_rows(Var a, double eps = 1e-12) {
    Tape& t = *a.tape();
    const Mat& x = a.value();
    Eigen::VectorXd norm = (x.rowwise().squaredNorm().array() + eps).sqrt();
    Mat out = (x.array().colwise() / norm.array()).matrix();
    Mat y = out;
    return t.record(std::move(out), {a}, [&t, a, y = std::move(y), norm = std::move(norm)](const Mat& g) {
        Eigen::VectorXd dot = g.cwiseProduct(y).rowwise().sum();
        Mat d = ((g - (y.array().colwise() * dot.array()).matrix()).array().colwise() / norm.array()).matrix();
        t.accumulate(a, d);
    });
}

// ---------------------------------------------------------------------------
// Structural ops

inline Var concat_cols(std::span<const Var> parts) {
    require(!parts.empty(), "concat_cols: no inputs");
    Tape& t = *parts.front().tape();
    Eigen::Index cols = 0;
    for (const Var& p : parts) {
        require_shape(p.rows() == parts.front().rows(), "concat_cols: row mismatch");
        cols += p.cols();
    }
    Mat out(parts.front().rows(), cols);
    std::vector<Eigen::Index> offsets;
    Eigen::Index c = 0;
    for (const Var& p : parts) {
        offsets.push_back(c);
        out.middleCols(c, p.cols()) = p.value();
        c += p.cols();
    }
    std::vector<Var> ins(parts.begin(), parts.end());
    return t.record(std::move(out), parts, [&t, ins, offsets](const Mat& g) {
        for (std::size_t k = 0; k < ins.size(); ++k)
            t.accumulate(ins[k], g.middleCols(offsets[k], ins[k].cols()));
    });
}

inline Var concat_cols(Var a, Var b) {
    const Var parts[] = {a, b};
    return concat_cols(std::span<const Var>(parts));
}

inline Var concat_rows(std::span<const Var> parts) {
    require(!parts.empty(), "concat_rows: no inputs");
    Tape& t = *parts.front().tape();
    Eigen::Index rows = 0;
    for (const Var& p : parts) {
        require_shape(p.cols() == parts.front().cols(), "concat_rows: column mismatch");
        rows += p.rows();
    }
    Mat out(rows, parts.front().cols());
    std::vector<Eigen::Index> offsets;
    Eigen::Index r = 0;
    for (const Var& p : parts) {
        offsets.push_back(r);
        out.middleRows(r, p.rows()) = p.value();
        r += p.rows();
    }
    std::vector<Var> ins(parts.begin(), parts.end());
    return t.record(std::move(out), parts, [&t, ins, offsets](const Mat& g) {
        for (std::size_t k = 0; k < ins.size(); ++k)
            t.accumulate(ins[k], g.middleRows(offsets[k], ins[k].rows()));
    });
}

inline Var slice_cols(Var a, Eigen::Index start, Eigen::Index count) {
    require_shape(start >= 0 && count >= 0 && start + count <= a.cols(), "slice_cols: out of range");
    Tape& t = *a.tape();
    Mat out = a.value().middleCols(start, count);
    return t.record(std::move(out), {a}, [&t, a, start, count](const Mat& g) {
        Mat d = Mat::Zero(a.rows(), a.cols());
        d.middleCols(start, count) = g;
        t.accumulate(a, d);
    });
}

inline Var slice_rows(Var a, Eigen::Index start, Eigen::Index count) {
    require_shape(start >= 0 && count >= 0 && start + count <= a.rows(), "slice_rows: out of range");
    Tape& t = *a.tape();
    Mat out = a.value().middleRows(start, count);
    return t.record(std::move(out), {a}, [&t, a, start, count](const Mat& g) {
        Mat d = Mat::Zero(a.rows(), a.cols());
        d.middleRows(start, count) = g;
        t.accumulate(a, d);
    });
}

/// Gathers rows by index (repeats allowed; gradients scatter-add).
inline Var select_rows(Var a, std::vector<int> rows) {
    Tape& t = *a.tape();
    Mat out(static_cast<Eigen::Index>(rows.size()), a.cols());
    for (std::size_t k = 0; k < rows.size(); ++k) {
        require_shape(rows[k] >= 0 && rows[k] < a.rows(), "select_rows: index out of range");
        out.row(static_cast<Eigen::Index>(k)) = a.value().row(rows[k]);
    }
    return t.record(std::move(out), {a}, [&t, a, rows = std::move(rows)](const Mat& g) {
        Mat d = Mat::Zero(a.rows(), a.cols());
        for (std::size_t k = 0; k < rows.size(); ++k) d.row(rows[k]) += g.row(static_cast<Eigen::Index>(k));
        t.accumulate(a, d);
    });
}

inline Var element(Var a, Eigen::Index i, Eigen::Index j) {
    require_shape(i >= 0 && i < a.rows() && j >= 0 && j < a.cols(), "element: index out of range");
    Tape& t = *a.tape();
    Mat out(1, 1);
    out(0, 0) = a.value()(i, j);
    return t.record(std::move(out), {a}, [&t, a, i, j](const Mat& g) {
        Mat d = Mat::Zero(a.rows(), a.cols());
        d(i, j) = g(0, 0);
        t.accumulate(a, d);
    });
}

inline Var sum_all(Var a) {
    Tape& t = *a.tape();
    Mat out(1, 1);
    out(0, 0) = a.value().sum();
    return t.record(std::move(out), {a}, [&t, a](const Mat& g) {
        t.accumulate(a, Mat::Constant(a.rows(), a.cols(), g(0, 0)));
    });
}

/// Sum of the rows whose mask bit is set, as a 1×cols row.
inline Var sum_rows_masked(Var a, const std::vector<bool>& row_mask) {
    require_shape(static_cast<Eigen::Index>(row_mask.size()) == a.rows(), "sum_rows_masked: mask length");
    Tape& t = *a.tape();
    Mat out = Mat::Zero(1, a.cols());
    for (Eigen::Index i = 0; i < a.rows(); ++i)
        if (row_mask[i]) out.row(0) += a.value().row(i);
    return t.record(std::move(out), {a}, [&t, a, row_mask](const Mat& g) {
        Mat d = Mat::Zero(a.rows(), a.cols());
        for (Eigen::Index i = 0; i < a.rows(); ++i)
            if (row_mask[i]) d.row(i) = g.row(0);
        t.accumulate(a, d);
    });
}

inline Var diagonal_sum(Var a) {
    require_shape(a.rows() == a.cols(), "diagonal_sum: matrix must be square");
    Tape& t = *a.tape();
    Mat out(1, 1);
    out(0, 0) = a.value().diagonal().sum();
    return t.record(std::move(out), {a}, [&t, a](const Mat& g) {
        Mat d = Mat::Zero(a.rows(), a.cols());
        d.diagonal().setConstant(g(0, 0));
        t.accumulate(a, d);
    });
}

/// D(i,j) = |a_i − b_j|₂ for row sets a (n×d) and b (m×d).
inline Var pairwise_distance(Var a, Var b) {
    require_shape(a.cols() == b.cols(), "pairwise_distance: dimension mismatch");
    Tape& t = *a.tape();
    const Mat& av = a.value();
    const Mat& bv = b.value();
    Mat out(av.rows(), bv.rows());
    for (Eigen::Index i = 0; i < av.rows(); ++i)
        for (Eigen::Index j = 0; j < bv.rows(); ++j) out(i, j) = (av.row(i) - bv.row(j)).norm();
    Mat dist = out;
    return t.record(std::move(out), {a, b}, [&t, a, b, dist = std::move(dist)](const Mat& g) {
        const Mat& av = a.value();
        const Mat& bv = b.value();
        Mat da = Mat::Zero(av.rows(), av.cols());
        Mat db = Mat::Zero(bv.rows(), bv.cols());
        for (Eigen::Index i = 0; i < av.rows(); ++i)
            for (Eigen::Index j = 0; j < bv.rows(); ++j) {
                if (g(i, j) == 0.0 || dist(i, j) == 0.0) continue;
                Eigen::RowVectorXd u = (av.row(i) - bv.row(j)) * (g(i, j) / dist(i, j));
                da.row(i) += u;
                db.row(j) -= u;
            }
        t.accumulate(a, da);
        t.accumulate(b, db);
    });
}

// ---------------------------------------------------------------------------
// Regularization

/// Inverted dropout; identity unless the tape is in training mode.
inline Var dropout(Var a, double rate) {
    Tape& t = *a.tape();
    if (!t.training() || rate <= 0.0) return a;
    require(t.rng() != nullptr, "dropout needs a tape rng in training mode");
    require(rate < 1.0, "dropout rate must be < 1");
    std::bernoulli_distribution keep(1.0 - rate);
    Mat mask(a.rows(), a.cols());
    for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = keep(*t.rng()) ? 1.0 / (1.0 - rate) : 0.0;
    Mat out = a.value().cwiseProduct(mask);
    return t.record(std::move(out), {a}, [&t, a, mask = std::move(mask)](const Mat& g) {
        t.accumulate(a, g.cwiseProduct(mask));
    });
}

}  // namespace m3ps::ad
