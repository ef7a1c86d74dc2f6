#pragma once

#include "m3ps/autodiff.hpp"

#include <functional>
#include <string>
#include <utility>
#include <vector>

namespace m3ps::testing {

using ad::Tape;
using ad::Var;

struct GradCheck {
    double max_rel_error = 0.0;
    std::string worst;
    int tensors = 0;
    long long entries = 0;
};

using NamedParams = std::vector<std::pair<std::string, Param*>>;

/// Per-tensor ‖analytic − numeric‖ / max(‖analytic‖ + ‖numeric‖, floor), with
/// central differences of step h. `f` must build a scalar on the given tape.
inline GradCheck check_gradients(const std::function<Var(Tape&)>& f, const NamedParams& params, double h = 1e-5,
                                 double floor = 1e-6) {
    for (auto& [_, p] : params) p->zero_grad();
    {
        Tape t(true);
        Var out = f(t);
        t.backward(out);
    }
    GradCheck r;
    for (auto& [name, p] : params) {
        Mat numeric(p->rows(), p->cols());
        for (Eigen::Index i = 0; i < p->value.size(); ++i) {
            double& x = p->value.data()[i];
            const double keep = x;
            x = keep + h;
            double up;
            {
                Tape t(false);
                up = f(t).scalar();
            }
            x = keep - h;
            double down;
            {
                Tape t(false);
                down = f(t).scalar();
            }
            x = keep;
            numeric.data()[i] = (up - down) / (2.0 * h);
        }
        const double denom = std::max(p->grad.norm() + numeric.norm(), floor);
        const double err = (p->grad - numeric).norm() / denom;
        if (r.worst.empty() || err > r.max_rel_error) {
            r.max_rel_error = err;
            r.worst = name;
        }
        ++r.tensors;
        r.entries += p->value.size();
    }
    return r;
}

/// Σ R ⊙ x for a fixed weight matrix R, turning a matrix output into a scalar.
inline Var project(Tape& t, Var x, const Mat& r) { return ad::sum_all(ad::mul(x, t.constant(r))); }

}  // namespace m3ps::testing
