#include "support/gradcheck.hpp"
#include "support/toy.hpp"

#include <gtest/gtest.h>

using namespace m3ps;
using namespace m3ps::testing;

namespace {

constexpr double kTol = 1e-6;

struct OpCase {
    Param a, b;
    Mat r;
};

OpCase make(Rng& rng, Eigen::Index ar, Eigen::Index ac, Eigen::Index br, Eigen::Index bc, Eigen::Index rr,
            Eigen::Index rc) {
    return OpCase{Param(random_mat(rng, ar, ac)), Param(random_mat(rng, br, bc)), random_mat(rng, rr, rc)};
}

void expect_grad(const std::function<Var(Tape&)>& f, const NamedParams& ps) {
    const auto r = check_gradients(f, ps);
    EXPECT_LT(r.max_rel_error, kTol) << "worst tensor " << r.worst;
}

}  // namespace

TEST(Autodiff, BinaryOpsMatchFiniteDifferences) {
    Rng rng(7);
    for (int trial = 0; trial < 3; ++trial) {
        auto c = make(rng, 3, 4, 4, 2, 3, 2);
        expect_grad([&](Tape& t) { return project(t, ad::matmul(t.param(c.a), t.param(c.b)), c.r); },
                    {{"a", &c.a}, {"b", &c.b}});
        auto n = make(rng, 3, 4, 5, 4, 3, 5);
        expect_grad([&](Tape& t) { return project(t, ad::matmul_nt(t.param(n.a), t.param(n.b)), n.r); },
                    {{"a", &n.a}, {"b", &n.b}});
        auto e = make(rng, 3, 4, 3, 4, 3, 4);
        expect_grad([&](Tape& t) { return project(t, ad::add(t.param(e.a), t.param(e.b)), e.r); },
                    {{"a", &e.a}, {"b", &e.b}});
        expect_grad([&](Tape& t) { return project(t, ad::sub(t.param(e.a), t.param(e.b)), e.r); },
                    {{"a", &e.a}, {"b", &e.b}});
        expect_grad([&](Tape& t) { return project(t, ad::mul(t.param(e.a), t.param(e.b)), e.r); },
                    {{"a", &e.a}, {"b", &e.b}});
        auto row = make(rng, 3, 4, 1, 4, 3, 4);
        expect_grad([&](Tape& t) { return project(t, ad::add_row(t.param(row.a), t.param(row.b)), row.r); },
                    {{"a", &row.a}, {"b", &row.b}});
        auto s = make(rng, 3, 4, 1, 1, 3, 4);
        expect_grad([&](Tape& t) { return project(t, ad::mul_scalar(t.param(s.a), t.param(s.b)), s.r); },
                    {{"a", &s.a}, {"s", &s.b}});
    }
}

TEST(Autodiff, UnaryOpsMatchFiniteDifferences) {
    Rng rng(11);
    auto c = make(rng, 3, 5, 1, 1, 3, 5);
    // the projection weights follow the output shape, fixed by their own seed
    auto with = [&](auto op) {
        expect_grad(
            [&](Tape& t) {
                Var y = op(t.param(c.a));
                Rng r(99);
                return project(t, y, random_mat(r, y.rows(), y.cols()));
            },
            {{"a", &c.a}});
    };
    with([](Var x) { return ad::transpose(ad::transpose(x)); });
    with([](Var x) { return ad::scale(x, -2.5); });
    with([](Var x) { return ad::exp(x); });
    with([](Var x) { return ad::relu(x); });
    with([](Var x) { return ad::sigmoid(x); });
    with([](Var x) { return ad::log_softmax_rows(x); });
    with([](Var x) { return ad::masked_softmax_rows(x, {true, false, true, true, false}); });
    with([](Var x) { return ad::l2_normalize_rows(x); });
    with([](Var x) { return ad::slice_cols(x, 1, 3); });
    with([](Var x) { return ad::slice_rows(x, 1, 2); });
    expect_grad([&](Tape& t) { return ad::element(t.param(c.a), 2, 3); }, {{"a", &c.a}});
    expect_grad([&](Tape& t) { return ad::sum_all(ad::mul(t.param(c.a), t.param(c.a))); }, {{"a", &c.a}});
}

TEST(Autodiff, CausalSoftmaxAndLayerNorm) {
    Rng rng(12);
    Param x(random_mat(rng, 4, 4));
    Mat r = random_mat(rng, 4, 4);
    expect_grad([&](Tape& t) { return project(t, ad::masked_softmax_rows(t.param(x), {true, true, true, false}, true), r); },
                {{"x", &x}});
    Param g(random_mat(rng, 1, 4)), b(random_mat(rng, 1, 4));
    expect_grad([&](Tape& t) { return project(t, ad::layer_norm_rows(t.param(x), t.param(g), t.param(b)), r); },
                {{"x", &x}, {"gamma", &g}, {"beta", &b}});
}

TEST(Autodiff, StructuralOps) {
    Rng rng(13);
    Param a(random_mat(rng, 3, 2)), b(random_mat(rng, 3, 3)), c(random_mat(rng, 2, 2));
    Mat r1 = random_mat(rng, 3, 5), r2 = random_mat(rng, 5, 2), r3 = random_mat(rng, 4, 2);
    expect_grad([&](Tape& t) { return project(t, ad::concat_cols(t.param(a), t.param(b)), r1); },
                {{"a", &a}, {"b", &b}});
    expect_grad(
        [&](Tape& t) {
            const Var parts[] = {t.param(a), t.param(c)};
            return project(t, ad::concat_rows(parts), r2);
        },
        {{"a", &a}, {"c", &c}});
    expect_grad([&](Tape& t) { return project(t, ad::select_rows(t.param(a), {2, 0, 2, 1}), r3); }, {{"a", &a}});
    expect_grad([&](Tape& t) { return project(t, ad::sum_rows_masked(t.param(b), {true, false, true}), r1.topRows(1).leftCols(3)); },
                {{"b", &b}});
    expect_grad([&](Tape& t) { return ad::diagonal_sum(t.param(b)); }, {{"b", &b}});
}

TEST(Autodiff, PairwiseDistance) {
    Rng rng(14);
    Param a(random_mat(rng, 3, 4)), b(random_mat(rng, 2, 4));
    Mat r = random_mat(rng, 3, 2);
    expect_grad([&](Tape& t) { return project(t, ad::pairwise_distance(t.param(a), t.param(b)), r); },
                {{"a", &a}, {"b", &b}});
    Tape t(false);
    Mat d = ad::pairwise_distance(t.constant(a.value), t.constant(b.value)).value();
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 2; ++j) EXPECT_NEAR(d(i, j), (a.value.row(i) - b.value.row(j)).norm(), 1e-15);
}

TEST(Autodiff, MaskedSoftmaxRowsSumToOneOverValidKeys) {
    Rng rng(15);
    Tape t(false);
    const std::vector<bool> mask{true, false, true, true};
    Mat p = ad::masked_softmax_rows(t.constant(random_mat(rng, 3, 4)), mask).value();
    for (int i = 0; i < 3; ++i) {
        EXPECT_NEAR(p.row(i).sum(), 1.0, 1e-12);
        EXPECT_EQ(p(i, 1), 0.0);
    }
    Mat c = ad::masked_softmax_rows(t.constant(random_mat(rng, 4, 4)), {true, true, true, true}, true).value();
    for (int i = 0; i < 4; ++i)
        for (int j = i + 1; j < 4; ++j) EXPECT_EQ(c(i, j), 0.0);
}

TEST(Autodiff, DropoutIsIdentityOutsideTraining) {
    Rng rng(16);
    Tape t(false);
    Mat x = random_mat(rng, 3, 3);
    EXPECT_EQ(ad::dropout(t.constant(x), 0.5).value(), x);

    Tape tr(true);
    Rng drop(1);
    tr.set_training(true, &drop);
    Mat y = ad::dropout(tr.constant(x), 0.5).value();
    for (Eigen::Index i = 0; i < x.size(); ++i)
        EXPECT_TRUE(y.data()[i] == 0.0 || std::abs(y.data()[i] - 2.0 * x.data()[i]) < 1e-15);
}

TEST(Autodiff, ParamGradientsAccumulateIntoParam) {
    Param p(Mat::Constant(1, 1, 3.0));
    Tape t(true);
    Var x = t.param(p);
    t.backward(ad::mul(x, x));
    EXPECT_DOUBLE_EQ(p.grad(0, 0), 6.0);
    EXPECT_DOUBLE_EQ(t.grad(x)(0, 0), 6.0);
}

TEST(Autodiff, StableSigmoidTails) {
    EXPECT_EQ(ad::stable_sigmoid(-1e6), 0.0);
    EXPECT_EQ(ad::stable_sigmoid(1e6), 1.0);
    EXPECT_NEAR(ad::stable_sigmoid(0.3), 1.0 / (1.0 + std::exp(-0.3)), 1e-16);
}
