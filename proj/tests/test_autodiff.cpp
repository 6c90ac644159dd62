#include "meshgeo/autodiff.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace meshgeo;
using namespace meshgeo::ad;

namespace {

MatrixXd random_matrix(Index r, Index c, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(lo, hi);
    return MatrixXd::NullaryExpr(r, c, [&] { return u(rng); });
}

// Reduces any tensor to a scalar with fixed random weights so every output entry matters.
Tensor<double> probe(const Tensor<double>& y, std::uint64_t seed = 77) {
    auto w = y.tape().constant(random_matrix(y.rows(), y.cols(), seed));
    return sum(mul(y, w));
}

template <class Fn>
double check(Fn&& fn, std::vector<MatrixXd> params) {
    auto report = gradient_check<double>(std::forward<Fn>(fn), params);
    return report.max_rel_error;
}

constexpr double kTol = 1e-5;

}  // namespace

TEST(Tape, ScalarChain) {
    Tape<double> t;
    MatrixXd a(1, 1), b(1, 1);
    a << 3.0;
    b << -2.0;
    auto x = t.variable(a), y = t.variable(b);
    auto loss = sum(add(mul(x, y), square(x)));  // xy + x^2
    t.backward(loss);
    EXPECT_DOUBLE_EQ(loss.item(), 3.0);
    EXPECT_DOUBLE_EQ(x.grad()(0, 0), -2.0 + 6.0);
    EXPECT_DOUBLE_EQ(y.grad()(0, 0), 3.0);
}

TEST(Tape, SharedOperandAccumulates) {
    Tape<double> t;
    auto x = t.variable(MatrixXd::Constant(2, 2, 1.5));
    auto loss = sum(add(x, add(x, x)));
    t.backward(loss);
    EXPECT_EQ(x.grad(), MatrixXd::Constant(2, 2, 3.0));
}

TEST(Tape, ParameterSinkAccumulatesAcrossTapes) {
    MatrixXd w = MatrixXd::Ones(2, 3), g;
    for (int k = 0; k < 2; ++k) {
        Tape<double> t;
        auto p = t.parameter(w, &g);
        t.backward(sum(p));
    }
    EXPECT_EQ(g, MatrixXd::Constant(2, 3, 2.0));
}

TEST(Tape, ConstantsGetNoGradient) {
    Tape<double> t;
    auto c = t.constant(MatrixXd::Ones(2, 2));
    auto v = t.variable(MatrixXd::Ones(2, 2));
    t.backward(sum(mul(c, v)));
    EXPECT_EQ(c.grad().size(), 0);
    EXPECT_EQ(v.grad(), MatrixXd::Ones(2, 2));
}

TEST(Tape, Errors) {
    Tape<double> t;
    auto a = t.variable(MatrixXd::Ones(2, 3));
    auto b = t.variable(MatrixXd::Ones(2, 2));
    EXPECT_THROW(add(a, b), ShapeError);
    EXPECT_THROW(matmul(a, a), ShapeError);
    EXPECT_THROW(t.backward(a), ShapeError);
    auto neg = t.variable(MatrixXd::Constant(1, 1, -1.0));
    EXPECT_THROW(ad::sqrt(neg), std::domain_error);
    Tape<double> other;
    auto c = other.variable(MatrixXd::Ones(2, 3));
    EXPECT_THROW(add(a, c), std::invalid_argument);
}

TEST(Ops, ForwardValues) {
    Tape<double> t;
    MatrixXd av(2, 2), bv(2, 2);
    av << 1, -2, 3, 4;
    bv << 0.5, 1, -1, 2;
    auto a = t.constant(av), b = t.constant(bv);
    EXPECT_EQ(matmul(a, b).value(), av * bv);
    EXPECT_EQ(leaky_relu(a, 0.01).value()(0, 1), -0.02);
    EXPECT_EQ(relu(a).value()(0, 1), 0.0);
    EXPECT_DOUBLE_EQ(l2_norm(a).item(), std::sqrt(30.0));
    EXPECT_EQ(mean_rows(a).value(), (MatrixXd(1, 2) << 2, 1).finished());
    EXPECT_EQ(flatten(a).value(), (MatrixXd(1, 4) << 1, -2, 3, 4).finished());
    auto s = softmax_rows(a).value();
    EXPECT_NEAR(s(0, 0), 1.0 / (1.0 + std::exp(-3.0)), 1e-15);
    EXPECT_NEAR(s.row(1).sum(), 1.0, 1e-15);
    EXPECT_EQ(concat_cols(a, b).value().rightCols(2), bv);
    EXPECT_EQ(slice_cols(a, 1, 1).value(), av.col(1));
    EXPECT_EQ(broadcast_row(slice_cols(flatten(a), 0, 2), 3).value().row(2), (MatrixXd(1, 2) << 1, -2).finished());
}

TEST(Ops, SoftmaxIsStableForLargeLogits) {
    Tape<double> t;
    MatrixXd big(1, 3);
    big << 1000, 1000, -1000;
    auto s = softmax_rows(t.constant(big)).value();
    EXPECT_TRUE(s.allFinite());
    EXPECT_NEAR(s(0, 0), 0.5, 1e-15);
}

TEST(Ops, LeakyReluSubgradientAtZero) {
    Tape<double> t;
    auto x = t.variable(MatrixXd::Zero(1, 1));
    t.backward(sum(leaky_relu(x, 0.01)));
    EXPECT_DOUBLE_EQ(x.grad()(0, 0), 0.01);
}

TEST(Ops, NormGradientAtZeroIsZero) {
    Tape<double> t;
    auto x = t.variable(MatrixXd::Zero(1, 4));
    t.backward(l2_norm(x));
    EXPECT_TRUE(x.grad().isZero());
}

TEST(GradCheck, ElementwisePrimitives) {
    const auto a = random_matrix(3, 4, 1), b = random_matrix(3, 4, 2);
    EXPECT_LT(check([](Tape<double>&, std::span<const Tensor<double>> p) { return probe(add(p[0], p[1])); }, {a, b}), kTol);
    EXPECT_LT(check([](Tape<double>&, std::span<const Tensor<double>> p) { return probe(sub(p[0], p[1])); }, {a, b}), kTol);
    EXPECT_LT(check([](Tape<double>&, std::span<const Tensor<double>> p) { return probe(mul(p[0], p[1])); }, {a, b}), kTol);
    EXPECT_LT(check([](Tape<double>&, std::span<const Tensor<double>> p) { return probe(scale(p[0], -2.5)); }, {a}), kTol);
    EXPECT_LT(check([](Tape<double>&, std::span<const Tensor<double>> p) { return probe(add_scalar(p[0], 0.3)); }, {a}), kTol);
    EXPECT_LT(check([](Tape<double>&, std::span<const Tensor<double>> p) { return probe(square(p[0])); }, {a}), kTol);
    EXPECT_LT(check([](Tape<double>&, std::span<const Tensor<double>> p) { return probe(ad::sqrt(p[0])); },
                    {random_matrix(3, 4, 3, 0.2, 2.0)}),
              kTol);
    EXPECT_LT(check([](Tape<double>&, std::span<const Tensor<double>> p) { return probe(leaky_relu(p[0], 0.01)); }, {a}),
              kTol);
    EXPECT_LT(check([](Tape<double>&, std::span<const Tensor<double>> p) { return probe(relu(p[0])); }, {a}), kTol);
}

TEST(GradCheck, ReductionsAndShapes) {
    const auto a = random_matrix(4, 3, 4);
    EXPECT_LT(check([](Tape<double>&, std::span<const Tensor<double>> p) { return sum(p[0]); }, {a}), kTol);
    EXPECT_LT(check([](Tape<double>&, std::span<const Tensor<double>> p) { return l2_norm(p[0]); }, {a}), kTol);
    EXPECT_LT(check([](Tape<double>&, std::span<const Tensor<double>> p) { return probe(mean_rows(p[0])); }, {a}), kTol);
    EXPECT_LT(check([](Tape<double>&, std::span<const Tensor<double>> p) { return probe(softmax_rows(p[0])); }, {a}), kTol);
    EXPECT_LT(check([](Tape<double>&, std::span<const Tensor<double>> p) { return probe(reshape(p[0], 2, 6)); }, {a}), kTol);
    EXPECT_LT(check([](Tape<double>&, std::span<const Tensor<double>> p) { return probe(flatten(p[0])); }, {a}), kTol);
    EXPECT_LT(check([](Tape<double>&, std::span<const Tensor<double>> p) { return probe(slice_cols(p[0], 1, 2)); }, {a}),
              kTol);
    EXPECT_LT(check([](Tape<double>&, std::span<const Tensor<double>> p) { return probe(concat_cols(p[0], p[1])); },
                    {a, random_matrix(4, 2, 5)}),
              kTol);
    EXPECT_LT(check([](Tape<double>&, std::span<const Tensor<double>> p) { return probe(broadcast_row(p[0], 5)); },
                    {random_matrix(1, 3, 6)}),
              kTol);
}

TEST(GradCheck, LinearAlgebra) {
    const auto a = random_matrix(4, 3, 7), b = random_matrix(3, 5, 8);
    EXPECT_LT(check([](Tape<double>&, std::span<const Tensor<double>> p) { return probe(matmul(p[0], p[1])); }, {a, b}),
              kTol);
    EXPECT_LT(check([](Tape<double>&, std::span<const Tensor<double>> p) { return probe(add_row(p[0], p[1])); },
                    {a, random_matrix(1, 3, 9)}),
              kTol);
    EXPECT_LT(check([](Tape<double>&, std::span<const Tensor<double>> p) { return probe(scale_rows(p[0], p[1])); },
                    {a, random_matrix(4, 1, 10)}),
              kTol);
    std::vector<SparseMatrix::Triplet> trip = {{0, 1, 0.5}, {1, 0, 2.0}, {1, 3, -1.0}, {2, 2, 1.5}, {0, 3, 0.25}};
    const auto sp = SparseMatrix::from_triplets(3, 4, trip);
    EXPECT_LT(check([&](Tape<double>&, std::span<const Tensor<double>> p) { return probe(spmm(sp, p[0])); }, {a}), kTol);
}

TEST(GradCheck, ComposedExpression) {
    // || relu(A B + b) ||, a miniature dense layer
    const auto a = random_matrix(5, 3, 11), b = random_matrix(3, 4, 12), bias = random_matrix(1, 4, 13);
    auto fn = [](Tape<double>&, std::span<const Tensor<double>> p) {
        return l2_norm(leaky_relu(add_row(matmul(p[0], p[1]), p[2]), 0.01));
    };
    EXPECT_LT(check(fn, {a, b, bias}), kTol);
}

TEST(GradCheck, DetectsWrongGradient) {
    // a primitive with a deliberately wrong backward must be reported
    auto bad = [](Tape<double>&, std::span<const Tensor<double>> p) {
        const auto id = p[0].id();
        Matrix<double> v = p[0].value().array().square();
        auto y = p[0].tape().record(v, {p[0]}, [id](Tape<double>& t, const Matrix<double>& g) {
            t.accumulate(id, g.cwiseProduct(t.value(id)));  // missing factor 2
        });
        return sum(y);
    };
    EXPECT_GT(check(bad, {random_matrix(2, 2, 14)}), 0.3);
}

TEST(GradCheck, RejectsUnsafeStep) {
    std::vector<MatrixXd> p = {MatrixXd::Ones(1, 1)};
    GradCheckOptions opt;
    opt.eps = 1e-2;
    EXPECT_THROW(gradient_check<double>([](Tape<double>&, std::span<const Tensor<double>> x) { return sum(x[0]); }, p,
                                        opt),
                 std::invalid_argument);
}

TEST(GradCheck, FloatTapeRuns) {
    Tape<float> t;
    auto x = t.variable(MatrixXf::Constant(2, 2, 2.0f));
    t.backward(sum(square(x)));
    EXPECT_EQ(x.grad(), MatrixXf::Constant(2, 2, 4.0f));
}
