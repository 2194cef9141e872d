#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "doufu/tensor.hpp"
#include "gradcheck.hpp"

using namespace doufu;
using namespace doufu::nn;

TEST(Softmax, KnownValues) {
    Tape t;
    auto y = softmax_rows(t.constant(Tensor::row({1, 2, 3})));
    EXPECT_NEAR(y.value()[0], 0.09003, 1e-5);
    EXPECT_NEAR(y.value()[1], 0.24473, 1e-5);
    EXPECT_NEAR(y.value()[2], 0.66524, 1e-5);
}

TEST(Softmax, LargeLogitsStayFinite) {
    Tape t;
    auto y = softmax_rows(t.constant(Tensor::row({0, 1000})));
    EXPECT_TRUE(y.value().all_finite());
    EXPECT_NEAR(y.value()[1], 1.0, 1e-12);
    EXPECT_NEAR(y.value()[0], 0.0, 1e-12);
}

TEST(Softmax, RowsSumToOne) {
    std::mt19937_64 rng(3);
    std::normal_distribution<double> n(0.0, 5.0);
    for (int trial = 0; trial < 50; ++trial) {
        Tensor x(4, 1 + trial % 7);
        for (auto& v : x.data()) v = n(rng);
        Tape t;
        auto y = softmax_rows(t.constant(x)).value();
        for (std::size_t r = 0; r < y.rows(); ++r) {
            double s = 0;
            for (std::size_t c = 0; c < y.cols(); ++c) {
                EXPECT_GE(y(r, c), 0.0);
                s += y(r, c);
            }
            EXPECT_NEAR(s, 1.0, 1e-12);
        }
    }
}

TEST(Softmax, MaskedEntriesGetZeroAndFullyMaskedRowThrows) {
    Tape t;
    auto x = t.constant(Tensor::from_rows({{1, 2, 3}, {4, 5, 6}}));
    Mask m{2, 3, {1, 0, 1, 0, 0, 1}};
    auto y = softmax_rows(x, &m).value();
    EXPECT_EQ(y(0, 1), 0.0);
    EXPECT_NEAR(y(1, 2), 1.0, 1e-15);
    Mask none{2, 3, {1, 1, 1, 0, 0, 0}};
    EXPECT_THROW(softmax_rows(x, &none), ShapeError);
}

TEST(LayerNorm, NormalizesRows) {
    Tape t;
    auto y = layer_norm(t.constant(Tensor::from_rows({{1, 2, 3, 4}})), t.constant(Tensor::row({1, 1, 1, 1})),
                        t.constant(Tensor::row({0, 0, 0, 0})))
                 .value();
    const double var = 1.25;
    EXPECT_NEAR(y[0], -1.5 / std::sqrt(var + 1e-5), 1e-12);
    EXPECT_NEAR(y[3], 1.5 / std::sqrt(var + 1e-5), 1e-12);
}

TEST(LayerNorm, ConstantRowMapsToBias) {
    Tape t;
    auto y = layer_norm(t.constant(Tensor::row({7, 7, 7})), t.constant(Tensor::row({2, 2, 2})),
                        t.constant(Tensor::row({0.5, -1, 3})))
                 .value();
    EXPECT_NEAR(y[0], 0.5, 1e-12);
    EXPECT_NEAR(y[1], -1.0, 1e-12);
    EXPECT_NEAR(y[2], 3.0, 1e-12);
}

TEST(Backward, SumOfParameterGivesOnes) {
    ParamStore s(1);
    s.add("w", 3, 2, Init::fan_in_uniform);
    s.add("unused", 2, 2, Init::ones);
    Tape t;
    t.backward(sum(t.param(s, "w")));
    for (double g : s.get("w").grad.data()) EXPECT_EQ(g, 1.0);
    for (double g : s.get("unused").grad.data()) EXPECT_EQ(g, 0.0);
    EXPECT_THROW(t.backward(sum(t.param(s, "w"))), Error);
}

TEST(Backward, SecondBackwardOnSameLossThrows) {
    ParamStore s(1);
    s.add("w", 2, 2, Init::ones);
    Tape t;
    auto loss = sum(t.param(s, "w"));
    t.backward(loss);
    EXPECT_THROW(t.backward(loss), Error);
}

TEST(Backward, NonScalarLossRejected) {
    ParamStore s(1);
    s.add("w", 2, 2, Init::ones);
    Tape t;
    EXPECT_THROW(t.backward(t.param(s, "w")), ShapeError);
}

TEST(Init, SeededAndNameKeyed) {
    ParamStore a(5), b(5), c(6);
    a.add("x", 4, 4, Init::fan_in_uniform);
    b.add("x", 4, 4, Init::fan_in_uniform);
    c.add("x", 4, 4, Init::fan_in_uniform);
    EXPECT_EQ(a.get("x").value.data(), b.get("x").value.data());
    EXPECT_NE(a.get("x").value.data(), c.get("x").value.data());
    for (double v : a.get("x").value.data()) EXPECT_LE(std::abs(v), 0.5);
    EXPECT_THROW(a.add("x", 1, 1, Init::zeros), Error);
    EXPECT_THROW(a.get("nope"), LookupError);
}

TEST(Ops, ShapeMismatchThrows) {
    Tape t;
    auto a = t.constant(Tensor(2, 3)), b = t.constant(Tensor(2, 3));
    EXPECT_THROW(matmul(a, b), ShapeError);
    EXPECT_THROW(add(a, t.constant(Tensor(3, 2))), ShapeError);
    EXPECT_THROW(slice_cols(a, 2, 2), ShapeError);
}

namespace {

ParamStore operand_store() {
    ParamStore s(9);
    gradcheck::fill(s.add("a", 3, 4, Init::zeros), 0.1);
    gradcheck::fill(s.add("b", 3, 4, Init::zeros), 1.3);
    gradcheck::fill(s.add("w", 4, 2, Init::zeros), 2.2);
    gradcheck::fill(s.add("r", 1, 4, Init::zeros), 0.7);
    return s;
}

// A fixed non-uniform weighting so every output entry matters to the loss.
Var weighted(Tape& t, Var x) {
    Tensor w(x.rows(), x.cols());
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = 0.3 + 0.11 * static_cast<double>(i % 7);
    return sum(mul(x, t.constant(w)));
}

} // namespace

struct OpCase {
    const char* name;
    std::function<Var(Tape&, ParamStore&)> f;
};

class OpGradient : public ::testing::TestWithParam<OpCase> {};

TEST_P(OpGradient, MatchesCentralDifferences) {
    auto s = operand_store();
    auto res = gradcheck::check(s, GetParam().f);
    EXPECT_LT(res.worst, 1e-4) << GetParam().name << " worst tensor " << res.tensor;
}

#define P(n) t.param(s, n)
INSTANTIATE_TEST_SUITE_P(
    AllOps, OpGradient,
    ::testing::Values(
        OpCase{"matmul", [](Tape& t, ParamStore& s) { return weighted(t, matmul(P("a"), P("w"))); }},
        OpCase{"matmul_nt", [](Tape& t, ParamStore& s) { return weighted(t, matmul_nt(P("a"), P("b"))); }},
        OpCase{"add", [](Tape& t, ParamStore& s) { return weighted(t, add(P("a"), P("b"))); }},
        OpCase{"sub", [](Tape& t, ParamStore& s) { return weighted(t, sub(P("a"), P("b"))); }},
        OpCase{"mul", [](Tape& t, ParamStore& s) { return weighted(t, mul(P("a"), P("b"))); }},
        OpCase{"add_row", [](Tape& t, ParamStore& s) { return weighted(t, add_row(P("a"), P("r"))); }},
        OpCase{"scale", [](Tape& t, ParamStore& s) { return weighted(t, scale(P("a"), -2.5)); }},
        OpCase{"relu", [](Tape& t, ParamStore& s) { return weighted(t, relu(P("a"))); }},
        OpCase{"tanh", [](Tape& t, ParamStore& s) { return weighted(t, tanh(P("a"))); }},
        OpCase{"sigmoid", [](Tape& t, ParamStore& s) { return weighted(t, sigmoid(P("a"))); }},
        OpCase{"exp", [](Tape& t, ParamStore& s) { return weighted(t, exp(P("a"))); }},
        OpCase{"one_minus", [](Tape& t, ParamStore& s) { return weighted(t, one_minus(P("a"))); }},
        OpCase{"transpose", [](Tape& t, ParamStore& s) { return weighted(t, transpose(P("a"))); }},
        OpCase{"mean_rows", [](Tape& t, ParamStore& s) { return weighted(t, mean_rows(P("a"))); }},
        OpCase{"row_sum", [](Tape& t, ParamStore& s) { return weighted(t, row_sum(P("a"))); }},
        OpCase{"slice_cols", [](Tape& t, ParamStore& s) { return weighted(t, slice_cols(P("a"), 1, 2)); }},
        OpCase{"slice_rows", [](Tape& t, ParamStore& s) { return weighted(t, slice_rows(P("a"), 1, 2)); }},
        OpCase{"gather_rows", [](Tape& t, ParamStore& s) { return weighted(t, gather_rows(P("a"), {2, 0, 2, 1})); }},
        OpCase{"concat_cols", [](Tape& t, ParamStore& s) { return weighted(t, concat_cols({P("a"), P("b")})); }},
        OpCase{"concat_rows", [](Tape& t, ParamStore& s) { return weighted(t, concat_rows({P("a"), P("r")})); }},
        OpCase{"softmax_rows", [](Tape& t, ParamStore& s) { return weighted(t, softmax_rows(P("a"))); }},
        OpCase{"softmax_masked",
               [](Tape& t, ParamStore& s) {
                   Mask m{3, 4, {1, 1, 0, 1, 0, 1, 1, 1, 1, 0, 0, 0}};
                   m.allowed[11] = 1;
                   return weighted(t, softmax_rows(P("a"), &m));
               }},
        OpCase{"layer_norm", [](Tape& t, ParamStore& s) { return weighted(t, layer_norm(P("a"), P("r"), exp(P("r")))); }},
        OpCase{"cross_entropy", [](Tape& t, ParamStore& s) { return cross_entropy(P("a"), {0, 3, 1}); }},
        OpCase{"bce_with_logits",
               [](Tape& t, ParamStore& s) { return bce_with_logits(slice_cols(P("a"), 2, 1), {1.0, 0.0, 1.0}); }}),
    [](const ::testing::TestParamInfo<OpCase>& info) { return std::string(info.param.name); });
#undef P

TEST(CrossEntropy, UniformLogitsGiveLogClassCount) {
    Tape t;
    auto l = cross_entropy(t.constant(Tensor(2, 4)), {1, 3});
    EXPECT_NEAR(l.value().item(), std::log(4.0), 1e-12);
    EXPECT_THROW(cross_entropy(t.constant(Tensor(2, 4)), {1, 4}), LookupError);
}

TEST(BceWithLogits, MatchesDirectFormula) {
    Tape t;
    auto l = bce_with_logits(t.constant(Tensor::from_rows({{2.0}, {-30.0}})), {1.0, 1.0});
    const double direct = -(std::log(1 / (1 + std::exp(-2.0))) + std::log(1 / (1 + std::exp(30.0)))) / 2;
    EXPECT_NEAR(l.value().item(), direct, 1e-9);
    EXPECT_NEAR(sigmoid_scalar(4.0), 0.9820, 1e-4);
}
