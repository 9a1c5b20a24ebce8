#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "helpers.hpp"

using namespace emofuse;
using testing_helpers::random_tensor;

namespace {

constexpr double kGradTol = 1e-4;

double check(const LossBuilder& f, std::vector<Tensor*> params) {
    return finite_diff_check(f, params, 1e-5);
}

// Weighted sum so that every output coordinate gets a distinct upstream gradient.
Var weighted_sum(Var x, std::uint64_t seed) {
    Tensor w = random_tensor(x.shape().empty() ? Shape{1} : x.shape(), seed, 1.0, false);
    w.shape = x.shape();
    return sum(mul(x, x.tape().constant(w)));
}

}  // namespace

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
    Tensor i2 = Tensor::matrix({{1, 0}, {0, 1}});
    Tensor m = Tensor::matrix({{1, 2}, {3, 4}});
    Tape tape;
    Var out = matmul(tape.leaf(i2), tape.leaf(m));
    EXPECT_EQ(tape.to_tensor(out), m);
}

TEST(Matmul, RowTimesColumn) {
    Tensor a = Tensor::matrix({{1, 2}});
    Tensor b = Tensor::matrix({{3}, {4}});
    Tape tape;
    EXPECT_DOUBLE_EQ(matmul(tape.leaf(a), tape.leaf(b)).item(), 11.0);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
    Tensor a = random_tensor({2, 3}, 1), b = random_tensor({4, 2}, 2);
    Tape tape;
    try {
        matmul(tape.leaf(a), tape.leaf(b));
        FAIL() << "expected DimensionError";
    } catch (const DimensionError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("[2x3]"), std::string::npos);
        EXPECT_NE(msg.find("[4x2]"), std::string::npos);
    }
}

// d sum(AB) / dA = row-broadcast of the row sums of B.
TEST(Matmul, GradientOfSumIsRowSumsOfB) {
    Tensor a = random_tensor({3, 4}, 3), b = random_tensor({4, 2}, 4);
    Tape tape;
    tape.backward(sum(matmul(tape.leaf(a), tape.leaf(b))));
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(a.grad[i * 4 + k], b.data[k * 2] + b.data[k * 2 + 1], 1e-14);
    EXPECT_LE(check([&](Tape& t) { return sum(matmul(t.leaf(a), t.leaf(b))); }, {&a, &b}), kGradTol);
}

TEST(Matmul, FiniteDifferences) {
    Tensor a = random_tensor({3, 4}, 5), b = random_tensor({4, 2}, 6);
    EXPECT_LE(check([&](Tape& t) { return weighted_sum(matmul(t.leaf(a), t.leaf(b)), 7); }, {&a, &b}), kGradTol);
}

TEST(Elementwise, FiniteDifferences) {
    Tensor a = random_tensor({2, 3}, 8), b = random_tensor({2, 3}, 9);
    EXPECT_LE(check([&](Tape& t) { return weighted_sum(add(t.leaf(a), t.leaf(b)), 1); }, {&a, &b}), kGradTol);
    EXPECT_LE(check([&](Tape& t) { return weighted_sum(sub(t.leaf(a), t.leaf(b)), 2); }, {&a, &b}), kGradTol);
    EXPECT_LE(check([&](Tape& t) { return weighted_sum(mul(t.leaf(a), t.leaf(b)), 3); }, {&a, &b}), kGradTol);
    EXPECT_LE(check([&](Tape& t) { return weighted_sum(scale(t.leaf(a), -2.5), 4); }, {&a}), kGradTol);
    EXPECT_LE(check([&](Tape& t) { return mean(t.leaf(a)); }, {&a}), kGradTol);
    EXPECT_LE(check([&](Tape& t) { return weighted_sum(reshape(t.leaf(a), {3, 2}), 5); }, {&a}), kGradTol);
}

TEST(Elementwise, ShapeMismatchIsDimensionError) {
    Tensor a = random_tensor({2, 3}, 1), b = random_tensor({3, 2}, 2);
    Tape tape;
    EXPECT_THROW(add(tape.leaf(a), tape.leaf(b)), DimensionError);
    EXPECT_THROW(mul(tape.leaf(a), tape.leaf(b)), DimensionError);
    EXPECT_THROW(reshape(tape.leaf(a), {4, 2}), DimensionError);
}

TEST(AddBias, BroadcastsAcrossRowsAndChecks) {
    Tensor x = random_tensor({4, 3}, 10), bias = random_tensor({3}, 11);
    EXPECT_LE(check([&](Tape& t) { return weighted_sum(add_bias(t.leaf(x), t.leaf(bias)), 12); }, {&x, &bias}), kGradTol);
    Tensor wrong = random_tensor({4}, 13);
    Tape tape;
    EXPECT_THROW(add_bias(tape.leaf(x), tape.leaf(wrong)), DimensionError);
}

TEST(Activation, KnownValues) {
    EXPECT_EQ(activate(Activation::gelu, 0.0), 0.0);
    EXPECT_EQ(activate(Activation::sigmoid, 0.0), 0.5);
    EXPECT_EQ(activate(Activation::tanh, 0.0), 0.0);
    // Phi(1) from standard normal tables.
    EXPECT_NEAR(activate(Activation::gelu, 1.0), 0.8413447460685429, 1e-15);
    EXPECT_NEAR(activate(Activation::gelu, -1.0), -1.0 * (1.0 - 0.8413447460685429), 1e-15);
}

TEST(Activation, FiniteDifferences) {
    Tensor x = random_tensor({3, 5}, 14, 3.0);
    for (auto kind : {Activation::gelu, Activation::sigmoid, Activation::tanh}) {
        EXPECT_LE(check([&](Tape& t) { return weighted_sum(activation(t.leaf(x), kind), 15); }, {&x}), kGradTol);
    }
}

TEST(Activation, DerivativeMatchesCentralDifference) {
    for (auto kind : {Activation::gelu, Activation::sigmoid, Activation::tanh}) {
        for (double x : {-3.0, -0.5, 0.0, 1.0, 2.5}) {
            const double h = 1e-6;
            const double numeric = (activate(kind, x + h) - activate(kind, x - h)) / (2 * h);
            EXPECT_NEAR(activate_derivative(kind, x), numeric, 1e-8);
        }
    }
}

TEST(Softmax, UniformLogits) {
    Tape tape;
    Var p = softmax_rows(tape.constant(Tensor::matrix({{0, 0}})));
    EXPECT_DOUBLE_EQ(p.value()[0], 0.5);
    EXPECT_DOUBLE_EQ(p.value()[1], 0.5);
}

TEST(Softmax, LargeLogitsDoNotOverflow) {
    Tape tape;
    Var p = softmax_rows(tape.constant(Tensor::matrix({{1000, 1000, 1000}})));
    for (double v : p.value()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(Softmax, RowsSumToOneAndStayInsideUnitInterval) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Tensor x = random_tensor({4, 7}, seed, 20.0);
        Tape tape;
        Var p = softmax_rows(tape.leaf(x));
        for (std::size_t i = 0; i < 4; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < 7; ++j) {
                const double v = p.value()[i * 7 + j];
                EXPECT_GT(v, 0.0);
                EXPECT_LT(v, 1.0);
                s += v;
            }
            EXPECT_NEAR(s, 1.0, 1e-12);
        }
    }
}

TEST(Softmax, FiniteDifferences) {
    Tensor x = random_tensor({4, 7}, 16, 2.0);
    EXPECT_LE(check([&](Tape& t) { return weighted_sum(softmax_rows(t.leaf(x)), 17); }, {&x}), kGradTol);
}

TEST(LayerNorm, ConstantRowBecomesZero) {
    Tape tape;
    Var y = layer_norm(tape.constant(Tensor::matrix({{5, 5, 5}})), tape.constant(Tensor::filled({3}, 1.0)),
                       tape.constant(Tensor::zeros({3})));
    for (double v : y.value()) EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, UsesPopulationVariance) {
    Tape tape;
    Var y = layer_norm(tape.constant(Tensor::matrix({{1, 3}})), tape.constant(Tensor::filled({2}, 1.0)),
                       tape.constant(Tensor::zeros({2})));
    EXPECT_NEAR(y.value()[0], -1.0, 1e-10);
    EXPECT_NEAR(y.value()[1], 1.0, 1e-10);
}

TEST(LayerNorm, RowsAreStandardizedBeforeAffine) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Tensor x = random_tensor({5, 16}, seed, 4.0);
        Tape tape;
        Var y = layer_norm(tape.leaf(x), tape.constant(Tensor::filled({16}, 1.0)), tape.constant(Tensor::zeros({16})));
        for (std::size_t i = 0; i < 5; ++i) {
            double m = 0.0, v = 0.0;
            for (std::size_t j = 0; j < 16; ++j) m += y.value()[i * 16 + j];
            m /= 16;
            for (std::size_t j = 0; j < 16; ++j) v += std::pow(y.value()[i * 16 + j] - m, 2);
            v /= 16;
            EXPECT_LE(std::abs(m), 1e-10);
            EXPECT_LE(std::abs(v - 1.0), 1e-6);
        }
    }
}

TEST(LayerNorm, FiniteDifferences) {
    Tensor x = random_tensor({3, 6}, 18, 2.0), g = random_tensor({6}, 19), b = random_tensor({6}, 20);
    EXPECT_LE(check([&](Tape& t) { return weighted_sum(layer_norm(t.leaf(x), t.leaf(g), t.leaf(b)), 21); }, {&x, &g, &b}),
              kGradTol);
}

TEST(Concat, ShapeArithmetic) {
    Tensor a = random_tensor({1, 2}, 1), b = random_tensor({1, 3}, 2);
    Tape tape;
    EXPECT_EQ(concat_features(tape.leaf(a), tape.leaf(b)).shape(), (Shape{1, 5}));
}

TEST(Concat, LeadingMismatchIsDimensionError) {
    Tensor a = random_tensor({2, 2}, 1), b = random_tensor({3, 2}, 2);
    Tape tape;
    EXPECT_THROW(concat_features(tape.leaf(a), tape.leaf(b)), DimensionError);
}

TEST(Concat, SplitRoundTripIsBitwise) {
    Tensor a = random_tensor({4, 3}, 3), b = random_tensor({4, 5}, 4);
    Tape tape;
    Var c = concat_features(tape.leaf(a), tape.leaf(b));
    EXPECT_EQ(tape.to_tensor(slice_cols(c, 0, 3)).data, a.data);
    EXPECT_EQ(tape.to_tensor(slice_cols(c, 3, 8)).data, b.data);
}

TEST(Concat, GradientOfFirstHalfSum) {
    Tensor a = random_tensor({2, 3}, 5), b = random_tensor({2, 4}, 6);
    Tape tape;
    tape.backward(sum(slice_cols(concat_features(tape.leaf(a), tape.leaf(b)), 0, 3)));
    for (double g : a.grad) EXPECT_EQ(g, 1.0);
    for (double g : b.grad) EXPECT_EQ(g, 0.0);
}

TEST(Concat, FiniteDifferences) {
    Tensor a = random_tensor({2, 3}, 7), b = random_tensor({2, 4}, 8);
    EXPECT_LE(check([&](Tape& t) { return weighted_sum(concat_features(t.leaf(a), t.leaf(b)), 9); }, {&a, &b}), kGradTol);
    EXPECT_LE(check([&](Tape& t) { return weighted_sum(slice_cols(t.leaf(b), 1, 3), 10); }, {&b}), kGradTol);
}

TEST(GatherRows, ScatterAddsRepeatedRows) {
    Tensor table = random_tensor({5, 3}, 11);
    std::vector<std::size_t> rows = {4, 0, 4, 2};
    EXPECT_LE(check([&](Tape& t) { return weighted_sum(gather_rows(t.leaf(table), rows), 12); }, {&table}), kGradTol);
    std::vector<std::size_t> bad = {5};
    Tape tape;
    EXPECT_THROW(gather_rows(tape.leaf(table), bad), ContractError);
}

TEST(Dropout, IdentityAtRateZeroAndGradientWithFixedMask) {
    Tensor x = random_tensor({4, 6}, 13);
    Rng rng = make_stream(1, "dropout");
    Tape tape;
    EXPECT_EQ(tape.to_tensor(dropout(tape.leaf(x), 0.0, rng)).data, x.data);
    EXPECT_LE(check(
                  [&](Tape& t) {
                      Rng r = make_stream(1, "dropout");  // same mask on every evaluation
                      return weighted_sum(dropout(t.leaf(x), 0.3, r), 14);
                  },
                  {&x}),
              kGradTol);
}

TEST(Dropout, KeepsExpectationAndDropsAboutRate) {
    Tensor x = Tensor::filled({100, 100}, 1.0);
    Rng rng = make_stream(2, "dropout");
    Tape tape;
    auto v = dropout(tape.leaf(x), 0.25, rng).value();
    const double zeros = static_cast<double>(std::count(v.begin(), v.end(), 0.0));
    EXPECT_NEAR(zeros / 10000.0, 0.25, 0.02);
    EXPECT_NEAR(std::accumulate(v.begin(), v.end(), 0.0) / 10000.0, 1.0, 0.03);
}

TEST(Attention, FiniteDifferencesWithPadding) {
    const AttentionShape s{2, 4, 2};
    Tensor q = random_tensor({8, 6}, 15), k = random_tensor({8, 6}, 16), v = random_tensor({8, 6}, 17);
    const std::vector<int> mask = {1, 1, 1, 0, 1, 1, 0, 0};
    EXPECT_LE(check([&](Tape& t) { return weighted_sum(multi_head_attention(t.leaf(q), t.leaf(k), t.leaf(v), mask, s), 18); },
                    {&q, &k, &v}),
              kGradTol);
}

TEST(Attention, FiniteDifferencesWithDropoutMaskFixed) {
    const AttentionShape s{1, 5, 1};
    Tensor q = random_tensor({5, 4}, 19), k = random_tensor({5, 4}, 20), v = random_tensor({5, 4}, 21);
    const std::vector<int> mask(5, 1);
    EXPECT_LE(check(
                  [&](Tape& t) {
                      Rng r = make_stream(3, "attn");
                      return weighted_sum(multi_head_attention(t.leaf(q), t.leaf(k), t.leaf(v), mask, s, 0.3, &r), 22);
                  },
                  {&q, &k, &v}),
              kGradTol);
}

TEST(Attention, PaddedKeysDoNotInfluenceOutputs) {
    const AttentionShape s{1, 4, 2};
    Tensor q = random_tensor({4, 4}, 23), k = random_tensor({4, 4}, 24), v = random_tensor({4, 4}, 25);
    const std::vector<int> mask = {1, 1, 0, 0};
    Tape t1;
    auto before = t1.to_tensor(multi_head_attention(t1.leaf(q), t1.leaf(k), t1.leaf(v), mask, s));
    for (std::size_t i = 8; i < 16; ++i) {
        k.data[i] += 10.0;
        v.data[i] -= 7.0;
    }
    Tape t2;
    auto after = t2.to_tensor(multi_head_attention(t2.leaf(q), t2.leaf(k), t2.leaf(v), mask, s));
    EXPECT_EQ(before.data, after.data);
}

TEST(Attention, AllMaskedSequenceIsAContractError) {
    const AttentionShape s{1, 2, 1};
    Tensor q = random_tensor({2, 2}, 26);
    const std::vector<int> mask = {0, 0};
    Tape tape;
    Var x = tape.leaf(q);
    EXPECT_THROW(multi_head_attention(x, x, x, mask, s), ContractError);
}

TEST(CrossEntropy, FiniteDifferencesAndRangeCheck) {
    Tensor z = random_tensor({5, 4}, 27, 3.0);
    const std::vector<std::size_t> gold = {0, 3, 1, 1, 2};
    EXPECT_LE(check([&](Tape& t) { return cross_entropy(t.leaf(z), gold); }, {&z}), kGradTol);
    const std::vector<std::size_t> bad = {0, 4, 1, 1, 2};
    Tape tape;
    EXPECT_THROW(cross_entropy(tape.leaf(z), bad), ContractError);
}

TEST(BinaryCrossEntropy, FiniteDifferencesAndTargetCheck) {
    Tensor z = random_tensor({3, 4}, 28, 5.0);
    const std::vector<double> y = {1, 0, 0, 1, 0, 0, 1, 1, 1, 0, 1, 0};
    EXPECT_LE(check([&](Tape& t) { return bce_with_logits(t.leaf(z), y); }, {&z}), kGradTol);
    std::vector<double> bad = y;
    bad[2] = 0.5;
    Tape tape;
    EXPECT_THROW(bce_with_logits(tape.leaf(z), bad), ContractError);
}

TEST(GradCheck, QuadraticFormIsNearlyExact) {
    Tensor x = random_tensor({1, 5}, 29);
    Tensor a = random_tensor({5, 5}, 30, 1.0, false);
    EXPECT_LE(check([&](Tape& t) { return sum(mul(matmul(t.leaf(x), t.leaf(a)), t.leaf(x))); }, {&x}), 1e-8);
}

TEST(GradCheck, MatmulSoftmaxCrossEntropyChain) {
    Tensor x = random_tensor({4, 6}, 31), w = random_tensor({6, 3}, 32);
    const std::vector<std::size_t> gold = {0, 2, 1, 2};
    EXPECT_LE(check(
                  [&](Tape& t) {
                      Var p = softmax_rows(matmul(t.leaf(x), t.leaf(w)));
                      return add(cross_entropy(matmul(t.leaf(x), t.leaf(w)), gold), weighted_sum(p, 33));
                  },
                  {&x, &w}),
              kGradTol);
}

TEST(GradCheck, CorruptedBackwardRuleIsDetected) {
    Tensor x = random_tensor({3}, 34);
    auto bad_square = [](Var v) {
        std::vector<double> out(v.value().begin(), v.value().end());
        for (auto& o : out) o *= o;
        return v.tape().record("bad_square", v.shape(), std::move(out), {v}, [](BackwardContext& ctx) {
            auto g = ctx.out_grad();
            auto x = ctx.input_value(0);
            auto gx = ctx.input_grad(0);
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * 3.0 * x[i];  // should be 2x
        });
    };
    EXPECT_GT(check([&](Tape& t) { return sum(bad_square(t.leaf(x))); }, {&x}), 1e-2);
}

TEST(GradCheck, StepSizeRangeAndNonFiniteLoss) {
    Tensor x = random_tensor({2}, 35);
    std::vector<Tensor*> params = {&x};
    auto f = [&](Tape& t) { return sum(t.leaf(x)); };
    EXPECT_THROW(finite_diff_check(f, params, 1e-2), ContractError);
    EXPECT_THROW(finite_diff_check(f, params, 1e-8), ContractError);
    Tensor big = Tensor::filled({1}, 1e200, true);
    std::vector<Tensor*> bp = {&big};
    EXPECT_THROW(finite_diff_check([&](Tape& t) { Var b = t.leaf(big); return sum(mul(mul(b, b), b)); }, bp), NumericError);
}
