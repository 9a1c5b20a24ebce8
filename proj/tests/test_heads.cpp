#include <gtest/gtest.h>

#include "helpers.hpp"

using namespace emofuse;
using testing_helpers::random_tensor;

TEST(Head, LogitsAreAffineInFeatures) {
    HeadParams head{Tensor::matrix({{1, 2, 3}, {4, 5, 6}}, true), Tensor({3}, {0.5, 0.0, -0.5}, true)};
    Tape tape;
    Var logits = head_logits(tape, tape.constant(Tensor::matrix({{1, 1}})), head);
    EXPECT_EQ(tape.to_tensor(logits), Tensor::matrix({{5.5, 7, 8.5}}));
}

TEST(Head, RejectsWrongFeatureWidth) {
    Rng rng(1);
    auto head = init_head(4, 3, rng);
    Tape tape;
    EXPECT_THROW(head_logits(tape, tape.constant(Tensor::zeros({2, 5})), head), DimensionError);
    EXPECT_THROW(init_head(0, 3, rng), ConfigError);
}

TEST(Head, SingleAndMultiLossGradients) {
    Rng rng(2);
    auto head = init_head(5, 3, rng);
    Tensor h = random_tensor({4, 5}, 3);
    const std::vector<std::size_t> gold = {0, 2, 2, 1};
    const std::vector<double> multi = {1, 0, 1, 0, 0, 0, 1, 1, 1, 0, 1, 0};
    std::vector<Tensor*> params = {&h, &head.weight, &head.bias};
    EXPECT_LE(finite_diff_check([&](Tape& t) { return forward_single(t, t.leaf(h), head, gold).loss; }, params), 1e-4);
    EXPECT_LE(finite_diff_check([&](Tape& t) { return forward_multi(t, t.leaf(h), head, multi).loss; }, params), 1e-4);
}

TEST(Head, FusionConcatenatesBothBranches) {
    Rng rng(4);
    auto head = init_head(6, 2, rng);
    Tensor h = random_tensor({3, 4}, 5), e = random_tensor({3, 2}, 6);
    const std::vector<std::size_t> gold = {1, 0, 1};
    std::vector<Tensor*> params = {&h, &e, &head.weight, &head.bias};
    EXPECT_LE(finite_diff_check([&](Tape& t) { return forward_fusion(t, t.leaf(h), t.leaf(e), head, gold).loss; }, params),
              1e-4);
    // The fused logits equal h W[:4] + e W[4:] + b.
    Tape tape;
    auto out = forward_fusion(tape, tape.leaf(h), tape.leaf(e), head, gold);
    for (std::size_t i = 0; i < 3; ++i) {
        for (std::size_t c = 0; c < 2; ++c) {
            double z = head.bias.data[c];
            for (std::size_t k = 0; k < 4; ++k) z += h.data[i * 4 + k] * head.weight.data[k * 2 + c];
            for (std::size_t k = 0; k < 2; ++k) z += e.data[i * 2 + k] * head.weight.data[(4 + k) * 2 + c];
            EXPECT_NEAR(out.logits.value()[i * 2 + c], z, 1e-14);
        }
    }
    Tensor narrow = random_tensor({3, 3}, 7);
    Tape t2;
    EXPECT_THROW(forward_fusion(t2, t2.leaf(h), t2.leaf(narrow), head, gold), DimensionError);
}

TEST(Prediction, SingleModeSoftmaxAndArgmax) {
    auto p = make_prediction(Tensor::matrix({{0, 0}, {1, 3}, {2, 2}}), TaskKind::single);
    EXPECT_DOUBLE_EQ(p.probabilities[0], 0.5);
    EXPECT_NEAR(p.probabilities[2] + p.probabilities[3], 1.0, 1e-15);
    // Ties go to the lowest index.
    EXPECT_EQ(argmax_labels(p), (std::vector<std::size_t>{0, 1, 0}));
}

TEST(Prediction, MultiModeThreshold) {
    auto p = make_prediction(Tensor::matrix({{0, 2, -2}, {-5, -5, -5}}), TaskKind::multi);
    auto labels = predict_labels(p, TaskKind::multi);
    EXPECT_EQ(labels[0], (std::vector<std::size_t>{0, 1}));  // sigmoid(0) = 0.5 is kept
    EXPECT_TRUE(labels[1].empty());
    EXPECT_EQ(predict_labels(p, TaskKind::multi, 0.9)[0], (std::vector<std::size_t>{}));
    EXPECT_THROW(predict_labels(p, TaskKind::multi, 1.0), ContractError);
    EXPECT_THROW(make_prediction(Tensor({3}, {1, 2, 3}), TaskKind::single), DimensionError);
}
