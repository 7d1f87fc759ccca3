#include <gtest/gtest.h>

#include <cmath>

#include "mmq/head.hpp"
#include "mmq/model.hpp"
#include "test_helpers.hpp"

using namespace mmq;

// ============================================================================
// decision_forward
// ============================================================================

TEST(DecisionForward, ZeroWeightsGiveSecondBias) {
    HeadParams p;
    p.w1 = Tensor({32, 50});
    p.b1 = Tensor({50});
    p.w2 = Tensor({50, 5});
    p.b2 = Tensor({5}, {1, 2, 3, 4, 5});
    Tensor v({32});
    Tensor logits = decision_forward(v, p, nullptr, nullptr);
    for (std::size_t j = 0; j < 5; ++j) EXPECT_DOUBLE_EQ(logits[j], double(j + 1));
}

TEST(DecisionForward, EvalModeIsDeterministic) {
    ModelConfig cfg = tiny_config();
    Model m = init_model(cfg, 3);
    RngStream rng(4, 0);
    Tensor v({cfg.fused_dim()});
    for (double& q : v.data) q = rng.uniform(-1, 1);
    Tensor a = decision_forward(v, m.head, nullptr, nullptr);
    Tensor b = decision_forward(v, m.head, nullptr, nullptr);
    for (std::size_t j = 0; j < a.numel(); ++j) EXPECT_DOUBLE_EQ(a[j], b[j]);
}

TEST(DecisionForward, AllOnesMaskAtZeroDropoutEqualsEval) {
    ModelConfig cfg = tiny_config();
    cfg.dropout = 0.0;
    Model m = init_model(cfg, 5);
    RngStream rng(6, 0);
    Tensor v({cfg.fused_dim()});
    for (double& q : v.data) q = rng.uniform(-1, 1);
    Tensor mask = Tensor::full({cfg.fused_dim()}, 1.0);
    Tensor with_mask = decision_forward(v, m.head, &mask, nullptr);
    Tensor eval = decision_forward(v, m.head, nullptr, nullptr);
    for (std::size_t j = 0; j < 5; ++j) EXPECT_DOUBLE_EQ(with_mask[j], eval[j]);
}

// ============================================================================
// cross_entropy
// ============================================================================

TEST(CrossEntropy, UniformLogitsGiveLnClasses) {
    Tensor logits({5});
    EXPECT_NEAR(cross_entropy(logits, 2), std::log(5.0), 1e-12);
}

TEST(CrossEntropy, DominantTrueLogitNearZero) {
    Tensor logits({5}, {1000, 0, 0, 0, 0});
    EXPECT_NEAR(cross_entropy(logits, 0), 0.0, 1e-12);
}

TEST(CrossEntropy, HalfProbabilityGivesLn2) {
    // softmax([ln4, 0, 0, 0, 0])[0] = 4/8 = 0.5
    Tensor logits({5}, {std::log(4.0), 0, 0, 0, 0});
    EXPECT_NEAR(cross_entropy(logits, 0), std::log(2.0), 1e-12);
}

TEST(CrossEntropy, LabelOutOfRangeThrows) {
    Tensor logits({5});
    EXPECT_THROW(cross_entropy(logits, 5), std::out_of_range);
}

TEST(CrossEntropy, NonNegativeAndSoftmaxSumsToOne) {
    RngStream rng(7, 0);
    for (int t = 0; t < 500; ++t) {
        Tensor logits({5});
        for (double& v : logits.data) v = rng.uniform(-30, 30);
        EXPECT_GE(cross_entropy(logits, rng.uniform_int(5)), 0.0);
        Tensor row({1, 5}, logits.data);
        Tensor p = softmax_rows(row);
        double sum = 0.0;
        for (double v : p.data) sum += v;
        EXPECT_NEAR(sum, 1.0, 1e-12);
    }
}

TEST(CrossEntropy, BackwardMatchesFiniteDifferences) {
    RngStream rng(8, 0);
    Tensor logits({5});
    for (double& v : logits.data) v = rng.uniform(-2, 2);
    Tensor d = cross_entropy_backward(logits, 3);
    Tensor fd = finite_diff_grad(
        [](const Tensor& t) { return cross_entropy(t, 3); }, logits);
    expect_grad_close("logits", d, fd);
}

// ============================================================================
// total_loss
// ============================================================================

TEST(TotalLoss, ZeroLambdaIsPlainCe) { EXPECT_DOUBLE_EQ(total_loss(1.7, -3.0, 0.0), 1.7); }

TEST(TotalLoss, WeightedSum) { EXPECT_NEAR(total_loss(1.0, -2.0, 0.1), 0.8, 1e-15); }

TEST(TotalLoss, NegativeLambdaThrows) {
    EXPECT_THROW(total_loss(1.0, 1.0, -0.5), std::invalid_argument);
}

// ============================================================================
// full-model end-to-end gradient, 2-sample micro-batch, d=8 config
// ============================================================================

TEST(EndToEndGradient, EveryParameterMatchesFiniteDifferences) {
    ModelConfig cfg = tiny_config();
    Model m = init_model(cfg, 71);
    RngStream rng(72, 0);
    std::vector<BatchSample> batch;
    for (int i = 0; i < 2; ++i) batch.push_back(random_batch_sample(cfg, rng));
    auto masks = random_dropout_masks(cfg, batch.size(), rng);

    BatchForward fwd = model_forward_batch(m, batch, &masks);
    Model grads = make_model(cfg);
    model_backward_batch(m, batch, fwd, &masks, grads);

    for_each_param(m, [&](const std::string& name, Tensor& t) {
        Tensor* gt = nullptr;
        for_each_param(grads, [&](const std::string& n2, Tensor& t2) {
            if (n2 == name) gt = &t2;
        });
        ASSERT_NE(gt, nullptr) << name;
        Tensor numeric = finite_diff_grad(
            [&](const Tensor& cand) {
                Tensor saved = t;
                t = cand;
                double v = model_forward_batch(m, batch, &masks).total;
                t = saved;
                return v;
            },
            t);
        expect_grad_close(name, *gt, numeric);
    });
}
