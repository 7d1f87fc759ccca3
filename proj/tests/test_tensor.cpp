#include <gtest/gtest.h>

#include <cmath>

#include "mmq/rng.hpp"
#include "mmq/tensor.hpp"

using namespace mmq;

// ============================================================================
// matmul
// ============================================================================

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
    Tensor eye({2, 2}, {1, 0, 0, 1});
    Tensor a({2, 2}, {1, 2, 3, 4});
    Tensor left = matmul(eye, a);
    Tensor right = matmul(a, eye);
    for (std::size_t i = 0; i < 4; ++i) {
        EXPECT_DOUBLE_EQ(left.data[i], a.data[i]);
        EXPECT_DOUBLE_EQ(right.data[i], a.data[i]);
    }
}

TEST(Matmul, HandArithmetic) {
    Tensor a({2, 2}, {1, 2, 3, 4});
    Tensor b({2, 1}, {5, 6});
    Tensor c = matmul(a, b);
    EXPECT_DOUBLE_EQ(c.at(0, 0), 17.0);
    EXPECT_DOUBLE_EQ(c.at(1, 0), 39.0);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
    Tensor a({2, 3});
    Tensor b({2, 3});
    try {
        matmul(a, b);
        FAIL() << "expected shape error";
    } catch (const std::invalid_argument& e) {
        std::string msg = e.what();
        EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
    }
}

// ============================================================================
// softmax_rows
// ============================================================================

TEST(SoftmaxRows, SymmetricRow) {
    Tensor m({1, 2}, {0, 0});
    Tensor p = softmax_rows(m);
    EXPECT_DOUBLE_EQ(p.at(0, 0), 0.5);
    EXPECT_DOUBLE_EQ(p.at(0, 1), 0.5);
}

TEST(SoftmaxRows, AnalyticLogRow) {
    Tensor m({1, 3}, {std::log(1.0), std::log(2.0), std::log(3.0)});
    Tensor p = softmax_rows(m);
    EXPECT_NEAR(p.at(0, 0), 1.0 / 6.0, 1e-15);
    EXPECT_NEAR(p.at(0, 1), 2.0 / 6.0, 1e-15);
    EXPECT_NEAR(p.at(0, 2), 3.0 / 6.0, 1e-15);
}

TEST(SoftmaxRows, StabilityAtExtremeLogits) {
    Tensor m({1, 2}, {1000.0, 0.0});
    Tensor p = softmax_rows(m);
    EXPECT_NEAR(p.at(0, 0), 1.0, 1e-12);
    EXPECT_NEAR(p.at(0, 1), 0.0, 1e-12);
}

TEST(SoftmaxRows, RandomRowsSumToOne) {
    RngStream rng(7, 0);
    for (int t = 0; t < 1000; ++t) {
        Tensor m({1, 8});
        for (double& v : m.data) v = rng.uniform(-30.0, 30.0);
        Tensor p = softmax_rows(m);
        double sum = 0.0;
        for (double v : p.data) {
            EXPECT_GE(v, 0.0);
            sum += v;
        }
        EXPECT_NEAR(sum, 1.0, 1e-12);
    }
}

// ============================================================================
// layer_norm
// ============================================================================

TEST(LayerNorm, ZeroVarianceCollapsesToBeta) {
    Tensor x({1, 3}, {1, 1, 1});
    Tensor gamma({3}, {1, 1, 1});
    Tensor beta({3}, {0, 0, 0});
    Tensor y = layer_norm(x, gamma, beta, 1e-5);
    for (double v : y.data) EXPECT_DOUBLE_EQ(v, 0.0);
}

TEST(LayerNorm, AlreadyNormalizedRow) {
    Tensor x({1, 2}, {-1, 1});
    Tensor gamma({2}, {1, 1});
    Tensor beta({2}, {0, 0});
    Tensor y = layer_norm(x, gamma, beta, 1e-5);
    EXPECT_NEAR(y.at(0, 0), -1.0, 1e-4);
    EXPECT_NEAR(y.at(0, 1), 1.0, 1e-4);
}

TEST(LayerNorm, AffineOfNormalizedValues) {
    Tensor x({1, 2}, {0, 2});
    Tensor gamma({2}, {2, 2});
    Tensor beta({2}, {1, 1});
    Tensor y = layer_norm(x, gamma, beta, 1e-5);
    EXPECT_NEAR(y.at(0, 0), -1.0, 1e-4);
    EXPECT_NEAR(y.at(0, 1), 3.0, 1e-4);
}

// ============================================================================
// quantile
// ============================================================================

TEST(Quantile, Midpoint) { EXPECT_DOUBLE_EQ(quantile({0, 10}, 0.5), 5.0); }

TEST(Quantile, InterpolatedHighQuantile) {
    EXPECT_NEAR(quantile({1, 2, 3, 4, 5}, 0.99), 4.96, 1e-12);
}

TEST(Quantile, Singleton) {
    EXPECT_DOUBLE_EQ(quantile({7}, 0.0), 7.0);
    EXPECT_DOUBLE_EQ(quantile({7}, 0.37), 7.0);
    EXPECT_DOUBLE_EQ(quantile({7}, 1.0), 7.0);
}

TEST(Quantile, EndpointsAreMinAndMax) {
    RngStream rng(3, 1);
    std::vector<double> v(31);
    for (double& x : v) x = rng.uniform(-5.0, 5.0);
    double mn = *std::min_element(v.begin(), v.end());
    double mx = *std::max_element(v.begin(), v.end());
    EXPECT_DOUBLE_EQ(quantile(v, 0.0), mn);
    EXPECT_DOUBLE_EQ(quantile(v, 1.0), mx);
}

TEST(Quantile, EmptyInputThrows) {
    EXPECT_THROW(quantile({}, 0.5), std::invalid_argument);
}

// ============================================================================
// round_half_even
// ============================================================================

TEST(RoundHalfEven, TiesGoToEven) {
    EXPECT_DOUBLE_EQ(round_half_even(2.5), 2.0);
    EXPECT_DOUBLE_EQ(round_half_even(3.5), 4.0);
    EXPECT_DOUBLE_EQ(round_half_even(-2.5), -2.0);
    EXPECT_DOUBLE_EQ(round_half_even(-3.5), -4.0);
    EXPECT_DOUBLE_EQ(round_half_even(0.5), 0.0);
    EXPECT_DOUBLE_EQ(round_half_even(-0.5), 0.0);
}

TEST(RoundHalfEven, NonTiesRoundNearest) {
    EXPECT_DOUBLE_EQ(round_half_even(2.4), 2.0);
    EXPECT_DOUBLE_EQ(round_half_even(2.6), 3.0);
    EXPECT_DOUBLE_EQ(round_half_even(-2.4), -2.0);
    EXPECT_DOUBLE_EQ(round_half_even(-2.6), -3.0);
}

// ============================================================================
// finite_diff_grad
// ============================================================================

TEST(FiniteDiff, SumOfSquares) {
    Tensor x({2}, {1, 2});
    Tensor g = finite_diff_grad(
        [](const Tensor& t) {
            double s = 0.0;
            for (double v : t.data) s += v * v;
            return s;
        },
        x);
    EXPECT_NEAR(g[0], 2.0, 1e-6);
    EXPECT_NEAR(g[1], 4.0, 1e-6);
}

TEST(FiniteDiff, Product) {
    Tensor x({2}, {3, 5});
    Tensor g = finite_diff_grad(
        [](const Tensor& t) { return t[0] * t[1]; }, x);
    EXPECT_NEAR(g[0], 5.0, 1e-6);
    EXPECT_NEAR(g[1], 3.0, 1e-6);
}

TEST(FiniteDiff, ConstantFunction) {
    Tensor x({3}, {1, 2, 3});
    Tensor g = finite_diff_grad([](const Tensor&) { return 42.0; }, x);
    for (double v : g.data) EXPECT_DOUBLE_EQ(v, 0.0);
}

// ============================================================================
// RngStream
// ============================================================================

TEST(Rng, SameStreamSameSequence) {
    RngStream a(42, 7), b(42, 7);
    for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
}

TEST(Rng, DistinctStreamsDiffer) {
    RngStream a(42, 7), b(42, 8);
    int same = 0;
    for (int i = 0; i < 64; ++i)
        if (a.next_u64() == b.next_u64()) ++same;
    EXPECT_EQ(same, 0);
}

TEST(Rng, UniformInRange) {
    RngStream rng(1, 2);
    for (int i = 0; i < 1000; ++i) {
        double v = rng.uniform01();
        EXPECT_GE(v, 0.0);
        EXPECT_LT(v, 1.0);
    }
}

TEST(Rng, NormalMoments) {
    RngStream rng(5, 0);
    const int n = 20000;
    double mean = 0.0, var = 0.0;
    std::vector<double> xs(n);
    for (double& x : xs) {
        x = rng.normal();
        mean += x;
    }
    mean /= n;
    for (double x : xs) var += (x - mean) * (x - mean);
    var /= n;
    EXPECT_NEAR(mean, 0.0, 0.03);
    EXPECT_NEAR(var, 1.0, 0.05);
}

TEST(Rng, DirichletSumsToOne) {
    RngStream rng(11, 3);
    for (int t = 0; t < 100; ++t) {
        auto v = rng.dirichlet({8, 1, 1, 1, 1});
        double sum = 0.0;
        for (double x : v) {
            EXPECT_GT(x, 0.0);
            sum += x;
        }
        EXPECT_NEAR(sum, 1.0, 1e-12);
    }
}

TEST(Rng, ShuffleIsPermutation) {
    RngStream rng(9, 4);
    std::vector<int> v{0, 1, 2, 3, 4, 5, 6, 7};
    auto w = v;
    rng.shuffle(w);
    auto sorted = w;
    std::sort(sorted.begin(), sorted.end());
    EXPECT_EQ(sorted, v);
}
