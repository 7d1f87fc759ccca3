#include <gtest/gtest.h>

#include <cmath>

#include "mmq/fusion.hpp"
#include "mmq/model.hpp"
#include "test_helpers.hpp"

using namespace mmq;

namespace {

// Two B-vectors with exactly the requested Pearson correlation: center and
// orthonormalize a random pair, then mix b = rho*a + sqrt(1-rho^2)*a_perp.
void correlated_pair(std::size_t n, double rho, std::uint64_t seed,
                     std::vector<double>& a, std::vector<double>& b) {
    RngStream rng(seed, 0);
    std::vector<double> x(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
        x[i] = rng.normal();
        y[i] = rng.normal();
    }
    auto center = [n](std::vector<double>& v) {
        double m = 0.0;
        for (double t : v) m += t;
        m /= double(n);
        for (double& t : v) t -= m;
    };
    center(x);
    center(y);
    double xx = 0.0, xy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        xx += x[i] * x[i];
        xy += x[i] * y[i];
    }
    for (std::size_t i = 0; i < n; ++i) y[i] -= xy / xx * x[i]; // orthogonalize
    double yy = 0.0;
    for (double t : y) yy += t * t;
    const double nx = std::sqrt(xx), ny = std::sqrt(yy);
    a.resize(n);
    b.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        a[i] = x[i] / nx;
        b[i] = rho * x[i] / nx + std::sqrt(1.0 - rho * rho) * y[i] / ny;
    }
}

FusionParams small_fusion(std::size_t d, std::uint64_t seed) {
    ModelConfig cfg = tiny_config();
    cfg.d = d;
    Model m = init_model(cfg, seed);
    return m.fusion;
}

} // namespace

// ============================================================================
// project_modalities
// ============================================================================

TEST(ProjectModalities, ZeroInputsZeroBiases) {
    FusionParams p = small_fusion(8, 1);
    std::fill(p.proj_img_b.data.begin(), p.proj_img_b.data.end(), 0.0);
    std::fill(p.proj_txt_b.data.begin(), p.proj_txt_b.data.end(), 0.0);
    Tensor x({8}), t({8}), v({8});
    Tensor vi, vt, vv;
    project_modalities(x, t, v, p, vi, vt, vv, nullptr);
    for (double q : vi.data) EXPECT_DOUBLE_EQ(q, 0.0);
    for (double q : vt.data) EXPECT_DOUBLE_EQ(q, 0.0);
    for (double q : vv.data) EXPECT_DOUBLE_EQ(q, 0.0);
}

TEST(ProjectModalities, IdentityWeightsPassImageThrough) {
    FusionParams p = small_fusion(8, 2);
    for (std::size_t i = 0; i < 8; ++i)
        for (std::size_t j = 0; j < 8; ++j) p.proj_img_w.at(i, j) = i == j ? 1.0 : 0.0;
    std::fill(p.proj_img_b.data.begin(), p.proj_img_b.data.end(), 0.0);
    RngStream rng(3, 0);
    Tensor x({8}), t({8}), v({8});
    for (double& q : x.data) q = rng.uniform(-1, 1);
    Tensor vi, vt, vv;
    project_modalities(x, t, v, p, vi, vt, vv, nullptr);
    for (std::size_t j = 0; j < 8; ++j) EXPECT_DOUBLE_EQ(vi[j], x[j]);
}

TEST(ProjectModalities, VectorBypassesProjection) {
    FusionParams p = small_fusion(8, 4);
    RngStream rng(5, 0);
    Tensor x({8}), t({8}), v({8});
    for (double& q : v.data) q = rng.uniform(-1, 1);
    Tensor vi, vt, vv;
    project_modalities(x, t, v, p, vi, vt, vv, nullptr);
    for (std::size_t j = 0; j < 8; ++j) EXPECT_DOUBLE_EQ(vv[j], v[j]);
}

// ============================================================================
// stacked_attention
// ============================================================================

TEST(StackedAttention, IdenticalRowsGiveCommonTransformedRow) {
    FusionParams p = small_fusion(8, 6);
    RngStream rng(7, 0);
    Tensor v({8});
    for (double& q : v.data) q = rng.uniform(-1, 1);
    Tensor out = stacked_attention(v, v, v, p, nullptr);
    // A uniform over identical rows: out = mean of rows of A*(stack Wv) = v*Wv
    Tensor vm({1, 8}, v.data);
    Tensor expect = matmul(vm, p.attn_wv);
    for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(out[j], expect.at(0, j), 1e-12);
}

TEST(StackedAttention, ZeroQueryKeyGivesUniformWeights) {
    FusionParams p = small_fusion(8, 8);
    std::fill(p.attn_wq.data.begin(), p.attn_wq.data.end(), 0.0);
    std::fill(p.attn_wk.data.begin(), p.attn_wk.data.end(), 0.0);
    RngStream rng(9, 0);
    Tensor a({8}), b({8}), c({8});
    for (double& q : a.data) q = rng.uniform(-1, 1);
    for (double& q : b.data) q = rng.uniform(-1, 1);
    for (double& q : c.data) q = rng.uniform(-1, 1);
    StackedAttentionCache cache;
    Tensor out = stacked_attention(a, b, c, p, &cache);
    for (double w : cache.attn.data) EXPECT_NEAR(w, 1.0 / 3.0, 1e-12);
    Tensor stack = cache.v_stack;
    Tensor vs = matmul(stack, p.attn_wv);
    for (std::size_t j = 0; j < 8; ++j) {
        double mean = (vs.at(0, j) + vs.at(1, j) + vs.at(2, j)) / 3.0;
        EXPECT_NEAR(out[j], mean, 1e-12);
    }
}

TEST(StackedAttention, RowsSumToOneOnRandomTriples) {
    FusionParams p = small_fusion(8, 10);
    RngStream rng(11, 0);
    for (int t = 0; t < 100; ++t) {
        Tensor a({8}), b({8}), c({8});
        for (double& q : a.data) q = rng.uniform(-3, 3);
        for (double& q : b.data) q = rng.uniform(-3, 3);
        for (double& q : c.data) q = rng.uniform(-3, 3);
        StackedAttentionCache cache;
        stacked_attention(a, b, c, p, &cache);
        for (std::size_t i = 0; i < 3; ++i) {
            double sum = 0.0;
            for (std::size_t j = 0; j < 3; ++j) sum += cache.attn.at(i, j);
            EXPECT_NEAR(sum, 1.0, 1e-10);
        }
    }
}

// ============================================================================
// weighted_integration
// ============================================================================

TEST(WeightedIntegration, PicksSingleModality) {
    RngStream rng(13, 0);
    Tensor a({6}), b({6}), c({6});
    for (double& q : a.data) q = rng.uniform(-1, 1);
    for (double& q : b.data) q = rng.uniform(-1, 1);
    for (double& q : c.data) q = rng.uniform(-1, 1);
    Tensor out = weighted_integration(a, b, c, 1.0, 0.0, 0.0);
    for (std::size_t j = 0; j < 6; ++j) EXPECT_DOUBLE_EQ(out[j], a[j]);
}

TEST(WeightedIntegration, EqualThirdsOnEqualVectors) {
    Tensor v = Tensor::full({6}, 0.7);
    Tensor out = weighted_integration(v, v, v, 1.0 / 3, 1.0 / 3, 1.0 / 3);
    for (double q : out.data) EXPECT_NEAR(q, 0.7, 1e-15);
}

TEST(WeightedIntegration, CoefficientGradientIsTheModality) {
    RngStream rng(14, 0);
    Tensor a({6}), b({6}), c({6});
    for (double& q : a.data) q = rng.uniform(-1, 1);
    for (double& q : b.data) q = rng.uniform(-1, 1);
    for (double& q : c.data) q = rng.uniform(-1, 1);
    // d(sum(out))/d(alpha) = sum(a), via finite differences
    Tensor alpha({1}, {0.4});
    Tensor fd = finite_diff_grad(
        [&](const Tensor& t) {
            Tensor out = weighted_integration(a, b, c, t[0], 0.3, 0.2);
            double s = 0.0;
            for (double q : out.data) s += q;
            return s;
        },
        alpha);
    double sum_a = 0.0;
    for (double q : a.data) sum_a += q;
    EXPECT_NEAR(fd[0], sum_a, 1e-6);
}

// ============================================================================
// mi_loss
// ============================================================================

TEST(MiLoss, IndependentBatchesNearZero) {
    // oracle: sampling; independent columns have rho -> 0
    const std::size_t n = 1000;
    RngStream rng(15, 0);
    Tensor a({n, 1}), b({n, 1});
    for (std::size_t i = 0; i < n; ++i) {
        a.at(i, 0) = rng.normal();
        b.at(i, 0) = rng.normal();
    }
    EXPECT_LT(std::abs(mi_loss(a, b)), 0.01);
}

TEST(MiLoss, ExactCorrelationAnalyticValue) {
    std::vector<double> x, y;
    correlated_pair(512, 0.6, 17, x, y);
    Tensor a({512, 1}, std::move(x));
    Tensor b({512, 1}, std::move(y));
    // 0.5 * ln(1 - 0.36 + 1e-6)
    EXPECT_NEAR(mi_loss(a, b), -0.22314, 1e-3);
}

TEST(MiLoss, PerfectCorrelationHitsEpsFloor) {
    RngStream rng(19, 0);
    Tensor a({64, 1});
    for (std::size_t i = 0; i < 64; ++i) a.at(i, 0) = rng.normal();
    Tensor b = a;
    EXPECT_NEAR(mi_loss(a, b), 0.5 * std::log(1e-6), 1e-6);
}

TEST(MiLoss, ZeroVarianceColumnContributesNothing) {
    Tensor a({4, 1}, {1, 1, 1, 1});
    Tensor b({4, 1}, {0.1, 0.2, 0.3, 0.4});
    EXPECT_NEAR(mi_loss(a, b), 0.5 * std::log(1.0 + 1e-6), 1e-12);
}

TEST(MiLoss, BatchTooSmallThrows) {
    Tensor a({2, 1}), b({2, 1});
    EXPECT_THROW(mi_loss(a, b), std::invalid_argument);
}

TEST(MiLoss, MonotoneInConstructedCorrelation) {
    double prev = 1.0;
    for (double rho : {0.0, 0.3, 0.6, 0.9}) {
        std::vector<double> x, y;
        correlated_pair(512, rho, 23, x, y);
        Tensor a({512, 1}, std::move(x));
        Tensor b({512, 1}, std::move(y));
        double l = mi_loss(a, b);
        EXPECT_LT(l, prev);
        prev = l;
    }
}

TEST(MiLoss, GradientMatchesFiniteDifferences) {
    const std::size_t n = 6, d = 3;
    RngStream rng(29, 0);
    Tensor a({n, d}), b({n, d});
    for (double& v : a.data) v = rng.normal();
    for (double& v : b.data) v = rng.normal();
    Tensor da({n, d}), db({n, d});
    mi_loss(a, b, &da, &db);
    Tensor fd_a = finite_diff_grad(
        [&](const Tensor& t) { return mi_loss(t, b); }, a);
    Tensor fd_b = finite_diff_grad(
        [&](const Tensor& t) { return mi_loss(a, t); }, b);
    expect_grad_close("mi da", da, fd_a);
    expect_grad_close("mi db", db, fd_b);
}

// ============================================================================
// js_loss
// ============================================================================

TEST(JsLoss, IdenticalRowsGiveExactZero) {
    RngStream rng(31, 0);
    Tensor a({4, 5});
    for (double& v : a.data) v = rng.uniform(-2, 2);
    Tensor b = a;
    EXPECT_DOUBLE_EQ(js_loss(a, b), 0.0);
}

TEST(JsLoss, DisjointSupportHitsLn2) {
    Tensor a({1, 2}, {1000.0, -1000.0});
    Tensor b({1, 2}, {-1000.0, 1000.0});
    EXPECT_NEAR(js_loss(a, b), std::log(2.0), 1e-6);
}

TEST(JsLoss, BoundedByLn2OnRandomPairs) {
    RngStream rng(37, 0);
    for (int t = 0; t < 1000; ++t) {
        Tensor a({1, 6}), b({1, 6});
        for (double& v : a.data) v = rng.uniform(-20, 20);
        for (double& v : b.data) v = rng.uniform(-20, 20);
        double l = js_loss(a, b);
        EXPECT_GE(l, 0.0);
        EXPECT_LE(l, std::log(2.0) + 1e-12);
    }
}

TEST(JsLoss, GradientMatchesFiniteDifferences) {
    const std::size_t n = 4, d = 5;
    RngStream rng(41, 0);
    Tensor a({n, d}), b({n, d});
    for (double& v : a.data) v = rng.uniform(-1, 1);
    for (double& v : b.data) v = rng.uniform(-1, 1);
    Tensor da({n, d}), db({n, d});
    js_loss(a, b, &da, &db);
    Tensor fd_a = finite_diff_grad([&](const Tensor& t) { return js_loss(t, b); }, a);
    Tensor fd_b = finite_diff_grad([&](const Tensor& t) { return js_loss(a, t); }, b);
    expect_grad_close("js da", da, fd_a);
    expect_grad_close("js db", db, fd_b);
}

// ============================================================================
// priorities
// ============================================================================

TEST(Priorities, EqualWeightsEqualRelevanceGiveThirds) {
    Tensor w({3}, {1, 1, 1});
    auto p = compute_priorities(w, {1.0, 1.0, 1.0});
    for (double v : p) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(Priorities, WeightedSplit) {
    Tensor w({3}, {2, 1, 1});
    auto p = compute_priorities(w, {1.0, 1.0, 1.0});
    EXPECT_NEAR(p[0], 0.5, 1e-15);
    EXPECT_NEAR(p[1], 0.25, 1e-15);
    EXPECT_NEAR(p[2], 0.25, 1e-15);
}

TEST(Priorities, EmaDecayArithmetic) {
    PriorityState st;
    Tensor w({3}, {1, 1, 1});
    update_priorities(st, {0.0, 1.0, 0.5}, w);
    EXPECT_NEAR(st.relevance[0], 0.9, 1e-15);
    EXPECT_NEAR(st.relevance[1], 1.0, 1e-15);
    EXPECT_NEAR(st.relevance[2], 0.95, 1e-15);
}

TEST(Priorities, SumToOneAfterEveryUpdate) {
    PriorityState st;
    Tensor w({3}, {1.7, 0.2, 3.0});
    RngStream rng(43, 0);
    for (int t = 0; t < 200; ++t) {
        auto p = update_priorities(st,
                                   {rng.uniform01(), rng.uniform01(), rng.uniform01()},
                                   w);
        EXPECT_NEAR(p[0] + p[1] + p[2], 1.0, 1e-12);
        for (double v : st.relevance) {
            EXPECT_GE(v, 0.0);
            EXPECT_LE(v, 1.0);
        }
    }
}

TEST(Priorities, InvariantToPositiveRescaling) {
    Tensor w({3}, {0.5, 1.25, 2.0});
    Tensor w2({3}, {0.5 * 7, 1.25 * 7, 2.0 * 7});
    auto p1 = compute_priorities(w, {0.3, 0.9, 0.6});
    auto p2 = compute_priorities(w2, {0.3, 0.9, 0.6});
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(p1[i], p2[i], 1e-12);
}

TEST(Priorities, BackwardMatchesFiniteDifferences) {
    std::array<double, 3> rel{0.4, 0.8, 0.6};
    std::array<double, 3> dP{0.3, -0.7, 0.2};
    Tensor w({3}, {1.2, 0.8, 1.5});
    Tensor dw({3});
    priorities_backward(w, rel, dP, dw);
    Tensor fd = finite_diff_grad(
        [&](const Tensor& t) {
            auto p = compute_priorities(t, rel);
            return dP[0] * p[0] + dP[1] * p[1] + dP[2] * p[2];
        },
        w);
    expect_grad_close("mod_w", dw, fd);
}

TEST(PrioritizedFusion, MatchesWeightedIntegration) {
    RngStream rng(47, 0);
    Tensor a({6}), b({6}), c({6});
    for (double& q : a.data) q = rng.uniform(-1, 1);
    for (double& q : b.data) q = rng.uniform(-1, 1);
    for (double& q : c.data) q = rng.uniform(-1, 1);
    std::array<double, 3> p{0.2, 0.5, 0.3};
    Tensor x = prioritized_fusion(a, b, c, p);
    Tensor y = weighted_integration(a, b, c, p[0], p[1], p[2]);
    for (std::size_t j = 0; j < 6; ++j) EXPECT_DOUBLE_EQ(x[j], y[j]);
}

TEST(PrioritizedFusion, SingleModalitySelection) {
    RngStream rng(48, 0);
    Tensor a({6}), b({6}), c({6});
    for (double& q : a.data) q = rng.uniform(-1, 1);
    Tensor x = prioritized_fusion(a, b, c, {1.0, 0.0, 0.0});
    for (std::size_t j = 0; j < 6; ++j) EXPECT_DOUBLE_EQ(x[j], a[j]);
}

// ============================================================================
// final_fusion
// ============================================================================

TEST(FinalFusion, OutputLengthIs4dAtDefaultWidth) {
    ModelConfig cfg; // d = 100
    Model m = init_model(cfg, 51);
    Tensor v({100});
    Tensor out = final_fusion(v, v, v, v, m.fusion, nullptr);
    EXPECT_EQ(out.numel(), 400u);
}

TEST(FinalFusion, IdentityWeightsReproduceConcatenation) {
    ModelConfig cfg = tiny_config();
    Model m = make_model(cfg);
    for (std::size_t i = 0; i < 32; ++i) m.fusion.final_w.at(i, i) = 1.0;
    RngStream rng(53, 0);
    Tensor a({8}), b({8}), c({8}), d({8});
    for (double& q : a.data) q = rng.uniform01(); // nonnegative so relu is identity
    for (double& q : b.data) q = rng.uniform01();
    for (double& q : c.data) q = rng.uniform01();
    for (double& q : d.data) q = rng.uniform01();
    Tensor out = final_fusion(a, b, c, d, m.fusion, nullptr);
    for (std::size_t j = 0; j < 8; ++j) {
        EXPECT_DOUBLE_EQ(out[j], a[j]);
        EXPECT_DOUBLE_EQ(out[8 + j], b[j]);
        EXPECT_DOUBLE_EQ(out[16 + j], c[j]);
        EXPECT_DOUBLE_EQ(out[24 + j], d[j]);
    }
}

// Order sensitivity: swapping two components changes the output under an
// asymmetric final transform.
TEST(FinalFusion, ConcatenationOrderMatters) {
    ModelConfig cfg = tiny_config();
    Model m = init_model(cfg, 57);
    RngStream rng(58, 0);
    Tensor a({8}), b({8}), c({8}), d({8});
    for (double& q : a.data) q = rng.uniform(-1, 1);
    for (double& q : b.data) q = rng.uniform(-1, 1);
    for (double& q : c.data) q = rng.uniform(-1, 1);
    for (double& q : d.data) q = rng.uniform(-1, 1);
    Tensor o1 = final_fusion(a, b, c, d, m.fusion, nullptr);
    Tensor o2 = final_fusion(b, a, c, d, m.fusion, nullptr);
    double diff = 0.0;
    for (std::size_t j = 0; j < o1.numel(); ++j) diff += std::abs(o1[j] - o2[j]);
    EXPECT_GT(diff, 1e-6);
}

// ============================================================================
// batch-level fusion gradients (all fusion parameters at once)
// ============================================================================

TEST(FusionGradients, CompleteStrategyMatchesFiniteDifferences) {
    ModelConfig cfg = tiny_config();
    Model m = init_model(cfg, 61);
    RngStream rng(62, 0);
    std::vector<BatchSample> batch;
    for (int i = 0; i < 3; ++i) batch.push_back(random_batch_sample(cfg, rng));
    auto masks = random_dropout_masks(cfg, batch.size(), rng);

    BatchForward fwd = model_forward_batch(m, batch, &masks);
    Model grads = make_model(cfg);
    model_backward_batch(m, batch, fwd, &masks, grads);

    FusionParams::visit(m.fusion, [&](const std::string& name, Tensor& t) {
        Tensor* gt = nullptr;
        FusionParams::visit(grads.fusion, [&](const std::string& n2, Tensor& t2) {
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
            t, 1e-5);
        expect_grad_close(name, *gt, numeric);
    });
}
