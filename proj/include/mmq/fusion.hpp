#pragma once

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "mmq/errors.hpp"
#include "mmq/nn.hpp"
#include "mmq/tensor.hpp"

namespace mmq {

enum class FusionStrategy {
    complete = 0,
    stacking = 1,
    attention_only = 2,
    weighted_only = 3,
    alignment_only = 4,
};

inline const char* to_string(FusionStrategy s) {
    switch (s) {
        case FusionStrategy::complete: return "complete";
        case FusionStrategy::stacking: return "stacking";
        case FusionStrategy::attention_only: return "attention_only";
        case FusionStrategy::weighted_only: return "weighted_only";
        case FusionStrategy::alignment_only: return "alignment_only";
    }
    return "?";
}

inline FusionStrategy fusion_strategy_from_string(const std::string& s) {
    if (s == "complete") return FusionStrategy::complete;
    if (s == "stacking") return FusionStrategy::stacking;
    if (s == "attention_only") return FusionStrategy::attention_only;
    if (s == "weighted_only") return FusionStrategy::weighted_only;
    if (s == "alignment_only") return FusionStrategy::alignment_only;
    throw ConfigError("unknown fusion_strategy: " + s);
}

// Branches that are unused by a strategy stay empty (numel 0); the visitor
// skips empty tensors so bundles carry only live layers.
struct FusionParams {
    Tensor proj_img_w, proj_img_b; // [D_X x d], [d]
    Tensor proj_txt_w, proj_txt_b; // [D_T x d], [d]
    Tensor attn_wq, attn_wk, attn_wv; // [d x d]
    Tensor mix;                    // [3] = (alpha, beta, gamma)
    Tensor align_w, align_b;       // shared projection g: [d x d], [d]
    Tensor mod_w;                  // [3] modality weights
    Tensor final_w, final_b;       // [4d x 4d], [4d]
    Tensor probe_img_w, probe_img_b; // [d x classes]
    Tensor probe_txt_w, probe_txt_b;
    Tensor probe_vec_w, probe_vec_b;
    Tensor adapter_w, adapter_b;   // [k x 4d] for non-complete strategies

    template <class Self, class F>
    static void visit(Self& self, F&& f) {
        auto maybe = [&f](const char* name, auto& t) {
            if (!t.empty()) f(name, t);
        };
        maybe("fusion.proj_img.w", self.proj_img_w);
        maybe("fusion.proj_img.b", self.proj_img_b);
        maybe("fusion.proj_txt.w", self.proj_txt_w);
        maybe("fusion.proj_txt.b", self.proj_txt_b);
        maybe("fusion.attn.wq", self.attn_wq);
        maybe("fusion.attn.wk", self.attn_wk);
        maybe("fusion.attn.wv", self.attn_wv);
        maybe("fusion.mix", self.mix);
        maybe("fusion.align.w", self.align_w);
        maybe("fusion.align.b", self.align_b);
        maybe("fusion.mod_w", self.mod_w);
        maybe("fusion.final.w", self.final_w);
        maybe("fusion.final.b", self.final_b);
        maybe("fusion.probe_img.w", self.probe_img_w);
        maybe("fusion.probe_img.b", self.probe_img_b);
        maybe("fusion.probe_txt.w", self.probe_txt_w);
        maybe("fusion.probe_txt.b", self.probe_txt_b);
        maybe("fusion.probe_vec.w", self.probe_vec_w);
        maybe("fusion.probe_vec.b", self.probe_vec_b);
        maybe("fusion.adapter.w", self.adapter_w);
        maybe("fusion.adapter.b", self.adapter_b);
    }
};

// Relevance EMA per modality; frozen during evaluation.
struct PriorityState {
    std::array<double, 3> relevance = {1.0, 1.0, 1.0};
    double decay = 0.9;
};

constexpr double kModWeightFloor = 1e-3;

// ---------------------------------------------------------------------------
// Common-space projection
// ---------------------------------------------------------------------------

struct ProjectCache {
    Tensor x_out, t_out; // [1 x D_X], [1 x D_T]
};

inline void project_modalities(const Tensor& x_out, const Tensor& t_out,
                               const Tensor& v_out, const FusionParams& p,
                               Tensor& v_img, Tensor& v_txt, Tensor& v_vec,
                               ProjectCache* cache) {
    if (x_out.numel() != p.proj_img_w.rows())
        throw std::invalid_argument("project_modalities: image feature length " +
                                    std::to_string(x_out.numel()) + " != " +
                                    std::to_string(p.proj_img_w.rows()));
    if (t_out.numel() != p.proj_txt_w.rows())
        throw std::invalid_argument("project_modalities: text feature length " +
                                    std::to_string(t_out.numel()) + " != " +
                                    std::to_string(p.proj_txt_w.rows()));
    Tensor x({1, x_out.numel()}, x_out.data);
    Tensor t({1, t_out.numel()}, t_out.data);
    Tensor vi = linear_forward(x, p.proj_img_w, &p.proj_img_b);
    Tensor vt = linear_forward(t, p.proj_txt_w, &p.proj_txt_b);
    v_img = Tensor({vi.cols()}, vi.data);
    v_txt = Tensor({vt.cols()}, vt.data);
    v_vec = v_out; // passed through unchanged
    if (cache) {
        cache->x_out = std::move(x);
        cache->t_out = std::move(t);
    }
}

// ---------------------------------------------------------------------------
// Stacked three-row self-attention, mean-pooled over the modality rows.
// The similarity scale is 1/sqrt(d) with d the full fusion width.
// ---------------------------------------------------------------------------

struct StackedAttentionCache {
    Tensor v_stack; // [3 x d]
    Tensor q, k, v; // [3 x d]
    Tensor attn;    // [3 x 3]
};

inline Tensor stacked_attention(const Tensor& v_img, const Tensor& v_txt,
                                const Tensor& v_vec, const FusionParams& p,
                                StackedAttentionCache* cache) {
    const std::size_t d = v_img.numel();
    Tensor stack({3, d});
    for (std::size_t j = 0; j < d; ++j) {
        stack.at(0, j) = v_img[j];
        stack.at(1, j) = v_txt[j];
        stack.at(2, j) = v_vec[j];
    }
    Tensor q = matmul(stack, p.attn_wq);
    Tensor k = matmul(stack, p.attn_wk);
    Tensor v = matmul(stack, p.attn_wv);
    Tensor scores = matmul(q, transpose(k));
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    for (double& s : scores.data) s *= scale;
    Tensor attn = softmax_rows(scores);
    Tensor rows = matmul(attn, v); // [3 x d]
    Tensor out({d});
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < d; ++j) out[j] += rows.at(i, j) / 3.0;
    if (cache) {
        cache->v_stack = std::move(stack);
        cache->q = std::move(q);
        cache->k = std::move(k);
        cache->v = std::move(v);
        cache->attn = std::move(attn);
    }
    return out;
}

// Returns d(v_img), d(v_txt), d(v_vec) rows stacked in a [3 x d] tensor.
inline Tensor stacked_attention_backward(const StackedAttentionCache& c,
                                         const FusionParams& p, const Tensor& dout,
                                         FusionParams& g) {
    const std::size_t d = dout.numel();
    Tensor drows({3, d});
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < d; ++j) drows.at(i, j) = dout[j] / 3.0;

    Tensor dattn = matmul(drows, transpose(c.v));
    Tensor dv = matmul(transpose(c.attn), drows);
    Tensor dscores = softmax_rows_backward(c.attn, dattn);
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    for (double& s : dscores.data) s *= scale;
    Tensor dq = matmul(dscores, c.k);
    Tensor dk = matmul(transpose(dscores), c.q);

    Tensor dstack({3, d});
    auto accum = [&](const Tensor& dproj, const Tensor& w, Tensor& dw) {
        Tensor dwi = matmul(transpose(c.v_stack), dproj);
        for (std::size_t i = 0; i < dw.numel(); ++i) dw.data[i] += dwi.data[i];
        Tensor dsi = matmul(dproj, transpose(w));
        for (std::size_t i = 0; i < dstack.numel(); ++i) dstack.data[i] += dsi.data[i];
    };
    accum(dq, p.attn_wq, g.attn_wq);
    accum(dk, p.attn_wk, g.attn_wk);
    accum(dv, p.attn_wv, g.attn_wv);
    return dstack;
}

// ---------------------------------------------------------------------------
// Weighted integration: alpha*V_img + beta*V_txt + gamma*V_vec.
// ---------------------------------------------------------------------------

inline Tensor weighted_integration(const Tensor& v_img, const Tensor& v_txt,
                                   const Tensor& v_vec, double alpha, double beta,
                                   double gamma) {
    Tensor out({v_img.numel()});
    for (std::size_t j = 0; j < out.numel(); ++j)
        out[j] = alpha * v_img[j] + beta * v_txt[j] + gamma * v_vec[j];
    return out;
}

// ---------------------------------------------------------------------------
// Alignment losses over a batch of projected features.
// ---------------------------------------------------------------------------

constexpr double kMiEps = 1e-6;

// Per-dimension Gaussian mutual-information surrogate:
//   L_MI = 0.5 * sum_j ln(1 - rho_j^2 + eps),
// rho_j the Pearson correlation of column j across the batch. More negative
// means higher estimated mutual information. Zero-variance columns count as
// rho = 0.
inline double mi_loss(const Tensor& batch_a, const Tensor& batch_b,
                      Tensor* dbatch_a = nullptr, Tensor* dbatch_b = nullptr) {
    if (!batch_a.same_shape(batch_b))
        throw std::invalid_argument("mi_loss: shape mismatch " + batch_a.shape_str() +
                                    " vs " + batch_b.shape_str());
    const std::size_t n = batch_a.rows(), d = batch_a.cols();
    if (n < 3) throw std::invalid_argument("mi_loss: batch too small (need >= 3 rows)");

    double loss = 0.0;
    const double tiny = 1e-300;
    for (std::size_t j = 0; j < d; ++j) {
        double ma = 0.0, mb = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            ma += batch_a.at(i, j);
            mb += batch_b.at(i, j);
        }
        ma /= static_cast<double>(n);
        mb /= static_cast<double>(n);
        double saa = 0.0, sbb = 0.0, sab = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double da = batch_a.at(i, j) - ma;
            const double db = batch_b.at(i, j) - mb;
            saa += da * da;
            sbb += db * db;
            sab += da * db;
        }
        double rho = 0.0;
        bool degenerate = saa <= tiny || sbb <= tiny;
        if (!degenerate) rho = sab / std::sqrt(saa * sbb);
        loss += 0.5 * std::log(1.0 - rho * rho + kMiEps);
        if ((dbatch_a || dbatch_b) && !degenerate) {
            const double dl_drho = -rho / (1.0 - rho * rho + kMiEps);
            const double inv = 1.0 / std::sqrt(saa * sbb);
            for (std::size_t i = 0; i < n; ++i) {
                const double da = batch_a.at(i, j) - ma;
                const double db = batch_b.at(i, j) - mb;
                if (dbatch_a)
                    dbatch_a->at(i, j) += dl_drho * (db * inv - rho * da / saa);
                if (dbatch_b)
                    dbatch_b->at(i, j) += dl_drho * (da * inv - rho * db / sbb);
            }
        }
    }
    return loss;
}

// Jensen-Shannon divergence between per-row softmax distributions, natural
// log, averaged over the batch. Bounded in [0, ln 2].
inline double js_loss(const Tensor& batch_a, const Tensor& batch_b,
                      Tensor* dbatch_a = nullptr, Tensor* dbatch_b = nullptr) {
    if (!batch_a.same_shape(batch_b))
        throw std::invalid_argument("js_loss: shape mismatch " + batch_a.shape_str() +
                                    " vs " + batch_b.shape_str());
    const std::size_t n = batch_a.rows(), d = batch_a.cols();
    if (n == 0) throw std::invalid_argument("js_loss: empty batch");

    Tensor pa = softmax_rows(batch_a);
    Tensor pb = softmax_rows(batch_b);
    double total = 0.0;
    Tensor dpa({n, d}), dpb({n, d});
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            const double p = pa.at(i, j), q = pb.at(i, j);
            const double m = 0.5 * (p + q);
            if (p > 0.0) total += 0.5 * p * std::log(p / m);
            if (q > 0.0) total += 0.5 * q * std::log(q / m);
            if (dbatch_a && p > 0.0) dpa.at(i, j) = 0.5 * std::log(p / m);
            if (dbatch_b && q > 0.0) dpb.at(i, j) = 0.5 * std::log(q / m);
        }
    }
    const double inv_n = 1.0 / static_cast<double>(n);
    if (dbatch_a) {
        Tensor dz = softmax_rows_backward(pa, dpa);
        for (std::size_t i = 0; i < dz.numel(); ++i) dbatch_a->data[i] += dz.data[i] * inv_n;
    }
    if (dbatch_b) {
        Tensor dz = softmax_rows_backward(pb, dpb);
        for (std::size_t i = 0; i < dz.numel(); ++i) dbatch_b->data[i] += dz.data[i] * inv_n;
    }
    return total * inv_n;
}

// ---------------------------------------------------------------------------
// Dynamic modality prioritization.
// ---------------------------------------------------------------------------

// Differentiable in the modality weights; relevance is a constant input.
inline std::array<double, 3> compute_priorities(const Tensor& mod_w,
                                                const std::array<double, 3>& relevance) {
    std::array<double, 3> raw{};
    double sum = 0.0;
    for (std::size_t m = 0; m < 3; ++m) {
        raw[m] = mod_w[m] * relevance[m];
        sum += raw[m];
    }
    if (sum <= 0.0)
        throw NumericError("compute_priorities: degenerate priority sum " +
                           std::to_string(sum));
    return {raw[0] / sum, raw[1] / sum, raw[2] / sum};
}

// EMA update of the relevance estimates followed by priority computation.
inline std::array<double, 3> update_priorities(PriorityState& state,
                                               const std::array<double, 3>& accuracy,
                                               const Tensor& mod_w) {
    for (std::size_t m = 0; m < 3; ++m) {
        if (accuracy[m] < 0.0 || accuracy[m] > 1.0)
            throw std::invalid_argument("update_priorities: accuracy out of [0,1]");
        state.relevance[m] =
            state.decay * state.relevance[m] + (1.0 - state.decay) * accuracy[m];
    }
    return compute_priorities(mod_w, state.relevance);
}

// d(priorities)/d(mod_w): dP_m/dw_n = (delta_mn - P_m) * r_n / sum(raw).
inline void priorities_backward(const Tensor& mod_w,
                                const std::array<double, 3>& relevance,
                                const std::array<double, 3>& dP, Tensor& dmod_w) {
    double sum = 0.0;
    std::array<double, 3> raw{};
    for (std::size_t m = 0; m < 3; ++m) {
        raw[m] = mod_w[m] * relevance[m];
        sum += raw[m];
    }
    std::array<double, 3> p{raw[0] / sum, raw[1] / sum, raw[2] / sum};
    for (std::size_t n = 0; n < 3; ++n) {
        double acc = 0.0;
        for (std::size_t m = 0; m < 3; ++m) {
            const double dP_dw = ((m == n ? 1.0 : 0.0) - p[m]) * relevance[n] / sum;
            acc += dP[m] * dP_dw;
        }
        dmod_w[n] += acc;
    }
}

inline Tensor prioritized_fusion(const Tensor& v_img, const Tensor& v_txt,
                                 const Tensor& v_vec, const std::array<double, 3>& p) {
    for (double v : p)
        if (v < 0.0) throw std::invalid_argument("prioritized_fusion: negative priority");
    return weighted_integration(v_img, v_txt, v_vec, p[0], p[1], p[2]);
}

// ---------------------------------------------------------------------------
// Final fusion: concat(attention, custom, aligned, prioritized) -> phi_F.
// ---------------------------------------------------------------------------

struct FinalFusionCache {
    Tensor concat; // [1 x 4d]
    Tensor pre;    // [1 x 4d] before relu
};

inline Tensor final_fusion(const Tensor& v_att, const Tensor& v_cus,
                           const Tensor& v_ali, const Tensor& v_pri,
                           const FusionParams& p, FinalFusionCache* cache) {
    const std::size_t d = v_att.numel();
    if (v_cus.numel() != d || v_ali.numel() != d || v_pri.numel() != d)
        throw std::invalid_argument("final_fusion: component length mismatch");
    Tensor concat({1, 4 * d});
    for (std::size_t j = 0; j < d; ++j) {
        concat.at(0, j) = v_att[j];
        concat.at(0, d + j) = v_cus[j];
        concat.at(0, 2 * d + j) = v_ali[j];
        concat.at(0, 3 * d + j) = v_pri[j];
    }
    Tensor pre = linear_forward(concat, p.final_w, &p.final_b);
    Tensor act = relu(pre);
    Tensor out({4 * d}, act.data);
    if (cache) {
        cache->concat = std::move(concat);
        cache->pre = std::move(pre);
    }
    return out;
}

// Returns the gradient with respect to the concatenated input as [1 x 4d].
inline Tensor final_fusion_backward(const FinalFusionCache& c, const FusionParams& p,
                                    const Tensor& dout, FusionParams& g) {
    Tensor dact({1, dout.numel()}, dout.data);
    Tensor dpre = relu_backward(c.pre, dact);
    return linear_backward(c.concat, p.final_w, dpre, g.final_w, &g.final_b);
}

} // namespace mmq
