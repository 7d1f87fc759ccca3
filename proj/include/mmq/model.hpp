#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "mmq/encoders.hpp"
#include "mmq/errors.hpp"
#include "mmq/fusion.hpp"
#include "mmq/head.hpp"
#include "mmq/rng.hpp"
#include "mmq/tensor.hpp"

namespace mmq {

struct ModelConfig {
    ImageDims image;
    TextDims text;
    std::size_t vec_in = 5;
    std::size_t vec_hidden = 16;
    std::size_t d = 100;
    std::size_t head_hidden = 50;
    std::size_t classes = 5;
    FusionStrategy strategy = FusionStrategy::complete;
    // The MI surrogate sums ~d log terms, so its raw magnitude is two orders
    // above the cross-entropy at d=100; 0.01 keeps classification dominant.
    double lambda_mi = 0.01;
    double lambda_js = 1.0;
    double lambda_align = 0.1;
    double dropout = 0.1;

    std::size_t fused_dim() const { return 4 * d; }
    std::size_t adapter_in_dim() const {
        return strategy == FusionStrategy::stacking ? 3 * d : d;
    }
    bool uses_attention() const {
        return strategy == FusionStrategy::complete ||
               strategy == FusionStrategy::attention_only;
    }
    bool uses_mix() const {
        return strategy == FusionStrategy::complete ||
               strategy == FusionStrategy::weighted_only;
    }
    bool uses_alignment() const {
        return strategy == FusionStrategy::complete ||
               strategy == FusionStrategy::alignment_only;
    }
    bool is_complete() const { return strategy == FusionStrategy::complete; }
};

struct Model {
    ModelConfig cfg;
    ImageEncoderParams img;
    TextEncoderParams txt;
    VectorEncoderParams vec;
    FusionParams fusion;
    HeadParams head;
    PriorityState state;
};

template <class ModelT, class F>
void for_each_param(ModelT& m, F&& f) {
    ImageEncoderParams::visit(m.img, f);
    TextEncoderParams::visit(m.txt, f);
    VectorEncoderParams::visit(m.vec, f);
    FusionParams::visit(m.fusion, f);
    HeadParams::visit(m.head, f);
}

// Zero-valued model with the right tensor shapes for cfg; also the gradient
// container for a matching model.
inline Model make_model(const ModelConfig& cfg) {
    Model m;
    m.cfg = cfg;
    const std::size_t dx = cfg.image.dim, dt = cfg.text.dim, d = cfg.d;

    m.img.patch_w = Tensor({cfg.image.patch_len(), dx});
    m.img.patch_b = Tensor({dx});
    m.img.blocks.resize(cfg.image.shifts.size());
    for (auto& b : m.img.blocks) {
        b.ln1_gamma = Tensor({dx});
        b.ln1_beta = Tensor({dx});
        b.attn.wq = Tensor({dx, dx});
        b.attn.wk = Tensor({dx, dx});
        b.attn.wv = Tensor({dx, dx});
        b.attn.wo = Tensor({dx, dx});
        b.ffn_w1 = Tensor({dx, 2 * dx});
        b.ffn_w2 = Tensor({2 * dx, dx});
        b.ln2_gamma = Tensor({dx});
        b.ln2_beta = Tensor({dx});
    }

    m.txt.embedding = Tensor({cfg.text.vocab, dt});
    m.txt.layers.resize(cfg.text.layers);
    for (auto& l : m.txt.layers) {
        l.ln1_gamma = Tensor({dt});
        l.ln1_beta = Tensor({dt});
        l.attn.wq = Tensor({dt, dt});
        l.attn.wk = Tensor({dt, dt});
        l.attn.wv = Tensor({dt, dt});
        l.attn.wo = Tensor({dt, dt});
        l.ffn_w1 = Tensor({dt, 2 * dt});
        l.ffn_w2 = Tensor({2 * dt, dt});
        l.ln2_gamma = Tensor({dt});
        l.ln2_beta = Tensor({dt});
    }

    m.vec.w1 = Tensor({cfg.vec_in, cfg.vec_hidden});
    m.vec.b1 = Tensor({cfg.vec_hidden});
    m.vec.w2 = Tensor({cfg.vec_hidden, d});
    m.vec.b2 = Tensor({d});

    m.fusion.proj_img_w = Tensor({dx, d});
    m.fusion.proj_img_b = Tensor({d});
    m.fusion.proj_txt_w = Tensor({dt, d});
    m.fusion.proj_txt_b = Tensor({d});
    if (cfg.uses_attention()) {
        m.fusion.attn_wq = Tensor({d, d});
        m.fusion.attn_wk = Tensor({d, d});
        m.fusion.attn_wv = Tensor({d, d});
    }
    if (cfg.uses_mix()) m.fusion.mix = Tensor({3});
    if (cfg.uses_alignment()) {
        m.fusion.align_w = Tensor({d, d});
        m.fusion.align_b = Tensor({d});
    }
    if (cfg.is_complete()) {
        m.fusion.mod_w = Tensor({3});
        m.fusion.final_w = Tensor({4 * d, 4 * d});
        m.fusion.final_b = Tensor({4 * d});
        m.fusion.probe_img_w = Tensor({d, cfg.classes});
        m.fusion.probe_img_b = Tensor({cfg.classes});
        m.fusion.probe_txt_w = Tensor({d, cfg.classes});
        m.fusion.probe_txt_b = Tensor({cfg.classes});
        m.fusion.probe_vec_w = Tensor({d, cfg.classes});
        m.fusion.probe_vec_b = Tensor({cfg.classes});
    } else {
        m.fusion.adapter_w = Tensor({cfg.adapter_in_dim(), 4 * d});
        m.fusion.adapter_b = Tensor({4 * d});
    }

    m.head.w1 = Tensor({cfg.fused_dim(), cfg.head_hidden});
    m.head.b1 = Tensor({cfg.head_hidden});
    m.head.w2 = Tensor({cfg.head_hidden, cfg.classes});
    m.head.b2 = Tensor({cfg.classes});
    m.head.dropout = cfg.dropout;
    return m;
}

// uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) per tensor, one named stream each.
// LayerNorm affines start at identity, mixing coefficients at 1/3, modality
// weights at 1.
inline Model init_model(const ModelConfig& cfg, std::uint64_t seed) {
    Model m = make_model(cfg);
    for_each_param(m, [&](const std::string& name, Tensor& t) {
        RngStream rng(seed, stream::kInit + stream::name_tag(name.c_str()));
        if (name.find("gamma") != std::string::npos) {
            std::fill(t.data.begin(), t.data.end(), 1.0);
        } else if (name.find("beta") != std::string::npos) {
            std::fill(t.data.begin(), t.data.end(), 0.0);
        } else if (name == "fusion.mix") {
            std::fill(t.data.begin(), t.data.end(), 1.0 / 3.0);
        } else if (name == "fusion.mod_w") {
            std::fill(t.data.begin(), t.data.end(), 1.0);
        } else {
            const std::size_t fan_in = t.rank() == 2 ? t.rows() : t.numel();
            const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
            for (double& v : t.data) v = rng.uniform(-bound, bound);
        }
    });
    return m;
}

// ---------------------------------------------------------------------------
// Batch forward / backward
// ---------------------------------------------------------------------------

struct BatchSample {
    Tensor image; // [C x H x W] preprocessed
    std::vector<std::uint16_t> tokens;
    Tensor vec; // [classes] preprocessed
    int label = 0;
};

struct SampleForward {
    ImageEncodeCache img;
    TextEncodeCache txt;
    VectorEncodeCache vec;
    ProjectCache proj;
    StackedAttentionCache att;
    FinalFusionCache ffc;
    Tensor adapter_in;  // [1 x k] (non-complete)
    Tensor adapter_pre; // [1 x 4d]
    HeadCache head;

    Tensor x_out, t_out, v_out;
    Tensor v_img, v_txt, v_vec;
    Tensor v_att, v_cus, v_ali, v_pri;
    Tensor v_fused;
    Tensor logits;
};

struct BatchForward {
    std::vector<SampleForward> samples;
    Tensor v_img_batch, v_txt_batch; // [B x d] inputs to the align projection
    Tensor g_img_batch, g_txt_batch; // [B x d] projected
    std::array<double, 3> priorities{};
    double ce = 0.0;
    double l_mi = 0.0;
    double l_js = 0.0;
    double l_align = 0.0;
    double total = 0.0;
    std::vector<int> predictions;
};

inline int argmax_index(const Tensor& t) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < t.numel(); ++j)
        if (t[j] > t[best]) best = j;
    return static_cast<int>(best);
}

// dropout_masks: one [4d] 0/1 tensor per sample in training mode, nullptr in
// eval mode. The loss is ce mean + lambda_align * L_align; the MI term needs
// at least 3 rows and contributes 0 on smaller batches.
inline BatchForward model_forward_batch(const Model& m,
                                        const std::vector<BatchSample>& batch,
                                        const std::vector<Tensor>* dropout_masks) {
    const ModelConfig& cfg = m.cfg;
    const std::size_t bsz = batch.size();
    BatchForward out;
    out.samples.resize(bsz);

    if (cfg.is_complete())
        out.priorities = compute_priorities(m.fusion.mod_w, m.state.relevance);

    if (cfg.uses_alignment()) {
        out.v_img_batch = Tensor({bsz, cfg.d});
        out.v_txt_batch = Tensor({bsz, cfg.d});
    }

    for (std::size_t i = 0; i < bsz; ++i) {
        SampleForward& s = out.samples[i];
        s.x_out = image_encode(batch[i].image, m.img, cfg.image, &s.img);
        s.t_out = text_encode(batch[i].tokens, m.txt, cfg.text, &s.txt);
        s.v_out = vector_encode(batch[i].vec, m.vec, &s.vec);
        project_modalities(s.x_out, s.t_out, s.v_out, m.fusion, s.v_img, s.v_txt,
                           s.v_vec, &s.proj);

        if (cfg.uses_attention())
            s.v_att = stacked_attention(s.v_img, s.v_txt, s.v_vec, m.fusion, &s.att);
        if (cfg.uses_mix())
            s.v_cus = weighted_integration(s.v_img, s.v_txt, s.v_vec, m.fusion.mix[0],
                                           m.fusion.mix[1], m.fusion.mix[2]);
        if (cfg.uses_alignment()) {
            for (std::size_t j = 0; j < cfg.d; ++j) {
                out.v_img_batch.at(i, j) = s.v_img[j];
                out.v_txt_batch.at(i, j) = s.v_txt[j];
            }
        }
        if (cfg.is_complete())
            s.v_pri = prioritized_fusion(s.v_img, s.v_txt, s.v_vec, out.priorities);
    }

    if (cfg.uses_alignment()) {
        out.g_img_batch = linear_forward(out.v_img_batch, m.fusion.align_w,
                                         &m.fusion.align_b);
        out.g_txt_batch = linear_forward(out.v_txt_batch, m.fusion.align_w,
                                         &m.fusion.align_b);
        out.l_mi = bsz >= 3 ? mi_loss(out.g_img_batch, out.g_txt_batch) : 0.0;
        out.l_js = js_loss(out.g_img_batch, out.g_txt_batch);
        out.l_align = cfg.lambda_mi * out.l_mi + cfg.lambda_js * out.l_js;
    }

    for (std::size_t i = 0; i < bsz; ++i) {
        SampleForward& s = out.samples[i];
        if (cfg.uses_alignment()) {
            s.v_ali = Tensor({cfg.d});
            for (std::size_t j = 0; j < cfg.d; ++j)
                s.v_ali[j] = 0.5 * (out.g_img_batch.at(i, j) + out.g_txt_batch.at(i, j));
        }

        if (cfg.is_complete()) {
            s.v_fused = final_fusion(s.v_att, s.v_cus, s.v_ali, s.v_pri, m.fusion,
                                     &s.ffc);
        } else {
            const Tensor* sel = nullptr;
            Tensor stack_in;
            switch (cfg.strategy) {
                case FusionStrategy::stacking: {
                    stack_in = Tensor({3 * cfg.d});
                    for (std::size_t j = 0; j < cfg.d; ++j) {
                        stack_in[j] = s.v_img[j];
                        stack_in[cfg.d + j] = s.v_txt[j];
                        stack_in[2 * cfg.d + j] = s.v_vec[j];
                    }
                    sel = &stack_in;
                    break;
                }
                case FusionStrategy::attention_only: sel = &s.v_att; break;
                case FusionStrategy::weighted_only: sel = &s.v_cus; break;
                case FusionStrategy::alignment_only: sel = &s.v_ali; break;
                case FusionStrategy::complete: break;
            }
            s.adapter_in = Tensor({1, sel->numel()}, sel->data);
            s.adapter_pre =
                linear_forward(s.adapter_in, m.fusion.adapter_w, &m.fusion.adapter_b);
            Tensor act = relu(s.adapter_pre);
            s.v_fused = Tensor({act.cols()}, act.data);
        }

        const Tensor* mask = dropout_masks ? &(*dropout_masks)[i] : nullptr;
        s.logits = decision_forward(s.v_fused, m.head, mask, &s.head);
        out.ce += cross_entropy(s.logits, static_cast<std::size_t>(batch[i].label));
        out.predictions.push_back(argmax_index(s.logits));
    }
    out.ce /= static_cast<double>(bsz);
    out.total = total_loss(out.ce, out.l_align, cfg.lambda_align);
    return out;
}

// Accumulates d(total)/d(param) into `grads` (a zero-initialized model of the
// same config). Probe parameters are trained through a separate channel and
// receive nothing here.
inline void model_backward_batch(const Model& m, const std::vector<BatchSample>& batch,
                                 const BatchForward& fwd,
                                 const std::vector<Tensor>* dropout_masks,
                                 Model& grads) {
    const ModelConfig& cfg = m.cfg;
    const std::size_t bsz = batch.size();
    const double inv_b = 1.0 / static_cast<double>(bsz);

    Tensor dg_img, dg_txt;
    if (cfg.uses_alignment()) {
        dg_img = Tensor({bsz, cfg.d});
        dg_txt = Tensor({bsz, cfg.d});
        // alignment loss contribution, straight from the batch estimators
        if (bsz >= 3) {
            Tensor dmi_a({bsz, cfg.d}), dmi_b({bsz, cfg.d});
            mi_loss(fwd.g_img_batch, fwd.g_txt_batch, &dmi_a, &dmi_b);
            const double w = cfg.lambda_align * cfg.lambda_mi;
            for (std::size_t i = 0; i < dg_img.numel(); ++i) {
                dg_img.data[i] += w * dmi_a.data[i];
                dg_txt.data[i] += w * dmi_b.data[i];
            }
        }
        {
            Tensor djs_a({bsz, cfg.d}), djs_b({bsz, cfg.d});
            js_loss(fwd.g_img_batch, fwd.g_txt_batch, &djs_a, &djs_b);
            const double w = cfg.lambda_align * cfg.lambda_js;
            for (std::size_t i = 0; i < dg_img.numel(); ++i) {
                dg_img.data[i] += w * djs_a.data[i];
                dg_txt.data[i] += w * djs_b.data[i];
            }
        }
    }

    std::array<double, 3> dP{0.0, 0.0, 0.0};
    std::vector<Tensor> dv_img(bsz), dv_txt(bsz), dv_vec(bsz);

    for (std::size_t i = 0; i < bsz; ++i) {
        const SampleForward& s = fwd.samples[i];
        Tensor dlogits = cross_entropy_backward(s.logits,
                                                static_cast<std::size_t>(batch[i].label));
        for (double& v : dlogits.data) v *= inv_b;
        const Tensor* mask = dropout_masks ? &(*dropout_masks)[i] : nullptr;
        Tensor dv_fused = decision_backward(s.head, m.head, mask, dlogits, grads.head);

        dv_img[i] = Tensor({cfg.d});
        dv_txt[i] = Tensor({cfg.d});
        dv_vec[i] = Tensor({cfg.d});

        auto add_attention = [&](const Tensor& dv_att) {
            Tensor dstack =
                stacked_attention_backward(s.att, m.fusion, dv_att, grads.fusion);
            for (std::size_t j = 0; j < cfg.d; ++j) {
                dv_img[i][j] += dstack.at(0, j);
                dv_txt[i][j] += dstack.at(1, j);
                dv_vec[i][j] += dstack.at(2, j);
            }
        };
        auto add_mix = [&](const Tensor& dv_cus) {
            for (std::size_t j = 0; j < cfg.d; ++j) {
                grads.fusion.mix[0] += dv_cus[j] * s.v_img[j];
                grads.fusion.mix[1] += dv_cus[j] * s.v_txt[j];
                grads.fusion.mix[2] += dv_cus[j] * s.v_vec[j];
                dv_img[i][j] += m.fusion.mix[0] * dv_cus[j];
                dv_txt[i][j] += m.fusion.mix[1] * dv_cus[j];
                dv_vec[i][j] += m.fusion.mix[2] * dv_cus[j];
            }
        };
        auto add_aligned = [&](const Tensor& dv_ali) {
            for (std::size_t j = 0; j < cfg.d; ++j) {
                dg_img.at(i, j) += 0.5 * dv_ali[j];
                dg_txt.at(i, j) += 0.5 * dv_ali[j];
            }
        };

        if (cfg.is_complete()) {
            Tensor dconcat =
                final_fusion_backward(s.ffc, m.fusion, dv_fused, grads.fusion);
            Tensor dv_att({cfg.d}), dv_cus({cfg.d}), dv_ali({cfg.d}), dv_pri({cfg.d});
            for (std::size_t j = 0; j < cfg.d; ++j) {
                dv_att[j] = dconcat.at(0, j);
                dv_cus[j] = dconcat.at(0, cfg.d + j);
                dv_ali[j] = dconcat.at(0, 2 * cfg.d + j);
                dv_pri[j] = dconcat.at(0, 3 * cfg.d + j);
            }
            add_attention(dv_att);
            add_mix(dv_cus);
            add_aligned(dv_ali);
            for (std::size_t j = 0; j < cfg.d; ++j) {
                dP[0] += dv_pri[j] * s.v_img[j];
                dP[1] += dv_pri[j] * s.v_txt[j];
                dP[2] += dv_pri[j] * s.v_vec[j];
                dv_img[i][j] += fwd.priorities[0] * dv_pri[j];
                dv_txt[i][j] += fwd.priorities[1] * dv_pri[j];
                dv_vec[i][j] += fwd.priorities[2] * dv_pri[j];
            }
        } else {
            Tensor dact({1, dv_fused.numel()}, dv_fused.data);
            Tensor dpre = relu_backward(s.adapter_pre, dact);
            Tensor dsel_m = linear_backward(s.adapter_in, m.fusion.adapter_w, dpre,
                                            grads.fusion.adapter_w,
                                            &grads.fusion.adapter_b);
            Tensor dsel({dsel_m.numel()}, dsel_m.data);
            switch (cfg.strategy) {
                case FusionStrategy::stacking:
                    for (std::size_t j = 0; j < cfg.d; ++j) {
                        dv_img[i][j] += dsel[j];
                        dv_txt[i][j] += dsel[cfg.d + j];
                        dv_vec[i][j] += dsel[2 * cfg.d + j];
                    }
                    break;
                case FusionStrategy::attention_only: add_attention(dsel); break;
                case FusionStrategy::weighted_only: add_mix(dsel); break;
                case FusionStrategy::alignment_only: add_aligned(dsel); break;
                case FusionStrategy::complete: break;
            }
        }
    }

    if (cfg.is_complete())
        priorities_backward(m.fusion.mod_w, m.state.relevance, dP, grads.fusion.mod_w);

    if (cfg.uses_alignment()) {
        Tensor dv_img_b = linear_backward(fwd.v_img_batch, m.fusion.align_w, dg_img,
                                          grads.fusion.align_w, &grads.fusion.align_b);
        Tensor dv_txt_b = linear_backward(fwd.v_txt_batch, m.fusion.align_w, dg_txt,
                                          grads.fusion.align_w, &grads.fusion.align_b);
        for (std::size_t i = 0; i < bsz; ++i)
            for (std::size_t j = 0; j < cfg.d; ++j) {
                dv_img[i][j] += dv_img_b.at(i, j);
                dv_txt[i][j] += dv_txt_b.at(i, j);
            }
    }

    // back through the common-space projection and the encoders
    for (std::size_t i = 0; i < bsz; ++i) {
        const SampleForward& s = fwd.samples[i];
        Tensor dvi({1, cfg.d}, dv_img[i].data);
        Tensor dvt({1, cfg.d}, dv_txt[i].data);
        Tensor dx_m = linear_backward(s.proj.x_out, m.fusion.proj_img_w, dvi,
                                      grads.fusion.proj_img_w, &grads.fusion.proj_img_b);
        Tensor dt_m = linear_backward(s.proj.t_out, m.fusion.proj_txt_w, dvt,
                                      grads.fusion.proj_txt_w, &grads.fusion.proj_txt_b);
        Tensor dx({dx_m.numel()}, dx_m.data);
        Tensor dt({dt_m.numel()}, dt_m.data);
        image_encode_backward(s.img, m.img, cfg.image, dx, grads.img);
        text_encode_backward(s.txt, m.txt, cfg.text, dt, grads.txt);
        vector_encode_backward(s.vec, m.vec, dv_vec[i], grads.vec);
    }
}

// Frozen-gradient linear probes: inputs are the detached projected features,
// so this trains the probe heads only. Returns per-modality batch accuracy.
inline std::array<double, 3> probe_step(const Model& m,
                                        const std::vector<BatchSample>& batch,
                                        const BatchForward& fwd, Model* grads,
                                        double* probe_loss) {
    const std::size_t bsz = batch.size();
    std::array<double, 3> accuracy{0.0, 0.0, 0.0};
    double loss = 0.0;
    const double inv_b = 1.0 / static_cast<double>(bsz);

    struct ProbeRef {
        const Tensor *w, *b;
        Tensor *dw, *db;
    };
    std::array<ProbeRef, 3> probes = {
        ProbeRef{&m.fusion.probe_img_w, &m.fusion.probe_img_b,
                 grads ? &grads->fusion.probe_img_w : nullptr,
                 grads ? &grads->fusion.probe_img_b : nullptr},
        ProbeRef{&m.fusion.probe_txt_w, &m.fusion.probe_txt_b,
                 grads ? &grads->fusion.probe_txt_w : nullptr,
                 grads ? &grads->fusion.probe_txt_b : nullptr},
        ProbeRef{&m.fusion.probe_vec_w, &m.fusion.probe_vec_b,
                 grads ? &grads->fusion.probe_vec_w : nullptr,
                 grads ? &grads->fusion.probe_vec_b : nullptr}};

    for (std::size_t i = 0; i < bsz; ++i) {
        const SampleForward& s = fwd.samples[i];
        const std::array<const Tensor*, 3> feats = {&s.v_img, &s.v_txt, &s.v_vec};
        for (std::size_t p = 0; p < 3; ++p) {
            Tensor x({1, feats[p]->numel()}, feats[p]->data);
            Tensor logits_m = linear_forward(x, *probes[p].w, probes[p].b);
            Tensor logits({logits_m.cols()}, logits_m.data);
            if (argmax_index(logits) == batch[i].label) accuracy[p] += inv_b;
            loss += inv_b * cross_entropy(logits, static_cast<std::size_t>(batch[i].label));
            if (grads) {
                Tensor dlogits = cross_entropy_backward(
                    logits, static_cast<std::size_t>(batch[i].label));
                for (double& v : dlogits.data) v *= inv_b;
                Tensor dy({1, dlogits.numel()}, dlogits.data);
                linear_backward(x, *probes[p].w, dy, *probes[p].dw, probes[p].db);
            }
        }
    }
    if (probe_loss) *probe_loss = loss;
    return accuracy;
}

// Eval-mode logits for one sample (no dropout, frozen priorities).
inline Tensor model_eval_logits(const Model& m, const BatchSample& sample) {
    std::vector<BatchSample> one{sample};
    BatchForward fwd = model_forward_batch(m, one, nullptr);
    return fwd.samples[0].logits;
}

inline int model_predict(const Model& m, const BatchSample& sample) {
    return argmax_index(model_eval_logits(m, sample));
}

} // namespace mmq
