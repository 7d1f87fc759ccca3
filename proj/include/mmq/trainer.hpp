#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "mmq/dataio.hpp"
#include "mmq/errors.hpp"
#include "mmq/model.hpp"
#include "mmq/rng.hpp"

namespace mmq {

struct TrainConfig {
    double lr = 1e-3;
    double momentum = 0.9;
    std::size_t epochs = 30;
    std::size_t batch_size = 8;
    double dropout = 0.1;
    std::size_t d = 100;
    double lambda_mi = 0.01; // see ModelConfig::lambda_mi
    double lambda_js = 1.0;
    double lambda_align = 0.1;
    FusionStrategy fusion_strategy = FusionStrategy::complete;
    std::uint64_t seed = 42;

    void validate() const {
        if (lr <= 0.0) throw ConfigError("lr must be > 0");
        if (momentum < 0.0 || momentum >= 1.0)
            throw ConfigError("momentum must be in [0,1)");
        if (epochs < 1) throw ConfigError("epochs must be >= 1");
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (dropout < 0.0 || dropout >= 1.0)
            throw ConfigError("dropout must be in [0,1)");
        if (d < 1) throw ConfigError("d must be >= 1");
        if (lambda_mi < 0.0 || lambda_js < 0.0 || lambda_align < 0.0)
            throw ConfigError("loss weights must be >= 0");
    }

    ModelConfig model_config() const {
        ModelConfig cfg;
        cfg.d = d;
        cfg.strategy = fusion_strategy;
        cfg.lambda_mi = lambda_mi;
        cfg.lambda_js = lambda_js;
        cfg.lambda_align = lambda_align;
        cfg.dropout = dropout;
        return cfg;
    }
};

// v <- mu*v + g; w <- w - lr*v. Modality weights are floored afterwards so
// priorities stay well defined.
inline void sgd_momentum_step(Model& m, const Model& grads, Model& velocity,
                              double lr, double mu) {
    std::vector<Tensor*> ps, vs;
    std::vector<const Tensor*> gs;
    for_each_param(m, [&](const std::string&, Tensor& t) { ps.push_back(&t); });
    for_each_param(const_cast<Model&>(grads),
                   [&](const std::string&, Tensor& t) { gs.push_back(&t); });
    for_each_param(velocity, [&](const std::string&, Tensor& t) { vs.push_back(&t); });
    if (ps.size() != gs.size() || ps.size() != vs.size())
        throw std::invalid_argument("sgd_momentum_step: parameter set mismatch");
    for (std::size_t k = 0; k < ps.size(); ++k) {
        if (!ps[k]->same_shape(*gs[k]) || !ps[k]->same_shape(*vs[k]))
            throw std::invalid_argument("sgd_momentum_step: shape mismatch at tensor " +
                                        std::to_string(k));
        for (std::size_t i = 0; i < ps[k]->numel(); ++i) {
            vs[k]->data[i] = mu * vs[k]->data[i] + gs[k]->data[i];
            ps[k]->data[i] -= lr * vs[k]->data[i];
        }
    }
    if (!m.fusion.mod_w.empty())
        for (double& w : m.fusion.mod_w.data) w = std::max(w, kModWeightFloor);
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

struct MetricsReport {
    std::size_t n = 0;
    double accuracy = 0.0;
    std::vector<std::vector<std::size_t>> confusion; // [true][predicted]
    std::vector<std::size_t> support;
    std::vector<double> precision, recall, f1;
    double macro_precision = 0.0, macro_recall = 0.0, macro_f1 = 0.0;
    double weighted_precision = 0.0, weighted_recall = 0.0, weighted_f1 = 0.0;
};

inline MetricsReport metrics_from_predictions(const std::vector<int>& labels,
                                              const std::vector<int>& predictions,
                                              std::size_t classes) {
    if (labels.size() != predictions.size() || labels.empty())
        throw std::invalid_argument("metrics_from_predictions: bad input sizes");
    MetricsReport r;
    r.n = labels.size();
    r.confusion.assign(classes, std::vector<std::size_t>(classes, 0));
    for (std::size_t i = 0; i < labels.size(); ++i)
        r.confusion[static_cast<std::size_t>(labels[i])]
                   [static_cast<std::size_t>(predictions[i])]++;

    std::size_t correct = 0;
    r.support.assign(classes, 0);
    r.precision.assign(classes, 0.0);
    r.recall.assign(classes, 0.0);
    r.f1.assign(classes, 0.0);
    for (std::size_t c = 0; c < classes; ++c) {
        correct += r.confusion[c][c];
        std::size_t tp = r.confusion[c][c], fp = 0, fn = 0;
        for (std::size_t o = 0; o < classes; ++o) {
            if (o == c) continue;
            fp += r.confusion[o][c];
            fn += r.confusion[c][o];
        }
        r.support[c] = tp + fn;
        r.precision[c] = tp + fp == 0 ? 0.0 : double(tp) / double(tp + fp);
        r.recall[c] = tp + fn == 0 ? 0.0 : double(tp) / double(tp + fn);
        r.f1[c] = r.precision[c] + r.recall[c] == 0.0
                      ? 0.0
                      : 2.0 * r.precision[c] * r.recall[c] /
                            (r.precision[c] + r.recall[c]);
    }
    r.accuracy = double(correct) / double(r.n);
    for (std::size_t c = 0; c < classes; ++c) {
        r.macro_precision += r.precision[c] / double(classes);
        r.macro_recall += r.recall[c] / double(classes);
        r.macro_f1 += r.f1[c] / double(classes);
        const double w = double(r.support[c]) / double(r.n);
        r.weighted_precision += w * r.precision[c];
        r.weighted_recall += w * r.recall[c];
        r.weighted_f1 += w * r.f1[c];
    }
    return r;
}

inline MetricsReport evaluate(const Model& m, const std::vector<BatchSample>& samples) {
    if (samples.empty()) throw std::invalid_argument("evaluate: empty split");
    std::vector<int> labels, preds;
    for (const BatchSample& s : samples) {
        labels.push_back(s.label);
        preds.push_back(model_predict(m, s));
    }
    return metrics_from_predictions(labels, preds, m.cfg.classes);
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct EpochRecord {
    std::size_t epoch = 0; // 1-based
    double train_loss = 0.0;
    double val_accuracy = 0.0;
};

struct TrainResult {
    Model best;
    std::size_t best_epoch = 0;
    double best_val_accuracy = 0.0;
    std::vector<EpochRecord> history;
};

namespace detail {

inline std::string layer_norm_summary(const Model& m) {
    std::string out;
    for_each_param(const_cast<Model&>(m), [&](const std::string& name, Tensor& t) {
        double l2 = 0.0;
        for (double v : t.data) l2 += v * v;
        char buf[160];
        std::snprintf(buf, sizeof(buf), " %s=%.4g", name.c_str(), std::sqrt(l2));
        out += buf;
    });
    return out;
}

} // namespace detail

inline std::vector<BatchSample> preprocess_ids(const Dataset& ds,
                                               const std::vector<int>& ids) {
    std::vector<BatchSample> out;
    out.reserve(ids.size());
    for (int id : ids) out.push_back(preprocess(ds.samples[static_cast<std::size_t>(id)]));
    return out;
}

// One model trained per the config; retains the parameters with the highest
// validation accuracy (ties resolve to the earlier epoch).
inline TrainResult train(const Dataset& ds, const TrainConfig& tc) {
    tc.validate();
    if (ds.train_ids.empty() || ds.val_ids.empty())
        throw ConfigError("train: dataset has empty splits");

    const ModelConfig mc = tc.model_config();
    Model model = init_model(mc, tc.seed);
    Model velocity = make_model(mc);

    std::map<int, BatchSample> by_id;
    for (int id : ds.train_ids)
        by_id.emplace(id, preprocess(ds.samples[static_cast<std::size_t>(id)]));
    std::vector<BatchSample> val = preprocess_ids(ds, ds.val_ids);

    TrainResult result;
    std::uint64_t batch_counter = 0;

    for (std::size_t epoch = 0; epoch < tc.epochs; ++epoch) {
        auto batches = make_batches(ds.train_ids, tc.batch_size, tc.seed, epoch);
        double epoch_loss = 0.0;
        for (std::size_t b = 0; b < batches.size(); ++b, ++batch_counter) {
            std::vector<BatchSample> batch;
            batch.reserve(batches[b].size());
            for (int id : batches[b]) batch.push_back(by_id.at(id));

            RngStream drop_rng(tc.seed, stream::kDropout + batch_counter);
            std::vector<Tensor> masks;
            masks.reserve(batch.size());
            for (std::size_t i = 0; i < batch.size(); ++i) {
                Tensor mask({mc.fused_dim()});
                for (double& v : mask.data)
                    v = drop_rng.bernoulli(1.0 - mc.dropout) ? 1.0 : 0.0;
                masks.push_back(std::move(mask));
            }

            BatchForward fwd = model_forward_batch(model, batch, &masks);
            if (!std::isfinite(fwd.total))
                throw NumericError(
                    "train: non-finite loss at epoch " + std::to_string(epoch + 1) +
                    " batch " + std::to_string(b) + "; parameter norms:" +
                    detail::layer_norm_summary(model));
            epoch_loss += fwd.total;

            Model grads = make_model(mc);
            model_backward_batch(model, batch, fwd, &masks, grads);

            std::array<double, 3> probe_acc{0, 0, 0};
            if (mc.is_complete()) probe_acc = probe_step(model, batch, fwd, &grads, nullptr);

            sgd_momentum_step(model, grads, velocity, tc.lr, tc.momentum);
            if (mc.is_complete()) update_priorities(model.state, probe_acc, model.fusion.mod_w);
        }
        epoch_loss /= static_cast<double>(batches.size());

        const double val_acc = evaluate(model, val).accuracy;
        result.history.push_back({epoch + 1, epoch_loss, val_acc});
        if (result.best_epoch == 0 || val_acc > result.best_val_accuracy) {
            result.best = model;
            result.best_epoch = epoch + 1;
            result.best_val_accuracy = val_acc;
        }
    }
    return result;
}

// ---------------------------------------------------------------------------
// Fusion-strategy ablation harness
// ---------------------------------------------------------------------------

struct AblationRow {
    FusionStrategy strategy;
    MetricsReport test_metrics;
};

// Trains one model per strategy with a shared seed; reports test metrics.
// No ordering among strategies is asserted anywhere.
inline std::vector<AblationRow> run_ablation(const Dataset& ds,
                                             const TrainConfig& base) {
    static const FusionStrategy kAll[] = {
        FusionStrategy::complete, FusionStrategy::stacking,
        FusionStrategy::attention_only, FusionStrategy::weighted_only,
        FusionStrategy::alignment_only};
    std::vector<BatchSample> test = preprocess_ids(ds, ds.test_ids);
    std::vector<AblationRow> rows;
    for (FusionStrategy s : kAll) {
        TrainConfig tc = base;
        tc.fusion_strategy = s;
        TrainResult r = train(ds, tc);
        rows.push_back({s, evaluate(r.best, test)});
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Text rendering
// ---------------------------------------------------------------------------

inline std::string format_metrics_table(const MetricsReport& r) {
    char buf[256];
    std::string out;
    std::snprintf(buf, sizeof(buf), "%-18s %9s %9s %9s %9s\n", "class", "precision",
                  "recall", "f1", "support");
    out += buf;
    for (std::size_t c = 0; c < r.precision.size(); ++c) {
        std::snprintf(buf, sizeof(buf), "%-18s %9.4f %9.4f %9.4f %9zu\n",
                      c < kNumClasses ? class_names()[c] : "?", r.precision[c],
                      r.recall[c], r.f1[c], r.support[c]);
        out += buf;
    }
    std::snprintf(buf, sizeof(buf), "%-18s %9.4f %9.4f %9.4f %9zu\n", "macro_avg",
                  r.macro_precision, r.macro_recall, r.macro_f1, r.n);
    out += buf;
    std::snprintf(buf, sizeof(buf), "%-18s %9.4f %9.4f %9.4f %9zu\n", "weighted_avg",
                  r.weighted_precision, r.weighted_recall, r.weighted_f1, r.n);
    out += buf;
    std::snprintf(buf, sizeof(buf), "accuracy=%.4f n=%zu\n", r.accuracy, r.n);
    out += buf;
    return out;
}

inline std::vector<std::pair<std::string, double>> metrics_records(
    const MetricsReport& r) {
    std::vector<std::pair<std::string, double>> kv;
    kv.emplace_back("accuracy", r.accuracy);
    kv.emplace_back("macro_precision", r.macro_precision);
    kv.emplace_back("macro_recall", r.macro_recall);
    kv.emplace_back("macro_f1", r.macro_f1);
    kv.emplace_back("weighted_precision", r.weighted_precision);
    kv.emplace_back("weighted_recall", r.weighted_recall);
    kv.emplace_back("weighted_f1", r.weighted_f1);
    for (std::size_t c = 0; c < r.precision.size(); ++c) {
        const std::string cls = c < kNumClasses ? class_names()[c] : std::to_string(c);
        kv.emplace_back("precision_" + cls, r.precision[c]);
        kv.emplace_back("recall_" + cls, r.recall[c]);
        kv.emplace_back("f1_" + cls, r.f1[c]);
    }
    return kv;
}

inline std::string format_history(const std::vector<EpochRecord>& history) {
    std::string out;
    char buf[128];
    for (const EpochRecord& e : history) {
        std::snprintf(buf, sizeof(buf), "epoch=%zu train_loss=%.6f val_accuracy=%.6f\n",
                      e.epoch, e.train_loss, e.val_accuracy);
        out += buf;
    }
    return out;
}

inline std::string format_ablation_table(const std::vector<AblationRow>& rows) {
    std::string out;
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%-18s %9s %9s %9s %9s %9s %9s %9s\n", "strategy",
                  "accuracy", "m_prec", "m_rec", "m_f1", "w_prec", "w_rec", "w_f1");
    out += buf;
    for (const AblationRow& row : rows) {
        const MetricsReport& r = row.test_metrics;
        std::snprintf(buf, sizeof(buf),
                      "%-18s %9.4f %9.4f %9.4f %9.4f %9.4f %9.4f %9.4f\n",
                      to_string(row.strategy), r.accuracy, r.macro_precision,
                      r.macro_recall, r.macro_f1, r.weighted_precision,
                      r.weighted_recall, r.weighted_f1);
        out += buf;
    }
    return out;
}

} // namespace mmq
