#pragma once

#include <string>
#include <vector>

#include "mmq/bundle.hpp"
#include "mmq/quantizer.hpp"
#include "mmq/trainer.hpp"

namespace mmq {

// Replaces the weights of every policy-selected layer with int4 codes plus
// per-channel scales; everything else (biases, norms, embeddings, state)
// passes through bit-exact. Layers that are already int4 are dequantized
// first, so re-application with the same stats is a fixed point.
inline Bundle apply_awq(const Bundle& fp, const CalibStats& stats,
                        const QuantPolicy& policy) {
    policy.validate();
    if (policy.bits > 4)
        throw ConfigError("apply_awq: int4 bundles cannot hold " +
                          std::to_string(policy.bits) + "-bit codes");

    std::vector<std::string> missing;
    Bundle out;
    out.layers = fp.layers;

    BundleFlags flags = BundleFlags::decode(fp.flags);
    flags.quantized = true;
    flags.bits = policy.bits;
    flags.alpha = policy.alpha;
    out.flags = flags.encode();
    out.version = fp.version;

    for (auto& [name, layer] : out.layers) {
        if (layer.shape.size() != 2 || !policy_selects(policy, name)) continue;
        auto it = stats.layers.find(name);
        if (it == stats.layers.end()) {
            missing.push_back(name);
            continue;
        }
        if (it->second.channels != layer.shape[0]) {
            missing.push_back(name + " (channel mismatch)");
            continue;
        }
        std::vector<bool> degenerate;
        std::vector<double> scales =
            layer_scales(it->second, policy.alpha, policy.bits, &degenerate);
        Tensor w = bundle_layer_values(layer);
        layer.q = quantize_weights(w, scales, policy.bits, &degenerate);
        layer.dtype = LayerDtype::int4;
        layer.f32.clear();
    }
    if (!missing.empty()) {
        std::string msg = "apply_awq: missing calibration stats for:";
        for (const std::string& n : missing) msg += " " + n;
        throw ConfigError(msg);
    }
    return out;
}

struct LayerDiff {
    std::string name;
    double max_abs = 0.0;
    double mean_abs = 0.0;
};

struct QuantizationReport {
    double fp_accuracy = 0.0;
    double q_accuracy = 0.0;
    double agreement = 0.0;
    std::size_t fp_payload_bytes = 0;
    std::size_t q_payload_bytes = 0;
    double whole_ratio = 0.0;
    std::size_t selected_fp_bytes = 0;
    std::size_t selected_code_bytes = 0;
    double selected_ratio = 0.0;
    std::vector<LayerDiff> layer_diffs;
};

inline QuantizationReport quantization_report(const Bundle& fp, const Bundle& q,
                                              const std::vector<BatchSample>& split) {
    for (const auto& [name, layer] : fp.layers) {
        auto it = q.layers.find(name);
        if (it == q.layers.end() || it->second.shape != layer.shape)
            throw ConfigError("quantization_report: architecture mismatch at " + name);
    }
    if (q.layers.size() != fp.layers.size())
        throw ConfigError("quantization_report: architecture mismatch (layer count)");

    QuantizationReport r;
    Model fp_model = bundle_to_model(fp);
    Model q_model = bundle_to_model(q);
    if (!split.empty()) {
        // sequence length is a data property, not a weight property
        fp_model.cfg.text.seq_len = split.front().tokens.size();
        q_model.cfg.text.seq_len = split.front().tokens.size();
    }

    std::size_t agree = 0, fp_hits = 0, q_hits = 0;
    for (const BatchSample& s : split) {
        const int pf = model_predict(fp_model, s);
        const int pq = model_predict(q_model, s);
        if (pf == pq) ++agree;
        if (pf == s.label) ++fp_hits;
        if (pq == s.label) ++q_hits;
    }
    const double n = static_cast<double>(split.size());
    r.fp_accuracy = fp_hits / n;
    r.q_accuracy = q_hits / n;
    r.agreement = agree / n;

    r.fp_payload_bytes = fp.payload_bytes();
    r.q_payload_bytes = q.payload_bytes();
    r.whole_ratio = static_cast<double>(r.fp_payload_bytes) /
                    static_cast<double>(r.q_payload_bytes);

    for (const auto& [name, qlayer] : q.layers) {
        if (qlayer.dtype != LayerDtype::int4) continue;
        const BundleLayer& flayer = fp.layers.at(name);
        r.selected_fp_bytes += 4 * flayer.numel();
        r.selected_code_bytes += (qlayer.numel() + 1) / 2;
        Tensor orig = bundle_layer_values(flayer);
        Tensor deq = bundle_layer_values(qlayer);
        LayerDiff d;
        d.name = name;
        for (std::size_t i = 0; i < orig.numel(); ++i) {
            const double diff = std::abs(orig.data[i] - deq.data[i]);
            d.max_abs = std::max(d.max_abs, diff);
            d.mean_abs += diff / static_cast<double>(orig.numel());
        }
        r.layer_diffs.push_back(std::move(d));
    }
    r.selected_ratio = r.selected_code_bytes == 0
                           ? 0.0
                           : static_cast<double>(r.selected_fp_bytes) /
                                 static_cast<double>(r.selected_code_bytes);
    return r;
}

inline std::string format_quantization_report(const QuantizationReport& r) {
    char buf[256];
    std::string out;
    std::snprintf(buf, sizeof(buf), "%-28s %16s %16s\n", "metric", "full_precision",
                  "awq_int4");
    out += buf;
    std::snprintf(buf, sizeof(buf), "%-28s %16.4f %16.4f\n", "accuracy",
                  r.fp_accuracy, r.q_accuracy);
    out += buf;
    std::snprintf(buf, sizeof(buf), "%-28s %16zu %16zu\n", "weight_payload_bytes",
                  r.fp_payload_bytes, r.q_payload_bytes);
    out += buf;
    std::snprintf(buf, sizeof(buf), "%-28s %33.4f\n", "whole_bundle_ratio",
                  r.whole_ratio);
    out += buf;
    std::snprintf(buf, sizeof(buf), "%-28s %33.4f\n", "selected_weight_ratio",
                  r.selected_ratio);
    out += buf;
    std::snprintf(buf, sizeof(buf), "%-28s %33.4f\n", "argmax_agreement", r.agreement);
    out += buf;
    for (const LayerDiff& d : r.layer_diffs) {
        std::snprintf(buf, sizeof(buf), "layer %-32s max|dW|=%.6g mean|dW|=%.6g\n",
                      d.name.c_str(), d.max_abs, d.mean_abs);
        out += buf;
    }
    return out;
}

} // namespace mmq
