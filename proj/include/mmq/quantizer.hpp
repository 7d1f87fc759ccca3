#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <map>
#include <string>
#include <vector>

#include "mmq/errors.hpp"
#include "mmq/model.hpp"
#include "mmq/tensor.hpp"

namespace mmq {

// ---------------------------------------------------------------------------
// Activation-aware per-channel weight quantization. Channel i of a weight
// matrix (x*W convention: i indexes input channels / rows) gets the scale
//   s_i = quantile(|A_i|, alpha) / (2^b - 1)
// from calibration-time activation magnitudes; codes are signed
// two's-complement in [-2^(b-1), 2^(b-1)-1].
// ---------------------------------------------------------------------------

constexpr double kDegenerateScale = 1e-8;

struct QuantPolicy {
    std::size_t bits = 4;
    double alpha = 0.99;
    bool quantize_head = true;
    std::size_t calib_samples = 128;
    std::uint64_t calib_seed = 9001;

    void validate() const {
        if (bits < 2 || bits > 8)
            throw ConfigError("policy: bits must be in [2,8], got " +
                              std::to_string(bits));
        if (!(alpha > 0.0) || alpha > 1.0)
            throw ConfigError("policy: alpha must be in (0,1]");
        if (calib_samples == 0) throw ConfigError("policy: calib_samples must be >= 1");
    }
};

// Per-layer activation magnitudes. Most layers have one channel group;
// the fusion q/k/v projections keep one group per modality row.
struct LayerStats {
    std::size_t channels = 0;
    std::vector<std::vector<std::vector<double>>> groups; // [group][channel][obs]

    void init(std::size_t group_count, std::size_t channel_count) {
        channels = channel_count;
        groups.assign(group_count,
                      std::vector<std::vector<double>>(channel_count));
    }
    void record(std::size_t group, const double* row, std::size_t n) {
        auto& g = groups.at(group);
        for (std::size_t c = 0; c < n; ++c) g.at(c).push_back(std::abs(row[c]));
    }
};

struct CalibStats {
    std::map<std::string, LayerStats> layers;
    std::size_t sample_count = 0;
};

// Which layers the default component policy quantizes. Embeddings (token and
// patch), biases, norm affines and the priority state always stay fp32; the
// head is selected unless the policy opts out.
inline bool policy_selects(const QuantPolicy& p, const std::string& name) {
    auto ends_with = [&](const char* suffix) {
        const std::size_t n = std::strlen(suffix);
        return name.size() >= n && name.compare(name.size() - n, n, suffix) == 0;
    };
    if (name.rfind("img.block", 0) == 0)
        return name.find(".attn.w") != std::string::npos ||
               name.find(".ffn.w") != std::string::npos;
    if (name.rfind("txt.layer", 0) == 0)
        return ends_with(".attn.wk") || ends_with(".attn.wv");
    if (name == "vec.fc1.w" || name == "vec.fc2.w") return true;
    if (name.rfind("fusion.", 0) == 0)
        return name == "fusion.attn.wq" || name == "fusion.attn.wk" ||
               name == "fusion.attn.wv" || name == "fusion.proj_img.w" ||
               name == "fusion.proj_txt.w" || name == "fusion.align.w" ||
               name == "fusion.final.w" || name == "fusion.adapter.w" ||
               (name.rfind("fusion.probe_", 0) == 0 && ends_with(".w"));
    if (p.quantize_head) return name == "head.fc1.w" || name == "head.fc2.w";
    return false;
}

inline std::size_t group_count_for(const std::string& name) {
    return name == "fusion.attn.wq" || name == "fusion.attn.wk" ||
                   name == "fusion.attn.wv"
               ? 3
               : 1;
}

inline std::vector<std::string> quantizable_layers(const Model& m,
                                                   const QuantPolicy& p) {
    std::vector<std::string> names;
    for_each_param(const_cast<Model&>(m), [&](const std::string& name, Tensor& t) {
        if (t.rank() == 2 && policy_selects(p, name)) names.push_back(name);
    });
    return names;
}

// Eval-mode forward passes over the calibration set, recording |activation|
// per input channel at the tensor entering each selected matmul. Text k/v
// taps are the post-LayerNorm rows; fusion q/k/v keep per-modality groups.
inline CalibStats collect_calibration_stats(const Model& m,
                                            const std::vector<BatchSample>& samples,
                                            const QuantPolicy& policy) {
    if (samples.empty())
        throw ConfigError("collect_calibration_stats: empty calibration set");
    CalibStats stats;
    stats.sample_count = samples.size();

    for_each_param(const_cast<Model&>(m), [&](const std::string& name, Tensor& t) {
        if (t.rank() == 2 && policy_selects(policy, name)) {
            LayerStats ls;
            ls.init(group_count_for(name), t.rows());
            stats.layers.emplace(name, std::move(ls));
        }
    });

    auto tap = [&](const std::string& name, std::size_t group, const Tensor& rows) {
        auto it = stats.layers.find(name);
        if (it == stats.layers.end()) return;
        const std::size_t c = it->second.channels;
        if (rows.rank() == 1) {
            it->second.record(group, rows.data.data(), c);
        } else {
            for (std::size_t r = 0; r < rows.rows(); ++r)
                it->second.record(group, &rows.data[r * rows.cols()], c);
        }
    };

    for (const BatchSample& sample : samples) {
        std::vector<BatchSample> one{sample};
        BatchForward fwd = model_forward_batch(m, one, nullptr);
        const SampleForward& s = fwd.samples[0];

        for (std::size_t b = 0; b < s.img.blocks.size(); ++b) {
            const std::string prefix = "img.block" + std::to_string(b);
            const SwinBlockCache& bc = s.img.blocks[b];
            for (const MhaCache& w : bc.windows) {
                tap(prefix + ".attn.wq", 0, w.x);
                tap(prefix + ".attn.wk", 0, w.x);
                tap(prefix + ".attn.wv", 0, w.x);
                tap(prefix + ".attn.wo", 0, w.concat);
            }
            tap(prefix + ".ffn.w1", 0, bc.ffn_in);
            tap(prefix + ".ffn.w2", 0, bc.ffn_hidden);
        }
        for (std::size_t l = 0; l < s.txt.layers.size(); ++l) {
            const std::string prefix = "txt.layer" + std::to_string(l);
            const TextLayerCache& lc = s.txt.layers[l];
            tap(prefix + ".attn.wk", 0, lc.attn.x);
            tap(prefix + ".attn.wv", 0, lc.attn.x);
        }
        tap("vec.fc1.w", 0, s.vec.input);
        tap("vec.fc2.w", 0, s.vec.hidden);

        tap("fusion.proj_img.w", 0, s.proj.x_out);
        tap("fusion.proj_txt.w", 0, s.proj.t_out);
        for (const char* qkv : {"fusion.attn.wq", "fusion.attn.wk", "fusion.attn.wv"}) {
            tap(qkv, 0, s.v_img);
            tap(qkv, 1, s.v_txt);
            tap(qkv, 2, s.v_vec);
        }
        if (m.cfg.uses_alignment()) {
            tap("fusion.align.w", 0, s.v_img);
            tap("fusion.align.w", 0, s.v_txt);
        }
        if (m.cfg.is_complete()) {
            tap("fusion.final.w", 0, s.ffc.concat);
            tap("fusion.probe_img.w", 0, s.v_img);
            tap("fusion.probe_txt.w", 0, s.v_txt);
            tap("fusion.probe_vec.w", 0, s.v_vec);
        } else {
            tap("fusion.adapter.w", 0, s.adapter_in);
        }
        tap("head.fc1.w", 0, s.head.dropped);
        tap("head.fc2.w", 0, s.head.hidden);
    }
    return stats;
}

// ---------------------------------------------------------------------------
// Scales and codes
// ---------------------------------------------------------------------------

struct ChannelScale {
    double scale = 0.0;
    bool degenerate = false;
};

inline ChannelScale channel_scale(const std::vector<double>& channel_abs_values,
                                  double alpha, std::size_t bits) {
    if (channel_abs_values.empty())
        throw std::invalid_argument("channel_scale: empty channel");
    const double q = quantile(channel_abs_values, alpha);
    const double denom = static_cast<double>((1u << bits) - 1);
    if (q <= 0.0) return {kDegenerateScale, true};
    return {q / denom, false};
}

struct QuantizedLayer {
    std::vector<std::size_t> shape;  // [d_in, d_out]
    std::vector<std::int8_t> codes;  // row-major, unpacked
    std::vector<double> scales;      // per input channel
    std::size_t bits = 4;
    std::vector<bool> degenerate;    // per channel

    std::size_t numel() const { return codes.size(); }
    // packed codes + fp32 scales
    std::size_t packed_payload_bytes() const {
        return (codes.size() + 1) / 2 + 4 * scales.size();
    }
};

inline QuantizedLayer quantize_weights(const Tensor& w,
                                       const std::vector<double>& scales,
                                       std::size_t bits,
                                       const std::vector<bool>* degenerate = nullptr) {
    if (w.rank() != 2)
        throw std::invalid_argument("quantize_weights: rank-2 weight required");
    if (scales.size() != w.rows())
        throw std::invalid_argument("quantize_weights: need one scale per input row");
    for (double s : scales)
        if (!(s > 0.0))
            throw std::invalid_argument("quantize_weights: nonpositive scale");
    const double lo = -std::pow(2.0, static_cast<double>(bits - 1));
    const double hi = -lo - 1.0;

    QuantizedLayer out;
    out.shape = w.shape;
    out.bits = bits;
    out.scales = scales;
    out.degenerate = degenerate ? *degenerate : std::vector<bool>(w.rows(), false);
    out.codes.resize(w.numel());
    for (std::size_t i = 0; i < w.rows(); ++i)
        for (std::size_t j = 0; j < w.cols(); ++j) {
            double q = round_half_even(w.at(i, j) / scales[i]);
            q = std::min(std::max(q, lo), hi);
            out.codes[i * w.cols() + j] = static_cast<std::int8_t>(q);
        }
    return out;
}

inline Tensor dequantize(const QuantizedLayer& layer) {
    if (layer.shape.size() != 2 ||
        layer.codes.size() != layer.shape[0] * layer.shape[1] ||
        layer.scales.size() != layer.shape[0])
        throw CorruptionError("dequantize: inconsistent packed layer");
    Tensor t(layer.shape);
    const std::size_t cols = layer.shape[1];
    for (std::size_t i = 0; i < layer.shape[0]; ++i)
        for (std::size_t j = 0; j < cols; ++j)
            t.at(i, j) = static_cast<double>(layer.codes[i * cols + j]) *
                         layer.scales[i];
    return t;
}

// Nibble packing: two codes per byte, low nibble = even index, two's
// complement. Valid for code ranges within [-8, 7], i.e. bits <= 4.
inline std::vector<std::uint8_t> pack_codes(const std::vector<std::int8_t>& codes) {
    std::vector<std::uint8_t> out((codes.size() + 1) / 2, 0);
    for (std::size_t k = 0; k < codes.size(); ++k) {
        if (codes[k] < -8 || codes[k] > 7)
            throw std::invalid_argument("pack_codes: code out of int4 range");
        const std::uint8_t nib = static_cast<std::uint8_t>(codes[k]) & 0xF;
        if (k % 2 == 0)
            out[k / 2] |= nib;
        else
            out[k / 2] |= nib << 4;
    }
    return out;
}

inline std::vector<std::int8_t> unpack_codes(const std::vector<std::uint8_t>& bytes,
                                             std::size_t count) {
    if (bytes.size() != (count + 1) / 2)
        throw CorruptionError("unpack_codes: packed length mismatch");
    std::vector<std::int8_t> out(count);
    for (std::size_t k = 0; k < count; ++k) {
        std::uint8_t nib = k % 2 == 0 ? bytes[k / 2] & 0xF : bytes[k / 2] >> 4;
        out[k] = static_cast<std::int8_t>(nib >= 8 ? int(nib) - 16 : int(nib));
    }
    return out;
}

// Per-channel scales for one layer: per-group quantiles, max over groups.
inline std::vector<double> layer_scales(const LayerStats& stats, double alpha,
                                        std::size_t bits,
                                        std::vector<bool>* degenerate_out) {
    std::vector<double> scales(stats.channels, 0.0);
    std::vector<bool> degenerate(stats.channels, false);
    const double denom = static_cast<double>((1u << bits) - 1);
    for (std::size_t c = 0; c < stats.channels; ++c) {
        double q = 0.0;
        bool has = false;
        for (const auto& group : stats.groups) {
            if (group[c].empty()) continue;
            has = true;
            q = std::max(q, quantile(group[c], alpha));
        }
        if (!has)
            throw ConfigError("layer_scales: channel " + std::to_string(c) +
                              " has no recorded activations");
        if (q <= 0.0) {
            scales[c] = kDegenerateScale;
            degenerate[c] = true;
        } else {
            scales[c] = q / denom;
        }
    }
    if (degenerate_out) *degenerate_out = std::move(degenerate);
    return scales;
}

} // namespace mmq
