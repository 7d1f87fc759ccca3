#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mmq/errors.hpp"
#include "mmq/nn.hpp"
#include "mmq/tensor.hpp"

namespace mmq {

constexpr double kLayerNormEps = 1e-5;

// ---------------------------------------------------------------------------
// Image encoder: patch embedding + windowed self-attention blocks with an
// alternating cyclic shift, mean-pooled over patches.
// ---------------------------------------------------------------------------

struct SwinBlockParams {
    Tensor ln1_gamma, ln1_beta;
    MhaParams attn;
    Tensor ffn_w1, ffn_w2; // [D x 2D], [2D x D]
    Tensor ln2_gamma, ln2_beta;

    template <class Self, class F>
    static void visit(Self& self, const std::string& prefix, F&& f) {
        f(prefix + ".ln1.gamma", self.ln1_gamma);
        f(prefix + ".ln1.beta", self.ln1_beta);
        MhaParams::visit(self.attn, prefix + ".attn", f);
        f(prefix + ".ffn.w1", self.ffn_w1);
        f(prefix + ".ffn.w2", self.ffn_w2);
        f(prefix + ".ln2.gamma", self.ln2_gamma);
        f(prefix + ".ln2.beta", self.ln2_beta);
    }
};

struct ImageEncoderParams {
    Tensor patch_w, patch_b; // [P*P*C x D], [D]
    std::vector<SwinBlockParams> blocks;

    template <class Self, class F>
    static void visit(Self& self, F&& f) {
        f("img.patch_embed.w", self.patch_w);
        f("img.patch_embed.b", self.patch_b);
        for (std::size_t i = 0; i < self.blocks.size(); ++i)
            SwinBlockParams::visit(self.blocks[i], "img.block" + std::to_string(i), f);
    }
};

struct ImageDims {
    std::size_t channels = 3;
    std::size_t image_size = 32;
    std::size_t patch = 8;
    std::size_t dim = 32;
    std::size_t heads = 2;
    std::size_t window = 2; // in patch units
    std::vector<std::size_t> shifts = {0, 1};

    std::size_t grid_side() const { return image_size / patch; }
    std::size_t num_patches() const { return grid_side() * grid_side(); }
    std::size_t patch_len() const { return channels * patch * patch; }
};

// Patch k (raster order over the grid) flattened as (channel, y, x).
inline Tensor extract_patches(const Tensor& image, const ImageDims& dims) {
    if (image.rank() != 3 || image.shape[0] != dims.channels)
        throw std::invalid_argument("extract_patches: expected [CxHxW] image, got " +
                                    image.shape_str());
    const std::size_t h = image.shape[1], w = image.shape[2], p = dims.patch;
    if (h % p != 0 || w % p != 0)
        throw std::invalid_argument("extract_patches: image " + image.shape_str() +
                                    " not divisible by patch size " + std::to_string(p));
    const std::size_t gh = h / p, gw = w / p;
    Tensor out({gh * gw, dims.channels * p * p});
    for (std::size_t gy = 0; gy < gh; ++gy)
        for (std::size_t gx = 0; gx < gw; ++gx) {
            const std::size_t row = gy * gw + gx;
            std::size_t idx = 0;
            for (std::size_t c = 0; c < dims.channels; ++c)
                for (std::size_t y = 0; y < p; ++y)
                    for (std::size_t x = 0; x < p; ++x)
                        out.at(row, idx++) =
                            image.data[(c * h + gy * p + y) * w + gx * p + x];
        }
    return out;
}

inline Tensor patch_embed(const Tensor& image, const ImageEncoderParams& p,
                          const ImageDims& dims, Tensor* patches_out = nullptr) {
    Tensor patches = extract_patches(image, dims);
    Tensor x = linear_forward(patches, p.patch_w, &p.patch_b);
    if (patches_out) *patches_out = std::move(patches);
    return x;
}

// Row permutation for a cyclic roll of the patch grid by `shift` up-left:
// rolled[row(gy,gx)] = x[row((gy+shift) mod G, (gx+shift) mod G)].
inline std::vector<std::size_t> roll_map(std::size_t grid, std::size_t shift) {
    std::vector<std::size_t> map(grid * grid);
    for (std::size_t gy = 0; gy < grid; ++gy)
        for (std::size_t gx = 0; gx < grid; ++gx)
            map[gy * grid + gx] =
                ((gy + shift) % grid) * grid + ((gx + shift) % grid);
    return map;
}

inline Tensor permute_rows(const Tensor& x, const std::vector<std::size_t>& map) {
    Tensor out({x.rows(), x.cols()});
    for (std::size_t i = 0; i < x.rows(); ++i)
        for (std::size_t j = 0; j < x.cols(); ++j) out.at(i, j) = x.at(map[i], j);
    return out;
}

// Row indices of each M x M window over a G x G grid, raster order.
inline std::vector<std::vector<std::size_t>> window_rows(std::size_t grid,
                                                         std::size_t window) {
    const std::size_t per_side = grid / window;
    std::vector<std::vector<std::size_t>> out(per_side * per_side);
    for (std::size_t wy = 0; wy < per_side; ++wy)
        for (std::size_t wx = 0; wx < per_side; ++wx) {
            auto& rows = out[wy * per_side + wx];
            for (std::size_t y = 0; y < window; ++y)
                for (std::size_t x = 0; x < window; ++x)
                    rows.push_back((wy * window + y) * grid + wx * window + x);
        }
    return out;
}

struct SwinBlockCache {
    LayerNormCache ln1;
    std::vector<MhaCache> windows;
    Tensor attn_unrolled; // [N x D] contribution added to the residual stream
    Tensor x_mid;         // after attention residual
    LayerNormCache ln2;
    Tensor ffn_in;     // ln2 output feeding ffn_w1
    Tensor ffn_pre;    // hidden pre-activation [N x 2D]
    Tensor ffn_hidden; // relu(ffn_pre)
};

// Pre-LN residual block; attention runs inside (cyclically shifted) windows.
inline Tensor swin_block_forward(const Tensor& x, const SwinBlockParams& p,
                                 std::size_t shift, const ImageDims& dims,
                                 SwinBlockCache* cache) {
    const std::size_t n = x.rows();
    const std::size_t grid = static_cast<std::size_t>(std::llround(std::sqrt(double(n))));
    if (grid * grid != n)
        throw std::invalid_argument("swin_block_forward: patch count " +
                                    std::to_string(n) + " is not a square grid");
    if (grid % dims.window != 0)
        throw std::invalid_argument("swin_block_forward: grid side not divisible by window");
    if (shift != 0 && shift != dims.window / 2)
        throw std::invalid_argument("swin_block_forward: invalid shift " +
                                    std::to_string(shift));

    LayerNormCache ln1c;
    Tensor normed = layer_norm_forward(x, p.ln1_gamma, p.ln1_beta, kLayerNormEps, &ln1c);
    const auto fwd_map = roll_map(grid, shift);
    Tensor rolled = permute_rows(normed, fwd_map);

    const auto windows = window_rows(grid, dims.window);
    Tensor attn_rolled({n, x.cols()});
    std::vector<MhaCache> wcaches(windows.size());
    for (std::size_t w = 0; w < windows.size(); ++w) {
        Tensor sub({windows[w].size(), x.cols()});
        for (std::size_t r = 0; r < windows[w].size(); ++r)
            for (std::size_t j = 0; j < x.cols(); ++j)
                sub.at(r, j) = rolled.at(windows[w][r], j);
        Tensor out = mha_forward(sub, p.attn, dims.heads, nullptr, &wcaches[w]);
        for (std::size_t r = 0; r < windows[w].size(); ++r)
            for (std::size_t j = 0; j < x.cols(); ++j)
                attn_rolled.at(windows[w][r], j) = out.at(r, j);
    }

    // inverse roll: position row(gy,gx) takes the rolled row ((gy+s)%G,(gx+s)%G),
    // so scattering through fwd_map undoes the gather above.
    Tensor attn_out({n, x.cols()});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < x.cols(); ++j)
            attn_out.at(fwd_map[i], j) = attn_rolled.at(i, j);

    Tensor x_mid = x;
    for (std::size_t i = 0; i < x_mid.numel(); ++i) x_mid.data[i] += attn_out.data[i];

    LayerNormCache ln2c;
    Tensor normed2 =
        layer_norm_forward(x_mid, p.ln2_gamma, p.ln2_beta, kLayerNormEps, &ln2c);
    Tensor pre = matmul(normed2, p.ffn_w1);
    Tensor hidden = relu(pre);
    Tensor ffn_out = matmul(hidden, p.ffn_w2);

    Tensor out = x_mid;
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] += ffn_out.data[i];

    if (cache) {
        cache->ln1 = std::move(ln1c);
        cache->windows = std::move(wcaches);
        cache->attn_unrolled = std::move(attn_out);
        cache->x_mid = std::move(x_mid);
        cache->ln2 = std::move(ln2c);
        cache->ffn_in = std::move(normed2);
        cache->ffn_pre = std::move(pre);
        cache->ffn_hidden = std::move(hidden);
    }
    return out;
}

inline Tensor swin_block_backward(const SwinBlockCache& c, const SwinBlockParams& p,
                                  std::size_t shift, const ImageDims& dims,
                                  const Tensor& dout, SwinBlockParams& g) {
    const std::size_t n = dout.rows();
    const std::size_t grid = static_cast<std::size_t>(std::llround(std::sqrt(double(n))));

    // FFN branch
    Tensor dhidden = matmul(dout, transpose(p.ffn_w2));
    Tensor dw2 = matmul(transpose(c.ffn_hidden), dout);
    for (std::size_t i = 0; i < g.ffn_w2.numel(); ++i) g.ffn_w2.data[i] += dw2.data[i];
    Tensor dpre = relu_backward(c.ffn_pre, dhidden);
    Tensor dnormed2 = matmul(dpre, transpose(p.ffn_w1));
    Tensor dw1 = matmul(transpose(c.ffn_in), dpre);
    for (std::size_t i = 0; i < g.ffn_w1.numel(); ++i) g.ffn_w1.data[i] += dw1.data[i];
    Tensor dx_mid =
        layer_norm_backward(c.ln2, p.ln2_gamma, dnormed2, g.ln2_gamma, g.ln2_beta);
    for (std::size_t i = 0; i < dx_mid.numel(); ++i) dx_mid.data[i] += dout.data[i];

    // attention branch: dx_mid splits into the residual input and the windowed path
    const auto fwd_map = roll_map(grid, shift);
    Tensor dattn_rolled({n, dout.cols()});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < dout.cols(); ++j)
            dattn_rolled.at(i, j) = dx_mid.at(fwd_map[i], j);

    const auto windows = window_rows(grid, dims.window);
    Tensor dnormed_rolled({n, dout.cols()});
    for (std::size_t w = 0; w < windows.size(); ++w) {
        Tensor dsub({windows[w].size(), dout.cols()});
        for (std::size_t r = 0; r < windows[w].size(); ++r)
            for (std::size_t j = 0; j < dout.cols(); ++j)
                dsub.at(r, j) = dattn_rolled.at(windows[w][r], j);
        Tensor dxw = mha_backward(c.windows[w], p.attn, dims.heads, dsub, g.attn);
        for (std::size_t r = 0; r < windows[w].size(); ++r)
            for (std::size_t j = 0; j < dout.cols(); ++j)
                dnormed_rolled.at(windows[w][r], j) = dxw.at(r, j);
    }
    Tensor dnormed({n, dout.cols()});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < dout.cols(); ++j)
            dnormed.at(fwd_map[i], j) = dnormed_rolled.at(i, j);

    Tensor dx =
        layer_norm_backward(c.ln1, p.ln1_gamma, dnormed, g.ln1_gamma, g.ln1_beta);
    for (std::size_t i = 0; i < dx.numel(); ++i) dx.data[i] += dx_mid.data[i];
    return dx;
}

struct ImageEncodeCache {
    Tensor patches;
    std::vector<Tensor> block_inputs; // block_inputs[0] is the patch-embed output
    std::vector<SwinBlockCache> blocks;
    std::size_t num_patches = 0;
};

inline Tensor image_encode(const Tensor& image, const ImageEncoderParams& p,
                           const ImageDims& dims, ImageEncodeCache* cache) {
    Tensor patches;
    Tensor x = patch_embed(image, p, dims, &patches);
    std::vector<Tensor> inputs;
    std::vector<SwinBlockCache> bcaches(p.blocks.size());
    for (std::size_t b = 0; b < p.blocks.size(); ++b) {
        inputs.push_back(x);
        x = swin_block_forward(x, p.blocks[b], dims.shifts[b], dims,
                               cache ? &bcaches[b] : nullptr);
    }
    const std::size_t n = x.rows();
    Tensor pooled({x.cols()});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < x.cols(); ++j) pooled[j] += x.at(i, j);
    for (std::size_t j = 0; j < x.cols(); ++j) pooled[j] /= static_cast<double>(n);
    if (cache) {
        cache->patches = std::move(patches);
        cache->block_inputs = std::move(inputs);
        cache->blocks = std::move(bcaches);
        cache->num_patches = n;
    }
    return pooled;
}

inline void image_encode_backward(const ImageEncodeCache& c,
                                  const ImageEncoderParams& p, const ImageDims& dims,
                                  const Tensor& dpooled, ImageEncoderParams& g) {
    const std::size_t n = c.num_patches;
    Tensor dx({n, dims.dim});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < dims.dim; ++j)
            dx.at(i, j) = dpooled[j] / static_cast<double>(n);
    for (std::size_t b = p.blocks.size(); b-- > 0;)
        dx = swin_block_backward(c.blocks[b], p.blocks[b], dims.shifts[b], dims, dx,
                                 g.blocks[b]);
    linear_backward(c.patches, p.patch_w, dx, g.patch_w, &g.patch_b);
}

// ---------------------------------------------------------------------------
// Text encoder: embedding lookup + masked full-sequence attention layers,
// mean-pooled over non-pad positions.
// ---------------------------------------------------------------------------

struct TextLayerParams {
    Tensor ln1_gamma, ln1_beta;
    MhaParams attn;
    Tensor ffn_w1, ffn_w2;
    Tensor ln2_gamma, ln2_beta;

    template <class Self, class F>
    static void visit(Self& self, const std::string& prefix, F&& f) {
        f(prefix + ".ln1.gamma", self.ln1_gamma);
        f(prefix + ".ln1.beta", self.ln1_beta);
        MhaParams::visit(self.attn, prefix + ".attn", f);
        f(prefix + ".ffn.w1", self.ffn_w1);
        f(prefix + ".ffn.w2", self.ffn_w2);
        f(prefix + ".ln2.gamma", self.ln2_gamma);
        f(prefix + ".ln2.beta", self.ln2_beta);
    }
};

struct TextEncoderParams {
    Tensor embedding; // [vocab x D]
    std::vector<TextLayerParams> layers;

    template <class Self, class F>
    static void visit(Self& self, F&& f) {
        f("txt.embedding", self.embedding);
        for (std::size_t i = 0; i < self.layers.size(); ++i)
            TextLayerParams::visit(self.layers[i], "txt.layer" + std::to_string(i), f);
    }
};

struct TextDims {
    std::size_t vocab = 64;
    std::size_t seq_len = 16;
    std::size_t dim = 32;
    std::size_t heads = 2;
    std::size_t layers = 2;
    std::uint16_t pad_id = 63;
};

struct TextLayerCache {
    LayerNormCache ln1;
    MhaCache attn;
    Tensor attn_out;
    Tensor x_mid;
    LayerNormCache ln2;
    Tensor ffn_in;
    Tensor ffn_pre;
    Tensor ffn_hidden;
};

struct TextEncodeCache {
    std::vector<std::uint16_t> tokens;
    std::vector<bool> pad_mask;
    std::vector<Tensor> layer_inputs;
    std::vector<TextLayerCache> layers;
    std::size_t non_pad = 0;
};

inline Tensor text_layer_forward(const Tensor& x, const TextLayerParams& p,
                                 const TextDims& dims, const std::vector<bool>& mask,
                                 TextLayerCache* cache) {
    LayerNormCache ln1c;
    Tensor normed = layer_norm_forward(x, p.ln1_gamma, p.ln1_beta, kLayerNormEps, &ln1c);
    MhaCache ac;
    Tensor attn_out = mha_forward(normed, p.attn, dims.heads, &mask, &ac);
    Tensor x_mid = x;
    for (std::size_t i = 0; i < x_mid.numel(); ++i) x_mid.data[i] += attn_out.data[i];

    LayerNormCache ln2c;
    Tensor normed2 =
        layer_norm_forward(x_mid, p.ln2_gamma, p.ln2_beta, kLayerNormEps, &ln2c);
    Tensor pre = matmul(normed2, p.ffn_w1);
    Tensor hidden = relu(pre);
    Tensor ffn_out = matmul(hidden, p.ffn_w2);
    Tensor out = x_mid;
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] += ffn_out.data[i];

    if (cache) {
        cache->ln1 = std::move(ln1c);
        cache->attn = std::move(ac);
        cache->attn_out = std::move(attn_out);
        cache->x_mid = std::move(x_mid);
        cache->ln2 = std::move(ln2c);
        cache->ffn_in = std::move(normed2);
        cache->ffn_pre = std::move(pre);
        cache->ffn_hidden = std::move(hidden);
    }
    return out;
}

inline Tensor text_encode(const std::vector<std::uint16_t>& tokens,
                          const TextEncoderParams& p, const TextDims& dims,
                          TextEncodeCache* cache) {
    if (tokens.size() != dims.seq_len)
        throw std::invalid_argument("text_encode: expected " +
                                    std::to_string(dims.seq_len) + " tokens, got " +
                                    std::to_string(tokens.size()));
    std::vector<bool> mask(tokens.size());
    std::size_t non_pad = 0;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (tokens[i] >= dims.vocab)
            throw std::out_of_range("text_encode: token id " +
                                    std::to_string(tokens[i]) + " >= vocab " +
                                    std::to_string(dims.vocab));
        mask[i] = tokens[i] == dims.pad_id;
        if (!mask[i]) ++non_pad;
    }
    if (non_pad == 0)
        throw std::invalid_argument("text_encode: all-pad sequence has no content");

    Tensor x({tokens.size(), dims.dim});
    for (std::size_t i = 0; i < tokens.size(); ++i)
        for (std::size_t j = 0; j < dims.dim; ++j)
            x.at(i, j) = p.embedding.at(tokens[i], j);

    std::vector<Tensor> inputs;
    std::vector<TextLayerCache> lcaches(p.layers.size());
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        inputs.push_back(x);
        x = text_layer_forward(x, p.layers[l], dims, mask,
                               cache ? &lcaches[l] : nullptr);
    }

    Tensor pooled({dims.dim});
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (mask[i]) continue;
        for (std::size_t j = 0; j < dims.dim; ++j) pooled[j] += x.at(i, j);
    }
    for (std::size_t j = 0; j < dims.dim; ++j) pooled[j] /= static_cast<double>(non_pad);

    if (cache) {
        cache->tokens = tokens;
        cache->pad_mask = std::move(mask);
        cache->layer_inputs = std::move(inputs);
        cache->layers = std::move(lcaches);
        cache->non_pad = non_pad;
    }
    return pooled;
}

inline Tensor text_layer_backward(const TextLayerCache& c, const TextLayerParams& p,
                                  const TextDims& dims, const Tensor& dout,
                                  TextLayerParams& g) {
    Tensor dhidden = matmul(dout, transpose(p.ffn_w2));
    Tensor dw2 = matmul(transpose(c.ffn_hidden), dout);
    for (std::size_t i = 0; i < g.ffn_w2.numel(); ++i) g.ffn_w2.data[i] += dw2.data[i];
    Tensor dpre = relu_backward(c.ffn_pre, dhidden);
    Tensor dnormed2 = matmul(dpre, transpose(p.ffn_w1));
    Tensor dw1 = matmul(transpose(c.ffn_in), dpre);
    for (std::size_t i = 0; i < g.ffn_w1.numel(); ++i) g.ffn_w1.data[i] += dw1.data[i];
    Tensor dx_mid =
        layer_norm_backward(c.ln2, p.ln2_gamma, dnormed2, g.ln2_gamma, g.ln2_beta);
    for (std::size_t i = 0; i < dx_mid.numel(); ++i) dx_mid.data[i] += dout.data[i];

    Tensor dnormed = mha_backward(c.attn, p.attn, dims.heads, dx_mid, g.attn);
    Tensor dx =
        layer_norm_backward(c.ln1, p.ln1_gamma, dnormed, g.ln1_gamma, g.ln1_beta);
    for (std::size_t i = 0; i < dx.numel(); ++i) dx.data[i] += dx_mid.data[i];
    return dx;
}

inline void text_encode_backward(const TextEncodeCache& c, const TextEncoderParams& p,
                                 const TextDims& dims, const Tensor& dpooled,
                                 TextEncoderParams& g) {
    const std::size_t n = c.tokens.size();
    Tensor dx({n, dims.dim});
    for (std::size_t i = 0; i < n; ++i) {
        if (c.pad_mask[i]) continue;
        for (std::size_t j = 0; j < dims.dim; ++j)
            dx.at(i, j) = dpooled[j] / static_cast<double>(c.non_pad);
    }
    for (std::size_t l = p.layers.size(); l-- > 0;)
        dx = text_layer_backward(c.layers[l], p.layers[l], dims, dx, g.layers[l]);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < dims.dim; ++j)
            g.embedding.at(c.tokens[i], j) += dx.at(i, j);
}

// ---------------------------------------------------------------------------
// Vector encoder: two-layer MLP, v -> relu(v W1 + b1) W2 + b2.
// ---------------------------------------------------------------------------

struct VectorEncoderParams {
    Tensor w1, b1; // [5 x hidden], [hidden]
    Tensor w2, b2; // [hidden x d], [d]

    template <class Self, class F>
    static void visit(Self& self, F&& f) {
        f("vec.fc1.w", self.w1);
        f("vec.fc1.b", self.b1);
        f("vec.fc2.w", self.w2);
        f("vec.fc2.b", self.b2);
    }
};

struct VectorEncodeCache {
    Tensor input;  // [1 x 5]
    Tensor pre;    // [1 x hidden]
    Tensor hidden; // relu(pre)
};

inline Tensor vector_encode(const Tensor& v0, const VectorEncoderParams& p,
                            VectorEncodeCache* cache) {
    if (v0.numel() != p.w1.rows())
        throw std::invalid_argument("vector_encode: expected input of length " +
                                    std::to_string(p.w1.rows()) + ", got " +
                                    std::to_string(v0.numel()));
    Tensor x({1, v0.numel()}, v0.data);
    Tensor pre = linear_forward(x, p.w1, &p.b1);
    Tensor hidden = relu(pre);
    Tensor out2 = linear_forward(hidden, p.w2, &p.b2);
    Tensor out({out2.cols()}, out2.data);
    if (cache) {
        cache->input = std::move(x);
        cache->pre = std::move(pre);
        cache->hidden = std::move(hidden);
    }
    return out;
}

inline void vector_encode_backward(const VectorEncodeCache& c,
                                   const VectorEncoderParams& p, const Tensor& dout,
                                   VectorEncoderParams& g) {
    Tensor dy({1, dout.numel()}, dout.data);
    Tensor dhidden = linear_backward(c.hidden, p.w2, dy, g.w2, &g.b2);
    Tensor dpre = relu_backward(c.pre, dhidden);
    linear_backward(c.input, p.w1, dpre, g.w1, &g.b1);
}

} // namespace mmq
