#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "mmq/tensor.hpp"

namespace mmq {

// Shared forward/backward building blocks. Convention: activations are row
// vectors, weights are [d_in x d_out], y = x * W + b. Backward functions
// accumulate (+=) into the gradient tensors so one batch can reuse them.

inline Tensor linear_forward(const Tensor& x, const Tensor& w, const Tensor* b) {
    Tensor y = matmul(x, w);
    if (b) {
        for (std::size_t i = 0; i < y.rows(); ++i)
            for (std::size_t j = 0; j < y.cols(); ++j) y.at(i, j) += (*b)[j];
    }
    return y;
}

inline Tensor linear_backward(const Tensor& x, const Tensor& w, const Tensor& dy,
                              Tensor& dw, Tensor* db) {
    Tensor dwi = matmul(transpose(x), dy);
    for (std::size_t i = 0; i < dw.numel(); ++i) dw.data[i] += dwi.data[i];
    if (db) {
        for (std::size_t i = 0; i < dy.rows(); ++i)
            for (std::size_t j = 0; j < dy.cols(); ++j) (*db)[j] += dy.at(i, j);
    }
    return matmul(dy, transpose(w));
}

inline Tensor relu(const Tensor& x) {
    Tensor y = x;
    for (double& v : y.data) v = v > 0.0 ? v : 0.0;
    return y;
}

inline Tensor relu_backward(const Tensor& pre, const Tensor& dy) {
    Tensor dx = dy;
    for (std::size_t i = 0; i < dx.numel(); ++i)
        if (pre.data[i] <= 0.0) dx.data[i] = 0.0;
    return dx;
}

struct LayerNormCache {
    Tensor xhat;                 // normalized rows
    std::vector<double> inv_std; // per row
};

inline Tensor layer_norm_forward(const Tensor& x, const Tensor& gamma,
                                 const Tensor& beta, double eps,
                                 LayerNormCache* cache) {
    const std::size_t r = x.rows(), c = x.cols();
    Tensor out({r, c});
    Tensor xhat({r, c});
    std::vector<double> inv_std(r);
    for (std::size_t i = 0; i < r; ++i) {
        double mean = 0.0;
        for (std::size_t j = 0; j < c; ++j) mean += x.at(i, j);
        mean /= static_cast<double>(c);
        double var = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            double d = x.at(i, j) - mean;
            var += d * d;
        }
        var /= static_cast<double>(c);
        double inv = 1.0 / std::sqrt(var + eps);
        inv_std[i] = inv;
        for (std::size_t j = 0; j < c; ++j) {
            double xh = (x.at(i, j) - mean) * inv;
            xhat.at(i, j) = xh;
            out.at(i, j) = gamma[j] * xh + beta[j];
        }
    }
    if (cache) {
        cache->xhat = std::move(xhat);
        cache->inv_std = std::move(inv_std);
    }
    return out;
}

inline Tensor layer_norm_backward(const LayerNormCache& cache, const Tensor& gamma,
                                  const Tensor& dy, Tensor& dgamma, Tensor& dbeta) {
    const std::size_t r = dy.rows(), c = dy.cols();
    Tensor dx({r, c});
    for (std::size_t i = 0; i < r; ++i) {
        double g_mean = 0.0, gx_mean = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            double g = dy.at(i, j) * gamma[j];
            g_mean += g;
            gx_mean += g * cache.xhat.at(i, j);
            dgamma[j] += dy.at(i, j) * cache.xhat.at(i, j);
            dbeta[j] += dy.at(i, j);
        }
        g_mean /= static_cast<double>(c);
        gx_mean /= static_cast<double>(c);
        for (std::size_t j = 0; j < c; ++j) {
            double g = dy.at(i, j) * gamma[j];
            dx.at(i, j) = (g - g_mean - cache.xhat.at(i, j) * gx_mean) * cache.inv_std[i];
        }
    }
    return dx;
}

// Backward of row-wise softmax: ds_ij = p_ij * (dp_ij - sum_k dp_ik p_ik).
// Entries with p == 0 (masked or underflowed) carry no gradient.
inline Tensor softmax_rows_backward(const Tensor& p, const Tensor& dp) {
    Tensor ds({p.rows(), p.cols()});
    for (std::size_t i = 0; i < p.rows(); ++i) {
        double inner = 0.0;
        for (std::size_t j = 0; j < p.cols(); ++j)
            if (p.at(i, j) > 0.0) inner += dp.at(i, j) * p.at(i, j);
        for (std::size_t j = 0; j < p.cols(); ++j)
            ds.at(i, j) = p.at(i, j) > 0.0 ? p.at(i, j) * (dp.at(i, j) - inner) : 0.0;
    }
    return ds;
}

struct MhaParams {
    Tensor wq, wk, wv, wo; // [D x D]

    template <class Self, class F>
    static void visit(Self& self, const std::string& prefix, F&& f) {
        f(prefix + ".wq", self.wq);
        f(prefix + ".wk", self.wk);
        f(prefix + ".wv", self.wv);
        f(prefix + ".wo", self.wo);
    }
};

struct MhaCache {
    Tensor x;                 // [n x D] input rows
    Tensor q, k, v;           // [n x D]
    std::vector<Tensor> attn; // per head [n x n], rows sum to 1
    Tensor concat;            // [n x D] head outputs before wo
};

// Multi-head self-attention over the rows of x. key_mask[j] == true removes
// column j from every softmax (its attention weight is exactly 0).
inline Tensor mha_forward(const Tensor& x, const MhaParams& p, std::size_t heads,
                          const std::vector<bool>* key_mask, MhaCache* cache) {
    const std::size_t n = x.rows(), dim = x.cols();
    const std::size_t dh = dim / heads;
    Tensor q = matmul(x, p.wq);
    Tensor k = matmul(x, p.wk);
    Tensor v = matmul(x, p.wv);
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    Tensor concat({n, dim});
    std::vector<Tensor> attn(heads);
    for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t off = h * dh;
        Tensor scores({n, n});
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                double s = 0.0;
                for (std::size_t t = 0; t < dh; ++t)
                    s += q.at(i, off + t) * k.at(j, off + t);
                scores.at(i, j) = s * scale;
            }
        // masked softmax: excluded keys get weight exactly 0
        Tensor a({n, n});
        for (std::size_t i = 0; i < n; ++i) {
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < n; ++j)
                if (!key_mask || !(*key_mask)[j]) mx = std::max(mx, scores.at(i, j));
            double sum = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                if (key_mask && (*key_mask)[j]) {
                    a.at(i, j) = 0.0;
                    continue;
                }
                double e = std::exp(scores.at(i, j) - mx);
                a.at(i, j) = e;
                sum += e;
            }
            for (std::size_t j = 0; j < n; ++j) a.at(i, j) /= sum;
        }
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t t = 0; t < dh; ++t) {
                double o = 0.0;
                for (std::size_t j = 0; j < n; ++j)
                    o += a.at(i, j) * v.at(j, off + t);
                concat.at(i, off + t) = o;
            }
        attn[h] = std::move(a);
    }
    Tensor out = matmul(concat, p.wo);
    if (cache) {
        cache->x = x;
        cache->q = std::move(q);
        cache->k = std::move(k);
        cache->v = std::move(v);
        cache->attn = std::move(attn);
        cache->concat = std::move(concat);
    }
    return out;
}

// Accumulates parameter gradients into g (same struct type, zero-initialized
// by the caller) and returns the gradient with respect to x.
inline Tensor mha_backward(const MhaCache& c, const MhaParams& p, std::size_t heads,
                           const Tensor& dout, MhaParams& g) {
    const std::size_t n = c.x.rows(), dim = c.x.cols();
    const std::size_t dh = dim / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    Tensor dconcat_w = matmul(transpose(c.concat), dout);
    for (std::size_t i = 0; i < g.wo.numel(); ++i) g.wo.data[i] += dconcat_w.data[i];
    Tensor dconcat = matmul(dout, transpose(p.wo));

    Tensor dq({n, dim}), dk({n, dim}), dv({n, dim});
    for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t off = h * dh;
        const Tensor& a = c.attn[h];
        // dA and dV_h
        Tensor da({n, n});
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                double s = 0.0;
                for (std::size_t t = 0; t < dh; ++t)
                    s += dconcat.at(i, off + t) * c.v.at(j, off + t);
                da.at(i, j) = s;
                for (std::size_t t = 0; t < dh; ++t)
                    dv.at(j, off + t) += a.at(i, j) * dconcat.at(i, off + t);
            }
        Tensor ds = softmax_rows_backward(a, da);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                const double d = ds.at(i, j) * scale;
                for (std::size_t t = 0; t < dh; ++t) {
                    dq.at(i, off + t) += d * c.k.at(j, off + t);
                    dk.at(j, off + t) += d * c.q.at(i, off + t);
                }
            }
    }

    Tensor dx({n, dim});
    auto accum_proj = [&](const Tensor& dproj, const Tensor& w, Tensor& dw) {
        Tensor dwi = matmul(transpose(c.x), dproj);
        for (std::size_t i = 0; i < dw.numel(); ++i) dw.data[i] += dwi.data[i];
        Tensor dxi = matmul(dproj, transpose(w));
        for (std::size_t i = 0; i < dx.numel(); ++i) dx.data[i] += dxi.data[i];
    };
    accum_proj(dq, p.wq, g.wq);
    accum_proj(dk, p.wk, g.wk);
    accum_proj(dv, p.wv, g.wv);
    return dx;
}

} // namespace mmq
