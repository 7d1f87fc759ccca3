#pragma once

#include <cmath>
#include <string>

#include "mmq/nn.hpp"
#include "mmq/tensor.hpp"

namespace mmq {

struct HeadParams {
    Tensor w1, b1; // [4d x hidden], [hidden]
    Tensor w2, b2; // [hidden x classes], [classes]
    double dropout = 0.1;

    template <class Self, class F>
    static void visit(Self& self, F&& f) {
        f("head.fc1.w", self.w1);
        f("head.fc1.b", self.b1);
        f("head.fc2.w", self.w2);
        f("head.fc2.b", self.b2);
    }
};

struct HeadCache {
    Tensor dropped; // [1 x 4d] input after dropout
    Tensor pre;     // [1 x hidden]
    Tensor hidden;  // relu(pre)
};

// Training mode passes a 0/1 Bernoulli(1-p) mask applied with 1/(1-p)
// rescaling; eval mode passes nullptr.
inline Tensor decision_forward(const Tensor& v_fused, const HeadParams& p,
                               const Tensor* dropout_mask, HeadCache* cache) {
    if (v_fused.numel() != p.w1.rows())
        throw std::invalid_argument("decision_forward: fused length " +
                                    std::to_string(v_fused.numel()) + " != " +
                                    std::to_string(p.w1.rows()));
    Tensor x({1, v_fused.numel()}, v_fused.data);
    if (dropout_mask) {
        const double keep = 1.0 - p.dropout;
        for (std::size_t j = 0; j < x.numel(); ++j)
            x.data[j] *= (*dropout_mask)[j] / keep;
    }
    Tensor pre = linear_forward(x, p.w1, &p.b1);
    Tensor hidden = relu(pre);
    Tensor out2 = linear_forward(hidden, p.w2, &p.b2);
    Tensor logits({out2.cols()}, out2.data);
    if (cache) {
        cache->dropped = std::move(x);
        cache->pre = std::move(pre);
        cache->hidden = std::move(hidden);
    }
    return logits;
}

// Returns gradient with respect to v_fused (pre-dropout).
inline Tensor decision_backward(const HeadCache& c, const HeadParams& p,
                                const Tensor* dropout_mask, const Tensor& dlogits,
                                HeadParams& g) {
    Tensor dy({1, dlogits.numel()}, dlogits.data);
    Tensor dhidden = linear_backward(c.hidden, p.w2, dy, g.w2, &g.b2);
    Tensor dpre = relu_backward(c.pre, dhidden);
    Tensor dx = linear_backward(c.dropped, p.w1, dpre, g.w1, &g.b1);
    Tensor dv({dx.numel()}, dx.data);
    if (dropout_mask) {
        const double keep = 1.0 - p.dropout;
        for (std::size_t j = 0; j < dv.numel(); ++j)
            dv[j] *= (*dropout_mask)[j] / keep;
    }
    return dv;
}

// -ln softmax(logits)[label], stabilized via log-sum-exp.
inline double cross_entropy(const Tensor& logits, std::size_t label) {
    if (label >= logits.numel())
        throw std::out_of_range("cross_entropy: label " + std::to_string(label) +
                                " out of range for " + std::to_string(logits.numel()) +
                                " classes");
    double mx = logits[0];
    for (std::size_t j = 1; j < logits.numel(); ++j) mx = std::max(mx, logits[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < logits.numel(); ++j) sum += std::exp(logits[j] - mx);
    return std::log(sum) - (logits[label] - mx);
}

// d(cross_entropy)/d(logits) = softmax(logits) - onehot(label).
inline Tensor cross_entropy_backward(const Tensor& logits, std::size_t label) {
    Tensor p({1, logits.numel()}, logits.data);
    Tensor sm = softmax_rows(p);
    Tensor d({logits.numel()}, sm.data);
    d[label] -= 1.0;
    return d;
}

inline double total_loss(double ce, double align, double lambda_align) {
    if (lambda_align < 0.0)
        throw std::invalid_argument("total_loss: lambda_align must be >= 0");
    return ce + lambda_align * align;
}

} // namespace mmq
