#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "mmq/rng.hpp"

namespace mmq {

// Dense row-major tensor of doubles. Everything in this library computes in
// double precision; values are narrowed to fp32 only at serialization time.
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> s) : shape(std::move(s)) {
        data.assign(count(shape), 0.0);
    }
    Tensor(std::vector<std::size_t> s, std::vector<double> d)
        : shape(std::move(s)), data(std::move(d)) {
        if (data.size() != count(shape))
            throw std::invalid_argument("Tensor: shape/data size mismatch");
    }

    static std::size_t count(const std::vector<std::size_t>& s) {
        std::size_t n = 1;
        for (std::size_t d : s) n *= d;
        return n;
    }

    static Tensor zeros(std::vector<std::size_t> s) { return Tensor(std::move(s)); }

    static Tensor full(std::vector<std::size_t> s, double v) {
        Tensor t(std::move(s));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }

    std::size_t numel() const { return data.size(); }
    bool empty() const { return data.empty(); }
    std::size_t rank() const { return shape.size(); }

    std::size_t rows() const { return shape.at(0); }
    std::size_t cols() const { return shape.at(1); }

    double& at(std::size_t i, std::size_t j) { return data[i * cols() + j]; }
    double at(std::size_t i, std::size_t j) const { return data[i * cols() + j]; }

    double& operator[](std::size_t i) { return data[i]; }
    double operator[](std::size_t i) const { return data[i]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    std::string shape_str() const {
        std::string s = "[";
        for (std::size_t i = 0; i < shape.size(); ++i) {
            if (i) s += "x";
            s += std::to_string(shape[i]);
        }
        return s + "]";
    }
};

inline Tensor random_uniform(std::vector<std::size_t> shape, double lo, double hi,
                             RngStream& rng) {
    Tensor t(std::move(shape));
    for (double& v : t.data) v = rng.uniform(lo, hi);
    return t;
}

// c[i,j] = sum_k a[i,k] * b[k,j], accumulated k-ascending so the summation
// order is reproducible.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows())
        throw std::invalid_argument("matmul: incompatible shapes " + a.shape_str() +
                                    " x " + b.shape_str());
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    Tensor c({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = &a.data[i * k];
        double* crow = &c.data[i * n];
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            const double* brow = &b.data[p * n];
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
    return c;
}

inline Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) throw std::invalid_argument("transpose: rank-2 tensor required");
    Tensor t({a.cols(), a.rows()});
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) t.at(j, i) = a.at(i, j);
    return t;
}

// Row-wise softmax with max subtraction.
inline Tensor softmax_rows(const Tensor& m) {
    if (m.rank() != 2) throw std::invalid_argument("softmax_rows: rank-2 tensor required");
    Tensor out({m.rows(), m.cols()});
    for (std::size_t i = 0; i < m.rows(); ++i) {
        double mx = m.at(i, 0);
        for (std::size_t j = 1; j < m.cols(); ++j) mx = std::max(mx, m.at(i, j));
        double sum = 0.0;
        for (std::size_t j = 0; j < m.cols(); ++j) {
            double e = std::exp(m.at(i, j) - mx);
            out.at(i, j) = e;
            sum += e;
        }
        for (std::size_t j = 0; j < m.cols(); ++j) out.at(i, j) /= sum;
    }
    return out;
}

// Per-row normalization to mean 0 / variance 1 (population variance),
// then elementwise affine. Always evaluated in full precision.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         double eps) {
    if (x.rank() != 2) throw std::invalid_argument("layer_norm: rank-2 tensor required");
    if (gamma.numel() != x.cols() || beta.numel() != x.cols())
        throw std::invalid_argument("layer_norm: affine size mismatch");
    if (eps <= 0.0) throw std::invalid_argument("layer_norm: eps must be positive");
    const std::size_t r = x.rows(), c = x.cols();
    Tensor out({r, c});
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
        for (std::size_t j = 0; j < c; ++j)
            out.at(i, j) = gamma[j] * ((x.at(i, j) - mean) * inv) + beta[j];
    }
    return out;
}

// Linear-interpolation empirical quantile: sort ascending, h = (n-1)*alpha,
// return x[floor h] + frac(h) * (x[ceil h] - x[floor h]).
inline double quantile(std::vector<double> values, double alpha) {
    if (values.empty()) throw std::invalid_argument("quantile: empty input");
    if (alpha < 0.0 || alpha > 1.0)
        throw std::invalid_argument("quantile: alpha must be in [0,1]");
    std::sort(values.begin(), values.end());
    const double h = static_cast<double>(values.size() - 1) * alpha;
    const std::size_t lo = static_cast<std::size_t>(h);
    const std::size_t hi = std::min(lo + 1, values.size() - 1);
    const double frac = h - static_cast<double>(lo);
    return values[lo] + frac * (values[hi] - values[lo]);
}

// Round half to even, sign-safe.
inline double round_half_even(double v) {
    double f = std::floor(v);
    double frac = v - f;
    if (frac > 0.5) return f + 1.0;
    if (frac < 0.5) return f;
    return (std::fmod(f, 2.0) == 0.0) ? f : f + 1.0;
}

// Central-difference gradient oracle. Test support: every hand-written
// backward pass is checked against it.
inline Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f,
                               const Tensor& x, double h = 1e-5) {
    Tensor g(x.shape);
    Tensor xp = x;
    for (std::size_t i = 0; i < x.numel(); ++i) {
        const double orig = xp.data[i];
        xp.data[i] = orig + h;
        const double fp = f(xp);
        xp.data[i] = orig - h;
        const double fm = f(xp);
        xp.data[i] = orig;
        g.data[i] = (fp - fm) / (2.0 * h);
    }
    return g;
}

} // namespace mmq
