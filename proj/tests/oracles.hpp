#pragma once

// Reference implementations used only by tests.  Deliberately naive and
// independent of the library's compute paths.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

namespace oracle {

// Triple-loop matrix product.
template <typename VecA, typename VecB>
std::vector<double> matmul(const VecA& a, const VecB& b, int m, int k, int n) {
    std::vector<double> c(static_cast<std::size_t>(m) * n, 0.0);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
            double s = 0.0;
            for (int p = 0; p < k; ++p) s += a[static_cast<std::size_t>(i) * k + p] * b[static_cast<std::size_t>(p) * n + j];
            c[static_cast<std::size_t>(i) * n + j] = s;
        }
    return c;
}

// Direct six-loop cross-correlation.
template <typename VecX, typename VecK, typename VecB>
std::vector<double> conv2d(const VecX& x, const VecK& k,
                           const VecB& bias, int ci, int h, int w, int co, int kh, int kw,
                           int stride, int pad) {
    const int ho = (h + 2 * pad - kh) / stride + 1;
    const int wo = (w + 2 * pad - kw) / stride + 1;
    std::vector<double> y(static_cast<std::size_t>(co) * ho * wo, 0.0);
    for (int o = 0; o < co; ++o)
        for (int oy = 0; oy < ho; ++oy)
            for (int ox = 0; ox < wo; ++ox) {
                double s = bias[static_cast<std::size_t>(o)];
                for (int c = 0; c < ci; ++c)
                    for (int dy = 0; dy < kh; ++dy)
                        for (int dx = 0; dx < kw; ++dx) {
                            const int iy = oy * stride + dy - pad;
                            const int ix = ox * stride + dx - pad;
                            if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                            s += x[(static_cast<std::size_t>(c) * h + iy) * w + ix] *
                                 k[((static_cast<std::size_t>(o) * ci + c) * kh + dy) * kw + dx];
                        }
                y[(static_cast<std::size_t>(o) * ho + oy) * wo + ox] = s;
            }
    return y;
}

// Unstabilized softmax (exp over sum), fine at oracle scales.
template <typename Vec>
std::vector<double> softmax(const Vec& x) {
    double z = 0.0;
    for (double v : x) z += std::exp(v);
    std::vector<double> y(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = std::exp(x[i]) / z;
    return y;
}

// Single-query scaled dot-product attention: softmax(q K / sqrt(d)) V.
// K and V are [d, n] column-per-position; q is [d].
template <typename VecQ, typename VecK, typename VecV>
std::vector<double> attend(const VecQ& q, const VecK& K,
                           const VecV& V, int d, int n, std::vector<double>* weights_out) {
    std::vector<double> s(static_cast<std::size_t>(n), 0.0);
    for (int p = 0; p < n; ++p) {
        double dot = 0.0;
        for (int i = 0; i < d; ++i) dot += q[static_cast<std::size_t>(i)] * K[static_cast<std::size_t>(i) * n + p];
        s[static_cast<std::size_t>(p)] = dot / std::sqrt(static_cast<double>(d));
    }
    std::vector<double> w = softmax(s);
    if (weights_out != nullptr) *weights_out = w;
    std::vector<double> out(static_cast<std::size_t>(d), 0.0);
    for (int i = 0; i < d; ++i)
        for (int p = 0; p < n; ++p) out[static_cast<std::size_t>(i)] += w[static_cast<std::size_t>(p)] * V[static_cast<std::size_t>(i) * n + p];
    return out;
}

template <typename Vec>
double mean(const Vec& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

template <typename Vec>
double stddev_pop(const Vec& v) {
    const double m = mean(v);
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / static_cast<double>(v.size()));
}

}  // namespace oracle
