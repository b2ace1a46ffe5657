#pragma once

// Gradient-based input attributions for binary-head models: saliency,
// integrated gradients (midpoint rule against a white baseline), smoothgrad.
// Maps store magnitudes; integrated gradients additionally carries its signed
// sum so completeness can be checked against f(x) - f(baseline).

#include "mareo/model.hpp"

#include <fstream>
#include <functional>
#include <string>
#include <vector>

namespace mareo {

struct AttributionMap {
    int h = 0, w = 0;
    std::vector<double> values;  // nonnegative
    std::string method;
    // integrated-gradients bookkeeping
    double signed_sum = 0.0;
    double delta = 0.0;  // f(x) - f(baseline)
    bool completeness_ok(double rel = 0.01, double abs_floor = 1e-4) const {
        return std::abs(signed_sum - delta) <= rel * std::abs(delta) + abs_floor;
    }
};

namespace detail {

inline Tensor attribution_input(const Tensor& x) {
    Tensor xi = Tensor::from(x.shape(), to_vector(x.data()));
    xi.set_requires_grad();
    return xi;
}

inline double logit_value(const MareoParams& p, const Tensor& x) { return mareo_forward(x, p).logit.item(); }

// gradient of the logit w.r.t. every input pixel
inline std::vector<double> input_gradient(const MareoParams& p, const Tensor& x) {
    Tensor xi = attribution_input(x);
    Tape tape;
    Tape::Scope scope(tape);
    ForwardResult r = mareo_forward(xi, p);
    tape.backward(r.logit, false);
    const dvec* g = tape.grad_of(xi);
    if (g == nullptr) return std::vector<double>(static_cast<std::size_t>(x.size()), 0.0);
    return {g->begin(), g->end()};
}

}  // namespace detail

inline AttributionMap saliency(const MareoParams& p, const Tensor& x) {
    if (p.config.n_choices != 1) throw ConfigError("attribution: binary-head models only");
    AttributionMap map;
    map.h = x.dim(1);
    map.w = x.dim(2);
    map.method = "saliency";
    map.values = detail::input_gradient(p, x);
    for (double& v : map.values) v = std::abs(v);
    return map;
}

// Integrated gradients over the straight path from a white baseline,
// midpoint rule on an adaptively refined grid.  `steps` sets the base grid;
// intervals where the path function bends away from its secant are bisected
// before gradients are taken.  Context normalization divides by
// (sigma + 1e-8), so the path crosses razor-thin ramps wherever a channel's
// spatial variance dips toward zero; a uniform grid integrates past those
// and never satisfies completeness.
inline AttributionMap integrated_gradients(const MareoParams& p, const Tensor& x, int steps = 128,
                                           double baseline_value = 1.0) {
    if (p.config.n_choices != 1) throw ConfigError("attribution: binary-head models only");
    if (steps < 16) throw ConfigError("integrated_gradients: need at least 16 steps");
    AttributionMap map;
    map.h = x.dim(1);
    map.w = x.dim(2);
    map.method = "integrated_gradients";
    const std::int64_t n = x.size();
    Tensor x0 = Tensor::full(x.shape(), baseline_value);

    Tensor xi = Tensor::alloc(x.shape());
    auto value_at = [&](double alpha) {
        for (std::int64_t i = 0; i < n; ++i) xi.at(i) = x0[i] + alpha * (x[i] - x0[i]);
        return detail::logit_value(p, xi);
    };
    const double f1 = value_at(1.0);
    const double f0 = value_at(0.0);
    map.delta = f1 - f0;

    // per-leaf deviation target: a fixed share of the completeness tolerance
    const double theta = (0.01 * std::abs(map.delta) + 1e-4) / 32.0;
    constexpr double kMinWidth = 1e-12;
    constexpr int kMaxLeaves = 4096;

    struct Leaf {
        double a, b;
    };
    std::vector<Leaf> leaves;
    int evals = 0;
    // in-order refinement keeps leaf order and summation deterministic
    std::function<void(double, double, double, double, int)> refine = [&](double a, double fa, double b, double fb,
                                                                          int depth) {
        if (b - a < kMinWidth || depth > 48 || static_cast<int>(leaves.size()) + evals > 4 * kMaxLeaves) {
            leaves.push_back({a, b});
            return;
        }
        const double mid = 0.5 * (a + b);
        const double fm = value_at(mid);
        ++evals;
        if (std::abs(fm - 0.5 * (fa + fb)) <= theta) {
            leaves.push_back({a, b});
            return;
        }
        refine(a, fa, mid, fm, depth + 1);
        refine(mid, fm, b, fb, depth + 1);
    };
    {
        double prev_a = 0.0, prev_f = f0;
        for (int s = 1; s <= steps; ++s) {
            const double a = static_cast<double>(s) / steps;
            const double fa = s == steps ? f1 : value_at(a);
            refine(prev_a, prev_f, a, fa, 0);
            prev_a = a;
            prev_f = fa;
        }
    }

    std::vector<double> acc(static_cast<std::size_t>(n), 0.0);
    for (const Leaf& leaf : leaves) {
        for (std::int64_t i = 0; i < n; ++i) xi.at(i) = x0[i] + 0.5 * (leaf.a + leaf.b) * (x[i] - x0[i]);
        std::vector<double> g = detail::input_gradient(p, xi);
        const double w = leaf.b - leaf.a;
        for (std::int64_t i = 0; i < n; ++i) acc[static_cast<std::size_t>(i)] += g[static_cast<std::size_t>(i)] * w;
    }
    map.values.resize(static_cast<std::size_t>(n));
    map.signed_sum = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        const double v = (x[i] - x0[i]) * acc[static_cast<std::size_t>(i)];
        map.signed_sum += v;
        map.values[static_cast<std::size_t>(i)] = std::abs(v);
    }
    return map;
}

inline AttributionMap smoothgrad(const MareoParams& p, const Tensor& x, double sigma_rel = 0.05, int n_samples = 32,
                                 std::uint64_t seed = 0) {
    if (p.config.n_choices != 1) throw ConfigError("attribution: binary-head models only");
    if (n_samples < 2) throw ConfigError("smoothgrad: need at least 2 samples");
    if (sigma_rel == 0.0) return saliency(p, x);  // degenerate noise is exactly saliency
    double lo = x[0], hi = x[0];
    for (std::int64_t i = 0; i < x.size(); ++i) {
        lo = std::min(lo, x[i]);
        hi = std::max(hi, x[i]);
    }
    const double sigma = sigma_rel * (hi - lo);
    AttributionMap map;
    map.h = x.dim(1);
    map.w = x.dim(2);
    map.method = "smoothgrad";
    map.values.assign(static_cast<std::size_t>(x.size()), 0.0);
    Tensor xi = Tensor::alloc(x.shape());
    for (int s = 0; s < n_samples; ++s) {
        Rng rng(seed, mix64(0x560fULL + static_cast<std::uint64_t>(s)));
        for (std::int64_t i = 0; i < x.size(); ++i) xi.at(i) = x[i] + sigma * rng.gaussian();
        std::vector<double> g = detail::input_gradient(p, xi);
        for (std::size_t i = 0; i < g.size(); ++i) map.values[i] += std::abs(g[i]);
    }
    for (double& v : map.values) v /= n_samples;
    return map;
}

// 8-bit PGM with min-max normalization; a constant map writes all zeros.
inline void emit_heatmap_pgm(const AttributionMap& map, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("heatmap: cannot open for write: " + path);
    os << "P5\n" << map.w << " " << map.h << "\n255\n";
    double lo = map.values[0], hi = map.values[0];
    for (double v : map.values) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    for (double v : map.values) {
        const int byte = hi > lo ? static_cast<int>(std::floor((v - lo) / (hi - lo) * 255.0 + 0.5)) : 0;
        os.put(static_cast<char>(byte));
    }
    if (!os) throw FormatError("heatmap: write failed: " + path);
}

struct PgmImage {
    int h = 0, w = 0;
    std::vector<std::uint8_t> px;
};

inline PgmImage read_pgm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("pgm: cannot open: " + path);
    std::string magic;
    is >> magic;
    if (magic != "P5") throw FormatError("pgm: bad magic");
    PgmImage img;
    int maxv = 0;
    is >> img.w >> img.h >> maxv;
    is.get();
    if (maxv != 255 || img.w < 1 || img.h < 1) throw FormatError("pgm: bad header");
    img.px.resize(static_cast<std::size_t>(img.w) * img.h);
    is.read(reinterpret_cast<char*>(img.px.data()), static_cast<std::streamsize>(img.px.size()));
    if (!is) throw FormatError("pgm: truncated");
    return img;
}

}  // namespace mareo
