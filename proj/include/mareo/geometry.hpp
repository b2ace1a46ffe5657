#pragma once

// 2-D contour generation and the geometric predicates that define task rules.
// Everything operates in continuous coordinates; rasterization rounds later.

#include "mareo/common.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <vector>

namespace mareo::geom {

struct Point {
    double x = 0.0, y = 0.0;
};

inline Point operator+(Point a, Point b) { return {a.x + b.x, a.y + b.y}; }
inline Point operator-(Point a, Point b) { return {a.x - b.x, a.y - b.y}; }
inline Point operator*(double s, Point p) { return {s * p.x, s * p.y}; }
inline double dot(Point a, Point b) { return a.x * b.x + a.y * b.y; }
inline double cross(Point a, Point b) { return a.x * b.y - a.y * b.x; }
inline double norm(Point p) { return std::sqrt(dot(p, p)); }

using Poly = std::vector<Point>;

// ---------------------------------------------------------------------------
// Contours
// ---------------------------------------------------------------------------

enum class Complexity { Low, High };

struct Contour {
    Poly pts;  // closed polyline, last edge implicit
    std::uint64_t seed = 0;
};

// Radial polygon: vertices at angles 2*pi*k/n with radii 1+u_k.
inline Poly radial_polygon(const std::vector<double>& radii) {
    const int n = static_cast<int>(radii.size());
    Poly p(static_cast<std::size_t>(n));
    for (int k = 0; k < n; ++k) {
        const double a = 2.0 * M_PI * k / n;
        p[static_cast<std::size_t>(k)] = {radii[static_cast<std::size_t>(k)] * std::cos(a),
                                          radii[static_cast<std::size_t>(k)] * std::sin(a)};
    }
    return p;
}

inline bool segments_properly_intersect(Point a, Point b, Point c, Point d) {
    const double d1 = cross(d - c, a - c);
    const double d2 = cross(d - c, b - c);
    const double d3 = cross(b - a, c - a);
    const double d4 = cross(b - a, d - a);
    return ((d1 > 0 && d2 < 0) || (d1 < 0 && d2 > 0)) && ((d3 > 0 && d4 < 0) || (d3 < 0 && d4 > 0));
}

inline bool is_simple(const Poly& p) {
    const int n = static_cast<int>(p.size());
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) {
            // skip edges sharing a vertex
            if (j == i || (j + 1) % n == i || (i + 1) % n == j) continue;
            if (segments_properly_intersect(p[static_cast<std::size_t>(i)], p[static_cast<std::size_t>((i + 1) % n)],
                                            p[static_cast<std::size_t>(j)], p[static_cast<std::size_t>((j + 1) % n)]))
                return false;
        }
    return true;
}

inline Contour gen_shape(std::uint64_t seed, Complexity cx) {
    Rng rng(seed, stream_id("shape"));
    for (int attempt = 0; attempt < 100; ++attempt) {
        const int n = cx == Complexity::Low ? rng.uniform_int(16, 24) : rng.uniform_int(28, 48);
        std::vector<double> radii(static_cast<std::size_t>(n));
        for (double& r : radii) r = 1.0 + rng.uniform(-0.4, 0.4);
        Contour c{radial_polygon(radii), seed};
        if (is_simple(c.pts)) return c;
    }
    throw GenerationError("gen_shape: no simple contour after 100 attempts");
}

// ---------------------------------------------------------------------------
// Transforms and basic measures
// ---------------------------------------------------------------------------

struct Placement {
    double tx = 0.0, ty = 0.0;
    double rot = 0.0;
    double scale = 1.0;
    bool mirror = false;  // x-negation applied before rotation
};

inline Poly apply(const Poly& p, const Placement& t) {
    Poly out(p.size());
    const double cr = std::cos(t.rot), sr = std::sin(t.rot);
    for (std::size_t i = 0; i < p.size(); ++i) {
        double x = p[i].x * (t.mirror ? -1.0 : 1.0);
        double y = p[i].y;
        x *= t.scale;
        y *= t.scale;
        out[i] = {x * cr - y * sr + t.tx, x * sr + y * cr + t.ty};
    }
    return out;
}

inline Point centroid(const Poly& p) {
    Point c{0, 0};
    for (const Point& q : p) c = c + q;
    return (1.0 / static_cast<double>(p.size())) * c;
}

struct BBox {
    double x0, y0, x1, y1;
    double width() const { return x1 - x0; }
    double height() const { return y1 - y0; }
};

inline BBox bbox(const Poly& p) {
    BBox b{p[0].x, p[0].y, p[0].x, p[0].y};
    for (const Point& q : p) {
        b.x0 = std::min(b.x0, q.x);
        b.y0 = std::min(b.y0, q.y);
        b.x1 = std::max(b.x1, q.x);
        b.y1 = std::max(b.y1, q.y);
    }
    return b;
}

inline double area(const Poly& p) {
    double s = 0.0;
    const int n = static_cast<int>(p.size());
    for (int i = 0; i < n; ++i) s += cross(p[static_cast<std::size_t>(i)], p[static_cast<std::size_t>((i + 1) % n)]);
    return std::abs(s) * 0.5;
}

// ---------------------------------------------------------------------------
// Distance / containment predicates
// ---------------------------------------------------------------------------

inline double point_segment_dist(Point p, Point a, Point b) {
    const Point ab = b - a;
    const double len2 = dot(ab, ab);
    double t = len2 > 0.0 ? dot(p - a, ab) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    return norm(p - (a + t * ab));
}

inline double segment_segment_dist(Point a, Point b, Point c, Point d) {
    if (segments_properly_intersect(a, b, c, d)) return 0.0;
    return std::min(std::min(point_segment_dist(a, c, d), point_segment_dist(b, c, d)),
                    std::min(point_segment_dist(c, a, b), point_segment_dist(d, a, b)));
}

inline double min_distance(const Poly& a, const Poly& b) {
    double best = std::numeric_limits<double>::infinity();
    const int na = static_cast<int>(a.size()), nb = static_cast<int>(b.size());
    for (int i = 0; i < na; ++i)
        for (int j = 0; j < nb; ++j)
            best = std::min(best, segment_segment_dist(a[static_cast<std::size_t>(i)], a[static_cast<std::size_t>((i + 1) % na)],
                                                       b[static_cast<std::size_t>(j)], b[static_cast<std::size_t>((j + 1) % nb)]));
    return best;
}

// even-odd rule
inline bool point_in_poly(Point p, const Poly& poly) {
    bool in = false;
    const int n = static_cast<int>(poly.size());
    for (int i = 0, j = n - 1; i < n; j = i++) {
        const Point& pi = poly[static_cast<std::size_t>(i)];
        const Point& pj = poly[static_cast<std::size_t>(j)];
        if ((pi.y > p.y) != (pj.y > p.y) && p.x < (pj.x - pi.x) * (p.y - pi.y) / (pj.y - pi.y) + pi.x) in = !in;
    }
    return in;
}

inline bool edges_cross(const Poly& a, const Poly& b) {
    const int na = static_cast<int>(a.size()), nb = static_cast<int>(b.size());
    for (int i = 0; i < na; ++i)
        for (int j = 0; j < nb; ++j)
            if (segments_properly_intersect(a[static_cast<std::size_t>(i)], a[static_cast<std::size_t>((i + 1) % na)],
                                            b[static_cast<std::size_t>(j)], b[static_cast<std::size_t>((j + 1) % nb)]))
                return true;
    return false;
}

// a strictly inside b: every vertex of a inside b, no edge crossings
inline bool inside(const Poly& a, const Poly& b) {
    for (const Point& p : a)
        if (!point_in_poly(p, b)) return false;
    return !edges_cross(a, b);
}

// near-contact without containment
inline bool touches(const Poly& a, const Poly& b, double px_threshold = 1.0) {
    if (inside(a, b) || inside(b, a)) return false;
    return min_distance(a, b) < px_threshold;
}

// ---------------------------------------------------------------------------
// Same-shape-up-to-transform tests.  Vertex lists are compared after
// normalizing the stated transform class, over all cyclic shifts and both
// orientations; tolerance is in continuous coordinates.
// ---------------------------------------------------------------------------

enum class Xform { Translation, Rotation, Scaling, RotationScaling, Reflection };

namespace detail {

inline double max_pointwise_dist(const Poly& a, const Poly& b, int shift, bool reversed) {
    const int n = static_cast<int>(a.size());
    double worst = 0.0;
    for (int i = 0; i < n; ++i) {
        const int j = reversed ? ((shift - i) % n + n) % n : (i + shift) % n;
        worst = std::max(worst, norm(a[static_cast<std::size_t>(i)] - b[static_cast<std::size_t>(j)]));
        if (worst > 1e6) break;
    }
    return worst;
}

// Fits b ~= c * a over complex coordinates (optionally |c| constrained to 1),
// returning the max residual for the best cyclic alignment.
inline double procrustes_residual(const Poly& a0, const Poly& b0, bool allow_scale, bool conjugate_a) {
    const int n = static_cast<int>(a0.size());
    const Point ca = centroid(a0), cb = centroid(b0);
    std::vector<std::complex<double>> a(static_cast<std::size_t>(n)), b(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        std::complex<double> z(a0[static_cast<std::size_t>(i)].x - ca.x, a0[static_cast<std::size_t>(i)].y - ca.y);
        a[static_cast<std::size_t>(i)] = conjugate_a ? std::conj(z) : z;
        b[static_cast<std::size_t>(i)] = {b0[static_cast<std::size_t>(i)].x - cb.x, b0[static_cast<std::size_t>(i)].y - cb.y};
    }
    double asq = 0.0;
    for (const auto& z : a) asq += std::norm(z);
    if (asq == 0.0) return std::numeric_limits<double>::infinity();

    double best = std::numeric_limits<double>::infinity();
    for (int rev = 0; rev < 2; ++rev)
        for (int shift = 0; shift < n; ++shift) {
            std::complex<double> num{0.0, 0.0};
            for (int i = 0; i < n; ++i) {
                const int j = rev ? ((shift - i) % n + n) % n : (i + shift) % n;
                num += b[static_cast<std::size_t>(j)] * std::conj(a[static_cast<std::size_t>(i)]);
            }
            std::complex<double> c = num / asq;
            if (!allow_scale) {
                const double m = std::abs(c);
                if (m == 0.0) continue;
                c /= m;
            }
            double worst = 0.0;
            for (int i = 0; i < n; ++i) {
                const int j = rev ? ((shift - i) % n + n) % n : (i + shift) % n;
                worst = std::max(worst, std::abs(b[static_cast<std::size_t>(j)] - c * a[static_cast<std::size_t>(i)]));
                if (worst >= best) break;
            }
            best = std::min(best, worst);
        }
    return best;
}

}  // namespace detail

inline bool same_upto(Xform cls, const Poly& a, const Poly& b, double tol = 1e-6) {
    if (a.size() != b.size() || a.size() < 3) return false;
    const int n = static_cast<int>(a.size());
    switch (cls) {
        case Xform::Translation: {
            const Point ca = centroid(a), cb = centroid(b);
            Poly an(a.size()), bn(b.size());
            for (int i = 0; i < n; ++i) {
                an[static_cast<std::size_t>(i)] = a[static_cast<std::size_t>(i)] - ca;
                bn[static_cast<std::size_t>(i)] = b[static_cast<std::size_t>(i)] - cb;
            }
            for (int rev = 0; rev < 2; ++rev)
                for (int s = 0; s < n; ++s)
                    if (detail::max_pointwise_dist(an, bn, s, rev == 1) <= tol) return true;
            return false;
        }
        case Xform::Scaling: {
            // uniform scale + translation, no rotation
            const Point ca = centroid(a), cb = centroid(b);
            double ra = 0.0, rb = 0.0;
            for (int i = 0; i < n; ++i) {
                ra += dot(a[static_cast<std::size_t>(i)] - ca, a[static_cast<std::size_t>(i)] - ca);
                rb += dot(b[static_cast<std::size_t>(i)] - cb, b[static_cast<std::size_t>(i)] - cb);
            }
            if (ra == 0.0 || rb == 0.0) return false;
            const double s = std::sqrt(rb / ra);
            Poly an(a.size()), bn(b.size());
            for (int i = 0; i < n; ++i) {
                an[static_cast<std::size_t>(i)] = s * (a[static_cast<std::size_t>(i)] - ca);
                bn[static_cast<std::size_t>(i)] = b[static_cast<std::size_t>(i)] - cb;
            }
            // tolerance scales with the fitted size change
            const double t2 = tol * std::max(1.0, s);
            for (int rev = 0; rev < 2; ++rev)
                for (int sh = 0; sh < n; ++sh)
                    if (detail::max_pointwise_dist(an, bn, sh, rev == 1) <= t2) return true;
            return false;
        }
        case Xform::Rotation:
            return detail::procrustes_residual(a, b, false, false) <= tol;
        case Xform::RotationScaling:
            return detail::procrustes_residual(a, b, true, false) <= tol;
        case Xform::Reflection:
            // any reflection axis: conjugate then rotation fit
            return detail::procrustes_residual(a, b, false, true) <= tol;
    }
    return false;
}

// ---------------------------------------------------------------------------
// Arrangement predicates over centroids
// ---------------------------------------------------------------------------

// three centroids collinear within 2 degrees, evenly spaced within 10%
inline bool in_row(Point a, Point b, Point c) {
    const Point u = b - a, v = c - b;
    const double nu = norm(u), nv = norm(v);
    if (nu == 0.0 || nv == 0.0) return false;
    const double cosang = std::clamp(dot(u, v) / (nu * nv), -1.0, 1.0);
    if (std::acos(cosang) > 2.0 * M_PI / 180.0) return false;
    return std::abs(nu - nv) <= 0.10 * std::max(nu, nv);
}

// four centroids within 3 px of the corners of a fitted square
inline bool forms_square(std::array<Point, 4> pts, double tol_px = 3.0) {
    Point c{0, 0};
    for (const Point& p : pts) c = c + p;
    c = 0.25 * c;
    // order by angle around the center
    std::sort(pts.begin(), pts.end(), [&](Point p, Point q) {
        return std::atan2(p.y - c.y, p.x - c.x) < std::atan2(q.y - c.y, q.x - c.x);
    });
    // fit R*exp(i(theta0 + k*pi/2)) to the ordered offsets
    std::complex<double> acc{0.0, 0.0};
    for (int k = 0; k < 4; ++k) {
        std::complex<double> z(pts[static_cast<std::size_t>(k)].x - c.x, pts[static_cast<std::size_t>(k)].y - c.y);
        acc += z * std::exp(std::complex<double>(0.0, -k * M_PI / 2.0));
    }
    acc *= 0.25;
    for (int k = 0; k < 4; ++k) {
        const std::complex<double> ideal = acc * std::exp(std::complex<double>(0.0, k * M_PI / 2.0));
        const double dx = pts[static_cast<std::size_t>(k)].x - c.x - ideal.real();
        const double dy = pts[static_cast<std::size_t>(k)].y - c.y - ideal.imag();
        if (std::sqrt(dx * dx + dy * dy) > tol_px) return false;
    }
    return true;
}

}  // namespace mareo::geom
