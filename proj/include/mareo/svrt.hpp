#pragma once

// Procedural generator for a 14-rule subset of SVRT-style binary
// classification tasks.  Every emitted sample is re-verified by the
// geometric oracle for its rule before it leaves the generator; label 1
// always means "the rule holds".
//
// Determinism: a sample is a pure function of (task, seed, index).  Failed
// construction attempts retry with derived sub-streams, so neighbouring
// samples never perturb each other.

#include "mareo/dataset.hpp"
#include "mareo/geometry.hpp"
#include "mareo/raster.hpp"

#include <array>
#include <optional>
#include <string>
#include <vector>

namespace mareo::svrt {

inline const std::vector<int>& supported_tasks() {
    static const std::vector<int> t = {1, 2, 5, 7, 8, 10, 11, 15, 19, 20, 21, 22, 23, 25};
    return t;
}

inline bool task_supported(int task) {
    for (int t : supported_tasks())
        if (t == task) return true;
    return false;
}

struct SceneItem {
    geom::Contour shape;
    geom::Placement pl;
    geom::Poly world;  // transformed contour
};

struct SceneSpec {
    int canvas = 64;
    std::vector<SceneItem> items;
};

namespace detail {

constexpr double kMargin = 2.0;
constexpr double kMinBBoxSide = 8.0;
constexpr double kTouchPx = 1.0;  // oracle threshold for "touching"

// rule-distance thresholds scale with the canvas (stated at the 128-px profile)
inline double near_max(int canvas) { return 2.0 * canvas / 128.0; }
inline double far_min(int canvas) { return 8.0 * canvas / 128.0; }

inline geom::Complexity shape_complexity(int canvas) {
    return canvas >= 128 ? geom::Complexity::High : geom::Complexity::Low;
}

inline SceneItem make_item(geom::Contour c, geom::Placement pl) {
    geom::Poly w = geom::apply(c.pts, pl);
    return {std::move(c), pl, std::move(w)};
}

inline bool fits_canvas(const geom::Poly& w, int canvas) {
    const geom::BBox b = geom::bbox(w);
    return b.x0 >= kMargin && b.y0 >= kMargin && b.x1 <= canvas - 1 - kMargin && b.y1 <= canvas - 1 - kMargin;
}

inline bool big_enough(const geom::Poly& w) {
    const geom::BBox b = geom::bbox(w);
    return b.width() >= kMinBBoxSide && b.height() >= kMinBBoxSide;
}

// Random non-overlapping placement.  Translation is integer-rounded when
// pixel-exact copies are wanted.
inline std::optional<geom::Placement> try_place(const geom::Contour& c, double scale, double rot, bool mirror,
                                                int canvas, Rng& rng, const std::vector<geom::Poly>& placed,
                                                double gap, bool integer_xy, int tries = 80) {
    geom::Placement base{0.0, 0.0, rot, scale, mirror};
    const geom::Poly local = geom::apply(c.pts, base);
    const geom::BBox b = geom::bbox(local);
    const double x_lo = kMargin - b.x0, x_hi = canvas - 1 - kMargin - b.x1;
    const double y_lo = kMargin - b.y0, y_hi = canvas - 1 - kMargin - b.y1;
    if (x_hi < x_lo || y_hi < y_lo) return std::nullopt;
    for (int t = 0; t < tries; ++t) {
        double tx = rng.uniform(x_lo, x_hi);
        double ty = rng.uniform(y_lo, y_hi);
        if (integer_xy) {
            tx = std::floor(tx + 0.5);
            ty = std::floor(ty + 0.5);
            if (tx < x_lo || tx > x_hi || ty < y_lo || ty > y_hi) continue;
        }
        geom::Placement pl{tx, ty, rot, scale, mirror};
        geom::Poly w = geom::apply(c.pts, pl);
        bool ok = big_enough(w);
        for (const geom::Poly& other : placed) {
            if (!ok) break;
            ok = geom::min_distance(w, other) >= gap;
        }
        if (ok) return pl;
    }
    return std::nullopt;
}

// Placement strictly inside a container with boundary distance in [lo, hi).
inline std::optional<geom::Placement> place_inside(const geom::Contour& c, double scale, const geom::Poly& container,
                                                   int canvas, Rng& rng, double dist_lo, double dist_hi,
                                                   const std::vector<geom::Poly>& avoid, double gap,
                                                   int tries = 400) {
    const geom::BBox cb = geom::bbox(container);
    for (int t = 0; t < tries; ++t) {
        const double cx = rng.uniform(cb.x0, cb.x1);
        const double cy = rng.uniform(cb.y0, cb.y1);
        geom::Placement pl{cx, cy, 0.0, scale, false};
        geom::Poly w = geom::apply(c.pts, pl);
        if (!big_enough(w) || !fits_canvas(w, canvas)) continue;
        if (!geom::inside(w, container)) continue;
        const double d = geom::min_distance(w, container);
        if (d < dist_lo || d >= dist_hi) continue;
        bool ok = true;
        for (const geom::Poly& other : avoid)
            if (geom::min_distance(w, other) < gap) {
                ok = false;
                break;
            }
        if (ok) return pl;
    }
    return std::nullopt;
}

// Approach along a ray until the boundary distance lands in [lo, hi); used
// for outside-touching scenes.
inline std::optional<geom::Placement> place_touching_outside(const geom::Contour& c, double scale,
                                                             const geom::Poly& container, int canvas, Rng& rng,
                                                             double dist_lo, double dist_hi, int dir_tries = 24) {
    const geom::Point cc = geom::centroid(container);
    for (int t = 0; t < dir_tries; ++t) {
        const double theta = rng.uniform(0.0, 2.0 * M_PI);
        const geom::Point u{std::cos(theta), std::sin(theta)};
        bool failed = false;
        for (double dist = canvas * 0.9; dist > 0.0 && !failed; dist -= 0.5) {
            geom::Placement pl{cc.x + dist * u.x, cc.y + dist * u.y, 0.0, scale, false};
            geom::Poly w = geom::apply(c.pts, pl);
            if (!fits_canvas(w, canvas) || !big_enough(w)) continue;
            const double d = geom::min_distance(w, container);
            if (d >= dist_hi) continue;
            // fine approach from just outside the window
            for (double fine = dist + 0.5; fine > dist - 0.5; fine -= 0.05) {
                geom::Placement plf{cc.x + fine * u.x, cc.y + fine * u.y, 0.0, scale, false};
                geom::Poly wf = geom::apply(c.pts, plf);
                if (!fits_canvas(wf, canvas)) continue;
                const double df = geom::min_distance(wf, container);
                if (df >= dist_hi) continue;
                if (df < dist_lo || geom::edges_cross(wf, container) || geom::inside(wf, container)) {
                    failed = true;  // overshot into contact/overlap; new direction
                    break;
                }
                return plf;
            }
            break;
        }
    }
    return std::nullopt;
}

// Fresh contour whose bounding-box area at `scale` matches the target within
// 15%, so class is not decodable from size statistics.
inline geom::Contour matched_shape(Rng& rng, geom::Complexity cx, double scale, double target_bbox_area,
                                   const std::vector<const geom::Contour*>& not_same, int tries = 200) {
    for (int t = 0; t < tries; ++t) {
        geom::Contour c = geom::gen_shape(rng.next_u64(), cx);
        const geom::BBox b = geom::bbox(geom::apply(c.pts, {0, 0, 0, scale, false}));
        if (std::abs(b.width() * b.height() - target_bbox_area) > 0.15 * target_bbox_area) continue;
        bool distinct = true;
        for (const geom::Contour* other : not_same)
            if (geom::same_upto(geom::Xform::Translation, c.pts, other->pts, 1e-6)) {
                distinct = false;
                break;
            }
        if (distinct) return c;
    }
    throw GenerationError("matched_shape: no area-matched contour found");
}

inline double bbox_area_at(const geom::Contour& c, double scale) {
    const geom::BBox b = geom::bbox(geom::apply(c.pts, {0, 0, 0, scale, false}));
    return b.width() * b.height();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Per-task rule oracles.  `rule_holds` answers "is this a class-1 scene".
// ---------------------------------------------------------------------------

inline bool rule_holds(int task, const SceneSpec& s) {
    using geom::Xform;
    const auto& it = s.items;
    auto same_t = [&](int i, int j) {
        return geom::same_upto(Xform::Translation, it[static_cast<std::size_t>(i)].world,
                               it[static_cast<std::size_t>(j)].world, 1e-6);
    };
    switch (task) {
        case 1:
            return it.size() == 2 && same_t(0, 1);
        case 2: {
            if (it.size() != 2) return false;
            const geom::Poly& outer = it[0].world;
            const geom::Poly& inner = it[1].world;
            return geom::inside(inner, outer) && geom::min_distance(inner, outer) < detail::near_max(s.canvas);
        }
        case 5: {
            if (it.size() != 4) return false;
            const std::array<std::array<int, 4>, 3> pairings = {{{0, 1, 2, 3}, {0, 2, 1, 3}, {0, 3, 1, 2}}};
            for (const auto& p : pairings)
                if (same_t(p[0], p[1]) && same_t(p[2], p[3])) return true;
            return false;
        }
        case 7: {
            if (it.size() != 6) return false;
            // exactly two equivalence classes of three identical shapes
            std::vector<int> cls(6, -1);
            int n_cls = 0;
            for (int i = 0; i < 6; ++i) {
                if (cls[static_cast<std::size_t>(i)] != -1) continue;
                cls[static_cast<std::size_t>(i)] = n_cls;
                for (int j = i + 1; j < 6; ++j)
                    if (cls[static_cast<std::size_t>(j)] == -1 && same_t(i, j)) cls[static_cast<std::size_t>(j)] = n_cls;
                ++n_cls;
            }
            if (n_cls != 2) return false;
            int count0 = 0;
            for (int v : cls) count0 += v == 0 ? 1 : 0;
            return count0 == 3;
        }
        case 8: {
            if (it.size() != 2) return false;
            const bool scaled_pair = geom::same_upto(Xform::Scaling, it[0].world, it[1].world, 1e-6);
            const int small = geom::area(it[0].world) < geom::area(it[1].world) ? 0 : 1;
            return scaled_pair && geom::inside(it[static_cast<std::size_t>(small)].world,
                                               it[static_cast<std::size_t>(1 - small)].world);
        }
        case 10:
        case 15: {
            if (it.size() != 4) return false;
            const std::array<geom::Point, 4> cs = {geom::centroid(it[0].world), geom::centroid(it[1].world),
                                                   geom::centroid(it[2].world), geom::centroid(it[3].world)};
            if (!geom::forms_square(cs)) return false;
            if (task == 10) return true;
            return same_t(0, 1) && same_t(0, 2) && same_t(0, 3);
        }
        case 11:
            return it.size() == 2 && geom::touches(it[1].world, it[0].world, detail::kTouchPx);
        case 19:
            return it.size() == 2 && geom::same_upto(Xform::Scaling, it[0].world, it[1].world, 1e-6);
        case 20:
            return it.size() == 2 && geom::same_upto(Xform::Reflection, it[0].world, it[1].world, 1e-6);
        case 21:
            return it.size() == 2 && geom::same_upto(Xform::RotationScaling, it[0].world, it[1].world, 1e-6);
        case 22: {
            if (it.size() != 3) return false;
            const geom::Point a = geom::centroid(it[0].world), b = geom::centroid(it[1].world),
                              c = geom::centroid(it[2].world);
            const bool row = geom::in_row(a, b, c) || geom::in_row(b, a, c) || geom::in_row(a, c, b);
            return row && same_t(0, 1) && same_t(0, 2);
        }
        case 23: {
            if (it.size() != 3) return false;
            const int n_inside = (geom::inside(it[1].world, it[0].world) ? 1 : 0) +
                                 (geom::inside(it[2].world, it[0].world) ? 1 : 0);
            return n_inside == 0 || n_inside == 2;
        }
        case 25:
            return it.size() == 2 && geom::same_upto(Xform::Rotation, it[0].world, it[1].world, 1e-6);
        default:
            throw ConfigError("unsupported task id " + std::to_string(task));
    }
}

// ---------------------------------------------------------------------------
// Scene construction
// ---------------------------------------------------------------------------

namespace detail {

struct Ctx {
    int canvas;
    double f;  // size factor relative to the 64-px desk profile
    Rng& rng;
    geom::Complexity cx;
};

inline std::vector<geom::Poly> worlds(const SceneSpec& s) {
    std::vector<geom::Poly> w;
    w.reserve(s.items.size());
    for (const SceneItem& it : s.items) w.push_back(it.world);
    return w;
}

// n copies/distinct shapes scattered without overlap, integer translations
inline SceneSpec scatter_shapes(Ctx& c, const std::vector<geom::Contour>& shapes, double scale) {
    SceneSpec s{c.canvas, {}};
    for (const geom::Contour& sh : shapes) {
        auto pl = try_place(sh, scale, 0.0, false, c.canvas, c.rng, worlds(s), 2.0, true);
        if (!pl) throw GenerationError("scatter: no room");
        s.items.push_back(make_item(sh, *pl));
    }
    return s;
}

// identical-vs-distinct multiset tasks (1, 5, 7, 22 share this core)
inline std::vector<geom::Contour> group_shapes(Ctx& c, int groups, int per_group, bool identical, double scale) {
    std::vector<geom::Contour> protos;
    for (int g = 0; g < groups; ++g) {
        geom::Contour base = geom::gen_shape(c.rng.next_u64(), c.cx);
        // distinct prototypes across groups
        for (int tries = 0; tries < 50; ++tries) {
            bool clash = false;
            for (const geom::Contour& other : protos)
                if (geom::same_upto(geom::Xform::Translation, base.pts, other.pts, 1e-6)) clash = true;
            if (!clash) break;
            base = geom::gen_shape(c.rng.next_u64(), c.cx);
        }
        protos.push_back(std::move(base));
    }
    std::vector<geom::Contour> out;
    if (identical) {
        for (const geom::Contour& p : protos)
            for (int i = 0; i < per_group; ++i) out.push_back(p);
    } else {
        // fresh shapes, bbox-area matched per group so size statistics carry
        // no label signal
        for (const geom::Contour& p : protos) {
            const double target = bbox_area_at(p, scale);
            std::vector<const geom::Contour*> taken;
            for (const geom::Contour& o : out) taken.push_back(&o);
            for (int i = 0; i < per_group; ++i) {
                out.push_back(matched_shape(c.rng, c.cx, scale, target, taken));
                taken.push_back(&out.back());
            }
        }
    }
    return out;
}

// two-shape transform-pair tasks (19, 20, 21, 25): label 1 applies the
// transform to a copy; label 0 uses fresh size-matched shapes
inline SceneSpec transform_pair(Ctx& c, int label, double scale, double rot, double scale2, bool mirror) {
    geom::Contour base = geom::gen_shape(c.rng.next_u64(), c.cx);
    SceneSpec s{c.canvas, {}};
    auto pl0 = try_place(base, scale, 0.0, false, c.canvas, c.rng, {}, 2.0, true);
    if (!pl0) throw GenerationError("transform_pair: no room for first shape");
    s.items.push_back(make_item(base, *pl0));

    geom::Contour second = base;
    if (label == 0) {
        const double target = bbox_area_at(base, scale);
        std::vector<const geom::Contour*> avoid{&base};
        second = matched_shape(c.rng, c.cx, scale, target, avoid);
    }
    auto pl1 = try_place(second, scale2, rot, mirror, c.canvas, c.rng, worlds(s), 2.0, false);
    if (!pl1) throw GenerationError("transform_pair: no room for second shape");
    s.items.push_back(make_item(second, *pl1));
    return s;
}

inline SceneSpec build_t1(Ctx& c, int label) {
    const double scale = c.rng.uniform(8.0, 11.0) * c.f;
    auto shapes = group_shapes(c, 1, 2, label == 1, scale);
    return scatter_shapes(c, shapes, scale);
}

inline SceneSpec build_t2(Ctx& c, int label) {
    geom::Contour outer = geom::gen_shape(c.rng.next_u64(), geom::Complexity::Low);
    const double s_out = c.rng.uniform(17.0, 21.0) * c.f;
    SceneSpec s{c.canvas, {}};
    auto plo = try_place(outer, s_out, 0.0, false, c.canvas, c.rng, {}, 2.0, false, 40);
    if (!plo) throw GenerationError("t2: container does not fit");
    s.items.push_back(make_item(outer, *plo));

    geom::Contour inner = geom::gen_shape(c.rng.next_u64(), geom::Complexity::Low);
    const double s_in = c.rng.uniform(4.5, 5.5) * c.f;
    const double lo = label == 1 ? 0.3 : far_min(c.canvas);
    const double hi = label == 1 ? near_max(c.canvas) : 1e9;
    auto pli = place_inside(inner, s_in, s.items[0].world, c.canvas, c.rng, lo, hi, {}, 0.0);
    if (!pli) throw GenerationError("t2: no inner placement in the distance window");
    s.items.push_back(make_item(inner, *pli));
    return s;
}

inline SceneSpec build_t5(Ctx& c, int label) {
    const double scale = c.rng.uniform(5.5, 7.0) * c.f;
    auto shapes = group_shapes(c, 2, 2, label == 1, scale);
    Rng order(c.rng.next_u64());
    order.shuffle(shapes);
    return scatter_shapes(c, shapes, scale);
}

inline SceneSpec build_t7(Ctx& c, int label) {
    const double scale = c.rng.uniform(4.5, 5.5) * c.f;
    // class 1: two triples of identical shapes; class 0: three pairs
    auto shapes = label == 1 ? group_shapes(c, 2, 3, true, scale) : group_shapes(c, 3, 2, true, scale);
    Rng order(c.rng.next_u64());
    order.shuffle(shapes);
    return scatter_shapes(c, shapes, scale);
}

inline SceneSpec build_t8(Ctx& c, int label) {
    geom::Contour outer = geom::gen_shape(c.rng.next_u64(), geom::Complexity::Low);
    const double s_out = c.rng.uniform(14.0, 17.0) * c.f;
    SceneSpec s{c.canvas, {}};
    // off-center container leaves room for the outside case
    auto plo = try_place(outer, s_out, 0.0, false, c.canvas, c.rng, {}, 2.0, false, 60);
    if (!plo) throw GenerationError("t8: container does not fit");
    s.items.push_back(make_item(outer, *plo));

    const double k = c.rng.uniform(0.38, 0.5);
    const double s_in = k * s_out;
    if (label == 1) {
        auto pli = place_inside(outer, s_in, s.items[0].world, c.canvas, c.rng, 1.0, 1e9, {}, 0.0);
        if (!pli) throw GenerationError("t8: no inside placement");
        s.items.push_back(make_item(outer, *pli));
    } else {
        auto pli = try_place(outer, s_in, 0.0, false, c.canvas, c.rng, worlds(s), 2.0, false);
        if (!pli) throw GenerationError("t8: no outside placement");
        s.items.push_back(make_item(outer, *pli));
    }
    return s;
}

inline std::array<geom::Point, 4> square_corners(Ctx& c) {
    const double R = c.rng.uniform(14.0, 19.0) * c.f;
    const double theta = c.rng.uniform(0.0, M_PI / 2.0);
    const double cx = c.canvas / 2.0 + c.rng.uniform(-3.0, 3.0) * c.f;
    const double cy = c.canvas / 2.0 + c.rng.uniform(-3.0, 3.0) * c.f;
    std::array<geom::Point, 4> corners;
    for (int k = 0; k < 4; ++k) {
        const double a = theta + k * M_PI / 2.0;
        corners[static_cast<std::size_t>(k)] = {std::floor(cx + R * std::cos(a) + 0.5),
                                                std::floor(cy + R * std::sin(a) + 0.5)};
    }
    return corners;
}

inline SceneSpec place_at_points(Ctx& c, const std::vector<geom::Contour>& shapes,
                                 const std::vector<geom::Point>& targets, double scale) {
    SceneSpec s{c.canvas, {}};
    for (std::size_t i = 0; i < shapes.size(); ++i) {
        geom::Placement pl{0.0, 0.0, 0.0, scale, false};
        const geom::Point ctr = geom::centroid(geom::apply(shapes[i].pts, pl));
        pl.tx = targets[i].x - ctr.x;
        pl.ty = targets[i].y - ctr.y;
        pl.tx = std::floor(pl.tx + 0.5);
        pl.ty = std::floor(pl.ty + 0.5);
        geom::Poly w = geom::apply(shapes[i].pts, pl);
        if (!fits_canvas(w, c.canvas) || !big_enough(w)) throw GenerationError("place_at_points: out of canvas");
        for (const SceneItem& other : s.items)
            if (geom::min_distance(w, other.world) < 2.0) throw GenerationError("place_at_points: overlap");
        s.items.push_back(make_item(shapes[i], pl));
    }
    return s;
}

inline SceneSpec build_t10(Ctx& c, int label) {
    const double scale = c.rng.uniform(5.0, 6.5) * c.f;
    auto shapes = group_shapes(c, 1, 4, false, scale);  // four distinct shapes either way
    if (label == 1) {
        auto corners = square_corners(c);
        return place_at_points(c, shapes, {corners.begin(), corners.end()}, scale);
    }
    SceneSpec s = scatter_shapes(c, shapes, scale);
    std::array<geom::Point, 4> cs;
    for (int i = 0; i < 4; ++i) cs[static_cast<std::size_t>(i)] = geom::centroid(s.items[static_cast<std::size_t>(i)].world);
    if (geom::forms_square(cs)) throw GenerationError("t10: accidental square");
    return s;
}

inline SceneSpec build_t11(Ctx& c, int label) {
    geom::Contour big = geom::gen_shape(c.rng.next_u64(), geom::Complexity::Low);
    const double s_big = c.rng.uniform(12.0, 15.0) * c.f;
    SceneSpec s{c.canvas, {}};
    auto plb = try_place(big, s_big, 0.0, false, c.canvas, c.rng, {}, 2.0, false, 60);
    if (!plb) throw GenerationError("t11: big shape does not fit");
    s.items.push_back(make_item(big, *plb));

    geom::Contour small = geom::gen_shape(c.rng.next_u64(), geom::Complexity::Low);
    const double s_small = c.rng.uniform(4.5, 5.5) * c.f;
    if (label == 1) {
        auto pls = place_touching_outside(small, s_small, s.items[0].world, c.canvas, c.rng, 0.2, 0.9);
        if (!pls) throw GenerationError("t11: no touching placement");
        s.items.push_back(make_item(small, *pls));
    } else {
        for (int t = 0; t < 60; ++t) {
            auto pls = try_place(small, s_small, 0.0, false, c.canvas, c.rng, {}, 0.0, false, 1);
            if (!pls) continue;
            geom::Poly w = geom::apply(small.pts, *pls);
            if (geom::inside(w, s.items[0].world)) continue;
            if (geom::min_distance(w, s.items[0].world) <= far_min(c.canvas)) continue;
            s.items.push_back(make_item(small, *pls));
            return s;
        }
        throw GenerationError("t11: no separated placement");
    }
    return s;
}

inline SceneSpec build_t15(Ctx& c, int label) {
    const double scale = c.rng.uniform(5.0, 6.5) * c.f;
    auto shapes = group_shapes(c, 1, 4, label == 1, scale);
    auto corners = square_corners(c);
    return place_at_points(c, shapes, {corners.begin(), corners.end()}, scale);
}

inline SceneSpec build_t22(Ctx& c, int label) {
    const double scale = c.rng.uniform(6.0, 8.0) * c.f;
    auto shapes = group_shapes(c, 1, 3, label == 1, scale);
    const double d = c.rng.uniform(17.0, 21.0) * c.f;
    const double phi = c.rng.uniform(0.0, M_PI);
    const geom::Point u{std::cos(phi), std::sin(phi)};
    const double cx = c.canvas / 2.0 + c.rng.uniform(-4.0, 4.0) * c.f;
    const double cy = c.canvas / 2.0 + c.rng.uniform(-4.0, 4.0) * c.f;
    std::vector<geom::Point> targets;
    for (int i = -1; i <= 1; ++i) targets.push_back({cx + i * d * u.x, cy + i * d * u.y});
    return place_at_points(c, shapes, targets, scale);
}

inline SceneSpec build_t23(Ctx& c, int label) {
    geom::Contour outer = geom::gen_shape(c.rng.next_u64(), geom::Complexity::Low);
    const double s_out = c.rng.uniform(13.0, 16.0) * c.f;
    SceneSpec s{c.canvas, {}};
    auto plo = try_place(outer, s_out, 0.0, false, c.canvas, c.rng, {}, 2.0, false, 60);
    if (!plo) throw GenerationError("t23: container does not fit");
    s.items.push_back(make_item(outer, *plo));

    const double s_small = c.rng.uniform(4.5, 5.2) * c.f;
    int want_inside;
    if (label == 1) {
        want_inside = c.rng.bernoulli(0.5) ? 2 : 0;
    } else {
        want_inside = 1;
    }
    for (int i = 0; i < 2; ++i) {
        geom::Contour small = geom::gen_shape(c.rng.next_u64(), geom::Complexity::Low);
        const bool inside_this = i < want_inside;
        if (inside_this) {
            std::vector<geom::Poly> avoid;
            for (std::size_t j = 1; j < s.items.size(); ++j) avoid.push_back(s.items[j].world);
            auto pl = place_inside(small, s_small, s.items[0].world, c.canvas, c.rng, 1.0, 1e9, avoid, 2.0);
            if (!pl) throw GenerationError("t23: no inside placement");
            s.items.push_back(make_item(small, *pl));
        } else {
            for (int t = 0;; ++t) {
                if (t >= 80) throw GenerationError("t23: no outside placement");
                auto pl = try_place(small, s_small, 0.0, false, c.canvas, c.rng, worlds(s), 2.0, false, 1);
                if (!pl) continue;
                geom::Poly w = geom::apply(small.pts, *pl);
                if (geom::inside(w, s.items[0].world)) continue;
                s.items.push_back(make_item(small, *pl));
                break;
            }
        }
    }
    return s;
}

inline SceneSpec build_scene(int task, int label, int canvas, Rng& rng) {
    Ctx c{canvas, canvas / 64.0, rng, shape_complexity(canvas)};
    switch (task) {
        case 1: return build_t1(c, label);
        case 2: return build_t2(c, label);
        case 5: return build_t5(c, label);
        case 7: return build_t7(c, label);
        case 8: return build_t8(c, label);
        case 10: return build_t10(c, label);
        case 11: return build_t11(c, label);
        case 15: return build_t15(c, label);
        case 19: {
            const double scale = c.rng.uniform(6.5, 8.0) * c.f;
            const double k = c.rng.uniform(1.4, 1.9);
            return transform_pair(c, label, scale, 0.0, scale * k, false);
        }
        case 20: {
            const double scale = c.rng.uniform(8.0, 11.0) * c.f;
            return transform_pair(c, label, scale, 0.0, scale, true);
        }
        case 21: {
            const double scale = c.rng.uniform(7.0, 9.0) * c.f;
            const double theta = c.rng.uniform(M_PI / 6.0, 2.0 * M_PI - M_PI / 6.0);
            const double k = c.rng.uniform(0.75, 1.3);
            return transform_pair(c, label, scale, theta, scale * k, false);
        }
        case 22: return build_t22(c, label);
        case 23: return build_t23(c, label);
        case 25: {
            const double scale = c.rng.uniform(8.0, 11.0) * c.f;
            const double theta = c.rng.uniform(M_PI / 6.0, 2.0 * M_PI - M_PI / 6.0);
            return transform_pair(c, label, scale, theta, scale, false);
        }
        default:
            throw ConfigError("unsupported task id " + std::to_string(task));
    }
}

}  // namespace detail

inline std::vector<std::uint8_t> render(const SceneSpec& s) {
    raster::Canvas cv(s.canvas, s.canvas);
    for (const SceneItem& it : s.items) cv.draw_closed(it.world);
    return cv.px;
}

struct SvrtSample {
    std::vector<std::uint8_t> image;
    std::uint8_t label = 0;
    int task = 0;
    std::int64_t index = 0;
    SceneSpec scene;
};

namespace detail {

inline std::uint64_t sample_stream(int task, std::int64_t index, int attempt) {
    return mix64(mix64(static_cast<std::uint64_t>(task)) ^
                 mix64(static_cast<std::uint64_t>(index) * 0x9e3779b97f4a7c15ULL) ^
                 static_cast<std::uint64_t>(attempt));
}

}  // namespace detail

// Pure function of (task, seed, index); labels alternate so any prefix is
// near-balanced.  Every sample is oracle-verified before emission.
inline SvrtSample gen_sample(int task, std::uint64_t seed, std::int64_t index, int canvas = 64) {
    if (!task_supported(task)) throw ConfigError("unsupported task id " + std::to_string(task));
    const int label = index % 2 == 0 ? 1 : 0;
    for (int attempt = 0; attempt < 1000; ++attempt) {
        Rng rng(seed, detail::sample_stream(task, index, attempt));
        SceneSpec scene;
        try {
            scene = detail::build_scene(task, label, canvas, rng);
        } catch (const GenerationError&) {
            continue;
        }
        if (rule_holds(task, scene) != (label == 1)) continue;
        SvrtSample s;
        s.image = render(scene);
        s.label = static_cast<std::uint8_t>(label);
        s.task = task;
        s.index = index;
        s.scene = std::move(scene);
        return s;
    }
    throw ConfigError("task " + std::to_string(task) + ": 1000 consecutive oracle vetoes at index " +
                      std::to_string(index));
}

inline Dataset gen_task(int task, std::uint64_t seed, int n, int canvas = 64) {
    if (n % 2 != 0) throw ConfigError("gen_task: sample count must be even");
    Dataset ds;
    ds.h = canvas;
    ds.w = canvas;
    ds.k = 1;
    for (int i = 0; i < n; ++i) {
        SvrtSample s = gen_sample(task, seed, i, canvas);
        ds.append(s.label, s.image);
    }
    return ds;
}

// Re-derives every sample from its (task, seed, index) and checks both the
// stored bytes and the oracle; used by the verify command.
struct VerifyReport {
    std::int64_t checked = 0;
    std::int64_t byte_mismatches = 0;
    std::int64_t label_mismatches = 0;
    bool ok() const { return byte_mismatches == 0 && label_mismatches == 0; }
};

inline VerifyReport verify_dataset(const Dataset& ds, int task, std::uint64_t seed, int canvas) {
    VerifyReport r;
    for (std::int64_t i = 0; i < ds.count(); ++i) {
        SvrtSample s = gen_sample(task, seed, i, canvas);
        ++r.checked;
        const auto img = ds.image(i);
        if (!std::equal(img.begin(), img.end(), s.image.begin())) ++r.byte_mismatches;
        if (ds.labels[static_cast<std::size_t>(i)] != s.label ||
            rule_holds(task, s.scene) != (s.label == 1))
            ++r.label_mismatches;
    }
    return r;
}

}  // namespace mareo::svrt
