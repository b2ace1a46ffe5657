#pragma once

// Binary rasterization: white background, 1-px black strokes, no
// anti-aliasing.  Vertices are rounded half-up to integers and edges drawn
// with Bresenham, so output is bit-exact across platforms.

#include "mareo/geometry.hpp"

#include <cstdint>
#include <vector>

namespace mareo::raster {

inline int round_half_up(double v) { return static_cast<int>(std::floor(v + 0.5)); }

struct Canvas {
    int h = 0, w = 0;
    std::vector<std::uint8_t> px;

    Canvas(int height, int width) : h(height), w(width), px(static_cast<std::size_t>(height) * width, 255) {}

    void set(int x, int y) {
        if (x >= 0 && x < w && y >= 0 && y < h) px[static_cast<std::size_t>(y) * w + x] = 0;
    }

    void line(int x0, int y0, int x1, int y1) {
        const int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
        const int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
        int err = dx + dy;
        for (;;) {
            set(x0, y0);
            if (x0 == x1 && y0 == y1) break;
            const int e2 = 2 * err;
            if (e2 >= dy) {
                err += dy;
                x0 += sx;
            }
            if (e2 <= dx) {
                err += dx;
                y0 += sy;
            }
        }
    }

    void draw_closed(const geom::Poly& pts) {
        const int n = static_cast<int>(pts.size());
        for (int i = 0; i < n; ++i) {
            const geom::Point& a = pts[static_cast<std::size_t>(i)];
            const geom::Point& b = pts[static_cast<std::size_t>((i + 1) % n)];
            line(round_half_up(a.x), round_half_up(a.y), round_half_up(b.x), round_half_up(b.y));
        }
    }
};

}  // namespace mareo::raster
