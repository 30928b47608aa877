#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <compare>

namespace avd {

struct Point {
    double x = 0.0;
    double y = 0.0;
};

// Axis-aligned rectangle in continuous pixel-edge coordinates: pixel (i, j)
// covers [i, i+1) x [j, j+1).
struct Rect {
    double x0 = 0.0;
    double y0 = 0.0;
    double x1 = 0.0;
    double y1 = 0.0;

    double width() const { return x1 - x0; }
    double height() const { return y1 - y0; }
    double area() const { return empty() ? 0.0 : width() * height(); }
    bool empty() const { return !(x1 > x0 && y1 > y0); }

    bool contains(const Rect& other, double slack = 0.0) const
    {
        return other.x0 >= x0 - slack && other.y0 >= y0 - slack && other.x1 <= x1 + slack &&
               other.y1 <= y1 + slack;
    }

    std::array<Point, 4> corners() const { return {{{x0, y0}, {x1, y0}, {x1, y1}, {x0, y1}}}; }

    auto operator<=>(const Rect&) const = default;
};

inline Rect intersect(const Rect& a, const Rect& b)
{
    return {std::max(a.x0, b.x0), std::max(a.y0, b.y0), std::min(a.x1, b.x1), std::min(a.y1, b.y1)};
}

template <typename Points>
Rect bounding_rect(const Points& points)
{
    Rect r{points[0].x, points[0].y, points[0].x, points[0].y};
    for (const Point& p : points) {
        r.x0 = std::min(r.x0, p.x);
        r.y0 = std::min(r.y0, p.y);
        r.x1 = std::max(r.x1, p.x);
        r.y1 = std::max(r.y1, p.y);
    }
    return r;
}

/// Intersection over union of two rectangles; 0 when disjoint or when both are empty.
inline double iou(const Rect& a, const Rect& b)
{
    const double inter = intersect(a, b).area();
    if (inter <= 0.0)
        return 0.0;
    const double uni = a.area() + b.area() - inter;
    return uni > 0.0 ? inter / uni : 0.0;
}

} // namespace avd
