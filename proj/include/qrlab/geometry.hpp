#pragma once

// Axis-aligned boxes in normalized image coordinates. Canonical storage is
// (center_x, center_y, width, height), all in [0, 1]. Degenerate boxes are
// tolerated by guarding denominators with a small epsilon.

#include <algorithm>
#include <cmath>

namespace qrlab {

inline constexpr double kGeomEps = 1e-12;

struct BBox {
    double cx = 0.0, cy = 0.0, w = 0.0, h = 0.0;

    double x0() const { return cx - 0.5 * w; }
    double y0() const { return cy - 0.5 * h; }
    double x1() const { return cx + 0.5 * w; }
    double y1() const { return cy + 0.5 * h; }
    double area() const { return w * h; }

    static BBox from_corners(double x0, double y0, double x1, double y1) {
        return BBox{0.5 * (x0 + x1), 0.5 * (y0 + y1), x1 - x0, y1 - y0};
    }
};

inline double intersection_area(const BBox& a, const BBox& b) {
    const double iw = std::min(a.x1(), b.x1()) - std::max(a.x0(), b.x0());
    const double ih = std::min(a.y1(), b.y1()) - std::max(a.y0(), b.y0());
    if (iw <= 0.0 || ih <= 0.0) return 0.0;
    return iw * ih;
}

/// Intersection over union in [0, 1].
inline double iou(const BBox& a, const BBox& b) {
    const double inter = intersection_area(a, b);
    const double uni = a.area() + b.area() - inter;
    return inter / (uni + kGeomEps);
}

/// Generalized IoU in [-1, 1]: iou minus the enclosing-hull penalty.
inline double giou(const BBox& a, const BBox& b) {
    const double inter = intersection_area(a, b);
    const double uni = a.area() + b.area() - inter;
    const double hull_w = std::max(a.x1(), b.x1()) - std::min(a.x0(), b.x0());
    const double hull_h = std::max(a.y1(), b.y1()) - std::min(a.y0(), b.y0());
    const double hull = hull_w * hull_h;
    return inter / (uni + kGeomEps) - (hull - uni) / (hull + kGeomEps);
}

/// L1 distance between the two four-vectors (cx, cy, w, h).
inline double box_l1(const BBox& a, const BBox& b) {
    return std::fabs(a.cx - b.cx) + std::fabs(a.cy - b.cy) + std::fabs(a.w - b.w) +
           std::fabs(a.h - b.h);
}

} // namespace qrlab
