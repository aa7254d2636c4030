#pragma once

#include <algorithm>
#include <span>
#include <vector>

namespace countlab {

/// Axis-aligned box in normalized canvas coordinates, (x1, y1) top-left.
struct Box {
    double x1 = 0.0;
    double y1 = 0.0;
    double x2 = 0.0;
    double y2 = 0.0;

    double width() const noexcept { return std::max(0.0, x2 - x1); }
    double height() const noexcept { return std::max(0.0, y2 - y1); }
    double area() const noexcept { return width() * height(); }
    double center_x() const noexcept { return 0.5 * (x1 + x2); }
    double center_y() const noexcept { return 0.5 * (y1 + y2); }

    bool valid() const noexcept { return x1 < x2 && y1 < y2; }
    bool inside_canvas() const noexcept { return x1 >= 0.0 && y1 >= 0.0 && x2 <= 1.0 && y2 <= 1.0; }

    friend bool operator==(const Box&, const Box&) = default;
};

inline Box intersect(const Box& a, const Box& b) noexcept {
    return Box{std::max(a.x1, b.x1), std::max(a.y1, b.y1), std::min(a.x2, b.x2), std::min(a.y2, b.y2)};
}

inline double intersection_area(const Box& a, const Box& b) noexcept { return intersect(a, b).area(); }

inline double iou(const Box& a, const Box& b) noexcept {
    const double inter = intersection_area(a, b);
    const double uni = a.area() + b.area() - inter;
    return uni > 0.0 ? inter / uni : 0.0;
}

/// Exact area of box ∩ (∪ gt) by coordinate compression: the GT boxes are
/// clipped to `box`, their edges cut it into a grid of cells, and each cell
/// is either fully covered or fully uncovered.
inline double rect_union_intersection(const Box& box, std::span<const Box> gt) {
    if (!(box.area() > 0.0)) return 0.0;
    std::vector<Box> clipped;
    clipped.reserve(gt.size());
    for (const Box& g : gt) {
        const Box c = intersect(box, g);
        if (c.area() > 0.0) clipped.push_back(c);
    }
    if (clipped.empty()) return 0.0;

    std::vector<double> xs{box.x1, box.x2};
    std::vector<double> ys{box.y1, box.y2};
    for (const Box& c : clipped) {
        xs.insert(xs.end(), {c.x1, c.x2});
        ys.insert(ys.end(), {c.y1, c.y2});
    }
    std::sort(xs.begin(), xs.end());
    xs.erase(std::unique(xs.begin(), xs.end()), xs.end());
    std::sort(ys.begin(), ys.end());
    ys.erase(std::unique(ys.begin(), ys.end()), ys.end());

    double covered = 0.0;
    for (std::size_t i = 0; i + 1 < xs.size(); ++i) {
        const double cx = 0.5 * (xs[i] + xs[i + 1]);
        for (std::size_t j = 0; j + 1 < ys.size(); ++j) {
            const double cy = 0.5 * (ys[j] + ys[j + 1]);
            const bool hit = std::any_of(clipped.begin(), clipped.end(), [&](const Box& c) {
                return c.x1 <= cx && cx <= c.x2 && c.y1 <= cy && cy <= c.y2;
            });
            if (hit) covered += (xs[i + 1] - xs[i]) * (ys[j + 1] - ys[j]);
        }
    }
    return covered;
}

/// Fraction of `box` lying inside the union of `gt`; 0 for degenerate boxes.
inline double box_precision(const Box& box, std::span<const Box> gt) {
    const double area = box.area();
    if (!(area > 0.0)) return 0.0;
    return std::clamp(rect_union_intersection(box, gt) / area, 0.0, 1.0);
}

}  // namespace countlab
