#ifndef JOINTDIFF_MORPHOMETRY_HPP
#define JOINTDIFF_MORPHOMETRY_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "jointdiff/error.hpp"
#include "jointdiff/tensor.hpp"

namespace jointdiff {

// One connected +1 region of a mask.
struct LesionInstance {
    std::vector<std::pair<int, int>> pixels; // (y, x), scanline order
    int min_y = 0, max_y = 0, min_x = 0, max_x = 0;

    int area() const { return int(pixels.size()); }
    int bbox_h() const { return max_y - min_y + 1; }
    int bbox_w() const { return max_x - min_x + 1; }
};

// Maximal connected foreground regions (mask value > 0), ordered by the
// scanline position of their first pixel. Regions below min_area are dropped.
inline std::vector<LesionInstance> connected_components(const Tensor& mask,
                                                        int connectivity = 8,
                                                        int min_area = 5) {
    if (connectivity != 4 && connectivity != 8)
        throw config_error("connected_components: connectivity must be 4 or 8");
    const int h = mask.h(), w = mask.w();
    const double* m = mask.data();
    std::vector<int> label(std::size_t(h) * w, -1);

    static const std::array<std::pair<int, int>, 8> offs8{{{-1, -1}, {-1, 0}, {-1, 1}, {0, -1},
                                                           {0, 1},  {1, -1}, {1, 0},  {1, 1}}};
    static const std::array<std::pair<int, int>, 4> offs4{{{-1, 0}, {0, -1}, {0, 1}, {1, 0}}};

    std::vector<LesionInstance> out;
    std::vector<std::pair<int, int>> stack;
    int next_label = 0;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const std::size_t idx = std::size_t(y) * w + x;
            if (m[idx] <= 0.0 || label[idx] != -1) continue;
            LesionInstance inst;
            inst.min_y = inst.max_y = y;
            inst.min_x = inst.max_x = x;
            label[idx] = next_label;
            stack.clear();
            stack.emplace_back(y, x);
            while (!stack.empty()) {
                auto [cy, cx] = stack.back();
                stack.pop_back();
                inst.pixels.emplace_back(cy, cx);
                inst.min_y = std::min(inst.min_y, cy);
                inst.max_y = std::max(inst.max_y, cy);
                inst.min_x = std::min(inst.min_x, cx);
                inst.max_x = std::max(inst.max_x, cx);
                auto visit = [&](int ny, int nx) {
                    if (ny < 0 || ny >= h || nx < 0 || nx >= w) return;
                    const std::size_t nidx = std::size_t(ny) * w + nx;
                    if (m[nidx] > 0.0 && label[nidx] == -1) {
                        label[nidx] = next_label;
                        stack.emplace_back(ny, nx);
                    }
                };
                if (connectivity == 8)
                    for (auto [dy, dx] : offs8) visit(cy + dy, cx + dx);
                else
                    for (auto [dy, dx] : offs4) visit(cy + dy, cx + dx);
            }
            std::sort(inst.pixels.begin(), inst.pixels.end());
            if (int(inst.pixels.size()) >= min_area) out.push_back(std::move(inst));
            ++next_label;
        }
    }
    return out;
}

namespace detail {

// Moore-neighbor boundary trace; returns the closed tour of boundary pixels
// (start repeated at the end when the tour closes). Single pixels yield a
// one-entry tour.
inline std::vector<std::pair<int, int>> trace_boundary(const LesionInstance& inst) {
    // membership grid local to the bbox
    const int bh = inst.bbox_h(), bw = inst.bbox_w();
    std::vector<char> in(std::size_t(bh) * bw, 0);
    for (auto [y, x] : inst.pixels)
        in[std::size_t(y - inst.min_y) * bw + (x - inst.min_x)] = 1;
    auto fg = [&](int y, int x) {
        y -= inst.min_y;
        x -= inst.min_x;
        return y >= 0 && y < bh && x >= 0 && x < bw && in[std::size_t(y) * bw + x] != 0;
    };

    // clockwise ring starting at W, with y growing downward
    static const std::array<std::pair<int, int>, 8> ring{{{0, -1}, {-1, -1}, {-1, 0}, {-1, 1},
                                                          {0, 1},  {1, 1},  {1, 0},  {1, -1}}};
    auto ring_index = [&](std::pair<int, int> d) {
        for (int i = 0; i < 8; ++i)
            if (ring[std::size_t(i)] == d) return i;
        throw numeric_error("trace_boundary: invalid direction");
    };

    const auto start = inst.pixels.front(); // topmost-leftmost, W neighbor is background
    std::vector<std::pair<int, int>> tour{start};

    auto step = [&](std::pair<int, int> p, int back) -> std::pair<std::pair<int, int>, int> {
        for (int k = 1; k <= 8; ++k) {
            const int dir = (back + k) % 8;
            const auto [dy, dx] = ring[std::size_t(dir)];
            if (fg(p.first + dy, p.second + dx)) {
                // new backtrack: the direction from the new pixel to the last
                // background pixel scanned before it
                const int prev = (back + k - 1) % 8;
                const auto [py, px] = ring[std::size_t(prev)];
                const std::pair<int, int> np{p.first + dy, p.second + dx};
                const std::pair<int, int> bg{p.first + py, p.second + px};
                const int nb = ring_index({bg.first - np.first, bg.second - np.second});
                return {np, nb};
            }
        }
        return {p, -1}; // isolated pixel
    };

    std::pair<int, int> p = start;
    int back = 0; // W: background by choice of start
    std::pair<int, int> first{};
    int first_back = -1;
    const std::size_t guard = 8 * inst.pixels.size() + 16;
    for (std::size_t iter = 0; iter < guard; ++iter) {
        auto [np, nb] = step(p, back);
        if (nb < 0) return tour; // single pixel, no neighbors
        if (iter == 0) {
            first = np;
            first_back = nb;
        } else if (p == start && np == first && nb == first_back) {
            break; // about to replay the opening move: tour is closed
        }
        tour.push_back(np);
        p = np;
        back = nb;
    }
    return tour;
}

} // namespace detail

// perimeter of the 8-connected boundary tour: unit steps for axis moves,
// sqrt(2) for diagonal moves
inline double boundary_perimeter(const LesionInstance& inst) {
    const auto tour = detail::trace_boundary(inst);
    if (tour.size() < 2) return 0.0;
    double perim = 0.0;
    for (std::size_t i = 1; i < tour.size(); ++i) {
        const int dy = std::abs(tour[i].first - tour[i - 1].first);
        const int dx = std::abs(tour[i].second - tour[i - 1].second);
        perim += (dy + dx == 2) ? std::sqrt(2.0) : 1.0;
    }
    return perim;
}

namespace detail {

// convex hull area (shoelace) over the four corner points of boundary pixels
inline double convex_hull_area(const LesionInstance& inst) {
    const int bh = inst.bbox_h(), bw = inst.bbox_w();
    std::vector<char> in(std::size_t(bh) * bw, 0);
    for (auto [y, x] : inst.pixels)
        in[std::size_t(y - inst.min_y) * bw + (x - inst.min_x)] = 1;
    auto fg = [&](int y, int x) {
        return y >= 0 && y < bh && x >= 0 && x < bw && in[std::size_t(y) * bw + x] != 0;
    };

    std::vector<std::pair<double, double>> pts; // (x, y) corner points
    for (auto [gy, gx] : inst.pixels) {
        const int y = gy - inst.min_y, x = gx - inst.min_x;
        const bool boundary = !fg(y - 1, x) || !fg(y + 1, x) || !fg(y, x - 1) || !fg(y, x + 1);
        if (!boundary) continue;
        for (double dy : {-0.5, 0.5})
            for (double dx : {-0.5, 0.5})
                pts.emplace_back(gx + dx, gy + dy);
    }
    std::sort(pts.begin(), pts.end());
    pts.erase(std::unique(pts.begin(), pts.end()), pts.end());
    if (pts.size() < 3) return 0.0;

    auto cross = [](const std::pair<double, double>& o, const std::pair<double, double>& a,
                    const std::pair<double, double>& b) {
        return (a.first - o.first) * (b.second - o.second) -
               (a.second - o.second) * (b.first - o.first);
    };
    std::vector<std::pair<double, double>> hull(2 * pts.size());
    std::size_t k = 0;
    for (const auto& p : pts) {
        while (k >= 2 && cross(hull[k - 2], hull[k - 1], p) <= 0) --k;
        hull[k++] = p;
    }
    const std::size_t lower = k + 1;
    for (auto it = pts.rbegin(); it != pts.rend(); ++it) {
        while (k >= lower && cross(hull[k - 2], hull[k - 1], *it) <= 0) --k;
        hull[k++] = *it;
    }
    hull.resize(k - 1);

    double area2 = 0.0;
    for (std::size_t i = 0; i < hull.size(); ++i) {
        const auto& a = hull[i];
        const auto& b = hull[(i + 1) % hull.size()];
        area2 += a.first * b.second - b.first * a.second;
    }
    return std::fabs(area2) / 2.0;
}

} // namespace detail

// The nine lesion-shape descriptors of one instance.
struct ShapeFeatures {
    double area = 0.0;
    double perimeter = 0.0;
    double circularity = 0.0;
    double solidity = 0.0;
    double extent = 0.0;
    double eccentricity = 0.0;
    double major_axis = 0.0;
    double minor_axis = 0.0;
    double equivalent_diameter = 0.0;
    bool degenerate = false; // axis floor applied (single-pixel/collinear)

    static constexpr int kCount = 9;

    std::array<double, kCount> to_array() const {
        return {area,         perimeter, circularity, solidity,  extent,
                eccentricity, major_axis, minor_axis, equivalent_diameter};
    }

    static const std::array<std::string, kCount>& names() {
        static const std::array<std::string, kCount> n{
            "area",         "perimeter",  "circularity",
            "solidity",     "extent",     "eccentricity",
            "major_axis",   "minor_axis", "equivalent_diameter"};
        return n;
    }
};

// floor applied to degenerate minor/major axes, in pixels
inline constexpr double kAxisFloorPx = 1e-3;

inline ShapeFeatures shape_features(const LesionInstance& inst) {
    if (inst.pixels.empty()) throw config_error("shape_features: empty instance");
    ShapeFeatures f;
    const double area = double(inst.pixels.size());
    f.area = area;
    f.perimeter = boundary_perimeter(inst);
    f.extent = area / (double(inst.bbox_h()) * double(inst.bbox_w()));
    f.equivalent_diameter = std::sqrt(4.0 * area / M_PI);

    const double hull = detail::convex_hull_area(inst);
    f.solidity = hull > 0.0 ? area / hull : 1.0;

    // central second moments of pixel centers
    double my = 0.0, mx = 0.0;
    for (auto [y, x] : inst.pixels) {
        my += y;
        mx += x;
    }
    my /= area;
    mx /= area;
    double cyy = 0.0, cxx = 0.0, cxy = 0.0;
    for (auto [y, x] : inst.pixels) {
        const double dy = y - my, dx = x - mx;
        cyy += dy * dy;
        cxx += dx * dx;
        cxy += dx * dy;
    }
    cyy /= area;
    cxx /= area;
    cxy /= area;

    const double tr = cxx + cyy;
    const double det = std::sqrt(std::max(0.0, (cxx - cyy) * (cxx - cyy) + 4.0 * cxy * cxy));
    double l1 = (tr + det) / 2.0;
    double l2 = (tr - det) / 2.0;
    if (l2 < 0.0) l2 = 0.0;

    const double floor_lambda = (kAxisFloorPx / 4.0) * (kAxisFloorPx / 4.0);
    if (l1 < floor_lambda) {
        l1 = floor_lambda;
        f.degenerate = true;
    }
    if (l2 < floor_lambda) {
        l2 = floor_lambda;
        f.degenerate = true;
    }
    f.major_axis = 4.0 * std::sqrt(l1);
    f.minor_axis = 4.0 * std::sqrt(l2);
    f.eccentricity = std::sqrt(std::max(0.0, 1.0 - l2 / l1));

    if (f.perimeter <= 0.0) {
        f.perimeter = 1.0; // isolated pixel: tour has no steps
        f.degenerate = true;
    }
    f.circularity = 4.0 * M_PI * area / (f.perimeter * f.perimeter);
    return f;
}

} // namespace jointdiff

#endif // JOINTDIFF_MORPHOMETRY_HPP
