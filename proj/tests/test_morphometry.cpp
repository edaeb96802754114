#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <vector>

#include "jointdiff/morphometry.hpp"
#include "jointdiff/rng.hpp"

using namespace jointdiff;

namespace {

Tensor blank(int h, int w) { return Tensor::plane(h, w, -1.0); }

Tensor filled_rect(int H, int W, int y0, int x0, int h, int w) {
    Tensor m = blank(H, W);
    for (int y = y0; y < y0 + h; ++y)
        for (int x = x0; x < x0 + w; ++x) m.at(0, y, x) = 1.0;
    return m;
}

Tensor disk(double r) {
    const int n = int(2 * r + 9);
    const double c = n / 2.0;
    Tensor m = blank(n, n);
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x)
            if ((x - c) * (x - c) + (y - c) * (y - c) <= r * r) m.at(0, y, x) = 1.0;
    return m;
}

// independent union-find over all 8-adjacent foreground pixel pairs
struct UnionFind {
    std::vector<int> parent;
    explicit UnionFind(int n) : parent(static_cast<std::size_t>(n)) {
        for (int i = 0; i < n; ++i) parent[std::size_t(i)] = i;
    }
    int find(int a) {
        while (parent[std::size_t(a)] != a) {
            parent[std::size_t(a)] = parent[std::size_t(parent[std::size_t(a)])];
            a = parent[std::size_t(a)];
        }
        return a;
    }
    void unite(int a, int b) { parent[std::size_t(find(a))] = find(b); }
};

std::vector<std::vector<std::pair<int, int>>> oracle_components(const Tensor& mask, int min_area) {
    const int h = mask.h(), w = mask.w();
    UnionFind uf(h * w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            if (mask.at(0, y, x) <= 0.0) continue;
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    const int ny = y + dy, nx = x + dx;
                    if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
                    if (mask.at(0, ny, nx) > 0.0) uf.unite(y * w + x, ny * w + nx);
                }
        }
    std::map<int, std::vector<std::pair<int, int>>> by_root;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            if (mask.at(0, y, x) > 0.0) by_root[uf.find(y * w + x)].emplace_back(y, x);
    std::vector<std::vector<std::pair<int, int>>> out;
    for (auto& [root, pixels] : by_root) {
        std::sort(pixels.begin(), pixels.end());
        if (int(pixels.size()) >= min_area) out.push_back(pixels);
    }
    std::sort(out.begin(), out.end(),
              [](const auto& a, const auto& b) { return a.front() < b.front(); });
    return out;
}

} // namespace

TEST_CASE("connected components: empty mask and diagonal pair") {
    CHECK(connected_components(blank(8, 8)).empty());

    Tensor diag = blank(8, 8);
    diag.at(0, 2, 2) = 1.0;
    diag.at(0, 3, 3) = 1.0;
    CHECK(connected_components(diag, 8, 5).empty());     // below min_area
    CHECK(connected_components(diag, 8, 1).size() == 1); // one 8-connected blob
    CHECK(connected_components(diag, 4, 1).size() == 2); // two 4-connected blobs
}

TEST_CASE("connected components match the union-find oracle on random masks") {
    Rng rng(31);
    for (int rep = 0; rep < 100; ++rep) {
        const int h = 12 + int(rng.uniform_int(0, 8));
        const int w = 12 + int(rng.uniform_int(0, 8));
        Tensor mask = blank(h, w);
        const double density = rng.uniform(0.1, 0.6);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                if (rng.uniform01() < density) mask.at(0, y, x) = 1.0;

        const int min_area = int(rng.uniform_int(1, 6));
        auto got = connected_components(mask, 8, min_area);
        auto want = oracle_components(mask, min_area);
        REQUIRE(got.size() == want.size());
        for (std::size_t i = 0; i < got.size(); ++i)
            CHECK(got[i].pixels == want[i]);
    }
}

TEST_CASE("component ordering is scanline order of the first pixel") {
    Tensor m = blank(16, 16);
    // second blob starts later in scanline order despite smaller x
    for (int x = 10; x < 14; ++x)
        for (int y = 1; y < 4; ++y) m.at(0, y, x) = 1.0;
    for (int x = 1; x < 5; ++x)
        for (int y = 5; y < 9; ++y) m.at(0, y, x) = 1.0;
    auto comps = connected_components(m, 8, 5);
    REQUIRE(comps.size() == 2);
    CHECK(comps[0].pixels.front() == std::pair<int, int>{1, 10});
    CHECK(comps[1].pixels.front() == std::pair<int, int>{5, 1});
}

TEST_CASE("shape features of a 10x10 filled square") {
    auto comps = connected_components(filled_rect(20, 20, 5, 5, 10, 10));
    REQUIRE(comps.size() == 1);
    auto f = shape_features(comps[0]);
    CHECK(f.area == 100.0);
    CHECK(f.extent == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(f.solidity == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(f.eccentricity == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(f.equivalent_diameter == doctest::Approx(11.2838).epsilon(1e-5));
    CHECK(std::fabs(f.equivalent_diameter - std::sqrt(4.0 * 100.0 / M_PI)) < 1e-6);
    CHECK(f.perimeter == doctest::Approx(36.0).epsilon(1e-12));
    CHECK(!f.degenerate);
}

TEST_CASE("axis-aligned rectangles match the discrete moment closed form") {
    for (auto [a, b] : std::vector<std::pair<int, int>>{{4, 9}, {3, 12}, {7, 7}, {2, 30}}) {
        auto comps = connected_components(filled_rect(40, 40, 3, 3, b, a), 8, 1);
        REQUIRE(comps.size() == 1);
        auto f = shape_features(comps[0]);
        CHECK(f.area == double(a) * b);
        CHECK(f.extent == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(f.solidity == doctest::Approx(1.0).epsilon(1e-12));

        // population variance of pixel-center coordinates
        const double vx = (double(a) * a - 1.0) / 12.0;
        const double vy = (double(b) * b - 1.0) / 12.0;
        const double l1 = std::max(vx, vy), l2 = std::min(vx, vy);
        CHECK(f.major_axis == doctest::Approx(4.0 * std::sqrt(l1)).epsilon(1e-9));
        CHECK(f.minor_axis == doctest::Approx(4.0 * std::sqrt(l2)).epsilon(1e-9));
        const double ecc = std::sqrt(1.0 - l2 / l1);
        CHECK(std::fabs(f.eccentricity - ecc) < 1e-6);
    }
}

TEST_CASE("rasterized disks: circularity near 1, equivalent diameter near 2r") {
    for (double r : {10.0, 20.0, 30.0}) {
        auto comps = connected_components(disk(r));
        REQUIRE(comps.size() == 1);
        auto f = shape_features(comps[0]);
        CHECK(f.circularity > 0.9);
        CHECK(f.circularity < 1.1);
        CHECK(std::fabs(f.equivalent_diameter - 2.0 * r) / (2.0 * r) < 0.02);
        CHECK(f.eccentricity < 0.1);
        CHECK(f.solidity > 0.9);
        CHECK(f.solidity <= 1.0 + 1e-12);
    }
}

TEST_CASE("degenerate single-pixel instance is floored and flagged") {
    LesionInstance inst;
    inst.pixels = {{3, 3}};
    inst.min_y = inst.max_y = 3;
    inst.min_x = inst.max_x = 3;
    auto f = shape_features(inst);
    CHECK(f.degenerate);
    CHECK(f.minor_axis == doctest::Approx(kAxisFloorPx).epsilon(1e-12));
    CHECK(f.area == 1.0);
    CHECK(f.eccentricity >= 0.0);
    CHECK(f.eccentricity < 1.0);
}

TEST_CASE("solidity is at most 1 and hull fills concavities") {
    // L-shape: hull area strictly above pixel area
    Tensor m = blank(20, 20);
    for (int y = 2; y < 12; ++y)
        for (int x = 2; x < 6; ++x) m.at(0, y, x) = 1.0;
    for (int y = 8; y < 12; ++y)
        for (int x = 6; x < 14; ++x) m.at(0, y, x) = 1.0;
    auto comps = connected_components(m);
    REQUIRE(comps.size() == 1);
    auto f = shape_features(comps[0]);
    CHECK(f.solidity < 1.0);
    CHECK(f.solidity > 0.4);
    CHECK(f.extent < 1.0);
}

TEST_CASE("random blobs keep descriptor invariants") {
    Rng rng(55);
    for (int rep = 0; rep < 60; ++rep) {
        Tensor m = blank(24, 24);
        const double cy = rng.uniform(8.0, 16.0), cx = rng.uniform(8.0, 16.0);
        const double ry = rng.uniform(2.0, 6.0), rx = rng.uniform(2.0, 6.0);
        for (int y = 0; y < 24; ++y)
            for (int x = 0; x < 24; ++x) {
                const double dy = (y - cy) / ry, dx = (x - cx) / rx;
                if (dy * dy + dx * dx <= 1.0) m.at(0, y, x) = 1.0;
            }
        for (const auto& comp : connected_components(m)) {
            auto f = shape_features(comp);
            CHECK(f.area > 0.0);
            CHECK(f.solidity <= 1.0 + 1e-12);
            CHECK(f.extent <= 1.0 + 1e-12);
            CHECK(f.minor_axis <= f.major_axis + 1e-12);
            CHECK(f.eccentricity >= 0.0);
            CHECK(f.eccentricity < 1.0);
            CHECK(f.equivalent_diameter ==
                  doctest::Approx(std::sqrt(4.0 * f.area / M_PI)).epsilon(1e-9));
        }
    }
}
