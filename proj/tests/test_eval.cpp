#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "cloudflow/derivatives.hpp"
#include "cloudflow/error.hpp"
#include "cloudflow/eval.hpp"
#include "support.hpp"

using namespace cloudflow;

namespace {

PointCloud oracle(double radius, std::size_t n, std::uint64_t seed) {
    auto c = sample_cloud(GeometryMeta::circle(0, 0, radius), n, Grading{}, seed);
    apply_potential_flow(c, FreeStream{});
    return c;
}

PointCloud from_points(const std::vector<std::array<double, 2>>& pts) {
    PointCloud c;
    for (auto [x, y] : pts) {
        c.coords.push_back(x);
        c.coords.push_back(y);
    }
    return c;
}

struct Quadratic {
    double c0, a, b, cxx, cxy, cyy;
    double operator()(double x, double y) const { return c0 + a * x + b * y + cxx * x * x + cxy * x * y + cyy * y * y; }
    std::array<double, 5> derivs(double x, double y) const {
        return {a + 2 * cxx * x + cxy * y, b + cxy * x + 2 * cyy * y, 2 * cxx, cxy, 2 * cyy};
    }
};

double worst_error(const PointCloud& cloud, const StencilSet& st, const Quadratic& q) {
    std::vector<double> f(cloud.size());
    for (std::size_t i = 0; i < cloud.size(); ++i) f[i] = q(cloud.x(i), cloud.y(i));
    const auto d = st.derivatives(f);
    double worst = 0;
    for (std::size_t s = 0; s < st.stencils.size(); ++s) {
        const auto i = st.stencils[s].center;
        const auto ex = q.derivs(cloud.x(i), cloud.y(i));
        for (int k = 0; k < 5; ++k) worst = std::max(worst, std::abs(d[s][k] - ex[k]));
    }
    return worst;
}

}  // namespace

TEST_CASE("pointwise errors: identity, componentwise example and norm variants") {
    auto truth = testing::random_cloud(4, 1);
    truth.fields = testing::uniform(12, 2, -1, 1);
    auto r = pointwise_errors(truth, truth.fields);
    for (const auto& f : r.fields) {
        CHECK(f.euclidean == 0.0);
        CHECK(f.rms == 0.0);
        CHECK(f.relative == 0.0);
    }

    PointCloud one = testing::random_cloud(1, 3);
    one.fields = {1.0, 1.0, 2.0};
    std::vector<double> pred{4.0, 5.0, 2.0};
    auto e = pointwise_errors(one, pred);
    CHECK(e.fields[0].euclidean == 3.0);
    CHECK(e.fields[1].euclidean == 4.0);
    CHECK(e.fields[2].euclidean == 0.0);
    CHECK(e.abs_error == std::vector<double>{3.0, 4.0, 0.0});

    PointCloud zero = testing::random_cloud(3, 4);
    zero.fields.assign(9, 0.0);
    auto z = pointwise_errors(zero, std::vector<double>(9, 0.5));
    CHECK_FALSE(z.fields[0].relative_defined);
    CHECK_FALSE(std::isnan(z.fields[0].relative));
    CHECK(z.fields[0].rms == doctest::Approx(0.5).epsilon(1e-15));

    CHECK_THROWS_AS(pointwise_errors(zero, std::vector<double>(8, 0.0)), DimensionError);
}

TEST_CASE("pointwise errors match a scalar-loop recomputation") {
    const std::size_t n = 200;
    auto truth = testing::random_cloud(n, 5);
    truth.fields = testing::uniform(3 * n, 6, -3, 3);
    const auto pred = testing::uniform(3 * n, 7, -3, 3);
    auto r = pointwise_errors(truth, pred);
    for (int c = 0; c < 3; ++c) {
        double se = 0, st = 0;
        for (std::size_t i = 0; i < n; ++i) {
            se += (truth.fields[3 * i + c] - pred[3 * i + c]) * (truth.fields[3 * i + c] - pred[3 * i + c]);
            st += truth.fields[3 * i + c] * truth.fields[3 * i + c];
        }
        CHECK(std::abs(r.fields[c].euclidean - std::sqrt(se)) <= 1e-12);
        CHECK(std::abs(r.fields[c].rms - std::sqrt(se / n)) <= 1e-12);
        CHECK(std::abs(r.fields[c].relative - std::sqrt(se) / std::sqrt(st)) <= 1e-12);
    }
}

TEST_CASE("property: error norms obey the triangle inequality") {
    for (std::uint64_t seed = 0; seed < 25; ++seed) {
        const std::size_t n = 1 + seed * 3;
        auto truth = testing::random_cloud(n, seed);
        truth.fields = testing::uniform(3 * n, seed + 1, -2, 2);
        const auto a = testing::uniform(3 * n, seed + 2, -1, 1), b = testing::uniform(3 * n, seed + 3, -1, 1);
        std::vector<double> pa(3 * n), pb(3 * n), pab(3 * n);
        for (std::size_t i = 0; i < 3 * n; ++i) {
            pa[i] = truth.fields[i] + a[i];
            pb[i] = truth.fields[i] + b[i];
            pab[i] = truth.fields[i] + a[i] + b[i];
        }
        const auto ea = pointwise_errors(truth, pa), eb = pointwise_errors(truth, pb), eab = pointwise_errors(truth, pab);
        for (int c = 0; c < 3; ++c) {
            CHECK(eab.fields[c].euclidean <= ea.fields[c].euclidean + eb.fields[c].euclidean + 1e-12);
            CHECK(ea.fields[c].euclidean >= 0.0);
        }
    }
}

TEST_CASE("convex hull, polygon area and boundary mask") {
    auto sq = from_points({{0, 0}, {1, 0}, {1, 1}, {0, 1}, {0.5, 0.5}, {0.5, 0}, {0.25, 0.75}});
    auto hull = convex_hull(sq);
    CHECK(hull.size() == 4);
    CHECK(polygon_area(sq, hull) == doctest::Approx(1.0).epsilon(1e-15));
    auto mask = boundary_mask(sq);
    CHECK(mask == std::vector<bool>{true, true, true, true, false, true, false});

    auto c = oracle(0.5, 128, 1);
    auto m = boundary_mask(c);
    const std::size_t ns = surface_point_count(128, Grading{});
    for (std::size_t i = 0; i < ns; ++i) CHECK(m[i]);
    for (auto i : convex_hull(c)) CHECK(m[i]);
}

TEST_CASE("stencils reproduce linear and quadratic fields") {
    auto c = oracle(0.6, 400, 2);
    auto st = build_stencils(c, 12);
    REQUIRE(!st.stencils.empty());
    CHECK(worst_error(c, st, Quadratic{3, 2, 3, 0, 0, 0}) <= 1e-8);
    CHECK(worst_error(c, st, Quadratic{0, 0, 0, 1, 0, 0}) <= 1e-6);
}

TEST_CASE("property: stencil reconstruction is exact for random quadratics on random clouds") {
    for (std::uint64_t seed = 0; seed < 8; ++seed) {
        auto c = testing::random_cloud(120 + 20 * seed, seed);
        const auto coef = testing::uniform(6, seed + 40, -1, 1);
        Quadratic q{coef[0], coef[1], coef[2], coef[3], coef[4], coef[5]};
        auto st = build_stencils(c, 6 + seed % 8);
        CHECK(worst_error(c, st, q) <= 1e-10);
        // Stencils cover exactly the interior points.
        std::size_t interior = 0;
        for (bool b : st.boundary) interior += !b;
        CHECK(st.stencils.size() == interior);
    }
}

TEST_CASE("dV weights sum to the fluid area") {
    auto c = oracle(0.8, 512, 3);
    auto st = build_stencils(c);
    double sum = 0;
    for (double w : st.dV) {
        CHECK(w >= 0.0);
        sum += w;
    }
    const double expect = polygon_area(c, convex_hull(c)) - std::numbers::pi * 0.8 * 0.8;
    CHECK(st.area == doctest::Approx(expect).epsilon(1e-12));
    CHECK(sum == doctest::Approx(st.area).epsilon(1e-12));
}

TEST_CASE("collinear neighbourhoods take the rank-repair path") {
    std::vector<std::array<double, 2>> pts{{0, 0}};
    for (int j = 1; j <= 8; ++j) {
        pts.push_back({0.001 * j, 0});
        pts.push_back({-0.001 * j, 0});
    }
    for (int j = 0; j < 12; ++j) {
        const double th = 2 * std::numbers::pi * j / 12 + 0.1;
        pts.push_back({std::cos(th), std::sin(th)});
    }
    auto c = from_points(pts);
    auto st = build_stencils(c, 12);
    CHECK(st.repaired >= 1);
    auto it = std::find_if(st.stencils.begin(), st.stencils.end(), [](const Stencil& s) { return s.center == 0; });
    REQUIRE(it != st.stencils.end());
    CHECK(it->repaired);
    CHECK(it->neighbors.size() > 12);
    CHECK(it->neighbors.size() <= 24);
    CHECK(worst_error(c, st, Quadratic{1, 2, 3, 0.5, -0.25, 1}) <= 1e-8);
}

TEST_CASE("hopelessly collinear neighbourhoods and bad k fail") {
    std::vector<std::array<double, 2>> pts{{-10, -10}, {10, -10}, {0, 10}};
    for (int j = -20; j <= 20; ++j) pts.push_back({0.01 * j, 0});
    CHECK_THROWS_AS(build_stencils(from_points(pts), 12), NumericalError);
    CHECK_THROWS_AS(build_stencils(testing::random_cloud(50, 1), 5), ConfigError);
}

TEST_CASE("uniform fields have zero conservation residuals") {
    auto c = oracle(0.7, 300, 4);
    for (std::size_t i = 0; i < c.size(); ++i) {
        c.fields[3 * i] = 1.7;
        c.fields[3 * i + 1] = -0.3;
        c.fields[3 * i + 2] = 12.0;
    }
    auto r = conservation_residuals(c, 1.0, 0.05);
    CHECK(r.momentum_x <= 1e-10);
    CHECK(r.momentum_y <= 1e-10);
    CHECK(r.continuity <= 1e-10);
    PointCloud bare = c;
    bare.fields.clear();
    CHECK_THROWS_AS(conservation_residuals(bare, 1.0, 0.05), DataError);
}

TEST_CASE("rigid rotation balances the momentum equations") {
    const double rho = 1.3;
    auto c = oracle(0.5, 2048, 5);
    for (std::size_t i = 0; i < c.size(); ++i) {
        const double x = c.x(i), y = c.y(i);
        c.fields[3 * i] = -y;
        c.fields[3 * i + 1] = x;
        c.fields[3 * i + 2] = rho * (x * x + y * y) / 2;
    }
    auto r = conservation_residuals(c, rho, 0.05);
    CHECK(r.momentum_x <= 1e-6);
    CHECK(r.momentum_y <= 1e-6);
    CHECK(r.continuity <= 1e-6);
    // Pointwise balance too, not only after integration.
    auto s = pointwise_residual(rho, 0.05, -0.4, 0.2, {0, -1, 0, 0, 0}, {1, 0, 0, 0, 0}, {rho * 0.2, rho * 0.4, 0, 0, 0});
    CHECK(s.momentum_x == doctest::Approx(0.0));
    CHECK(s.momentum_y == doctest::Approx(0.0));
}

TEST_CASE("pointwise residual against hand evaluation") {
    const std::array<double, 5> du{1, 2, 3, 4, 5}, dv{-1, 0.5, 2, 0, -1}, dp{0.25, -0.75, 0, 0, 0};
    auto r = pointwise_residual(2.0, 0.1, 0.5, -1.5, du, dv, dp);
    CHECK(r.momentum_x == doctest::Approx(2.0 * (0.5 * 1 - 1.5 * 2) + 0.25 - 0.1 * 8).epsilon(1e-15));
    CHECK(r.momentum_y == doctest::Approx(2.0 * (0.5 * -1 - 1.5 * 0.5) - 0.75 - 0.1 * 1).epsilon(1e-15));
    CHECK(r.continuity == 1.5);
}

TEST_CASE("potential-flow residuals shrink under refinement") {
    std::vector<double> h, rx, ry, rc;
    for (std::size_t n : {512, 1024, 2048}) {
        auto c = oracle(0.5, n, 6);
        auto r = conservation_residuals(c, 1.0, 0.05);
        h.push_back(median_spacing(c));
        rx.push_back(r.momentum_x);
        ry.push_back(r.momentum_y);
        rc.push_back(r.continuity);
    }
    CHECK(h[2] < h[0]);
    for (const auto* v : {&rx, &ry, &rc}) CHECK((*v)[2] < (*v)[0]);
}

TEST_CASE("gradient residuals of a constant-output model vanish and sets partition the interior") {
    const std::size_t n = 96;
    const auto cfg = ModelConfig::desk(n, 2, 32);
    auto m = build<double>(cfg, 3);
    for (auto& w : m.params.at("head.weight").values()) w = 0.0;
    auto cloud = oracle(0.6, n, 7);
    NormStats st;
    st.min = {-0.5, -1.0, -2.0};
    st.max = {2.0, 1.0, 0.5};
    auto r = gradient_residuals(m, cloud, st, 0.05);
    for (const auto& s : {r.critical, r.noncritical}) {
        if (s.empty) continue;
        CHECK(s.r.momentum_x <= 1e-12);
        CHECK(s.r.momentum_y <= 1e-12);
        CHECK(s.r.continuity <= 1e-12);
    }

    const auto boundary = boundary_mask(cloud);
    std::vector<std::size_t> all = r.critical_interior;
    all.insert(all.end(), r.noncritical_interior.begin(), r.noncritical_interior.end());
    std::sort(all.begin(), all.end());
    CHECK(std::adjacent_find(all.begin(), all.end()) == all.end());
    std::vector<std::size_t> interior;
    for (std::size_t i = 0; i < n; ++i)
        if (!boundary[i]) interior.push_back(i);
    CHECK(all == interior);
    CHECK(r.critical.count == r.critical_interior.size());
    CHECK(r.noncritical.count == r.noncritical_interior.size());
}

TEST_CASE("gradient residuals are deterministic and flag empty sets") {
    const std::size_t n = 64;
    auto m = build<double>(ModelConfig::desk(n, 2, 16), 9);
    auto cloud = oracle(0.6, n, 8);
    NormStats st;
    auto a = gradient_residuals(m, cloud, st, 0.05);
    auto b = gradient_residuals(m, cloud, st, 0.05);
    CHECK(a.critical.r.momentum_x == b.critical.r.momentum_x);
    CHECK(a.noncritical.r.continuity == b.noncritical.r.continuity);
    CHECK(a.critical.r.momentum_x >= 0.0);

    // A cloud that is all hull: no interior points at all.
    auto tri = from_points({{0, 0}, {1, 0}, {0, 1}});
    Model<double> small{ModelConfig::desk(3, 2, 16), m.params};
    auto t = gradient_residuals(small, tri, st, 0.05);
    CHECK(t.critical.empty);
    CHECK(t.noncritical.empty);
    CHECK(t.critical.count == 0);
    CHECK_FALSE(std::isnan(t.critical.r.momentum_x));
}

TEST_CASE("critical points: single point, bound and boundary coverage") {
    auto m = build<double>(ModelConfig::desk(1, 2, 32), 1);
    auto one = testing::random_cloud(1, 2);
    auto lat = predict(m, one).latents[0];
    CHECK(lat.argmax == std::vector<std::size_t>(32, 0));
    CHECK(critical_points(lat, one).indices == std::vector<std::size_t>{0});

    auto cloud = oracle(0.5, 64, 9);
    Model<double> m64{ModelConfig::desk(64, 2, 32), m.params};
    auto l64 = predict(m64, cloud).latents[0];
    auto r = critical_points(l64, cloud);
    CHECK(r.indices.size() <= 32);
    CHECK(r.surface_points == surface_point_count(64, Grading{}));
    CHECK(r.surface_critical <= r.surface_points);

    LatentRecord all;
    all.critical_set.resize(64);
    std::iota(all.critical_set.begin(), all.critical_set.end(), 0);
    CHECK(critical_points(all, cloud).boundary_coverage);
    all.critical_set.erase(all.critical_set.begin());
    CHECK_FALSE(critical_points(all, cloud).boundary_coverage);
    CHECK_FALSE(critical_points(all, testing::random_cloud(64, 1)).boundary_coverage);
}
