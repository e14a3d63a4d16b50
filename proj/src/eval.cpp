#include "cloudflow/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <Eigen/Dense>

#include "cloudflow/derivatives.hpp"
#include "cloudflow/error.hpp"

namespace cloudflow {

ErrorReport pointwise_errors(const PointCloud& truth, std::span<const double> pred) {
    if (!truth.has_fields()) throw DataError("pointwise errors: reference cloud has no fields");
    if (pred.size() != truth.size() * 3)
        throw DimensionError("pointwise errors: " + std::to_string(pred.size()) + " predicted values for " +
                             std::to_string(truth.size()) + " points");
    ErrorReport r;
    r.n_points = truth.size();
    r.abs_error.resize(pred.size());
    std::array<double, 3> err2{}, ref2{};
    for (std::size_t i = 0; i < r.n_points; ++i)
        for (std::size_t k = 0; k < 3; ++k) {
            const double t = truth.fields[i * 3 + k];
            const double e = t - pred[i * 3 + k];
            r.abs_error[i * 3 + k] = std::abs(e);
            err2[k] += e * e;
            ref2[k] += t * t;
        }
    for (std::size_t k = 0; k < 3; ++k) {
        auto& f = r.fields[k];
        f.euclidean = std::sqrt(err2[k]);
        f.rms = r.n_points ? f.euclidean / std::sqrt(static_cast<double>(r.n_points)) : 0.0;
        f.relative_defined = ref2[k] > 0.0;
        f.relative = f.relative_defined ? f.euclidean / std::sqrt(ref2[k]) : 0.0;
    }
    return r;
}

// ---------------------------------------------------------------------------

namespace {

double cross(const PointCloud& c, std::size_t o, std::size_t a, std::size_t b) {
    return (c.x(a) - c.x(o)) * (c.y(b) - c.y(o)) - (c.y(a) - c.y(o)) * (c.x(b) - c.x(o));
}

double bbox_diagonal(const PointCloud& c) {
    if (c.size() == 0) return 0.0;
    double x0 = c.x(0), x1 = x0, y0 = c.y(0), y1 = y0;
    for (std::size_t i = 1; i < c.size(); ++i) {
        x0 = std::min(x0, c.x(i));
        x1 = std::max(x1, c.x(i));
        y0 = std::min(y0, c.y(i));
        y1 = std::max(y1, c.y(i));
    }
    return std::hypot(x1 - x0, y1 - y0);
}

}  // namespace

std::vector<std::size_t> convex_hull(const PointCloud& c) {
    const std::size_t n = c.size();
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        return c.x(a) < c.x(b) || (c.x(a) == c.x(b) && c.y(a) < c.y(b));
    });
    if (n < 3) return idx;
    std::vector<std::size_t> h(2 * n);
    std::size_t k = 0;
    for (std::size_t i = 0; i < n; ++i) {
        while (k >= 2 && cross(c, h[k - 2], h[k - 1], idx[i]) <= 0) --k;
        h[k++] = idx[i];
    }
    for (std::size_t i = n - 1, t = k + 1; i-- > 0;) {
        while (k >= t && cross(c, h[k - 2], h[k - 1], idx[i]) <= 0) --k;
        h[k++] = idx[i];
    }
    h.resize(k - 1);
    return h;
}

double polygon_area(const PointCloud& c, const std::vector<std::size_t>& ring) {
    double a = 0.0;
    for (std::size_t i = 0; i < ring.size(); ++i) {
        const auto p = ring[i], q = ring[(i + 1) % ring.size()];
        a += c.x(p) * c.y(q) - c.x(q) * c.y(p);
    }
    return 0.5 * std::abs(a);
}

std::vector<bool> boundary_mask(const PointCloud& c) {
    const std::size_t n = c.size();
    std::vector<bool> mask(n, false);
    const double tol = 1e-9 * bbox_diagonal(c);
    const auto hull = convex_hull(c);
    for (std::size_t i = 0; i < n; ++i) {
        if (c.geometry.known() && c.geometry.on_surface(c.x(i), c.y(i), tol)) {
            mask[i] = true;
            continue;
        }
        for (std::size_t e = 0; e < hull.size() && !mask[i]; ++e) {
            const auto a = hull[e], b = hull[(e + 1) % hull.size()];
            const double ex = c.x(b) - c.x(a), ey = c.y(b) - c.y(a);
            const double len2 = ex * ex + ey * ey;
            double t = len2 > 0 ? ((c.x(i) - c.x(a)) * ex + (c.y(i) - c.y(a)) * ey) / len2 : 0.0;
            t = std::clamp(t, 0.0, 1.0);
            if (std::hypot(c.x(i) - c.x(a) - t * ex, c.y(i) - c.y(a) - t * ey) <= tol) mask[i] = true;
        }
    }
    return mask;
}

// ---------------------------------------------------------------------------

namespace {

// Indices of the m nearest other points, closest first (ties by index).
std::vector<std::size_t> nearest(const PointCloud& c, std::size_t i, std::size_t m) {
    std::vector<std::pair<double, std::size_t>> d;
    d.reserve(c.size());
    for (std::size_t j = 0; j < c.size(); ++j)
        if (j != i) d.emplace_back(std::hypot(c.x(j) - c.x(i), c.y(j) - c.y(i)), j);
    m = std::min(m, d.size());
    std::partial_sort(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(m), d.end());
    std::vector<std::size_t> out(m);
    for (std::size_t k = 0; k < m; ++k) out[k] = d[k].second;
    return out;
}

// Returns false when the weighted design matrix is rank deficient.
bool fit_stencil(const PointCloud& c, Stencil& s) {
    const std::size_t m = s.neighbors.size();
    if (m < 5) return false;
    const std::size_t i = s.center;
    double h = 0.0;
    for (auto j : s.neighbors) h = std::max(h, std::hypot(c.x(j) - c.x(i), c.y(j) - c.y(i)));
    if (!(h > 0)) return false;

    Eigen::MatrixXd A(m, 5);
    Eigen::VectorXd w(m);
    for (std::size_t r = 0; r < m; ++r) {
        const auto j = s.neighbors[r];
        const double dx = (c.x(j) - c.x(i)) / h, dy = (c.y(j) - c.y(i)) / h;
        A.row(r) << dx, dy, 0.5 * dx * dx, dx * dy, 0.5 * dy * dy;
        w(r) = 1.0 / (1.0 + dx * dx + dy * dy);
    }
    const Eigen::MatrixXd WA = w.asDiagonal() * A;
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(WA);
    qr.setThreshold(1e-10);
    if (qr.rank() < 5) return false;
    // coefficients: (WA)^+ W, so that derivative = coef * (f_j - f_i)
    const Eigen::MatrixXd C = qr.solve(Eigen::MatrixXd(w.asDiagonal()));
    const double scale[5] = {1.0 / h, 1.0 / h, 1.0 / (h * h), 1.0 / (h * h), 1.0 / (h * h)};
    for (int q = 0; q < 5; ++q) {
        s.coef[q].resize(m);
        for (std::size_t r = 0; r < m; ++r) s.coef[q][r] = C(q, static_cast<Eigen::Index>(r)) * scale[q];
    }
    return true;
}

double median(std::vector<double> v) {
    if (v.empty()) return 0.0;
    const auto mid = v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2);
    std::nth_element(v.begin(), mid, v.end());
    return *mid;
}

}  // namespace

StencilSet build_stencils(const PointCloud& cloud, std::size_t k) {
    if (k < 6) throw ConfigError("stencil size must be at least 6, got " + std::to_string(k));
    if (cloud.dim != 2) throw DataError("stencils need a 2-D cloud");
    const std::size_t n = cloud.size();
    if (n < k + 1) throw DataError("stencils: cloud has " + std::to_string(n) + " points, need more than k = " +
                                   std::to_string(k));
    StencilSet set;
    set.k = k;
    set.boundary = boundary_mask(cloud);
    set.dV.assign(n, 0.0);

    // Raw cell size from the median distance to the k nearest neighbours.
    std::vector<std::vector<std::size_t>> nbrs(n);
    for (std::size_t i = 0; i < n; ++i) {
        nbrs[i] = nearest(cloud, i, k);
        std::vector<double> d;
        for (auto j : nbrs[i]) d.push_back(std::hypot(cloud.x(j) - cloud.x(i), cloud.y(j) - cloud.y(i)));
        const double r = 0.5 * median(d);
        set.dV[i] = M_PI * r * r;
    }
    set.area = polygon_area(cloud, convex_hull(cloud));
    if (cloud.geometry.known()) set.area -= cloud.geometry.area();
    const double raw = std::accumulate(set.dV.begin(), set.dV.end(), 0.0);
    if (set.area > 0 && raw > 0)
        for (auto& v : set.dV) v *= set.area / raw;

    for (std::size_t i = 0; i < n; ++i) {
        if (set.boundary[i]) continue;
        Stencil s;
        s.center = i;
        s.neighbors = nbrs[i];
        s.dV = set.dV[i];
        std::size_t m = k;
        while (!fit_stencil(cloud, s)) {
            if (m >= 2 * k || m >= n - 1)
                throw NumericalError("stencil at point " + std::to_string(i) + " is rank deficient with " +
                                     std::to_string(m) + " neighbours");
            ++m;
            s.neighbors = nearest(cloud, i, m);
            s.repaired = true;
        }
        if (s.repaired) ++set.repaired;
        set.stencils.push_back(std::move(s));
    }
    return set;
}

std::vector<std::array<double, 5>> StencilSet::derivatives(std::span<const double> f, std::size_t stride,
                                                          std::size_t offset) const {
    std::vector<std::array<double, 5>> out(stencils.size());
    for (std::size_t s = 0; s < stencils.size(); ++s) {
        const auto& st = stencils[s];
        const double fi = f[st.center * stride + offset];
        for (int q = 0; q < 5; ++q) {
            double acc = 0.0;
            for (std::size_t r = 0; r < st.neighbors.size(); ++r)
                acc += st.coef[q][r] * (f[st.neighbors[r] * stride + offset] - fi);
            out[s][q] = acc;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------

ResidualTriplet pointwise_residual(double rho, double mu, double u, double v, const std::array<double, 5>& du,
                                   const std::array<double, 5>& dv, const std::array<double, 5>& dp) {
    ResidualTriplet r;
    r.momentum_x = rho * (u * du[0] + v * du[1]) + dp[0] - mu * (du[2] + du[4]);
    r.momentum_y = rho * (u * dv[0] + v * dv[1]) + dp[1] - mu * (dv[2] + dv[4]);
    r.continuity = du[0] + dv[1];
    return r;
}

ResidualTriplet conservation_residuals(const PointCloud& cloud, const StencilSet& st, double rho, double mu) {
    if (!cloud.has_fields()) throw DataError("conservation residuals: cloud has no fields");
    if (st.boundary.size() != cloud.size()) throw DimensionError("conservation residuals: stencils built for another cloud");
    const auto du = st.derivatives(cloud.fields, 3, 0);
    const auto dv = st.derivatives(cloud.fields, 3, 1);
    const auto dp = st.derivatives(cloud.fields, 3, 2);
    ResidualTriplet sum;
    for (std::size_t s = 0; s < st.stencils.size(); ++s) {
        const auto i = st.stencils[s].center;
        const auto r = pointwise_residual(rho, mu, cloud.u(i), cloud.v(i), du[s], dv[s], dp[s]);
        const double w = st.stencils[s].dV;
        sum.momentum_x += r.momentum_x * w;
        sum.momentum_y += r.momentum_y * w;
        sum.continuity += r.continuity * w;
    }
    return {std::abs(sum.momentum_x), std::abs(sum.momentum_y), std::abs(sum.continuity)};
}

ResidualTriplet conservation_residuals(const PointCloud& cloud, double rho, double mu, std::size_t k) {
    return conservation_residuals(cloud, build_stencils(cloud, k), rho, mu);
}

// ---------------------------------------------------------------------------

namespace {

SetResiduals average(const std::vector<ResidualTriplet>& pw, const std::vector<std::size_t>& idx) {
    SetResiduals s;
    s.count = idx.size();
    s.empty = idx.empty();
    if (s.empty) return s;
    ResidualTriplet acc;
    for (auto i : idx) {
        acc.momentum_x += pw[i].momentum_x;
        acc.momentum_y += pw[i].momentum_y;
        acc.continuity += pw[i].continuity;
    }
    const double m = static_cast<double>(idx.size());
    s.r = {std::abs(acc.momentum_x / m), std::abs(acc.momentum_y / m), std::abs(acc.continuity / m)};
    return s;
}

}  // namespace

GradientResidualReport gradient_residuals(Model<double>& model, const PointCloud& cloud, const NormStats& stats,
                                          double mu) {
    if (cloud.dim != 2) throw DataError("gradient residuals need a 2-D cloud");
    stats.validate();
    GradientResidualReport rep;
    rep.latent = predict(model, cloud).latents.at(0);

    const auto d = input_derivatives(model_function(model, ad::Mode::infer), cloud, 2);
    if (d.n_out < 3) throw DimensionError("gradient residuals need three output channels");

    // Physical value = offset + scale * network output, per channel.
    std::array<double, 3> scale, offset;
    for (int c = 0; c < 3; ++c) {
        const double range = stats.max[c] - stats.min[c];
        const double ref = c < 2 ? stats.u_inf : stats.rho * stats.u_inf * stats.u_inf;
        scale[c] = ref * range;
        offset[c] = ref * stats.min[c] + (c == 2 ? stats.p0 : 0.0);
    }
    rep.pointwise.resize(cloud.size());
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        std::array<std::array<double, 5>, 3> g{};
        for (int c = 0; c < 3; ++c) {
            g[c][0] = scale[c] * d.d1(i, c, 0);
            g[c][1] = scale[c] * d.d1(i, c, 1);
            g[c][2] = scale[c] * d.d2(i, c, 0);
            g[c][4] = scale[c] * d.d2(i, c, 1);
        }
        const double u = offset[0] + scale[0] * d.value(i, 0);
        const double v = offset[1] + scale[1] * d.value(i, 1);
        rep.pointwise[i] = pointwise_residual(stats.rho, mu, u, v, g[0], g[1], g[2]);
    }

    const auto boundary = boundary_mask(cloud);
    const auto& crit = rep.latent.critical_set;
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        if (boundary[i]) continue;
        if (std::binary_search(crit.begin(), crit.end(), i))
            rep.critical_interior.push_back(i);
        else
            rep.noncritical_interior.push_back(i);
    }
    rep.critical = average(rep.pointwise, rep.critical_interior);
    rep.noncritical = average(rep.pointwise, rep.noncritical_interior);
    return rep;
}

CriticalReport critical_points(const LatentRecord& latent, const PointCloud& cloud) {
    CriticalReport r;
    r.indices = latent.critical_set;
    if (!cloud.geometry.known()) return r;
    const double tol = 1e-9 * bbox_diagonal(cloud);
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        if (!cloud.geometry.on_surface(cloud.x(i), cloud.y(i), tol)) continue;
        ++r.surface_points;
        if (std::binary_search(r.indices.begin(), r.indices.end(), i)) ++r.surface_critical;
    }
    r.boundary_coverage = r.surface_points > 0 && r.surface_critical == r.surface_points;
    return r;
}

}  // namespace cloudflow
