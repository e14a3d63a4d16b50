#include "cloudflow/cloud.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "cloudflow/error.hpp"

namespace cloudflow {

namespace {

// Body-frame coordinates: translate to the centre and undo the rotation.
std::array<double, 2> to_body(const GeometryMeta& g, double x, double y) {
    const double dx = x - g.cx, dy = y - g.cy;
    const double c = std::cos(g.angle), s = std::sin(g.angle);
    return {c * dx + s * dy, -s * dx + c * dy};
}

double segment_distance(std::array<double, 2> p, std::array<double, 2> a, std::array<double, 2> b) {
    const double ex = b[0] - a[0], ey = b[1] - a[1];
    const double len2 = ex * ex + ey * ey;
    double t = len2 > 0 ? ((p[0] - a[0]) * ex + (p[1] - a[1]) * ey) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    return std::hypot(p[0] - a[0] - t * ex, p[1] - a[1] - t * ey);
}

// Signed distance to a convex CCW polygon: negative inside.
double polygon_signed_distance(const std::vector<std::array<double, 2>>& v, double x, double y) {
    double dmin = std::numeric_limits<double>::infinity();
    bool in = true;
    for (std::size_t i = 0; i < v.size(); ++i) {
        const auto& a = v[i];
        const auto& b = v[(i + 1) % v.size()];
        dmin = std::min(dmin, segment_distance({x, y}, a, b));
        const double cross = (b[0] - a[0]) * (y - a[1]) - (b[1] - a[1]) * (x - a[0]);
        if (cross <= 0) in = false;
    }
    return in ? -dmin : dmin;
}

// Approximate signed distance for an ellipse, exact for circles.
double ellipse_signed_distance(double a, double b, double xb, double yb) {
    const double q = std::sqrt((xb * xb) / (a * a) + (yb * yb) / (b * b));
    if (q == 0.0) return -std::min(a, b);
    // Radial scaling along the ray through the point.
    const double r = std::hypot(xb, yb);
    return r - r / q;
}

}  // namespace

GeometryMeta GeometryMeta::circle(double cx, double cy, double radius) {
    GeometryMeta g;
    g.kind = Kind::circle;
    g.cx = cx;
    g.cy = cy;
    g.a = g.b = radius;
    return g;
}

double GeometryMeta::length_scale() const {
    switch (kind) {
        case Kind::circle: return 2.0 * a;
        case Kind::ellipse:
        case Kind::rectangle: return 2.0 * std::max(a, b);
        case Kind::polygon: return 2.0 * a;
        case Kind::unknown: break;
    }
    return 0.0;
}

double GeometryMeta::area() const {
    using std::numbers::pi;
    switch (kind) {
        case Kind::circle: return pi * a * a;
        case Kind::ellipse: return pi * a * b;
        case Kind::rectangle: return 4.0 * a * b;
        case Kind::polygon: return 0.5 * sides * a * a * std::sin(2.0 * pi / sides);
        case Kind::unknown: break;
    }
    return 0.0;
}

std::vector<std::array<double, 2>> GeometryMeta::vertices() const {
    std::vector<std::array<double, 2>> local;
    if (kind == Kind::rectangle) {
        local = {{-a, -b}, {a, -b}, {a, b}, {-a, b}};
    } else if (kind == Kind::polygon) {
        for (int k = 0; k < sides; ++k) {
            const double t = 2.0 * std::numbers::pi * k / sides;
            local.push_back({a * std::cos(t), a * std::sin(t)});
        }
    }
    const double c = std::cos(angle), s = std::sin(angle);
    for (auto& p : local) p = {cx + c * p[0] - s * p[1], cy + s * p[0] + c * p[1]};
    return local;
}

bool GeometryMeta::inside(double x, double y, double tol) const {
    const auto p = to_body(*this, x, y);
    switch (kind) {
        case Kind::circle: return std::hypot(p[0], p[1]) < a - tol;
        case Kind::ellipse: return ellipse_signed_distance(a, b, p[0], p[1]) < -tol;
        case Kind::rectangle:
        case Kind::polygon: return polygon_signed_distance(vertices(), x, y) < -tol;
        case Kind::unknown: break;
    }
    return false;
}

bool GeometryMeta::on_surface(double x, double y, double tol) const {
    const auto p = to_body(*this, x, y);
    switch (kind) {
        case Kind::circle: return std::abs(std::hypot(p[0], p[1]) - a) <= tol;
        case Kind::ellipse: return std::abs(ellipse_signed_distance(a, b, p[0], p[1])) <= tol;
        case Kind::rectangle:
        case Kind::polygon: return std::abs(polygon_signed_distance(vertices(), x, y)) <= tol;
        case Kind::unknown: break;
    }
    return false;
}

std::string GeometryMeta::kind_name() const {
    switch (kind) {
        case Kind::circle: return "circle";
        case Kind::ellipse: return "ellipse";
        case Kind::rectangle: return "rectangle";
        case Kind::polygon: return "polygon";
        case Kind::unknown: break;
    }
    return "unknown";
}

GeometryMeta::Kind GeometryMeta::kind_from_name(const std::string& s) {
    if (s == "circle") return Kind::circle;
    if (s == "ellipse") return Kind::ellipse;
    if (s == "rectangle") return Kind::rectangle;
    if (s == "polygon") return Kind::polygon;
    if (s == "unknown") return Kind::unknown;
    throw DataError("unknown geometry kind '" + s + "'");
}

PointCloud PointCloud::subset(const std::vector<std::size_t>& idx) const {
    PointCloud out;
    out.dim = dim;
    out.geometry = geometry;
    out.coords.reserve(idx.size() * dim);
    for (auto i : idx) {
        if (i >= size()) throw DataError("subset: index " + std::to_string(i) + " out of range");
        out.coords.insert(out.coords.end(), coords.begin() + i * dim, coords.begin() + (i + 1) * dim);
        if (has_fields()) out.fields.insert(out.fields.end(), fields.begin() + i * 3, fields.begin() + i * 3 + 3);
    }
    return out;
}

void PointCloud::validate() const {
    if (dim != 2 && dim != 3) throw DataError("point cloud: dimension must be 2 or 3, got " + std::to_string(dim));
    if (coords.size() % dim != 0) throw DataError("point cloud: coordinate array is not a multiple of the dimension");
    if (has_fields() && fields.size() != size() * 3)
        throw DataError("point cloud: expected " + std::to_string(size() * 3) + " field values, got " +
                        std::to_string(fields.size()));
    for (double c : coords)
        if (!std::isfinite(c)) throw DataError("point cloud: non-finite coordinate");
    for (double f : fields)
        if (!std::isfinite(f)) throw DataError("point cloud: non-finite field value");
}

}  // namespace cloudflow
