#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <vector>

namespace cloudflow {

/// Cross-section of the immersed body. Lengths are half-extents:
/// circle a = radius; ellipse a, b = semi-axes; rectangle a, b = half-widths;
/// polygon = regular n-gon with circumradius a. `angle` is in radians.
struct GeometryMeta {
    enum class Kind { unknown, circle, ellipse, rectangle, polygon };

    Kind kind = Kind::unknown;
    double cx = 0.0, cy = 0.0;
    double a = 0.0, b = 0.0;
    double angle = 0.0;
    int sides = 0;

    static GeometryMeta circle(double cx, double cy, double radius);

    bool known() const { return kind != Kind::unknown; }
    /// Reynolds length: the largest extent of the body (the diameter for a circle).
    double length_scale() const;
    double area() const;
    /// Strictly inside the body, at least `tol` away from its surface.
    bool inside(double x, double y, double tol = 0.0) const;
    /// Within `tol` of the body surface.
    bool on_surface(double x, double y, double tol) const;
    /// Vertices of polygonal bodies, counter-clockwise. Empty for smooth bodies.
    std::vector<std::array<double, 2>> vertices() const;

    std::string kind_name() const;
    static Kind kind_from_name(const std::string& s);
};

/// N points with coordinates in metres and optional per-point (u, v, p) in physical units.
struct PointCloud {
    std::size_t dim = 2;
    std::vector<double> coords;  // N x dim, row-major
    std::vector<double> fields;  // N x 3 (u, v, p) or empty
    GeometryMeta geometry;

    std::size_t size() const { return dim == 0 ? 0 : coords.size() / dim; }
    bool has_fields() const { return !fields.empty(); }
    double x(std::size_t i) const { return coords[i * dim]; }
    double y(std::size_t i) const { return coords[i * dim + 1]; }
    double u(std::size_t i) const { return fields[i * 3]; }
    double v(std::size_t i) const { return fields[i * 3 + 1]; }
    double p(std::size_t i) const { return fields[i * 3 + 2]; }

    /// Points at the given indices, in that order, with their fields.
    PointCloud subset(const std::vector<std::size_t>& idx) const;
    /// Throws DataError on non-finite values or inconsistent sizes.
    void validate() const;
};

}  // namespace cloudflow
