#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "cloudflow/cloud.hpp"

namespace cloudflow {

/// Re = rho * L * u_inf / mu. Throws DomainError unless every argument is positive.
double reynolds(double rho, double u_inf, double mu, double length);

struct FlowState {
    double u = 0.0, v = 0.0, p = 0.0;
};

struct FreeStream {
    double u_inf = 1.0;  // m/s, along +x
    double rho = 1.0;    // kg/m^3
    double p0 = 0.0;     // Pa, far-field pressure
    double mu = 0.05;    // Pa s
};

/// Inviscid flow past a circular cylinder (uniform stream plus doublet) with
/// Bernoulli pressure p = p0 + rho/2 (u_inf^2 - |u|^2). Throws DomainError for
/// points inside the cylinder.
FlowState potential_flow_cylinder(double cx, double cy, double radius, const FreeStream& fs, double x, double y);

/// Fills cloud.fields from the potential-flow solution; the cloud must carry circle geometry.
void apply_potential_flow(PointCloud& cloud, const FreeStream& fs);

/// Log-polar ring layout around the body: ring k sits at radius R exp(k dtheta), so
/// cells stay square and spacing grows geometrically away from the surface.
struct Grading {
    double outer_ratio = 5.0;         // outermost ring radius / body radius
    double jitter = 0.15;             // interior perturbation, fraction of local spacing
    std::size_t surface_points = 0;   // 0: smallest count that yields at least N points
};

/// Surface ring plus jittered interior rings, truncated to the N points closest to
/// the body centre and ordered by that distance. Surface points are independent of
/// the seed. Throws DataError for infeasible requests.
PointCloud sample_cloud(const GeometryMeta& geometry, std::size_t n_points, const Grading& grading,
                        std::uint64_t seed);

/// Surface point count sample_cloud uses for a request.
std::size_t surface_point_count(std::size_t n_points, const Grading& grading);

/// (u/u_inf, v/u_inf, (p - p0)/(rho u_inf^2)).
std::array<double, 3> nondimensionalize(double u, double v, double p, double rho, double u_inf, double p0);
std::array<double, 3> dimensionalize(double us, double vs, double ps, double rho, double u_inf, double p0);

/// (value - lo) / (hi - lo); no clamping. Throws DataError when hi <= lo.
double minmax_scale(double value, double lo, double hi);
double minmax_unscale(double scaled, double lo, double hi);

/// Reference scales and per-variable bounds of the dimensionless fields over the training split.
struct NormStats {
    double rho = 1.0;
    double u_inf = 1.0;
    double p0 = 0.0;
    std::array<double, 3> min{0.0, 0.0, 0.0};
    std::array<double, 3> max{1.0, 1.0, 1.0};

    static NormStats fit(const std::vector<const PointCloud*>& training, double rho, double u_inf, double p0);
    void validate() const;
    bool operator==(const NormStats&) const = default;
};

/// Physical (u, v, p) of every point -> values in [0, 1] (N x 3).
std::vector<double> normalize_fields(const PointCloud& cloud, const NormStats& stats);
/// Inverse of normalize_fields.
std::vector<double> denormalize_fields(std::span<const double> scaled, const NormStats& stats);

/// CSV with header x,y[,u,v,p]; '#' lines are comments, '# geometry key=value ...'
/// carries the body description. Values are written in shortest round-trip form.
PointCloud read_sample(const std::filesystem::path& path);
void write_sample(const std::filesystem::path& path, const PointCloud& cloud);

std::string geometry_comment(const GeometryMeta& g);

/// Shortest decimal text that parses back to the same double.
std::string format_double(double v);

}  // namespace cloudflow
