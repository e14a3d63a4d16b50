#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <vector>

#include "cloudflow/cloud.hpp"
#include "cloudflow/data.hpp"
#include "cloudflow/model.hpp"

namespace cloudflow {

// ---------------------------------------------------------------------------
// Pointwise errors

struct FieldNorms {
    double euclidean = 0.0;  // sqrt(sum_i e_i^2), the headline value
    double rms = 0.0;        // euclidean / sqrt(N)
    double relative = 0.0;   // euclidean / ||truth||; meaningless when relative_defined is false
    bool relative_defined = true;
};

struct ErrorReport {
    std::size_t n_points = 0;
    std::array<FieldNorms, 3> fields;  // u, v, p
    std::vector<double> abs_error;     // N x 3, |truth - pred|
};

/// `pred` is N x 3 (u, v, p) in physical units.
ErrorReport pointwise_errors(const PointCloud& truth, std::span<const double> pred);

// ---------------------------------------------------------------------------
// Boundary classification

/// Indices of the convex hull vertices in counter-clockwise order.
std::vector<std::size_t> convex_hull(const PointCloud& cloud);
double polygon_area(const PointCloud& cloud, const std::vector<std::size_t>& ring);

/// True for points on the body surface or on the convex-hull rim, within
/// 1e-9 times the bounding-box diagonal.
std::vector<bool> boundary_mask(const PointCloud& cloud);

// ---------------------------------------------------------------------------
// Meshless derivative stencils

/// Weighted least-squares fit of f_j - f_i over the neighbours j of point i with the
/// quadratic Taylor basis (dx, dy, dx^2/2, dx dy, dy^2/2). Each row of `coef` maps the
/// neighbour differences to one derivative: f_x, f_y, f_xx, f_xy, f_yy.
struct Stencil {
    std::size_t center = 0;
    std::vector<std::size_t> neighbors;
    std::array<std::vector<double>, 5> coef;
    double dV = 0.0;
    bool repaired = false;  // the neighbourhood had to be enlarged to reach full rank
};

struct StencilSet {
    std::size_t k = 0;
    std::vector<Stencil> stencils;  // interior points only, ascending centre index
    std::vector<bool> boundary;     // per point
    std::vector<double> dV;         // per point, sums to `area`
    double area = 0.0;              // hull area minus body area when the body is known
    std::size_t repaired = 0;

    /// Derivatives of a per-point scalar field at every stencil centre: rows of (f_x, f_y, f_xx, f_xy, f_yy).
    std::vector<std::array<double, 5>> derivatives(std::span<const double> f, std::size_t stride = 1,
                                                   std::size_t offset = 0) const;
};

inline constexpr std::size_t kDefaultStencilK = 12;

/// Throws ConfigError for k < 6 and NumericalError when a neighbourhood is still
/// rank deficient at 2k neighbours.
StencilSet build_stencils(const PointCloud& cloud, std::size_t k = kDefaultStencilK);

// ---------------------------------------------------------------------------
// Residuals

struct ResidualTriplet {
    double momentum_x = 0.0;
    double momentum_y = 0.0;
    double continuity = 0.0;
};

/// Pointwise steady incompressible Navier-Stokes and continuity imbalance from
/// velocity/pressure derivatives.
ResidualTriplet pointwise_residual(double rho, double mu, double u, double v, const std::array<double, 5>& du,
                                   const std::array<double, 5>& dv, const std::array<double, 5>& dp);

/// |sum_i R_i dV_i| over interior points, for fields in physical units.
ResidualTriplet conservation_residuals(const PointCloud& cloud, const StencilSet& stencils, double rho, double mu);
ResidualTriplet conservation_residuals(const PointCloud& cloud, double rho, double mu,
                                       std::size_t k = kDefaultStencilK);

struct SetResiduals {
    std::size_t count = 0;  // M
    bool empty = true;
    ResidualTriplet r;      // |mean over the set|
};

struct GradientResidualReport {
    std::vector<std::size_t> critical_interior;
    std::vector<std::size_t> noncritical_interior;
    SetResiduals critical;
    SetResiduals noncritical;
    std::vector<ResidualTriplet> pointwise;  // signed, per point, physical units
    LatentRecord latent;
};

/// Residuals from derivatives of the network outputs with respect to the input
/// coordinates (infer mode), mapped to physical units through `stats`, averaged
/// separately over the critical and non-critical interior points.
GradientResidualReport gradient_residuals(Model<double>& model, const PointCloud& cloud, const NormStats& stats,
                                          double mu);

// ---------------------------------------------------------------------------
// Critical points

struct CriticalReport {
    std::vector<std::size_t> indices;  // sorted unique
    std::size_t surface_points = 0;
    std::size_t surface_critical = 0;
    /// Every body-surface point is critical. False when the body is unknown.
    bool boundary_coverage = false;
};

CriticalReport critical_points(const LatentRecord& latent, const PointCloud& cloud);

}  // namespace cloudflow
