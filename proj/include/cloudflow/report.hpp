#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "cloudflow/cloud.hpp"
#include "cloudflow/eval.hpp"
#include "cloudflow/train.hpp"

namespace cloudflow {

struct NamedErrors {
    std::string sample;
    ErrorReport errors;
};

struct NamedResiduals {
    std::string sample;
    ResidualTriplet residuals;
};

struct NamedGradientResiduals {
    std::string sample;
    SetResiduals critical;
    SetResiduals noncritical;
};

/// Per-sample field error norms followed by average, maximum and minimum rows,
/// once for each norm variant (Euclidean first).
std::string error_table(const std::vector<NamedErrors>& rows);

/// Integrated residuals per sample with average, maximum and minimum rows.
std::string conservation_table(const std::vector<NamedResiduals>& rows);

/// Average, maximum and minimum of the gradient residuals over samples, for the
/// critical and the non-critical interior sets. Empty sets are skipped.
std::string gradient_residual_table(const std::vector<NamedGradientResiduals>& rows);

/// Grid-search results with one row block per global feature size and one column
/// per batch size; each cell lists time and the three losses, or the infeasible mark.
std::string grid_table(const std::vector<GridCell>& cells);

/// x,y,err_u,err_v,err_p,is_critical
void write_error_map(const std::filesystem::path& path, const PointCloud& cloud, const ErrorReport& errors,
                     const std::vector<std::size_t>& critical);

/// x,y,u,v,p
void write_fields_csv(const std::filesystem::path& path, const PointCloud& cloud, std::span<const double> fields);

/// Binary PPM scatter plot of one value per point, coloured from blue (min) to red (max).
void write_scatter_ppm(const std::filesystem::path& path, const PointCloud& cloud, std::span<const double> values,
                       std::size_t size = 512);

}  // namespace cloudflow
