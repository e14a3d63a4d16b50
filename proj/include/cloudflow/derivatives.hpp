#pragma once

// Derivatives of network outputs with respect to the input coordinates.
//
// The first derivative reported for point i and output channel c is
//     d/dx_i  sum_j out[j, c]
// i.e. one reverse pass seeded with ones on channel c. For a pointwise map it is
// the ordinary derivative of out[i, c]; for the point network it additionally
// carries the influence of point i on every other output through the global
// feature, which is what makes critical points stand out.
//
// Second derivatives are central differences of those exact gradients under a
// rigid shift of the whole cloud along x (resp. y) by +-h, which equals the
// row sum of the Hessian of sum_j out[j, c]. h = 1e-4 * median nearest-neighbour
// spacing of the cloud.

#include <functional>
#include <vector>

#include "cloudflow/cloud.hpp"
#include "cloudflow/model.hpp"
#include "cloudflow/tensor.hpp"

namespace cloudflow {

struct InputFunction {
    std::function<ad::Tensor<double>(ad::Tape<double>&, const ad::Tensor<double>&)> eval;
    std::size_t input_dim = 2;
    /// False when the map normalises with batch statistics; derivatives are then refused.
    bool frozen_statistics = true;
};

/// Wraps a model. Only infer mode yields a map with frozen statistics.
InputFunction model_function(Model<double>& model, ad::Mode mode = ad::Mode::infer);

struct InputDerivatives {
    std::size_t n_points = 0;
    std::size_t n_out = 0;
    double step = 0.0;             // rigid shift used for second derivatives
    std::vector<double> values;    // N x n_out
    std::vector<double> first;     // N x n_out x 2: d/dx, d/dy
    std::vector<double> second;    // N x n_out x 2: d2/dx2, d2/dy2; empty for order 1

    double value(std::size_t i, std::size_t c) const { return values[i * n_out + c]; }
    double d1(std::size_t i, std::size_t c, std::size_t k) const { return first[(i * n_out + c) * 2 + k]; }
    double d2(std::size_t i, std::size_t c, std::size_t k) const { return second[(i * n_out + c) * 2 + k]; }
};

/// order must be 1 or 2. Throws ContractError for maps with live batch statistics.
InputDerivatives input_derivatives(const InputFunction& f, const PointCloud& cloud, int order);

/// Median distance from each point to its nearest neighbour (brute force).
double median_spacing(const PointCloud& cloud);

}  // namespace cloudflow
