#include "cloudflow/derivatives.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "cloudflow/error.hpp"

namespace cloudflow {

namespace {

ad::Tensor<double> coords_tensor(const PointCloud& cloud, std::size_t width, double shift_x, double shift_y) {
    const std::size_t n = cloud.size();
    std::vector<double> data(n * width, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t k = 0; k < std::min(width, cloud.dim); ++k) data[i * width + k] = cloud.coords[i * cloud.dim + k];
        data[i * width] += shift_x;
        data[i * width + 1] += shift_y;
    }
    return ad::Tensor<double>({n, width}, std::move(data), true);
}

// Exact gradient of sum_j out[j, c] with respect to x and y of every point.
// Fills grad (N x n_out x 2) and optionally the outputs.
void summed_gradients(const InputFunction& f, const PointCloud& cloud, double sx, double sy,
                      std::vector<double>& grad, std::vector<double>* values, std::size_t& n_out) {
    const std::size_t n = cloud.size();
    n_out = 0;
    for (std::size_t c = 0;; ++c) {
        ad::Tape<double> tape;
        auto in = coords_tensor(cloud, f.input_dim, sx, sy);
        auto out = f.eval(tape, in);
        if (out.ndim() != 2 || out.rows() != n)
            throw DimensionError("input_derivatives: map returned " + ad::shape_string(out.shape()) + " for " +
                                 std::to_string(n) + " points");
        if (c == 0) {
            n_out = out.cols();
            grad.assign(n * n_out * 2, 0.0);
            if (values) values->assign(out.values().begin(), out.values().end());
        }
        if (!out.requires_grad()) return;  // constant map: all derivatives vanish
        std::vector<double> w(out.numel(), 0.0);
        for (std::size_t i = 0; i < n; ++i) w[i * n_out + c] = 1.0;
        auto s = ad::weighted_sum(tape, out, std::span<const double>(w));
        tape.backward(s);
        auto g = in.grad();
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t k = 0; k < 2; ++k) grad[(i * n_out + c) * 2 + k] = g[i * f.input_dim + k];
        if (c + 1 == n_out) return;
    }
}

}  // namespace

InputFunction model_function(Model<double>& model, ad::Mode mode) {
    InputFunction f;
    f.input_dim = model.config.input_dim;
    f.frozen_statistics = mode == ad::Mode::infer;
    f.eval = [&model, mode](ad::Tape<double>& tape, const ad::Tensor<double>& x) {
        return forward(model, tape, x, 1, mode).predictions;
    };
    return f;
}

double median_spacing(const PointCloud& cloud) {
    const std::size_t n = cloud.size();
    if (n < 2) return 1.0;
    std::vector<double> nn(n, std::numeric_limits<double>::infinity());
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            double d2 = 0.0;
            for (std::size_t k = 0; k < cloud.dim; ++k) {
                const double d = cloud.coords[i * cloud.dim + k] - cloud.coords[j * cloud.dim + k];
                d2 += d * d;
            }
            nn[i] = std::min(nn[i], d2);
            nn[j] = std::min(nn[j], d2);
        }
    std::nth_element(nn.begin(), nn.begin() + n / 2, nn.end());
    return std::sqrt(nn[n / 2]);
}

InputDerivatives input_derivatives(const InputFunction& f, const PointCloud& cloud, int order) {
    if (order != 1 && order != 2) throw ContractError("input_derivatives: order must be 1 or 2");
    if (!f.frozen_statistics)
        throw ContractError("input_derivatives: batch-norm statistics must be frozen (infer mode)");
    if (f.input_dim < 2) throw ContractError("input_derivatives: need at least two input coordinates");
    if (cloud.size() == 0) throw DataError("input_derivatives: empty cloud");

    InputDerivatives r;
    r.n_points = cloud.size();
    summed_gradients(f, cloud, 0.0, 0.0, r.first, &r.values, r.n_out);
    if (order == 1) return r;

    r.step = 1e-4 * median_spacing(cloud);
    const double h = r.step;
    r.second.assign(r.first.size(), 0.0);
    std::size_t n_out = 0;
    std::vector<double> gp, gm;
    for (std::size_t k = 0; k < 2; ++k) {
        const double sx = k == 0 ? h : 0.0, sy = k == 1 ? h : 0.0;
        summed_gradients(f, cloud, sx, sy, gp, nullptr, n_out);
        summed_gradients(f, cloud, -sx, -sy, gm, nullptr, n_out);
        for (std::size_t i = 0; i < r.n_points; ++i)
            for (std::size_t c = 0; c < r.n_out; ++c) {
                const std::size_t at = (i * r.n_out + c) * 2 + k;
                r.second[at] = (gp[at] - gm[at]) / (2.0 * h);
            }
    }
    return r;
}

}  // namespace cloudflow
