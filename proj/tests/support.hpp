#pragma once

// Shared helpers for the test binaries: random generators and a central
// finite-difference gradient oracle.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "cloudflow/cloud.hpp"
#include "cloudflow/model.hpp"
#include "cloudflow/tensor.hpp"

namespace testing {

using cloudflow::ad::Shape;
using cloudflow::ad::Tape;
using cloudflow::ad::Tensor;

inline std::vector<double> uniform(std::size_t n, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> d(lo, hi);
    std::vector<double> v(n);
    for (auto& x : v) x = d(rng);
    return v;
}

inline Tensor<double> random_tensor(Shape shape, std::uint64_t seed, bool requires_grad = true, double lo = -1.0,
                                    double hi = 1.0) {
    const auto n = cloudflow::ad::shape_numel(shape);
    return Tensor<double>(std::move(shape), uniform(n, seed, lo, hi), requires_grad);
}

inline std::vector<std::size_t> random_permutation(std::size_t n, std::uint64_t seed) {
    std::vector<std::size_t> p(n);
    std::iota(p.begin(), p.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(p.begin(), p.end(), rng);
    return p;
}

/// Random 2-D cloud with coordinates in [-2, 2]^2, no geometry.
inline cloudflow::PointCloud random_cloud(std::size_t n, std::uint64_t seed, std::size_t dim = 2) {
    cloudflow::PointCloud c;
    c.dim = dim;
    c.coords = uniform(n * dim, seed, -2.0, 2.0);
    return c;
}

/// Moves a fresh model away from its symmetric initialisation: random batch-norm
/// statistics and affine terms, and non-zero T-Net output weights.
template <typename T>
void perturb(cloudflow::Model<T>& m, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (auto& e : m.params.entries()) {
        auto v = e.tensor.values();
        const bool var = e.name.ends_with("running_var");
        const bool gamma = e.name.ends_with("bn.gamma");
        const bool mean = e.name.ends_with("running_mean") || e.name.ends_with("bn.beta");
        const bool tout = e.name.ends_with(".out.weight");
        for (auto& x : v) {
            if (var) x = static_cast<T>(0.5 + 0.5 * (u(rng) + 1.0));
            else if (gamma) x = static_cast<T>(1.0 + 0.3 * u(rng));
            else if (mean) x = static_cast<T>(0.2 * u(rng));
            else if (tout) x = static_cast<T>(0.05 * u(rng));
        }
    }
}

/// Fresh directory under the system temp dir, removed on destruction.
struct TempDir {
    std::filesystem::path path;
    explicit TempDir(const std::string& tag) {
        static std::uint64_t counter = 0;
        std::random_device rd;
        path = std::filesystem::temp_directory_path() /
               ("cloudflow_" + tag + "_" + std::to_string(rd()) + "_" + std::to_string(counter++));
        std::filesystem::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    std::filesystem::path operator/(const std::string& s) const { return path / s; }
};

inline double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8}); }

struct FdResult {
    double max_rel = 0.0;
    std::size_t checked = 0;
    std::size_t retried = 0;
    std::size_t worst_leaf = 0;
    double worst_analytic = 0.0, worst_fd = 0.0;
};

/// Compares tape gradients of a scalar loss with central differences for every
/// element of every leaf. `loss` must build the loss from the leaves on the given
/// tape. The step is h = scale * max(1, |x|); with `richardson` the central
/// differences at h and h/2 are combined to cancel the h^2 term. When an evaluation
/// lands on a different piecewise branch the step is shrunk, up to four times.
inline FdResult fd_check(const std::vector<Tensor<double>*>& leaves,
                         const std::function<Tensor<double>(Tape<double>&)>& loss, double scale = 1e-5,
                         bool richardson = true) {
    for (auto* l : leaves) l->zero_grad();
    {
        Tape<double> tape;
        auto L = loss(tape);
        tape.backward(L);
    }
    std::vector<std::vector<double>> analytic;
    for (auto* l : leaves) analytic.emplace_back(l->grad().begin(), l->grad().end());

    auto eval = [&](std::uint64_t& sig) {
        Tape<double> tape(false);
        const double v = loss(tape).item();
        sig = tape.branch_signature();
        return v;
    };
    std::uint64_t base_sig = 0;
    eval(base_sig);

    FdResult r;
    for (std::size_t li = 0; li < leaves.size(); ++li) {
        auto vals = leaves[li]->values();
        for (std::size_t i = 0; i < vals.size(); ++i) {
            const double x0 = vals[i];
            double h = scale * std::max(1.0, std::abs(x0));
            double fd = 0.0;
            for (int attempt = 0; attempt < 5; ++attempt) {
                bool same = true;
                auto central = [&](double step) {
                    std::uint64_t sp = 0, sm = 0;
                    vals[i] = x0 + step;
                    const double fp = eval(sp);
                    vals[i] = x0 - step;
                    const double fm = eval(sm);
                    vals[i] = x0;
                    same = same && sp == base_sig && sm == base_sig;
                    return (fp - fm) / (2.0 * step);
                };
                const double d1 = central(h);
                fd = richardson ? (4.0 * central(0.5 * h) - d1) / 3.0 : d1;
                if (same || attempt == 4) break;
                ++r.retried;
                h *= 0.1;
            }
            if (const double e = rel_err(analytic[li][i], fd); e > r.max_rel) {
                r.max_rel = e;
                r.worst_leaf = li;
                r.worst_analytic = analytic[li][i];
                r.worst_fd = fd;
            }
            ++r.checked;
        }
    }
    return r;
}

}  // namespace testing
