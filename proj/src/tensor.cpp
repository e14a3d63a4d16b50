#include "cloudflow/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

#include "cloudflow/error.hpp"

namespace cloudflow::ad {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapC = Eigen::Map<const RowMat<T>>;
template <typename T>
using Map = Eigen::Map<RowMat<T>>;
template <typename T>
using VecMapC = Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>;
template <typename T>
using VecMap = Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>;

template <typename T>
MapC<T> as_mat(const Tensor<T>& t) {
    return MapC<T>(t.values().data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

template <typename T>
Map<T> grad_mat(const Tensor<T>& t) {
    return Map<T>(t.grad().data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

template <typename T>
struct Vec64;
template <>
struct Vec64<float> {
    typedef float type __attribute__((vector_size(64)));
};
template <>
struct Vec64<double> {
    typedef double type __attribute__((vector_size(64)));
};

// Y[i, :] += X[i, :] * B for every row, B is K x O row-major. Each output element
// goes through the same operation sequence (its initial value, then one multiply-add
// per k in ascending order) whatever its row index or the row count, so results do
// not depend on batching or on the order of points. Blocking only keeps a 4-row
// by two-vector tile of accumulators in registers.
template <typename T>
void row_gemm(const T* X, std::size_t R, std::size_t K, const T* B, std::size_t O, T* Y) {
    constexpr std::size_t RB = 8, JB = 128 / sizeof(T);
    auto simple = [&](std::size_t i, std::size_t j0) {
        T* y = Y + i * O;
        const T* x = X + i * K;
        for (std::size_t k = 0; k < K; ++k) {
            const T a = x[k];
            const T* b = B + k * O;
            for (std::size_t j = j0; j < O; ++j) y[j] = std::fma(a, b[j], y[j]);
        }
    };
    using V = typename Vec64<T>::type;
    constexpr std::size_t W = 64 / sizeof(T);
    std::size_t i = 0;
    for (; i + RB <= R; i += RB) {
        std::size_t j = 0;
        for (; j + JB <= O; j += JB) {
            V acc[RB][2];
            for (std::size_t r = 0; r < RB; ++r) {
                std::memcpy(&acc[r][0], Y + (i + r) * O + j, sizeof(V));
                std::memcpy(&acc[r][1], Y + (i + r) * O + j + W, sizeof(V));
            }
            for (std::size_t k = 0; k < K; ++k) {
                V b0, b1;
                std::memcpy(&b0, B + k * O + j, sizeof(V));
                std::memcpy(&b1, B + k * O + j + W, sizeof(V));
                for (std::size_t r = 0; r < RB; ++r) {
                    const T a = X[(i + r) * K + k];
                    acc[r][0] += a * b0;
                    acc[r][1] += a * b1;
                }
            }
            for (std::size_t r = 0; r < RB; ++r) {
                std::memcpy(Y + (i + r) * O + j, &acc[r][0], sizeof(V));
                std::memcpy(Y + (i + r) * O + j + W, &acc[r][1], sizeof(V));
            }
        }
        if (j < O)
            for (std::size_t r = 0; r < RB; ++r) simple(i + r, j);
    }
    for (; i < R; ++i) simple(i, 0);
}

template <typename T>
std::vector<T> transposed(const T* A, std::size_t rows, std::size_t cols) {
    constexpr std::size_t B = 16;
    std::vector<T> t(rows * cols);
    for (std::size_t r0 = 0; r0 < rows; r0 += B)
        for (std::size_t c0 = 0; c0 < cols; c0 += B) {
            const auto r1 = std::min(rows, r0 + B), c1 = std::min(cols, c0 + B);
            for (std::size_t c = c0; c < c1; ++c)
                for (std::size_t r = r0; r < r1; ++r) t[c * rows + r] = A[r * cols + c];
        }
    return t;
}

[[noreturn]] void dim_error(const char* op, const Shape& a, const Shape& b) {
    throw DimensionError(std::string(op) + ": incompatible shapes " + shape_string(a) + " and " + shape_string(b));
}

void require_2d(const char* op, const Shape& s) {
    if (s.size() != 2) throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_string(s));
}

template <typename T>
bool tracking(const Tape<T>& tape, std::initializer_list<const Tensor<T>*> xs) {
    if (!tape.enabled()) return false;
    for (auto* x : xs)
        if (x->requires_grad()) return true;
    return false;
}

template <typename T>
void check_finite([[maybe_unused]] const char* op, [[maybe_unused]] const Tensor<T>& t) {
#ifndef NDEBUG
    for (T v : t.values())
        if (!std::isfinite(v)) throw NumericalError(std::string(op) + ": non-finite output");
#endif
}

std::uint64_t fnv_step(std::uint64_t h, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
        h ^= (v >> (8 * i)) & 0xffu;
        h *= 1099511628211ull;
    }
    return h;
}

}  // namespace

std::string shape_string(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << ']';
    return os.str();
}

std::size_t shape_numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

// ---------------------------------------------------------------------------
// Tensor

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values, bool requires_grad)
    : shape_(std::move(shape)), s_(std::make_shared<Storage>()) {
    if (shape_numel(shape_) != values.size())
        throw DimensionError("tensor: shape " + shape_string(shape_) + " does not hold " +
                             std::to_string(values.size()) + " values");
    s_->value.assign(values.begin(), values.end());
    set_requires_grad(requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
    Tensor t;
    t.s_ = std::make_shared<Storage>();
    t.s_->value.assign(shape_numel(shape), T(0));
    t.shape_ = std::move(shape);
    t.set_requires_grad(requires_grad);
    return t;
}

template <typename T>
Tensor<T> Tensor<T>::uninitialized(Shape shape, bool requires_grad) {
    Tensor t;
    t.s_ = std::make_shared<Storage>();
    t.s_->value.resize(shape_numel(shape));
    t.shape_ = std::move(shape);
    t.set_requires_grad(requires_grad);
    return t;
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T v, bool requires_grad) {
    return Tensor(Shape{}, std::vector<T>{v}, requires_grad);
}

template <typename T>
std::size_t Tensor<T>::rows() const {
    return shape_.size() >= 2 ? shape_[0] : 1;
}

template <typename T>
std::size_t Tensor<T>::cols() const {
    const auto r = rows();
    return r == 0 ? 0 : numel() / r;
}

template <typename T>
void Tensor<T>::set_requires_grad(bool on) {
    s_->requires_grad = on;
    if (on)
        s_->grad.assign(s_->value.size(), T(0));
    else
        s_->grad.clear();
}

template <typename T>
void Tensor<T>::zero_grad() {
    std::fill(s_->grad.begin(), s_->grad.end(), T(0));
}

template <typename T>
T Tensor<T>::item() const {
    if (numel() != 1) throw DimensionError("item: tensor " + shape_string(shape_) + " is not a scalar");
    return s_->value[0];
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
    Tensor out(shape_, std::vector<T>(s_->value.begin(), s_->value.end()), false);
    if (s_->requires_grad) {
        out.s_->requires_grad = true;
        out.s_->grad = s_->grad;
    }
    return out;
}

template <typename T>
Tensor<T> Tensor<T>::reshaped(Shape shape) const {
    if (shape_numel(shape) != numel()) dim_error("reshape", shape_, shape);
    Tensor out = *this;
    out.shape_ = std::move(shape);
    return out;
}

// ---------------------------------------------------------------------------
// Tape

template <typename T>
void Tape<T>::record(std::string op, std::function<void()> vjp) {
    if (!enabled_) return;
    if (replayed_) throw ContractError("tape: cannot record after backward");
    entries_.push_back(Entry{std::move(op), std::move(vjp)});
}

template <typename T>
void Tape<T>::backward(Tensor<T>& loss) {
    if (loss.numel() != 1) throw DimensionError("backward: root must be a scalar, got " + shape_string(loss.shape()));
    if (!loss.requires_grad()) throw ContractError("backward: root does not depend on any differentiable tensor");
    if (replayed_) throw ContractError("backward: tape already replayed");
    replayed_ = true;
    loss.grad()[0] += T(1);
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->vjp();
}

template <typename T>
void Tape<T>::mix_signature(std::uint64_t v) {
    signature_ = fnv_step(signature_, v);
}

// ---------------------------------------------------------------------------
// Operations

template <typename T>
Tensor<T> affine(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& W, const Tensor<T>& b) {
    require_2d("affine", x.shape());
    require_2d("affine", W.shape());
    if (x.shape()[1] != W.shape()[1]) dim_error("affine", x.shape(), W.shape());
    if (b.numel() != W.shape()[0]) dim_error("affine", W.shape(), b.shape());
    const auto R = x.shape()[0], O = W.shape()[0];
    const bool track = tracking(tape, {&x, &W, &b});
    Tensor<T> out = Tensor<T>::uninitialized({R, O}, track);
    const auto K = W.shape()[1];
    auto y = out.values();
    for (std::size_t i = 0; i < R; ++i) std::copy(b.values().begin(), b.values().end(), y.begin() + i * O);
    if (R < 4) {
        // Same per-element FMA sequence as row_gemm, without paying for the transpose.
        const T* xv = x.values().data();
        const T* w = W.values().data();
        // Eight outputs at a time give independent chains to overlap.
        constexpr std::size_t OB = 8;
        for (std::size_t i = 0; i < R; ++i) {
            const T* xr = xv + i * K;
            T* yr = y.data() + i * O;
            std::size_t o = 0;
            for (; o + OB <= O; o += OB) {
                T acc[OB];
                for (std::size_t j = 0; j < OB; ++j) acc[j] = yr[o + j];
                for (std::size_t k = 0; k < K; ++k)
                    for (std::size_t j = 0; j < OB; ++j) acc[j] = std::fma(xr[k], w[(o + j) * K + k], acc[j]);
                for (std::size_t j = 0; j < OB; ++j) yr[o + j] = acc[j];
            }
            for (; o < O; ++o) {
                T acc = yr[o];
                for (std::size_t k = 0; k < K; ++k) acc = std::fma(xr[k], w[o * K + k], acc);
                yr[o] = acc;
            }
        }
    } else {
        const auto Wt = transposed(W.values().data(), O, K);
        row_gemm(x.values().data(), R, K, Wt.data(), O, y.data());
    }
    check_finite("affine", out);
    if (track) {
        tape.record("affine", [x, W, b, out]() mutable {
            auto dY = MapC<T>(out.grad().data(), out.rows(), out.cols());
            if (x.requires_grad())
                row_gemm(out.grad().data(), out.rows(), out.cols(), W.values().data(), x.cols(), x.grad().data());
            if (W.requires_grad()) grad_mat(W).noalias() += dY.transpose() * as_mat(x);
            if (b.requires_grad()) VecMap<T>(b.grad().data(), b.numel()) += dY.colwise().sum();
        });
    }
    return out;
}

template <typename T>
Tensor<T> relu(Tape<T>& tape, const Tensor<T>& x) {
    const bool track = tracking(tape, {&x});
    Tensor<T> out = Tensor<T>::uninitialized(x.shape(), track);
    auto in = x.values();
    auto o = out.values();
    // Order-free hash of the active set so the loop vectorises.
    std::uint64_t sig = 0;
    for (std::size_t i = 0; i < in.size(); ++i) o[i] = in[i] > T(0) ? in[i] : T(0);
    for (std::size_t i = 0; i < in.size(); ++i)
        sig ^= (std::uint64_t{0} - (o[i] > T(0))) & ((i + 1) * 0x9e3779b97f4a7c15ull);
    tape.mix_signature(sig);
    if (track) {
        tape.record("relu", [x, out]() mutable {
            if (!x.requires_grad()) return;
            auto in = x.values();
            auto g = out.grad();
            auto dx = x.grad();
            for (std::size_t i = 0; i < in.size(); ++i)
                if (in[i] > T(0)) dx[i] += g[i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> sigmoid(Tape<T>& tape, const Tensor<T>& x) {
    const bool track = tracking(tape, {&x});
    Tensor<T> out = Tensor<T>::uninitialized(x.shape(), track);
    auto in = x.values();
    auto o = out.values();
    for (std::size_t i = 0; i < in.size(); ++i) {
        const T v = in[i];
        if (v >= T(0)) {
            o[i] = T(1) / (T(1) + std::exp(-v));
        } else {
            const T e = std::exp(v);
            o[i] = e / (T(1) + e);
        }
    }
    if (track) {
        tape.record("sigmoid", [x, out]() mutable {
            if (!x.requires_grad()) return;
            auto s = out.values();
            auto g = out.grad();
            auto dx = x.grad();
            for (std::size_t i = 0; i < s.size(); ++i) dx[i] += g[i] * s[i] * (T(1) - s[i]);
        });
    }
    return out;
}

template <typename T>
Tensor<T> square(Tape<T>& tape, const Tensor<T>& x) {
    const bool track = tracking(tape, {&x});
    Tensor<T> out = Tensor<T>::uninitialized(x.shape(), track);
    auto in = x.values();
    auto o = out.values();
    for (std::size_t i = 0; i < in.size(); ++i) o[i] = in[i] * in[i];
    if (track) {
        tape.record("square", [x, out]() mutable {
            if (!x.requires_grad()) return;
            auto in = x.values();
            auto g = out.grad();
            auto dx = x.grad();
            for (std::size_t i = 0; i < in.size(); ++i) dx[i] += T(2) * in[i] * g[i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> batch_norm(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     Tensor<T>& running_mean, Tensor<T>& running_var, Mode mode, const BatchNormOptions& opt) {
    require_2d("batch_norm", x.shape());
    const auto R = x.shape()[0], C = x.shape()[1];
    if (gamma.numel() != C || beta.numel() != C || running_mean.numel() != C || running_var.numel() != C)
        dim_error("batch_norm", x.shape(), gamma.shape());
    if (mode == Mode::train && R < 2)
        throw NumericalError("batch_norm: degenerate batch, train mode needs at least 2 rows, got " +
                             std::to_string(R));

    const bool track = tracking(tape, {&x, &gamma, &beta});
    Tensor<T> out = Tensor<T>::uninitialized(x.shape(), track);
    auto X = as_mat(x);
    std::vector<T> mean(C), inv_std(C);
    if (mode == Mode::train) {
        const auto m = X.colwise().mean();
        for (std::size_t c = 0; c < C; ++c) mean[c] = m(c);
        std::vector<T> var(C, T(0));
        for (std::size_t r = 0; r < R; ++r)
            for (std::size_t c = 0; c < C; ++c) {
                const T d = X(r, c) - mean[c];
                var[c] += d * d;
            }
        const T mom = static_cast<T>(opt.momentum);
        auto rm = running_mean.values();
        auto rv = running_var.values();
        for (std::size_t c = 0; c < C; ++c) {
            const T biased = var[c] / static_cast<T>(R);
            inv_std[c] = T(1) / std::sqrt(biased + static_cast<T>(opt.eps));
            rm[c] = mom * rm[c] + (T(1) - mom) * mean[c];
            rv[c] = mom * rv[c] + (T(1) - mom) * var[c] / static_cast<T>(R - 1);
        }
    } else {
        auto rm = running_mean.values();
        auto rv = running_var.values();
        for (std::size_t c = 0; c < C; ++c) {
            mean[c] = rm[c];
            inv_std[c] = T(1) / std::sqrt(rv[c] + static_cast<T>(opt.eps));
        }
    }

    // xhat is kept for the backward pass.
    Tensor<T> xhat = track ? Tensor<T>::uninitialized(x.shape()) : Tensor<T>();
    auto o = out.values();
    auto gm = gamma.values();
    auto bt = beta.values();
    const T* xv = x.values().data();
    for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < C; ++c) o[r * C + c] = (xv[r * C + c] - mean[c]) * inv_std[c];
    if (track) std::copy(o.begin(), o.end(), xhat.values().begin());
    for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < C; ++c) o[r * C + c] = gm[c] * o[r * C + c] + bt[c];

    if (track) {
        tape.record("batch_norm", [x, gamma, beta, out, xhat, inv_std, mode, R, C]() mutable {
            auto g = out.grad();
            auto xh = xhat.values();
            std::vector<T> sum_g(C, T(0)), sum_gx(C, T(0));
            for (std::size_t r = 0; r < R; ++r)
                for (std::size_t c = 0; c < C; ++c) {
                    sum_g[c] += g[r * C + c];
                    sum_gx[c] += g[r * C + c] * xh[r * C + c];
                }
            if (gamma.requires_grad()) {
                auto dg = gamma.grad();
                for (std::size_t c = 0; c < C; ++c) dg[c] += sum_gx[c];
            }
            if (beta.requires_grad()) {
                auto db = beta.grad();
                for (std::size_t c = 0; c < C; ++c) db[c] += sum_g[c];
            }
            if (!x.requires_grad()) return;
            auto dx = x.grad();
            auto gm = gamma.values();
            if (mode == Mode::infer) {
                for (std::size_t r = 0; r < R; ++r)
                    for (std::size_t c = 0; c < C; ++c) dx[r * C + c] += g[r * C + c] * gm[c] * inv_std[c];
                return;
            }
            const T invR = T(1) / static_cast<T>(R);
            for (std::size_t r = 0; r < R; ++r)
                for (std::size_t c = 0; c < C; ++c) {
                    const std::size_t k = r * C + c;
                    dx[k] += gm[c] * inv_std[c] * (g[k] - invR * sum_g[c] - xh[k] * invR * sum_gx[c]);
                }
        });
    }
    return out;
}

template <typename T>
PoolResult<T> max_pool_points(Tape<T>& tape, const Tensor<T>& x, std::size_t segments) {
    require_2d("max_pool_points", x.shape());
    const auto R = x.shape()[0], F = x.shape()[1];
    if (segments == 0 || R == 0 || R % segments != 0)
        throw DimensionError("max_pool_points: cannot split " + shape_string(x.shape()) + " into " +
                             std::to_string(segments) + " non-empty point sets");
    const auto N = R / segments;
    const bool track = tracking(tape, {&x});
    PoolResult<T> res{Tensor<T>::uninitialized({segments, F}, track), std::vector<std::size_t>(segments * F, 0)};
    auto in = x.values();
    auto o = res.values.values();
    std::uint64_t sig = 0;
    for (std::size_t s = 0; s < segments; ++s) {
        const T* base = in.data() + s * N * F;
        T* v = o.data() + s * F;
        std::size_t* best = res.argmax.data() + s * F;
        std::copy_n(base, F, v);
        // Row-major sweep; the strict comparison keeps the lowest index on ties.
        for (std::size_t n = 1; n < N; ++n)
            for (std::size_t f = 0; f < F; ++f) {
                const bool up = base[n * F + f] > v[f];
                v[f] = up ? base[n * F + f] : v[f];
                best[f] = up ? n : best[f];
            }
        for (std::size_t f = 0; f < F; ++f) sig = sig * 1099511628211ull + best[f];
    }
    tape.mix_signature(sig);
    if (track) {
        tape.record("max_pool_points", [x, out = res.values, idx = res.argmax, N, F, segments]() mutable {
            if (!x.requires_grad()) return;
            auto g = out.grad();
            auto dx = x.grad();
            for (std::size_t s = 0; s < segments; ++s)
                for (std::size_t f = 0; f < F; ++f) dx[(s * N + idx[s * F + f]) * F + f] += g[s * F + f];
        });
    }
    return res;
}

template <typename T>
Tensor<T> transform_points(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& transforms) {
    require_2d("transform_points", x.shape());
    require_2d("transform_points", transforms.shape());
    const auto R = x.shape()[0], K = x.shape()[1], S = transforms.shape()[0];
    if (transforms.shape()[1] != K * K || S == 0 || R % S != 0) dim_error("transform_points", x.shape(), transforms.shape());
    const auto N = R / S;
    const bool track = tracking(tape, {&x, &transforms});
    Tensor<T> out = Tensor<T>::zeros({R, K}, track);
    for (std::size_t s = 0; s < S; ++s) {
        row_gemm(x.values().data() + s * N * K, N, K, transforms.values().data() + s * K * K, K,
                 out.values().data() + s * N * K);
    }
    if (track) {
        tape.record("transform_points", [x, transforms, out, S, N, K]() mutable {
            for (std::size_t s = 0; s < S; ++s) {
                MapC<T> dY(out.grad().data() + s * N * K, N, K);
                if (x.requires_grad()) {
                    const auto Tt = transposed(transforms.values().data() + s * K * K, K, K);
                    row_gemm(out.grad().data() + s * N * K, N, K, Tt.data(), K, x.grad().data() + s * N * K);
                }
                if (transforms.requires_grad()) {
                    MapC<T> Xs(x.values().data() + s * N * K, N, K);
                    Map<T>(transforms.grad().data() + s * K * K, K, K).noalias() += Xs.transpose() * dY;
                }
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> concat_global(Tape<T>& tape, const Tensor<T>& local, const Tensor<T>& global) {
    require_2d("concat_global", local.shape());
    require_2d("concat_global", global.shape());
    const auto R = local.shape()[0], L = local.shape()[1], S = global.shape()[0], G = global.shape()[1];
    if (S == 0 || R % S != 0) dim_error("concat_global", local.shape(), global.shape());
    const auto N = R / S;
    const bool track = tracking(tape, {&local, &global});
    Tensor<T> out = Tensor<T>::uninitialized({R, L + G}, track);
    auto lo = local.values();
    auto gl = global.values();
    auto o = out.values();
    for (std::size_t r = 0; r < R; ++r) {
        std::copy_n(lo.data() + r * L, L, o.data() + r * (L + G));
        std::copy_n(gl.data() + (r / N) * G, G, o.data() + r * (L + G) + L);
    }
    if (track) {
        tape.record("concat_global", [local, global, out, R, L, G, N]() mutable {
            auto g = out.grad();
            if (local.requires_grad()) {
                auto dl = local.grad();
                for (std::size_t r = 0; r < R; ++r)
                    for (std::size_t c = 0; c < L; ++c) dl[r * L + c] += g[r * (L + G) + c];
            }
            if (global.requires_grad()) {
                auto dg = global.grad();
                for (std::size_t r = 0; r < R; ++r)
                    for (std::size_t c = 0; c < G; ++c) dg[(r / N) * G + c] += g[r * (L + G) + L + c];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> mse_loss(Tape<T>& tape, const Tensor<T>& pred, const Tensor<T>& target) {
    if (pred.shape() != target.shape()) dim_error("mse_loss", pred.shape(), target.shape());
    const bool track = tracking(tape, {&pred});
    auto p = pred.values();
    auto t = target.values();
    T acc = T(0);
    for (std::size_t i = 0; i < p.size(); ++i) {
        const T d = p[i] - t[i];
        acc += d * d;
    }
    const T n = static_cast<T>(p.size());
    Tensor<T> out = Tensor<T>::scalar(acc / n, track);
    if (track) {
        tape.record("mse_loss", [pred, target, out, n]() mutable {
            const T g = out.grad()[0] * T(2) / n;
            auto p = pred.values();
            auto t = target.values();
            auto dp = pred.grad();
            for (std::size_t i = 0; i < p.size(); ++i) dp[i] += g * (p[i] - t[i]);
        });
    }
    return out;
}

template <typename T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& x) {
    const bool track = tracking(tape, {&x});
    T acc = T(0);
    for (T v : x.values()) acc += v;
    Tensor<T> out = Tensor<T>::scalar(acc, track);
    if (track) {
        tape.record("sum", [x, out]() mutable {
            if (!x.requires_grad()) return;
            const T g = out.grad()[0];
            for (T& d : x.grad()) d += g;
        });
    }
    return out;
}

template <typename T>
Tensor<T> weighted_sum(Tape<T>& tape, const Tensor<T>& x, std::span<const T> w) {
    if (w.size() != x.numel())
        dim_error("weighted_sum", x.shape(), Shape{w.size()});
    const bool track = tracking(tape, {&x});
    T acc = T(0);
    auto v = x.values();
    for (std::size_t i = 0; i < v.size(); ++i) acc += w[i] * v[i];
    Tensor<T> out = Tensor<T>::scalar(acc, track);
    if (track) {
        tape.record("weighted_sum", [x, out, weights = std::vector<T>(w.begin(), w.end())]() mutable {
            if (!x.requires_grad()) return;
            const T g = out.grad()[0];
            auto dx = x.grad();
            for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g * weights[i];
        });
    }
    return out;
}

#define CLOUDFLOW_INSTANTIATE(T)                                                                              \
    template class Tensor<T>;                                                                                 \
    template class Tape<T>;                                                                                   \
    template Tensor<T> affine(Tape<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);              \
    template Tensor<T> relu(Tape<T>&, const Tensor<T>&);                                                      \
    template Tensor<T> sigmoid(Tape<T>&, const Tensor<T>&);                                                   \
    template Tensor<T> square(Tape<T>&, const Tensor<T>&);                                                    \
    template Tensor<T> batch_norm(Tape<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Tensor<T>&, \
                                  Tensor<T>&, Mode, const BatchNormOptions&);                                 \
    template PoolResult<T> max_pool_points(Tape<T>&, const Tensor<T>&, std::size_t);                         \
    template Tensor<T> transform_points(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                       \
    template Tensor<T> concat_global(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                          \
    template Tensor<T> mse_loss(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                               \
    template Tensor<T> sum(Tape<T>&, const Tensor<T>&);                                                       \
    template Tensor<T> weighted_sum(Tape<T>&, const Tensor<T>&, std::span<const T>);

CLOUDFLOW_INSTANTIATE(float)
CLOUDFLOW_INSTANTIATE(double)

#undef CLOUDFLOW_INSTANTIATE

}  // namespace cloudflow::ad
