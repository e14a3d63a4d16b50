#include "doctest.h"

#include <cmath>
#include <limits>

#include "cloudflow/derivatives.hpp"
#include "cloudflow/error.hpp"
#include "cloudflow/tensor.hpp"
#include "support.hpp"

using namespace cloudflow;
using ad::Mode;
using ad::Tape;
using ad::Tensor;
using testing::fd_check;
using testing::random_tensor;

namespace {

Tensor<double> mat(std::size_t r, std::size_t c, std::vector<double> v, bool grad = false) {
    return Tensor<double>({r, c}, std::move(v), grad);
}

// Random weights so every output element feeds the scalar loss with a different factor.
Tensor<double> probe(Tape<double>& tape, const Tensor<double>& y, std::uint64_t seed) {
    const auto w = testing::uniform(y.numel(), seed, 0.5, 1.5);
    return ad::weighted_sum(tape, y, std::span<const double>(w));
}

}  // namespace

TEST_CASE("affine identity and hand-computed value") {
    Tape<double> tape(false);
    auto x = random_tensor({4, 3}, 1, false);
    auto I = mat(3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    auto z = Tensor<double>({3}, {0, 0, 0});
    auto y = ad::affine(tape, x, I, z);
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y.values()[i] == x.values()[i]);

    auto y2 = ad::affine(tape, mat(1, 2, {1, 2}), mat(1, 2, {3, 4}), Tensor<double>({1}, {5}));
    CHECK(y2.item() == 16.0);
}

TEST_CASE("affine shape mismatch names both shapes") {
    Tape<double> tape;
    auto x = random_tensor({2, 3}, 1);
    auto W = random_tensor({4, 5}, 2);
    auto b = random_tensor({4}, 3);
    try {
        ad::affine(tape, x, W, b);
        FAIL("expected a dimension error");
    } catch (const DimensionError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("[2x3]") != std::string::npos);
        CHECK(msg.find("[4x5]") != std::string::npos);
    }
}

TEST_CASE("affine rows are bit-identical whatever the batch size or position") {
    Tape<double> tape(false);
    const std::size_t R = 11, K = 37, O = 41;
    auto x = random_tensor({R, K}, 21);
    auto W = random_tensor({O, K}, 22);
    auto b = random_tensor({O}, 23);
    const auto full = ad::affine(tape, x, W, b);
    for (std::size_t start = 0; start < R; ++start)
        for (std::size_t len : {std::size_t{1}, std::size_t{3}, std::size_t{5}, std::size_t{9}}) {
            if (start + len > R) continue;
            auto xv = x.values().subspan(start * K, len * K);
            const auto part = ad::affine(tape, Tensor<double>({len, K}, {xv.begin(), xv.end()}), W, b);
            std::size_t diff = 0;
            for (std::size_t i = 0; i < len * O; ++i) diff += part.values()[i] != full.values()[start * O + i];
            CHECK(diff == 0);
        }
}

TEST_CASE("affine gradients match central differences") {
    auto x = random_tensor({3, 4}, 11);
    auto W = random_tensor({5, 4}, 12);
    auto b = random_tensor({5}, 13);
    auto r = fd_check({&x, &W, &b}, [&](Tape<double>& t) { return probe(t, ad::affine(t, x, W, b), 7); });
    CHECK(r.max_rel < 1e-6);
    CHECK(r.checked == 12 + 20 + 5);
}

TEST_CASE("relu values, zero gradient region and finite differences") {
    Tape<double> tape;
    auto x = Tensor<double>({3}, {-1, 0, 2}, true);
    auto y = ad::relu(tape, x);
    CHECK(y.values()[0] == 0.0);
    CHECK(y.values()[1] == 0.0);
    CHECK(y.values()[2] == 2.0);

    auto neg = random_tensor({3, 3}, 5, true, -2.0, -0.1);
    Tape<double> t2;
    auto s = ad::sum(t2, ad::relu(t2, neg));
    CHECK(s.item() == 0.0);
    t2.backward(s);
    for (double g : neg.grad()) CHECK(g == 0.0);

    // Mixed signs kept away from the kink.
    auto v = testing::uniform(20, 9, 0.1, 1.0);
    for (std::size_t i = 0; i < v.size(); i += 2) v[i] = -v[i];
    auto m = Tensor<double>({4, 5}, v, true);
    CHECK(fd_check({&m}, [&](Tape<double>& t) { return probe(t, ad::relu(t, m), 3); }).max_rel < 1e-6);
}

TEST_CASE("sigmoid is stable, bounded and has derivative 1/4 at zero") {
    Tape<double> tape;
    auto x = Tensor<double>({5}, {0.0, 800.0, -800.0, 30.0, -30.0}, true);
    auto y = ad::sigmoid(tape, x);
    CHECK(y.values()[0] == 0.5);
    CHECK(y.values()[1] == 1.0);
    CHECK(y.values()[2] >= 0.0);
    CHECK(std::isfinite(y.values()[2]));
    CHECK(y.values()[4] > 0.0);
    CHECK(y.values()[3] < 1.0);

    auto z = Tensor<double>({1}, {0.0}, true);
    Tape<double> t2;
    auto s = ad::sum(t2, ad::sigmoid(t2, z));
    t2.backward(s);
    CHECK(z.grad()[0] == 0.25);

    auto r = random_tensor({3, 4}, 21, true, -4, 4);
    CHECK(fd_check({&r}, [&](Tape<double>& t) { return probe(t, ad::sigmoid(t, r), 2); }).max_rel < 1e-6);
}

TEST_CASE("batch norm train mode standardises each channel") {
    Tape<double> tape(false);
    auto x = random_tensor({50, 4}, 31, false, -3, 5);
    auto gamma = Tensor<double>({4}, {1, 1, 1, 1});
    auto beta = Tensor<double>({4}, {0, 0, 0, 0});
    auto rm = Tensor<double>({4}, {0, 0, 0, 0});
    auto rv = Tensor<double>({4}, {1, 1, 1, 1});
    ad::BatchNormOptions opt;
    opt.eps = 0.0;
    auto y = ad::batch_norm(tape, x, gamma, beta, rm, rv, Mode::train, opt);
    for (std::size_t c = 0; c < 4; ++c) {
        double mean = 0, var = 0;
        for (std::size_t r = 0; r < 50; ++r) mean += y.at(r, c);
        mean /= 50;
        for (std::size_t r = 0; r < 50; ++r) var += (y.at(r, c) - mean) * (y.at(r, c) - mean);
        var /= 50;
        CHECK(std::abs(mean) < 1e-10);
        CHECK(std::abs(var - 1.0) < 1e-10);
    }
}

TEST_CASE("batch norm running statistics follow the moving average") {
    Tape<double> tape(false);
    auto x = mat(4, 1, {1, 2, 3, 6});
    auto gamma = Tensor<double>({1}, {1});
    auto beta = Tensor<double>({1}, {0});
    auto rm = Tensor<double>({1}, {0});
    auto rv = Tensor<double>({1}, {1});
    ad::batch_norm(tape, x, gamma, beta, rm, rv, Mode::train);
    // mean 3, unbiased variance 14/3
    CHECK(rm.values()[0] == doctest::Approx(0.9 * 0 + 0.1 * 3).epsilon(1e-14));
    CHECK(rv.values()[0] == doctest::Approx(0.9 * 1 + 0.1 * 14.0 / 3.0).epsilon(1e-14));
}

TEST_CASE("batch norm degenerate inputs") {
    Tape<double> tape(false);
    auto gamma = Tensor<double>({2}, {1, 1});
    auto beta = Tensor<double>({2}, {0, 0});
    auto rm = Tensor<double>({2}, {0, 0});
    auto rv = Tensor<double>({2}, {1, 1});

    auto constant = mat(3, 2, {7, 1, 7, 2, 7, 3});
    auto y = ad::batch_norm(tape, constant, gamma, beta, rm, rv, Mode::train);
    for (std::size_t r = 0; r < 3; ++r) CHECK(y.at(r, 0) == 0.0);

    auto single = mat(1, 2, {1, 2});
    CHECK_THROWS_AS(ad::batch_norm(tape, single, gamma, beta, rm, rv, Mode::train), NumericalError);

    auto rm0 = Tensor<double>({2}, {0, 0});
    auto rv1 = Tensor<double>({2}, {1, 1});
    auto x = random_tensor({5, 2}, 3, false);
    auto z = ad::batch_norm(tape, x, gamma, beta, rm0, rv1, Mode::infer);
    for (std::size_t i = 0; i < x.numel(); ++i)
        CHECK(z.values()[i] == doctest::Approx(x.values()[i] / std::sqrt(1.0 + 1e-5)).epsilon(1e-14));
    CHECK(std::abs(z.values()[0] - x.values()[0]) < 1e-5);
}

TEST_CASE("batch norm gradients in both modes") {
    auto x = random_tensor({6, 3}, 41, true, -2, 2);
    auto gamma = random_tensor({3}, 42, true, 0.5, 1.5);
    auto beta = random_tensor({3}, 43, true);
    auto rm = random_tensor({3}, 44, false);
    auto rv = random_tensor({3}, 45, false, 0.5, 2.0);
    for (Mode mode : {Mode::train, Mode::infer}) {
        auto r = fd_check({&x, &gamma, &beta}, [&](Tape<double>& t) {
            return probe(t, ad::batch_norm(t, x, gamma, beta, rm, rv, mode), 5);
        });
        CHECK(r.max_rel < 1e-6);
    }
}

TEST_CASE("max pool basics") {
    Tape<double> tape(false);
    auto one = mat(1, 3, {4, -1, 2});
    auto p = ad::max_pool_points(tape, one);
    CHECK(p.values.values()[0] == 4);
    CHECK(p.argmax == std::vector<std::size_t>{0, 0, 0});

    auto tie = mat(3, 2, {1, 5, 1, 5, 0, 5});
    auto q = ad::max_pool_points(tape, tie);
    CHECK(q.argmax == std::vector<std::size_t>{0, 0});

    auto empty = Tensor<double>::zeros({0, 3});
    CHECK_THROWS_AS(ad::max_pool_points(tape, empty), DimensionError);
}

TEST_CASE("max pool is invariant under row permutations") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Tape<double> tape(false);
        const std::size_t n = 1 + seed * 3, f = 7;
        auto x = random_tensor({n, f}, seed, false);
        const auto perm = testing::random_permutation(n, seed + 100);
        std::vector<double> pv(n * f);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t c = 0; c < f; ++c) pv[i * f + c] = x.at(perm[i], c);
        auto px = mat(n, f, pv);
        auto a = ad::max_pool_points(tape, x);
        auto b = ad::max_pool_points(tape, px);
        for (std::size_t c = 0; c < f; ++c) {
            CHECK(a.values.values()[c] == b.values.values()[c]);
            CHECK(perm[b.argmax[c]] == a.argmax[c]);
        }
    }
}

TEST_CASE("max pool routes gradient to argmax rows per segment") {
    auto x = random_tensor({8, 3}, 51, true);
    auto r = fd_check({&x}, [&](Tape<double>& t) { return probe(t, ad::max_pool_points(t, x, 2).values, 1); });
    CHECK(r.max_rel < 1e-6);
    std::size_t nonzero = 0;
    for (double g : x.grad()) nonzero += g != 0.0;
    CHECK(nonzero == 6);
}

TEST_CASE("segment ops gradients") {
    auto x = random_tensor({6, 3}, 61, true);
    auto T = random_tensor({2, 9}, 62, true);
    CHECK(fd_check({&x, &T}, [&](Tape<double>& t) { return probe(t, ad::transform_points(t, x, T), 4); }).max_rel <
          1e-6);
    auto g = random_tensor({2, 4}, 63, true);
    CHECK(fd_check({&x, &g}, [&](Tape<double>& t) { return probe(t, ad::concat_global(t, x, g), 5); }).max_rel <
          1e-6);
    auto target = random_tensor({6, 3}, 64, false);
    CHECK(fd_check({&x}, [&](Tape<double>& t) { return ad::mse_loss(t, x, target); }).max_rel < 1e-6);
    CHECK(fd_check({&x}, [&](Tape<double>& t) { return ad::sum(t, ad::square(t, x)); }).max_rel < 1e-6);
}

TEST_CASE("backward of sum of squares is 2x") {
    auto x = random_tensor({2, 5}, 71, true);
    Tape<double> tape;
    auto L = ad::sum(tape, ad::square(tape, x));
    tape.backward(L);
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(x.grad()[i] == 2.0 * x.values()[i]);
}

TEST_CASE("backward rejects non-scalar roots and second replays") {
    auto x = random_tensor({2, 2}, 72, true);
    Tape<double> tape;
    auto y = ad::square(tape, x);
    CHECK_THROWS_AS(tape.backward(y), DimensionError);
    auto L = ad::sum(tape, y);
    tape.backward(L);
    CHECK_THROWS_AS(tape.backward(L), ContractError);
}

namespace {

struct Mlp {
    Tensor<double> W1 = random_tensor({8, 3}, 81), b1 = random_tensor({8}, 82), W2 = random_tensor({2, 8}, 83),
                   b2 = random_tensor({2}, 84), g = random_tensor({8}, 85, true, 0.5, 1.5),
                   be = random_tensor({8}, 86), rm = Tensor<double>::zeros({8}),
                   rv = Tensor<double>({8}, std::vector<double>(8, 1.0));
    Tensor<double> loss(Tape<double>& t, const Tensor<double>& x, const Tensor<double>& target) {
        auto h = ad::affine(t, x, W1, b1);
        h = ad::batch_norm(t, h, g, be, rm, rv, Mode::train);
        h = ad::relu(t, h);
        auto y = ad::sigmoid(t, ad::affine(t, h, W2, b2));
        return ad::mse_loss(t, y, target);
    }
};

}  // namespace

TEST_CASE("composite network gradients match finite differences") {
    Mlp m;
    auto x = random_tensor({10, 3}, 87, true);
    auto target = random_tensor({10, 2}, 88, false, 0, 1);
    auto r = fd_check({&m.W1, &m.b1, &m.W2, &m.b2, &m.g, &m.be, &x},
                      [&](Tape<double>& t) { return m.loss(t, x, target); });
    CHECK(r.max_rel < 1e-4);
}

TEST_CASE("backward is bit-reproducible") {
    auto run = [] {
        Mlp m;
        auto x = random_tensor({10, 3}, 87, false);
        auto target = random_tensor({10, 2}, 88, false, 0, 1);
        Tape<double> t;
        auto L = m.loss(t, x, target);
        t.backward(L);
        std::vector<double> g(m.W1.grad().begin(), m.W1.grad().end());
        g.insert(g.end(), m.g.grad().begin(), m.g.grad().end());
        return g;
    };
    CHECK(run() == run());
}

TEST_CASE("property: primitive gradients on random inputs") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const std::size_t r = 3 + seed % 4, c = 1 + seed % 3, o = 1 + (seed * 7) % 4;
        auto x = random_tensor({r, c}, 1000 + seed, true, -2, 2);
        auto W = random_tensor({o, c}, 2000 + seed);
        auto b = random_tensor({o}, 3000 + seed);
        auto g = random_tensor({o}, 4000 + seed, true, 0.5, 1.5);
        auto be = random_tensor({o}, 5000 + seed);
        auto rm = Tensor<double>::zeros({o});
        auto rv = Tensor<double>({o}, std::vector<double>(o, 1.0));
        auto res = fd_check({&x, &W, &g, &be}, [&](Tape<double>& t) {
            auto h = ad::batch_norm(t, ad::affine(t, x, W, b), g, be, rm, rv, Mode::train);
            return probe(t, ad::sigmoid(t, h), seed);
        });
        CHECK(res.max_rel < 1e-4);
        // Batch statistics absorb any shift, so the bias gets no gradient.
        for (double gb : b.grad()) CHECK(std::abs(gb) < 1e-12);

        Tape<double> t(false);
        auto s = ad::sigmoid(t, random_tensor({r, c}, 6000 + seed, false, -30, 30));
        for (double v : s.values()) CHECK((v > 0.0 && v < 1.0));
        auto q = ad::relu(t, random_tensor({r, c}, 7000 + seed, false));
        for (double v : q.values()) CHECK(v >= 0.0);
    }
}

// ---------------------------------------------------------------------------
// Input derivatives

namespace {

InputFunction square_map() {
    InputFunction f;
    f.input_dim = 2;
    f.eval = [](Tape<double>& tape, const Tensor<double>& x) {
        // (x, y) -> (x^2, 0, 0) via x * [1 0 0] then squared
        auto W = Tensor<double>({3, 2}, {1, 0, 0, 0, 0, 0});
        auto b = Tensor<double>({3}, {0, 0, 0});
        return ad::square(tape, ad::affine(tape, x, W, b));
    };
    return f;
}

}  // namespace

TEST_CASE("input derivatives of an analytic polynomial map") {
    auto cloud = testing::random_cloud(30, 3);
    auto d = input_derivatives(square_map(), cloud, 2);
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        CHECK(d.d1(i, 0, 0) == 2.0 * cloud.x(i));
        CHECK(d.d1(i, 0, 1) == 0.0);
        CHECK(std::abs(d.d2(i, 0, 0) - 2.0) < 2e-4);
        CHECK(std::abs(d.d2(i, 0, 1)) < 1e-8);
    }
}

TEST_CASE("input derivatives of a constant map vanish") {
    InputFunction f;
    f.input_dim = 2;
    f.eval = [](Tape<double>&, const Tensor<double>& x) {
        return Tensor<double>({x.rows(), 3}, std::vector<double>(x.rows() * 3, 0.25));
    };
    auto d = input_derivatives(f, testing::random_cloud(10, 4), 2);
    for (double v : d.first) CHECK(std::abs(v) < 1e-8);
    for (double v : d.second) CHECK(std::abs(v) < 1e-8);
}

TEST_CASE("input derivatives refuse live batch statistics") {
    InputFunction f = square_map();
    f.frozen_statistics = false;
    CHECK_THROWS_AS(input_derivatives(f, testing::random_cloud(5, 5), 1), ContractError);
    CHECK_THROWS_AS(input_derivatives(square_map(), testing::random_cloud(5, 5), 3), ContractError);
}

TEST_CASE("second derivatives agree with a double finite-difference oracle") {
    // Small smooth network with a pooled global feature, so points interact.
    auto W1 = random_tensor({6, 2}, 91, false), b1 = random_tensor({6}, 92, false);
    auto W2 = random_tensor({3, 12}, 93, false), b2 = random_tensor({3}, 94, false);
    InputFunction f;
    f.input_dim = 2;
    f.eval = [&](Tape<double>& t, const Tensor<double>& x) {
        auto h = ad::sigmoid(t, ad::affine(t, x, W1, b1));
        auto g = ad::max_pool_points(t, h).values;
        return ad::sigmoid(t, ad::affine(t, ad::concat_global(t, h, g), W2, b2));
    };
    auto cloud = testing::random_cloud(12, 6);
    const auto d = input_derivatives(f, cloud, 2);

    // Oracle: sum_k d2/(dx_i dx_k) of sum_j out[j,c], from mixed differences of the
    // outputs under a perturbation of point i (step a) and a rigid shift (step s).
    auto total = [&](const PointCloud& c, std::size_t ch) {
        Tape<double> t(false);
        Tensor<double> x({c.size(), 2}, c.coords);
        auto y = f.eval(t, x);
        double s = 0;
        for (std::size_t j = 0; j < c.size(); ++j) s += y.at(j, ch);
        return s;
    };
    const double a = 1e-4, s = 1e-4;
    double worst = 0.0;
    for (std::size_t i = 0; i < cloud.size(); ++i)
        for (std::size_t ch = 0; ch < 3; ++ch)
            for (std::size_t k = 0; k < 2; ++k) {
                double acc = 0;
                for (int sa : {1, -1})
                    for (int ss : {1, -1}) {
                        PointCloud c = cloud;
                        c.coords[i * 2 + k] += sa * a;
                        for (std::size_t j = 0; j < c.size(); ++j) c.coords[j * 2 + k] += ss * s;
                        acc += sa * ss * total(c, ch);
                    }
                const double oracle = acc / (4 * a * s);
                const double got = d.d2(i, ch, k);
                worst = std::max(worst, std::abs(got - oracle) / std::max({std::abs(got), std::abs(oracle), 1e-3}));
            }
    CHECK(worst < 1e-3);
}
