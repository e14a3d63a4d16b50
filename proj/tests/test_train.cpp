#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include "cloudflow/error.hpp"
#include "cloudflow/report.hpp"
#include "cloudflow/train.hpp"
#include "support.hpp"

using namespace cloudflow;
using ad::Tape;
using ad::Tensor;

namespace {

struct TinyData {
    std::vector<PointCloud> clouds;
    NormStats stats;
    SampleSet train, val, test;

    explicit TinyData(std::size_t n_points = 32, std::size_t count = 10) {
        for (std::size_t k = 0; k < count; ++k) {
            auto c = sample_cloud(GeometryMeta::circle(0, 0, 0.4 + 0.1 * static_cast<double>(k % 9)), n_points,
                                  Grading{}, k);
            apply_potential_flow(c, FreeStream{});
            clouds.push_back(std::move(c));
        }
        std::vector<const PointCloud*> tr, va, te;
        for (std::size_t k = 0; k < count; ++k)
            (k < count - 2 ? tr : (k == count - 2 ? va : te)).push_back(&clouds[k]);
        stats = NormStats::fit(tr, 1.0, 1.0, 0.0);
        train = SampleSet::make(tr, stats);
        val = SampleSet::make(va, stats);
        test = SampleSet::make(te, stats);
    }
};

TrainConfig quick(std::size_t epochs, std::size_t batch = 4) {
    TrainConfig c;
    c.epochs = epochs;
    c.batch_size = batch;
    c.seed = 3;
    return c;
}

std::vector<double> flat(const ModelParams<double>& p) {
    std::vector<double> v;
    for (const auto& e : p.entries()) v.insert(v.end(), e.tensor.values().begin(), e.tensor.values().end());
    return v;
}

}  // namespace

TEST_CASE("per-sample loss") {
    std::vector<double> a{0.1, 0.2, 0.3, 0.4, 0.5, 0.6};
    CHECK(sample_mse(a, a) == 0.0);
    std::vector<double> p{2, 2, 2}, t{1, 1, 1};
    CHECK(sample_mse(p, t) == 1.0);

    const auto x = testing::uniform(300, 1, 0, 1), y = testing::uniform(300, 2, 0, 1);
    double acc = 0;
    for (std::size_t i = 0; i < 100; ++i) {
        double s = 0;
        for (std::size_t c = 0; c < 3; ++c) s += (x[3 * i + c] - y[3 * i + c]) * (x[3 * i + c] - y[3 * i + c]);
        acc += s;
    }
    CHECK(std::abs(sample_mse(x, y) - acc / 300.0) <= 1e-12);
    std::vector<double> bad{1, 2};
    CHECK_THROWS_AS(sample_mse(bad, x), DimensionError);
}

TEST_CASE("batch loss is the mean of per-sample losses and differentiates correctly") {
    auto pred = testing::random_tensor({12, 3}, 4, true, 0, 1);
    auto target = testing::random_tensor({12, 3}, 5, false, 0, 1);
    Tape<double> tape(false);
    const double L = batch_mse(tape, pred, target, 3).item();
    double mean = 0;
    for (std::size_t s = 0; s < 3; ++s)
        mean += sample_mse(std::span<const double>(pred.values()).subspan(12 * s, 12),
                           std::span<const double>(target.values()).subspan(12 * s, 12));
    CHECK(std::abs(L - mean / 3) <= 1e-15);
    CHECK(testing::fd_check({&pred}, [&](Tape<double>& t) { return batch_mse(t, pred, target, 3); }).max_rel < 1e-6);
    CHECK_THROWS_AS(batch_mse(tape, pred, target, 5), DimensionError);
}

TEST_CASE("property: loss is non-negative and zero only on equality") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const std::size_t n = 1 + seed;
        auto a = testing::uniform(3 * n, seed, 0, 1), b = testing::uniform(3 * n, seed + 1000, 0, 1);
        CHECK(sample_mse(a, b) > 0.0);
        CHECK(sample_mse(a, a) == 0.0);
        b = a;
        b[seed % b.size()] += 1e-9;
        CHECK(sample_mse(a, b) > 0.0);
    }
}

TEST_CASE("train config validation") {
    TrainConfig c;
    CHECK_NOTHROW(c.validate());
    c.beta1 = 1.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = TrainConfig{};
    c.beta2 = 0.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = TrainConfig{};
    c.learning_rate = 0.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = TrainConfig{};
    c.batch_size = 1;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    CHECK(precision_from_string("f32") == Precision::f32);
    CHECK_THROWS_AS(precision_from_string("f16"), ConfigError);
}

TEST_CASE("one Adam step on a scalar with unit gradient") {
    ModelParams<double> p;
    p.add("w", Tensor<double>({1}, {0.25}, true), true);
    p.add("frozen", Tensor<double>({1}, {7.0}), false);
    auto st = AdamState<double>::init(p);
    CHECK(st.t == 0);
    CHECK(st.m[0] == std::vector<double>{0.0});
    p.at("w").grad()[0] = 1.0;
    TrainConfig cfg;
    adam_step(p, st, cfg);
    CHECK(st.t == 1);
    // m_hat = 1, v_hat = 1
    CHECK(std::abs((0.25 - p.at("w").values()[0]) - 5e-4 / (1.0 + 1e-6)) <= 1e-15);
    CHECK(p.at("frozen").values()[0] == 7.0);
}

TEST_CASE("property: zero gradients with zero moments leave parameters untouched at any step") {
    auto m = build<double>(ModelConfig::desk(8, 2, 16), 1);
    const auto before = flat(m.params);
    for (std::uint64_t t : {0, 1, 7, 1000, 123456}) {
        auto st = AdamState<double>::init(m.params);
        st.t = t;
        m.params.zero_grad();
        adam_step(m.params, st, TrainConfig{});
        CHECK(st.t == t + 1);
    }
    CHECK(flat(m.params) == before);
}

TEST_CASE("non-finite gradients abort naming the tensor before any update") {
    auto m = build<double>(ModelConfig::desk(8, 2, 16), 1);
    auto st = AdamState<double>::init(m.params);
    for (auto& e : m.params.entries())
        if (e.trainable)
            for (auto& g : e.tensor.grad()) g = 0.5;
    m.params.at("tail.1.weight").grad()[3] = std::numeric_limits<double>::quiet_NaN();
    const auto before = flat(m.params);
    try {
        adam_step(m.params, st, TrainConfig{});
        FAIL("expected a numerical error");
    } catch (const NumericalError& e) {
        CHECK(std::string(e.what()).find("tail.1.weight") != std::string::npos);
    }
    CHECK(flat(m.params) == before);
    CHECK(st.t == 0);
}

TEST_CASE("ten Adam steps are bit-reproducible") {
    auto run = [] {
        TinyData d(16, 10);
        auto m = build<double>(ModelConfig::desk(16, 2, 16), 4);
        auto st = AdamState<double>::init(m.params);
        for (int k = 0; k < 10; ++k) {
            m.params.zero_grad();
            Tape<double> tape;
            std::vector<const PointCloud*> batch{d.train.clouds[0], d.train.clouds[1], d.train.clouds[2]};
            auto out = forward(m, tape, make_input<double>(m.config, batch), 3, ad::Mode::train);
            std::vector<double> t;
            for (int s = 0; s < 3; ++s) t.insert(t.end(), d.train.targets[s].begin(), d.train.targets[s].end());
            auto L = batch_mse(tape, out.predictions, Tensor<double>({48, 3}, t), 3);
            tape.backward(L);
            adam_step(m.params, st, TrainConfig{});
        }
        return flat(m.params);
    };
    CHECK(run() == run());
}

TEST_CASE("fit: first-epoch loss is bounded and the curve is reproducible") {
    TinyData d;
    auto go = [&](std::uint64_t seed) {
        auto m = build<double>(ModelConfig::desk(32, 2, 16), 2);
        auto cfg = quick(4, 3);
        cfg.seed = seed;
        return std::pair{fit(m, d.train, d.val, cfg), flat(m.params)};
    };
    auto [r1, p1] = go(1);
    auto [r2, p2] = go(1);
    auto [r3, p3] = go(2);
    REQUIRE(r1.epochs.size() == 4);
    CHECK(r1.epochs[0].epoch == 0);
    CHECK(std::isfinite(r1.epochs[0].train_loss));
    CHECK(r1.epochs[0].train_loss <= 1.0);
    CHECK(r1.epochs[0].val_loss.has_value());
    CHECK_FALSE(r1.diverged);
    for (std::size_t e = 0; e < 4; ++e) {
        CHECK(r1.epochs[e].train_loss == r2.epochs[e].train_loss);
        CHECK(*r1.epochs[e].val_loss == *r2.epochs[e].val_loss);
    }
    CHECK(p1 == p2);
    CHECK(r1.epochs[1].train_loss != r3.epochs[1].train_loss);
}

TEST_CASE("fit keeps the best-validation parameters") {
    TinyData d;
    auto m = build<double>(ModelConfig::desk(32, 2, 16), 5);
    std::vector<double> best_snapshot;
    FitHooks<double> hooks;
    std::size_t calls = 0;
    hooks.on_best = [&](const Model<double>& mm, const EpochRecord&) { best_snapshot = flat(mm.params); };
    hooks.on_epoch = [&](const EpochRecord&) { ++calls; };
    auto r = fit(m, d.train, d.val, quick(6), hooks);
    CHECK(calls == 6);
    double min_val = INFINITY;
    for (const auto& e : r.epochs) min_val = std::min(min_val, *e.val_loss);
    CHECK(r.best_loss == min_val);
    CHECK(r.best_loss <= *r.epochs.back().val_loss);
    CHECK(*r.epochs[r.best_epoch].val_loss == r.best_loss);
    CHECK(flat(m.params) == best_snapshot);
    CHECK(evaluate_loss(m, d.val, 4) == r.best_loss);
}

TEST_CASE("fit without a validation split selects on training loss") {
    TinyData d;
    auto m = build<double>(ModelConfig::desk(32, 2, 16), 5);
    auto r = fit(m, d.train, SampleSet{}, quick(3));
    CHECK_FALSE(r.epochs[0].val_loss.has_value());
    double min_train = INFINITY;
    for (const auto& e : r.epochs) min_train = std::min(min_train, e.train_loss);
    CHECK(r.best_loss == min_train);
    CHECK(std::isnan(evaluate_loss(m, SampleSet{}, 4)));
}

TEST_CASE("fit reports divergence with the last good epoch") {
    TinyData d;
    auto m = build<double>(ModelConfig::desk(32, 2, 16), 5);
    auto bad = d.train;
    for (auto& t : bad.targets) t[0] = std::numeric_limits<double>::quiet_NaN();
    auto r = fit(m, bad, d.val, quick(3));
    CHECK(r.diverged);
    CHECK_FALSE(r.last_good_epoch.has_value());
    CHECK(r.epochs.empty());
}

TEST_CASE("fit preconditions") {
    TinyData d;
    auto m = build<double>(ModelConfig::desk(32, 2, 16), 5);
    CHECK_THROWS_AS(fit(m, d.train, d.val, quick(1, 9)), ConfigError);
    SampleSet one;
    one.clouds = {d.train.clouds[0]};
    one.targets = {d.train.targets[0]};
    CHECK_THROWS_AS(fit(m, one, d.val, quick(1, 2)), DataError);
}

TEST_CASE("single precision training runs and stays finite") {
    TinyData d;
    auto m = build<float>(ModelConfig::desk(32, 2, 16), 5);
    auto cfg = quick(2);
    cfg.precision = Precision::f32;
    auto r = fit(m, d.train, d.val, cfg);
    CHECK(r.epochs.size() == 2);
    CHECK(std::isfinite(r.epochs[1].train_loss));
}

TEST_CASE("loss curve CSV") {
    testing::TempDir dir("loss");
    TrainingReport r;
    r.epochs.push_back({0, 0.5, 0.25, 1.0});
    r.epochs.push_back({1, 0.125, std::nullopt, 2.0});
    r.write_csv(dir / "loss.csv");
    std::ifstream in(dir / "loss.csv");
    std::string h, a, b;
    std::getline(in, h);
    std::getline(in, a);
    std::getline(in, b);
    CHECK(h == "epoch,train_loss,val_loss,seconds");
    CHECK(a.rfind("0,0.5,0.25,", 0) == 0);
    CHECK(b.rfind("1,0.125,,", 0) == 0);
}

TEST_CASE("grid search: complete table, infeasible marks and resume") {
    TinyData d(24, 10);
    testing::TempDir dir("grid");
    GridSearchConfig g;
    g.global_features = {16, 32};
    g.batch_sizes = {2, 4};
    g.train = quick(2);
    g.model_for = [](std::size_t G) { return ModelConfig::desk(24, 2, G); };
    g.results_csv = dir / "grid.csv";
    // Budget that admits the small cells only.
    const double small = estimate_training_memory(g.model_for(16), 4, Precision::f64);
    const double large = estimate_training_memory(g.model_for(32), 4, Precision::f64);
    REQUIRE(small < large);
    CHECK(estimate_training_memory(g.model_for(16), 2, Precision::f64) < small);
    CHECK(estimate_training_memory(g.model_for(16), 4, Precision::f32) < small);
    g.memory_budget_bytes = 0.5 * (small + large);

    std::size_t trained = 0;
    auto cells = grid_search(d.train, d.val, d.test, g, [&](const GridCell& c) { trained += c.feasible; });
    REQUIRE(cells.size() == 4);
    std::size_t infeasible = 0;
    for (const auto& c : cells) {
        CHECK(c.tail_mlp == paired_tail(c.global_feature));
        if (!c.feasible) {
            ++infeasible;
            continue;
        }
        CHECK(std::isfinite(c.train_loss));
        CHECK(std::isfinite(c.val_loss));
        CHECK(std::isfinite(c.test_loss));
        CHECK(c.seconds > 0.0);
    }
    CHECK(infeasible >= 1);
    CHECK(trained == 4 - infeasible);

    std::ifstream in(dir / "grid.csv");
    std::string header, row;
    std::getline(in, header);
    CHECK(header == "global_feature,batch_size,tail_mlp,train_loss,val_loss,test_loss,seconds");
    bool saw_mark = false;
    while (std::getline(in, row))
        if (row.find(kInfeasibleMark) != std::string::npos) {
            saw_mark = true;
            std::size_t count = 0;
            for (std::size_t pos = 0; (pos = row.find(kInfeasibleMark, pos)) != std::string::npos; pos += 2) ++count;
            CHECK(count == 4);
        }
    CHECK(saw_mark);

    auto back = read_grid_csv(dir / "grid.csv");
    REQUIRE(back.size() == 4);
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(back[i].feasible == cells[i].feasible);
        CHECK(back[i].tail_mlp == cells[i].tail_mlp);
        if (cells[i].feasible) CHECK(back[i].test_loss == cells[i].test_loss);
    }

    // Resuming trains nothing new and returns identical rows.
    trained = 0;
    auto again = grid_search(d.train, d.val, d.test, g, [&](const GridCell& c) { trained += c.feasible; });
    CHECK(trained == 0);
    REQUIRE(again.size() == 4);
    for (std::size_t i = 0; i < 4; ++i) CHECK(again[i].val_loss == cells[i].val_loss);
}

TEST_CASE("grid table has one block per feature size and marks infeasible cells") {
    std::vector<GridCell> cells;
    for (std::size_t g : {64, 128})
        for (std::size_t b : {4, 8}) {
            GridCell c;
            c.global_feature = g;
            c.batch_size = b;
            c.tail_mlp = paired_tail(g);
            c.train_loss = 1.5e-4;
            c.val_loss = 2.5e-4;
            c.test_loss = 3.5e-4;
            c.seconds = 12.25;
            c.feasible = !(g == 128 && b == 8);
            cells.push_back(c);
        }
    const auto t = grid_table(cells);
    CHECK(t.find("batch size of 4") != std::string::npos);
    CHECK(t.find("batch size of 8") != std::string::npos);
    CHECK(t.find("(64,64,32)") != std::string::npos);
    CHECK(t.find("test loss = 3.5000e-04") != std::string::npos);
    CHECK(t.find("training time = 12.2 s") != std::string::npos);
    CHECK(t.find(std::string("validation loss = ") + kInfeasibleMark) != std::string::npos);
    CHECK(std::count(t.begin(), t.end(), '\n') == 2 + 8);
}
