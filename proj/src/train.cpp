#include "cloudflow/train.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

#include "cloudflow/error.hpp"
#include "cloudflow/manifest.hpp"

namespace cloudflow {

namespace fs = std::filesystem;

std::string to_string(Precision p) { return p == Precision::f32 ? "f32" : "f64"; }

Precision precision_from_string(const std::string& s) {
    if (s == "f32") return Precision::f32;
    if (s == "f64") return Precision::f64;
    throw ConfigError("precision must be f32 or f64, got '" + s + "'");
}

void TrainConfig::validate() const {
    if (!(learning_rate > 0) || !std::isfinite(learning_rate)) throw ConfigError("learning rate must be positive");
    if (!(beta1 > 0 && beta1 < 1)) throw ConfigError("beta1 must lie in (0, 1)");
    if (!(beta2 > 0 && beta2 < 1)) throw ConfigError("beta2 must lie in (0, 1)");
    if (!(epsilon > 0)) throw ConfigError("epsilon must be positive");
    if (batch_size < 2) throw ConfigError("batch size must be at least 2 for batch normalisation");
    if (epochs < 1) throw ConfigError("epochs must be at least 1");
}

double sample_mse(std::span<const double> pred, std::span<const double> target) {
    if (pred.size() != target.size() || pred.size() % 3 != 0 || pred.empty())
        throw DimensionError("mse: prediction has " + std::to_string(pred.size()) + " values, target " +
                             std::to_string(target.size()));
    double s = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double d = pred[i] - target[i];
        s += d * d;
    }
    return s / static_cast<double>(pred.size());
}

template <typename T>
ad::Tensor<T> batch_mse(ad::Tape<T>& tape, const ad::Tensor<T>& pred, const ad::Tensor<T>& target,
                        std::size_t samples) {
    if (samples == 0 || pred.rows() % samples != 0)
        throw DimensionError("mse: " + std::to_string(pred.rows()) + " rows do not split into " +
                             std::to_string(samples) + " samples");
    // Equal-size samples: the mean of per-sample means is the overall mean.
    return ad::mse_loss(tape, pred, target);
}

template <typename T>
AdamState<T> AdamState<T>::init(const ModelParams<T>& params) {
    AdamState s;
    for (const auto& e : params.entries()) {
        const std::size_t n = e.trainable ? e.tensor.numel() : 0;
        s.m.emplace_back(n, T(0));
        s.v.emplace_back(n, T(0));
    }
    return s;
}

template <typename T>
void adam_step(ModelParams<T>& params, AdamState<T>& state, const TrainConfig& config) {
    auto& entries = params.entries();
    if (state.m.size() != entries.size()) throw ContractError("adam: state does not match the parameter registry");
    for (const auto& e : entries) {
        if (!e.trainable) continue;
        for (T g : e.tensor.grad())
            if (!std::isfinite(static_cast<double>(g)))
                throw NumericalError("adam: non-finite gradient in " + e.name);
    }
    state.t += 1;
    const double t = static_cast<double>(state.t);
    const T b1 = static_cast<T>(config.beta1), b2 = static_cast<T>(config.beta2);
    const T c1 = static_cast<T>(1.0 - std::pow(config.beta1, t));
    const T c2 = static_cast<T>(1.0 - std::pow(config.beta2, t));
    const T lr = static_cast<T>(config.learning_rate), eps = static_cast<T>(config.epsilon);
    for (std::size_t k = 0; k < entries.size(); ++k) {
        auto& e = entries[k];
        if (!e.trainable) continue;
        auto p = e.tensor.values();
        auto g = e.tensor.grad();
        auto& m = state.m[k];
        auto& v = state.v[k];
        for (std::size_t i = 0; i < p.size(); ++i) {
            m[i] = b1 * m[i] + (T(1) - b1) * g[i];
            v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
            const T mhat = m[i] / c1;
            const T vhat = v[i] / c2;
            p[i] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
    }
}

SampleSet SampleSet::make(const std::vector<const PointCloud*>& clouds, const NormStats& stats) {
    SampleSet s;
    s.clouds = clouds;
    for (const auto* c : clouds) s.targets.push_back(normalize_fields(*c, stats));
    return s;
}

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

template <typename T>
ad::Tensor<T> stack_targets(const SampleSet& set, const std::vector<std::size_t>& idx) {
    std::vector<T> data;
    for (auto i : idx)
        for (double v : set.targets[i]) data.push_back(static_cast<T>(v));
    const std::size_t rows = data.size() / 3;
    return ad::Tensor<T>({rows, 3}, std::move(data));
}

std::vector<const PointCloud*> pick(const SampleSet& set, const std::vector<std::size_t>& idx) {
    std::vector<const PointCloud*> out;
    for (auto i : idx) out.push_back(set.clouds[i]);
    return out;
}

}  // namespace

template <typename T>
double evaluate_loss(Model<T>& model, const SampleSet& set, std::size_t batch_size) {
    if (set.size() == 0) return std::numeric_limits<double>::quiet_NaN();
    batch_size = std::max<std::size_t>(batch_size, 1);
    double total = 0.0;
    for (std::size_t start = 0; start < set.size(); start += batch_size) {
        std::vector<std::size_t> idx;
        for (std::size_t i = start; i < std::min(set.size(), start + batch_size); ++i) idx.push_back(i);
        ad::Tape<T> tape(false);
        const auto input = make_input<T>(model.config, pick(set, idx));
        const auto out = forward(model, tape, input, idx.size(), ad::Mode::infer);
        const auto pred = out.predictions.values();
        const std::size_t per = pred.size() / idx.size();
        for (std::size_t s = 0; s < idx.size(); ++s) {
            std::vector<double> p(pred.begin() + s * per, pred.begin() + (s + 1) * per);
            total += sample_mse(p, set.targets[idx[s]]);
        }
    }
    return total / static_cast<double>(set.size());
}

void TrainingReport::write_csv(const fs::path& path) const {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path.string());
    out << "epoch,train_loss,val_loss,seconds\n";
    for (const auto& r : epochs) {
        out << r.epoch << ',' << format_double(r.train_loss) << ',';
        if (r.val_loss) out << format_double(*r.val_loss);
        out << ',' << format_double(r.seconds) << '\n';
    }
}

template <typename T>
TrainingReport fit(Model<T>& model, const SampleSet& train, const SampleSet& val, const TrainConfig& config,
                   const FitHooks<T>& hooks) {
    config.validate();
    if (train.size() < 2) throw DataError("training needs at least 2 samples");
    if (config.batch_size > train.size())
        throw ConfigError("batch size " + std::to_string(config.batch_size) + " exceeds the " +
                          std::to_string(train.size()) + " training samples");

    using clock = std::chrono::steady_clock;
    const auto t0 = clock::now();
    TrainingReport report;
    AdamState<T> adam = AdamState<T>::init(model.params);
    ModelParams<T> best = model.params.clone();
    double best_loss = std::numeric_limits<double>::infinity();

    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        std::vector<std::size_t> order(train.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        seeded_shuffle(order, splitmix64(config.seed ^ splitmix64(epoch)));

        double loss_sum = 0.0;
        std::size_t batches = 0;
        bool finite = true;
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            const std::size_t end = std::min(order.size(), start + config.batch_size);
            if (end - start < 2) break;
            std::vector<std::size_t> idx(order.begin() + start, order.begin() + end);

            model.params.zero_grad();
            ad::Tape<T> tape;
            const auto input = make_input<T>(model.config, pick(train, idx));
            const auto out = forward(model, tape, input, idx.size(), ad::Mode::train);
            auto loss = batch_mse(tape, out.predictions, stack_targets<T>(train, idx), idx.size());
            const double lv = static_cast<double>(loss.item());
            if (!std::isfinite(lv)) {
                finite = false;
                break;
            }
            tape.backward(loss);
            adam_step(model.params, adam, config);
            loss_sum += lv;
            ++batches;
        }
        if (!finite) {
            report.diverged = true;
            break;
        }

        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = loss_sum / static_cast<double>(batches);
        if (val.size() > 0) {
            rec.val_loss = evaluate_loss(model, val, config.batch_size);
            if (!std::isfinite(*rec.val_loss)) {
                report.diverged = true;
                break;
            }
        }
        rec.seconds = std::chrono::duration<double>(clock::now() - t0).count();
        report.epochs.push_back(rec);
        report.last_good_epoch = epoch;

        const double criterion = rec.val_loss ? *rec.val_loss : rec.train_loss;
        if (criterion < best_loss) {
            best_loss = criterion;
            best = model.params.clone();
            report.best_epoch = epoch;
            if (hooks.on_best) hooks.on_best(model, rec);
        }
        if (hooks.on_epoch) hooks.on_epoch(rec);
    }

    if (std::isfinite(best_loss)) model.params = std::move(best);
    report.best_loss = best_loss;
    report.wall_seconds = std::chrono::duration<double>(clock::now() - t0).count();
    return report;
}

// ---------------------------------------------------------------------------

double estimate_training_memory(const ModelConfig& c, std::size_t batch_size, Precision precision) {
    double width = 0.0;
    auto add = [&](const std::vector<std::size_t>& w) {
        for (auto x : w) width += static_cast<double>(x);
    };
    if (c.input_transform) {
        add(c.tnet_point_mlp);
        width += static_cast<double>(c.global_feature);
    }
    add(c.point_mlp);
    if (c.feature_transform) {
        add(c.tnet_point_mlp);
        width += static_cast<double>(c.global_feature);
        width += static_cast<double>(c.local_width());
    }
    add(c.feature_mlp);
    width += static_cast<double>(c.global_feature);
    width += static_cast<double>(c.concat_width());
    add(c.tail_mlp);
    width += static_cast<double>(c.n_cfd);
    const double scalar = precision == Precision::f32 ? 4.0 : 8.0;
    const double rows = static_cast<double>(batch_size * c.n_points);
    // affine, batch-norm and ReLU outputs per layer, each with a gradient buffer
    const double activations = rows * width * 3.0 * 2.0 * scalar;
    const double params = static_cast<double>(parameter_count(c)) * 4.0 * scalar;
    return activations + params;
}

namespace {

std::string tail_string(const std::vector<std::size_t>& tail) {
    std::string s;
    for (std::size_t i = 0; i < tail.size(); ++i) s += (i ? "-" : "") + std::to_string(tail[i]);
    return s;
}

std::vector<std::size_t> parse_tail(const std::string& s) {
    std::vector<std::size_t> out;
    std::istringstream is(s);
    std::string tok;
    while (std::getline(is, tok, '-'))
        if (!tok.empty()) out.push_back(std::stoul(tok));
    return out;
}

template <typename T>
GridCell run_cell(const SampleSet& train, const SampleSet& val, const SampleSet& test, const GridSearchConfig& gc,
                  std::size_t G, std::size_t batch) {
    GridCell cell;
    cell.global_feature = G;
    cell.batch_size = batch;
    const ModelConfig mc = gc.model_for(G);
    cell.tail_mlp = mc.tail_mlp;
    if (estimate_training_memory(mc, batch, gc.train.precision) > gc.memory_budget_bytes || batch > train.size()) {
        cell.feasible = false;
        return cell;
    }
    TrainConfig tc = gc.train;
    tc.batch_size = batch;
    auto model = build<T>(mc, gc.model_seed);
    const auto t0 = std::chrono::steady_clock::now();
    const auto report = fit(model, train, val, tc);
    cell.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (report.diverged && report.epochs.empty())
        throw NumericalError("grid cell G=" + std::to_string(G) + " batch=" + std::to_string(batch) + " diverged");
    cell.train_loss = evaluate_loss(model, train, batch);
    cell.val_loss = evaluate_loss(model, val, batch);
    cell.test_loss = evaluate_loss(model, test, batch);
    return cell;
}

}  // namespace

std::vector<GridCell> grid_search(const SampleSet& train, const SampleSet& val, const SampleSet& test,
                                  const GridSearchConfig& gc, const std::function<void(const GridCell&)>& progress) {
    if (gc.global_features.empty() || gc.batch_sizes.empty()) throw ConfigError("grid search: empty axis");
    if (!gc.model_for) throw ConfigError("grid search: no model factory");

    std::map<std::pair<std::size_t, std::size_t>, GridCell> done;
    if (gc.results_csv && fs::exists(*gc.results_csv))
        for (auto& c : read_grid_csv(*gc.results_csv)) done[{c.global_feature, c.batch_size}] = c;

    std::vector<GridCell> cells;
    for (auto G : gc.global_features) {
        for (auto B : gc.batch_sizes) {
            auto it = done.find({G, B});
            if (it != done.end()) {
                cells.push_back(it->second);
                continue;
            }
            GridCell cell = gc.train.precision == Precision::f32 ? run_cell<float>(train, val, test, gc, G, B)
                                                                 : run_cell<double>(train, val, test, gc, G, B);
            cells.push_back(cell);
            done[{G, B}] = cell;
            if (gc.results_csv) {
                std::vector<GridCell> all;
                for (const auto& [k, c] : done) all.push_back(c);
                write_grid_csv(*gc.results_csv, all);
            }
            if (progress) progress(cell);
        }
    }
    return cells;
}

void write_grid_csv(const fs::path& path, const std::vector<GridCell>& cells) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path.string());
    out << "global_feature,batch_size,tail_mlp,train_loss,val_loss,test_loss,seconds\n";
    auto num = [](double v) { return std::isfinite(v) ? format_double(v) : std::string(); };
    for (const auto& c : cells) {
        out << c.global_feature << ',' << c.batch_size << ',' << tail_string(c.tail_mlp) << ',';
        if (c.feasible)
            out << num(c.train_loss) << ',' << num(c.val_loss) << ',' << num(c.test_loss) << ',' << num(c.seconds);
        else
            out << kInfeasibleMark << ',' << kInfeasibleMark << ',' << kInfeasibleMark << ',' << kInfeasibleMark;
        out << '\n';
    }
}

std::vector<GridCell> read_grid_csv(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path.string());
    std::vector<GridCell> cells;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (lineno == 1 || line.empty()) continue;
        std::vector<std::string> f;
        std::istringstream is(line);
        std::string tok;
        while (std::getline(is, tok, ',')) f.push_back(tok);
        if (!line.empty() && line.back() == ',') f.emplace_back();
        if (f.size() != 7) throw ParseError("grid results: expected 7 columns", lineno);
        GridCell c;
        try {
            c.global_feature = std::stoul(f[0]);
            c.batch_size = std::stoul(f[1]);
            c.tail_mlp = parse_tail(f[2]);
            c.feasible = f[3] != kInfeasibleMark;
            if (c.feasible) {
                auto num = [](const std::string& s) {
                    return s.empty() ? std::numeric_limits<double>::quiet_NaN() : std::stod(s);
                };
                c.train_loss = num(f[3]);
                c.val_loss = num(f[4]);
                c.test_loss = num(f[5]);
                c.seconds = num(f[6]);
            }
        } catch (const std::logic_error&) {
            throw ParseError("grid results: malformed row", lineno);
        }
        cells.push_back(c);
    }
    return cells;
}

#define CLOUDFLOW_INSTANTIATE(T)                                                                          \
    template ad::Tensor<T> batch_mse<T>(ad::Tape<T>&, const ad::Tensor<T>&, const ad::Tensor<T>&,     \
                                        std::size_t);                                                   \
    template struct AdamState<T>;                                                                       \
    template void adam_step<T>(ModelParams<T>&, AdamState<T>&, const TrainConfig&);                    \
    template double evaluate_loss<T>(Model<T>&, const SampleSet&, std::size_t);                         \
    template TrainingReport fit<T>(Model<T>&, const SampleSet&, const SampleSet&, const TrainConfig&, \
                                   const FitHooks<T>&);

CLOUDFLOW_INSTANTIATE(float)
CLOUDFLOW_INSTANTIATE(double)
#undef CLOUDFLOW_INSTANTIATE

}  // namespace cloudflow
