#include "cloudflow/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <iomanip>
#include <random>
#include <set>
#include <sstream>

#include "cloudflow/error.hpp"

namespace cloudflow {

namespace {

struct LayerSpec {
    std::string name;
    std::size_t in = 0, out = 0;
    bool batch_norm = true;
    std::size_t identity_k = 0;  // > 0: zero weights, flattened K x K identity bias
};

void add_stack(std::vector<LayerSpec>& plan, const std::string& prefix, std::size_t in,
               const std::vector<std::size_t>& widths) {
    for (std::size_t i = 0; i < widths.size(); ++i) {
        plan.push_back({prefix + "." + std::to_string(i), in, widths[i], true, 0});
        in = widths[i];
    }
}

std::vector<std::size_t> with_global(std::vector<std::size_t> w, std::size_t g) {
    w.push_back(g);
    return w;
}

void add_tnet(std::vector<LayerSpec>& plan, const ModelConfig& c, const std::string& prefix, std::size_t k) {
    add_stack(plan, prefix + ".mlp", k, with_global(c.tnet_point_mlp, c.global_feature));
    add_stack(plan, prefix + ".fc", c.global_feature, c.tnet_fc);
    plan.push_back({prefix + ".out", c.tnet_fc.back(), k * k, false, k});
}

// Registry order shared by build() and parameter_breakdown().
std::vector<LayerSpec> layer_plan(const ModelConfig& c) {
    std::vector<LayerSpec> plan;
    if (c.input_transform) add_tnet(plan, c, "tnet_in", c.input_dim);
    add_stack(plan, "point_mlp", c.input_dim, c.point_mlp);
    if (c.feature_transform) add_tnet(plan, c, "tnet_feat", c.local_width());
    add_stack(plan, "feature_mlp", c.local_width(), with_global(c.feature_mlp, c.global_feature));
    add_stack(plan, "tail", c.concat_width(), c.tail_mlp);
    plan.push_back({"head", c.tail_mlp.back(), c.n_cfd, false, 0});
    return plan;
}

template <typename T>
ad::Tensor<T> dense_stack(Model<T>& m, ad::Tape<T>& tape, ad::Tensor<T> h, const std::string& prefix,
                          std::size_t layers, ad::Mode mode) {
    auto& p = m.params;
    for (std::size_t i = 0; i < layers; ++i) {
        const std::string n = prefix + "." + std::to_string(i);
        h = ad::affine(tape, h, p.at(n + ".weight"), p.at(n + ".bias"));
        h = ad::batch_norm(tape, h, p.at(n + ".bn.gamma"), p.at(n + ".bn.beta"), p.at(n + ".bn.running_mean"),
                           p.at(n + ".bn.running_var"), mode);
        h = ad::relu(tape, h);
    }
    return h;
}

std::vector<std::size_t> sorted_unique(std::vector<std::size_t> v) {
    std::sort(v.begin(), v.end());
    v.erase(std::unique(v.begin(), v.end()), v.end());
    return v;
}

void require_widths(const std::vector<std::size_t>& w, const char* what, bool allow_empty) {
    if (w.empty() && !allow_empty) throw ConfigError(std::string(what) + " must list at least one layer");
    for (auto x : w)
        if (x == 0) throw ConfigError(std::string(what) + " contains a zero width");
}

}  // namespace

std::vector<std::size_t> paired_tail(std::size_t g) {
    if (g >= 1024) return {512, 256, 128};
    if (g >= 256) return {256, 256, 128};
    return {g, g, std::max<std::size_t>(g / 2, 1)};
}

ModelConfig ModelConfig::canonical(std::size_t n_points, std::size_t input_dim, std::size_t global_feature,
                                   std::size_t n_cfd) {
    ModelConfig c;
    c.n_points = n_points;
    c.input_dim = input_dim;
    c.n_cfd = n_cfd;
    c.global_feature = global_feature;
    c.tail_mlp = paired_tail(global_feature);
    return c;
}

ModelConfig ModelConfig::desk(std::size_t n_points, std::size_t input_dim, std::size_t global_feature,
                              std::size_t n_cfd) {
    ModelConfig c = canonical(n_points, input_dim, global_feature, n_cfd);
    c.feature_mlp = {64, 64};
    c.tnet_point_mlp = {16, 32};
    c.tnet_fc = {32, 16};
    if (global_feature < 256) c.tail_mlp = paired_tail(global_feature);
    return c;
}

void ModelConfig::validate() const {
    if (n_points < 1) throw ConfigError("model: n_points must be at least 1");
    if (input_dim != 2 && input_dim != 3) throw ConfigError("model: input_dim must be 2 or 3");
    if (n_cfd < 1) throw ConfigError("model: n_cfd must be at least 1");
    if (!std::has_single_bit(global_feature) || global_feature < kMinGlobalFeature ||
        global_feature > kMaxGlobalFeature)
        throw ConfigError("model: unsupported global feature size " + std::to_string(global_feature) +
                          " (powers of two from " + std::to_string(kMinGlobalFeature) + " to " +
                          std::to_string(kMaxGlobalFeature) + ")");
    require_widths(point_mlp, "point_mlp", false);
    require_widths(feature_mlp, "feature_mlp", true);
    require_widths(tnet_point_mlp, "tnet_point_mlp", true);
    require_widths(tnet_fc, "tnet_fc", false);
    require_widths(tail_mlp, "tail_mlp", false);
}

std::vector<LayerCount> parameter_breakdown(const ModelConfig& config) {
    config.validate();
    std::vector<LayerCount> rows;
    for (const auto& l : layer_plan(config)) {
        LayerCount r;
        r.name = l.name;
        r.weights = l.in * l.out;
        r.biases = l.out;
        if (l.batch_norm) {
            r.bn_affine = 2 * l.out;
            r.bn_running = 2 * l.out;
        }
        rows.push_back(r);
    }
    return rows;
}

std::size_t parameter_count(const ModelConfig& config) {
    std::size_t n = 0;
    for (const auto& r : parameter_breakdown(config)) n += r.trainable();
    return n;
}

std::string format_breakdown(const std::vector<LayerCount>& rows) {
    std::ostringstream os;
    os << std::left << std::setw(18) << "layer" << std::right << std::setw(10) << "weights" << std::setw(8)
       << "biases" << std::setw(10) << "bn_affine" << std::setw(11) << "bn_running" << std::setw(11)
       << "trainable" << '\n';
    std::size_t total = 0, running = 0;
    for (const auto& r : rows) {
        os << std::left << std::setw(18) << r.name << std::right << std::setw(10) << r.weights << std::setw(8)
           << r.biases << std::setw(10) << r.bn_affine << std::setw(11) << r.bn_running << std::setw(11)
           << r.trainable() << '\n';
        total += r.trainable();
        running += r.bn_running;
    }
    os << "total trainable " << total << ", running statistics " << running << ", all stored "
       << total + running << '\n';
    return os.str();
}

// ---------------------------------------------------------------------------
// ModelParams

template <typename T>
void ModelParams<T>::add(std::string name, ad::Tensor<T> tensor, bool trainable) {
    if (index_.count(name)) throw ConfigError("duplicate parameter '" + name + "'");
    index_[name] = entries_.size();
    entries_.push_back({std::move(name), std::move(tensor), trainable});
}

template <typename T>
ad::Tensor<T>& ModelParams<T>::at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return entries_[it->second].tensor;
}

template <typename T>
const ad::Tensor<T>& ModelParams<T>::at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return entries_[it->second].tensor;
}

template <typename T>
std::size_t ModelParams<T>::trainable_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_)
        if (e.trainable) n += e.tensor.numel();
    return n;
}

template <typename T>
std::size_t ModelParams<T>::total_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.tensor.numel();
    return n;
}

template <typename T>
void ModelParams<T>::zero_grad() {
    for (auto& e : entries_)
        if (e.tensor.requires_grad()) e.tensor.zero_grad();
}

template <typename T>
ModelParams<T> ModelParams<T>::clone() const {
    ModelParams out;
    for (const auto& e : entries_) out.add(e.name, e.tensor.clone(), e.trainable);
    return out;
}

template <typename T>
template <typename U>
ModelParams<U> ModelParams<T>::cast() const {
    ModelParams<U> out;
    for (const auto& e : entries_) {
        auto v = e.tensor.values();
        std::vector<U> data(v.begin(), v.end());
        out.add(e.name, ad::Tensor<U>(e.tensor.shape(), std::move(data), e.trainable), e.trainable);
    }
    return out;
}

// ---------------------------------------------------------------------------
// build / forward

template <typename T>
Model<T> build(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    Model<T> m{config, {}};
    std::mt19937_64 rng(seed);
    for (const auto& l : layer_plan(config)) {
        std::vector<T> w(l.in * l.out, T(0));
        std::vector<T> b(l.out, T(0));
        if (l.identity_k > 0) {
            for (std::size_t i = 0; i < l.identity_k; ++i) b[i * l.identity_k + i] = T(1);
        } else {
            const double limit = std::sqrt(6.0 / static_cast<double>(l.in + l.out));
            std::uniform_real_distribution<double> dist(-limit, limit);
            for (auto& x : w) x = static_cast<T>(dist(rng));
        }
        m.params.add(l.name + ".weight", ad::Tensor<T>({l.out, l.in}, std::move(w), true), true);
        m.params.add(l.name + ".bias", ad::Tensor<T>({l.out}, std::move(b), true), true);
        if (l.batch_norm) {
            m.params.add(l.name + ".bn.gamma", ad::Tensor<T>({l.out}, std::vector<T>(l.out, T(1)), true), true);
            m.params.add(l.name + ".bn.beta", ad::Tensor<T>::zeros({l.out}, true), true);
            m.params.add(l.name + ".bn.running_mean", ad::Tensor<T>::zeros({l.out}), false);
            m.params.add(l.name + ".bn.running_var", ad::Tensor<T>({l.out}, std::vector<T>(l.out, T(1))), false);
        }
    }
    return m;
}

template <typename T>
ad::Tensor<T> tnet_forward(Model<T>& model, ad::Tape<T>& tape, const std::string& prefix, const ad::Tensor<T>& x,
                           std::size_t clouds, ad::Mode mode, std::vector<std::size_t>* argmax) {
    const auto& c = model.config;
    auto h = dense_stack(model, tape, x, prefix + ".mlp", c.tnet_point_mlp.size() + 1, mode);
    auto pool = ad::max_pool_points(tape, h, clouds);
    if (argmax) *argmax = pool.argmax;
    auto f = dense_stack(model, tape, pool.values, prefix + ".fc", c.tnet_fc.size(), mode);
    return ad::affine(tape, f, model.params.at(prefix + ".out.weight"), model.params.at(prefix + ".out.bias"));
}

template <typename T>
ForwardResult<T> forward(Model<T>& model, ad::Tape<T>& tape, const ad::Tensor<T>& input, std::size_t clouds,
                         ad::Mode mode) {
    const auto& c = model.config;
    if (input.ndim() != 2 || input.shape()[1] != c.input_dim)
        throw DimensionError("forward: expected input of width " + std::to_string(c.input_dim) + ", got " +
                             ad::shape_string(input.shape()));
    if (clouds == 0 || input.rows() == 0 || input.rows() % clouds != 0)
        throw DimensionError("forward: " + std::to_string(input.rows()) + " rows do not split into " +
                             std::to_string(clouds) + " clouds");
    const std::size_t N = input.rows() / clouds;

    std::vector<std::size_t> arg_in, arg_feat;
    ad::Tensor<T> x = input;
    if (c.input_transform) {
        auto t = tnet_forward(model, tape, "tnet_in", x, clouds, mode, &arg_in);
        x = ad::transform_points(tape, x, t);
    }
    auto h = dense_stack(model, tape, x, "point_mlp", c.point_mlp.size(), mode);
    if (c.feature_transform) {
        auto t = tnet_forward(model, tape, "tnet_feat", h, clouds, mode, &arg_feat);
        h = ad::transform_points(tape, h, t);
    }
    const ad::Tensor<T> local = h;
    auto g = dense_stack(model, tape, local, "feature_mlp", c.feature_mlp.size() + 1, mode);
    auto pool = ad::max_pool_points(tape, g, clouds);
    auto cat = ad::concat_global(tape, local, pool.values);
    auto t = dense_stack(model, tape, cat, "tail", c.tail_mlp.size(), mode);
    auto out = ad::sigmoid(tape, ad::affine(tape, t, model.params.at("head.weight"), model.params.at("head.bias")));

    ForwardResult<T> res{out, {}};
    const std::size_t L = c.local_width(), G = c.global_feature;
    const std::size_t Gt = c.global_feature;
    for (std::size_t s = 0; s < clouds; ++s) {
        LatentRecord r;
        r.n_points = N;
        auto lv = local.values();
        r.local_features.assign(lv.begin() + s * N * L, lv.begin() + (s + 1) * N * L);
        auto gv = pool.values.values();
        r.global_feature.assign(gv.begin() + s * G, gv.begin() + (s + 1) * G);
        r.argmax.assign(pool.argmax.begin() + s * G, pool.argmax.begin() + (s + 1) * G);
        r.critical_set = sorted_unique(r.argmax);
        std::vector<std::size_t> tc;
        if (!arg_in.empty()) tc.insert(tc.end(), arg_in.begin() + s * Gt, arg_in.begin() + (s + 1) * Gt);
        if (!arg_feat.empty()) tc.insert(tc.end(), arg_feat.begin() + s * Gt, arg_feat.begin() + (s + 1) * Gt);
        r.transform_critical = sorted_unique(std::move(tc));
        res.latents.push_back(std::move(r));
    }
    return res;
}

std::vector<std::size_t> LatentRecord::sufficient_set() const {
    std::vector<std::size_t> all = critical_set;
    all.insert(all.end(), transform_critical.begin(), transform_critical.end());
    return sorted_unique(std::move(all));
}

template <typename T>
ad::Tensor<T> make_input(const ModelConfig& config, const std::vector<const PointCloud*>& clouds) {
    std::vector<T> data;
    data.reserve(clouds.size() * config.n_points * config.input_dim);
    for (const auto* pc : clouds) {
        if (pc->size() != config.n_points)
            throw DimensionError("input: model expects " + std::to_string(config.n_points) + " points, cloud has " +
                                 std::to_string(pc->size()));
        if (pc->dim > config.input_dim)
            throw DimensionError("input: model expects " + std::to_string(config.input_dim) +
                                 "-D points, cloud is " + std::to_string(pc->dim) + "-D");
        for (std::size_t i = 0; i < pc->size(); ++i)
            for (std::size_t k = 0; k < config.input_dim; ++k)
                data.push_back(k < pc->dim ? static_cast<T>(pc->coords[i * pc->dim + k]) : T(0));
    }
    const std::size_t rows = data.size() / config.input_dim;
    return ad::Tensor<T>({rows, config.input_dim}, std::move(data));
}

template <typename T>
ForwardResult<T> predict(Model<T>& model, const PointCloud& cloud) {
    ad::Tape<T> tape(false);
    auto in = make_input<T>(model.config, {&cloud});
    return forward(model, tape, in, 1, ad::Mode::infer);
}

#define CLOUDFLOW_INSTANTIATE(T)                                                                                  \
    template class ModelParams<T>;                                                                                \
    template Model<T> build<T>(const ModelConfig&, std::uint64_t);                                                \
    template ad::Tensor<T> tnet_forward(Model<T>&, ad::Tape<T>&, const std::string&, const ad::Tensor<T>&,      \
                                        std::size_t, ad::Mode, std::vector<std::size_t>*);                        \
    template ForwardResult<T> forward(Model<T>&, ad::Tape<T>&, const ad::Tensor<T>&, std::size_t, ad::Mode);     \
    template ad::Tensor<T> make_input<T>(const ModelConfig&, const std::vector<const PointCloud*>&);              \
    template ForwardResult<T> predict(Model<T>&, const PointCloud&);

CLOUDFLOW_INSTANTIATE(float)
CLOUDFLOW_INSTANTIATE(double)
template ModelParams<float> ModelParams<double>::cast<float>() const;
template ModelParams<double> ModelParams<float>::cast<double>() const;
template ModelParams<double> ModelParams<double>::cast<double>() const;
template ModelParams<float> ModelParams<float>::cast<float>() const;

#undef CLOUDFLOW_INSTANTIATE

}  // namespace cloudflow
