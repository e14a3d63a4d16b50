#include "cloudflow/cli.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "CLI11.hpp"

#include "cloudflow/checkpoint.hpp"
#include "cloudflow/data.hpp"
#include "cloudflow/error.hpp"
#include "cloudflow/eval.hpp"
#include "cloudflow/manifest.hpp"
#include "cloudflow/model.hpp"
#include "cloudflow/report.hpp"
#include "cloudflow/train.hpp"

namespace cloudflow::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

enum class Kind { u64, size, real, boolean, text, size_list, real_list };

struct KeySpec {
    Kind kind;
    json fallback;
};

const std::map<std::string, KeySpec>& schema() {
    static const std::map<std::string, KeySpec> s = {
        {"seed", {Kind::u64, 0}},
        {"data", {Kind::text, ""}},
        {"checkpoint", {Kind::text, ""}},
        {"out", {Kind::text, ""}},
        {"input", {Kind::text, ""}},
        // model
        {"preset", {Kind::text, "desk"}},
        {"points", {Kind::size, 256}},
        {"input_dim", {Kind::size, 2}},
        {"global_feature", {Kind::size, 128}},
        {"tail_mlp", {Kind::size_list, json::array()}},
        // training
        {"batch_size", {Kind::size, 8}},
        {"epochs", {Kind::size, 200}},
        {"learning_rate", {Kind::real, 5e-4}},
        {"beta1", {Kind::real, 0.9}},
        {"beta2", {Kind::real, 0.999}},
        {"epsilon", {Kind::real, 1e-6}},
        {"precision", {Kind::text, "f64"}},
        // data generation
        {"samples", {Kind::size, 10}},
        {"radius_min", {Kind::real, 0.4}},
        {"radius_max", {Kind::real, 1.2}},
        {"radius_step", {Kind::real, 0.1}},
        {"radii", {Kind::real_list, json::array()}},
        {"outer_ratio", {Kind::real, 5.0}},
        {"jitter", {Kind::real, 0.15}},
        {"rho", {Kind::real, 1.0}},
        {"u_inf", {Kind::real, 1.0}},
        {"p0", {Kind::real, 0.0}},
        {"mu", {Kind::real, 0.05}},
        // evaluation
        {"split", {Kind::text, "test"}},
        {"stencil_k", {Kind::size, kDefaultStencilK}},
        {"gradient_residuals", {Kind::boolean, true}},
        {"plots", {Kind::boolean, false}},
        // grid search
        {"grid_global_features", {Kind::size_list, json::array({64, 128, 256})}},
        {"grid_batch_sizes", {Kind::size_list, json::array({4, 8})}},
        {"memory_budget_gb", {Kind::real, 4.0}},
    };
    return s;
}

bool type_ok(Kind k, const json& v) {
    switch (k) {
        case Kind::u64:
        case Kind::size: return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
        case Kind::real: return v.is_number();
        case Kind::boolean: return v.is_boolean();
        case Kind::text: return v.is_string();
        case Kind::size_list:
            return v.is_array() && std::all_of(v.begin(), v.end(), [](const json& x) {
                       return x.is_number_unsigned() || (x.is_number_integer() && x.get<std::int64_t>() >= 0);
                   });
        case Kind::real_list:
            return v.is_array() && std::all_of(v.begin(), v.end(), [](const json& x) { return x.is_number(); });
    }
    return false;
}

const char* kind_name(Kind k) {
    switch (k) {
        case Kind::u64: return "unsigned integer";
        case Kind::size: return "non-negative integer";
        case Kind::real: return "number";
        case Kind::boolean: return "boolean";
        case Kind::text: return "string";
        case Kind::size_list: return "list of non-negative integers";
        case Kind::real_list: return "list of numbers";
    }
    return "value";
}

// Command-line values arrive as text; convert according to the schema.
json parse_flag(const std::string& key, const std::string& text) {
    const Kind k = schema().at(key).kind;
    try {
        std::size_t used = 0;
        switch (k) {
            case Kind::u64:
            case Kind::size: {
                if (!text.empty() && text[0] == '-') throw std::invalid_argument("negative");
                const auto v = std::stoull(text, &used);
                if (used != text.size()) throw std::invalid_argument("trailing");
                return v;
            }
            case Kind::real: {
                const double v = std::stod(text, &used);
                if (used != text.size()) throw std::invalid_argument("trailing");
                return v;
            }
            case Kind::text: return text;
            default: break;
        }
    } catch (const std::logic_error&) {
    }
    throw ConfigError("--" + key + ": expected a " + kind_name(k) + ", got '" + text + "'");
}

class Logger {
public:
    Logger(std::ostream& out, const fs::path& file) : out_(out), file_(file, std::ios::app) {
        if (!file_) throw DataError("cannot write log " + file.string());
    }
    void line(const std::string& s) {
        out_ << s << '\n';
        file_ << s << '\n';
        file_.flush();
    }

private:
    std::ostream& out_;
    std::ofstream file_;
};

fs::path prepare_run_dir(const RunConfig& cfg) {
    const auto out = cfg.path("out");
    if (out.empty()) throw ConfigError("--out is required");
    std::error_code ec;
    for (const char* sub : {"checkpoints", "reports", "logs"}) {
        fs::create_directories(out / sub, ec);
        if (ec) throw DataError("cannot create " + (out / sub).string() + ": " + ec.message());
    }
    std::ofstream f(out / "config.resolved");
    if (!f) throw DataError("cannot write " + (out / "config.resolved").string());
    f << cfg.resolved().dump(2) << '\n';
    return out;
}

std::string fixed(double v, int prec = 6) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    return buf;
}

ModelConfig model_config(const RunConfig& cfg, std::size_t n_points, std::size_t global_feature) {
    const auto preset = cfg.get<std::string>("preset");
    const auto d = cfg.get<std::size_t>("input_dim");
    ModelConfig mc = preset == "canonical" ? ModelConfig::canonical(n_points, d, global_feature)
                                           : ModelConfig::desk(n_points, d, global_feature);
    const auto tail = cfg.get<std::vector<std::size_t>>("tail_mlp");
    if (!tail.empty()) mc.tail_mlp = tail;
    mc.validate();
    return mc;
}

TrainConfig train_config(const RunConfig& cfg) {
    TrainConfig tc;
    tc.learning_rate = cfg.get<double>("learning_rate");
    tc.beta1 = cfg.get<double>("beta1");
    tc.beta2 = cfg.get<double>("beta2");
    tc.epsilon = cfg.get<double>("epsilon");
    tc.batch_size = cfg.get<std::size_t>("batch_size");
    tc.epochs = cfg.get<std::size_t>("epochs");
    tc.seed = cfg.get<std::uint64_t>("seed");
    tc.precision = precision_from_string(cfg.get<std::string>("precision"));
    tc.validate();
    return tc;
}

Dataset load_dataset(const RunConfig& cfg) {
    const auto dir = cfg.path("data");
    if (dir.empty()) throw ConfigError("--data is required");
    auto ds = Dataset::load(dir);
    if (!ds.manifest.norm) throw DataError("dataset manifest carries no normalisation statistics");
    return ds;
}

std::size_t common_points(const Dataset& ds) {
    if (ds.clouds.empty()) throw DataError("dataset is empty");
    const std::size_t n = ds.clouds.front().size();
    for (const auto& c : ds.clouds)
        if (c.size() != n) throw DataError("dataset samples differ in point count");
    return n;
}

Model<double> load_model(const RunConfig& cfg, CheckpointInfo& info) {
    const auto path = cfg.path("checkpoint");
    if (path.empty()) throw ConfigError("--checkpoint is required");
    if (!fs::exists(path)) throw DataError("checkpoint " + path.string() + " does not exist");
    return load_checkpoint<double>(path, &info);
}

std::string sample_name(const Dataset& ds, std::size_t i) { return fs::path(ds.manifest.samples[i].file).stem().string(); }

std::vector<double> predict_physical(Model<double>& model, const PointCloud& cloud, const NormStats& stats,
                                     LatentRecord* latent) {
    if (cloud.size() != model.config.n_points)
        throw DataError("cloud has " + std::to_string(cloud.size()) + " points, checkpoint expects " +
                        std::to_string(model.config.n_points));
    auto r = predict(model, cloud);
    if (latent) *latent = r.latents.at(0);
    const auto v = r.predictions.values();
    return denormalize_fields(std::vector<double>(v.begin(), v.end()), stats);
}

template <typename T>
void train_typed(const RunConfig& cfg, const fs::path& out, Logger& log) {
    const auto ds = load_dataset(cfg);
    const auto& stats = *ds.manifest.norm;
    const std::size_t n = common_points(ds);
    const auto mc = model_config(cfg, n, cfg.get<std::size_t>("global_feature"));
    const auto tc = train_config(cfg);
    const auto train = SampleSet::make(ds.split(Split::train), stats);
    const auto val = SampleSet::make(ds.split(Split::val), stats);
    const auto test = SampleSet::make(ds.split(Split::test), stats);

    log.line("model: " + std::to_string(parameter_count(mc)) + " trainable parameters");
    log.line("train/val/test samples: " + std::to_string(train.size()) + "/" + std::to_string(val.size()) + "/" +
             std::to_string(test.size()));
    auto model = build<T>(mc, cfg.get<std::uint64_t>("seed"));

    FitHooks<T> hooks;
    const std::size_t every = std::max<std::size_t>(1, tc.epochs / 20);
    hooks.on_epoch = [&](const EpochRecord& r) {
        if (r.epoch % every == 0 || r.epoch + 1 == tc.epochs)
            log.line("epoch " + std::to_string(r.epoch) + " train " + fixed(r.train_loss) +
                     (r.val_loss ? " val " + fixed(*r.val_loss) : std::string()) + " t " + fixed(r.seconds, 4) + "s");
    };
    const auto report = fit(model, train, val, tc, hooks);
    report.write_csv(out / "reports" / "loss.csv");

    const StorageType dtype = tc.precision == Precision::f64 ? StorageType::f64 : StorageType::f32;
    json extra{{"best_epoch", report.best_epoch}, {"epochs_run", report.epochs.size()}};
    save_checkpoint(out / "checkpoints" / "best.pcfn", model, stats, dtype, extra);

    std::ofstream summary(out / "reports" / "summary.txt");
    summary << "best epoch " << report.best_epoch << '\n';
    summary << "train loss " << fixed(evaluate_loss(model, train, tc.batch_size), 8) << '\n';
    summary << "val loss " << (val.size() ? fixed(evaluate_loss(model, val, tc.batch_size), 8) : "n/a") << '\n';
    summary << "test loss " << (test.size() ? fixed(evaluate_loss(model, test, tc.batch_size), 8) : "n/a") << '\n';
    summary << '\n' << format_breakdown(parameter_breakdown(mc));

    if (report.diverged) {
        throw NumericalError("training diverged; last good epoch " +
                             (report.last_good_epoch ? std::to_string(*report.last_good_epoch) : std::string("none")));
    }
    log.line("best epoch " + std::to_string(report.best_epoch) + ", checkpoint " +
             (out / "checkpoints" / "best.pcfn").string());
}

Split split_option(const RunConfig& cfg) { return split_from_string(cfg.get<std::string>("split")); }

}  // namespace

// ---------------------------------------------------------------------------

std::vector<std::string> schema_keys() {
    std::vector<std::string> k;
    for (const auto& [name, spec] : schema()) k.push_back(name);
    return k;
}

RunConfig RunConfig::defaults(std::string command) {
    RunConfig c;
    c.command_ = std::move(command);
    c.values_ = json::object();
    for (const auto& [k, spec] : schema()) c.values_[k] = spec.fallback;
    return c;
}

void RunConfig::merge(const json& overrides, const std::string& origin) {
    if (!overrides.is_object()) throw ConfigError(origin + ": expected a JSON object");
    for (const auto& [k, v] : overrides.items()) {
        const auto it = schema().find(k);
        if (it == schema().end()) throw ConfigError(origin + ": unknown key '" + k + "'");
        if (!type_ok(it->second.kind, v))
            throw ConfigError(origin + ": key '" + k + "' must be a " + kind_name(it->second.kind));
        values_[k] = v;
    }
}

void RunConfig::merge_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError("config " + path.string() + ": " + e.what());
    }
    merge(j, "config " + path.string());
}

void RunConfig::validate() const {
    const auto pos = [&](const char* k) {
        if (!(get<double>(k) > 0)) throw ConfigError(std::string(k) + " must be positive");
    };
    for (const char* k : {"radius_min", "radius_max", "radius_step", "outer_ratio", "rho", "u_inf", "mu",
                          "learning_rate", "epsilon", "memory_budget_gb"})
        pos(k);
    for (auto r : get<std::vector<double>>("radii"))
        if (!(r > 0)) throw ConfigError("radii must be positive");
    if (get<double>("radius_max") < get<double>("radius_min")) throw ConfigError("radius_max below radius_min");
    const double jitter = get<double>("jitter");
    if (!(jitter >= 0 && jitter < 0.5)) throw ConfigError("jitter must lie in [0, 0.5)");
    const auto preset = get<std::string>("preset");
    if (preset != "desk" && preset != "canonical") throw ConfigError("preset must be desk or canonical");
    precision_from_string(get<std::string>("precision"));
    split_from_string(get<std::string>("split"));
    if (get<std::size_t>("stencil_k") < 6) throw ConfigError("stencil_k must be at least 6");
    if (get<std::size_t>("points") < 1) throw ConfigError("points must be at least 1");
    const auto d = get<std::size_t>("input_dim");
    if (d != 2 && d != 3) throw ConfigError("input_dim must be 2 or 3");
    TrainConfig tc;
    tc.learning_rate = get<double>("learning_rate");
    tc.beta1 = get<double>("beta1");
    tc.beta2 = get<double>("beta2");
    tc.epsilon = get<double>("epsilon");
    tc.batch_size = get<std::size_t>("batch_size");
    tc.epochs = get<std::size_t>("epochs");
    tc.validate();
    ModelConfig::desk(get<std::size_t>("points"), d, get<std::size_t>("global_feature")).validate();
    for (auto g : get<std::vector<std::size_t>>("grid_global_features"))
        ModelConfig::desk(get<std::size_t>("points"), d, g).validate();
    for (auto b : get<std::vector<std::size_t>>("grid_batch_sizes"))
        if (b < 2) throw ConfigError("grid batch sizes must be at least 2");
}

json RunConfig::resolved() const {
    json j = values_;
    j["command"] = command_;
    return j;
}

fs::path RunConfig::path(const std::string& key) const { return fs::path(get<std::string>(key)); }

// ---------------------------------------------------------------------------

void cmd_gen_data(const RunConfig& cfg, std::ostream& os) {
    const auto out = prepare_run_dir(cfg);
    Logger log(os, out / "logs" / "gen-data.log");
    std::vector<double> radii = cfg.get<std::vector<double>>("radii");
    if (radii.empty()) {
        const double lo = cfg.get<double>("radius_min"), hi = cfg.get<double>("radius_max");
        const double step = cfg.get<double>("radius_step");
        for (std::size_t k = 0;; ++k) {
            const double r = std::round((lo + static_cast<double>(k) * step) * 1e9) / 1e9;
            if (r > hi + 1e-9 * step) break;
            radii.push_back(r);
        }
    }
    const std::size_t m = cfg.get<std::size_t>("samples");
    const std::size_t n = cfg.get<std::size_t>("points");
    const std::uint64_t seed = cfg.get<std::uint64_t>("seed");
    FreeStream fsm;
    fsm.rho = cfg.get<double>("rho");
    fsm.u_inf = cfg.get<double>("u_inf");
    fsm.p0 = cfg.get<double>("p0");
    fsm.mu = cfg.get<double>("mu");
    Grading grading;
    grading.outer_ratio = cfg.get<double>("outer_ratio");
    grading.jitter = cfg.get<double>("jitter");

    fs::create_directories(out / "samples");
    DatasetManifest manifest;
    manifest.seed = seed;
    manifest.generator = {{"kind", "potential_flow_cylinder"},
                          {"radii", radii},
                          {"samples", m},
                          {"points", n},
                          {"outer_ratio", grading.outer_ratio},
                          {"jitter", grading.jitter},
                          {"rho", fsm.rho},
                          {"u_inf", fsm.u_inf},
                          {"p0", fsm.p0},
                          {"mu", fsm.mu}};
    std::vector<PointCloud> clouds;
    for (std::size_t k = 0; k < m; ++k) {
        const auto geom = GeometryMeta::circle(0.0, 0.0, radii[k % radii.size()]);
        auto cloud = sample_cloud(geom, n, grading, seed * 1000003ull + k);
        apply_potential_flow(cloud, fsm);
        char name[48];
        std::snprintf(name, sizeof name, "samples/sample_%04zu.csv", k);
        write_sample(out / name, cloud);
        SampleEntry e;
        e.file = name;
        e.geometry = geom;
        e.reynolds = reynolds(fsm.rho, fsm.u_inf, fsm.mu, geom.length_scale());
        manifest.samples.push_back(e);
        clouds.push_back(std::move(cloud));
    }
    manifest = split_dataset(std::move(manifest), seed);
    std::vector<const PointCloud*> train;
    for (auto i : manifest.indices(Split::train)) train.push_back(&clouds[i]);
    manifest.norm = NormStats::fit(train, fsm.rho, fsm.u_inf, fsm.p0);
    manifest.save(out / "manifest.json");
    const auto sizes = split_sizes(m);
    log.line("wrote " + std::to_string(m) + " samples over " + std::to_string(radii.size()) + " radii; split " +
             std::to_string(sizes[0]) + "/" + std::to_string(sizes[1]) + "/" + std::to_string(sizes[2]));
}

void cmd_train(const RunConfig& cfg, std::ostream& os) {
    const auto out = prepare_run_dir(cfg);
    Logger log(os, out / "logs" / "train.log");
    if (precision_from_string(cfg.get<std::string>("precision")) == Precision::f32)
        train_typed<float>(cfg, out, log);
    else
        train_typed<double>(cfg, out, log);
}

void cmd_predict(const RunConfig& cfg, std::ostream& os) {
    const auto out = prepare_run_dir(cfg);
    Logger log(os, out / "logs" / "predict.log");
    CheckpointInfo info;
    auto model = load_model(cfg, info);
    if (!info.norm) throw DataError("checkpoint carries no normalisation statistics");
    const auto input = cfg.path("input");
    if (input.empty()) throw ConfigError("--input is required");
    const auto cloud = read_sample(input);
    const auto fields = predict_physical(model, cloud, *info.norm, nullptr);
    const auto target = out / "reports" / (input.stem().string() + "_prediction.csv");
    write_fields_csv(target, cloud, fields);
    log.line("wrote " + target.string());
}

void cmd_eval(const RunConfig& cfg, std::ostream& os) {
    const auto out = prepare_run_dir(cfg);
    Logger log(os, out / "logs" / "eval.log");
    CheckpointInfo info;
    auto model = load_model(cfg, info);
    const auto ds = load_dataset(cfg);
    const auto stats = info.norm ? *info.norm : *ds.manifest.norm;
    const double mu = ds.manifest.generator.value("mu", cfg.get<double>("mu"));
    const bool with_gradients = cfg.get<bool>("gradient_residuals");
    const bool plots = cfg.get<bool>("plots");
    fs::create_directories(out / "reports" / "errors");
    if (plots) fs::create_directories(out / "reports" / "plots");

    std::vector<NamedErrors> errs;
    std::vector<NamedResiduals> cons;
    std::vector<NamedGradientResiduals> grads;
    std::ostringstream crit;
    crit << "sample,critical_points,surface_points,surface_critical,boundary_coverage\n";
    const auto idx = ds.manifest.indices(split_option(cfg));
    if (idx.empty()) throw DataError("split '" + cfg.get<std::string>("split") + "' is empty");
    for (auto i : idx) {
        const auto& cloud = ds.clouds[i];
        const auto name = sample_name(ds, i);
        LatentRecord latent;
        const auto pred = predict_physical(model, cloud, stats, &latent);
        const auto e = pointwise_errors(cloud, pred);
        errs.push_back({name, e});
        write_error_map(out / "reports" / "errors" / (name + ".csv"), cloud, e, latent.critical_set);

        PointCloud predicted = cloud;
        predicted.fields = pred;
        cons.push_back({name, conservation_residuals(predicted, stats.rho, mu, cfg.get<std::size_t>("stencil_k"))});
        if (with_gradients) {
            const auto g = gradient_residuals(model, cloud, stats, mu);
            grads.push_back({name, g.critical, g.noncritical});
        }
        const auto cr = critical_points(latent, cloud);
        crit << name << ',' << cr.indices.size() << ',' << cr.surface_points << ',' << cr.surface_critical << ','
             << (cr.boundary_coverage ? "true" : "false") << '\n';
        if (plots) {
            const char* fields[] = {"u", "v", "p"};
            for (int k = 0; k < 3; ++k) {
                std::vector<double> pv(cloud.size()), ev(cloud.size());
                for (std::size_t j = 0; j < cloud.size(); ++j) {
                    pv[j] = pred[j * 3 + k];
                    ev[j] = e.abs_error[j * 3 + k];
                }
                write_scatter_ppm(out / "reports" / "plots" / (name + "_" + fields[k] + ".ppm"), cloud, pv);
                write_scatter_ppm(out / "reports" / "plots" / (name + "_err_" + fields[k] + ".ppm"), cloud, ev);
            }
        }
        log.line("evaluated " + name + ": ||u-u~|| " + fixed(e.fields[0].euclidean) + ", ||v-v~|| " +
                 fixed(e.fields[1].euclidean) + ", ||p-p~|| " + fixed(e.fields[2].euclidean));
    }
    std::ofstream summary(out / "reports" / "summary.txt");
    summary << "Velocity and pressure errors (" << cfg.get<std::string>("split") << " split)\n\n"
            << error_table(errs) << "Integrated conservation residuals of the predicted fields\n\n"
            << conservation_table(cons) << '\n';
    if (with_gradients)
        summary << "Gradient residuals of the network outputs\n\n" << gradient_residual_table(grads) << '\n';
    std::ofstream(out / "reports" / "critical.csv") << crit.str();
    log.line("wrote " + (out / "reports" / "summary.txt").string());
}

void cmd_residuals(const RunConfig& cfg, std::ostream& os) {
    const auto out = prepare_run_dir(cfg);
    Logger log(os, out / "logs" / "residuals.log");
    const auto ds = load_dataset(cfg);
    const double mu = ds.manifest.generator.value("mu", cfg.get<double>("mu"));
    const double rho = ds.manifest.norm->rho;
    const bool have_model = !cfg.get<std::string>("checkpoint").empty();
    CheckpointInfo info;
    std::optional<Model<double>> model;
    if (have_model) model = load_model(cfg, info);
    const auto stats = info.norm ? *info.norm : *ds.manifest.norm;

    std::vector<NamedResiduals> truth, predicted;
    std::vector<NamedGradientResiduals> grads;
    std::ofstream csv(out / "reports" / "residuals.csv");
    csv << "sample,source,r_momentum_x,r_momentum_y,r_continuity\n";
    for (auto i : ds.manifest.indices(split_option(cfg))) {
        const auto& cloud = ds.clouds[i];
        const auto name = sample_name(ds, i);
        const auto st = build_stencils(cloud, cfg.get<std::size_t>("stencil_k"));
        const auto rt = conservation_residuals(cloud, st, rho, mu);
        truth.push_back({name, rt});
        csv << name << ",reference," << format_double(rt.momentum_x) << ',' << format_double(rt.momentum_y) << ','
            << format_double(rt.continuity) << '\n';
        if (model) {
            PointCloud pc = cloud;
            pc.fields = predict_physical(*model, cloud, stats, nullptr);
            const auto rp = conservation_residuals(pc, st, rho, mu);
            predicted.push_back({name, rp});
            csv << name << ",predicted," << format_double(rp.momentum_x) << ',' << format_double(rp.momentum_y)
                << ',' << format_double(rp.continuity) << '\n';
            if (cfg.get<bool>("gradient_residuals")) {
                const auto g = gradient_residuals(*model, cloud, stats, mu);
                grads.push_back({name, g.critical, g.noncritical});
            }
        }
    }
    std::ofstream summary(out / "reports" / "residuals.txt");
    summary << "Integrated conservation residuals of the reference fields\n\n" << conservation_table(truth) << '\n';
    if (model) {
        summary << "Integrated conservation residuals of the predicted fields\n\n"
                << conservation_table(predicted) << '\n';
        if (!grads.empty())
            summary << "Gradient residuals of the network outputs\n\n" << gradient_residual_table(grads) << '\n';
    }
    log.line("wrote " + (out / "reports" / "residuals.txt").string());
}

void cmd_critical(const RunConfig& cfg, std::ostream& os) {
    const auto out = prepare_run_dir(cfg);
    Logger log(os, out / "logs" / "critical.log");
    CheckpointInfo info;
    auto model = load_model(cfg, info);
    const auto ds = load_dataset(cfg);
    std::ofstream summary(out / "reports" / "critical.csv");
    summary << "sample,critical_points,bound,surface_points,surface_critical,boundary_coverage\n";
    std::ofstream points(out / "reports" / "critical_points.csv");
    points << "sample,index,x,y,on_surface\n";
    const std::size_t bound = std::min(model.config.n_points, model.config.global_feature);
    for (auto i : ds.manifest.indices(split_option(cfg))) {
        const auto& cloud = ds.clouds[i];
        const auto name = sample_name(ds, i);
        if (cloud.size() != model.config.n_points) throw DataError(name + ": point count does not match the checkpoint");
        const auto latent = predict(model, cloud).latents.at(0);
        const auto cr = critical_points(latent, cloud);
        summary << name << ',' << cr.indices.size() << ',' << bound << ',' << cr.surface_points << ','
                << cr.surface_critical << ',' << (cr.boundary_coverage ? "true" : "false") << '\n';
        const auto boundary = boundary_mask(cloud);
        for (auto j : cr.indices) {
            const bool surf = cloud.geometry.known() && cloud.geometry.on_surface(cloud.x(j), cloud.y(j), 1e-9);
            points << name << ',' << j << ',' << format_double(cloud.x(j)) << ',' << format_double(cloud.y(j)) << ','
                   << (surf ? 1 : 0) << '\n';
        }
        log.line(name + ": " + std::to_string(cr.indices.size()) + " critical points (bound " +
                 std::to_string(bound) + "), boundary coverage " + (cr.boundary_coverage ? "yes" : "no"));
    }
    log.line("reference: at N = 1024 and G = 1024, counts between 376 and 526 have been observed on the test set");
}

void cmd_grid_search(const RunConfig& cfg, std::ostream& os) {
    const auto out = prepare_run_dir(cfg);
    Logger log(os, out / "logs" / "grid-search.log");
    const auto ds = load_dataset(cfg);
    const auto& stats = *ds.manifest.norm;
    const std::size_t n = common_points(ds);
    const auto train = SampleSet::make(ds.split(Split::train), stats);
    const auto val = SampleSet::make(ds.split(Split::val), stats);
    const auto test = SampleSet::make(ds.split(Split::test), stats);

    GridSearchConfig gc;
    gc.global_features = cfg.get<std::vector<std::size_t>>("grid_global_features");
    gc.batch_sizes = cfg.get<std::vector<std::size_t>>("grid_batch_sizes");
    gc.train = train_config(cfg);
    gc.model_seed = cfg.get<std::uint64_t>("seed");
    gc.memory_budget_bytes = cfg.get<double>("memory_budget_gb") * 1e9;
    gc.results_csv = out / "reports" / "grid.csv";
    gc.model_for = [&](std::size_t g) {
        const auto preset = cfg.get<std::string>("preset");
        auto mc = preset == "canonical" ? ModelConfig::canonical(n, cfg.get<std::size_t>("input_dim"), g)
                                        : ModelConfig::desk(n, cfg.get<std::size_t>("input_dim"), g);
        mc.validate();
        return mc;
    };
    const auto cells = grid_search(train, val, test, gc, [&](const GridCell& c) {
        log.line("G " + std::to_string(c.global_feature) + " batch " + std::to_string(c.batch_size) + ": " +
                 (c.feasible ? "train " + fixed(c.train_loss) + " val " + fixed(c.val_loss) + " test " +
                                   fixed(c.test_loss) + " " + fixed(c.seconds, 4) + "s"
                             : std::string("infeasible")));
    });
    write_grid_csv(out / "reports" / "grid.csv", cells);
    std::ofstream(out / "reports" / "grid.txt") << grid_table(cells);
    log.line("wrote " + (out / "reports" / "grid.csv").string() + " and grid.txt");
}

// ---------------------------------------------------------------------------

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Point-cloud flow-field surrogate"};
    app.require_subcommand(1);
    struct Flag {
        const char* flag;
        const char* key;
        const char* help;
    };
    static const Flag flags[] = {
        {"--seed", "seed", "random seed"},
        {"--data", "data", "dataset directory holding manifest.json"},
        {"--checkpoint", "checkpoint", "model checkpoint"},
        {"--out", "out", "run directory"},
        {"--input", "input", "coordinates CSV for predict"},
        {"--points", "points", "points per cloud"},
        {"--global-feature", "global_feature", "global feature size"},
        {"--batch-size", "batch_size", "minibatch size"},
        {"--epochs", "epochs", "training epochs"},
        {"--lr", "learning_rate", "Adam learning rate"},
        {"--precision", "precision", "f32 or f64"},
        {"--stencil-k", "stencil_k", "neighbours per derivative stencil"},
    };
    const std::vector<std::pair<std::string, std::string>> commands = {
        {"gen-data", "generate potential-flow samples, split and normalise them"},
        {"train", "train a model on a dataset"},
        {"predict", "predict physical fields for a coordinates CSV"},
        {"eval", "error norms, residuals and critical points on a split"},
        {"residuals", "conservation and gradient residuals on a split"},
        {"critical", "critical point sets on a split"},
        {"grid-search", "train over global-feature and batch sizes"},
    };
    std::map<std::string, std::string> flag_values;
    std::string config_path;
    std::vector<CLI::App*> subs;
    for (const auto& [name, help] : commands) {
        auto* sub = app.add_subcommand(name, help);
        sub->add_option("--config", config_path, "JSON config file");
        for (const auto& f : flags) sub->add_option(f.flag, flag_values[f.key], f.help);
        subs.push_back(sub);
    }

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) {
            out << app.help();
            return 0;
        }
        err << "error class=config message=" << json(std::string(e.what())).dump() << '\n';
        return static_cast<int>(ErrorClass::config);
    }

    try {
        CLI::App* chosen = nullptr;
        for (auto* s : subs)
            if (s->parsed()) chosen = s;
        RunConfig cfg = RunConfig::defaults(chosen->get_name());
        if (!config_path.empty()) cfg.merge_file(config_path);
        json overrides = json::object();
        for (const auto& f : flags)
            if (chosen->count(f.flag) > 0) overrides[f.key] = parse_flag(f.key, flag_values[f.key]);
        cfg.merge(overrides, "command line");
        cfg.validate();

        const auto& c = cfg.command();
        if (c == "gen-data") cmd_gen_data(cfg, out);
        else if (c == "train") cmd_train(cfg, out);
        else if (c == "predict") cmd_predict(cfg, out);
        else if (c == "eval") cmd_eval(cfg, out);
        else if (c == "residuals") cmd_residuals(cfg, out);
        else if (c == "critical") cmd_critical(cfg, out);
        else if (c == "grid-search") cmd_grid_search(cfg, out);
        return 0;
    } catch (const Error& e) {
        err << "error class=" << to_string(e.error_class()) << " message=" << json(std::string(e.what())).dump()
            << '\n';
        return static_cast<int>(e.error_class());
    } catch (const fs::filesystem_error& e) {
        err << "error class=data message=" << json(std::string(e.what())).dump() << '\n';
        return static_cast<int>(ErrorClass::data);
    }
}

}  // namespace cloudflow::cli
