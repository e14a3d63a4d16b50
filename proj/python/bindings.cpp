#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <optional>
#include <sstream>

#include "cloudflow/checkpoint.hpp"
#include "cloudflow/cli.hpp"
#include "cloudflow/data.hpp"
#include "cloudflow/error.hpp"
#include "cloudflow/eval.hpp"
#include "cloudflow/model.hpp"

namespace py = pybind11;
using namespace cloudflow;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Array to_array(const std::vector<double>& v, std::size_t cols) {
    Array a({static_cast<py::ssize_t>(v.size() / cols), static_cast<py::ssize_t>(cols)});
    std::copy(v.begin(), v.end(), a.mutable_data());
    return a;
}

std::vector<double> from_array(const Array& a, std::size_t cols, const char* what) {
    if (a.ndim() != 2 || a.shape(1) != static_cast<py::ssize_t>(cols))
        throw DimensionError(std::string(what) + " must have shape (n, " + std::to_string(cols) + ")");
    return {a.data(), a.data() + a.size()};
}

PointCloud make_cloud(const Array& coords, const std::optional<Array>& fields) {
    PointCloud c;
    c.dim = 2;
    c.coords = from_array(coords, 2, "coords");
    if (fields) {
        c.fields = from_array(*fields, 3, "fields");
        if (c.fields.size() / 3 != c.size()) throw DimensionError("coords and fields hold different point counts");
    }
    c.validate();
    return c;
}

// A trained checkpoint loaded once and queried in physical units.
class Predictor {
public:
    explicit Predictor(const std::filesystem::path& path) : model_(load_checkpoint<double>(path, &info_)) {
        if (!info_.norm) throw DataError("checkpoint carries no normalisation statistics");
    }

    std::size_t n_points() const { return model_.config.n_points; }
    std::size_t global_feature() const { return model_.config.global_feature; }

    Array predict_fields(const Array& coords) {
        const auto r = run(coords);
        const auto v = r.predictions.values();
        return to_array(denormalize_fields(std::vector<double>(v.begin(), v.end()), *info_.norm), 3);
    }

    std::vector<std::size_t> critical_set(const Array& coords) { return run(coords).latents.at(0).critical_set; }

private:
    ForwardResult<double> run(const Array& coords) {
        const auto cloud = make_cloud(coords, std::nullopt);
        if (cloud.size() != model_.config.n_points)
            throw DataError("cloud has " + std::to_string(cloud.size()) + " points, checkpoint expects " +
                            std::to_string(model_.config.n_points));
        return predict(model_, cloud);
    }

    CheckpointInfo info_;
    Model<double> model_;
};

}  // namespace

PYBIND11_MODULE(_cloudflow, m) {
    m.doc() = "Point-cloud flow-field regression: sampling, inference and residual checks.";

    auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
    py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
    py::register_exception<DataError>(m, "DataError", base.ptr());
    py::register_exception<NumericalError>(m, "NumericalError", base.ptr());

    m.def(
        "sample_cylinder",
        [](double radius, std::size_t n_points, std::uint64_t seed, double u_inf, double rho, double mu) {
            auto c = sample_cloud(GeometryMeta::circle(0.0, 0.0, radius), n_points, Grading{}, seed);
            apply_potential_flow(c, FreeStream{u_inf, rho, 0.0, mu});
            return py::make_tuple(to_array(c.coords, 2), to_array(c.fields, 3));
        },
        py::arg("radius"), py::arg("n_points"), py::arg("seed") = 0, py::arg("u_inf") = 1.0, py::arg("rho") = 1.0,
        py::arg("mu") = 0.05, "Graded cloud around a cylinder at the origin with potential-flow fields (u, v, p).");

    m.def(
        "conservation_residuals",
        [](const Array& coords, const Array& fields, double rho, double mu, std::size_t k) {
            const auto r = cloudflow::conservation_residuals(make_cloud(coords, fields), rho, mu, k);
            return py::make_tuple(r.momentum_x, r.momentum_y, r.continuity);
        },
        py::arg("coords"), py::arg("fields"), py::arg("rho") = 1.0, py::arg("mu") = 0.05,
        py::arg("k") = kDefaultStencilK, "Area-weighted (momentum_x, momentum_y, continuity) residuals.");

    m.def(
        "parameter_count",
        [](std::size_t n_points, std::size_t global_feature, std::size_t dim) {
            return cloudflow::parameter_count(ModelConfig::desk(n_points, dim, global_feature));
        },
        py::arg("n_points"), py::arg("global_feature"), py::arg("dim") = 2,
        "Trainable parameters of the desk-scale network.");

    m.def(
        "run",
        [](const std::vector<std::string>& args) {
            std::ostringstream out, err;
            const int code = cli::run(args, out, err);
            return py::make_tuple(code, out.str(), err.str());
        },
        py::arg("args"), "Runs one command-line invocation in process; returns (exit_code, stdout, stderr).");

    py::class_<Predictor>(m, "Predictor")
        .def(py::init<std::filesystem::path>(), py::arg("checkpoint"))
        .def_property_readonly("n_points", &Predictor::n_points)
        .def_property_readonly("global_feature", &Predictor::global_feature)
        .def("predict", &Predictor::predict_fields, py::arg("coords"), "Physical (u, v, p) per point.")
        .def("critical_set", &Predictor::critical_set, py::arg("coords"),
             "Sorted indices of the points that win the global max pooling.");
}
