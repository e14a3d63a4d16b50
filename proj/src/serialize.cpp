#include "cloudflow/serialize.hpp"

#include "cloudflow/error.hpp"

namespace cloudflow {

using nlohmann::json;

namespace {

template <typename T>
T field(const json& j, const char* key, const char* what) {
    if (!j.contains(key)) throw DataError(std::string(what) + ": missing key '" + key + "'");
    try {
        return j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw DataError(std::string(what) + ": bad value for '" + key + "': " + e.what());
    }
}

}  // namespace

json to_json(const ModelConfig& c) {
    return json{{"n_points", c.n_points},
                {"input_dim", c.input_dim},
                {"n_cfd", c.n_cfd},
                {"global_feature", c.global_feature},
                {"point_mlp", c.point_mlp},
                {"feature_mlp", c.feature_mlp},
                {"tnet_point_mlp", c.tnet_point_mlp},
                {"tnet_fc", c.tnet_fc},
                {"tail_mlp", c.tail_mlp},
                {"input_transform", c.input_transform},
                {"feature_transform", c.feature_transform}};
}

ModelConfig model_config_from_json(const json& j) {
    constexpr const char* what = "model config";
    ModelConfig c;
    c.n_points = field<std::size_t>(j, "n_points", what);
    c.input_dim = field<std::size_t>(j, "input_dim", what);
    c.n_cfd = field<std::size_t>(j, "n_cfd", what);
    c.global_feature = field<std::size_t>(j, "global_feature", what);
    c.point_mlp = field<std::vector<std::size_t>>(j, "point_mlp", what);
    c.feature_mlp = field<std::vector<std::size_t>>(j, "feature_mlp", what);
    c.tnet_point_mlp = field<std::vector<std::size_t>>(j, "tnet_point_mlp", what);
    c.tnet_fc = field<std::vector<std::size_t>>(j, "tnet_fc", what);
    c.tail_mlp = field<std::vector<std::size_t>>(j, "tail_mlp", what);
    c.input_transform = field<bool>(j, "input_transform", what);
    c.feature_transform = field<bool>(j, "feature_transform", what);
    return c;
}

json to_json(const NormStats& s) {
    return json{{"rho", s.rho},
                {"u_inf", s.u_inf},
                {"p0", s.p0},
                {"min", {s.min[0], s.min[1], s.min[2]}},
                {"max", {s.max[0], s.max[1], s.max[2]}}};
}

NormStats norm_stats_from_json(const json& j) {
    constexpr const char* what = "norm stats";
    NormStats s;
    s.rho = field<double>(j, "rho", what);
    s.u_inf = field<double>(j, "u_inf", what);
    s.p0 = field<double>(j, "p0", what);
    s.min = field<std::array<double, 3>>(j, "min", what);
    s.max = field<std::array<double, 3>>(j, "max", what);
    s.validate();
    return s;
}

json to_json(const GeometryMeta& g) {
    json j{{"kind", g.kind_name()}, {"cx", g.cx}, {"cy", g.cy}, {"a", g.a}, {"b", g.b}, {"angle", g.angle}};
    if (g.kind == GeometryMeta::Kind::polygon) j["sides"] = g.sides;
    return j;
}

GeometryMeta geometry_from_json(const json& j) {
    constexpr const char* what = "geometry";
    GeometryMeta g;
    g.kind = GeometryMeta::kind_from_name(field<std::string>(j, "kind", what));
    g.cx = field<double>(j, "cx", what);
    g.cy = field<double>(j, "cy", what);
    g.a = field<double>(j, "a", what);
    g.b = field<double>(j, "b", what);
    g.angle = field<double>(j, "angle", what);
    if (j.contains("sides")) g.sides = field<int>(j, "sides", what);
    return g;
}

}  // namespace cloudflow
