#include "cloudflow/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numbers>
#include <random>
#include <sstream>

#include "cloudflow/error.hpp"

namespace cloudflow {

double reynolds(double rho, double u_inf, double mu, double length) {
    if (!(rho > 0) || !(u_inf > 0) || !(mu > 0) || !(length > 0))
        throw DomainError("reynolds: density, velocity, viscosity and length must be positive");
    return rho * length * u_inf / mu;
}

FlowState potential_flow_cylinder(double cx, double cy, double radius, const FreeStream& fs, double x, double y) {
    const double dx = x - cx, dy = y - cy;
    const double r2 = dx * dx + dy * dy;
    if (r2 < radius * radius * (1.0 - 1e-12))
        throw DomainError("potential flow: point (" + std::to_string(x) + ", " + std::to_string(y) +
                          ") lies inside the cylinder");
    // u - i v = U (1 - R^2 / z^2)
    const double R2 = radius * radius;
    const double cos2 = (dx * dx - dy * dy) / r2;
    const double sin2 = 2.0 * dx * dy / r2;
    FlowState s;
    s.u = fs.u_inf * (1.0 - R2 * cos2 / r2);
    s.v = -fs.u_inf * R2 * sin2 / r2;
    s.p = fs.p0 + 0.5 * fs.rho * (fs.u_inf * fs.u_inf - (s.u * s.u + s.v * s.v));
    return s;
}

void apply_potential_flow(PointCloud& cloud, const FreeStream& fs) {
    if (cloud.geometry.kind != GeometryMeta::Kind::circle)
        throw DataError("potential flow oracle needs circle geometry, got " + cloud.geometry.kind_name());
    const auto& g = cloud.geometry;
    cloud.fields.resize(cloud.size() * 3);
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        const auto s = potential_flow_cylinder(g.cx, g.cy, g.a, fs, cloud.x(i), cloud.y(i));
        cloud.fields[i * 3] = s.u;
        cloud.fields[i * 3 + 1] = s.v;
        cloud.fields[i * 3 + 2] = s.p;
    }
}

namespace {

std::size_t ring_count(std::size_t surface, double outer_ratio) {
    const double dtheta = 2.0 * std::numbers::pi / static_cast<double>(surface);
    return static_cast<std::size_t>(std::ceil(std::log(outer_ratio) / dtheta));
}

void check_grading(const Grading& g) {
    if (!(g.outer_ratio > 1.0)) throw DataError("grading: outer_ratio must exceed 1");
    if (!(g.jitter >= 0.0 && g.jitter <= 0.45)) throw DataError("grading: jitter must lie in [0, 0.45]");
}

}  // namespace

std::size_t surface_point_count(std::size_t n_points, const Grading& grading) {
    check_grading(grading);
    if (grading.surface_points > 0) return grading.surface_points;
    for (std::size_t s = 8;; ++s)
        if (s * (ring_count(s, grading.outer_ratio) + 1) >= n_points) return s;
}

PointCloud sample_cloud(const GeometryMeta& geometry, std::size_t n_points, const Grading& grading,
                        std::uint64_t seed) {
    if (geometry.kind != GeometryMeta::Kind::circle)
        throw DataError("sample_cloud: the generator builds circular cylinders only; ingest other shapes as CSV");
    if (!(geometry.a > 0)) throw DataError("sample_cloud: radius must be positive");
    const std::size_t ns = surface_point_count(n_points, grading);
    if (ns < 8) throw DataError("sample_cloud: at least 8 surface points are needed");
    if (n_points < ns)
        throw DataError("sample_cloud: " + std::to_string(n_points) + " points cannot hold the " +
                        std::to_string(ns) + " surface points");
    const std::size_t rings = ring_count(ns, grading.outer_ratio);
    if (ns * (rings + 1) < n_points)
        throw DataError("sample_cloud: grading yields only " + std::to_string(ns * (rings + 1)) + " points, " +
                        std::to_string(n_points) + " requested");

    const double R = geometry.a;
    const double dtheta = 2.0 * std::numbers::pi / static_cast<double>(ns);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(-1.0, 1.0);

    struct Candidate {
        double dist;
        std::size_t order;
        double x, y;
    };
    std::vector<Candidate> pts;
    pts.reserve(ns * (rings + 1));
    for (std::size_t k = 0; k <= rings; ++k) {
        const double r = R * std::exp(static_cast<double>(k) * dtheta);
        const double offset = (k % 2) ? 0.5 : 0.0;
        for (std::size_t j = 0; j < ns; ++j) {
            double rr = r;
            double th = (static_cast<double>(j) + offset) * dtheta;
            if (k > 0) {
                rr += grading.jitter * r * dtheta * unit(rng);
                th += grading.jitter * dtheta * unit(rng);
            }
            pts.push_back({rr, pts.size(), geometry.cx + rr * std::cos(th), geometry.cy + rr * std::sin(th)});
        }
    }
    std::stable_sort(pts.begin(), pts.end(), [](const Candidate& a, const Candidate& b) { return a.dist < b.dist; });

    PointCloud cloud;
    cloud.dim = 2;
    cloud.geometry = geometry;
    cloud.coords.reserve(n_points * 2);
    for (std::size_t i = 0; i < n_points; ++i) {
        // Surface points sit exactly on the circle.
        cloud.coords.push_back(pts[i].x);
        cloud.coords.push_back(pts[i].y);
    }
    return cloud;
}

std::array<double, 3> nondimensionalize(double u, double v, double p, double rho, double u_inf, double p0) {
    return {u / u_inf, v / u_inf, (p - p0) / (rho * u_inf * u_inf)};
}

std::array<double, 3> dimensionalize(double us, double vs, double ps, double rho, double u_inf, double p0) {
    return {us * u_inf, vs * u_inf, p0 + ps * rho * u_inf * u_inf};
}

double minmax_scale(double value, double lo, double hi) {
    if (!(hi > lo)) throw DataError("min-max scaling: degenerate range [" + std::to_string(lo) + ", " +
                                    std::to_string(hi) + "]");
    return (value - lo) / (hi - lo);
}

double minmax_unscale(double scaled, double lo, double hi) {
    if (!(hi > lo)) throw DataError("min-max scaling: degenerate range [" + std::to_string(lo) + ", " +
                                    std::to_string(hi) + "]");
    return lo + scaled * (hi - lo);
}

NormStats NormStats::fit(const std::vector<const PointCloud*>& training, double rho, double u_inf, double p0) {
    if (!(rho > 0) || !(u_inf > 0)) throw DomainError("normalisation: rho and u_inf must be positive");
    NormStats s;
    s.rho = rho;
    s.u_inf = u_inf;
    s.p0 = p0;
    s.min.fill(std::numeric_limits<double>::infinity());
    s.max.fill(-std::numeric_limits<double>::infinity());
    for (const auto* c : training) {
        if (!c->has_fields()) throw DataError("normalisation: training sample without fields");
        for (std::size_t i = 0; i < c->size(); ++i) {
            const auto d = nondimensionalize(c->u(i), c->v(i), c->p(i), rho, u_inf, p0);
            for (int k = 0; k < 3; ++k) {
                s.min[k] = std::min(s.min[k], d[k]);
                s.max[k] = std::max(s.max[k], d[k]);
            }
        }
    }
    s.validate();
    return s;
}

void NormStats::validate() const {
    if (!(rho > 0) || !(u_inf > 0)) throw DataError("normalisation: rho and u_inf must be positive");
    static const char* names[] = {"u*", "v*", "p*"};
    for (int k = 0; k < 3; ++k)
        if (!(max[k] > min[k]))
            throw DataError(std::string("normalisation: degenerate range for ") + names[k]);
}

std::vector<double> normalize_fields(const PointCloud& cloud, const NormStats& stats) {
    if (!cloud.has_fields()) throw DataError("normalisation: cloud has no fields");
    std::vector<double> out(cloud.size() * 3);
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        const auto d = nondimensionalize(cloud.u(i), cloud.v(i), cloud.p(i), stats.rho, stats.u_inf, stats.p0);
        for (int k = 0; k < 3; ++k) out[i * 3 + k] = minmax_scale(d[k], stats.min[k], stats.max[k]);
    }
    return out;
}

std::vector<double> denormalize_fields(std::span<const double> scaled, const NormStats& stats) {
    if (scaled.size() % 3 != 0) throw DataError("denormalisation: expected N x 3 values");
    std::vector<double> out(scaled.size());
    for (std::size_t i = 0; i < scaled.size() / 3; ++i) {
        std::array<double, 3> d;
        for (int k = 0; k < 3; ++k) d[k] = minmax_unscale(scaled[i * 3 + k], stats.min[k], stats.max[k]);
        const auto phys = dimensionalize(d[0], d[1], d[2], stats.rho, stats.u_inf, stats.p0);
        for (int k = 0; k < 3; ++k) out[i * 3 + k] = phys[k];
    }
    return out;
}

// ---------------------------------------------------------------------------
// CSV

std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

namespace {

std::string fmt(double v) { return format_double(v); }

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split(const std::string& line, char sep) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream is(line);
    while (std::getline(is, cur, sep)) out.push_back(trim(cur));
    if (!line.empty() && line.back() == sep) out.emplace_back();
    return out;
}

double parse_double(const std::string& s, std::size_t line, const std::string& column) {
    double v = 0.0;
    const char* b = s.data();
    const char* e = s.data() + s.size();
    auto res = std::from_chars(b, e, v);
    if (res.ec != std::errc() || res.ptr != e || s.empty())
        throw ParseError("column '" + column + "': cannot parse '" + s + "' as a number", line);
    if (!std::isfinite(v)) throw ParseError("column '" + column + "': non-finite value", line);
    return v;
}

void parse_geometry(const std::string& body, GeometryMeta& g, std::size_t line) {
    std::istringstream is(body);
    std::string tok;
    while (is >> tok) {
        const auto eq = tok.find('=');
        if (eq == std::string::npos) throw ParseError("geometry: expected key=value, got '" + tok + "'", line);
        const std::string key = tok.substr(0, eq), val = tok.substr(eq + 1);
        if (key == "kind") {
            try {
                g.kind = GeometryMeta::kind_from_name(val);
            } catch (const DataError& e) {
                throw ParseError(e.what(), line);
            }
        } else if (key == "sides") {
            g.sides = static_cast<int>(parse_double(val, line, key));
        } else {
            const double v = parse_double(val, line, key);
            if (key == "cx") g.cx = v;
            else if (key == "cy") g.cy = v;
            else if (key == "a") g.a = v;
            else if (key == "b") g.b = v;
            else if (key == "angle") g.angle = v;
            else throw ParseError("geometry: unknown key '" + key + "'", line);
        }
    }
}

}  // namespace

std::string geometry_comment(const GeometryMeta& g) {
    std::ostringstream os;
    os << "# geometry kind=" << g.kind_name() << " cx=" << fmt(g.cx) << " cy=" << fmt(g.cy) << " a=" << fmt(g.a)
       << " b=" << fmt(g.b) << " angle=" << fmt(g.angle) << " sides=" << g.sides;
    return os.str();
}

void write_sample(const std::filesystem::path& path, const PointCloud& cloud) {
    cloud.validate();
    if (cloud.dim != 2) throw DataError("sample CSV holds 2-D clouds only");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open '" + path.string() + "' for writing");
    if (cloud.geometry.known()) os << geometry_comment(cloud.geometry) << '\n';
    os << (cloud.has_fields() ? "x,y,u,v,p\n" : "x,y\n");
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        os << fmt(cloud.x(i)) << ',' << fmt(cloud.y(i));
        if (cloud.has_fields()) os << ',' << fmt(cloud.u(i)) << ',' << fmt(cloud.v(i)) << ',' << fmt(cloud.p(i));
        os << '\n';
    }
    if (!os) throw DataError("failed writing '" + path.string() + "'");
}

PointCloud read_sample(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open sample '" + path.string() + "'");
    PointCloud cloud;
    cloud.dim = 2;
    std::map<std::string, std::size_t> col;
    bool header = false, fields = false;
    std::string raw;
    std::size_t line = 0;
    while (std::getline(is, raw)) {
        ++line;
        const std::string s = trim(raw);
        if (s.empty()) continue;
        if (s[0] == '#') {
            const std::string body = trim(std::string_view(s).substr(1));
            if (body.rfind("geometry", 0) == 0) parse_geometry(body.substr(8), cloud.geometry, line);
            continue;
        }
        const auto cells = split(s, ',');
        if (!header) {
            for (std::size_t i = 0; i < cells.size(); ++i) col[cells[i]] = i;
            for (const char* need : {"x", "y"})
                if (!col.count(need)) throw ParseError(std::string("missing column '") + need + "'", line);
            const int have = static_cast<int>(col.count("u") + col.count("v") + col.count("p"));
            if (have != 0 && have != 3) {
                for (const char* need : {"u", "v", "p"})
                    if (!col.count(need)) throw ParseError(std::string("missing column '") + need + "'", line);
            }
            fields = have == 3;
            header = true;
            continue;
        }
        if (cells.size() != col.size())
            throw ParseError("expected " + std::to_string(col.size()) + " values, got " + std::to_string(cells.size()),
                             line);
        cloud.coords.push_back(parse_double(cells[col["x"]], line, "x"));
        cloud.coords.push_back(parse_double(cells[col["y"]], line, "y"));
        if (fields)
            for (const char* f : {"u", "v", "p"}) cloud.fields.push_back(parse_double(cells[col[f]], line, f));
    }
    if (!header) throw ParseError("missing header line", line);
    return cloud;
}

}  // namespace cloudflow
