#include "cloudflow/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <limits>
#include <sstream>

#include "cloudflow/data.hpp"
#include "cloudflow/error.hpp"

namespace cloudflow {

namespace fs = std::filesystem;

namespace {

std::string sci(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4e", v);
    return buf;
}

// Display width of UTF-8 text: continuation bytes take no column.
std::size_t width(const std::string& s) {
    return static_cast<std::size_t>(std::count_if(s.begin(), s.end(), [](char c) { return (c & 0xC0) != 0x80; }));
}

std::string fixed_seconds(double s) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.1f s", s);
    return buf;
}

std::string pad(const std::string& s, std::size_t w) {
    const auto n = width(s);
    return n >= w ? s : s + std::string(w - n, ' ');
}

struct Table {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    std::string render() const {
        std::vector<std::size_t> w(header.size());
        for (std::size_t c = 0; c < header.size(); ++c) w[c] = width(header[c]);
        for (const auto& r : rows)
            for (std::size_t c = 0; c < r.size(); ++c) w[c] = std::max(w[c], width(r[c]));
        std::ostringstream os;
        auto line = [&](const std::vector<std::string>& r) {
            for (std::size_t c = 0; c < r.size(); ++c) os << (c ? "  " : "") << pad(r[c], w[c]);
            os << '\n';
        };
        line(header);
        std::size_t total = 0;
        for (auto x : w) total += x + 2;
        os << std::string(total - 2, '-') << '\n';
        for (const auto& r : rows) line(r);
        return os.str();
    }
};

// Appends average / maximum / minimum rows over the numeric columns.
void add_summary(Table& t, const std::vector<std::vector<double>>& values) {
    if (values.empty()) return;
    const std::size_t cols = values.front().size();
    const char* names[] = {"Average", "Maximum", "Minimum"};
    for (int s = 0; s < 3; ++s) {
        std::vector<std::string> row{names[s]};
        for (std::size_t c = 0; c < cols; ++c) {
            double acc = s == 0 ? 0.0 : (s == 1 ? -std::numeric_limits<double>::infinity()
                                                : std::numeric_limits<double>::infinity());
            for (const auto& v : values) {
                if (s == 0) acc += v[c];
                if (s == 1) acc = std::max(acc, v[c]);
                if (s == 2) acc = std::min(acc, v[c]);
            }
            if (s == 0) acc /= static_cast<double>(values.size());
            row.push_back(sci(acc));
        }
        t.rows.push_back(row);
    }
}

}  // namespace

std::string error_table(const std::vector<NamedErrors>& rows) {
    std::ostringstream os;
    struct Variant {
        const char* title;
        std::function<double(const FieldNorms&)> get;
    };
    const Variant variants[] = {
        {"Euclidean norm over points", [](const FieldNorms& f) { return f.euclidean; }},
        {"Root mean square", [](const FieldNorms& f) { return f.rms; }},
        {"Relative to the reference norm",
         [](const FieldNorms& f) { return f.relative_defined ? f.relative : std::nan(""); }},
    };
    for (const auto& var : variants) {
        Table t;
        t.header = {"Sample", "||u - u~||", "||v - v~||", "||p - p~||"};
        std::vector<std::vector<double>> vals;
        for (const auto& r : rows) {
            std::vector<double> v;
            std::vector<std::string> row{r.sample};
            for (const auto& f : r.errors.fields) {
                v.push_back(var.get(f));
                row.push_back(std::isnan(v.back()) ? "undefined" : sci(v.back()));
            }
            t.rows.push_back(row);
            if (std::none_of(v.begin(), v.end(), [](double x) { return std::isnan(x); })) vals.push_back(v);
        }
        add_summary(t, vals);
        os << var.title << '\n' << t.render() << '\n';
    }
    return os.str();
}

std::string conservation_table(const std::vector<NamedResiduals>& rows) {
    Table t;
    t.header = {"Sample", "r_momentum_x", "r_momentum_y", "r_continuity"};
    std::vector<std::vector<double>> vals;
    for (const auto& r : rows) {
        const auto& x = r.residuals;
        vals.push_back({x.momentum_x, x.momentum_y, x.continuity});
        t.rows.push_back({r.sample, sci(x.momentum_x), sci(x.momentum_y), sci(x.continuity)});
    }
    add_summary(t, vals);
    return t.render();
}

std::string gradient_residual_table(const std::vector<NamedGradientResiduals>& rows) {
    Table t;
    t.header = {"Point set", "Statistic", "r^_momentum_x", "r^_momentum_y", "r^_continuity", "M"};
    for (int set = 0; set < 2; ++set) {
        std::vector<std::vector<double>> vals;
        for (const auto& r : rows) {
            const auto& s = set == 0 ? r.critical : r.noncritical;
            if (s.empty) continue;
            vals.push_back({s.r.momentum_x, s.r.momentum_y, s.r.continuity, static_cast<double>(s.count)});
        }
        const char* name = set == 0 ? "Interior critical" : "Interior non-critical";
        if (vals.empty()) {
            t.rows.push_back({name, "(empty)", "", "", "", "0"});
            continue;
        }
        Table tmp;
        add_summary(tmp, vals);
        for (auto& row : tmp.rows) {
            std::vector<std::string> out{name, row[0], row[1], row[2], row[3]};
            char m[32];
            std::snprintf(m, sizeof m, "%.1f", std::stod(row[4]));
            out.push_back(m);
            t.rows.push_back(out);
        }
    }
    return t.render();
}

void write_error_map(const fs::path& path, const PointCloud& cloud, const ErrorReport& errors,
                     const std::vector<std::size_t>& critical) {
    if (errors.abs_error.size() != cloud.size() * 3) throw DimensionError("error map: size mismatch");
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path.string());
    out << "x,y,err_u,err_v,err_p,is_critical\n";
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        const bool crit = std::binary_search(critical.begin(), critical.end(), i);
        out << format_double(cloud.x(i)) << ',' << format_double(cloud.y(i));
        for (int k = 0; k < 3; ++k) out << ',' << format_double(errors.abs_error[i * 3 + k]);
        out << ',' << (crit ? 1 : 0) << '\n';
    }
}

void write_fields_csv(const fs::path& path, const PointCloud& cloud, std::span<const double> fields) {
    PointCloud c = cloud;
    c.fields.assign(fields.begin(), fields.end());
    write_sample(path, c);
}

void write_scatter_ppm(const fs::path& path, const PointCloud& cloud, std::span<const double> values,
                       std::size_t size) {
    if (values.size() != cloud.size()) throw DimensionError("scatter plot: one value per point expected");
    if (cloud.size() == 0 || size < 8) throw DataError("scatter plot: nothing to draw");
    double x0 = cloud.x(0), x1 = x0, y0 = cloud.y(0), y1 = y0;
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        x0 = std::min(x0, cloud.x(i));
        x1 = std::max(x1, cloud.x(i));
        y0 = std::min(y0, cloud.y(i));
        y1 = std::max(y1, cloud.y(i));
    }
    const double span = std::max({x1 - x0, y1 - y0, 1e-300});
    const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
    const double lo = *lo_it, range = std::max(*hi_it - lo, 1e-300);

    std::vector<unsigned char> img(size * size * 3, 255);
    const double margin = 4.0, scale = (static_cast<double>(size) - 2 * margin) / span;
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        const double t = (values[i] - lo) / range;
        const unsigned char r = static_cast<unsigned char>(255 * t);
        const unsigned char g = static_cast<unsigned char>(255 * (1 - std::abs(2 * t - 1)));
        const unsigned char b = static_cast<unsigned char>(255 * (1 - t));
        const long px = std::lround(margin + (cloud.x(i) - x0) * scale);
        const long py = std::lround(static_cast<double>(size) - 1 - margin - (cloud.y(i) - y0) * scale);
        for (long dy = -1; dy <= 1; ++dy)
            for (long dx = -1; dx <= 1; ++dx) {
                const long xx = px + dx, yy = py + dy;
                if (xx < 0 || yy < 0 || xx >= static_cast<long>(size) || yy >= static_cast<long>(size)) continue;
                unsigned char* p = &img[(static_cast<std::size_t>(yy) * size + static_cast<std::size_t>(xx)) * 3];
                p[0] = r;
                p[1] = g;
                p[2] = b;
            }
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    out << "P6\n" << size << ' ' << size << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.data()), static_cast<std::streamsize>(img.size()));
}

std::string grid_table(const std::vector<GridCell>& cells) {
    std::vector<std::size_t> gs, bs;
    for (const auto& c : cells) {
        if (std::find(gs.begin(), gs.end(), c.global_feature) == gs.end()) gs.push_back(c.global_feature);
        if (std::find(bs.begin(), bs.end(), c.batch_size) == bs.end()) bs.push_back(c.batch_size);
    }
    Table t;
    t.header = {"global feature size", "MLP size"};
    for (auto b : bs) t.header.push_back("batch size of " + std::to_string(b));
    const char* labels[] = {"training time = ", "training loss = ", "validation loss = ", "test loss = "};
    for (auto g : gs) {
        for (int line = 0; line < 4; ++line) {
            std::vector<std::string> row{line == 0 ? std::to_string(g) : "", ""};
            for (auto b : bs) {
                auto it = std::find_if(cells.begin(), cells.end(),
                                       [&](const GridCell& c) { return c.global_feature == g && c.batch_size == b; });
                if (it == cells.end()) {
                    row.emplace_back();
                    continue;
                }
                if (line == 0) {
                    std::string tail;
                    for (auto w : it->tail_mlp) tail += (tail.empty() ? "(" : ",") + std::to_string(w);
                    row[1] = tail + ")";
                }
                std::string v;
                if (!it->feasible) v = kInfeasibleMark;
                else if (line == 0) v = fixed_seconds(it->seconds);
                else v = sci(line == 1 ? it->train_loss : line == 2 ? it->val_loss : it->test_loss);
                row.push_back(labels[line] + v);
            }
            t.rows.push_back(row);
        }
    }
    return t.render();
}

}  // namespace cloudflow
