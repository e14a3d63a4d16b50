#include "cloudflow/manifest.hpp"

#include <fstream>
#include <limits>
#include <random>
#include <sstream>

#include "cloudflow/error.hpp"
#include "cloudflow/serialize.hpp"

namespace cloudflow {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
        case Split::unassigned: break;
    }
    return "unassigned";
}

Split split_from_string(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "val") return Split::val;
    if (s == "test") return Split::test;
    if (s == "unassigned") return Split::unassigned;
    throw DataError("unknown split tag '" + s + "'");
}

std::vector<std::size_t> DatasetManifest::indices(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < samples.size(); ++i)
        if (samples[i].split == s) out.push_back(i);
    return out;
}

json DatasetManifest::to_json() const {
    json entries = json::array();
    for (const auto& s : samples) {
        json e{{"file", s.file}, {"split", to_string(s.split)}, {"geometry", cloudflow::to_json(s.geometry)}};
        if (s.reynolds > 0) e["reynolds"] = s.reynolds;
        entries.push_back(std::move(e));
    }
    return json{{"format_version", format_version},
                {"seed", seed},
                {"generator", generator},
                {"norm_stats", norm ? cloudflow::to_json(*norm) : json(nullptr)},
                {"samples", entries}};
}

void DatasetManifest::save(const fs::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write manifest " + path.string());
    out << to_json().dump(2) << '\n';
    if (!out) throw DataError("failed writing manifest " + path.string());
}

DatasetManifest DatasetManifest::load(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open manifest " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw DataError("manifest " + path.string() + ": " + e.what());
    }
    DatasetManifest m;
    try {
        m.format_version = j.at("format_version").get<int>();
        if (m.format_version != kFormatVersion)
            throw DataError("manifest format_version " + std::to_string(m.format_version) + " is not supported");
        m.seed = j.at("seed").get<std::uint64_t>();
        m.generator = j.value("generator", json::object());
        if (j.contains("norm_stats") && !j.at("norm_stats").is_null())
            m.norm = norm_stats_from_json(j.at("norm_stats"));
        for (const auto& e : j.at("samples")) {
            SampleEntry s;
            s.file = e.at("file").get<std::string>();
            s.split = split_from_string(e.at("split").get<std::string>());
            if (e.contains("geometry")) s.geometry = geometry_from_json(e.at("geometry"));
            s.reynolds = e.value("reynolds", 0.0);
            m.samples.push_back(std::move(s));
        }
    } catch (const json::exception& e) {
        throw DataError("manifest " + path.string() + ": " + e.what());
    }
    const fs::path root = path.parent_path();
    for (const auto& s : m.samples)
        if (!fs::exists(root / s.file)) throw DataError("manifest lists missing sample file " + s.file);
    return m;
}

std::array<std::size_t, 3> split_sizes(std::size_t n) {
    const auto n_train = static_cast<std::size_t>(0.8 * static_cast<double>(n) + 0.5);
    const auto n_val = static_cast<std::size_t>(0.1 * static_cast<double>(n) + 0.5);
    return {n_train, n_val, n - n_train - n_val};
}

void seeded_shuffle(std::vector<std::size_t>& v, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    for (std::size_t i = v.size(); i > 1; --i) {
        // Unbiased index in [0, i) by rejection, so the sequence is fixed across standard libraries.
        const std::uint64_t bound = i;
        const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % bound;
        std::uint64_t r;
        do r = rng();
        while (r >= limit);
        std::swap(v[i - 1], v[r % bound]);
    }
}

DatasetManifest split_dataset(DatasetManifest manifest, std::uint64_t seed) {
    const std::size_t n = manifest.samples.size();
    if (n < 10) throw DataError("split needs at least 10 samples, got " + std::to_string(n));
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    seeded_shuffle(order, seed);
    const auto sizes = split_sizes(n);
    for (std::size_t k = 0; k < n; ++k) {
        Split s = k < sizes[0] ? Split::train : (k < sizes[0] + sizes[1] ? Split::val : Split::test);
        manifest.samples[order[k]].split = s;
    }
    return manifest;
}

Dataset Dataset::load(const fs::path& dir) {
    Dataset d;
    d.root = dir;
    d.manifest = DatasetManifest::load(dir / "manifest.json");
    d.clouds.reserve(d.manifest.samples.size());
    for (const auto& s : d.manifest.samples) {
        PointCloud c = read_sample(dir / s.file);
        if (!c.geometry.known()) c.geometry = s.geometry;
        d.clouds.push_back(std::move(c));
    }
    return d;
}

std::vector<const PointCloud*> Dataset::split(Split s) const {
    std::vector<const PointCloud*> out;
    for (auto i : manifest.indices(s)) out.push_back(&clouds[i]);
    return out;
}

}  // namespace cloudflow
