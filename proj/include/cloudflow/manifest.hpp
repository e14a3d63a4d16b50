#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "cloudflow/cloud.hpp"
#include "cloudflow/data.hpp"

namespace cloudflow {

enum class Split { unassigned, train, val, test };

std::string to_string(Split s);
Split split_from_string(const std::string& s);

struct SampleEntry {
    std::string file;  // relative to the manifest directory
    Split split = Split::unassigned;
    GeometryMeta geometry;
    double reynolds = 0.0;  // 0 when unknown
};

/// Dataset description stored next to the sample CSVs as manifest.json.
struct DatasetManifest {
    static constexpr int kFormatVersion = 1;

    int format_version = kFormatVersion;
    std::uint64_t seed = 0;
    nlohmann::json generator = nlohmann::json::object();
    std::optional<NormStats> norm;
    std::vector<SampleEntry> samples;

    std::vector<std::size_t> indices(Split s) const;

    /// Throws DataError on version mismatch, unknown splits or missing files.
    static DatasetManifest load(const std::filesystem::path& path);
    void save(const std::filesystem::path& path) const;
    nlohmann::json to_json() const;
};

/// Seeded shuffle into 80/10/10 train/val/test (rounded to nearest; test takes the rest).
/// Throws DataError for fewer than 10 samples.
DatasetManifest split_dataset(DatasetManifest manifest, std::uint64_t seed);

/// Train/val/test sizes for n samples.
std::array<std::size_t, 3> split_sizes(std::size_t n);

/// Deterministic Fisher-Yates shuffle independent of the standard library's algorithm.
void seeded_shuffle(std::vector<std::size_t>& v, std::uint64_t seed);

/// Manifest plus every sample parsed from disk.
struct Dataset {
    DatasetManifest manifest;
    std::filesystem::path root;
    std::vector<PointCloud> clouds;

    static Dataset load(const std::filesystem::path& dir);
    std::vector<const PointCloud*> split(Split s) const;
};

}  // namespace cloudflow
