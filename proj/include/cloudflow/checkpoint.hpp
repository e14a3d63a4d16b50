#pragma once

// Binary checkpoint layout (all integers little-endian):
//   "PCFN"            4-byte magic
//   u32               format version
//   u64 + bytes       UTF-8 JSON metadata: model config, norm stats, storage dtype,
//                     tensor table (name, shape, trainable) and caller extras
//   u64               payload byte count
//   payload           every registry tensor in order, f32 or f64 per the dtype

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "json.hpp"

#include "cloudflow/data.hpp"
#include "cloudflow/model.hpp"

namespace cloudflow {

inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class StorageType { f32, f64 };

std::string to_string(StorageType t);
StorageType storage_type_from_string(const std::string& s);

struct CheckpointInfo {
    ModelConfig config;
    std::optional<NormStats> norm;
    StorageType dtype = StorageType::f32;
    nlohmann::json extra = nlohmann::json::object();
};

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const Model<T>& model, const std::optional<NormStats>& norm,
                     StorageType dtype, const nlohmann::json& extra = nlohmann::json::object());

/// Throws DataError on a bad magic, unsupported version, truncated or oversized
/// file, a tensor table that disagrees with the config, or non-finite values.
template <typename T>
Model<T> load_checkpoint(const std::filesystem::path& path, CheckpointInfo* info = nullptr);

/// Reads only the metadata block.
CheckpointInfo read_checkpoint_info(const std::filesystem::path& path);

}  // namespace cloudflow
