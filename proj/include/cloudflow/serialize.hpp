#pragma once

#include "json.hpp"

#include "cloudflow/cloud.hpp"
#include "cloudflow/data.hpp"
#include "cloudflow/model.hpp"

namespace cloudflow {

nlohmann::json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);

nlohmann::json to_json(const NormStats& s);
NormStats norm_stats_from_json(const nlohmann::json& j);

nlohmann::json to_json(const GeometryMeta& g);
GeometryMeta geometry_from_json(const nlohmann::json& j);

}  // namespace cloudflow
