#pragma once

#include <json.hpp>

#include "compass/model_config.hpp"

namespace compass {

nlohmann::json config_to_json(const ModelConfig& config);

// Missing keys keep their defaults; unknown keys are rejected.
ModelConfig config_from_json(const nlohmann::json& j);

}  // namespace compass
