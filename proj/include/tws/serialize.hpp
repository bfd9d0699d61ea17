#pragma once

#include <json.hpp>

#include "tws/model.hpp"
#include "tws/quantizers.hpp"

namespace tws {

nlohmann::json to_json(const ModelSpec& s);
ModelSpec spec_from_json(const nlohmann::json& j);
nlohmann::json to_json(const QuantScheme& s);
QuantScheme scheme_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ActivationQuant& a);
ActivationQuant act_from_json(const nlohmann::json& j);
nlohmann::json to_json(const PrecisionMap& p);
PrecisionMap precision_from_json(const nlohmann::json& j);

}  // namespace tws
