#pragma once

#include <string>

#include <json.hpp>

#include "sdfl/engine.hpp"

namespace sdfl::config {

/// Builds a scenario from a JSON document. Unknown keys, wrong types and
/// out-of-range values throw engine::ConfigError naming the JSON path.
engine::ScenarioConfig parse_scenario(const nlohmann::json& doc);

/// Reads and parses a file; a missing file or bad JSON is a ConfigError too.
nlohmann::json load_json_file(const std::string& path);

/// Normalised JSON form of a scenario; parse_scenario accepts it back.
nlohmann::json to_json(const engine::ScenarioConfig& config);

/// Sets a dotted field ("rounds", "contract.top_k", ...) to a numeric value.
/// "workers" is shorthand for "workers.count". Throws ConfigError.
void set_field(nlohmann::json& doc, const std::string& field, double value);

}  // namespace sdfl::config
