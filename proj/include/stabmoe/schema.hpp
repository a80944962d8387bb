#pragma once

// Validator for the JSON-Schema subset used by the shipped output schemas:
// type, properties, required, additionalProperties, items, minItems, maxItems,
// minimum, maximum, enum, const. Unsupported keywords are an error in the
// schema, not silently ignored.

#include <json.hpp>

#include <string>
#include <vector>

namespace stabmoe {

/// One message per violation, prefixed with a JSON pointer into the instance.
std::vector<std::string> validate_json(const nlohmann::json& schema, const nlohmann::json& instance);

const nlohmann::json& summary_schema();
const nlohmann::json& comparison_schema();

}  // namespace stabmoe
