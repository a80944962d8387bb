#include "stabmoe/schema.hpp"

#include "embedded_schemas.hpp"

#include <set>
#include <stdexcept>

namespace stabmoe {

namespace {

using nlohmann::json;

bool has_type(const json& v, const std::string& type) {
  if (type == "object") return v.is_object();
  if (type == "array") return v.is_array();
  if (type == "string") return v.is_string();
  if (type == "boolean") return v.is_boolean();
  if (type == "null") return v.is_null();
  if (type == "number") return v.is_number();
  if (type == "integer")
    return v.is_number_integer() || (v.is_number_float() && v.get<double>() == static_cast<double>(static_cast<long long>(v.get<double>())));
  throw std::invalid_argument("schema: unknown type \"" + type + "\"");
}

const std::set<std::string>& known_keywords() {
  static const std::set<std::string> keys{
      "$schema", "$id", "title", "description", "type", "properties", "required",
      "additionalProperties", "items", "minItems", "maxItems", "minimum", "maximum", "enum", "const"};
  return keys;
}

void check(const json& schema, const json& v, const std::string& at, std::vector<std::string>& out) {
  if (schema.is_boolean()) {
    if (!schema.get<bool>()) out.push_back(at + ": not allowed");
    return;
  }
  if (!schema.is_object()) throw std::invalid_argument("schema at " + at + " is not an object");
  for (const auto& item : schema.items())
    if (!known_keywords().count(item.key()))
      throw std::invalid_argument("schema: unsupported keyword \"" + item.key() + "\"");
  const std::string where = at.empty() ? "/" : at;

  if (const auto t = schema.find("type"); t != schema.end()) {
    bool ok = false;
    if (t->is_string()) ok = has_type(v, t->get<std::string>());
    else
      for (const auto& alt : *t) ok = ok || has_type(v, alt.get<std::string>());
    if (!ok) {
      out.push_back(where + ": expected type " + t->dump() + ", got " + v.type_name());
      return;
    }
  }
  if (const auto e = schema.find("enum"); e != schema.end()) {
    bool found = false;
    for (const auto& option : *e) found = found || option == v;
    if (!found) out.push_back(where + ": value " + v.dump() + " not in " + e->dump());
  }
  if (const auto c = schema.find("const"); c != schema.end() && *c != v)
    out.push_back(where + ": expected " + c->dump() + ", got " + v.dump());
  if (v.is_number()) {
    const double x = v.get<double>();
    if (const auto lo = schema.find("minimum"); lo != schema.end() && x < lo->get<double>())
      out.push_back(where + ": " + v.dump() + " below minimum " + lo->dump());
    if (const auto hi = schema.find("maximum"); hi != schema.end() && x > hi->get<double>())
      out.push_back(where + ": " + v.dump() + " above maximum " + hi->dump());
  }
  if (v.is_object()) {
    if (const auto req = schema.find("required"); req != schema.end())
      for (const auto& key : *req)
        if (!v.contains(key.get<std::string>()))
          out.push_back(where + ": missing required property \"" + key.get<std::string>() + "\"");
    const auto props = schema.find("properties");
    const auto extra = schema.find("additionalProperties");
    for (const auto& item : v.items()) {
      const std::string child = at + "/" + item.key();
      if (props != schema.end() && props->contains(item.key())) {
        check((*props)[item.key()], item.value(), child, out);
      } else if (extra != schema.end()) {
        if (extra->is_boolean() && !extra->get<bool>())
          out.push_back(child + ": unexpected property");
        else if (extra->is_object())
          check(*extra, item.value(), child, out);
      }
    }
  }
  if (v.is_array()) {
    if (const auto mn = schema.find("minItems"); mn != schema.end() && v.size() < mn->get<std::size_t>())
      out.push_back(where + ": fewer than " + mn->dump() + " items");
    if (const auto mx = schema.find("maxItems"); mx != schema.end() && v.size() > mx->get<std::size_t>())
      out.push_back(where + ": more than " + mx->dump() + " items");
    if (const auto items = schema.find("items"); items != schema.end())
      for (std::size_t i = 0; i < v.size(); ++i) check(*items, v[i], at + "/" + std::to_string(i), out);
  }
}

}  // namespace

std::vector<std::string> validate_json(const json& schema, const json& instance) {
  std::vector<std::string> out;
  check(schema, instance, "", out);
  return out;
}

const json& summary_schema() {
  static const json schema = json::parse(embedded::kSummarySchema);
  return schema;
}

const json& comparison_schema() {
  static const json schema = json::parse(embedded::kComparisonSchema);
  return schema;
}

}  // namespace stabmoe
