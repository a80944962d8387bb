#pragma once

// Run configuration: a JSON file with blocks stream / model / train / output
// and a seed list. Every key is optional (defaults below); unknown keys and
// out-of-range values are rejected with the dotted path of the offending field.

#include "stabmoe/trainer.hpp"

#include <json.hpp>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace stabmoe {

struct OutputConfig {
  std::string directory = "runs/default";
  bool snapshots = true;
  bool probe_every_task = true;
  bool csv = true;
  bool json = true;
};

struct RunConfig {
  StreamConfig stream;
  ModelShape model;
  TrainConfig train;
  OutputConfig output;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};

  /// Spec for one seed: the seed drives both stream generation and init.
  [[nodiscard]] RunSpec run_spec(std::uint64_t seed) const;
};

class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(std::vector<std::string> issues);
  [[nodiscard]] const std::vector<std::string>& issues() const { return issues_; }

 private:
  std::vector<std::string> issues_;
};

/// Collects every problem before throwing, one message per field.
RunConfig parse_config(const nlohmann::json& doc);
RunConfig load_config(const std::string& path);
nlohmann::json config_to_json(const RunConfig& config);

/// "router_stabilizer=on" and friends; throws ConfigError on a bad name or value.
void apply_toggle(RunConfig& config, std::string_view assignment);
std::vector<std::uint64_t> parse_seed_list(std::string_view list);

}  // namespace stabmoe
