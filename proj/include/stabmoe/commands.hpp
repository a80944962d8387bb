#pragma once

// Experiment verbs behind the command-line tool. Each returns a process exit
// status (0 ok, 1 runtime or I/O failure, 2 invalid input) and reports to the
// given streams instead of terminating.

#include "stabmoe/config.hpp"
#include "stabmoe/trainer.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace stabmoe {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitInvalid = 2;

struct RunOptions {
  std::string config_path;
  std::optional<std::string> out_dir;
  std::optional<std::vector<std::uint64_t>> seeds;
  std::vector<std::string> toggles;  // NAME=on|off, applied in order
};

struct ProbeOptions {
  std::string run_dir;
  std::optional<std::uint64_t> seed;   // default: first seed of the run
  std::optional<std::size_t> task;     // 1-based checkpoint; default: all
  std::optional<std::size_t> epochs;   // default: train.probe_epochs
};

struct ExportOptions {
  std::string config_path;
  std::uint64_t seed = 1;
  std::size_t task = 1;
  Split split = Split::Train;
  std::string out_path;
};

int cmd_run(const RunOptions& options, std::ostream& out, std::ostream& err);
int cmd_compare(const RunOptions& options, std::ostream& out, std::ostream& err);
int cmd_probe(const ProbeOptions& options, std::ostream& out, std::ostream& err);
int cmd_validate_config(const std::string& path, std::ostream& out, std::ostream& err);
int cmd_validate_output(const std::string& path, std::ostream& out, std::ostream& err);
int cmd_export_split(const ExportOptions& options, std::ostream& out, std::ostream& err);

/// Loads the config and applies --out / --seeds / --toggle overrides.
RunConfig resolve_config(const RunOptions& options);

/// Parallel worker count: SAME_THREADS if set (positive integer), otherwise
/// the hardware concurrency, never more than `jobs`.
std::size_t worker_count(std::size_t jobs);

/// Runs each spec on a worker pool; results keep the input order.
std::vector<RunResult> run_parallel(const std::vector<RunSpec>& specs, std::size_t workers);

/// Every freeze event closed with the checksum it opened with.
bool frozen_tensors_unchanged(const RunMetrics& metrics);

inline const std::vector<std::string>& metrics_csv_header() {
  static const std::vector<std::string> header{"seed",  "kind", "checkpoint", "probe_task",
                                               "layer", "expert", "step",     "value"};
  return header;
}
std::string metrics_csv(std::uint64_t seed, const RunResult& result);

nlohmann::json seed_summary(std::uint64_t seed, const RunResult& result,
                            const std::optional<std::string>& csv_path,
                            const std::vector<std::string>& snapshot_paths);

struct LadderRung {
  std::string name;
  Toggles toggles;
};
/// baseline, router, router+expert, full.
const std::vector<LadderRung>& toggle_ladder();

struct LadderResult {
  std::vector<std::uint64_t> seeds;
  /// runs[rung][seed index]
  std::vector<std::vector<RunResult>> runs;
};
LadderResult run_ladder(const RunConfig& config, std::size_t workers);
nlohmann::json comparison_json(const LadderResult& ladder);

std::filesystem::path snapshot_path(const std::filesystem::path& run_dir, std::uint64_t seed,
                                    std::size_t task);

}  // namespace stabmoe
