#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>

#include <json.hpp>

#include "sdfl/engine.hpp"

/// File-level front end used by the `sdfl` executable.
namespace sdfl::runner {

enum ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kConfigError = 2,
  kInvariantViolation = 3,
  kReplayDivergence = 4,
};

/// SDFL_OUT_DIR when set and non-empty, otherwise "out".
std::string default_out_dir();

nlohmann::json summary_json(const engine::ScenarioConfig& config, const engine::MetricsReport& report);

/// Runs the scenario and writes metrics.csv, summary.json, events.jsonl and
/// manifest.json into `out_dir`. Returns the manifest.
nlohmann::json write_run(const engine::ScenarioConfig& config, const std::filesystem::path& out_dir,
                         const std::string& config_path);

struct RunOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir;  ///< empty means default_out_dir()
};

int run_command(const RunOptions& options, std::ostream& out, std::ostream& err);

struct SweepOptions {
  std::string config_path;
  std::string vary;  ///< field=v1,v2,...
  std::string out_dir;
};

int sweep_command(const SweepOptions& options, std::ostream& out, std::ostream& err);

/// Replays events.jsonl and checks the result against manifest.json in the
/// same directory.
int replay_command(const std::string& events_path, std::ostream& out, std::ostream& err);

}  // namespace sdfl::runner
