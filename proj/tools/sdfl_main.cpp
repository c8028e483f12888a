#include <iostream>

#include <CLI11.hpp>

#include "sdfl/runner.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Semi-decentralized federated learning simulator"};
  app.require_subcommand(1);

  sdfl::runner::RunOptions run;
  std::uint64_t seed = 0;
  auto* run_cmd = app.add_subcommand("run", "Run one scenario and write its artifacts");
  run_cmd->add_option("config", run.config_path, "Scenario JSON")->required();
  auto* seed_opt = run_cmd->add_option("--seed", seed, "Override master_seed");
  run_cmd->add_option("--out-dir", run.out_dir, "Output directory (default $SDFL_OUT_DIR or ./out)");

  sdfl::runner::SweepOptions sweep;
  auto* sweep_cmd = app.add_subcommand("sweep", "Run one scenario per value of a numeric field");
  sweep_cmd->add_option("config", sweep.config_path, "Scenario JSON")->required();
  sweep_cmd->add_option("--vary", sweep.vary, "field=v1,v2,...")->required();
  sweep_cmd->add_option("--out-dir", sweep.out_dir, "Output directory (default $SDFL_OUT_DIR or ./out)");

  std::string events_path;
  auto* replay_cmd = app.add_subcommand("replay", "Re-execute an event log and check it against its manifest");
  replay_cmd->add_option("events", events_path, "events.jsonl")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : sdfl::runner::kConfigError;
  }

  if (*run_cmd) {
    if (*seed_opt) run.seed = seed;
    return sdfl::runner::run_command(run, std::cout, std::cerr);
  }
  if (*sweep_cmd) return sdfl::runner::sweep_command(sweep, std::cout, std::cerr);
  return sdfl::runner::replay_command(events_path, std::cout, std::cerr);
}
