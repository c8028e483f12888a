#include "sdfl/runner.hpp"

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include "sdfl/config.hpp"
#include "sdfl/store.hpp"

namespace sdfl::runner {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

void write_file(const fs::path& path, const std::string& content) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << content;
  if (!f.flush()) throw std::runtime_error("cannot write " + path.string());
}

std::string read_file(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + path.string());
  std::stringstream s;
  s << f.rdbuf();
  return s.str();
}

json ids(const auto& range) {
  json a = json::array();
  for (auto id : range) a.push_back(id.value);
  return a;
}

json cluster_round_json(const engine::ClusterRound& c) {
  json contributions = json::array();
  for (const auto& k : c.contributions) {
    contributions.push_back({{"worker", k.worker.value},
                             {"round_produced", k.round_produced},
                             {"update", k.update.hex()},
                             {"coefficient", k.coefficient}});
  }
  json j = {{"cluster", c.cluster.value},
            {"head", c.head.value},
            {"published", c.published},
            {"republished", c.republished},
            {"accuracy", c.accuracy},
            {"aggregated_at", c.aggregated_at},
            {"contributions", contributions},
            {"filtered", ids(c.filtered)},
            {"stale_dropped", ids(c.stale_dropped)}};
  j["aggregate"] = c.aggregate ? json(c.aggregate->hex()) : json(nullptr);
  j["pulled_from"] = c.pulled_from ? json(c.pulled_from->value) : json(nullptr);
  return j;
}

std::string events_jsonl(const std::vector<engine::EventRecord>& events) {
  std::string out;
  for (const auto& e : events) {
    out += engine::to_json(e).dump();
    out += '\n';
  }
  return out;
}

int report_config_error(const engine::ConfigError& e, std::ostream& err) {
  err << "config error: " << e.what() << '\n';
  return kConfigError;
}

}  // namespace

std::string default_out_dir() {
  const char* env = std::getenv("SDFL_OUT_DIR");
  return env && *env ? std::string(env) : std::string("out");
}

json summary_json(const engine::ScenarioConfig& config, const engine::MetricsReport& report) {
  json rounds = json::array();
  for (const engine::RoundSummary& r : report.rounds) {
    json clusters = json::array();
    for (const auto& c : r.clusters) clusters.push_back(cluster_round_json(c));
    json scores = json::object();
    for (const auto& [w, s] : r.scores) scores[to_string(w)] = s;
    json entry = {{"round", r.round},
                  {"mean_accuracy", r.mean_accuracy},
                  {"std_accuracy", r.std_accuracy},
                  {"started_at", r.started_at},
                  {"completed_at", r.completed_at},
                  {"clusters", clusters},
                  {"scores", scores},
                  {"bad_workers", ids(r.bad_workers)}};
    entry["settlement"] = r.settlement ? ledger::to_json(*r.settlement) : json(nullptr);
    rounds.push_back(entry);
  }
  json tokens = nullptr;
  if (report.tokens) {
    json balances = json::object();
    for (const auto& [w, b] : report.tokens->worker_balances) balances[to_string(w)] = b;
    tokens = {{"penalties", report.tokens->penalties},
              {"rewards", report.tokens->rewards},
              {"requester_balance", report.tokens->requester_balance},
              {"worker_balances", balances}};
  }
  return {{"master_seed", config.master_seed},
          {"std_dev", "population"},
          {"total_time", report.total_time},
          {"clusters", clustering::to_json(report.clusters)},
          {"rounds", rounds},
          {"tokens", tokens},
          {"config", config::to_json(config)}};
}

json write_run(const engine::ScenarioConfig& config, const fs::path& out_dir, const std::string& config_path) {
  fs::create_directories(out_dir);
  engine::RunOutput result = engine::simulate(config);

  const std::string csv = engine::metrics_csv(result.metrics.rows);
  const std::vector<std::pair<std::string, std::string>> files = {
      {"metrics.csv", csv},
      {"summary.json", summary_json(config, result.metrics).dump(2) + "\n"},
      {"events.jsonl", events_jsonl(result.events)},
  };
  json listed = json::array();
  for (const auto& [name, content] : files) {
    write_file(out_dir / name, content);
    listed.push_back({{"name", name}, {"sha256", store::sha256_hex(content)}});
  }
  json manifest = {{"config_path", config_path},
                   {"master_seed", config.master_seed},
                   {"out_dir", out_dir.string()},
                   {"files", listed},
                   {"state",
                    {{"ledger_sha256", engine::ledger_digest(result.ledger)},
                     {"metrics_sha256", store::sha256_hex(csv)}}}};
  write_file(out_dir / "manifest.json", manifest.dump(2) + "\n");
  return manifest;
}

int run_command(const RunOptions& options, std::ostream& out, std::ostream& err) {
  try {
    engine::ScenarioConfig config = config::parse_scenario(config::load_json_file(options.config_path));
    if (options.seed) config.master_seed = *options.seed;
    const fs::path dir = options.out_dir.empty() ? default_out_dir() : options.out_dir;
    const json manifest = write_run(config, dir, options.config_path);
    out << "wrote " << manifest["files"].size() + 1 << " files to " << dir.string() << '\n';
    return kOk;
  } catch (const engine::ConfigError& e) {
    return report_config_error(e, err);
  } catch (const engine::InvariantViolation& e) {
    err << "invariant violation: " << e.what() << '\n';
    return kInvariantViolation;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kFailure;
  }
}

int sweep_command(const SweepOptions& options, std::ostream& out, std::ostream& err) {
  try {
    const std::size_t eq = options.vary.find('=');
    if (eq == std::string::npos || eq == 0 || eq + 1 == options.vary.size()) {
      throw engine::ConfigError("--vary", "expected field=v1,v2,...");
    }
    const std::string field = options.vary.substr(0, eq);
    std::vector<std::string> raw;
    std::stringstream list(options.vary.substr(eq + 1));
    for (std::string item; std::getline(list, item, ',');) raw.push_back(item);

    const json base = config::load_json_file(options.config_path);
    std::vector<std::pair<std::string, engine::ScenarioConfig>> runs;
    for (const std::string& text : raw) {
      std::size_t used = 0;
      double value = 0.0;
      try {
        value = std::stod(text, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (text.empty() || used != text.size()) throw engine::ConfigError("--vary", "'" + text + "' is not a number");
      json doc = base;
      config::set_field(doc, field, value);
      runs.emplace_back(field + "=" + text, config::parse_scenario(doc));
    }

    const fs::path dir = options.out_dir.empty() ? default_out_dir() : options.out_dir;
    json configurations = json::array();
    for (std::size_t i = 0; i < runs.size(); ++i) {
      const auto& [name, config] = runs[i];
      write_run(config, dir / name, options.config_path);
      const json summary = json::parse(read_file(dir / name / "summary.json"));
      json per_round = json::array();
      for (const json& r : summary["rounds"]) {
        per_round.push_back({{"round", r["round"]},
                             {"mean_accuracy", r["mean_accuracy"]},
                             {"std_accuracy", r["std_accuracy"]},
                             {"completed_at", r["completed_at"]}});
      }
      configurations.push_back({{"value", json::parse(raw[i])},
                                {"directory", name},
                                {"workers", config.workers.size()},
                                {"total_time", summary["total_time"]},
                                {"rounds", per_round}});
    }
    const json sweep = {{"field", field}, {"std_dev", "population"}, {"configurations", configurations}};
    write_file(dir / "sweep_summary.json", sweep.dump(2) + "\n");
    out << "swept " << field << " over " << runs.size() << " values into " << dir.string() << '\n';
    return kOk;
  } catch (const engine::ConfigError& e) {
    return report_config_error(e, err);
  } catch (const engine::InvariantViolation& e) {
    err << "invariant violation: " << e.what() << '\n';
    return kInvariantViolation;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kFailure;
  }
}

int replay_command(const std::string& events_path, std::ostream& out, std::ostream& err) {
  std::vector<engine::EventRecord> events;
  try {
    std::stringstream lines(read_file(events_path));
    std::size_t line_no = 0;
    for (std::string line; std::getline(lines, line);) {
      ++line_no;
      if (line.empty()) continue;
      try {
        events.push_back(engine::event_record_from_json(json::parse(line)));
      } catch (const std::exception& e) {
        err << "malformed event on line " << line_no << ": " << e.what() << '\n';
        return kConfigError;
      }
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kConfigError;
  }
  if (events.empty()) {
    err << "event log is empty\n";
    return kConfigError;
  }

  const engine::ReplayOutcome outcome = engine::replay(events);
  if (!outcome.consistent) {
    err << "divergence at " << outcome.message << '\n';
    return kReplayDivergence;
  }

  json manifest;
  try {
    manifest = json::parse(read_file(fs::path(events_path).parent_path() / "manifest.json"));
  } catch (const std::exception& e) {
    err << "cannot load manifest: " << e.what() << '\n';
    return kConfigError;
  }
  const std::string ledger_digest = engine::ledger_digest(outcome.ledger);
  const std::string metrics_digest = store::sha256_hex(engine::metrics_csv(outcome.rows));
  const json& state = manifest.value("state", json::object());
  const std::uint64_t last = events.back().seq;
  if (state.value("ledger_sha256", "") != ledger_digest) {
    err << "divergence at final state (last event seq " << last << "): ledger digest " << ledger_digest
        << " does not match the manifest\n";
    return kReplayDivergence;
  }
  if (state.value("metrics_sha256", "") != metrics_digest) {
    err << "divergence at final state (last event seq " << last << "): metrics digest " << metrics_digest
        << " does not match the manifest\n";
    return kReplayDivergence;
  }
  out << "replayed " << events.size() << " events: consistent\n";
  return kOk;
}

}  // namespace sdfl::runner
