#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "sdfl/aggregate.hpp"
#include "sdfl/clustering.hpp"
#include "sdfl/ledger.hpp"
#include "sdfl/learner.hpp"
#include "sdfl/store.hpp"

namespace sdfl::engine {

/// Invalid scenario; `path()` names the offending field, e.g.
/// "contract.penalty_pct_P".
class ConfigError : public std::invalid_argument {
 public:
  ConfigError(std::string path, const std::string& message)
      : std::invalid_argument(path + ": " + message), path_(std::move(path)) {}
  const std::string& path() const { return path_; }

 private:
  std::string path_;
};

/// A protocol or accounting invariant broke during a run.
class InvariantViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class EngineError : public std::runtime_error {
 public:
  enum class Code { QueueEmpty, InvalidWindow, UnknownWorker };

  EngineError(Code code, const std::string& what) : std::runtime_error(what), code_(code) {}
  Code code() const { return code_; }

 private:
  Code code_;
};

enum class EventKind {
  ContractDeployed,
  Enroll,
  ClusterFormed,
  RoundStarted,
  TrainComplete,
  UpdateArrived,
  CollectionClosed,
  InterClusterPull,
  AggregatePublished,
  BroadcastDelivered,
  ScoreSubmitted,
  RoundSettled,
  NodeCrash,
  NodeRecover,
};

const char* to_string(EventKind kind);
std::optional<EventKind> event_kind_from_string(const std::string& name);

struct Event {
  SimTime time = 0.0;
  std::uint64_t seq = 0;
  EventKind kind = EventKind::RoundStarted;
  Round round = 0;
  WorkerId worker;
  ClusterId cluster;
  std::optional<store::ContentAddress> blob;
  double score = 0.0;
  std::uint64_t generation = 0;
  bool counted = false;

  bool operator==(const Event&) const = default;
};

/// What the event log keeps for one processed event.
struct EventRecord {
  SimTime time = 0.0;
  std::uint64_t seq = 0;
  EventKind kind = EventKind::RoundStarted;
  nlohmann::json payload;

  bool operator==(const EventRecord&) const = default;
};

nlohmann::json to_json(const EventRecord& record);
EventRecord event_record_from_json(const nlohmann::json& j);

struct NetworkModel {
  SimTime base_latency = 0.05;
  SimTime jitter = 0.01;  ///< seeded uniform extra delay in [0, jitter)
  double drop_prob = 0.0;
  SimTime ledger_tx_latency = 0.5;

  bool operator==(const NetworkModel&) const = default;
};

enum class ScoreMode { HeadEvaluated, SelfReported };

/// Crash at `crash_time`, back at `recover_time` (simulated seconds).
struct TimedFailure {
  WorkerId worker;
  SimTime crash_time = 0.0;
  SimTime recover_time = 0.0;
  bool operator==(const TimedFailure&) const = default;
};

/// Down from the start of `first_round` until the start of `end_round`.
struct RoundFailure {
  WorkerId worker;
  Round first_round = 0;
  Round end_round = 0;
  bool operator==(const RoundFailure&) const = default;
};

struct ScenarioConfig {
  std::vector<WorkerProfile> workers;
  learner::DataSpec data;  ///< num_workers is taken from `workers`
  std::size_t num_clusters = 1;
  std::uint32_t rotation_period = 1;
  Round rounds = 5;
  int epochs_per_round = 1;
  learner::OptimizerConfig optimizer;
  ledger::ContractParams contract;
  Tokens requester_balance = 0;  ///< 0 means rounds x reward pool
  Tokens worker_balance = 0;     ///< 0 means rounds x deposit
  aggregate::AsyncPolicy async_policy;
  aggregate::Weighting weighting = aggregate::Weighting::Uniform;
  NetworkModel network;
  bool blockchain_enabled = true;
  ScoreMode score_mode = ScoreMode::HeadEvaluated;
  double intercluster_pull_prob = 0.0;
  double intercluster_beta = 0.5;
  bool head_trains = true;
  double cost_per_sample = 0.001;  ///< simulated seconds per sample per epoch
  std::vector<TimedFailure> failures;
  std::vector<RoundFailure> round_failures;
  std::uint64_t master_seed = 1;
  bool parallel_training = true;

  Tokens effective_requester_balance() const;
  Tokens effective_worker_balance() const;

  /// Throws ConfigError.
  void validate() const;

  bool operator==(const ScenarioConfig&) const = default;
};

/// Workers on a ring of `num_sites` geographic sites with Gaussian spread.
std::vector<WorkerProfile> generate_workers(std::size_t count, std::size_t num_sites, double spread,
                                            std::uint64_t seed);

struct WorkerRoundMetrics {
  Round round = 0;
  WorkerId worker;
  ClusterId cluster;
  bool is_head = false;
  double accuracy = 0.0;
  double loss = 0.0;
  bool operator==(const WorkerRoundMetrics&) const = default;
};

struct Contribution {
  WorkerId worker;
  Round round_produced = 0;
  store::ContentAddress update;
  double coefficient = 0.0;
  bool operator==(const Contribution&) const = default;
};

struct ClusterRound {
  ClusterId cluster;
  WorkerId head;
  bool published = false;   ///< false when the head was down at aggregation
  bool republished = false; ///< no usable update, previous model re-sent
  std::optional<store::ContentAddress> aggregate;
  double accuracy = 0.0;  ///< aggregate on the validation set
  SimTime aggregated_at = 0.0;
  std::vector<Contribution> contributions;
  std::vector<WorkerId> filtered;       ///< dropped as penalised
  std::vector<WorkerId> stale_dropped;  ///< dropped for staleness > tau
  std::optional<ClusterId> pulled_from;
  bool operator==(const ClusterRound&) const = default;
};

struct RoundSummary {
  Round round = 0;
  std::vector<ClusterRound> clusters;
  double mean_accuracy = 0.0;
  double std_accuracy = 0.0;  ///< population std-dev over the reported workers
  SimTime started_at = 0.0;
  SimTime completed_at = 0.0;
  std::map<WorkerId, double> scores;
  std::set<WorkerId> bad_workers;
  std::optional<ledger::SettlementReport> settlement;
  bool operator==(const RoundSummary&) const = default;
};

struct TokenTotals {
  Tokens penalties = 0;
  Tokens rewards = 0;
  Tokens requester_balance = 0;
  std::map<WorkerId, Tokens> worker_balances;
  bool operator==(const TokenTotals&) const = default;
};

struct MetricsReport {
  std::vector<WorkerRoundMetrics> rows;
  std::vector<RoundSummary> rounds;
  SimTime total_time = 0.0;
  std::optional<TokenTotals> tokens;  ///< absent without the ledger
  clustering::ClusterAssignment clusters;
  bool operator==(const MetricsReport&) const = default;
};

/// Population mean and std-dev.
std::pair<double, double> mean_and_std(const std::vector<double>& xs);

struct WorkerRuntime {
  bool crashed = false;
  learner::ModelWeights model;  ///< where the next local training starts
  std::optional<store::ContentAddress> known_aggregate;
  bool training = false;
  Round training_round = 0;
  std::uint64_t generation = 0;
  std::optional<learner::ModelWeights> pending;
  std::optional<learner::ModelWeights> last_submitted;
  bool operator==(const WorkerRuntime&) const = default;
};

struct ClusterRuntime {
  WorkerId head;
  std::map<WorkerId, aggregate::Update> buffer;
  std::map<WorkerId, store::ContentAddress> buffer_addresses;
  std::set<WorkerId> expected;
  std::set<WorkerId> delivered;  ///< since the last aggregation
  bool aggregated = false;
  std::optional<learner::ModelWeights> pending_aggregate;
  std::optional<store::ContentAddress> latest;
  std::vector<std::pair<Round, store::ContentAddress>> history;
  bool operator==(const ClusterRuntime&) const = default;
};

/// Complete simulator state. Copies share the content store, which is
/// append-only and content-addressed.
struct EngineState {
  std::shared_ptr<const ScenarioConfig> config;
  std::shared_ptr<const learner::FederatedData> data;
  std::shared_ptr<store::ContentStore> store;

  SimTime now = 0.0;
  std::uint64_t next_seq = 0;
  std::map<std::pair<SimTime, std::uint64_t>, Event> queue;
  std::vector<EventRecord> log;

  std::vector<WorkerProfile> profiles;  ///< ascending id
  std::map<WorkerId, std::size_t> index_of;
  std::map<WorkerId, WorkerRuntime> workers;
  clustering::ClusterAssignment assignment;
  std::map<ClusterId, ClusterRuntime> clusters;
  learner::ModelWeights initial_model;

  std::optional<ledger::LedgerState> ledger;
  std::set<WorkerId> bad_workers;  ///< from the last settled round

  Round round = 0;
  bool finished = false;
  SimTime round_started_at = 0.0;
  SimTime train_start = 0.0;
  std::size_t clusters_pending = 0;
  std::size_t broadcasts_pending = 0;
  std::size_t scores_pending = 0;
  bool settle_scheduled = false;
  std::set<WorkerId> participants;  ///< live when the current round started
  std::map<WorkerId, double> round_scores;
  RoundSummary current;

  MetricsReport report;

  bool operator==(const EngineState& o) const;
};

/// Validates the config and queues the enrollment events. `store` may be
/// null, in which case an in-memory store is created.
EngineState make_engine(const ScenarioConfig& config, std::shared_ptr<store::ContentStore> store = nullptr);

/// Processes exactly one event. Throws EngineError(QueueEmpty).
void step(EngineState& state);

/// Queues NodeCrash/NodeRecover. Throws EngineError(InvalidWindow) unless
/// now <= crash_time < recover_time.
void inject_failure(EngineState& state, WorkerId worker, SimTime crash_time, SimTime recover_time);

struct RunOutput {
  MetricsReport metrics;
  std::vector<EventRecord> events;
  std::optional<ledger::LedgerState> ledger;
};

RunOutput simulate(const ScenarioConfig& config, std::shared_ptr<store::ContentStore> store = nullptr);

inline MetricsReport run_scenario(const ScenarioConfig& config) { return simulate(config).metrics; }

/// Header `round,worker,cluster,is_head,accuracy,loss`; reals use the
/// shortest representation that parses back to the same double.
std::string metrics_csv(const std::vector<WorkerRoundMetrics>& rows);

std::string format_double(double v);

struct ReplayOutcome {
  bool consistent = true;
  std::optional<std::uint64_t> divergent_seq;
  std::string message;
  std::optional<ledger::LedgerState> ledger;
  std::vector<WorkerRoundMetrics> rows;
};

/// Rebuilds the ledger and the per-worker metrics from an event log,
/// re-executing every contract operation and checking the recorded
/// transactions, settlements and timestamps against the recomputation.
ReplayOutcome replay(const std::vector<EventRecord>& events);

/// sha256 of the ledger's line-delimited transaction log (empty log when
/// there is no ledger).
std::string ledger_digest(const std::optional<ledger::LedgerState>& ledger);

}  // namespace sdfl::engine
