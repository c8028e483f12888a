#include "sdfl/engine.hpp"

#include <omp.h>

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <exception>
#include <numbers>
#include <tuple>

#include "sdfl/random.hpp"

namespace sdfl::engine {

namespace {

using aggregate::CollectionMode;
using json = nlohmann::json;
using learner::ModelWeights;

// Independent random streams, mixed into the master seed.
enum Stream : std::uint64_t {
  kData = 1,
  kInit,
  kClusters,
  kHeads,
  kTrain,
  kLatency,
  kDrop,
  kPull,
  kCorrupt,
};

enum Direction : std::uint64_t { kUplink = 0, kDownlink = 1 };

constexpr std::array kKindNames = {
    "ContractDeployed", "Enroll",           "ClusterFormed",      "RoundStarted",       "TrainComplete",
    "UpdateArrived",    "CollectionClosed", "InterClusterPull",   "AggregatePublished", "BroadcastDelivered",
    "ScoreSubmitted",   "RoundSettled",     "NodeCrash",          "NodeRecover",
};

json ids_json(const auto& range) {
  json a = json::array();
  for (auto id : range) a.push_back(id.value);
  return a;
}

json tx_since(const std::optional<ledger::LedgerState>& l, std::size_t from) {
  json a = json::array();
  if (!l) return a;
  for (std::size_t i = from; i < l->tx_log.size(); ++i) a.push_back(ledger::to_json(l->tx_log[i]));
  return a;
}

json row_json(const WorkerRoundMetrics& m) {
  return {{"worker", m.worker.value}, {"cluster", m.cluster.value}, {"is_head", m.is_head},
          {"accuracy", m.accuracy},   {"loss", m.loss}};
}

const ScenarioConfig& cfg(const EngineState& s) { return *s.config; }

std::uint64_t seed_for(const EngineState& s, std::initializer_list<std::uint64_t> tags) {
  return derive_seed(cfg(s).master_seed, tags);
}

SimTime ledger_delay(const EngineState& s) { return s.ledger ? cfg(s).network.ledger_tx_latency : 0.0; }

SimTime link_latency(const EngineState& s, Round r, WorkerId w, Direction dir) {
  const NetworkModel& net = cfg(s).network;
  Rng rng(seed_for(s, {kLatency, r, w.value, dir}));
  return net.base_latency + net.jitter * rng.uniform();
}

bool link_drops(const EngineState& s, Round r, WorkerId w, Direction dir) {
  const double p = cfg(s).network.drop_prob;
  if (p <= 0.0) return false;
  Rng rng(seed_for(s, {kDrop, r, w.value, dir}));
  return rng.bernoulli(p);
}

void schedule(EngineState& s, Event ev) {
  ev.seq = s.next_seq++;
  s.queue.emplace(std::make_pair(ev.time, ev.seq), std::move(ev));
}

Event make_event(EventKind kind, SimTime time, Round round = 0) {
  Event ev;
  ev.kind = kind;
  ev.time = time;
  ev.round = round;
  return ev;
}

void record(EngineState& s, const Event& ev, json payload) {
  s.log.push_back(EventRecord{ev.time, ev.seq, ev.kind, std::move(payload)});
}

const WorkerProfile& profile(const EngineState& s, WorkerId w) { return s.profiles.at(s.index_of.at(w)); }

const learner::Dataset& train_data(const EngineState& s, WorkerId w) { return s.data->workers.at(s.index_of.at(w)); }

ModelWeights load_model(const EngineState& s, const store::ContentAddress& address) {
  const store::Blob blob = s.store->get(address);
  if (store::ContentAddress::of(blob) != address) {
    throw InvariantViolation("content address mismatch for " + address.hex());
  }
  return learner::deserialize(blob);
}

store::ContentAddress put_model(EngineState& s, const ModelWeights& w) { return s.store->put(learner::serialize(w)); }

ClusterRound& cluster_record(EngineState& s, ClusterId c) {
  for (ClusterRound& rec : s.current.clusters) {
    if (rec.cluster == c) return rec;
  }
  throw InvariantViolation("no aggregation record for " + to_string(c));
}

void schedule_round_failures(EngineState& s, Round r, SimTime at) {
  for (const RoundFailure& f : cfg(s).round_failures) {
    if (f.first_round == r) {
      Event ev = make_event(EventKind::NodeCrash, at, r);
      ev.worker = f.worker;
      schedule(s, ev);
    }
    if (f.end_round == r) {
      Event ev = make_event(EventKind::NodeRecover, at, r);
      ev.worker = f.worker;
      schedule(s, ev);
    }
  }
}

void maybe_complete_round(EngineState& s) {
  if (s.settle_scheduled || s.clusters_pending > 0 || s.broadcasts_pending > 0 || s.scores_pending > 0) return;
  s.settle_scheduled = true;
  schedule(s, make_event(EventKind::RoundSettled, s.now + ledger_delay(s), s.round));
}

void schedule_score(EngineState& s, WorkerId w, double score, SimTime at) {
  Event ev = make_event(EventKind::ScoreSubmitted, at, s.round);
  ev.worker = w;
  ev.score = score;
  ev.counted = !s.settle_scheduled;
  if (ev.counted) ++s.scores_pending;
  schedule(s, ev);
}

// --- aggregation ------------------------------------------------------------

void finish_aggregate(EngineState& s, ClusterId c, ModelWeights model) {
  ClusterRuntime& cr = s.clusters.at(c);
  const WorkerProfile& head = profile(s, cr.head);
  if (head.honesty.active(s.round)) {
    model = learner::corrupt(model, {head.honesty.mode, head.honesty.magnitude},
                             seed_for(s, {kCorrupt, s.round, cr.head.value, 1}));
  }
  Event ev = make_event(EventKind::AggregatePublished, s.now, s.round);
  ev.cluster = c;
  ev.worker = cr.head;
  ev.blob = put_model(s, model);
  schedule(s, ev);
}

json aggregate_cluster(EngineState& s, ClusterId c) {
  const ScenarioConfig& config = cfg(s);
  ClusterRuntime& cr = s.clusters.at(c);
  cr.aggregated = true;
  s.current.clusters.push_back(ClusterRound{});
  ClusterRound& rec = s.current.clusters.back();
  rec.cluster = c;
  rec.head = cr.head;
  rec.aggregated_at = s.now;

  json out = {{"cluster", c.value}, {"head", cr.head.value}};
  if (s.workers.at(cr.head).crashed) {
    // Nobody aggregates this round; synchronous buffers expire, async ones wait.
    if (config.async_policy.mode == CollectionMode::Synchronous) {
      cr.buffer.clear();
      cr.buffer_addresses.clear();
    }
    cr.delivered.clear();
    --s.clusters_pending;
    out["skipped"] = "head down";
    return out;
  }

  std::vector<aggregate::Update> candidates;
  for (const auto& [w, u] : cr.buffer) candidates.push_back(u);

  json scored = json::object();
  if (config.score_mode == ScoreMode::HeadEvaluated) {
    for (WorkerId w : cr.delivered) {
      const double score = learner::evaluate(cr.buffer.at(w).weights, s.data->validation);
      scored[to_string(w)] = score;
      schedule_score(s, w, score, s.now + ledger_delay(s));
    }
  }
  cr.delivered.clear();

  std::vector<aggregate::Weighted> kept = aggregate::staleness_weights(candidates, s.round, config.async_policy);
  for (const aggregate::Update& u : candidates) {
    const bool survived =
        std::any_of(kept.begin(), kept.end(), [&](const aggregate::Weighted& k) { return k.update.worker == u.worker; });
    if (!survived) rec.stale_dropped.push_back(u.worker);
  }
  std::vector<aggregate::Weighted> parts;
  for (aggregate::Weighted& k : kept) {
    if (s.bad_workers.contains(k.update.worker)) {
      rec.filtered.push_back(k.update.worker);
      continue;
    }
    if (config.weighting == aggregate::Weighting::BySamples) k.coefficient *= static_cast<double>(k.update.samples);
    parts.push_back(std::move(k));
  }

  ModelWeights model;
  if (parts.empty()) {
    model = cr.latest ? load_model(s, *cr.latest) : s.initial_model;
    rec.republished = true;
  } else {
    model = aggregate::weighted_average(parts);
    double total = 0.0;
    for (const auto& p : parts) total += p.coefficient;
    for (const auto& p : parts) {
      rec.contributions.push_back(Contribution{p.update.worker, p.update.round_produced,
                                               cr.buffer_addresses.at(p.update.worker), p.coefficient / total});
    }
  }
  cr.buffer.clear();
  cr.buffer_addresses.clear();

  out["scores"] = scored;
  out["contributors"] = json::array();
  for (const Contribution& k : rec.contributions) out["contributors"].push_back(k.worker.value);
  out["filtered"] = ids_json(rec.filtered);
  out["stale_dropped"] = ids_json(rec.stale_dropped);
  out["republished"] = rec.republished;

  // Optional pull of another cluster's aggregate from an earlier round.
  if (config.num_clusters > 1 && config.intercluster_pull_prob > 0.0) {
    Rng rng(seed_for(s, {kPull, s.round, c.value}));
    if (rng.bernoulli(config.intercluster_pull_prob)) {
      std::vector<std::pair<ClusterId, store::ContentAddress>> sources;
      for (const auto& [other, ocr] : s.clusters) {
        if (other == c) continue;
        for (auto it = ocr.history.rbegin(); it != ocr.history.rend(); ++it) {
          if (it->first < s.round) {
            sources.emplace_back(other, it->second);
            break;
          }
        }
      }
      if (!sources.empty()) {
        const auto& [from, address] = sources[rng.below(sources.size())];
        cr.pending_aggregate = std::move(model);
        Event ev = make_event(EventKind::InterClusterPull, s.now + 2.0 * config.network.base_latency, s.round);
        ev.cluster = c;
        ev.worker = cr.head;
        ev.blob = address;
        ev.generation = from.value;
        schedule(s, ev);
        out["pull_from"] = from.value;
        return out;
      }
    }
  }
  finish_aggregate(s, c, std::move(model));
  return out;
}

bool all_expected_delivered(const ClusterRuntime& cr) {
  return !cr.expected.empty() &&
         std::includes(cr.delivered.begin(), cr.delivered.end(), cr.expected.begin(), cr.expected.end());
}

// --- handlers ---------------------------------------------------------------

void on_contract_deployed(EngineState& s, const Event& ev) {
  const Tokens balance = cfg(s).effective_requester_balance();
  s.ledger = ledger::init_contract(cfg(s).contract, balance);
  record(s, ev, {{"contract", ledger::to_json(cfg(s).contract)}, {"requester_balance", balance}, {"tx", tx_since(s.ledger, 0)}});
}

void on_enroll(EngineState& s, const Event& ev) {
  const WorkerProfile& p = profile(s, ev.worker);
  json payload = {{"worker", ev.worker.value}, {"x", p.location.x}, {"y", p.location.y}, {"speed_factor", p.speed_factor}};
  if (s.ledger) {
    const std::size_t before = s.ledger->tx_log.size();
    const Tokens balance = cfg(s).effective_worker_balance();
    ledger::join_worker(*s.ledger, ev.worker, balance);
    payload["balance"] = balance;
    payload["tx"] = tx_since(s.ledger, before);
  }
  record(s, ev, payload);
}

void on_cluster_formed(EngineState& s, const Event& ev) { record(s, ev, clustering::to_json(s.assignment)); }

void on_round_started(EngineState& s, const Event& ev) {
  const ScenarioConfig& config = cfg(s);
  const Round r = ev.round;
  s.round = r;
  s.round_started_at = s.now;
  s.settle_scheduled = false;
  s.clusters_pending = s.clusters.size();
  s.broadcasts_pending = 0;
  s.scores_pending = 0;
  s.round_scores.clear();
  s.participants.clear();
  s.current = RoundSummary{};
  s.current.round = r;
  s.current.started_at = s.now;

  std::vector<WorkerId> live;
  for (const auto& [w, wr] : s.workers) {
    if (!wr.crashed) live.push_back(w);
  }
  s.participants.insert(live.begin(), live.end());

  json payload = {{"round", r}, {"participants", ids_json(live)}};
  if (s.ledger && r > 0) {
    const std::size_t before = s.ledger->tx_log.size();
    try {
      ledger::open_round(*s.ledger, r, live);
    } catch (const ledger::LedgerError& e) {
      throw InvariantViolation(std::string("cannot open round: ") + e.what());
    }
    payload["tx"] = tx_since(s.ledger, before);
  }
  s.train_start = s.now + (s.ledger && r > 0 ? config.network.ledger_tx_latency : 0.0);

  // Heads: the seeded draw, or the next live member when the drawn one is down.
  const std::uint64_t head_seed = seed_for(s, {kHeads});
  json heads = json::object();
  for (auto& [c, cr] : s.clusters) {
    const auto& members = s.assignment.clusters.at(c);
    const WorkerId drawn = clustering::select_head(s.assignment, c, r, config.rotation_period, head_seed);
    const auto start = static_cast<std::size_t>(std::find(members.begin(), members.end(), drawn) - members.begin());
    WorkerId head = drawn;
    for (std::size_t k = 0; k < members.size(); ++k) {
      const WorkerId cand = members[(start + k) % members.size()];
      if (!s.workers.at(cand).crashed) {
        head = cand;
        break;
      }
    }
    cr.head = head;
    s.assignment.heads[c] = head;
    heads[to_string(c)] = head.value;

    cr.expected.clear();
    cr.aggregated = false;
    cr.pending_aggregate.reset();
    if (config.async_policy.mode == CollectionMode::Synchronous) {
      cr.buffer.clear();
      cr.buffer_addresses.clear();
      cr.delivered.clear();
    }
  }
  payload["heads"] = heads;

  if (config.async_policy.mode == CollectionMode::Synchronous) {
    for (auto& [w, wr] : s.workers) {
      if (wr.training) {
        wr.training = false;
        wr.pending.reset();
        ++wr.generation;
      }
    }
  }

  std::vector<WorkerId> starters;
  for (const auto& [w, wr] : s.workers) {
    if (wr.crashed || wr.training) continue;
    const ClusterId c = s.assignment.cluster_of(w);
    if (!config.head_trains && s.clusters.at(c).head == w) continue;
    starters.push_back(w);
  }

  learner::OptimizerConfig opt = config.optimizer;
  opt.epochs = config.epochs_per_round;
  std::vector<ModelWeights> trained(starters.size());
  std::vector<std::exception_ptr> errors(starters.size());
  auto train_one = [&](std::size_t i) {
    try {
      const WorkerId w = starters[i];
      trained[i] = learner::train_local(s.workers.at(w).model, train_data(s, w), opt, seed_for(s, {kTrain, r, w.value}));
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };
  const auto count = static_cast<std::ptrdiff_t>(starters.size());
  if (config.parallel_training) {
#pragma omp parallel for schedule(dynamic)
    for (std::ptrdiff_t i = 0; i < count; ++i) train_one(static_cast<std::size_t>(i));
  } else {
    for (std::ptrdiff_t i = 0; i < count; ++i) train_one(static_cast<std::size_t>(i));
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  // Merged in ascending worker id whatever the thread schedule was.
  for (std::size_t i = 0; i < starters.size(); ++i) {
    const WorkerId w = starters[i];
    WorkerRuntime& wr = s.workers.at(w);
    wr.pending = std::move(trained[i]);
    wr.training = true;
    wr.training_round = r;
    ++wr.generation;
    const double duration = profile(s, w).speed_factor * config.epochs_per_round *
                            static_cast<double>(train_data(s, w).size()) * config.cost_per_sample;
    Event done = make_event(EventKind::TrainComplete, s.train_start + duration, r);
    done.worker = w;
    done.cluster = s.assignment.cluster_of(w);
    done.generation = wr.generation;
    schedule(s, done);
    if (config.async_policy.mode == CollectionMode::Synchronous) s.clusters.at(done.cluster).expected.insert(w);
  }
  payload["training"] = ids_json(starters);

  for (const auto& [c, cr] : s.clusters) {
    Event close = make_event(EventKind::CollectionClosed, s.train_start + config.async_policy.collection_window, r);
    close.cluster = c;
    schedule(s, close);
  }
  record(s, ev, payload);
}

void on_train_complete(EngineState& s, const Event& ev) {
  const ScenarioConfig& config = cfg(s);
  WorkerRuntime& wr = s.workers.at(ev.worker);
  if (wr.crashed || !wr.training || ev.generation != wr.generation) {
    record(s, ev, {{"worker", ev.worker.value}, {"round_produced", ev.round}, {"discarded", true}});
    return;
  }
  wr.training = false;
  const ModelWeights clean = std::move(*wr.pending);
  wr.pending.reset();

  const WorkerProfile& p = profile(s, ev.worker);
  const bool corrupted = p.honesty.active(ev.round);
  ModelWeights sent = corrupted ? learner::corrupt(clean, {p.honesty.mode, p.honesty.magnitude},
                                                   seed_for(s, {kCorrupt, ev.round, ev.worker.value, 0}))
                                : clean;
  const store::ContentAddress address = put_model(s, sent);
  wr.last_submitted = std::move(sent);

  json payload = {{"worker", ev.worker.value}, {"round_produced", ev.round}, {"update", address.hex()},
                  {"corrupted", corrupted}};

  if (config.score_mode == ScoreMode::SelfReported) {
    // A dishonest worker simply claims a perfect score.
    const double score = corrupted ? 100.0 : learner::evaluate(clean, train_data(s, ev.worker));
    schedule_score(s, ev.worker, score, s.now + ledger_delay(s));
    payload["self_score"] = score;
  }

  const ClusterId c = s.assignment.cluster_of(ev.worker);
  Event arrive = make_event(EventKind::UpdateArrived, s.now, ev.round);
  arrive.worker = ev.worker;
  arrive.cluster = c;
  arrive.blob = address;
  if (s.clusters.at(c).head != ev.worker) {
    if (link_drops(s, ev.round, ev.worker, kUplink)) {
      payload["dropped"] = true;
      record(s, ev, payload);
      return;
    }
    arrive.time += link_latency(s, ev.round, ev.worker, kUplink);
  }
  schedule(s, arrive);
  record(s, ev, payload);
}

void on_update_arrived(EngineState& s, const Event& ev) {
  const bool sync = cfg(s).async_policy.mode == CollectionMode::Synchronous;
  ClusterRuntime& cr = s.clusters.at(ev.cluster);
  json payload = {{"worker", ev.worker.value}, {"cluster", ev.cluster.value}, {"round_produced", ev.round}};
  if (s.workers.at(cr.head).crashed) {
    payload["lost"] = "head down";
    record(s, ev, payload);
    return;
  }
  if (sync && (cr.aggregated || ev.round != s.round)) {
    payload["lost"] = "late";
    record(s, ev, payload);
    return;
  }
  aggregate::Update u;
  u.worker = ev.worker;
  u.weights = load_model(s, *ev.blob);
  u.round_produced = ev.round;
  u.samples = train_data(s, ev.worker).size();
  u.arrival_time = s.now;
  cr.buffer[ev.worker] = std::move(u);
  cr.buffer_addresses.insert_or_assign(ev.worker, *ev.blob);
  cr.delivered.insert(ev.worker);
  if (sync && !cr.aggregated && all_expected_delivered(cr)) payload["aggregation"] = aggregate_cluster(s, ev.cluster);
  record(s, ev, payload);
  maybe_complete_round(s);
}

void on_collection_closed(EngineState& s, const Event& ev) {
  ClusterRuntime& cr = s.clusters.at(ev.cluster);
  json payload = {{"cluster", ev.cluster.value}, {"round", ev.round}};
  if (ev.round == s.round && !cr.aggregated) payload["aggregation"] = aggregate_cluster(s, ev.cluster);
  record(s, ev, payload);
  maybe_complete_round(s);
}

void on_intercluster_pull(EngineState& s, const Event& ev) {
  ClusterRuntime& cr = s.clusters.at(ev.cluster);
  const ModelWeights foreign = load_model(s, *ev.blob);
  ModelWeights merged = aggregate::merge_intercluster(*cr.pending_aggregate, foreign, cfg(s).intercluster_beta);
  cr.pending_aggregate.reset();
  cluster_record(s, ev.cluster).pulled_from = ClusterId(static_cast<std::uint32_t>(ev.generation));
  record(s, ev, {{"cluster", ev.cluster.value}, {"from", ev.generation}, {"address", ev.blob->hex()}});
  finish_aggregate(s, ev.cluster, std::move(merged));
}

void on_aggregate_published(EngineState& s, const Event& ev) {
  ClusterRuntime& cr = s.clusters.at(ev.cluster);
  const store::ContentAddress& address = *ev.blob;
  const ModelWeights model = load_model(s, address);
  cr.latest = address;
  cr.history.emplace_back(ev.round, address);

  WorkerRuntime& head = s.workers.at(ev.worker);
  head.model = model;
  head.known_aggregate = address;

  ClusterRound& rec = cluster_record(s, ev.cluster);
  rec.published = true;
  rec.aggregate = address;
  rec.accuracy = learner::evaluate(model, s.data->validation);

  json deliveries = json::array();
  for (WorkerId w : s.assignment.clusters.at(ev.cluster)) {
    if (w == ev.worker || link_drops(s, ev.round, w, kDownlink)) continue;
    Event d = make_event(EventKind::BroadcastDelivered, s.now + link_latency(s, ev.round, w, kDownlink), ev.round);
    d.worker = w;
    d.cluster = ev.cluster;
    d.blob = address;
    schedule(s, d);
    ++s.broadcasts_pending;
    deliveries.push_back(w.value);
  }
  --s.clusters_pending;
  record(s, ev, {{"cluster", ev.cluster.value}, {"round", ev.round}, {"head", ev.worker.value},
                 {"address", address.hex()}, {"accuracy", rec.accuracy}, {"broadcast_to", deliveries}});
  maybe_complete_round(s);
}

void on_broadcast_delivered(EngineState& s, const Event& ev) {
  --s.broadcasts_pending;
  WorkerRuntime& wr = s.workers.at(ev.worker);
  const bool received = !wr.crashed;
  if (received) {
    wr.model = load_model(s, *ev.blob);
    wr.known_aggregate = *ev.blob;
  }
  record(s, ev, {{"worker", ev.worker.value}, {"address", ev.blob->hex()}, {"received", received}});
  maybe_complete_round(s);
}

void on_score_submitted(EngineState& s, const Event& ev) {
  if (ev.counted) --s.scores_pending;
  const bool accepted = ev.counted && ev.round == s.round && s.participants.contains(ev.worker) &&
                        !s.round_scores.contains(ev.worker);
  json payload = {{"worker", ev.worker.value}, {"round", ev.round}, {"score", ev.score}, {"accepted", accepted}};
  if (accepted) {
    s.round_scores[ev.worker] = ev.score;
    if (s.ledger) {
      const std::size_t before = s.ledger->tx_log.size();
      ledger::submit_score(*s.ledger, ev.round, ev.worker, ev.score);
      payload["tx"] = tx_since(s.ledger, before);
    }
  }
  record(s, ev, payload);
  maybe_complete_round(s);
}

void finalize_tokens(EngineState& s) {
  if (!s.ledger) return;
  TokenTotals t;
  for (const RoundSummary& r : s.report.rounds) {
    if (!r.settlement) continue;
    for (const auto& [w, v] : r.settlement->penalties) t.penalties += v;
    for (const auto& [w, v] : r.settlement->rewards) t.rewards += v;
  }
  t.requester_balance = s.ledger->requester_balance;
  t.worker_balances = s.ledger->balances;
  s.report.tokens = t;
}

void on_round_settled(EngineState& s, const Event& ev) {
  const ScenarioConfig& config = cfg(s);
  const Round r = ev.round;
  json payload = {{"round", r}};
  if (s.ledger) {
    const std::size_t before = s.ledger->tx_log.size();
    std::vector<WorkerId> excused;
    for (WorkerId w : s.ledger->enrolled) {
      if (!s.round_scores.contains(w)) {
        ledger::excuse_worker(*s.ledger, r, w);
        excused.push_back(w);
      }
    }
    ledger::SettlementReport settlement = ledger::settle_round(*s.ledger, r);
    if (!s.ledger->conserved()) {
      throw InvariantViolation("token conservation broken in round " + std::to_string(r));
    }
    s.bad_workers = settlement.bad_workers;
    payload["excused"] = ids_json(excused);
    payload["settlement"] = ledger::to_json(settlement);
    payload["tx"] = tx_since(s.ledger, before);
    s.current.settlement = std::move(settlement);
  } else {
    s.bad_workers = ledger::identify_bad_workers(s.round_scores, config.contract.threshold);
  }
  s.current.scores = s.round_scores;
  s.current.bad_workers = s.bad_workers;
  s.current.completed_at = s.now;
  payload["bad_workers"] = ids_json(s.bad_workers);

  std::vector<double> accuracies;
  json rows = json::array();
  for (const auto& [w, wr] : s.workers) {
    if (wr.crashed) continue;
    const ModelWeights& model = wr.last_submitted ? *wr.last_submitted : wr.model;
    WorkerRoundMetrics m;
    m.round = r;
    m.worker = w;
    m.cluster = s.assignment.cluster_of(w);
    m.is_head = s.clusters.at(m.cluster).head == w;
    m.accuracy = learner::evaluate(model, s.data->validation);
    m.loss = learner::loss(model, s.data->validation);
    accuracies.push_back(m.accuracy);
    rows.push_back(row_json(m));
    s.report.rows.push_back(m);
  }
  std::tie(s.current.mean_accuracy, s.current.std_accuracy) = mean_and_std(accuracies);
  payload["rows"] = rows;
  payload["mean_accuracy"] = s.current.mean_accuracy;
  payload["std_accuracy"] = s.current.std_accuracy;
  s.report.rounds.push_back(std::move(s.current));
  s.current = RoundSummary{};
  record(s, ev, payload);

  if (r + 1 < config.rounds) {
    schedule_round_failures(s, r + 1, s.now);
    schedule(s, make_event(EventKind::RoundStarted, s.now, r + 1));
  } else {
    s.finished = true;
    s.report.total_time = s.now;
    s.report.clusters = s.assignment;
    finalize_tokens(s);
  }
}

void on_node_crash(EngineState& s, const Event& ev) {
  WorkerRuntime& wr = s.workers.at(ev.worker);
  const bool lost_training = wr.training;
  wr.crashed = true;
  if (wr.training) {
    wr.training = false;
    wr.pending.reset();
    ++wr.generation;
  }
  record(s, ev, {{"worker", ev.worker.value}, {"lost_training", lost_training}});
}

void on_node_recover(EngineState& s, const Event& ev) {
  WorkerRuntime& wr = s.workers.at(ev.worker);
  wr.crashed = false;
  // Catch up from the store on the cluster's latest aggregate.
  const ClusterRuntime& cr = s.clusters.at(s.assignment.cluster_of(ev.worker));
  json payload = {{"worker", ev.worker.value}};
  if (cr.latest && wr.known_aggregate != cr.latest) {
    wr.model = load_model(s, *cr.latest);
    wr.known_aggregate = cr.latest;
    payload["fetched"] = cr.latest->hex();
  }
  record(s, ev, payload);
}

}  // namespace

const char* to_string(EventKind kind) { return kKindNames[static_cast<std::size_t>(kind)]; }

std::optional<EventKind> event_kind_from_string(const std::string& name) {
  for (std::size_t i = 0; i < kKindNames.size(); ++i) {
    if (name == kKindNames[i]) return static_cast<EventKind>(i);
  }
  return std::nullopt;
}

std::pair<double, double> mean_and_std(const std::vector<double>& xs) {
  if (xs.empty()) return {0.0, 0.0};
  double sum = 0.0;
  for (double x : xs) sum += x;
  const double mean = sum / static_cast<double>(xs.size());
  double ss = 0.0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / static_cast<double>(xs.size()))};
}

std::vector<WorkerProfile> generate_workers(std::size_t count, std::size_t num_sites, double spread,
                                            std::uint64_t seed) {
  num_sites = std::max<std::size_t>(num_sites, 1);
  std::vector<WorkerProfile> out;
  Rng rng(derive_seed(seed, {0x73697465}));
  for (std::size_t i = 0; i < count; ++i) {
    const double angle = 2.0 * std::numbers::pi * static_cast<double>(i % num_sites) / static_cast<double>(num_sites);
    WorkerProfile p;
    p.id = WorkerId(static_cast<std::uint32_t>(i));
    p.location.x = 50.0 * std::cos(angle) + spread * rng.normal();
    p.location.y = 50.0 * std::sin(angle) + spread * rng.normal();
    out.push_back(p);
  }
  return out;
}

Tokens ScenarioConfig::effective_requester_balance() const {
  return requester_balance > 0 ? requester_balance : static_cast<Tokens>(rounds) * contract.reward_pool;
}

Tokens ScenarioConfig::effective_worker_balance() const {
  return worker_balance > 0 ? worker_balance : static_cast<Tokens>(rounds) * contract.fixed_deposit;
}

void ScenarioConfig::validate() const {
  auto require = [](bool ok, const char* path, const std::string& message) {
    if (!ok) throw ConfigError(path, message);
  };
  require(!workers.empty(), "workers", "need at least one worker");
  std::set<WorkerId> ids;
  for (const WorkerProfile& p : workers) {
    require(ids.insert(p.id).second, "workers", "duplicate worker id " + to_string(p.id));
    require(p.speed_factor > 0.0 && std::isfinite(p.speed_factor), "workers.speed_factor", "must be > 0");
    require(std::isfinite(p.location.x) && std::isfinite(p.location.y), "workers", "coordinates must be finite");
    require(!p.honesty.corrupt || p.honesty.magnitude >= 0.0, "corruption.sigma", "must be >= 0");
  }
  require(data.num_features >= 1, "data.features", "must be >= 1");
  require(data.num_classes >= 2, "data.classes", "must be >= 2");
  require(data.samples_per_worker >= data.num_classes, "data.samples_per_worker", "must be >= classes");
  require(data.validation_samples >= 1, "data.validation_samples", "must be >= 1");
  require(data.noniid_skew >= 0.0 && data.noniid_skew <= 1.0, "data.noniid_skew", "must be in [0, 1]");
  require(data.class_separation >= 0.0, "data.class_separation", "must be >= 0");
  require(num_clusters >= 1 && num_clusters <= workers.size(), "num_clusters", "must be in [1, number of workers]");
  require(rotation_period >= 1, "rotation_period", "must be >= 1");
  require(rounds >= 1, "rounds", "must be >= 1");
  require(epochs_per_round >= 1, "epochs_per_round", "must be >= 1");

  require(optimizer.learning_rate > 0.0, "optimizer.learning_rate", "must be > 0");
  require(optimizer.momentum >= 0.0 && optimizer.momentum < 1.0, "optimizer.momentum", "must be in [0, 1)");
  require(optimizer.dampening >= 0.0 && optimizer.dampening <= 1.0, "optimizer.dampening", "must be in [0, 1]");
  require(optimizer.weight_decay >= 0.0, "optimizer.weight_decay", "must be >= 0");
  require(optimizer.batch_size >= 1, "optimizer.batch_size", "must be >= 1");

  require(contract.fixed_deposit >= 0, "contract.fixed_deposit_F", "must be >= 0");
  require(contract.threshold >= 0.0 && contract.threshold <= 100.0, "contract.threshold_T", "must be in [0, 100]");
  require(contract.penalty_pct >= 0 && contract.penalty_pct <= 100, "contract.penalty_pct_P", "must be in [0, 100]");
  require(contract.top_k >= 1, "contract.top_k", "must be >= 1");
  require(contract.reward_pool >= 0, "contract.reward_pool_R_total", "must be >= 0");
  require(requester_balance >= 0, "contract.requester_balance", "must be >= 0");
  require(worker_balance >= 0, "contract.worker_balance", "must be >= 0");
  require(effective_requester_balance() >= static_cast<Tokens>(rounds) * contract.reward_pool,
          "contract.requester_balance", "must cover the reward pool for every round");
  require(effective_worker_balance() >= static_cast<Tokens>(rounds) * contract.fixed_deposit,
          "contract.worker_balance", "must cover the deposit for every round");

  require(async_policy.staleness_decay > 0.0 && async_policy.staleness_decay <= 1.0,
          "async_policy.staleness_decay_alpha", "must be in (0, 1]");
  require(async_policy.collection_window > 0.0 && std::isfinite(async_policy.collection_window),
          "async_policy.collection_window", "must be > 0");

  require(network.base_latency >= 0.0, "network.base_latency", "must be >= 0");
  require(network.jitter >= 0.0, "network.jitter", "must be >= 0");
  require(network.drop_prob >= 0.0 && network.drop_prob < 1.0, "network.drop_prob", "must be in [0, 1)");
  require(network.ledger_tx_latency >= 0.0, "network.ledger_tx_latency", "must be >= 0");

  require(intercluster_pull_prob >= 0.0 && intercluster_pull_prob <= 1.0, "intercluster_pull_prob",
          "must be in [0, 1]");
  require(intercluster_beta >= 0.0 && intercluster_beta <= 1.0, "intercluster_beta", "must be in [0, 1]");
  require(cost_per_sample >= 0.0, "cost_per_sample", "must be >= 0");

  for (const TimedFailure& f : failures) {
    require(ids.contains(f.worker), "failures.worker", "unknown " + to_string(f.worker));
    require(f.crash_time >= 0.0 && f.crash_time < f.recover_time, "failures.recover_time",
            "need 0 <= crash_time < recover_time");
  }
  for (const RoundFailure& f : round_failures) {
    require(ids.contains(f.worker), "failures.worker", "unknown " + to_string(f.worker));
    require(f.first_round < f.end_round, "failures.recover_round", "need crash_round < recover_round");
  }
}

std::string format_double(double v) {
  std::array<char, 64> buf{};
  const auto [end, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  if (ec != std::errc{}) throw std::runtime_error("cannot format double");
  return std::string(buf.data(), end);
}

std::string metrics_csv(const std::vector<WorkerRoundMetrics>& rows) {
  std::string out = "round,worker,cluster,is_head,accuracy,loss\n";
  for (const WorkerRoundMetrics& m : rows) {
    out += std::to_string(m.round);
    out += ',';
    out += std::to_string(m.worker.value);
    out += ',';
    out += std::to_string(m.cluster.value);
    out += m.is_head ? ",1," : ",0,";
    out += format_double(m.accuracy);
    out += ',';
    out += format_double(m.loss);
    out += '\n';
  }
  return out;
}

bool EngineState::operator==(const EngineState& o) const {
  auto tied = [](const EngineState& s) {
    return std::tie(s.now, s.next_seq, s.queue, s.log, s.profiles, s.index_of, s.workers, s.assignment, s.clusters,
                    s.initial_model, s.ledger, s.bad_workers, s.round, s.finished, s.round_started_at, s.train_start,
                    s.clusters_pending, s.broadcasts_pending, s.scores_pending, s.settle_scheduled, s.participants, s.round_scores,
                    s.current, s.report);
  };
  const bool same_inputs = (config == o.config || (config && o.config && *config == *o.config)) &&
                           (data == o.data || (data && o.data && data->workers == o.data->workers &&
                                               data->validation == o.data->validation));
  return same_inputs && tied(*this) == tied(o);
}

EngineState make_engine(const ScenarioConfig& config, std::shared_ptr<store::ContentStore> content) {
  config.validate();
  EngineState s;
  s.config = std::make_shared<const ScenarioConfig>(config);
  s.store = content ? std::move(content) : std::make_shared<store::ContentStore>();

  s.profiles = config.workers;
  std::sort(s.profiles.begin(), s.profiles.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  for (std::size_t i = 0; i < s.profiles.size(); ++i) s.index_of.emplace(s.profiles[i].id, i);

  learner::DataSpec spec = config.data;
  spec.num_workers = s.profiles.size();
  s.data = std::make_shared<const learner::FederatedData>(learner::generate_data(spec, seed_for(s, {kData})));

  s.initial_model = learner::init_model(spec.num_features, spec.num_classes, seed_for(s, {kInit}));
  for (const auto& p : s.profiles) s.workers[p.id].model = s.initial_model;

  s.assignment = clustering::form_clusters(s.profiles, config.num_clusters, seed_for(s, {kClusters}));
  clustering::rotate_heads(s.assignment, 0, config.rotation_period, seed_for(s, {kHeads}));
  for (const auto& [c, head] : s.assignment.heads) s.clusters[c].head = head;

  if (config.blockchain_enabled) schedule(s, make_event(EventKind::ContractDeployed, 0.0));
  for (const auto& p : s.profiles) {
    Event ev = make_event(EventKind::Enroll, 0.0);
    ev.worker = p.id;
    schedule(s, ev);
  }
  schedule(s, make_event(EventKind::ClusterFormed, 0.0));

  for (const TimedFailure& f : config.failures) inject_failure(s, f.worker, f.crash_time, f.recover_time);
  const SimTime first_round = config.blockchain_enabled ? config.network.ledger_tx_latency : 0.0;
  schedule_round_failures(s, 0, first_round);
  schedule(s, make_event(EventKind::RoundStarted, first_round, 0));
  return s;
}

void inject_failure(EngineState& s, WorkerId worker, SimTime crash_time, SimTime recover_time) {
  if (!s.index_of.contains(worker)) throw EngineError(EngineError::Code::UnknownWorker, "unknown " + to_string(worker));
  if (!(crash_time < recover_time) || crash_time < s.now) {
    throw EngineError(EngineError::Code::InvalidWindow, "failure window must satisfy now <= crash < recover");
  }
  Event crash = make_event(EventKind::NodeCrash, crash_time, s.round);
  crash.worker = worker;
  schedule(s, crash);
  Event recover = make_event(EventKind::NodeRecover, recover_time, s.round);
  recover.worker = worker;
  schedule(s, recover);
}

void step(EngineState& s) {
  if (s.queue.empty()) throw EngineError(EngineError::Code::QueueEmpty, "no pending events");
  auto node = s.queue.extract(s.queue.begin());
  const Event ev = std::move(node.mapped());
  if (ev.time < s.now) throw InvariantViolation("simulated time went backwards");
  s.now = ev.time;
  switch (ev.kind) {
    case EventKind::ContractDeployed: on_contract_deployed(s, ev); break;
    case EventKind::Enroll: on_enroll(s, ev); break;
    case EventKind::ClusterFormed: on_cluster_formed(s, ev); break;
    case EventKind::RoundStarted: on_round_started(s, ev); break;
    case EventKind::TrainComplete: on_train_complete(s, ev); break;
    case EventKind::UpdateArrived: on_update_arrived(s, ev); break;
    case EventKind::CollectionClosed: on_collection_closed(s, ev); break;
    case EventKind::InterClusterPull: on_intercluster_pull(s, ev); break;
    case EventKind::AggregatePublished: on_aggregate_published(s, ev); break;
    case EventKind::BroadcastDelivered: on_broadcast_delivered(s, ev); break;
    case EventKind::ScoreSubmitted: on_score_submitted(s, ev); break;
    case EventKind::RoundSettled: on_round_settled(s, ev); break;
    case EventKind::NodeCrash: on_node_crash(s, ev); break;
    case EventKind::NodeRecover: on_node_recover(s, ev); break;
  }
}

RunOutput simulate(const ScenarioConfig& config, std::shared_ptr<store::ContentStore> content) {
  EngineState s = make_engine(config, std::move(content));
  while (!s.finished) step(s);
  return RunOutput{std::move(s.report), std::move(s.log), std::move(s.ledger)};
}

}  // namespace sdfl::engine
