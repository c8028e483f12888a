#include "sdfl/engine.hpp"

#include <gtest/gtest.h>

#include <charconv>

#include "sdfl/random.hpp"

namespace sdfl::engine {
namespace {

ScenarioConfig small_config(std::size_t workers, std::size_t clusters, Round rounds, std::uint64_t seed = 7) {
  ScenarioConfig c;
  c.master_seed = seed;
  c.workers = generate_workers(workers, clusters, 5.0, seed);
  c.data.samples_per_worker = 60;
  c.data.num_features = 4;
  c.data.num_classes = 3;
  c.data.validation_samples = 200;
  c.num_clusters = clusters;
  c.rounds = rounds;
  c.optimizer.learning_rate = 0.05;
  c.contract.threshold = 0.0;  // nobody is penalised unless a test says so
  c.contract.top_k = 1;
  return c;
}

learner::ModelWeights model_at(const store::ContentStore& st, const store::ContentAddress& a) {
  return learner::deserialize(st.get(a));
}

void run_to_end(EngineState& s) {
  while (!s.finished) step(s);
}

TEST(Engine, DeterministicAcrossRuns) {
  const ScenarioConfig c = small_config(5, 2, 3);
  const RunOutput a = simulate(c);
  const RunOutput b = simulate(c);
  EXPECT_EQ(a.metrics, b.metrics);
  EXPECT_EQ(a.events, b.events);
  EXPECT_EQ(ledger_digest(a.ledger), ledger_digest(b.ledger));
}

TEST(Engine, SeedChangesTheRun) {
  ScenarioConfig c = small_config(5, 2, 2);
  const auto a = run_scenario(c);
  c.master_seed = 8;
  EXPECT_NE(run_scenario(c).rows, a.rows);
}

TEST(Engine, StepOnEmptyQueue) {
  EngineState s = make_engine(small_config(2, 1, 1));
  run_to_end(s);
  s.queue.clear();
  try {
    step(s);
    FAIL();
  } catch (const EngineError& e) {
    EXPECT_EQ(e.code(), EngineError::Code::QueueEmpty);
  }
}

TEST(Engine, InjectFailureErrors) {
  EngineState s = make_engine(small_config(2, 1, 1));
  auto code_of = [&](WorkerId w, SimTime a, SimTime b) {
    try {
      inject_failure(s, w, a, b);
    } catch (const EngineError& e) {
      return e.code();
    }
    ADD_FAILURE() << "no error";
    return EngineError::Code::QueueEmpty;
  };
  EXPECT_EQ(code_of(WorkerId(0), 2.0, 2.0), EngineError::Code::InvalidWindow);
  EXPECT_EQ(code_of(WorkerId(0), 3.0, 1.0), EngineError::Code::InvalidWindow);
  EXPECT_EQ(code_of(WorkerId(9), 1.0, 2.0), EngineError::Code::UnknownWorker);
  while (s.now == 0.0) step(s);
  EXPECT_EQ(code_of(WorkerId(0), s.now / 2, s.now + 1), EngineError::Code::InvalidWindow);
}

TEST(Engine, InvalidConfigRejected) {
  ScenarioConfig c = small_config(3, 1, 1);
  c.contract.penalty_pct = 150;
  try {
    make_engine(c);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.path(), "contract.penalty_pct_P");
  }
  c = small_config(3, 4, 1);
  EXPECT_THROW(make_engine(c), ConfigError);
}

TEST(Engine, SynchronousCrashLeavesTheLiveWorkersUpdate) {
  ScenarioConfig c = small_config(2, 1, 1);
  const MetricsReport base = run_scenario(c);
  const WorkerId head = base.rounds.at(0).clusters.at(0).head;
  const WorkerId other(1 - head.value);

  // Down a moment after the round opens, while it is still training, so the
  // head is left waiting on it.
  auto st = std::make_shared<store::ContentStore>();
  EngineState s = make_engine(c, st);
  inject_failure(s, other, base.rounds[0].started_at + 0.01, 1e6);
  run_to_end(s);

  const ClusterRound& cr = s.report.rounds.at(0).clusters.at(0);
  ASSERT_TRUE(cr.published);
  ASSERT_EQ(cr.contributions.size(), 1u);
  EXPECT_EQ(cr.contributions[0].worker, head);
  EXPECT_EQ(cr.contributions[0].coefficient, 1.0);
  EXPECT_EQ(model_at(*st, *cr.aggregate), model_at(*st, cr.contributions[0].update));
  // Only the live worker is reported.
  for (const auto& row : s.report.rows) EXPECT_EQ(row.worker, head);
  // The collection window had to expire.
  EXPECT_GE(cr.aggregated_at, s.report.rounds[0].started_at + c.async_policy.collection_window);
}

TEST(Engine, WorkerDownAtRoundStartIsNotWaitedFor) {
  ScenarioConfig c = small_config(2, 1, 1);
  const MetricsReport base = run_scenario(c);
  const WorkerId head = base.rounds.at(0).clusters.at(0).head;
  EngineState s = make_engine(c);
  inject_failure(s, WorkerId(1 - head.value), 0.0, 1e6);
  run_to_end(s);
  const ClusterRound& cr = s.report.rounds.at(0).clusters.at(0);
  ASSERT_EQ(cr.contributions.size(), 1u);
  EXPECT_EQ(cr.contributions[0].worker, head);
  EXPECT_LT(cr.aggregated_at, s.report.rounds[0].started_at + c.async_policy.collection_window);
}

TEST(Engine, FailureHealedBeforeTheRoundHasNoEffect) {
  const ScenarioConfig c = small_config(3, 1, 2);
  const MetricsReport base = run_scenario(c);
  const SimTime start = base.rounds.at(0).started_at;
  ASSERT_GT(start, 0.2);
  EngineState s = make_engine(c);
  inject_failure(s, WorkerId(1), 0.1, 0.2);
  run_to_end(s);
  EXPECT_EQ(s.report.rows, base.rows);
  for (std::size_t r = 0; r < base.rounds.size(); ++r) {
    EXPECT_EQ(s.report.rounds[r].clusters, base.rounds[r].clusters);
  }
}

TEST(Engine, CrashRemovesTheWorkerFromTheLiveSet) {
  EngineState s = make_engine(small_config(3, 1, 1));
  inject_failure(s, WorkerId(2), 0.0, 5.0);
  while (!s.workers.at(WorkerId(2)).crashed) step(s);
  EXPECT_EQ(s.log.back().kind, EventKind::NodeCrash);
}

TEST(EngineProperty, BlockchainDoesNotChangeLearning) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    for (ScoreMode mode : {ScoreMode::HeadEvaluated, ScoreMode::SelfReported}) {
      ScenarioConfig c = small_config(6, 2, 3, seed);
      c.score_mode = mode;
      c.contract.threshold = 60;  // makes filtering actually happen
      c.workers[1].honesty = Honesty::corrupted(CorruptionKind::SignFlip);
      const MetricsReport on = run_scenario(c);
      c.blockchain_enabled = false;
      const MetricsReport off = run_scenario(c);
      EXPECT_EQ(on.rows, off.rows) << seed;
      EXPECT_GT(on.total_time, off.total_time);
      EXPECT_TRUE(on.tokens.has_value());
      EXPECT_FALSE(off.tokens.has_value());
      for (std::size_t r = 0; r < on.rounds.size(); ++r) {
        EXPECT_EQ(on.rounds[r].bad_workers, off.rounds[r].bad_workers);
        EXPECT_EQ(on.rounds[r].mean_accuracy, off.rounds[r].mean_accuracy);
      }
    }
  }
}

TEST(EngineProperty, SyncEveryWorkerAppearsOncePerRound) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const ScenarioConfig c = small_config(7, 2, 3, seed);
    const MetricsReport m = run_scenario(c);
    for (const RoundSummary& rs : m.rounds) {
      for (const ClusterRound& cr : rs.clusters) {
        std::vector<WorkerId> seen;
        for (const auto& ct : cr.contributions) {
          seen.push_back(ct.worker);
          EXPECT_EQ(ct.round_produced, rs.round);
        }
        std::sort(seen.begin(), seen.end());
        EXPECT_EQ(seen, m.clusters.clusters.at(cr.cluster)) << "round " << rs.round;
      }
    }
  }
}

TEST(EngineProperty, AggregatesAreRetrievableByHash) {
  auto st = std::make_shared<store::ContentStore>();
  const RunOutput out = simulate(small_config(6, 2, 3), st);
  std::size_t checked = 0;
  for (const RoundSummary& rs : out.metrics.rounds) {
    for (const ClusterRound& cr : rs.clusters) {
      ASSERT_TRUE(cr.aggregate.has_value());
      const auto bytes = st->get(*cr.aggregate);
      EXPECT_EQ(store::sha256_hex(bytes), cr.aggregate->hex());
      EXPECT_TRUE(learner::deserialize(bytes).all_finite());
      for (const auto& ct : cr.contributions) EXPECT_TRUE(st->contains(ct.update));
      ++checked;
    }
  }
  EXPECT_EQ(checked, 6u);
  // Every hash the event log mentions as a broadcast resolves too.
  for (const EventRecord& e : out.events) {
    if (e.kind != EventKind::BroadcastDelivered) continue;
    EXPECT_TRUE(st->contains(store::ContentAddress::parse(e.payload.at("address").get<std::string>())));
    ++checked;
  }
  EXPECT_GT(checked, 6u);
}

TEST(EngineProperty, TimeNeverGoesBackwards) {
  ScenarioConfig c = small_config(6, 2, 4);
  c.async_policy.mode = aggregate::CollectionMode::Async;
  c.workers[0].speed_factor = 4.0;
  c.network.drop_prob = 0.2;
  const RunOutput out = simulate(c);
  for (std::size_t i = 1; i < out.events.size(); ++i) {
    EXPECT_LE(out.events[i - 1].time, out.events[i].time);
    if (out.events[i - 1].time == out.events[i].time) {
      EXPECT_LT(out.events[i - 1].seq, out.events[i].seq);
    }
  }
}

TEST(EngineProperty, ReplayIsConsistent) {
  for (bool async : {false, true}) {
    ScenarioConfig c = small_config(5, 2, 3);
    if (async) c.async_policy.mode = aggregate::CollectionMode::Async;
    c.contract.threshold = 40;
    c.workers[2].honesty = Honesty::corrupted(CorruptionKind::Zero);
    const RunOutput out = simulate(c);
    const ReplayOutcome r = replay(out.events);
    EXPECT_TRUE(r.consistent) << r.message;
    EXPECT_EQ(r.rows, out.metrics.rows);
    EXPECT_EQ(ledger_digest(r.ledger), ledger_digest(out.ledger));
  }
}

TEST(EngineProperty, ReplayFindsATamperedAmount) {
  const RunOutput out = simulate(small_config(3, 1, 2));
  std::vector<EventRecord> events = out.events;
  for (auto& e : events) {
    if (e.kind == EventKind::RoundSettled && e.payload.contains("tx") && !e.payload["tx"].empty()) {
      e.payload["tx"][0]["amount"] = e.payload["tx"][0]["amount"].get<Tokens>() + 1;
      const ReplayOutcome r = replay(events);
      EXPECT_FALSE(r.consistent);
      ASSERT_TRUE(r.divergent_seq.has_value());
      EXPECT_EQ(*r.divergent_seq, e.seq);
      return;
    }
  }
  FAIL() << "no settlement transactions";
}

TEST(EngineProperty, CopiedStateEvolvesIdentically) {
  EngineState s = make_engine(small_config(4, 2, 2));
  for (int i = 0; i < 25; ++i) step(s);
  EngineState copy = s;
  EXPECT_EQ(copy, s);
  for (int i = 0; i < 10 && !s.finished; ++i) {
    step(s);
    step(copy);
    EXPECT_EQ(copy, s);
  }
  run_to_end(s);
  run_to_end(copy);
  EXPECT_EQ(copy.report, s.report);
}

TEST(EngineProperty, ParallelTrainingMatchesSerial) {
  ScenarioConfig c = small_config(6, 2, 3);
  const MetricsReport par = run_scenario(c);
  c.parallel_training = false;
  EXPECT_EQ(run_scenario(c), par);
}

TEST(Engine, TokensAreConserved) {
  ScenarioConfig c = small_config(5, 1, 4);
  c.contract.threshold = 60;
  c.contract.top_k = 2;
  c.workers[3].honesty = Honesty::corrupted(CorruptionKind::SignFlip);
  const RunOutput out = simulate(c);
  ASSERT_TRUE(out.ledger.has_value());
  EXPECT_TRUE(out.ledger->conserved());
  const TokenTotals& t = *out.metrics.tokens;
  Tokens total = t.requester_balance;
  for (const auto& [w, b] : t.worker_balances) total += b;
  EXPECT_EQ(total, c.effective_requester_balance() + 5 * c.effective_worker_balance());
  EXPECT_GT(t.penalties, 0);
}

TEST(Engine, CorruptWorkerIsFilteredAfterOneRound) {
  ScenarioConfig c = small_config(4, 1, 4, 11);
  c.contract.threshold = 50;
  const WorkerId bad(2);
  c.workers[bad.value].honesty = Honesty::corrupted(CorruptionKind::SignFlip);
  const MetricsReport m = run_scenario(c);
  EXPECT_TRUE(m.rounds[0].bad_workers.contains(bad));
  for (std::size_t r = 1; r < m.rounds.size(); ++r) {
    const ClusterRound& cr = m.rounds[r].clusters[0];
    if (cr.head == bad) continue;
    for (const auto& ct : cr.contributions) EXPECT_NE(ct.worker, bad);
    EXPECT_NE(std::find(cr.filtered.begin(), cr.filtered.end(), bad), cr.filtered.end());
  }
}

TEST(Engine, StragglerIsLateInSyncAndStaleInAsync) {
  ScenarioConfig c = small_config(3, 1, 3);
  c.workers[0].speed_factor = 1000.0;  // 1000 * 60 * 0.001 = 60 s, far past the window
  MetricsReport m = run_scenario(c);
  for (const auto& rs : m.rounds) {
    for (const auto& ct : rs.clusters[0].contributions) {
      if (rs.clusters[0].head != WorkerId(0)) {
        EXPECT_NE(ct.worker, WorkerId(0));
      }
    }
  }
  c.async_policy.mode = aggregate::CollectionMode::Async;
  c.async_policy.collection_window = 25.0;
  c.rounds = 6;
  m = run_scenario(c);
  bool stale_seen = false;
  for (const auto& rs : m.rounds) {
    for (const auto& ct : rs.clusters[0].contributions) {
      if (ct.worker == WorkerId(0) && ct.round_produced < rs.round) stale_seen = true;
    }
  }
  EXPECT_TRUE(stale_seen);
}

TEST(Engine, CorruptHeadPublishesCorruptAggregate) {
  ScenarioConfig c = small_config(3, 1, 1);
  const WorkerId head = run_scenario(c).rounds[0].clusters[0].head;
  c.workers[head.value].honesty = Honesty::corrupted(CorruptionKind::Zero);
  auto st = std::make_shared<store::ContentStore>();
  const MetricsReport m = simulate(c, st).metrics;
  const auto w = model_at(*st, *m.rounds[0].clusters[0].aggregate);
  for (double v : w.values) EXPECT_EQ(v, 0.0);
}

TEST(Engine, RowsCoverLiveWorkersEachRound) {
  ScenarioConfig c = small_config(4, 1, 4);
  c.round_failures.push_back({WorkerId(3), 1, 3});
  const MetricsReport m = run_scenario(c);
  for (Round r = 0; r < 4; ++r) {
    std::set<WorkerId> seen;
    for (const auto& row : m.rows)
      if (row.round == r) seen.insert(row.worker);
    EXPECT_EQ(seen.size(), (r == 1 || r == 2) ? 3u : 4u) << r;
    EXPECT_EQ(seen.contains(WorkerId(3)), !(r == 1 || r == 2));
  }
}

TEST(EventRecordJson, RoundTrips) {
  const RunOutput out = simulate(small_config(3, 1, 1));
  for (const EventRecord& e : out.events) EXPECT_EQ(event_record_from_json(to_json(e)), e);
  for (int k = 0; k <= static_cast<int>(EventKind::NodeRecover); ++k) {
    EXPECT_EQ(event_kind_from_string(to_string(static_cast<EventKind>(k))), static_cast<EventKind>(k));
  }
  EXPECT_FALSE(event_kind_from_string("Nope").has_value());
}

TEST(MetricsCsv, HeaderAndExactReals) {
  const MetricsReport m = run_scenario(small_config(3, 1, 2));
  const std::string csv = metrics_csv(m.rows);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "round,worker,cluster,is_head,accuracy,loss");
  std::size_t lines = 0;
  for (char ch : csv) lines += ch == '\n';
  EXPECT_EQ(lines, m.rows.size() + 1);

  Rng rng(5);
  for (int i = 0; i < 1000; ++i) {
    const double v = rng.normal() * std::pow(10.0, rng.uniform(-20, 20));
    const std::string s = format_double(v);
    double back = 0;
    std::from_chars(s.data(), s.data() + s.size(), back);
    EXPECT_EQ(back, v) << s;
  }
}

TEST(MeanAndStd, Population) {
  const auto [m, sd] = mean_and_std({2, 4, 4, 4, 5, 5, 7, 9});
  EXPECT_DOUBLE_EQ(m, 5.0);
  EXPECT_DOUBLE_EQ(sd, 2.0);
}

}  // namespace
}  // namespace sdfl::engine
