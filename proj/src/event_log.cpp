#include <cmath>
#include <string>

#include "sdfl/engine.hpp"

namespace sdfl::engine {

namespace {

using json = nlohmann::json;

struct Divergence {
  std::string message;
};

[[noreturn]] void diverge(const std::string& message) { throw Divergence{message}; }

WorkerId worker_at(const json& j, const char* key) { return WorkerId(j.at(key).get<std::uint32_t>()); }

std::vector<WorkerId> worker_list(const json& j) {
  std::vector<WorkerId> out;
  for (const json& v : j) out.emplace_back(v.get<std::uint32_t>());
  return out;
}

void check_tx(const ledger::LedgerState& l, std::size_t before, const json& payload) {
  const json recorded = payload.value("tx", json::array());
  json recomputed = json::array();
  for (std::size_t i = before; i < l.tx_log.size(); ++i) recomputed.push_back(ledger::to_json(l.tx_log[i]));
  if (recorded.size() != recomputed.size()) {
    diverge("recorded " + std::to_string(recorded.size()) + " transactions, recomputed " +
            std::to_string(recomputed.size()));
  }
  for (std::size_t i = 0; i < recorded.size(); ++i) {
    if (ledger::transaction_from_json(recorded[i]) != ledger::transaction_from_json(recomputed[i])) {
      diverge("transaction " + std::to_string(i) + " differs: recorded " + recorded[i].dump() + ", recomputed " +
              recomputed[i].dump());
    }
  }
}

ledger::LedgerState& need_ledger(std::optional<ledger::LedgerState>& l) {
  if (!l) diverge("ledger event before the contract was deployed");
  return *l;
}

}  // namespace

json to_json(const EventRecord& r) {
  return {{"time", r.time}, {"seq", r.seq}, {"kind", to_string(r.kind)}, {"payload", r.payload}};
}

EventRecord event_record_from_json(const json& j) {
  EventRecord r;
  r.time = j.at("time").get<double>();
  r.seq = j.at("seq").get<std::uint64_t>();
  const auto kind = event_kind_from_string(j.at("kind").get<std::string>());
  if (!kind) throw std::invalid_argument("unknown event kind " + j.at("kind").dump());
  r.kind = *kind;
  r.payload = j.at("payload");
  return r;
}

std::string ledger_digest(const std::optional<ledger::LedgerState>& l) {
  return store::sha256_hex(l ? ledger::tx_log_jsonl(*l) : std::string());
}

ReplayOutcome replay(const std::vector<EventRecord>& events) {
  ReplayOutcome out;
  std::optional<ledger::LedgerState> l;
  SimTime last_time = 0.0;
  std::optional<std::uint64_t> last_seq;

  for (const EventRecord& ev : events) {
    try {
      if (!std::isfinite(ev.time) || ev.time < last_time) diverge("time goes backwards");
      if (last_seq && ev.time == last_time && ev.seq <= *last_seq) diverge("events out of (time, seq) order");
      last_time = ev.time;
      last_seq = ev.seq;
      const json& p = ev.payload;
      const std::size_t before = l ? l->tx_log.size() : 0;

      switch (ev.kind) {
        case EventKind::ContractDeployed:
          if (l) diverge("contract deployed twice");
          l = ledger::init_contract(ledger::contract_params_from_json(p.at("contract")),
                                    p.at("requester_balance").get<Tokens>());
          check_tx(*l, 0, p);
          break;
        case EventKind::Enroll:
          if (p.contains("tx")) {
            ledger::join_worker(need_ledger(l), worker_at(p, "worker"), p.at("balance").get<Tokens>());
            check_tx(*l, before, p);
          }
          break;
        case EventKind::RoundStarted:
          if (p.contains("tx")) {
            ledger::open_round(need_ledger(l), p.at("round").get<Round>(), worker_list(p.at("participants")));
            check_tx(*l, before, p);
          }
          break;
        case EventKind::ScoreSubmitted:
          if (p.contains("tx")) {
            ledger::submit_score(need_ledger(l), p.at("round").get<Round>(), worker_at(p, "worker"),
                                 p.at("score").get<double>());
            check_tx(*l, before, p);
          }
          break;
        case EventKind::RoundSettled: {
          const Round r = p.at("round").get<Round>();
          if (p.contains("tx")) {
            ledger::LedgerState& state = need_ledger(l);
            for (WorkerId w : worker_list(p.at("excused"))) ledger::excuse_worker(state, r, w);
            const ledger::SettlementReport settlement = ledger::settle_round(state, r);
            if (!state.conserved()) diverge("token conservation broken");
            if (ledger::to_json(settlement) != p.at("settlement")) {
              diverge("settlement differs: recorded " + p.at("settlement").dump() + ", recomputed " +
                      ledger::to_json(settlement).dump());
            }
            check_tx(state, before, p);
          }
          std::vector<double> accuracies;
          for (const json& row : p.at("rows")) {
            WorkerRoundMetrics m;
            m.round = r;
            m.worker = worker_at(row, "worker");
            m.cluster = ClusterId(row.at("cluster").get<std::uint32_t>());
            m.is_head = row.at("is_head").get<bool>();
            m.accuracy = row.at("accuracy").get<double>();
            m.loss = row.at("loss").get<double>();
            accuracies.push_back(m.accuracy);
            out.rows.push_back(m);
          }
          const auto [mean, sd] = mean_and_std(accuracies);
          if (mean != p.at("mean_accuracy").get<double>() || sd != p.at("std_accuracy").get<double>()) {
            diverge("round statistics do not match the recorded rows");
          }
          break;
        }
        default:
          if (p.contains("tx")) diverge("unexpected ledger transactions");
          break;
      }
    } catch (const Divergence& d) {
      out.consistent = false;
      out.divergent_seq = ev.seq;
      out.message = std::string("event seq ") + std::to_string(ev.seq) + " (" + to_string(ev.kind) + "): " + d.message;
      break;
    } catch (const std::exception& e) {
      out.consistent = false;
      out.divergent_seq = ev.seq;
      out.message = std::string("event seq ") + std::to_string(ev.seq) + " (" + to_string(ev.kind) + "): " + e.what();
      break;
    }
  }
  out.ledger = std::move(l);
  return out;
}

}  // namespace sdfl::engine
