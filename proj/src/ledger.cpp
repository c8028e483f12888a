#include "sdfl/ledger.hpp"

#include <algorithm>
#include <array>
#include <numeric>

namespace sdfl::ledger {

namespace {

constexpr std::array kTxNames = {"contract_init", "round_funded", "deposit", "score",   "excused",
                                 "penalty",       "penalty_transfer", "refund", "reward", "pool_return"};

[[noreturn]] void fail(Errc code, const std::string& msg, std::vector<WorkerId> workers = {}) {
  throw LedgerError(code, std::string(to_string(code)) + ": " + msg, std::move(workers));
}

void require_round(const LedgerState& s, Round round) {
  if (round != s.round) {
    fail(Errc::WrongRound, "round " + std::to_string(round) + " is not the open round " + std::to_string(s.round));
  }
}

void require_scoring_phase(const LedgerState& s) {
  if (s.phase != Phase::Enrolling && s.phase != Phase::Scoring) {
    fail(Errc::WrongPhase, std::string("contract is ") + to_string(s.phase));
  }
}

void log(LedgerState& s, TxType type, const std::string& account, Tokens amount, Tokens balance_after,
         std::optional<double> score = std::nullopt) {
  s.tx_log.push_back(Transaction{type, s.round, account, amount, balance_after, score});
}

}  // namespace

const char* to_string(Errc code) {
  switch (code) {
    case Errc::InvalidParams: return "InvalidParams";
    case Errc::InsufficientFunds: return "InsufficientFunds";
    case Errc::DuplicateJoin: return "DuplicateJoin";
    case Errc::WrongPhase: return "WrongPhase";
    case Errc::WrongRound: return "WrongRound";
    case Errc::NotEnrolled: return "NotEnrolled";
    case Errc::DuplicateScore: return "DuplicateScore";
    case Errc::ScoreOutOfRange: return "ScoreOutOfRange";
    case Errc::MissingScores: return "MissingScores";
    case Errc::AlreadySettled: return "AlreadySettled";
  }
  return "?";
}

const char* to_string(Phase phase) {
  switch (phase) {
    case Phase::Initialized: return "initialized";
    case Phase::Enrolling: return "enrolling";
    case Phase::Scoring: return "scoring";
    case Phase::Settled: return "settled";
  }
  return "?";
}

const char* to_string(TxType type) { return kTxNames[static_cast<std::size_t>(type)]; }

std::optional<TxType> tx_type_from_string(const std::string& name) {
  for (std::size_t i = 0; i < kTxNames.size(); ++i) {
    if (name == kTxNames[i]) return static_cast<TxType>(i);
  }
  return std::nullopt;
}

void ContractParams::validate() const {
  if (fixed_deposit < 0) fail(Errc::InvalidParams, "fixed deposit must be >= 0");
  if (reward_pool < 0) fail(Errc::InvalidParams, "reward pool must be >= 0");
  if (penalty_pct < 0 || penalty_pct > 100) fail(Errc::InvalidParams, "penalty percentage must be in [0, 100]");
  if (top_k < 1) fail(Errc::InvalidParams, "top_k must be >= 1");
  if (!(threshold >= 0.0 && threshold <= 100.0)) fail(Errc::InvalidParams, "threshold must be in [0, 100]");
}

nlohmann::json to_json(const ContractParams& p) {
  return {{"fixed_deposit_F", p.fixed_deposit}, {"threshold_T", p.threshold},
          {"penalty_pct_P", p.penalty_pct},     {"top_k", p.top_k},
          {"reward_pool_R_total", p.reward_pool}, {"requester_id", p.requester_id}};
}

ContractParams contract_params_from_json(const nlohmann::json& j) {
  ContractParams p;
  p.fixed_deposit = j.at("fixed_deposit_F").get<Tokens>();
  p.threshold = j.at("threshold_T").get<double>();
  p.penalty_pct = j.at("penalty_pct_P").get<int>();
  p.top_k = j.at("top_k").get<std::size_t>();
  p.reward_pool = j.at("reward_pool_R_total").get<Tokens>();
  p.requester_id = j.at("requester_id").get<std::string>();
  return p;
}

nlohmann::json to_json(const Transaction& tx) {
  nlohmann::json j = {{"type", to_string(tx.type)},
                      {"round", tx.round},
                      {"account", tx.account},
                      {"amount", tx.amount},
                      {"balance_after", tx.balance_after}};
  if (tx.score) j["score"] = *tx.score;
  return j;
}

Transaction transaction_from_json(const nlohmann::json& j) {
  Transaction tx;
  auto type = tx_type_from_string(j.at("type").get<std::string>());
  if (!type) throw std::invalid_argument("unknown transaction type " + j.at("type").dump());
  tx.type = *type;
  tx.round = j.at("round").get<Round>();
  tx.account = j.at("account").get<std::string>();
  tx.amount = j.at("amount").get<Tokens>();
  tx.balance_after = j.at("balance_after").get<Tokens>();
  if (j.contains("score")) tx.score = j.at("score").get<double>();
  return tx;
}

nlohmann::json to_json(const SettlementReport& r) {
  auto ids = [](const auto& range) {
    nlohmann::json a = nlohmann::json::array();
    for (WorkerId w : range) a.push_back(w.value);
    return a;
  };
  auto amounts = [](const std::map<WorkerId, Tokens>& m) {
    nlohmann::json o = nlohmann::json::object();
    for (const auto& [w, v] : m) o[to_string(w)] = v;
    return o;
  };
  return {{"round", r.round},
          {"bad_workers", ids(r.bad_workers)},
          {"penalties", amounts(r.penalties)},
          {"refunds", amounts(r.refunds)},
          {"top_k_workers", ids(r.top_k_workers)},
          {"rewards", amounts(r.rewards)},
          {"requester_credit", r.requester_credit},
          {"excused", ids(r.excused)}};
}

Tokens LedgerState::total_tokens() const {
  Tokens total = requester_balance + pool;
  for (const auto& [w, b] : balances) total += b;
  for (const auto& [w, d] : deposits) total += d;
  return total;
}

LedgerState init_contract(const ContractParams& params, Tokens requester_balance) {
  params.validate();
  if (requester_balance < params.reward_pool) {
    fail(Errc::InsufficientFunds, "requester holds " + std::to_string(requester_balance) + ", pool needs " +
                                      std::to_string(params.reward_pool));
  }
  LedgerState s;
  s.params = params;
  s.minted = requester_balance;
  s.requester_balance = requester_balance - params.reward_pool;
  s.pool = params.reward_pool;
  s.phase = Phase::Enrolling;
  log(s, TxType::ContractInit, params.requester_id, params.reward_pool, s.requester_balance);
  return s;
}

void join_worker(LedgerState& s, WorkerId worker, Tokens balance) {
  if (s.phase != Phase::Enrolling) fail(Errc::WrongPhase, std::string("contract is ") + to_string(s.phase));
  if (s.balances.contains(worker)) fail(Errc::DuplicateJoin, to_string(worker) + " already joined");
  if (balance < 0) fail(Errc::InsufficientFunds, "negative balance");
  const Tokens fee = s.params.fixed_deposit;
  if (balance < fee) {
    fail(Errc::InsufficientFunds, to_string(worker) + " holds " + std::to_string(balance) + ", deposit is " +
                                      std::to_string(fee));
  }
  s.minted += balance;
  s.balances[worker] = balance - fee;
  s.deposits[worker] = fee;
  s.enrolled.insert(worker);
  log(s, TxType::Deposit, to_string(worker), fee, balance - fee);
}

void submit_score(LedgerState& s, Round round, WorkerId worker, double score) {
  require_scoring_phase(s);
  require_round(s, round);
  if (!s.enrolled.contains(worker)) fail(Errc::NotEnrolled, to_string(worker) + " is not enrolled");
  if (!(score >= 0.0 && score <= 100.0)) fail(Errc::ScoreOutOfRange, "score " + std::to_string(score));
  const auto key = std::make_pair(round, worker);
  if (s.scores.contains(key) || s.excused.contains(key)) {
    fail(Errc::DuplicateScore, to_string(worker) + " already has a score for round " + std::to_string(round));
  }
  s.scores[key] = score;
  s.phase = Phase::Scoring;
  log(s, TxType::Score, to_string(worker), 0, s.balances.at(worker), score);
}

void excuse_worker(LedgerState& s, Round round, WorkerId worker) {
  require_scoring_phase(s);
  require_round(s, round);
  if (!s.enrolled.contains(worker)) fail(Errc::NotEnrolled, to_string(worker) + " is not enrolled");
  const auto key = std::make_pair(round, worker);
  if (s.scores.contains(key) || s.excused.contains(key)) {
    fail(Errc::DuplicateScore, to_string(worker) + " already accounted for in round " + std::to_string(round));
  }
  s.excused.insert(key);
  log(s, TxType::Excused, to_string(worker), 0, s.balances.at(worker));
}

std::set<WorkerId> identify_bad_workers(const std::map<WorkerId, double>& scores, double threshold) {
  std::set<WorkerId> bad;
  for (const auto& [w, score] : scores) {
    if (score < threshold) bad.insert(w);
  }
  return bad;
}

std::vector<WorkerId> select_top_k(const std::map<WorkerId, double>& scores, double threshold, std::size_t k) {
  std::vector<std::pair<WorkerId, double>> eligible;
  for (const auto& [w, score] : scores) {
    if (score >= threshold) eligible.emplace_back(w, score);
  }
  std::sort(eligible.begin(), eligible.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  std::vector<WorkerId> top;
  for (std::size_t i = 0; i < std::min(k, eligible.size()); ++i) top.push_back(eligible[i].first);
  return top;
}

SettlementReport settle_round(LedgerState& s, Round round) {
  if (s.settled.contains(round)) fail(Errc::AlreadySettled, "round " + std::to_string(round));
  require_scoring_phase(s);
  require_round(s, round);

  std::map<WorkerId, double> round_scores;
  std::vector<WorkerId> missing;
  std::vector<WorkerId> excused;
  for (WorkerId w : s.enrolled) {
    const auto key = std::make_pair(round, w);
    if (auto it = s.scores.find(key); it != s.scores.end()) {
      round_scores.emplace(w, it->second);
    } else if (s.excused.contains(key)) {
      excused.push_back(w);
    } else {
      missing.push_back(w);
    }
  }
  if (!missing.empty()) {
    std::string names;
    for (WorkerId w : missing) names += (names.empty() ? "" : ",") + to_string(w);
    fail(Errc::MissingScores, "no score from " + names, missing);
  }

  const ContractParams& p = s.params;
  SettlementReport report;
  report.round = round;
  report.excused = excused;
  report.bad_workers = identify_bad_workers(round_scores, p.threshold);

  const Tokens penalty = p.fixed_deposit * p.penalty_pct / 100;
  Tokens collected = 0;
  for (WorkerId w : s.enrolled) {
    Tokens& deposit = s.deposits.at(w);
    if (report.bad_workers.contains(w)) {
      deposit -= penalty;
      collected += penalty;
      report.penalties[w] = penalty;
      log(s, TxType::Penalty, to_string(w), penalty, deposit);
    }
    report.refunds[w] = deposit;
    s.balances.at(w) += deposit;
    const Tokens refunded = deposit;
    deposit = 0;
    log(s, TxType::Refund, to_string(w), refunded, s.balances.at(w));
  }
  if (!report.bad_workers.empty()) {
    s.requester_balance += collected;
    log(s, TxType::PenaltyTransfer, p.requester_id, collected, s.requester_balance);
  }

  report.top_k_workers = select_top_k(round_scores, p.threshold, p.top_k);
  Tokens returned = s.pool;
  if (!report.top_k_workers.empty()) {
    const auto m = static_cast<Tokens>(report.top_k_workers.size());
    const Tokens share = s.pool / m;
    for (WorkerId w : report.top_k_workers) {
      report.rewards[w] = share;
      s.balances.at(w) += share;
      log(s, TxType::Reward, to_string(w), share, s.balances.at(w));
    }
    returned = s.pool - share * m;
  }
  s.pool = 0;
  s.requester_balance += returned;
  log(s, TxType::PoolReturn, p.requester_id, returned, s.requester_balance);

  report.requester_credit = collected + returned;
  s.phase = Phase::Settled;
  s.settled.insert(round);
  return report;
}

void open_round(LedgerState& s, Round next, const std::vector<WorkerId>& participants) {
  if (s.phase != Phase::Settled) fail(Errc::WrongPhase, std::string("contract is ") + to_string(s.phase));
  if (next != s.round + 1) fail(Errc::WrongRound, "next round must be " + std::to_string(s.round + 1));
  const ContractParams& p = s.params;
  if (s.requester_balance < p.reward_pool) {
    fail(Errc::InsufficientFunds, "requester cannot fund round " + std::to_string(next));
  }
  std::set<WorkerId> joining;
  for (WorkerId w : participants) {
    auto it = s.balances.find(w);
    if (it == s.balances.end()) fail(Errc::NotEnrolled, to_string(w) + " never joined");
    if (!joining.insert(w).second) fail(Errc::DuplicateJoin, to_string(w) + " listed twice");
    if (it->second < p.fixed_deposit) {
      fail(Errc::InsufficientFunds, to_string(w) + " cannot re-deposit for round " + std::to_string(next), {w});
    }
  }

  s.round = next;
  s.requester_balance -= p.reward_pool;
  s.pool = p.reward_pool;
  log(s, TxType::RoundFunded, p.requester_id, p.reward_pool, s.requester_balance);
  s.enrolled = std::move(joining);
  for (WorkerId w : s.enrolled) {
    s.balances.at(w) -= p.fixed_deposit;
    s.deposits.at(w) = p.fixed_deposit;
    log(s, TxType::Deposit, to_string(w), p.fixed_deposit, s.balances.at(w));
  }
  s.phase = Phase::Enrolling;
}

std::string tx_log_jsonl(const LedgerState& state) {
  std::string out;
  for (const Transaction& tx : state.tx_log) {
    out += to_json(tx).dump();
    out += '\n';
  }
  return out;
}

}  // namespace sdfl::ledger
