#pragma once

#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "sdfl/types.hpp"

/// Deposit / penalty / refund / reward contract, modelled as a deterministic
/// state machine. Every mutating operation validates its preconditions
/// before touching state, so a thrown LedgerError leaves the state unchanged.
namespace sdfl::ledger {

enum class Errc {
  InvalidParams,
  InsufficientFunds,
  DuplicateJoin,
  WrongPhase,
  WrongRound,
  NotEnrolled,
  DuplicateScore,
  ScoreOutOfRange,
  MissingScores,
  AlreadySettled,
};

const char* to_string(Errc code);

class LedgerError : public std::runtime_error {
 public:
  LedgerError(Errc code, const std::string& what, std::vector<WorkerId> workers = {})
      : std::runtime_error(what), code_(code), workers_(std::move(workers)) {}

  Errc code() const { return code_; }
  /// Workers the error refers to (the absent ones for MissingScores).
  const std::vector<WorkerId>& workers() const { return workers_; }

 private:
  Errc code_;
  std::vector<WorkerId> workers_;
};

struct ContractParams {
  Tokens fixed_deposit = 100;  ///< F
  double threshold = 50.0;     ///< T, scores below it are bad
  int penalty_pct = 20;        ///< P
  std::size_t top_k = 1;
  Tokens reward_pool = 100;  ///< R_total, funded once per round
  std::string requester_id = "requester";

  /// Throws LedgerError(InvalidParams).
  void validate() const;

  bool operator==(const ContractParams&) const = default;
};

/// Keys fixed_deposit_F, threshold_T, penalty_pct_P, top_k,
/// reward_pool_R_total, requester_id.
nlohmann::json to_json(const ContractParams& params);
ContractParams contract_params_from_json(const nlohmann::json& j);

enum class Phase { Initialized, Enrolling, Scoring, Settled };

const char* to_string(Phase phase);

enum class TxType {
  ContractInit,
  RoundFunded,
  Deposit,
  Score,
  Excused,
  Penalty,
  PenaltyTransfer,
  Refund,
  Reward,
  PoolReturn,
};

const char* to_string(TxType type);
std::optional<TxType> tx_type_from_string(const std::string& name);

struct Transaction {
  TxType type = TxType::ContractInit;
  Round round = 0;
  std::string account;
  Tokens amount = 0;
  /// Balance of `account` after the transaction. For Penalty it is the
  /// worker's remaining deposit.
  Tokens balance_after = 0;
  std::optional<double> score;

  bool operator==(const Transaction&) const = default;
};

nlohmann::json to_json(const Transaction& tx);
Transaction transaction_from_json(const nlohmann::json& j);

struct SettlementReport {
  Round round = 0;
  std::set<WorkerId> bad_workers;
  std::map<WorkerId, Tokens> penalties;
  std::map<WorkerId, Tokens> refunds;
  std::vector<WorkerId> top_k_workers;
  std::map<WorkerId, Tokens> rewards;
  Tokens requester_credit = 0;
  std::vector<WorkerId> excused;

  bool operator==(const SettlementReport&) const = default;
};

nlohmann::json to_json(const SettlementReport& report);

struct LedgerState {
  ContractParams params;
  Phase phase = Phase::Initialized;
  Round round = 0;
  Tokens requester_balance = 0;
  Tokens pool = 0;
  std::map<WorkerId, Tokens> balances;
  std::map<WorkerId, Tokens> deposits;
  std::set<WorkerId> enrolled;  ///< participants of the current round
  std::map<std::pair<Round, WorkerId>, double> scores;
  std::set<std::pair<Round, WorkerId>> excused;
  std::set<Round> settled;
  Tokens minted = 0;  ///< every token that ever entered the ledger
  std::vector<Transaction> tx_log;

  /// Requester + workers + held deposits + pool.
  Tokens total_tokens() const;
  bool conserved() const { return total_tokens() == minted; }

  bool operator==(const LedgerState&) const = default;
};

/// Requester funds the reward pool for round 0. Phase becomes Enrolling.
LedgerState init_contract(const ContractParams& params, Tokens requester_balance);

/// Registers the worker with `balance` tokens and moves F into its deposit.
void join_worker(LedgerState& state, WorkerId worker, Tokens balance);

void submit_score(LedgerState& state, Round round, WorkerId worker, double score);

/// Marks an enrolled worker that delivered nothing this round. It is neither
/// penalised nor rewarded and gets its full deposit back on settlement.
void excuse_worker(LedgerState& state, Round round, WorkerId worker);

SettlementReport settle_round(LedgerState& state, Round round);

/// Starts round `next` after a settlement: the requester refunds the pool
/// and each participant deposits F again.
void open_round(LedgerState& state, Round next, const std::vector<WorkerId>& participants);

/// {w : score(w) < threshold}
std::set<WorkerId> identify_bad_workers(const std::map<WorkerId, double>& scores, double threshold);

/// Non-bad workers by descending score, ties by ascending id, at most k.
std::vector<WorkerId> select_top_k(const std::map<WorkerId, double>& scores, double threshold,
                                   std::size_t k);

/// One JSON object per line.
std::string tx_log_jsonl(const LedgerState& state);

}  // namespace sdfl::ledger
