#pragma once

#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "sdfl/learner.hpp"

namespace sdfl::aggregate {

using learner::ModelWeights;

class AggregateError : public std::invalid_argument {
 public:
  enum class Code { EmptyUpdateSet, ShapeMismatch, InvalidPolicy };

  AggregateError(Code code, const std::string& what) : std::invalid_argument(what), code_(code) {}
  Code code() const { return code_; }

 private:
  Code code_;
};

struct Update {
  WorkerId worker;
  ModelWeights weights;
  Round round_produced = 0;
  std::size_t samples = 1;
  SimTime arrival_time = 0.0;

  bool operator==(const Update&) const = default;
};

enum class Weighting { Uniform, BySamples };

enum class CollectionMode { Synchronous, Async };

struct AsyncPolicy {
  CollectionMode mode = CollectionMode::Synchronous;
  Round staleness_bound = 2;      ///< tau
  double staleness_decay = 0.5;   ///< alpha
  SimTime collection_window = 10.0;

  void validate() const;
  bool operator==(const AsyncPolicy&) const = default;
};

struct Weighted {
  Update update;
  double coefficient = 0.0;
};

/// Coefficient-weighted mean. Updates are combined in ascending worker-id
/// order regardless of input order. Uniform uses 1/n, BySamples uses
/// samples / total.
ModelWeights fedavg(const std::vector<Update>& updates, Weighting weighting = Weighting::Uniform);

/// Same combination with caller-supplied coefficients (need not be normalised).
ModelWeights weighted_average(const std::vector<Weighted>& parts);

/// Drops updates staler than tau and weights the rest by alpha^staleness,
/// renormalised to sum to one. In Synchronous mode every update is kept with
/// weight 1/n.
std::vector<Weighted> apply_staleness(const std::vector<Update>& updates, Round current_round,
                                      const AsyncPolicy& policy);

/// apply_staleness without the final renormalisation (raw alpha^s factors).
std::vector<Weighted> staleness_weights(const std::vector<Update>& updates, Round current_round,
                                        const AsyncPolicy& policy);

/// (1 - beta) * own + beta * foreign, exact at beta 0 and 1 and when the
/// inputs agree.
ModelWeights merge_intercluster(const ModelWeights& own, const ModelWeights& foreign, double beta);

std::vector<Update> filter_penalized(const std::vector<Update>& updates, const std::set<WorkerId>& bad_workers);

}  // namespace sdfl::aggregate
