#include "sdfl/aggregate.hpp"

#include <algorithm>
#include <cmath>

#include "sdfl/kernels.hpp"

namespace sdfl::aggregate {

namespace {

using Code = AggregateError::Code;

void check_shapes(const ModelWeights& a, const ModelWeights& b) {
  if (!a.same_shape(b) || a.size() != b.size()) throw AggregateError(Code::ShapeMismatch, "update shapes differ");
}

}  // namespace

void AsyncPolicy::validate() const {
  if (!(staleness_decay > 0.0 && staleness_decay <= 1.0)) {
    throw AggregateError(Code::InvalidPolicy, "staleness decay must be in (0, 1]");
  }
  if (!(collection_window >= 0.0)) throw AggregateError(Code::InvalidPolicy, "collection window must be >= 0");
}

ModelWeights weighted_average(const std::vector<Weighted>& parts) {
  if (parts.empty()) throw AggregateError(Code::EmptyUpdateSet, "nothing to aggregate");
  std::vector<const Weighted*> sorted;
  sorted.reserve(parts.size());
  for (const Weighted& p : parts) {
    check_shapes(parts.front().update.weights, p.update.weights);
    sorted.push_back(&p);
  }
  std::stable_sort(sorted.begin(), sorted.end(), [](const Weighted* a, const Weighted* b) {
    if (a->update.worker != b->update.worker) return a->update.worker < b->update.worker;
    return a->update.round_produced < b->update.round_produced;
  });

  double total = 0.0;
  for (const Weighted* p : sorted) total += p->coefficient;
  if (!(total > 0.0)) throw AggregateError(Code::InvalidPolicy, "coefficients must sum to a positive value");

  std::vector<std::span<const double>> vectors;
  std::vector<double> coefficients;
  for (const Weighted* p : sorted) {
    vectors.emplace_back(p->update.weights.values);
    coefficients.push_back(p->coefficient / total);
  }
  ModelWeights out = ModelWeights::zeros(parts.front().update.weights.num_features,
                                         parts.front().update.weights.num_classes);
  kernels::parallel::weighted_average({vectors, coefficients}, out.values);
  return out;
}

ModelWeights fedavg(const std::vector<Update>& updates, Weighting weighting) {
  if (updates.empty()) throw AggregateError(Code::EmptyUpdateSet, "nothing to aggregate");
  std::vector<Weighted> parts;
  parts.reserve(updates.size());
  for (const Update& u : updates) {
    const double c = weighting == Weighting::Uniform ? 1.0 : static_cast<double>(u.samples);
    parts.push_back({u, c});
  }
  return weighted_average(parts);
}

std::vector<Weighted> staleness_weights(const std::vector<Update>& updates, Round current_round,
                                        const AsyncPolicy& policy) {
  std::vector<Weighted> kept;
  for (const Update& u : updates) {
    if (policy.mode == CollectionMode::Synchronous) {
      kept.push_back({u, 1.0});
      continue;
    }
    const Round staleness = current_round >= u.round_produced ? current_round - u.round_produced : 0;
    if (staleness > policy.staleness_bound) continue;
    kept.push_back({u, std::pow(policy.staleness_decay, static_cast<double>(staleness))});
  }
  return kept;
}

std::vector<Weighted> apply_staleness(const std::vector<Update>& updates, Round current_round,
                                      const AsyncPolicy& policy) {
  std::vector<Weighted> kept = staleness_weights(updates, current_round, policy);
  double total = 0.0;
  for (const Weighted& w : kept) total += w.coefficient;
  for (Weighted& w : kept) w.coefficient /= total;
  return kept;
}

ModelWeights merge_intercluster(const ModelWeights& own, const ModelWeights& foreign, double beta) {
  check_shapes(own, foreign);
  if (!(beta >= 0.0 && beta <= 1.0)) throw AggregateError(Code::InvalidPolicy, "beta must be in [0, 1]");
  ModelWeights out = own;
  for (std::size_t j = 0; j < out.size(); ++j) out.values[j] = std::lerp(own.values[j], foreign.values[j], beta);
  return out;
}

std::vector<Update> filter_penalized(const std::vector<Update>& updates, const std::set<WorkerId>& bad_workers) {
  std::vector<Update> out;
  std::copy_if(updates.begin(), updates.end(), std::back_inserter(out),
               [&](const Update& u) { return !bad_workers.contains(u.worker); });
  return out;
}

}  // namespace sdfl::aggregate
