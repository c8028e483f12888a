#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "sdfl/types.hpp"

namespace sdfl {

enum class CorruptionKind { SignFlip, GaussianNoise, Zero };

const char* to_string(CorruptionKind kind);

struct Honesty {
  bool corrupt = false;
  CorruptionKind mode = CorruptionKind::SignFlip;
  double magnitude = 0.0;  ///< sigma for GaussianNoise
  Round from_round = 0;    ///< first round the worker misbehaves

  static Honesty honest() { return {}; }
  static Honesty corrupted(CorruptionKind mode, double magnitude = 0.0, Round from_round = 0) {
    return {true, mode, magnitude, from_round};
  }
  bool active(Round r) const { return corrupt && r >= from_round; }

  bool operator==(const Honesty&) const = default;
};

struct Location {
  double x = 0.0;
  double y = 0.0;
  bool operator==(const Location&) const = default;
};

struct WorkerProfile {
  WorkerId id;
  Location location;
  Honesty honesty;
  double speed_factor = 1.0;  ///< multiplies simulated training time

  bool operator==(const WorkerProfile&) const = default;
};

}  // namespace sdfl

namespace sdfl::clustering {

class ClusteringError : public std::invalid_argument {
 public:
  enum class Code { TooManyClusters, UnknownCluster, InvalidInput };

  ClusteringError(Code code, const std::string& what) : std::invalid_argument(what), code_(code) {}
  Code code() const { return code_; }

 private:
  Code code_;
};

struct ClusterAssignment {
  std::map<ClusterId, std::vector<WorkerId>> clusters;  ///< members ascending
  std::map<ClusterId, WorkerId> heads;
  Round round_formed = 0;

  ClusterId cluster_of(WorkerId w) const;
  bool operator==(const ClusterAssignment&) const = default;
};

/// k-means over worker coordinates with seeded farthest-point seeding.
/// Clusters are numbered by their smallest member id. Heads are filled with
/// the round-0 draw of select_head (rotation period 1).
ClusterAssignment form_clusters(const std::vector<WorkerProfile>& workers, std::size_t num_clusters,
                                std::uint64_t seed, Round round = 0);

/// Seeded uniform draw among the cluster's members, stable for
/// `rotation_period` consecutive rounds.
WorkerId select_head(const ClusterAssignment& assignment, ClusterId cluster, Round round,
                     std::uint32_t rotation_period, std::uint64_t seed);

/// Re-draws every head for `round`.
void rotate_heads(ClusterAssignment& assignment, Round round, std::uint32_t rotation_period, std::uint64_t seed);

/// Within-cluster sum of squared distances to the member centroid.
double within_cluster_ss(const ClusterAssignment& assignment, const std::vector<WorkerProfile>& workers);

/// {"round": r, "clusters": [{"id", "head", "members": [...]}]}
nlohmann::json to_json(const ClusterAssignment& assignment);
ClusterAssignment assignment_from_json(const nlohmann::json& j);

}  // namespace sdfl::clustering
