#include "sdfl/clustering.hpp"

#include <algorithm>
#include <limits>
#include <numeric>

#include "sdfl/kernels.hpp"
#include "sdfl/random.hpp"

namespace sdfl {

const char* to_string(CorruptionKind kind) {
  switch (kind) {
    case CorruptionKind::SignFlip: return "sign_flip";
    case CorruptionKind::GaussianNoise: return "gaussian_noise";
    case CorruptionKind::Zero: return "zero";
  }
  return "?";
}

}  // namespace sdfl

namespace sdfl::clustering {

namespace {

constexpr int kMaxIterations = 50;
constexpr int kRestarts = 8;
constexpr std::uint64_t kHeadTag = 0x68656164;  // "head"

double sq_dist(const double* a, const double* b) {
  const double dx = a[0] - b[0];
  const double dy = a[1] - b[1];
  return dx * dx + dy * dy;
}

void recompute_centroids(const std::vector<double>& points, const std::vector<std::size_t>& labels,
                         std::vector<double>& centroids) {
  const std::size_t k = centroids.size() / 2;
  std::vector<double> sums(2 * k, 0.0);
  std::vector<std::size_t> counts(k, 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    sums[2 * labels[i]] += points[2 * i];
    sums[2 * labels[i] + 1] += points[2 * i + 1];
    ++counts[labels[i]];
  }
  for (std::size_t c = 0; c < k; ++c) {
    if (counts[c] == 0) continue;
    centroids[2 * c] = sums[2 * c] / static_cast<double>(counts[c]);
    centroids[2 * c + 1] = sums[2 * c + 1] / static_cast<double>(counts[c]);
  }
}

// Moves the point farthest from its centroid in the largest cluster into each
// empty cluster until none is empty.
void repair_empty(const std::vector<double>& points, std::vector<std::size_t>& labels,
                  std::vector<double>& centroids) {
  const std::size_t k = centroids.size() / 2;
  for (;;) {
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t l : labels) ++counts[l];
    const auto empty = std::find(counts.begin(), counts.end(), 0u);
    if (empty == counts.end()) return;
    const auto largest = static_cast<std::size_t>(std::max_element(counts.begin(), counts.end()) - counts.begin());
    std::size_t pick = labels.size();
    double far = -1.0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] != largest) continue;
      const double d = sq_dist(&points[2 * i], &centroids[2 * largest]);
      if (d > far) {
        far = d;
        pick = i;
      }
    }
    const auto target = static_cast<std::size_t>(empty - counts.begin());
    labels[pick] = target;
    centroids[2 * target] = points[2 * pick];
    centroids[2 * target + 1] = points[2 * pick + 1];
    recompute_centroids(points, labels, centroids);
  }
}


// Single-point moves (Hartigan) that strictly lower the within-cluster sum of
// squares. Lloyd's fixed point can still be improved this way; each accepted
// move lowers the objective so the loop terminates.
void refine_moves(const std::vector<double>& points, std::vector<std::size_t>& labels,
                  std::vector<double>& centroids) {
  const std::size_t k = centroids.size() / 2;
  const std::size_t n = labels.size();
  std::vector<std::size_t> counts(k, 0);
  for (std::size_t l : labels) ++counts[l];
  bool moved = true;
  while (moved) {
    moved = false;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t from = labels[i];
      if (counts[from] < 2) continue;
      const double nf = static_cast<double>(counts[from]);
      const double loss = nf / (nf - 1.0) * sq_dist(&points[2 * i], &centroids[2 * from]);
      std::size_t best = from;
      double best_gain = 1e-12 * (1.0 + loss);
      for (std::size_t c = 0; c < k; ++c) {
        if (c == from) continue;
        const double nc = static_cast<double>(counts[c]);
        const double gain = loss - nc / (nc + 1.0) * sq_dist(&points[2 * i], &centroids[2 * c]);
        if (gain > best_gain) {
          best_gain = gain;
          best = c;
        }
      }
      if (best == from) continue;
      labels[i] = best;
      --counts[from];
      ++counts[best];
      recompute_centroids(points, labels, centroids);
      moved = true;
    }
  }
}

// Farthest-point start from `first`, Lloyd iterations, then single-point moves.
std::vector<std::size_t> lloyd_from(const std::vector<double>& points, std::size_t k, std::size_t first) {
  const std::size_t n = points.size() / 2;
  std::vector<double> centroids(2 * k);
  std::vector<std::size_t> chosen = {first};
  std::vector<double> nearest_d(n, std::numeric_limits<double>::infinity());
  while (chosen.size() < k) {
    const std::size_t last = chosen.back();
    std::size_t best = 0;
    double best_d = -1.0;
    for (std::size_t i = 0; i < n; ++i) {
      nearest_d[i] = std::min(nearest_d[i], sq_dist(&points[2 * i], &points[2 * last]));
      if (std::find(chosen.begin(), chosen.end(), i) != chosen.end()) continue;
      if (nearest_d[i] > best_d) {
        best_d = nearest_d[i];
        best = i;
      }
    }
    chosen.push_back(best);
  }
  for (std::size_t c = 0; c < k; ++c) {
    centroids[2 * c] = points[2 * chosen[c]];
    centroids[2 * c + 1] = points[2 * chosen[c] + 1];
  }

  std::vector<std::size_t> labels(n, 0);
  kernels::parallel::assign_nearest(points, centroids, labels);
  repair_empty(points, labels, centroids);
  for (int iter = 0; iter < kMaxIterations; ++iter) {
    recompute_centroids(points, labels, centroids);
    std::vector<std::size_t> next(n);
    kernels::parallel::assign_nearest(points, centroids, next);
    repair_empty(points, next, centroids);
    if (next == labels) break;
    labels = std::move(next);
  }
  recompute_centroids(points, labels, centroids);
  refine_moves(points, labels, centroids);
  return labels;
}

double labels_ss(const std::vector<double>& points, const std::vector<std::size_t>& labels, std::size_t k) {
  std::vector<double> centroids(2 * k, 0.0);
  recompute_centroids(points, labels, centroids);
  double total = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) total += sq_dist(&points[2 * i], &centroids[2 * labels[i]]);
  return total;
}

}  // namespace

ClusterId ClusterAssignment::cluster_of(WorkerId w) const {
  for (const auto& [id, members] : clusters) {
    if (std::binary_search(members.begin(), members.end(), w)) return id;
  }
  throw ClusteringError(ClusteringError::Code::UnknownCluster, to_string(w) + " is not in any cluster");
}

ClusterAssignment form_clusters(const std::vector<WorkerProfile>& workers, std::size_t num_clusters,
                                std::uint64_t seed, Round round) {
  const std::size_t n = workers.size();
  if (num_clusters < 1) throw ClusteringError(ClusteringError::Code::InvalidInput, "num_clusters must be >= 1");
  if (num_clusters > n) {
    throw ClusteringError(ClusteringError::Code::TooManyClusters,
                          std::to_string(num_clusters) + " clusters for " + std::to_string(n) + " workers");
  }

  // Work in ascending id order so the result does not depend on input order.
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return workers[a].id < workers[b].id; });
  for (std::size_t i = 1; i < n; ++i) {
    if (workers[order[i]].id == workers[order[i - 1]].id) {
      throw ClusteringError(ClusteringError::Code::InvalidInput, "duplicate worker id " + to_string(workers[order[i]].id));
    }
  }
  std::vector<double> points(2 * n);
  for (std::size_t i = 0; i < n; ++i) {
    points[2 * i] = workers[order[i]].location.x;
    points[2 * i + 1] = workers[order[i]].location.y;
  }

  const std::size_t k = num_clusters;
  // A few seeded starting points; the lowest objective wins, earliest on ties.
  Rng rng(derive_seed(seed, {0x6b6d65616e73}));
  std::vector<std::size_t> labels;
  double best_ss = std::numeric_limits<double>::infinity();
  for (int attempt = 0; attempt < kRestarts; ++attempt) {
    std::vector<std::size_t> candidate = lloyd_from(points, k, static_cast<std::size_t>(rng.below(n)));
    const double ss = labels_ss(points, candidate, k);
    if (ss < best_ss) {
      best_ss = ss;
      labels = std::move(candidate);
    }
  }

  // Relabel by smallest member id.
  std::vector<std::vector<WorkerId>> groups(k);
  for (std::size_t i = 0; i < n; ++i) groups[labels[i]].push_back(workers[order[i]].id);
  std::sort(groups.begin(), groups.end(), [](const auto& a, const auto& b) { return a.front() < b.front(); });

  ClusterAssignment out;
  out.round_formed = round;
  for (std::size_t c = 0; c < k; ++c) out.clusters.emplace(ClusterId(static_cast<std::uint32_t>(c)), std::move(groups[c]));
  rotate_heads(out, round, 1, seed);
  return out;
}

WorkerId select_head(const ClusterAssignment& assignment, ClusterId cluster, Round round,
                     std::uint32_t rotation_period, std::uint64_t seed) {
  auto it = assignment.clusters.find(cluster);
  if (it == assignment.clusters.end() || it->second.empty()) {
    throw ClusteringError(ClusteringError::Code::UnknownCluster, "unknown cluster " + to_string(cluster));
  }
  if (rotation_period < 1) throw ClusteringError(ClusteringError::Code::InvalidInput, "rotation period must be >= 1");
  const std::uint64_t period = round / rotation_period;
  Rng rng(derive_seed(seed, {kHeadTag, cluster.value, period}));
  return it->second[rng.below(it->second.size())];
}

void rotate_heads(ClusterAssignment& assignment, Round round, std::uint32_t rotation_period, std::uint64_t seed) {
  for (const auto& [id, members] : assignment.clusters) {
    assignment.heads[id] = select_head(assignment, id, round, rotation_period, seed);
  }
}

double within_cluster_ss(const ClusterAssignment& assignment, const std::vector<WorkerProfile>& workers) {
  auto location = [&](WorkerId w) {
    for (const auto& p : workers) {
      if (p.id == w) return p.location;
    }
    throw ClusteringError(ClusteringError::Code::InvalidInput, "no profile for " + to_string(w));
  };
  double total = 0.0;
  for (const auto& [id, members] : assignment.clusters) {
    double cx = 0.0;
    double cy = 0.0;
    for (WorkerId w : members) {
      cx += location(w).x;
      cy += location(w).y;
    }
    cx /= static_cast<double>(members.size());
    cy /= static_cast<double>(members.size());
    for (WorkerId w : members) {
      const Location l = location(w);
      total += (l.x - cx) * (l.x - cx) + (l.y - cy) * (l.y - cy);
    }
  }
  return total;
}

nlohmann::json to_json(const ClusterAssignment& a) {
  nlohmann::json clusters = nlohmann::json::array();
  for (const auto& [id, members] : a.clusters) {
    nlohmann::json m = nlohmann::json::array();
    for (WorkerId w : members) m.push_back(w.value);
    nlohmann::json entry = {{"id", id.value}, {"members", m}};
    if (auto h = a.heads.find(id); h != a.heads.end()) entry["head"] = h->second.value;
    clusters.push_back(std::move(entry));
  }
  return {{"round", a.round_formed}, {"clusters", clusters}};
}

ClusterAssignment assignment_from_json(const nlohmann::json& j) {
  ClusterAssignment a;
  a.round_formed = j.at("round").get<Round>();
  for (const auto& c : j.at("clusters")) {
    ClusterId id(c.at("id").get<std::uint32_t>());
    std::vector<WorkerId> members;
    for (const auto& m : c.at("members")) members.emplace_back(m.get<std::uint32_t>());
    a.clusters.emplace(id, std::move(members));
    if (c.contains("head")) a.heads.emplace(id, WorkerId(c.at("head").get<std::uint32_t>()));
  }
  return a;
}

}  // namespace sdfl::clustering
