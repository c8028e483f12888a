#include "sdfl/config.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

namespace sdfl::config {

namespace {

using engine::ConfigError;
using json = nlohmann::json;

/// One JSON object being consumed; whatever is left over at the end is an
/// unknown key.
class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_.empty() ? "<root>" : path_, "expected an object");
  }

  std::string at(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  const json* find(const std::string& key) {
    auto it = j_.find(key);
    if (it == j_.end()) return nullptr;
    seen_.insert(key);
    return &*it;
  }

  void real(const std::string& key, double& out) {
    if (const json* v = find(key)) {
      if (!v->is_number()) throw ConfigError(at(key), "expected a number");
      out = v->get<double>();
      if (!std::isfinite(out)) throw ConfigError(at(key), "must be finite");
    }
  }

  template <typename Int>
  void integer(const std::string& key, Int& out) {
    if (const json* v = find(key)) out = as_integer<Int>(*v, at(key));
  }

  void boolean(const std::string& key, bool& out) {
    if (const json* v = find(key)) {
      if (!v->is_boolean()) throw ConfigError(at(key), "expected true or false");
      out = v->get<bool>();
    }
  }

  void string(const std::string& key, std::string& out) {
    if (const json* v = find(key)) {
      if (!v->is_string()) throw ConfigError(at(key), "expected a string");
      out = v->get<std::string>();
    }
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.contains(it.key())) throw ConfigError(at(it.key()), "unknown key");
    }
  }

  template <typename Int>
  static Int as_integer(const json& v, const std::string& path) {
    if (v.is_number_integer()) {
      if constexpr (std::is_signed_v<Int>) {
        if (v.is_number_unsigned() && v.get<std::uint64_t>() > static_cast<std::uint64_t>(std::numeric_limits<Int>::max())) {
          throw ConfigError(path, "out of range");
        }
        const auto x = v.get<std::int64_t>();
        if (x < std::numeric_limits<Int>::min() || x > std::numeric_limits<Int>::max()) {
          throw ConfigError(path, "out of range");
        }
        return static_cast<Int>(x);
      } else {
        if (!v.is_number_unsigned() && v.get<std::int64_t>() < 0) throw ConfigError(path, "must be >= 0");
        const auto x = v.get<std::uint64_t>();
        if (x > std::numeric_limits<Int>::max()) throw ConfigError(path, "out of range");
        return static_cast<Int>(x);
      }
    }
    // 8.0 is accepted as 8; sweeps produce such values.
    if (v.is_number_float()) {
      const double d = v.get<double>();
      if (std::isfinite(d) && d == std::floor(d) && std::abs(d) < 9.0e15) {
        return as_integer<Int>(json(static_cast<std::int64_t>(d)), path);
      }
    }
    throw ConfigError(path, "expected an integer");
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

const json& array_at(Reader& r, const std::string& key, const json* v) {
  if (!v->is_array()) throw ConfigError(r.at(key), "expected an array");
  return *v;
}

std::vector<WorkerProfile> parse_workers(const json& v, std::size_t default_sites, std::uint64_t seed) {
  std::vector<WorkerProfile> out;
  if (v.is_array()) {
    for (std::size_t i = 0; i < v.size(); ++i) {
      Reader r(v[i], "workers[" + std::to_string(i) + "]");
      WorkerProfile p;
      std::uint32_t id = static_cast<std::uint32_t>(i);
      r.integer("id", id);
      p.id = WorkerId(id);
      r.real("x", p.location.x);
      r.real("y", p.location.y);
      r.real("speed_factor", p.speed_factor);
      r.finish();
      out.push_back(p);
    }
    return out;
  }
  Reader r(v, "workers");
  std::size_t count = 0;
  std::size_t sites = default_sites;
  double spread = 5.0;
  double speed = 1.0;
  if (!r.find("count")) throw ConfigError("workers.count", "required");
  r.integer("count", count);
  r.integer("sites", sites);
  r.real("spread", spread);
  r.real("speed_factor", speed);
  if (count < 1) throw ConfigError("workers.count", "must be >= 1");
  if (sites < 1) throw ConfigError("workers.sites", "must be >= 1");
  if (spread < 0.0) throw ConfigError("workers.spread", "must be >= 0");
  out = engine::generate_workers(count, sites, spread, seed);
  for (auto& p : out) p.speed_factor = speed;
  if (const json* s = r.find("stragglers")) {
    const json& list = array_at(r, "stragglers", s);
    for (std::size_t i = 0; i < list.size(); ++i) {
      Reader e(list[i], "workers.stragglers[" + std::to_string(i) + "]");
      std::size_t w = 0;
      double factor = 1.0;
      if (!e.find("worker")) throw ConfigError(e.at("worker"), "required");
      e.integer("worker", w);
      e.real("speed_factor", factor);
      e.finish();
      if (w >= out.size()) throw ConfigError(e.at("worker"), "no such worker");
      out[w].speed_factor = factor;
    }
  }
  r.finish();
  return out;
}

CorruptionKind parse_mode(const std::string& name, const std::string& path) {
  if (name == "sign_flip") return CorruptionKind::SignFlip;
  if (name == "gaussian_noise") return CorruptionKind::GaussianNoise;
  if (name == "zero") return CorruptionKind::Zero;
  throw ConfigError(path, "expected sign_flip, gaussian_noise or zero");
}

WorkerProfile& profile_for(std::vector<WorkerProfile>& workers, std::uint32_t id, const std::string& path) {
  for (auto& p : workers) {
    if (p.id.value == id) return p;
  }
  throw ConfigError(path, "no such worker");
}

}  // namespace

engine::ScenarioConfig parse_scenario(const json& doc) {
  engine::ScenarioConfig c;
  Reader root(doc, "");
  root.integer("master_seed", c.master_seed);
  root.integer("num_clusters", c.num_clusters);
  root.integer("rotation_period", c.rotation_period);
  root.integer("rounds", c.rounds);
  root.integer("epochs_per_round", c.epochs_per_round);
  root.boolean("blockchain_enabled", c.blockchain_enabled);
  root.real("intercluster_pull_prob", c.intercluster_pull_prob);
  root.real("intercluster_beta", c.intercluster_beta);
  root.boolean("head_trains", c.head_trains);
  root.real("cost_per_sample", c.cost_per_sample);
  root.boolean("parallel_training", c.parallel_training);

  if (const json* v = root.find("score_mode")) {
    const std::string name = v->is_string() ? v->get<std::string>() : "";
    if (name == "head_evaluated") {
      c.score_mode = engine::ScoreMode::HeadEvaluated;
    } else if (name == "self_reported") {
      c.score_mode = engine::ScoreMode::SelfReported;
    } else {
      throw ConfigError("score_mode", "expected head_evaluated or self_reported");
    }
  }
  if (const json* v = root.find("aggregation_weighting")) {
    const std::string name = v->is_string() ? v->get<std::string>() : "";
    if (name == "uniform") {
      c.weighting = aggregate::Weighting::Uniform;
    } else if (name == "by_samples") {
      c.weighting = aggregate::Weighting::BySamples;
    } else {
      throw ConfigError("aggregation_weighting", "expected uniform or by_samples");
    }
  }

  if (const json* v = root.find("data")) {
    Reader r(*v, "data");
    r.integer("samples_per_worker", c.data.samples_per_worker);
    r.integer("features", c.data.num_features);
    r.integer("classes", c.data.num_classes);
    r.real("noniid_skew", c.data.noniid_skew);
    r.integer("validation_samples", c.data.validation_samples);
    r.real("class_separation", c.data.class_separation);
    r.finish();
  }
  if (const json* v = root.find("optimizer")) {
    Reader r(*v, "optimizer");
    r.real("learning_rate", c.optimizer.learning_rate);
    r.real("momentum", c.optimizer.momentum);
    r.real("dampening", c.optimizer.dampening);
    r.real("weight_decay", c.optimizer.weight_decay);
    r.boolean("nesterov", c.optimizer.nesterov);
    r.integer("batch_size", c.optimizer.batch_size);
    r.finish();
  }
  if (const json* v = root.find("contract")) {
    Reader r(*v, "contract");
    r.integer("fixed_deposit_F", c.contract.fixed_deposit);
    r.real("threshold_T", c.contract.threshold);
    r.integer("penalty_pct_P", c.contract.penalty_pct);
    r.integer("top_k", c.contract.top_k);
    r.integer("reward_pool_R_total", c.contract.reward_pool);
    r.string("requester_id", c.contract.requester_id);
    r.integer("requester_balance", c.requester_balance);
    r.integer("worker_balance", c.worker_balance);
    r.finish();
  }
  if (const json* v = root.find("async_policy")) {
    Reader r(*v, "async_policy");
    if (const json* m = r.find("mode")) {
      const std::string name = m->is_string() ? m->get<std::string>() : "";
      if (name == "sync") {
        c.async_policy.mode = aggregate::CollectionMode::Synchronous;
      } else if (name == "async") {
        c.async_policy.mode = aggregate::CollectionMode::Async;
      } else {
        throw ConfigError("async_policy.mode", "expected sync or async");
      }
    }
    r.integer("staleness_bound_tau", c.async_policy.staleness_bound);
    r.real("staleness_decay_alpha", c.async_policy.staleness_decay);
    r.real("collection_window", c.async_policy.collection_window);
    r.finish();
  }
  if (const json* v = root.find("network")) {
    Reader r(*v, "network");
    r.real("base_latency", c.network.base_latency);
    r.real("jitter", c.network.jitter);
    r.real("drop_prob", c.network.drop_prob);
    r.real("ledger_tx_latency", c.network.ledger_tx_latency);
    r.finish();
  }

  const json* workers = root.find("workers");
  if (!workers) throw ConfigError("workers", "required");
  c.workers = parse_workers(*workers, c.num_clusters, c.master_seed);

  if (const json* v = root.find("corruption")) {
    const json& list = array_at(root, "corruption", v);
    for (std::size_t i = 0; i < list.size(); ++i) {
      Reader r(list[i], "corruption[" + std::to_string(i) + "]");
      std::uint32_t w = 0;
      std::string mode = "sign_flip";
      Honesty h = Honesty::corrupted(CorruptionKind::SignFlip);
      if (!r.find("worker")) throw ConfigError(r.at("worker"), "required");
      r.integer("worker", w);
      r.string("mode", mode);
      h.mode = parse_mode(mode, r.at("mode"));
      r.real("sigma", h.magnitude);
      r.integer("from_round", h.from_round);
      r.finish();
      profile_for(c.workers, w, r.at("worker")).honesty = h;
    }
  }
  if (const json* v = root.find("failures")) {
    const json& list = array_at(root, "failures", v);
    for (std::size_t i = 0; i < list.size(); ++i) {
      Reader r(list[i], "failures[" + std::to_string(i) + "]");
      std::uint32_t w = 0;
      if (!r.find("worker")) throw ConfigError(r.at("worker"), "required");
      r.integer("worker", w);
      if (list[i].contains("crash_round") || list[i].contains("recover_round")) {
        engine::RoundFailure f;
        f.worker = WorkerId(w);
        if (!r.find("crash_round")) throw ConfigError(r.at("crash_round"), "required");
        if (!r.find("recover_round")) throw ConfigError(r.at("recover_round"), "required");
        r.integer("crash_round", f.first_round);
        r.integer("recover_round", f.end_round);
        c.round_failures.push_back(f);
      } else {
        engine::TimedFailure f;
        f.worker = WorkerId(w);
        if (!r.find("crash_time")) throw ConfigError(r.at("crash_time"), "required");
        if (!r.find("recover_time")) throw ConfigError(r.at("recover_time"), "required");
        r.real("crash_time", f.crash_time);
        r.real("recover_time", f.recover_time);
        c.failures.push_back(f);
      }
      r.finish();
    }
  }
  root.finish();
  c.data.num_workers = c.workers.size();
  c.validate();
  return c;
}

json load_json_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("<file>", "cannot open " + path);
  std::stringstream buffer;
  buffer << in.rdbuf();
  try {
    return json::parse(buffer.str());
  } catch (const json::parse_error& e) {
    throw ConfigError("<file>", std::string("invalid JSON: ") + e.what());
  }
}

json to_json(const engine::ScenarioConfig& c) {
  json workers = json::array();
  json corruption = json::array();
  for (const WorkerProfile& p : c.workers) {
    workers.push_back({{"id", p.id.value}, {"x", p.location.x}, {"y", p.location.y}, {"speed_factor", p.speed_factor}});
    if (p.honesty.corrupt) {
      corruption.push_back({{"worker", p.id.value},
                            {"mode", to_string(p.honesty.mode)},
                            {"sigma", p.honesty.magnitude},
                            {"from_round", p.honesty.from_round}});
    }
  }
  json failures = json::array();
  for (const auto& f : c.failures) {
    failures.push_back({{"worker", f.worker.value}, {"crash_time", f.crash_time}, {"recover_time", f.recover_time}});
  }
  for (const auto& f : c.round_failures) {
    failures.push_back({{"worker", f.worker.value}, {"crash_round", f.first_round}, {"recover_round", f.end_round}});
  }
  json contract = ledger::to_json(c.contract);
  contract["requester_balance"] = c.requester_balance;
  contract["worker_balance"] = c.worker_balance;
  return {
      {"master_seed", c.master_seed},
      {"workers", workers},
      {"data",
       {{"samples_per_worker", c.data.samples_per_worker},
        {"features", c.data.num_features},
        {"classes", c.data.num_classes},
        {"noniid_skew", c.data.noniid_skew},
        {"validation_samples", c.data.validation_samples},
        {"class_separation", c.data.class_separation}}},
      {"num_clusters", c.num_clusters},
      {"rotation_period", c.rotation_period},
      {"rounds", c.rounds},
      {"epochs_per_round", c.epochs_per_round},
      {"optimizer",
       {{"learning_rate", c.optimizer.learning_rate},
        {"momentum", c.optimizer.momentum},
        {"dampening", c.optimizer.dampening},
        {"weight_decay", c.optimizer.weight_decay},
        {"nesterov", c.optimizer.nesterov},
        {"batch_size", c.optimizer.batch_size}}},
      {"contract", contract},
      {"async_policy",
       {{"mode", c.async_policy.mode == aggregate::CollectionMode::Async ? "async" : "sync"},
        {"staleness_bound_tau", c.async_policy.staleness_bound},
        {"staleness_decay_alpha", c.async_policy.staleness_decay},
        {"collection_window", c.async_policy.collection_window}}},
      {"aggregation_weighting", c.weighting == aggregate::Weighting::BySamples ? "by_samples" : "uniform"},
      {"network",
       {{"base_latency", c.network.base_latency},
        {"jitter", c.network.jitter},
        {"drop_prob", c.network.drop_prob},
        {"ledger_tx_latency", c.network.ledger_tx_latency}}},
      {"blockchain_enabled", c.blockchain_enabled},
      {"score_mode", c.score_mode == engine::ScoreMode::SelfReported ? "self_reported" : "head_evaluated"},
      {"intercluster_pull_prob", c.intercluster_pull_prob},
      {"intercluster_beta", c.intercluster_beta},
      {"head_trains", c.head_trains},
      {"cost_per_sample", c.cost_per_sample},
      {"corruption", corruption},
      {"failures", failures},
      {"parallel_training", c.parallel_training},
  };
}

void set_field(json& doc, const std::string& field, double value) {
  if (!doc.is_object()) throw ConfigError("<root>", "expected an object");
  std::string path = field;
  if (path == "workers") {
    if (doc.contains("workers") && doc["workers"].is_array()) {
      throw ConfigError("workers", "cannot vary the size of an explicit worker list");
    }
    path = "workers.count";
  }
  if (path.empty()) throw ConfigError("<vary>", "empty field name");

  json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw ConfigError(field, "malformed field name");
    if (dot == std::string::npos) {
      if (node->contains(key) && !(*node)[key].is_number()) throw ConfigError(field, "not a numeric field");
      if (value == std::floor(value) && std::abs(value) < 9.0e15) {
        (*node)[key] = static_cast<std::int64_t>(value);
      } else {
        (*node)[key] = value;
      }
      return;
    }
    json& next = (*node)[key];
    if (next.is_null()) next = json::object();
    if (!next.is_object()) throw ConfigError(field, "'" + key + "' is not an object");
    node = &next;
    start = dot + 1;
  }
}

}  // namespace sdfl::config
