#include "sdfl/learner.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>
#include <string_view>

#include "sdfl/kernels.hpp"
#include "sdfl/random.hpp"

namespace sdfl::learner {

namespace {

using Code = LearnerError::Code;

void check_compatible(const ModelWeights& w, const Dataset& data) {
  if (!w.shape_ok()) throw LearnerError(Code::ShapeMismatch, "weight vector length does not match its shape");
  if (w.num_features != data.num_features || w.num_classes != data.num_classes) {
    throw LearnerError(Code::ShapeMismatch, "model is " + std::to_string(w.num_features) + "x" +
                                                std::to_string(w.num_classes) + ", data is " +
                                                std::to_string(data.num_features) + "x" +
                                                std::to_string(data.num_classes));
  }
  if (data.features.size() != data.size() * data.num_features) {
    throw LearnerError(Code::ShapeMismatch, "feature matrix does not match label count");
  }
  for (int y : data.labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= data.num_classes) {
      throw LearnerError(Code::ShapeMismatch, "label " + std::to_string(y) + " out of range");
    }
  }
}

kernels::SoftmaxBatch as_batch(const ModelWeights& w, const Dataset& data) {
  return {w.values, data.features, data.labels, data.size(), data.num_features, data.num_classes};
}

Dataset gather(const Dataset& data, std::span<const std::size_t> rows) {
  Dataset out;
  out.num_features = data.num_features;
  out.num_classes = data.num_classes;
  out.role = data.role;
  out.features.reserve(rows.size() * data.num_features);
  out.labels.reserve(rows.size());
  for (std::size_t r : rows) {
    const auto src = data.row(r);
    out.features.insert(out.features.end(), src.begin(), src.end());
    out.labels.push_back(data.labels[r]);
  }
  return out;
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(std::span<const std::uint8_t> in, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in[at + i]) << (8 * i);
  return v;
}

constexpr std::size_t kHeaderSize = 4 + 1 + 4 + 4;

}  // namespace

bool ModelWeights::all_finite() const {
  return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
}

void OptimizerConfig::validate() const {
  if (!(learning_rate >= 0.0)) throw LearnerError(Code::InvalidShape, "learning_rate must be >= 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw LearnerError(Code::InvalidShape, "momentum must be in [0, 1)");
  if (epochs < 1) throw LearnerError(Code::InvalidShape, "epochs must be >= 1");
  if (batch_size < 1) throw LearnerError(Code::InvalidShape, "batch_size must be >= 1");
}

FederatedData generate_data(const DataSpec& spec, std::uint64_t seed) {
  const std::size_t d = spec.num_features;
  const std::size_t c = spec.num_classes;
  if (c < 2) throw LearnerError(Code::InvalidShape, "need at least 2 classes");
  if (d < 1) throw LearnerError(Code::InvalidShape, "need at least 1 feature");
  if (spec.num_workers < 1) throw LearnerError(Code::InvalidShape, "need at least 1 worker");
  if (spec.samples_per_worker < c) throw LearnerError(Code::InvalidShape, "samples_per_worker must be >= classes");
  if (spec.validation_samples < 1) throw LearnerError(Code::InvalidShape, "validation set must be non-empty");
  if (!(spec.noniid_skew >= 0.0 && spec.noniid_skew <= 1.0)) {
    throw LearnerError(Code::InvalidShape, "noniid_skew must be in [0, 1]");
  }

  Rng mean_rng(derive_seed(seed, {0x6d65616e}));
  std::vector<double> means(c * d);
  for (double& m : means) m = spec.class_separation * mean_rng.normal();

  auto draw = [&](Dataset& out, std::size_t count, Rng& rng, auto&& pick_label) {
    out.num_features = d;
    out.num_classes = c;
    out.features.reserve(count * d);
    out.labels.reserve(count);
    for (std::size_t s = 0; s < count; ++s) {
      const int y = pick_label(rng);
      out.labels.push_back(y);
      for (std::size_t j = 0; j < d; ++j) out.features.push_back(means[y * d + j] + rng.normal());
    }
  };

  FederatedData out;
  out.workers.resize(spec.num_workers);
  for (std::size_t i = 0; i < spec.num_workers; ++i) {
    Rng rng(derive_seed(seed, {0x776f726b, i}));
    const int dominant = static_cast<int>(i % c);
    draw(out.workers[i], spec.samples_per_worker, rng, [&](Rng& r) {
      if (r.uniform() < spec.noniid_skew) return dominant;
      return static_cast<int>(r.below(c));
    });
    out.workers[i].role = DatasetRole::Train;
  }
  Rng val_rng(derive_seed(seed, {0x76616c}));
  draw(out.validation, spec.validation_samples, val_rng, [&](Rng& r) { return static_cast<int>(r.below(c)); });
  out.validation.role = DatasetRole::Validation;
  return out;
}

ModelWeights init_model(std::size_t d, std::size_t c, std::uint64_t seed) {
  if (d < 1 || c < 1) throw LearnerError(Code::InvalidShape, "model needs d, c >= 1");
  ModelWeights w = ModelWeights::zeros(d, c);
  Rng rng(derive_seed(seed, {0x696e6974}));
  for (double& v : w.values) v = rng.uniform(-0.05, 0.05);
  return w;
}

LossGrad loss_and_gradient(const ModelWeights& w, const Dataset& batch) {
  if (batch.size() == 0) throw LearnerError(Code::EmptyDataset, "empty batch");
  check_compatible(w, batch);
  LossGrad out;
  out.grad.assign(w.size(), 0.0);
  out.loss = kernels::parallel::softmax_xent(as_batch(w, batch), out.grad);
  return out;
}

double loss(const ModelWeights& w, const Dataset& data) {
  if (data.size() == 0) throw LearnerError(Code::EmptyDataset, "empty dataset");
  check_compatible(w, data);
  return kernels::parallel::softmax_xent(as_batch(w, data), {});
}

ModelWeights train_local(const ModelWeights& w, const Dataset& data, const OptimizerConfig& opt,
                         std::uint64_t seed) {
  if (data.size() == 0) throw LearnerError(Code::EmptyDataset, "no training data");
  check_compatible(w, data);
  opt.validate();

  ModelWeights out = w;
  std::vector<double>& p = out.values;
  std::vector<double> buf;
  std::vector<double> grad(p.size());
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < opt.epochs; ++epoch) {
    Rng rng(derive_seed(seed, {0x73686666, static_cast<std::uint64_t>(epoch)}));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

    for (std::size_t start = 0; start < order.size(); start += opt.batch_size) {
      const std::size_t end = std::min(order.size(), start + opt.batch_size);
      const Dataset batch = gather(data, std::span(order).subspan(start, end - start));
      kernels::serial::softmax_xent(as_batch(out, batch), grad);

      if (opt.weight_decay != 0.0) {
        for (std::size_t j = 0; j < p.size(); ++j) grad[j] += opt.weight_decay * p[j];
      }
      if (opt.momentum != 0.0) {
        if (buf.empty()) {
          buf = grad;
        } else {
          for (std::size_t j = 0; j < p.size(); ++j) buf[j] = opt.momentum * buf[j] + (1.0 - opt.dampening) * grad[j];
        }
        if (opt.nesterov) {
          for (std::size_t j = 0; j < p.size(); ++j) grad[j] += opt.momentum * buf[j];
        } else {
          grad = buf;
        }
      }
      for (std::size_t j = 0; j < p.size(); ++j) p[j] -= opt.learning_rate * grad[j];
    }
  }
  if (!out.all_finite()) throw LearnerError(Code::NonFinite, "training diverged");
  return out;
}

double evaluate(const ModelWeights& w, const Dataset& data) {
  if (data.size() == 0) throw LearnerError(Code::EmptyDataset, "cannot evaluate on an empty dataset");
  check_compatible(w, data);
  const std::size_t correct = kernels::parallel::count_correct(as_batch(w, data));
  return 100.0 * static_cast<double>(correct) / static_cast<double>(data.size());
}

ModelWeights corrupt(const ModelWeights& w, const Corruption& how, std::uint64_t seed) {
  ModelWeights out = w;
  switch (how.kind) {
    case CorruptionKind::SignFlip:
      for (double& v : out.values) v = -v;
      break;
    case CorruptionKind::Zero:
      std::fill(out.values.begin(), out.values.end(), 0.0);
      break;
    case CorruptionKind::GaussianNoise: {
      Rng rng(derive_seed(seed, {0x6e6f697365}));
      for (double& v : out.values) v += how.sigma * rng.normal();
      break;
    }
  }
  return out;
}

std::vector<std::uint8_t> serialize(const ModelWeights& w) {
  if (!w.shape_ok()) throw LearnerError(Code::ShapeMismatch, "cannot serialize inconsistent weights");
  std::vector<std::uint8_t> out;
  out.reserve(kHeaderSize + 8 * w.size());
  for (char ch : std::string_view("SDFW")) out.push_back(static_cast<std::uint8_t>(ch));
  out.push_back(kFormatVersion);
  put_u32(out, static_cast<std::uint32_t>(w.num_features));
  put_u32(out, static_cast<std::uint32_t>(w.num_classes));
  for (double v : w.values) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
  }
  return out;
}

ModelWeights deserialize(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kHeaderSize || bytes[0] != 'S' || bytes[1] != 'D' || bytes[2] != 'F' || bytes[3] != 'W') {
    throw LearnerError(Code::BadEncoding, "missing SDFW header");
  }
  if (bytes[4] != kFormatVersion) throw LearnerError(Code::BadEncoding, "unsupported version " + std::to_string(bytes[4]));
  ModelWeights w;
  w.num_features = get_u32(bytes, 5);
  w.num_classes = get_u32(bytes, 9);
  const std::size_t count = (w.num_features + 1) * w.num_classes;
  if (bytes.size() != kHeaderSize + 8 * count) throw LearnerError(Code::BadEncoding, "payload length mismatch");
  w.values.resize(count);
  for (std::size_t k = 0; k < count; ++k) {
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(bytes[kHeaderSize + 8 * k + i]) << (8 * i);
    w.values[k] = std::bit_cast<double>(bits);
  }
  return w;
}

}  // namespace sdfl::learner
