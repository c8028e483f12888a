#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "sdfl/clustering.hpp"

namespace sdfl::learner {

class LearnerError : public std::invalid_argument {
 public:
  enum class Code { InvalidShape, ShapeMismatch, EmptyDataset, NonFinite, BadEncoding };

  LearnerError(Code code, const std::string& what) : std::invalid_argument(what), code_(code) {}
  Code code() const { return code_; }

 private:
  Code code_;
};

/// Softmax-regression parameters: `num_classes` rows of `num_features + 1`
/// values, the last entry of each row being the bias.
struct ModelWeights {
  std::size_t num_features = 0;
  std::size_t num_classes = 0;
  std::vector<double> values;

  static ModelWeights zeros(std::size_t d, std::size_t c) { return {d, c, std::vector<double>((d + 1) * c, 0.0)}; }

  std::size_t size() const { return values.size(); }
  bool shape_ok() const { return values.size() == (num_features + 1) * num_classes; }
  bool all_finite() const;
  bool same_shape(const ModelWeights& o) const {
    return num_features == o.num_features && num_classes == o.num_classes;
  }

  bool operator==(const ModelWeights&) const = default;
};

enum class DatasetRole { Train, Validation };

struct Dataset {
  std::size_t num_features = 0;
  std::size_t num_classes = 0;
  std::vector<double> features;  ///< rows x num_features, row-major
  std::vector<int> labels;
  DatasetRole role = DatasetRole::Train;

  std::size_t size() const { return labels.size(); }
  std::span<const double> row(std::size_t i) const { return {features.data() + i * num_features, num_features}; }

  bool operator==(const Dataset&) const = default;
};

struct OptimizerConfig {
  double learning_rate = 0.01;
  double momentum = 0.5;
  double dampening = 0.0;
  double weight_decay = 0.0;
  bool nesterov = false;
  int epochs = 1;
  std::size_t batch_size = 16;

  void validate() const;
  bool operator==(const OptimizerConfig&) const = default;
};

struct DataSpec {
  std::size_t num_workers = 3;
  std::size_t samples_per_worker = 100;
  std::size_t num_features = 4;
  std::size_t num_classes = 3;
  double noniid_skew = 0.0;
  std::size_t validation_samples = 300;
  /// Spread of the class means relative to the unit-variance blobs.
  double class_separation = 1.5;

  bool operator==(const DataSpec&) const = default;
};

struct FederatedData {
  std::vector<Dataset> workers;
  Dataset validation;
};

/// Gaussian class blobs. Worker i draws labels from a mix of the uniform
/// distribution (weight 1 - skew) and its dominant class i mod c (weight skew).
FederatedData generate_data(const DataSpec& spec, std::uint64_t seed);

/// Uniform values in [-0.05, 0.05].
ModelWeights init_model(std::size_t d, std::size_t c, std::uint64_t seed);

struct LossGrad {
  double loss = 0.0;
  std::vector<double> grad;
};

LossGrad loss_and_gradient(const ModelWeights& w, const Dataset& batch);
double loss(const ModelWeights& w, const Dataset& data);

/// Momentum SGD with seeded shuffling, `opt.epochs` passes over `data`.
/// The momentum buffer starts empty on every call.
ModelWeights train_local(const ModelWeights& w, const Dataset& data, const OptimizerConfig& opt,
                         std::uint64_t seed);

/// 100 x accuracy; argmax ties go to the lowest class index.
double evaluate(const ModelWeights& w, const Dataset& data);

struct Corruption {
  CorruptionKind kind = CorruptionKind::SignFlip;
  double sigma = 0.0;
};

ModelWeights corrupt(const ModelWeights& w, const Corruption& how, std::uint64_t seed);

/// "SDFW", version byte, d and c as u32 LE, then the values as binary64 LE.
std::vector<std::uint8_t> serialize(const ModelWeights& w);
ModelWeights deserialize(std::span<const std::uint8_t> bytes);

inline constexpr std::uint8_t kFormatVersion = 1;

}  // namespace sdfl::learner
