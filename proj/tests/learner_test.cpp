#include "sdfl/learner.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "sdfl/random.hpp"

namespace sdfl::learner {
namespace {

Dataset random_dataset(std::size_t n, std::size_t d, std::size_t c, Rng& rng) {
  Dataset ds;
  ds.num_features = d;
  ds.num_classes = c;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) ds.features.push_back(rng.normal());
    ds.labels.push_back(static_cast<int>(rng.below(c)));
  }
  return ds;
}

ModelWeights random_weights(std::size_t d, std::size_t c, Rng& rng, double scale = 1.0) {
  ModelWeights w = ModelWeights::zeros(d, c);
  for (double& v : w.values) v = scale * rng.normal();
  return w;
}

// Softmax cross-entropy written out directly from its definition.
double reference_loss(const ModelWeights& w, const Dataset& ds) {
  const std::size_t d = ds.num_features, c = ds.num_classes;
  double total = 0.0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    std::vector<double> z(c);
    for (std::size_t k = 0; k < c; ++k) {
      z[k] = w.values[k * (d + 1) + d];
      for (std::size_t j = 0; j < d; ++j) z[k] += w.values[k * (d + 1) + j] * ds.features[i * d + j];
    }
    double zmax = z[0];
    for (double v : z) zmax = std::max(zmax, v);
    double s = 0.0;
    for (double v : z) s += std::exp(v - zmax);
    total += std::log(s) + zmax - z[static_cast<std::size_t>(ds.labels[i])];
  }
  return total / static_cast<double>(ds.size());
}

double max_relative_error(const std::vector<double>& analytic, const std::vector<double>& numeric) {
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double scale = std::max({std::abs(analytic[i]), std::abs(numeric[i]), 1e-300});  // only guards 0/0
    worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / scale);
  }
  return worst;
}

TEST(Learner, ZeroWeightsGiveLogC) {
  Rng rng(1);
  for (std::size_t c = 2; c <= 6; ++c) {
    const Dataset ds = random_dataset(17, 3, c, rng);
    EXPECT_NEAR(loss(ModelWeights::zeros(3, c), ds), std::log(static_cast<double>(c)), 1e-12);
  }
}

TEST(Learner, LossMatchesDirectFormula) {
  Rng rng(2);
  for (int t = 0; t < 20; ++t) {
    const Dataset ds = random_dataset(1 + rng.below(20), 1 + rng.below(5), 2 + rng.below(4), rng);
    const ModelWeights w = random_weights(ds.num_features, ds.num_classes, rng);
    EXPECT_NEAR(loss(w, ds), reference_loss(w, ds), 1e-12);
  }
}

TEST(Learner, GradientMatchesCentralDifferences) {
  Rng rng(3);
  const double h = 1e-6;
  for (int t = 0; t < 100; ++t) {
    const std::size_t d = 1 + rng.below(5), c = 2 + rng.below(4);
    const Dataset ds = random_dataset(1 + rng.below(20), d, c, rng);
    const ModelWeights w = random_weights(d, c, rng);
    const LossGrad lg = loss_and_gradient(w, ds);
    std::vector<double> numeric(w.size());
    for (std::size_t i = 0; i < w.size(); ++i) {
      ModelWeights plus = w, minus = w;
      plus.values[i] += h;
      minus.values[i] -= h;
      numeric[i] = (reference_loss(plus, ds) - reference_loss(minus, ds)) / (2 * h);
    }
    EXPECT_LT(max_relative_error(lg.grad, numeric), 1e-5) << "instance " << t;
  }
}

TEST(Learner, DuplicatingTheBatchChangesNothing) {
  Rng rng(4);
  const Dataset ds = random_dataset(8, 3, 3, rng);
  Dataset twice = ds;
  twice.features.insert(twice.features.end(), ds.features.begin(), ds.features.end());
  twice.labels.insert(twice.labels.end(), ds.labels.begin(), ds.labels.end());
  const ModelWeights w = random_weights(3, 3, rng);
  const LossGrad a = loss_and_gradient(w, ds), b = loss_and_gradient(w, twice);
  EXPECT_NEAR(a.loss, b.loss, 1e-14);
  for (std::size_t i = 0; i < a.grad.size(); ++i) EXPECT_NEAR(a.grad[i], b.grad[i], 1e-14);
}

TEST(Learner, ShapeMismatch) {
  Rng rng(5);
  const Dataset ds = random_dataset(4, 3, 2, rng);
  try {
    loss_and_gradient(ModelWeights::zeros(2, 2), ds);
    FAIL();
  } catch (const LearnerError& e) {
    EXPECT_EQ(e.code(), LearnerError::Code::ShapeMismatch);
  }
  EXPECT_THROW(evaluate(ModelWeights::zeros(3, 3), ds), LearnerError);
  EXPECT_THROW(train_local(ModelWeights::zeros(3, 4), ds, {}, 1), LearnerError);
}

TEST(Learner, InitModel) {
  const ModelWeights a = init_model(2, 2, 7), b = init_model(2, 2, 7);
  EXPECT_EQ(a, b);
  EXPECT_EQ(a.size(), 6u);
  for (double v : init_model(5, 4, 9).values) {
    EXPECT_GE(v, -0.05);
    EXPECT_LE(v, 0.05);
  }
  EXPECT_NE(init_model(2, 2, 7), init_model(2, 2, 8));
}

TEST(Learner, OptimizerDefaults) {
  const OptimizerConfig opt;
  EXPECT_EQ(opt.learning_rate, 0.01);
  EXPECT_EQ(opt.momentum, 0.5);
  EXPECT_EQ(opt.dampening, 0.0);
  EXPECT_EQ(opt.weight_decay, 0.0);
  EXPECT_FALSE(opt.nesterov);
}

TEST(Learner, ZeroLearningRateIsIdentity) {
  Rng rng(6);
  const Dataset ds = random_dataset(30, 4, 3, rng);
  const ModelWeights w = random_weights(4, 3, rng);
  OptimizerConfig opt;
  opt.learning_rate = 0.0;
  opt.epochs = 3;
  EXPECT_EQ(train_local(w, ds, opt, 1), w);
}

TEST(Learner, SingleFullBatchStepIsPlainGradientDescent) {
  Rng rng(7);
  const Dataset ds = random_dataset(12, 3, 3, rng);
  const ModelWeights w = random_weights(3, 3, rng);
  OptimizerConfig opt;
  opt.momentum = 0.0;
  opt.learning_rate = 0.1;
  opt.batch_size = ds.size();
  const ModelWeights out = train_local(w, ds, opt, 1);
  const LossGrad lg = loss_and_gradient(w, ds);
  for (std::size_t i = 0; i < w.size(); ++i) EXPECT_NEAR(out.values[i], w.values[i] - 0.1 * lg.grad[i], 1e-15);
}

TEST(Learner, MomentumRecurrenceByHand) {
  // Two full-batch steps: v1 = g0, v2 = mu v1 + g1.
  Rng rng(8);
  const Dataset ds = random_dataset(10, 2, 2, rng);
  const ModelWeights w0 = random_weights(2, 2, rng);
  OptimizerConfig opt;
  opt.momentum = 0.5;
  opt.learning_rate = 0.2;
  opt.batch_size = ds.size();
  opt.epochs = 2;
  const ModelWeights out = train_local(w0, ds, opt, 3);

  const auto g0 = loss_and_gradient(w0, ds).grad;
  ModelWeights w1 = w0;
  for (std::size_t i = 0; i < w1.size(); ++i) w1.values[i] -= 0.2 * g0[i];
  const auto g1 = loss_and_gradient(w1, ds).grad;
  for (std::size_t i = 0; i < w1.size(); ++i) {
    const double v2 = 0.5 * g0[i] + g1[i];
    EXPECT_NEAR(out.values[i], w1.values[i] - 0.2 * v2, 1e-12);
  }
}

TEST(Learner, TrainingIsDeterministic) {
  Rng rng(9);
  const Dataset ds = random_dataset(50, 4, 3, rng);
  const ModelWeights w = random_weights(4, 3, rng, 0.1);
  const OptimizerConfig opt;
  EXPECT_EQ(train_local(w, ds, opt, 42), train_local(w, ds, opt, 42));
  EXPECT_NE(train_local(w, ds, opt, 42), train_local(w, ds, opt, 43));
}

TEST(Learner, RowOrderMattersOnlyForMiniBatches) {
  Rng rng(10);
  const Dataset ds = random_dataset(40, 3, 3, rng);
  Dataset reversed;
  reversed.num_features = ds.num_features;
  reversed.num_classes = ds.num_classes;
  for (std::size_t i = ds.size(); i-- > 0;) {
    const auto r = ds.row(i);
    reversed.features.insert(reversed.features.end(), r.begin(), r.end());
    reversed.labels.push_back(ds.labels[i]);
  }
  const ModelWeights w = random_weights(3, 3, rng, 0.1);
  OptimizerConfig opt;
  opt.batch_size = 8;
  EXPECT_NE(train_local(w, ds, opt, 5), train_local(w, reversed, opt, 5));

  // Full batch: only the floating-point summation order differs.
  opt.batch_size = ds.size();
  opt.epochs = 3;
  const ModelWeights a = train_local(w, ds, opt, 5), b = train_local(w, reversed, opt, 5);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a.values[i], b.values[i], 1e-12);
}

TEST(Learner, TrainingReducesLossOnSeparableBlobs) {
  Rng rng(11);
  Dataset ds;
  ds.num_features = 2;
  ds.num_classes = 2;
  for (int i = 0; i < 100; ++i) {
    const int y = i % 2;
    ds.features.push_back((y ? 3.0 : -3.0) + 0.5 * rng.normal());
    ds.features.push_back(0.5 * rng.normal());
    ds.labels.push_back(y);
  }
  const ModelWeights w = init_model(2, 2, 1);
  OptimizerConfig opt;
  opt.epochs = 5;
  const ModelWeights out = train_local(w, ds, opt, 2);
  EXPECT_LT(loss(out, ds), loss(w, ds));
  EXPECT_EQ(evaluate(out, ds), 100.0);
}

TEST(Learner, EvaluateTieGoesToClassZero) {
  Dataset ds;
  ds.num_features = 1;
  ds.num_classes = 2;
  ds.features = {1.0, -2.0, 3.0, 0.5};
  ds.labels = {0, 1, 0, 1};
  EXPECT_EQ(evaluate(ModelWeights::zeros(1, 2), ds), 50.0);
}

TEST(Learner, HandBuiltSeparatorScoresFull) {
  // Class 1 iff x0 + x1 > 0: row k scores +-(x0 + x1).
  Dataset ds;
  ds.num_features = 2;
  ds.num_classes = 2;
  ds.features = {1, 1, 2, 0.5, -1, -1, -0.5, -2};
  ds.labels = {1, 1, 0, 0};
  ModelWeights w = ModelWeights::zeros(2, 2);
  w.values = {-1, -1, 0, 1, 1, 0};
  EXPECT_EQ(evaluate(w, ds), 100.0);
}

TEST(Learner, EvaluateRejectsEmpty) {
  Dataset ds;
  ds.num_features = 2;
  ds.num_classes = 2;
  try {
    evaluate(ModelWeights::zeros(2, 2), ds);
    FAIL();
  } catch (const LearnerError& e) {
    EXPECT_EQ(e.code(), LearnerError::Code::EmptyDataset);
  }
}

TEST(Learner, Corruption) {
  Rng rng(12);
  const ModelWeights w = random_weights(3, 3, rng);
  const ModelWeights flipped = corrupt(w, {CorruptionKind::SignFlip, 0}, 1);
  for (std::size_t i = 0; i < w.size(); ++i) EXPECT_EQ(flipped.values[i], -w.values[i]);
  EXPECT_EQ(corrupt(flipped, {CorruptionKind::SignFlip, 0}, 1), w);
  EXPECT_EQ(corrupt(w, {CorruptionKind::Zero, 0}, 1), ModelWeights::zeros(3, 3));
  EXPECT_EQ(corrupt(w, {CorruptionKind::GaussianNoise, 0.0}, 1), w);
  const ModelWeights noisy = corrupt(w, {CorruptionKind::GaussianNoise, 0.5}, 1);
  EXPECT_NE(noisy, w);
  EXPECT_EQ(noisy, corrupt(w, {CorruptionKind::GaussianNoise, 0.5}, 1));
}

TEST(Learner, SerializationLayout) {
  ModelWeights w = ModelWeights::zeros(1, 2);
  w.values = {1.0, -2.0, 0.5, 3.25};
  const auto bytes = serialize(w);
  ASSERT_EQ(bytes.size(), 13u + 8u * 4u);
  EXPECT_EQ(bytes[0], 'S');
  EXPECT_EQ(bytes[1], 'D');
  EXPECT_EQ(bytes[2], 'F');
  EXPECT_EQ(bytes[3], 'W');
  EXPECT_EQ(bytes[4], 1);
  EXPECT_EQ((std::vector<std::uint8_t>(bytes.begin() + 5, bytes.begin() + 13)),
            (std::vector<std::uint8_t>{1, 0, 0, 0, 2, 0, 0, 0}));
  // 1.0 is 0x3FF0000000000000, little-endian.
  EXPECT_EQ((std::vector<std::uint8_t>(bytes.begin() + 13, bytes.begin() + 21)),
            (std::vector<std::uint8_t>{0, 0, 0, 0, 0, 0, 0xF0, 0x3F}));
  EXPECT_EQ(deserialize(bytes), w);
}

TEST(Learner, DeserializeRejectsGarbage) {
  auto bytes = serialize(init_model(3, 3, 1));
  bytes.pop_back();
  EXPECT_THROW(deserialize(bytes), LearnerError);
  bytes = serialize(init_model(3, 3, 1));
  bytes[0] = 'X';
  EXPECT_THROW(deserialize(bytes), LearnerError);
  bytes = serialize(init_model(3, 3, 1));
  bytes[4] = 2;
  EXPECT_THROW(deserialize(bytes), LearnerError);
}

TEST(LearnerProperty, SerializationRoundTrip) {
  Rng rng(13);
  for (int t = 0; t < 100; ++t) {
    const ModelWeights w = random_weights(1 + rng.below(6), 2 + rng.below(5), rng, 1e3);
    EXPECT_EQ(deserialize(serialize(w)), w);
  }
}

TEST(DataGeneration, DeterministicAndShaped) {
  DataSpec spec;
  spec.num_workers = 4;
  spec.samples_per_worker = 50;
  const FederatedData a = generate_data(spec, 5), b = generate_data(spec, 5);
  ASSERT_EQ(a.workers.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(a.workers[i], b.workers[i]);
    EXPECT_EQ(a.workers[i].size(), 50u);
    for (int y : a.workers[i].labels) EXPECT_LT(static_cast<std::size_t>(y), spec.num_classes);
  }
  EXPECT_EQ(a.validation, b.validation);
  EXPECT_EQ(a.validation.size(), spec.validation_samples);
  EXPECT_EQ(a.validation.role, DatasetRole::Validation);
}

TEST(DataGeneration, UniformLabelsWithoutSkew) {
  DataSpec spec;
  spec.num_workers = 3;
  spec.num_classes = 2;
  spec.samples_per_worker = 100;
  spec.noniid_skew = 0.0;
  for (const Dataset& ds : generate_data(spec, 9).workers) {
    int ones = 0;
    for (int y : ds.labels) ones += y;
    // Binomial(100, 0.5): 4 standard deviations.
    EXPECT_NEAR(ones, 50, 20);
  }
}

TEST(DataGeneration, FullSkewIsSingleClass) {
  DataSpec spec;
  spec.num_workers = 5;
  spec.noniid_skew = 1.0;
  const FederatedData data = generate_data(spec, 3);
  for (std::size_t i = 0; i < data.workers.size(); ++i) {
    const int dominant = static_cast<int>(i % spec.num_classes);
    std::size_t hits = 0;
    for (int y : data.workers[i].labels) hits += (y == dominant);
    EXPECT_GE(hits * 10, data.workers[i].size() * 9);
  }
}

TEST(DataGeneration, RejectsBadSpecs) {
  DataSpec spec;
  spec.num_classes = 1;
  EXPECT_THROW(generate_data(spec, 1), LearnerError);
  spec = DataSpec{};
  spec.samples_per_worker = 2;
  EXPECT_THROW(generate_data(spec, 1), LearnerError);
}

}  // namespace
}  // namespace sdfl::learner
