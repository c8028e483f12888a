#pragma once

#include <cstddef>
#include <span>

/// Inner loops shared by the learner, aggregation and clustering code.
///
/// Each kernel has a serial reference and an OpenMP version. Reductions in
/// the OpenMP versions are arranged so every output element is accumulated
/// by a single thread in the same order as the serial loop, which makes the
/// two bit-identical. Tests compare them directly.
namespace sdfl::kernels {

/// Dense softmax-regression problem. `weights` holds `classes` rows of
/// `features + 1` values (the last one is the bias).
struct SoftmaxBatch {
  std::span<const double> weights;
  std::span<const double> rows;  ///< count x features, row-major
  std::span<const int> labels;
  std::size_t count = 0;
  std::size_t features = 0;
  std::size_t classes = 0;
};

/// Equal-length inputs combined with one coefficient each.
struct WeightedInputs {
  std::span<const std::span<const double>> vectors;
  std::span<const double> coefficients;
};

namespace serial {

/// Mean cross-entropy. When `grad` is non-empty it receives the mean gradient
/// (same layout as weights).
double softmax_xent(const SoftmaxBatch& batch, std::span<double> grad);

/// Number of rows whose argmax class (lowest index on ties) equals the label.
std::size_t count_correct(const SoftmaxBatch& batch);

/// out = ref + sum_i c_i (x_i - ref), ref = x_0, clamped to the per-element
/// range of the inputs.
void weighted_average(const WeightedInputs& in, std::span<double> out);

/// Index of the nearest 2-D centroid for each point (lowest index on ties).
void assign_nearest(std::span<const double> points, std::span<const double> centroids,
                    std::span<std::size_t> labels);

}  // namespace serial

namespace parallel {

double softmax_xent(const SoftmaxBatch& batch, std::span<double> grad);
std::size_t count_correct(const SoftmaxBatch& batch);
void weighted_average(const WeightedInputs& in, std::span<double> out);
void assign_nearest(std::span<const double> points, std::span<const double> centroids,
                    std::span<std::size_t> labels);

}  // namespace parallel

}  // namespace sdfl::kernels
