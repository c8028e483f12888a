#include "sdfl/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

namespace sdfl::kernels {

namespace {

// Below these sizes the OpenMP versions run on the calling thread.
constexpr std::size_t kMinParallelRows = 512;
constexpr std::size_t kMinParallelElems = 4096;

inline double logit(const SoftmaxBatch& b, std::size_t row, std::size_t cls) {
  const double* w = b.weights.data() + cls * (b.features + 1);
  const double* x = b.rows.data() + row * b.features;
  double acc = 0.0;
  for (std::size_t j = 0; j < b.features; ++j) acc += w[j] * x[j];
  return acc + w[b.features];
}

// Writes softmax(z) - onehot(label) into `residual` and returns the sample loss.
inline double sample_residual(const SoftmaxBatch& b, std::size_t row, double* residual) {
  double max_z = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < b.classes; ++k) {
    residual[k] = logit(b, row, k);
    max_z = std::max(max_z, residual[k]);
  }
  const double label_z = residual[b.labels[row]];
  double sum = 0.0;
  for (std::size_t k = 0; k < b.classes; ++k) {
    residual[k] = std::exp(residual[k] - max_z);
    sum += residual[k];
  }
  for (std::size_t k = 0; k < b.classes; ++k) residual[k] /= sum;
  residual[b.labels[row]] -= 1.0;
  return max_z + std::log(sum) - label_z;
}

inline std::size_t argmax_class(const SoftmaxBatch& b, std::size_t row) {
  std::size_t best = 0;
  double best_z = logit(b, row, 0);
  for (std::size_t k = 1; k < b.classes; ++k) {
    const double z = logit(b, row, k);
    if (z > best_z) {
      best_z = z;
      best = k;
    }
  }
  return best;
}

// Running mean: exact for constant sequences.
inline double running_mean(const std::vector<double>& xs) {
  double mean = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) mean += (xs[i] - mean) / static_cast<double>(i + 1);
  return mean;
}

inline double blend_element(const WeightedInputs& in, std::size_t j) {
  const double ref = in.vectors[0][j];
  double lo = ref;
  double hi = ref;
  double offset = 0.0;
  for (std::size_t i = 0; i < in.vectors.size(); ++i) {
    const double x = in.vectors[i][j];
    lo = std::min(lo, x);
    hi = std::max(hi, x);
    offset += in.coefficients[i] * (x - ref);
  }
  return std::clamp(ref + offset, lo, hi);
}

inline std::size_t nearest(std::span<const double> points, std::span<const double> centroids,
                           std::size_t i) {
  const std::size_t k = centroids.size() / 2;
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < k; ++c) {
    const double dx = points[2 * i] - centroids[2 * c];
    const double dy = points[2 * i + 1] - centroids[2 * c + 1];
    const double d = dx * dx + dy * dy;
    if (d < best_d) {
      best_d = d;
      best = c;
    }
  }
  return best;
}

}  // namespace

namespace serial {

double softmax_xent(const SoftmaxBatch& b, std::span<double> grad) {
  const std::size_t stride = b.features + 1;
  std::vector<double> losses(b.count);
  std::vector<double> residual(b.classes);
  std::fill(grad.begin(), grad.end(), 0.0);
  for (std::size_t i = 0; i < b.count; ++i) {
    losses[i] = sample_residual(b, i, residual.data());
    if (grad.empty()) continue;
    const double* x = b.rows.data() + i * b.features;
    for (std::size_t k = 0; k < b.classes; ++k) {
      double* g = grad.data() + k * stride;
      for (std::size_t j = 0; j < b.features; ++j) g[j] += residual[k] * x[j];
      g[b.features] += residual[k];
    }
  }
  const double n = static_cast<double>(b.count);
  for (double& g : grad) g /= n;
  return running_mean(losses);
}

std::size_t count_correct(const SoftmaxBatch& b) {
  std::size_t correct = 0;
  for (std::size_t i = 0; i < b.count; ++i) {
    if (argmax_class(b, i) == static_cast<std::size_t>(b.labels[i])) ++correct;
  }
  return correct;
}

void weighted_average(const WeightedInputs& in, std::span<double> out) {
  for (std::size_t j = 0; j < out.size(); ++j) out[j] = blend_element(in, j);
}

void assign_nearest(std::span<const double> points, std::span<const double> centroids,
                    std::span<std::size_t> labels) {
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = nearest(points, centroids, i);
}

}  // namespace serial

namespace parallel {

double softmax_xent(const SoftmaxBatch& b, std::span<double> grad) {
  const std::size_t stride = b.features + 1;
  const auto n = static_cast<std::ptrdiff_t>(b.count);
  std::vector<double> losses(b.count);
  std::vector<double> residual(b.count * b.classes);

#pragma omp parallel for schedule(static) if (b.count >= kMinParallelRows)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    losses[i] = sample_residual(b, static_cast<std::size_t>(i), residual.data() + i * b.classes);
  }

  if (!grad.empty()) {
    // One thread owns each gradient element and sums rows in order.
    const auto elems = static_cast<std::ptrdiff_t>(b.classes * stride);
    const double count = static_cast<double>(b.count);
#pragma omp parallel for schedule(static) if (b.count >= kMinParallelRows)
    for (std::ptrdiff_t e = 0; e < elems; ++e) {
      const std::size_t k = static_cast<std::size_t>(e) / stride;
      const std::size_t j = static_cast<std::size_t>(e) % stride;
      double acc = 0.0;
      if (j < b.features) {
        for (std::size_t i = 0; i < b.count; ++i) acc += residual[i * b.classes + k] * b.rows[i * b.features + j];
      } else {
        for (std::size_t i = 0; i < b.count; ++i) acc += residual[i * b.classes + k];
      }
      grad[e] = acc / count;
    }
  }
  return running_mean(losses);
}

std::size_t count_correct(const SoftmaxBatch& b) {
  const auto n = static_cast<std::ptrdiff_t>(b.count);
  std::size_t correct = 0;
#pragma omp parallel for reduction(+ : correct) schedule(static) if (b.count >= kMinParallelRows)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    const auto row = static_cast<std::size_t>(i);
    if (argmax_class(b, row) == static_cast<std::size_t>(b.labels[row])) ++correct;
  }
  return correct;
}

void weighted_average(const WeightedInputs& in, std::span<double> out) {
  const auto m = static_cast<std::ptrdiff_t>(out.size());
#pragma omp parallel for schedule(static) if (out.size() * in.vectors.size() >= kMinParallelElems)
  for (std::ptrdiff_t j = 0; j < m; ++j) out[j] = blend_element(in, static_cast<std::size_t>(j));
}

void assign_nearest(std::span<const double> points, std::span<const double> centroids,
                    std::span<std::size_t> labels) {
  const auto n = static_cast<std::ptrdiff_t>(labels.size());
#pragma omp parallel for schedule(static) if (labels.size() >= kMinParallelRows)
  for (std::ptrdiff_t i = 0; i < n; ++i) labels[i] = nearest(points, centroids, static_cast<std::size_t>(i));
}

}  // namespace parallel

}  // namespace sdfl::kernels
