// Serial reference vs OpenMP kernels on synthetic inputs.
#include <benchmark/benchmark.h>

#include <vector>

#include "sdfl/kernels.hpp"
#include "sdfl/random.hpp"

namespace {

using namespace sdfl;

struct Problem {
  std::vector<double> weights, rows, grad;
  std::vector<int> labels;
  kernels::SoftmaxBatch batch;
};

Problem make_problem(std::size_t n, std::size_t d, std::size_t c) {
  Problem p;
  Rng rng(derive_seed(7, {n, d, c}));
  p.weights.resize(c * (d + 1));
  for (double& w : p.weights) w = 0.1 * rng.normal();
  p.rows.resize(n * d);
  for (double& x : p.rows) x = rng.normal();
  p.labels.resize(n);
  for (int& y : p.labels) y = static_cast<int>(rng.below(c));
  p.grad.resize(p.weights.size());
  p.batch = {p.weights, p.rows, p.labels, n, d, c};
  return p;
}

template <bool Parallel>
void BM_SoftmaxGrad(benchmark::State& state) {
  Problem p = make_problem(static_cast<std::size_t>(state.range(0)), 32, 10);
  for (auto _ : state) {
    double l = Parallel ? kernels::parallel::softmax_xent(p.batch, p.grad) : kernels::serial::softmax_xent(p.batch, p.grad);
    benchmark::DoNotOptimize(l);
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}

template <bool Parallel>
void BM_WeightedAverage(benchmark::State& state) {
  const auto len = static_cast<std::size_t>(state.range(0));
  const std::size_t n = 16;
  Rng rng(11);
  std::vector<std::vector<double>> data(n, std::vector<double>(len));
  for (auto& v : data)
    for (double& x : v) x = rng.normal();
  std::vector<std::span<const double>> views(data.begin(), data.end());
  std::vector<double> coef(n, 1.0 / n), out(len);
  kernels::WeightedInputs in{views, coef};
  for (auto _ : state) {
    if (Parallel)
      kernels::parallel::weighted_average(in, out);
    else
      kernels::serial::weighted_average(in, out);
    benchmark::DoNotOptimize(out.data());
  }
}

template <bool Parallel>
void BM_AssignNearest(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(13);
  std::vector<double> points(2 * n), centroids(2 * 8);
  for (double& x : points) x = rng.uniform(-100.0, 100.0);
  for (double& x : centroids) x = rng.uniform(-100.0, 100.0);
  std::vector<std::size_t> labels(n);
  for (auto _ : state) {
    if (Parallel)
      kernels::parallel::assign_nearest(points, centroids, labels);
    else
      kernels::serial::assign_nearest(points, centroids, labels);
    benchmark::DoNotOptimize(labels.data());
  }
}

}  // namespace

BENCHMARK(BM_SoftmaxGrad<false>)->Name("softmax_grad/serial")->Arg(1024)->Arg(16384);
BENCHMARK(BM_SoftmaxGrad<true>)->Name("softmax_grad/omp")->Arg(1024)->Arg(16384);
BENCHMARK(BM_WeightedAverage<false>)->Name("weighted_average/serial")->Arg(1 << 12)->Arg(1 << 18);
BENCHMARK(BM_WeightedAverage<true>)->Name("weighted_average/omp")->Arg(1 << 12)->Arg(1 << 18);
BENCHMARK(BM_AssignNearest<false>)->Name("assign_nearest/serial")->Arg(1 << 10)->Arg(1 << 16);
BENCHMARK(BM_AssignNearest<true>)->Name("assign_nearest/omp")->Arg(1 << 10)->Arg(1 << 16);

BENCHMARK_MAIN();
