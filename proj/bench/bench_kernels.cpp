// Serial reference kernels against their OpenMP versions.

#include <benchmark/benchmark.h>

#include <vector>

#include "npepfn/kernels.hpp"
#include "npepfn/reference_backend.hpp"
#include "npepfn/rng.hpp"

using namespace npepfn;

namespace {

Matrix random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  Rng rng = make_rng(seed, 0);
  Matrix m(rows, cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) m(i, j) = standard_normal(rng);
  return m;
}

template <bool Parallel>
void BM_SquaredDistances(benchmark::State& state) {
  const Matrix points = random_matrix(static_cast<std::size_t>(state.range(0)), 10, 1);
  const std::vector<double> query(10, 0.1);
  std::vector<double> out(points.rows());
  for (auto _ : state) {
    if constexpr (Parallel) kernels::parallel::squared_distances(points, query, out);
    else kernels::serial::squared_distances(points, query, out);
    benchmark::DoNotOptimize(out.data());
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}

template <bool Parallel>
void BM_GaussianWeights(benchmark::State& state) {
  const Matrix z = random_matrix(static_cast<std::size_t>(state.range(0)), 1, 2);
  std::vector<double> dist2(z.rows()), out(z.rows());
  for (std::size_t i = 0; i < z.rows(); ++i) dist2[i] = z(i, 0) * z(i, 0);
  for (auto _ : state) {
    if constexpr (Parallel) kernels::parallel::gaussian_weights(dist2, 0.5, 40.0, out);
    else kernels::serial::gaussian_weights(dist2, 0.5, 40.0, out);
    benchmark::DoNotOptimize(out.data());
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}

template <bool Parallel>
void BM_AssignNearest(benchmark::State& state) {
  const Matrix data = random_matrix(static_cast<std::size_t>(state.range(0)), 10, 3);
  const Matrix centroids = random_matrix(10, 10, 4);
  std::vector<std::size_t> labels(data.rows());
  std::vector<double> dist2(data.rows());
  for (auto _ : state) {
    if constexpr (Parallel) kernels::parallel::assign_nearest(data, centroids, labels, dist2);
    else kernels::serial::assign_nearest(data, centroids, labels, dist2);
    benchmark::DoNotOptimize(labels.data());
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}

template <bool Parallel>
void BM_KnnLabels(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Matrix train = random_matrix(n, 10, 5);
  const Matrix queries = random_matrix(256, 10, 6);
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<int>(i % 2);
  for (auto _ : state) {
    auto out = Parallel ? kernels::parallel::knn_labels(train, labels, queries, 10)
                        : kernels::serial::knn_labels(train, labels, queries, 10);
    benchmark::DoNotOptimize(out.data());
  }
  state.SetItemsProcessed(state.iterations() * 256);
}

template <bool Parallel>
void BM_ClassifierFit(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  ClassContext ctx{random_matrix(n, 5, 7), std::vector<int>(n)};
  for (std::size_t i = 0; i < n; ++i) ctx.labels[i] = ctx.features(i, 0) + ctx.features(i, 1) > 0.0 ? 1 : 0;
  ReferenceBackendOptions options;
  options.use_threads = Parallel;
  for (auto _ : state) {
    KernelClassifierModel model(ctx, options);
    benchmark::DoNotOptimize(model.bandwidth_multiplier());
  }
}

}  // namespace

BENCHMARK(BM_SquaredDistances<false>)->Name("squared_distances/serial")->Arg(10000)->Arg(100000);
BENCHMARK(BM_SquaredDistances<true>)->Name("squared_distances/parallel")->Arg(10000)->Arg(100000);
BENCHMARK(BM_GaussianWeights<false>)->Name("gaussian_weights/serial")->Arg(10000)->Arg(100000);
BENCHMARK(BM_GaussianWeights<true>)->Name("gaussian_weights/parallel")->Arg(10000)->Arg(100000);
BENCHMARK(BM_AssignNearest<false>)->Name("assign_nearest/serial")->Arg(10000)->Arg(100000);
BENCHMARK(BM_AssignNearest<true>)->Name("assign_nearest/parallel")->Arg(10000)->Arg(100000);
BENCHMARK(BM_KnnLabels<false>)->Name("knn_labels/serial")->Arg(2000)->Arg(10000);
BENCHMARK(BM_KnnLabels<true>)->Name("knn_labels/parallel")->Arg(2000)->Arg(10000);
BENCHMARK(BM_ClassifierFit<false>)->Name("classifier_fit/serial")->Arg(2000)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ClassifierFit<true>)->Name("classifier_fit/parallel")->Arg(2000)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
