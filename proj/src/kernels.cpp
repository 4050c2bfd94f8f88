#include "npepfn/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "npepfn/errors.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace npepfn::kernels {

bool openmp_enabled() noexcept {
#ifdef _OPENMP
  return true;
#else
  return false;
#endif
}

int max_threads() noexcept {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

namespace {

inline double row_distance2(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j) {
    const double d = a[j] - b[j];
    s += d * d;
  }
  return s;
}

void check_width(const Matrix& m, std::size_t width, const char* what) {
  if (m.cols() != width) throw ShapeError(std::string(what) + ": width mismatch");
}

std::vector<int> nearest_labels(const Matrix& train, std::span<const int> labels, std::span<const double> q,
                                std::size_t k, std::vector<std::pair<double, std::size_t>>& scratch) {
  scratch.resize(train.rows());
  for (std::size_t i = 0; i < train.rows(); ++i) scratch[i] = {row_distance2(train.row(i), q), i};
  const auto kk = std::min(k, scratch.size());
  std::partial_sort(scratch.begin(), scratch.begin() + static_cast<std::ptrdiff_t>(kk), scratch.end());
  std::vector<int> out(kk);
  for (std::size_t i = 0; i < kk; ++i) out[i] = labels[scratch[i].second];
  return out;
}

}  // namespace

namespace serial {

void squared_distances(const Matrix& points, std::span<const double> query, std::span<double> out) {
  check_width(points, query.size(), "squared_distances");
  for (std::size_t i = 0; i < points.rows(); ++i) out[i] = row_distance2(points.row(i), query);
}

void gaussian_weights(std::span<const double> dist2, double inv_two_h2, double cutoff, std::span<double> out) {
  for (std::size_t i = 0; i < dist2.size(); ++i) {
    const double e = dist2[i] * inv_two_h2;
    out[i] = e > cutoff ? 0.0 : std::exp(-e);
  }
}

void assign_nearest(const Matrix& data, const Matrix& centroids, std::span<std::size_t> labels,
                    std::span<double> dist2) {
  check_width(centroids, data.cols(), "assign_nearest");
  for (std::size_t i = 0; i < data.rows(); ++i) {
    double best = INFINITY;
    std::size_t arg = 0;
    for (std::size_t c = 0; c < centroids.rows(); ++c) {
      const double d = row_distance2(data.row(i), centroids.row(c));
      if (d < best) best = d, arg = c;
    }
    labels[i] = arg;
    dist2[i] = best;
  }
}

NeighbourLabels knn_labels(const Matrix& train, std::span<const int> train_labels, const Matrix& queries,
                           std::size_t k) {
  check_width(queries, train.cols(), "knn_labels");
  NeighbourLabels out(queries.rows());
  std::vector<std::pair<double, std::size_t>> scratch;
  for (std::size_t q = 0; q < queries.rows(); ++q)
    out[q] = nearest_labels(train, train_labels, queries.row(q), k, scratch);
  return out;
}

}  // namespace serial

namespace parallel {

void squared_distances(const Matrix& points, std::span<const double> query, std::span<double> out) {
  check_width(points, query.size(), "squared_distances");
  const auto n = static_cast<long long>(points.rows());
#pragma omp parallel for schedule(static)
  for (long long i = 0; i < n; ++i)
    out[static_cast<std::size_t>(i)] = row_distance2(points.row(static_cast<std::size_t>(i)), query);
}

void gaussian_weights(std::span<const double> dist2, double inv_two_h2, double cutoff, std::span<double> out) {
  const auto n = static_cast<long long>(dist2.size());
#pragma omp parallel for schedule(static)
  for (long long i = 0; i < n; ++i) {
    const double e = dist2[static_cast<std::size_t>(i)] * inv_two_h2;
    out[static_cast<std::size_t>(i)] = e > cutoff ? 0.0 : std::exp(-e);
  }
}

void assign_nearest(const Matrix& data, const Matrix& centroids, std::span<std::size_t> labels,
                    std::span<double> dist2) {
  check_width(centroids, data.cols(), "assign_nearest");
  const auto n = static_cast<long long>(data.rows());
#pragma omp parallel for schedule(static)
  for (long long ii = 0; ii < n; ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    double best = INFINITY;
    std::size_t arg = 0;
    for (std::size_t c = 0; c < centroids.rows(); ++c) {
      const double d = row_distance2(data.row(i), centroids.row(c));
      if (d < best) best = d, arg = c;
    }
    labels[i] = arg;
    dist2[i] = best;
  }
}

NeighbourLabels knn_labels(const Matrix& train, std::span<const int> train_labels, const Matrix& queries,
                           std::size_t k) {
  check_width(queries, train.cols(), "knn_labels");
  NeighbourLabels out(queries.rows());
  const auto n = static_cast<long long>(queries.rows());
#pragma omp parallel
  {
    std::vector<std::pair<double, std::size_t>> scratch;
#pragma omp for schedule(dynamic, 16)
    for (long long q = 0; q < n; ++q)
      out[static_cast<std::size_t>(q)] =
          nearest_labels(train, train_labels, queries.row(static_cast<std::size_t>(q)), k, scratch);
  }
  return out;
}

}  // namespace parallel
}  // namespace npepfn::kernels
