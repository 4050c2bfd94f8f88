#pragma once

// Data-parallel inner loops. Each kernel has a serial reference version and
// an OpenMP version; both produce bit-identical results (work is split over
// independent output elements, never over a reduction).

#include <cstddef>
#include <span>
#include <vector>

#include "npepfn/matrix.hpp"

namespace npepfn::kernels {

/// True when the library was built with OpenMP.
bool openmp_enabled() noexcept;
int max_threads() noexcept;

/// Neighbour lists returned by knn_labels: for every query, the labels of its
/// k nearest training rows ordered by (distance, row index).
using NeighbourLabels = std::vector<std::vector<int>>;

namespace serial {

/// out[i] = ||points.row(i) - query||^2
void squared_distances(const Matrix& points, std::span<const double> query, std::span<double> out);

/// out[i] = exp(-dist2[i] * inv_two_h2), zeroed when the exponent exceeds `cutoff`.
void gaussian_weights(std::span<const double> dist2, double inv_two_h2, double cutoff, std::span<double> out);

/// Nearest centroid per row (ties to the lower centroid index) and its squared distance.
void assign_nearest(const Matrix& data, const Matrix& centroids, std::span<std::size_t> labels,
                    std::span<double> dist2);

NeighbourLabels knn_labels(const Matrix& train, std::span<const int> train_labels, const Matrix& queries,
                           std::size_t k);

}  // namespace serial

namespace parallel {

void squared_distances(const Matrix& points, std::span<const double> query, std::span<double> out);
void gaussian_weights(std::span<const double> dist2, double inv_two_h2, double cutoff, std::span<double> out);
void assign_nearest(const Matrix& data, const Matrix& centroids, std::span<std::size_t> labels,
                    std::span<double> dist2);
NeighbourLabels knn_labels(const Matrix& train, std::span<const int> train_labels, const Matrix& queries,
                           std::size_t k);

}  // namespace parallel

/// Runs fn(i) for i in [0, n), across OpenMP threads when `use_threads` is set.
/// fn must only write state owned by index i.
template <typename Fn>
void for_each_index(std::size_t n, bool use_threads, Fn&& fn) {
  const auto count = static_cast<long long>(n);
  if (use_threads) {
#pragma omp parallel for schedule(dynamic, 4)
    for (long long i = 0; i < count; ++i) fn(static_cast<std::size_t>(i));
  } else {
    for (long long i = 0; i < count; ++i) fn(static_cast<std::size_t>(i));
  }
}

}  // namespace npepfn::kernels
