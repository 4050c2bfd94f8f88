#pragma once

#include <cstdint>
#include <vector>

#include "npepfn/backend.hpp"
#include "npepfn/matrix.hpp"

namespace npepfn {

struct UnconditionalOptions {
  /// Noise-column draws averaged (in probability space) per density evaluation.
  std::size_t noise_draws = 8;
  std::size_t query_batch = 2048;
};

/// Density over d dimensions, modelled autoregressively after prepending a
/// standard-normal column to the data: x^1 | eps, x^2 | eps, x^1, ...
/// log_density averages the chain density over fresh noise draws
/// (log-mean-exp), seeded from the model seed so it is deterministic.
class UnconditionalModel {
 public:
  UnconditionalModel(const Matrix& data, std::uint64_t seed, InContextBackend& backend,
                     UnconditionalOptions options = {});

  std::size_t dim() const noexcept { return augmented_.cols() - 1; }
  std::size_t size() const noexcept { return augmented_.rows(); }
  /// Training data with the noise column first.
  const Matrix& augmented() const noexcept { return augmented_; }
  std::vector<double> log_density(const Matrix& points) const;
  Matrix sample(std::size_t n, std::uint64_t seed) const;

 private:
  ContextSet chain_context(std::size_t j) const;
  Matrix augmented_;
  std::uint64_t seed_;
  InContextBackend* backend_;
  UnconditionalOptions options_;
};

/// Requires N >= 2.
UnconditionalModel fit_unconditional(const Matrix& data, std::uint64_t seed, InContextBackend& backend,
                                     UnconditionalOptions options = {});

struct PartitionModel {
  Matrix centroids;                 // k x d, data units
  std::vector<std::size_t> labels;  // one per data row
  std::vector<double> weights;      // n_i / N
  std::size_t iterations = 0;
  bool converged = false;
  std::size_t k() const noexcept { return centroids.rows(); }
  std::vector<std::size_t> members(std::size_t cluster) const;
};

inline constexpr std::size_t kKmeansMaxIterations = 100;

/// Lloyd's algorithm on z-scored data with k-means++ seeding; stops when the
/// assignment is stable or after 100 iterations. A cluster that empties is
/// re-seeded at the point farthest from its centroid.
PartitionModel kmeans_partition(const Matrix& data, std::size_t k, std::uint64_t seed, bool use_threads = true);

/// p(x) = sum_i p(c_i) p(x | c_i), one UnconditionalModel per cluster.
/// Cluster i is fitted with seed derive_seed(seed, i).
class MixtureDensityModel {
 public:
  MixtureDensityModel(const Matrix& data, std::size_t k, std::uint64_t seed, InContextBackend& backend,
                      UnconditionalOptions options = {});

  const PartitionModel& partition() const noexcept { return partition_; }
  const std::vector<UnconditionalModel>& components() const noexcept { return components_; }
  std::vector<double> log_density(const Matrix& points) const;
  Matrix sample(std::size_t n, std::uint64_t seed) const;

 private:
  PartitionModel partition_;
  std::vector<UnconditionalModel> components_;
};

/// Weighted log-sum-exp of per-component log-densities (rows: components).
std::vector<double> mixture_log_density(std::span<const double> weights,
                                        const std::vector<std::vector<double>>& component_log_densities);

/// Mean negative log-density.
double mean_nll(std::span<const double> log_densities);

}  // namespace npepfn
