#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "npepfn/backend.hpp"
#include "npepfn/dataset.hpp"

namespace npepfn {

struct FilterConfig {
  std::size_t n_filter = 10000;
};

/// Order in which parameter dimensions are sampled.
class ArOrder {
 public:
  explicit ArOrder(std::vector<std::size_t> permutation);
  static ArOrder identity(std::size_t dim);
  static ArOrder random(std::size_t dim, std::uint64_t seed);
  /// "default" or "random:<seed>".
  static ArOrder parse(std::string_view spec, std::size_t dim);

  const std::vector<std::size_t>& permutation() const noexcept { return perm_; }
  std::size_t size() const noexcept { return perm_.size(); }
  std::size_t operator[](std::size_t j) const { return perm_[j]; }

 private:
  std::vector<std::size_t> perm_;
};

struct SampleProvenance {
  std::string task;
  std::vector<double> x_o;
  std::vector<std::size_t> order;
  std::size_t n_filter = 0;
  std::size_t context_rows = 0;
  std::uint64_t seed = 0;
  std::string backend;
};

struct PosteriorSampleSet {
  Matrix samples;
  SampleProvenance provenance;
};

/// Row indices (ascending) of the min(n_filter, N) valid rows closest to x_o in
/// feature-wise standardized space (statistics over all valid rows). Distance
/// ties go to the lower row index.
std::vector<std::size_t> filter_indices(const SimulationDataset& data, std::span<const double> x_o,
                                        const FilterConfig& config);

/// The rows picked by filter_indices; the valid part of the dataset unchanged
/// when n_filter covers it.
SimulationDataset filter_context(const SimulationDataset& data, std::span<const double> x_o,
                                 const FilterConfig& config);

struct NpeOptions {
  FilterConfig filter{};
  /// Queries per backend call.
  std::size_t query_batch = 2048;
  std::string task_name;
};

/// Regression context for dimension order[step]: features
/// [theta^{order[0..step)}, x], target theta^{order[step]}.
ContextSet autoregressive_context(const SimulationDataset& context, const ArOrder& order, std::size_t step);

/// Autoregressive posterior sampling: S chains advance one dimension per
/// backend pass, each pass drawing theta^j from q(theta^j | theta^{<j}, x_o, D^{<j}).
PosteriorSampleSet sample_posterior(const SimulationDataset& data, std::span<const double> x_o, std::size_t num_samples,
                                    const ArOrder& order, std::uint64_t seed, InContextBackend& backend,
                                    const NpeOptions& options = {});

struct LogProbResult {
  std::vector<double> values;
  /// True where some coordinate fell outside its predictive grid (value is -inf).
  std::vector<bool> outside_support;
};

/// sum_j log q(theta^j | theta^{<j}, x_o), one backend pass per dimension.
LogProbResult log_prob_autoregressive(const SimulationDataset& data, std::span<const double> x_o, const Matrix& thetas,
                                      const ArOrder& order, InContextBackend& backend, const NpeOptions& options = {});

}  // namespace npepfn
