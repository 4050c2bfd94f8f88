#pragma once

#include <cstdint>
#include <vector>

#include "npepfn/backend.hpp"

namespace npepfn {

/// Classifier context contrasting posterior samples (label 1) with uniform
/// samples on [theta_min, theta_max] (label 0). Its log-odds equal the
/// posterior log-density minus the uniform log-density on the box.
struct RatioEstimator {
  ClassContext context;
  std::vector<double> theta_min;
  std::vector<double> theta_max;
  /// -sum log(theta_max - theta_min); omitted from ratio_log_density.
  double log_uniform = 0.0;
  /// Posterior samples dropped because they fell outside the box.
  std::size_t excluded = 0;
};

inline constexpr std::size_t kDefaultRatioSize = 5000;
inline constexpr double kProbabilityClamp = 1e-6;

/// Uses the first M in-box posterior samples and M uniform samples drawn
/// from `seed`. Out-of-box samples are skipped with a warning; if fewer than
/// M remain, both classes shrink to the remaining count.
RatioEstimator build_ratio_estimator(const Matrix& posterior_samples, std::vector<double> theta_min,
                                     std::vector<double> theta_max, std::size_t m, std::uint64_t seed);

struct RatioDensities {
  std::vector<double> values;
  /// True where P(y=1) was clamped into [1e-6, 1 - 1e-6].
  std::vector<bool> clamped;
};

/// log P - log(1 - P), clamped; `clamped` is set when clamping applied.
double log_ratio_from_probability(double p, bool* clamped = nullptr);

/// Relative posterior log-density log P(y=1|theta) - log P(y=0|theta).
RatioDensities ratio_log_density(const RatioEstimator& estimator, const Matrix& thetas, InContextBackend& backend,
                                 std::size_t query_batch = 4096);

}  // namespace npepfn
