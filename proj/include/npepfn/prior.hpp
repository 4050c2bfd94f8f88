#pragma once

#include <span>
#include <vector>

#include "npepfn/matrix.hpp"
#include "npepfn/rng.hpp"

namespace npepfn {

/// Box-uniform or diagonal-Gaussian prior, plus the box [theta_min, theta_max]
/// used for uniform contrast samples. Gaussian priors default to mean +- 5 std.
class PriorSpec {
 public:
  enum class Kind { BoxUniform, DiagonalGaussian };

  /// Zero-dimensional prior; only useful as a placeholder.
  PriorSpec() = default;

  static PriorSpec box_uniform(std::vector<double> lo, std::vector<double> hi);
  static PriorSpec diagonal_gaussian(std::vector<double> mean, std::vector<double> std,
                                     double bound_sigmas = 5.0);

  Kind kind() const noexcept { return kind_; }
  std::size_t dim() const noexcept { return a_.size(); }

  /// lo (uniform) or mean (Gaussian).
  const std::vector<double>& first() const noexcept { return a_; }
  /// hi (uniform) or std (Gaussian).
  const std::vector<double>& second() const noexcept { return b_; }
  const std::vector<double>& theta_min() const noexcept { return min_; }
  const std::vector<double>& theta_max() const noexcept { return max_; }

  std::vector<double> sample(Rng& rng) const;
  Matrix sample(std::size_t n, Rng& rng) const;
  double log_density(std::span<const double> theta) const;
  bool in_bounds(std::span<const double> theta) const;

  /// Sum of log(theta_max - theta_min): minus the log density of the contrast uniform.
  double log_bounds_volume() const;

 private:
  PriorSpec(Kind kind, std::vector<double> a, std::vector<double> b,
            std::vector<double> lo, std::vector<double> hi);

  Kind kind_ = Kind::BoxUniform;
  std::vector<double> a_;
  std::vector<double> b_;
  std::vector<double> min_;
  std::vector<double> max_;
};

}  // namespace npepfn
