#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "npepfn/matrix.hpp"
#include "npepfn/rng.hpp"

namespace npepfn {

/// Soft limits; exceeding them warns but does not fail.
struct BackendCapabilities {
  std::size_t max_context = 10000;
  std::size_t max_features = 500;
};

/// Regression context: M rows of features with one scalar target each.
struct ContextSet {
  Matrix features;
  std::vector<double> targets;
};

/// Classification context: M rows of features with an integer label each.
struct ClassContext {
  Matrix features;
  std::vector<int> labels;
};

/// Lower clamp for stored log-densities; exp() of it is exactly zero.
inline constexpr double kLogDensityFloor = -1000.0;

/// A 1-D density tabulated on a strictly increasing grid. Between grid points
/// the density is linear for CDF/quantile/sampling purposes, while
/// log_density() interpolates linearly in log space. The trapezoid integral
/// over the grid is 1.
class PredictiveDistribution1D {
 public:
  /// Normalises `log_density` (any additive constant; -inf allowed).
  PredictiveDistribution1D(std::vector<double> grid, std::vector<double> log_density);

  /// Accepts values that are already normalised (checked to 1e-6); no rescaling,
  /// so a distribution sent over the wire is reconstructed bit-exactly.
  static PredictiveDistribution1D from_normalized(std::vector<double> grid, std::vector<double> log_density);

  const std::vector<double>& grid() const noexcept { return grid_; }
  const std::vector<double>& log_density_values() const noexcept { return log_density_; }
  std::size_t size() const noexcept { return grid_.size(); }
  double lower() const noexcept { return grid_.front(); }
  double upper() const noexcept { return grid_.back(); }

  /// -infinity outside [lower, upper].
  double log_density(double y) const;
  double cdf(double y) const;
  double quantile(double u) const;
  double sample(Rng& rng) const;
  double mean() const;
  /// Trapezoid integral of the tabulated density (1 up to rounding).
  double total_mass() const;

  friend bool operator==(const PredictiveDistribution1D& a, const PredictiveDistribution1D& b) {
    return a.grid_ == b.grid_ && a.log_density_ == b.log_density_;
  }

 private:
  PredictiveDistribution1D() = default;
  void build_cdf();

  std::vector<double> grid_;
  std::vector<double> log_density_;
  std::vector<double> density_;
  std::vector<double> cumulative_;
};

/// Per-query class probabilities; columns follow `classes` (ascending labels).
struct ClassProbabilities {
  std::vector<int> classes;
  Matrix probabilities;

  /// Column of `label`; throws if absent.
  std::size_t column_of(int label) const;
};

/// An in-context conditional density estimator: each call is conditioned only
/// on the context passed with it.
class InContextBackend {
 public:
  virtual ~InContextBackend() = default;

  virtual BackendCapabilities capabilities() const = 0;
  virtual std::string describe() const = 0;

  /// One predictive density per query row. Query width must equal the
  /// context feature width; M >= 1.
  virtual std::vector<PredictiveDistribution1D> regress(const ContextSet& context, const Matrix& queries,
                                                        std::uint64_t seed) = 0;

  /// Requires at least two distinct labels in the context.
  virtual ClassProbabilities classify(const ClassContext& context, const Matrix& queries, std::uint64_t seed) = 0;
};

/// Shared argument checks used by every backend implementation.
void validate_regression_call(const ContextSet& context, const Matrix& queries);
void validate_classification_call(const ClassContext& context, const Matrix& queries);
/// Warns when the context exceeds the soft capability limits.
void check_soft_limits(const BackendCapabilities& caps, std::size_t context_rows, std::size_t feature_width);

}  // namespace npepfn
