#pragma once

#include <limits>
#include <list>
#include <memory>
#include <mutex>
#include <vector>

#include "npepfn/backend.hpp"
#include "npepfn/standardize.hpp"

namespace npepfn {

struct ReferenceBackendOptions {
  std::size_t grid_size = 512;
  /// Rows used for leave-one-out bandwidth selection.
  std::size_t validation_points = 100;
  /// Rows used for leave-one-out bandwidth selection of the classifier.
  std::size_t classifier_validation_points = 500;
  /// Rows used to estimate the median pairwise feature distance.
  std::size_t scale_subsample = 512;
  /// Candidate feature bandwidths as multiples of the median pairwise distance.
  std::vector<double> bandwidth_multipliers = {1.0 / 16, 1.0 / 8, 1.0 / 4, 1.0 / 2, 1.0, 2.0, 4.0,
                                               std::numeric_limits<double>::infinity()};
  /// Also try predictive densities built on linearly adjusted targets.
  bool regression_adjustment = true;
  /// Per-feature bandwidth factors for the classifier, picked by
  /// leave-one-out coordinate sweeps after the shared bandwidth.
  bool relevance_search = true;
  double laplace_alpha = 1.0;
  /// Fitted models kept per kind (least recently used evicted) and reused
  /// when the same context is passed again; 0 disables reuse.
  std::size_t cached_models = 8;
  bool use_threads = true;
  BackendCapabilities capabilities{};
};

/// Locally weighted kernel conditional density estimator fitted to one context.
///
/// Features are z-scored and rows weighted by exp(-|x_q - x_i|^2 / (2 h^2)),
/// h = c * (median pairwise distance). The predictive is a weighted Gaussian
/// KDE (weighted Silverman bandwidth, effective sample size) over either the
/// raw targets or regression-adjusted targets y_i - b.x_i + b.x_q, b being a
/// global ridge fit. c and the adjustment switch are picked by leave-one-out
/// predictive log-likelihood. Rows are put in a canonical order first so the
/// result does not depend on context row order.
class KernelRegressionModel {
 public:
  KernelRegressionModel(const ContextSet& context, const ReferenceBackendOptions& options);

  PredictiveDistribution1D predict(std::span<const double> query) const;

  double bandwidth_multiplier() const noexcept { return multiplier_; }
  bool adjusted() const noexcept { return adjust_; }
  double distance_scale() const noexcept { return scale_; }

 private:
  struct Weighted;
  double loo_score(double multiplier, bool adjust) const;
  Weighted weights_for(std::span<const double> zq, double multiplier, std::size_t exclude) const;

  const ReferenceBackendOptions* options_;
  StandardizationStats feature_stats_;
  double target_mean_ = 0.0;
  double target_std_ = 1.0;
  Matrix features_;               // standardized, canonical order
  std::vector<double> targets_;   // standardized
  std::vector<double> coef_;      // ridge coefficients on standardized features
  std::vector<double> residuals_;
  std::vector<std::size_t> by_target_;
  std::vector<std::size_t> by_residual_;
  std::vector<std::size_t> validation_;
  double scale_ = 1.0;
  double multiplier_ = 1.0;
  bool adjust_ = false;
};

/// Kernel-weighted label frequencies with Laplace smoothing. Features are
/// z-scored; the shared bandwidth is the widest candidate whose leave-one-out
/// log-loss is within one standard error of the best. Coordinate sweeps then
/// scale each feature's bandwidth by a factor in {1/4, 1/2, 1, 2, 4, inf}
/// (inf drops the feature), moving a factor only when the best beats the
/// current one by more than one standard error. Sweeps score only rows with
/// neighbour weight above the smoothing mass.
class KernelClassifierModel {
 public:
  KernelClassifierModel(const ClassContext& context, const ReferenceBackendOptions& options);
  std::vector<double> predict(std::span<const double> query) const;
  const std::vector<int>& classes() const noexcept { return classes_; }
  double bandwidth_multiplier() const noexcept { return multiplier_; }
  /// Per-feature bandwidth factors relative to the shared bandwidth.
  const std::vector<double>& relevance() const noexcept { return relevance_; }

 private:
  const ReferenceBackendOptions* options_;
  StandardizationStats feature_stats_;
  Matrix features_;
  std::vector<std::size_t> label_index_;
  std::vector<int> classes_;
  double scale_ = 1.0;
  double multiplier_ = 1.0;
  std::vector<double> relevance_;
  std::vector<double> inv_bw2_;  // per-feature 1 / h_j^2 in standardized units
};

/// Self-contained backend: deterministic, no external model.
class ReferenceBackend final : public InContextBackend {
 public:
  explicit ReferenceBackend(ReferenceBackendOptions options = {});

  BackendCapabilities capabilities() const override { return options_.capabilities; }
  std::string describe() const override { return "reference"; }
  std::vector<PredictiveDistribution1D> regress(const ContextSet& context, const Matrix& queries,
                                                std::uint64_t seed) override;
  ClassProbabilities classify(const ClassContext& context, const Matrix& queries, std::uint64_t seed) override;

  const ReferenceBackendOptions& options() const noexcept { return options_; }

 private:
  template <class Context, class Model>
  struct ModelCache {
    std::list<std::pair<Context, std::shared_ptr<const Model>>> entries;  // most recent first
  };
  template <class Context, class Model>
  std::shared_ptr<const Model> fitted(ModelCache<Context, Model>& cache, const Context& context);

  ReferenceBackendOptions options_;
  std::mutex cache_mutex_;
  ModelCache<ContextSet, KernelRegressionModel> regressors_;
  ModelCache<ClassContext, KernelClassifierModel> classifiers_;
};

/// Weighted Silverman rule 0.9 min(sd, IQR/1.34) n_eff^(-1/5), with `order`
/// sorting `values` ascending. Floored at `floor`.
double weighted_silverman_bandwidth(std::span<const double> values, std::span<const double> weights,
                                    std::span<const std::size_t> order, double floor);

/// Median pairwise Euclidean distance over an evenly strided subsample.
double median_pairwise_distance(const Matrix& points, std::size_t max_rows);

}  // namespace npepfn
