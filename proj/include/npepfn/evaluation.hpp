#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "npepfn/matrix.hpp"
#include "npepfn/prior.hpp"
#include "npepfn/simulators.hpp"
#include "npepfn/standardize.hpp"

namespace npepfn {

// ---- classifier two-sample test -------------------------------------------

/// Binary classifier used inside c2st; labels are 0/1.
class TwoSampleClassifier {
 public:
  virtual ~TwoSampleClassifier() = default;
  virtual std::string describe() const = 0;
  virtual std::vector<int> fit_predict(const Matrix& train, std::span<const int> labels, const Matrix& test) const = 0;
};

/// k-nearest-neighbour majority vote; k = floor(sqrt(training rows)) when
/// k is 0. Vote ties go to the label of the single nearest neighbour.
class KnnClassifier final : public TwoSampleClassifier {
 public:
  explicit KnnClassifier(std::size_t k = 0, bool use_threads = true) : k_(k), use_threads_(use_threads) {}
  std::string describe() const override;
  std::vector<int> fit_predict(const Matrix& train, std::span<const int> labels, const Matrix& test) const override;

 private:
  std::size_t k_;
  bool use_threads_;
};

struct C2stResult {
  double accuracy = 0.0;
  std::size_t folds = 0;
  std::string classifier;
  std::vector<double> fold_accuracies;
};

/// Cross-validated accuracy of telling `p` (label 0) from `q` (label 1) on the
/// pooled samples, z-scored with pooled statistics. Folds come from a seeded
/// shuffle. Uses KnnClassifier when `classifier` is null.
C2stResult c2st(const Matrix& p, const Matrix& q, std::size_t folds = 5, std::uint64_t seed = 0,
                const TwoSampleClassifier* classifier = nullptr);

// ---- simulation-based calibration -------------------------------------------

using SbcSampler = std::function<Matrix(std::span<const double> x, std::size_t num_samples, std::uint64_t seed)>;

struct SbcResult {
  std::size_t num_posterior_samples = 0;
  /// num_datasets x dim; each rank in [0, L].
  std::vector<std::vector<std::size_t>> ranks;
  /// Credibility levels at which the curves are evaluated.
  std::vector<double> levels;
  /// dim x levels: empirical CDF of the randomised PIT values.
  Matrix curves;
  std::vector<double> eod_per_dim;
  double eod = 0.0;
};

inline constexpr std::size_t kSbcLevels = 100;

/// Rank of `truth` among `samples`; ties are split uniformly at random.
std::size_t sbc_rank(double truth, std::span<const double> samples, Rng& rng);

/// Calibration curves and EoD from ranks. Each rank r out of L becomes
/// u = (r + V) / (L + 1), V ~ U(0,1), which is exactly uniform under calibration.
SbcResult sbc_from_ranks(std::vector<std::vector<std::size_t>> ranks, std::size_t num_posterior_samples,
                         std::uint64_t seed, std::size_t levels = kSbcLevels);

/// For each dataset: theta* ~ prior, x* = simulate(theta*), L posterior draws,
/// rank of theta*_j per dimension. Requires L >= 10.
SbcResult sbc(const PriorSpec& prior, const Simulator& simulator, const SbcSampler& sampler,
              std::size_t num_datasets, std::size_t num_posterior_samples, std::uint64_t seed,
              std::size_t levels = kSbcLevels);

// ---- predictive metrics -------------------------------------------------------

/// mean ||s_i - x_o|| - 1/2 mean_{i != j} ||s_i - s_j||, after z-scoring with
/// `stats` when given. Needs at least two samples.
double energy_score(const Matrix& samples, std::span<const double> x_o, const StandardizationStats* stats = nullptr);

/// mean ||standardize(s_i) - standardize(x_o)||.
double predictive_distance(const Matrix& samples, std::span<const double> x_o, const StandardizationStats& stats);

/// E[d_theta d_e] / sqrt(E[d_theta^2] E[d_e^2]) over paired distances.
double distance_correlation_loss(std::span<const double> theta_distances, std::span<const double> embedding_distances);

/// Same, with distances taken row-wise between (theta_a, theta_b) and (e_a, e_b).
double distance_correlation_loss(const Matrix& theta_a, const Matrix& theta_b, const Matrix& e_a, const Matrix& e_b);

}  // namespace npepfn
