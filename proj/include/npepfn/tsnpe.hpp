#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "npepfn/backend.hpp"
#include "npepfn/dataset.hpp"
#include "npepfn/npe.hpp"
#include "npepfn/prior.hpp"
#include "npepfn/ratio.hpp"
#include "npepfn/simulators.hpp"

namespace npepfn {

/// Scores a batch of parameter rows (one value per row).
using BatchScorer = std::function<std::vector<double>(const Matrix&)>;
/// Accept/reject decision per parameter row.
using BatchPredicate = std::function<std::vector<bool>(const Matrix&)>;
/// Draws n parameter rows from a proposal.
using ProposalSampler = std::function<Matrix(std::size_t n, std::uint64_t seed)>;

struct HdrThreshold {
  double k = 0.0;
};

/// Empirical alpha-quantile with lower interpolation: sorted[floor(alpha (n-1))].
/// NaNs are ignored; throws if nothing finite remains.
HdrThreshold estimate_hdr_threshold(std::span<const double> log_densities, double alpha);

struct RejectionOptions {
  /// Proposals after which the acceptance rate is checked against min_acceptance.
  std::size_t probe_size = 100000;
  double min_acceptance = 1e-6;
  std::size_t max_proposals = 50000000;
  std::size_t min_batch = 1024;
  std::size_t max_batch = 65536;
};

struct RejectionResult {
  Matrix samples;
  std::size_t proposals = 0;
  double acceptance_rate() const {
    return proposals == 0 ? 0.0 : static_cast<double>(samples.rows()) / static_cast<double>(proposals);
  }
};

/// Prior draws filtered by `accept` until n are kept. Batch b uses the stream
/// derived from (seed, b), so results do not depend on threading. Throws with
/// a diagnostic when the acceptance rate stays below min_acceptance.
RejectionResult rejection_sample(const PriorSpec& prior, const BatchPredicate& accept, std::size_t n,
                                 std::uint64_t seed, const RejectionOptions& options = {});

/// Prior truncated to {density_fn >= k}; k = -inf is plain prior sampling
/// and never calls density_fn.
RejectionResult truncated_prior_rejection_sample(const PriorSpec& prior, const BatchScorer& density_fn, double k,
                                                 std::size_t n, std::uint64_t seed,
                                                 const RejectionOptions& options = {});

struct SirResult {
  Matrix samples;
  std::size_t proposals = 0;
  /// Kish effective sample size of the normalised weights.
  double effective_sample_size = 0.0;
};

/// Draws K n proposals, weights them by exp(log_weight), resamples n with
/// replacement. Throws when every weight is zero.
SirResult sir_resample(const ProposalSampler& proposal, const BatchScorer& log_weight, std::size_t n, std::size_t k,
                       std::uint64_t seed);

/// Weights w = p~(theta) / q(theta) from target and proposal log-densities.
SirResult sir_resample(const ProposalSampler& proposal, const BatchScorer& log_target, const BatchScorer& log_proposal,
                       std::size_t n, std::size_t k, std::uint64_t seed);

inline constexpr double kDefaultValidityThreshold = 0.3;
inline constexpr std::size_t kDefaultValidityContext = 5000;

/// Prior restricted to {P(valid | theta) > c}, P from a classifier whose
/// context is the validity dataset (a seeded random subset when larger than
/// max_context). Single-class data leaves the prior unrestricted, with a warning.
class RestrictedPrior {
 public:
  RestrictedPrior(const SimulationDataset& validity_data, PriorSpec prior, double c, InContextBackend& backend,
                  std::uint64_t seed, std::size_t max_context = kDefaultValidityContext);

  bool active() const noexcept { return active_; }
  double threshold() const noexcept { return c_; }
  const PriorSpec& prior() const noexcept { return prior_; }
  const ClassContext& context() const noexcept { return context_; }
  std::vector<double> validity(const Matrix& thetas) const;
  std::vector<bool> accepts(const Matrix& thetas) const;
  RejectionResult sample(std::size_t n, std::uint64_t seed, const RejectionOptions& options = {}) const;

 private:
  PriorSpec prior_;
  double c_;
  InContextBackend* backend_;
  ClassContext context_;
  bool active_ = false;
};

enum class ProposalMode { Rejection, Sir };

struct TsnpeConfig {
  std::size_t rounds = 10;
  std::size_t sims_per_round = 1000;
  double alpha = 1e-3;
  std::size_t ratio_size = kDefaultRatioSize;
  ProposalMode mode = ProposalMode::Rejection;
  std::size_t sir_k = 10;
  std::optional<double> restricted_c;
  std::size_t restricted_context = kDefaultValidityContext;
  FilterConfig filter{};
  std::string order = "default";
  std::size_t final_samples = 1000;
  /// Posterior-predictive simulations per round for the energy score.
  std::size_t predictive_samples = 200;
  RejectionOptions rejection{};
  void validate() const;
};

struct RoundMetrics {
  std::size_t round = 0;
  std::size_t new_simulations = 0;
  std::size_t total_simulations = 0;
  /// Proposals examined to acquire this round's parameters (rejection or SIR).
  std::size_t proposals = 0;
  double acceptance_rate = 1.0;
  double valid_fraction = 0.0;
  /// NaN in round 1 (no truncation).
  double hdr_threshold = 0.0;
  std::size_t ratio_excluded = 0;
  bool restricted_active = false;
  std::vector<double> posterior_mean;
  /// NaN when fewer than two posterior-predictive simulations were valid.
  double energy_score = 0.0;
  double predictive_valid_fraction = 0.0;
};

/// What each truncated round acquired and the predicate it had to satisfy.
struct AcquisitionRecord {
  std::size_t round = 0;
  std::size_t first_row = 0;
  std::size_t count = 0;
  RatioEstimator estimator;
  double k = 0.0;
};

struct TsnpeResult {
  SimulationDataset data;
  PosteriorSampleSet posterior;
  std::vector<RoundMetrics> rounds;
  std::vector<AcquisitionRecord> acquisitions;
  /// Set when a round failed; earlier rounds are kept.
  std::optional<std::string> failure;
};

/// Seeds used by run_tsnpe (exposed so callers can reproduce pieces of a run).
std::uint64_t tsnpe_round_seed(std::uint64_t seed, std::size_t round, std::uint64_t purpose);
enum TsnpeSeedPurpose : std::uint64_t {
  kSeedSimulate = 1,
  kSeedPosterior = 2,
  kSeedRatio = 3,
  kSeedAcquire = 4,
  kSeedRestricted = 5,
  kSeedPredictive = 6,
};

/// Round 1 simulates N_r prior draws and samples the posterior. Every later
/// round builds a ratio estimator from the previous posterior, sets k_alpha,
/// acquires N_r parameters from the truncated prior (rejection before
/// simulation, or SIR from the posterior) and re-samples the posterior, so
/// R rounds spend R N_r simulations and R = 1 is plain NPE.
TsnpeResult run_tsnpe(const TaskSpec& task, const TsnpeConfig& config, std::span<const double> x_o,
                      std::uint64_t seed, InContextBackend& backend);

}  // namespace npepfn
