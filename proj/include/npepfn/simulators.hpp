#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "npepfn/dataset.hpp"
#include "npepfn/prior.hpp"
#include "npepfn/rng.hpp"

namespace npepfn {

/// Diagonal Gaussian posterior returned by conjugate oracles.
struct GaussianPosterior {
  std::vector<double> mean;
  std::vector<double> variance;

  Matrix sample(std::size_t n, Rng& rng) const;
  double log_density(std::span<const double> theta) const;
};

/// Simulator output; an invalid simulation is returned as all-NaN.
using Simulator = std::function<std::vector<double>(std::span<const double> theta, Rng& rng)>;
using PosteriorOracle = std::function<GaussianPosterior(std::span<const double> x_o)>;

struct TaskSpec {
  std::string name;
  std::size_t theta_dim = 0;
  std::size_t obs_dim = 0;
  PriorSpec prior;
  Simulator simulate;
  PosteriorOracle analytic_posterior;  // empty when no closed form exists

  bool has_analytic_posterior() const { return static_cast<bool>(analytic_posterior); }
};

// ---- benchmark tasks -------------------------------------------------------

/// theta ~ N(0, prior_var I), x ~ N(theta, noise_var I).
TaskSpec gaussian_linear_task(std::size_t dim = 10, double prior_var = 0.1, double noise_var = 0.1);

/// theta ~ U(-10, 10)^2, x ~ 0.5 N(theta, I) + 0.5 N(theta, 0.01 I).
TaskSpec gaussian_mixture_task();

/// theta ~ U(-1, 1)^2; crescent of radius ~N(0.1, 0.01^2) offset by 0.25 and
/// shifted by the rotated parameter.
TaskSpec two_moons_task();

/// Deterministic two-moons map for a fixed crescent angle and radius.
std::vector<double> two_moons_map(std::span<const double> theta, double angle, double radius);

struct SirConfig {
  double population = 1e6;
  double initial_infected = 1.0;
  double horizon = 160.0;
  std::size_t steps = 1000;
  std::size_t observations = 10;
  double scale = 1000.0;        // reported value = scale * I(t) / population
  double noise_sigma = 0.05;    // log-normal multiplicative noise
};

/// Noise-free infected fraction (times scale) at the observation times.
std::vector<double> sir_trajectory(double contact_rate, double recovery_rate, const SirConfig& cfg = {});

/// theta = (log contact rate, log recovery rate) with a Gaussian prior in log space.
TaskSpec sir_task(const SirConfig& cfg = {});

struct LotkaVolterraConfig {
  double prey0 = 30.0;
  double predator0 = 1.0;
  double horizon = 20.0;
  std::size_t steps = 1000;
  std::size_t observations = 10;  // per species
  double noise_sigma = 0.1;
};

struct LotkaVolterraRates {
  double prey_growth;      // alpha
  double predation;        // beta
  double predator_death;   // gamma
  double predator_growth;  // delta
};

/// Noise-free [prey(t_1..t_k), predator(t_1..t_k)]; non-finite on blow-up.
std::vector<double> lotka_volterra_trajectory(const LotkaVolterraRates& rates, const LotkaVolterraConfig& cfg = {});

/// theta = log rates with a Gaussian prior in log space.
TaskSpec lotka_volterra_task(const LotkaVolterraConfig& cfg = {});

// ---- order-ablation tasks ---------------------------------------------------

/// y1~N(x1,1), y2~N(sin(y1+x2),1), y3~N(y2^2+y1,1), y4~N(y1 y2+y3,1); x ~ N(0, I_2).
std::vector<double> nonlinear_sample(std::span<const double> x, Rng& rng);
double nonlinear_log_density(std::span<const double> x, std::span<const double> y);
TaskSpec nonlinear_task();

/// y1~Gamma(1+|x1|,1), y2~U(0, 2 y1+|x2|), y3~Beta(1+y1, 2+y2); x ~ U(-2,2)^2.
std::vector<double> mixed_sample(std::span<const double> x, Rng& rng);
TaskSpec mixed_task();

// ---- misspecification benchmark ---------------------------------------------

struct MisspecConfig {
  double mu_m = 0.0;      // prior mean shift
  double tau_m = 1.0;     // standard-deviation scale
  double lambda_m = 0.0;  // Beta(2,5) contamination fraction
  void validate() const;
};

enum class MisspecKind { Prior, Likelihood };

struct MisspecDraw {
  std::vector<double> mu;
  Matrix observations;  // n_obs x 2
};

/// Prior kind: mu ~ N(mu_m, tau_m^2 I), x_i ~ N(mu, I).
/// Likelihood kind: mu ~ N(0, I), x_i ~ Beta(2,5) w.p. lambda_m else N(mu, tau_m^2 I).
/// At (0, 1, 0) both reduce to the well-specified truth.
MisspecDraw misspecified_gaussian(std::uint64_t seed, const MisspecConfig& cfg, std::size_t n_obs,
                                  MisspecKind kind);

/// Well-specified conjugate posterior of mu given n observations with sample mean `mean`.
GaussianPosterior misspec_reference_posterior(std::span<const double> mean, std::size_t n_obs);

/// Task whose observation is the sample mean of n_obs draws.
TaskSpec misspecified_gaussian_task(const MisspecConfig& cfg = {}, std::size_t n_obs = 10,
                                    MisspecKind kind = MisspecKind::Likelihood);

// ---- registry and sampling ----------------------------------------------------

std::vector<std::string> task_names();
/// Throws Error for unknown names.
TaskSpec make_task(std::string_view name);

/// theta_i i.i.d. from the prior, x_i = simulate(theta_i). Row i uses child
/// streams derived from (seed, i), so results do not depend on threading.
SimulationDataset sample_joint(const TaskSpec& task, std::size_t n, std::uint64_t seed);

struct Observation {
  std::vector<double> theta;
  std::vector<double> x;
};

/// A ground-truth parameter from the prior and one simulated observation.
/// Invalid simulations are redrawn.
Observation draw_observation(const TaskSpec& task, std::uint64_t seed);

bool all_finite(std::span<const double> v);

}  // namespace npepfn
