#include "npepfn/simulators.hpp"

#include <array>
#include <cmath>
#include <numbers>

#include "npepfn/errors.hpp"
#include "npepfn/kernels.hpp"

namespace npepfn {
namespace {

constexpr double kLogTwoPi = 1.8378770664093454835606594728112;

double normal_logpdf(double x, double mean, double sd) {
  const double z = (x - mean) / sd;
  return -0.5 * z * z - std::log(sd) - 0.5 * kLogTwoPi;
}

std::vector<double> invalid_output(std::size_t n) { return std::vector<double>(n, std::nan("")); }

double draw_gamma(double shape, double scale, Rng& rng) {
  return std::gamma_distribution<double>(shape, scale)(rng);
}

double draw_beta(double a, double b, Rng& rng) {
  const double x = draw_gamma(a, 1.0, rng);
  const double y = draw_gamma(b, 1.0, rng);
  return x / (x + y);
}

/// Classic fixed-step RK4; `rhs(state, deriv)`.
template <std::size_t N, typename Rhs>
void rk4_step(std::array<double, N>& s, double dt, Rhs&& rhs) {
  std::array<double, N> k1, k2, k3, k4, tmp;
  rhs(s, k1);
  for (std::size_t i = 0; i < N; ++i) tmp[i] = s[i] + 0.5 * dt * k1[i];
  rhs(tmp, k2);
  for (std::size_t i = 0; i < N; ++i) tmp[i] = s[i] + 0.5 * dt * k2[i];
  rhs(tmp, k3);
  for (std::size_t i = 0; i < N; ++i) tmp[i] = s[i] + dt * k3[i];
  rhs(tmp, k4);
  for (std::size_t i = 0; i < N; ++i) s[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
}

/// Step indices at which the k observations are taken (evenly spaced, last at the horizon).
std::vector<std::size_t> observation_steps(std::size_t steps, std::size_t observations) {
  if (observations == 0 || steps % observations != 0)
    throw Error("simulator: steps must be a multiple of the observation count");
  std::vector<std::size_t> out(observations);
  for (std::size_t k = 0; k < observations; ++k) out[k] = (k + 1) * (steps / observations);
  return out;
}

}  // namespace

bool all_finite(std::span<const double> v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

Matrix GaussianPosterior::sample(std::size_t n, Rng& rng) const {
  Matrix out(n, mean.size());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < mean.size(); ++j) out(i, j) = mean[j] + std::sqrt(variance[j]) * standard_normal(rng);
  return out;
}

double GaussianPosterior::log_density(std::span<const double> theta) const {
  double lp = 0.0;
  for (std::size_t j = 0; j < mean.size(); ++j) lp += normal_logpdf(theta[j], mean[j], std::sqrt(variance[j]));
  return lp;
}

// ---- Gaussian linear / mixture ------------------------------------------------

TaskSpec gaussian_linear_task(std::size_t dim, double prior_var, double noise_var) {
  TaskSpec t;
  t.name = "gaussian_linear";
  t.theta_dim = dim;
  t.obs_dim = dim;
  t.prior = PriorSpec::diagonal_gaussian(std::vector<double>(dim, 0.0), std::vector<double>(dim, std::sqrt(prior_var)));
  const double noise_sd = std::sqrt(noise_var);
  t.simulate = [noise_sd](std::span<const double> theta, Rng& rng) {
    std::vector<double> x(theta.begin(), theta.end());
    for (auto& v : x) v += noise_sd * standard_normal(rng);
    return x;
  };
  t.analytic_posterior = [prior_var, noise_var](std::span<const double> x_o) {
    const double precision = 1.0 / prior_var + 1.0 / noise_var;
    GaussianPosterior p;
    for (double x : x_o) {
      p.mean.push_back(x / noise_var / precision);
      p.variance.push_back(1.0 / precision);
    }
    return p;
  };
  return t;
}

TaskSpec gaussian_mixture_task() {
  TaskSpec t;
  t.name = "gaussian_mixture";
  t.theta_dim = 2;
  t.obs_dim = 2;
  t.prior = PriorSpec::box_uniform({-10.0, -10.0}, {10.0, 10.0});
  t.simulate = [](std::span<const double> theta, Rng& rng) {
    const double sd = uniform01(rng) < 0.5 ? 1.0 : 0.1;
    std::vector<double> x(theta.begin(), theta.end());
    for (auto& v : x) v += sd * standard_normal(rng);
    return x;
  };
  return t;
}

// ---- Two moons -------------------------------------------------------------------

std::vector<double> two_moons_map(std::span<const double> theta, double angle, double radius) {
  const double px = radius * std::cos(angle) + 0.25;
  const double py = radius * std::sin(angle);
  return {px - std::abs(theta[0] + theta[1]) / std::numbers::sqrt2, py + (-theta[0] + theta[1]) / std::numbers::sqrt2};
}

TaskSpec two_moons_task() {
  TaskSpec t;
  t.name = "two_moons";
  t.theta_dim = 2;
  t.obs_dim = 2;
  t.prior = PriorSpec::box_uniform({-1.0, -1.0}, {1.0, 1.0});
  t.simulate = [](std::span<const double> theta, Rng& rng) {
    const double angle = std::numbers::pi * (uniform01(rng) - 0.5);
    const double radius = 0.1 + 0.01 * standard_normal(rng);
    return two_moons_map(theta, angle, radius);
  };
  return t;
}

// ---- SIR -------------------------------------------------------------------------------

std::vector<double> sir_trajectory(double contact_rate, double recovery_rate, const SirConfig& cfg) {
  const auto obs_steps = observation_steps(cfg.steps, cfg.observations);
  const double n = cfg.population;
  std::array<double, 3> s{n - cfg.initial_infected, cfg.initial_infected, 0.0};
  const double dt = cfg.horizon / static_cast<double>(cfg.steps);
  auto rhs = [&](const std::array<double, 3>& y, std::array<double, 3>& d) {
    const double infection = contact_rate * y[0] * y[1] / n;
    const double recovery = recovery_rate * y[1];
    d = {-infection, infection - recovery, recovery};
  };
  std::vector<double> out;
  std::size_t next = 0;
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    rk4_step(s, dt, rhs);
    if (next < obs_steps.size() && step == obs_steps[next]) {
      out.push_back(cfg.scale * s[1] / n);
      ++next;
    }
  }
  return out;
}

TaskSpec sir_task(const SirConfig& cfg) {
  TaskSpec t;
  t.name = "sir";
  t.theta_dim = 2;
  t.obs_dim = cfg.observations;
  t.prior = PriorSpec::diagonal_gaussian({std::log(0.4), std::log(0.125)}, {0.5, 0.2});
  t.simulate = [cfg](std::span<const double> theta, Rng& rng) {
    auto x = sir_trajectory(std::exp(theta[0]), std::exp(theta[1]), cfg);
    if (!all_finite(x)) return invalid_output(x.size());
    for (auto& v : x) v *= std::exp(cfg.noise_sigma * standard_normal(rng));
    return x;
  };
  return t;
}

// ---- Lotka-Volterra ----------------------------------------------------------------

std::vector<double> lotka_volterra_trajectory(const LotkaVolterraRates& r, const LotkaVolterraConfig& cfg) {
  const auto obs_steps = observation_steps(cfg.steps, cfg.observations);
  std::array<double, 2> s{cfg.prey0, cfg.predator0};
  const double dt = cfg.horizon / static_cast<double>(cfg.steps);
  auto rhs = [&](const std::array<double, 2>& y, std::array<double, 2>& d) {
    d = {r.prey_growth * y[0] - r.predation * y[0] * y[1], -r.predator_death * y[1] + r.predator_growth * y[0] * y[1]};
  };
  std::vector<double> prey, predator;
  std::size_t next = 0;
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    rk4_step(s, dt, rhs);
    if (!std::isfinite(s[0]) || !std::isfinite(s[1])) return invalid_output(2 * cfg.observations);
    if (next < obs_steps.size() && step == obs_steps[next]) {
      prey.push_back(s[0]);
      predator.push_back(s[1]);
      ++next;
    }
  }
  prey.insert(prey.end(), predator.begin(), predator.end());
  return prey;
}

TaskSpec lotka_volterra_task(const LotkaVolterraConfig& cfg) {
  TaskSpec t;
  t.name = "lotka_volterra";
  t.theta_dim = 4;
  t.obs_dim = 2 * cfg.observations;
  t.prior = PriorSpec::diagonal_gaussian({-0.125, -3.0, -0.125, -3.0}, {0.5, 0.5, 0.5, 0.5});
  t.simulate = [cfg](std::span<const double> theta, Rng& rng) {
    const LotkaVolterraRates rates{std::exp(theta[0]), std::exp(theta[1]), std::exp(theta[2]), std::exp(theta[3])};
    auto x = lotka_volterra_trajectory(rates, cfg);
    if (!all_finite(x)) return x;
    for (auto& v : x) v *= std::exp(cfg.noise_sigma * standard_normal(rng));
    if (!all_finite(x)) return invalid_output(x.size());
    return x;
  };
  return t;
}

// ---- order-ablation tasks ------------------------------------------------------------

std::vector<double> nonlinear_sample(std::span<const double> x, Rng& rng) {
  const double y1 = x[0] + standard_normal(rng);
  const double y2 = std::sin(y1 + x[1]) + standard_normal(rng);
  const double y3 = y2 * y2 + y1 + standard_normal(rng);
  const double y4 = y1 * y2 + y3 + standard_normal(rng);
  return {y1, y2, y3, y4};
}

double nonlinear_log_density(std::span<const double> x, std::span<const double> y) {
  return normal_logpdf(y[0], x[0], 1.0) + normal_logpdf(y[1], std::sin(y[0] + x[1]), 1.0) +
         normal_logpdf(y[2], y[1] * y[1] + y[0], 1.0) + normal_logpdf(y[3], y[0] * y[1] + y[2], 1.0);
}

TaskSpec nonlinear_task() {
  TaskSpec t;
  t.name = "nonlinear";
  t.theta_dim = 2;
  t.obs_dim = 4;
  t.prior = PriorSpec::diagonal_gaussian({0.0, 0.0}, {1.0, 1.0});
  t.simulate = [](std::span<const double> theta, Rng& rng) { return nonlinear_sample(theta, rng); };
  return t;
}

std::vector<double> mixed_sample(std::span<const double> x, Rng& rng) {
  const double y1 = draw_gamma(1.0 + std::abs(x[0]), 1.0, rng);
  const double y2 = (2.0 * y1 + std::abs(x[1])) * uniform01(rng);
  const double y3 = draw_beta(1.0 + y1, 2.0 + y2, rng);
  return {y1, y2, y3};
}

TaskSpec mixed_task() {
  TaskSpec t;
  t.name = "mixed";
  t.theta_dim = 2;
  t.obs_dim = 3;
  t.prior = PriorSpec::box_uniform({-2.0, -2.0}, {2.0, 2.0});
  t.simulate = [](std::span<const double> theta, Rng& rng) { return mixed_sample(theta, rng); };
  return t;
}

// ---- misspecification ---------------------------------------------------------------------

void MisspecConfig::validate() const {
  if (!(tau_m > 0.0)) throw Error("misspecification: tau_m must be > 0");
  if (!(lambda_m >= 0.0 && lambda_m <= 1.0)) throw Error("misspecification: lambda_m must lie in [0, 1]");
}

namespace {

std::vector<double> misspec_prior_draw(const MisspecConfig& cfg, MisspecKind kind, Rng& rng) {
  std::vector<double> mu(2);
  for (auto& m : mu)
    m = kind == MisspecKind::Prior ? cfg.mu_m + cfg.tau_m * standard_normal(rng) : standard_normal(rng);
  return mu;
}

std::vector<double> misspec_obs_draw(std::span<const double> mu, const MisspecConfig& cfg, MisspecKind kind,
                                     Rng& rng) {
  std::vector<double> x(2);
  if (kind == MisspecKind::Likelihood && uniform01(rng) < cfg.lambda_m) {
    for (auto& v : x) v = draw_beta(2.0, 5.0, rng);
    return x;
  }
  const double sd = kind == MisspecKind::Likelihood ? cfg.tau_m : 1.0;
  for (std::size_t j = 0; j < 2; ++j) x[j] = mu[j] + sd * standard_normal(rng);
  return x;
}

}  // namespace

MisspecDraw misspecified_gaussian(std::uint64_t seed, const MisspecConfig& cfg, std::size_t n_obs, MisspecKind kind) {
  cfg.validate();
  Rng rng(derive_seed(seed, 0));
  MisspecDraw d;
  d.mu = misspec_prior_draw(cfg, kind, rng);
  d.observations = Matrix(0, 2);
  for (std::size_t i = 0; i < n_obs; ++i) d.observations.append_row(misspec_obs_draw(d.mu, cfg, kind, rng));
  return d;
}

GaussianPosterior misspec_reference_posterior(std::span<const double> mean, std::size_t n_obs) {
  const double n = static_cast<double>(n_obs);
  GaussianPosterior p;
  for (double m : mean) {
    p.mean.push_back(n * m / (n + 1.0));
    p.variance.push_back(1.0 / (n + 1.0));
  }
  return p;
}

TaskSpec misspecified_gaussian_task(const MisspecConfig& cfg, std::size_t n_obs, MisspecKind kind) {
  cfg.validate();
  if (n_obs == 0) throw Error("misspecification: n_obs must be >= 1");
  TaskSpec t;
  t.name = "misspecified_gaussian";
  t.theta_dim = 2;
  t.obs_dim = 2;
  t.prior = kind == MisspecKind::Prior
                ? PriorSpec::diagonal_gaussian({cfg.mu_m, cfg.mu_m}, {cfg.tau_m, cfg.tau_m})
                : PriorSpec::diagonal_gaussian({0.0, 0.0}, {1.0, 1.0});
  t.simulate = [cfg, n_obs, kind](std::span<const double> mu, Rng& rng) {
    std::vector<double> mean(2, 0.0);
    for (std::size_t i = 0; i < n_obs; ++i) {
      const auto x = misspec_obs_draw(mu, cfg, kind, rng);
      mean[0] += x[0] / static_cast<double>(n_obs);
      mean[1] += x[1] / static_cast<double>(n_obs);
    }
    return mean;
  };
  t.analytic_posterior = [n_obs](std::span<const double> x_o) { return misspec_reference_posterior(x_o, n_obs); };
  return t;
}

// ---- registry ------------------------------------------------------------------------------

std::vector<std::string> task_names() {
  return {"gaussian_linear", "gaussian_mixture", "two_moons", "sir", "lotka_volterra",
          "nonlinear",       "mixed",            "misspecified_gaussian"};
}

TaskSpec make_task(std::string_view name) {
  if (name == "gaussian_linear") return gaussian_linear_task();
  if (name == "gaussian_mixture") return gaussian_mixture_task();
  if (name == "two_moons") return two_moons_task();
  if (name == "sir") return sir_task();
  if (name == "lotka_volterra") return lotka_volterra_task();
  if (name == "nonlinear") return nonlinear_task();
  if (name == "mixed") return mixed_task();
  if (name == "misspecified_gaussian") return misspecified_gaussian_task();
  throw Error("unknown task '" + std::string(name) + "'");
}

SimulationDataset sample_joint(const TaskSpec& task, std::size_t n, std::uint64_t seed) {
  Matrix thetas(n, task.theta_dim), xs(n, task.obs_dim);
  std::vector<char> ok(n, 1);
  kernels::for_each_index(n, true, [&](std::size_t i) {
    Rng prior_rng(derive_seed(seed, 2 * i));
    Rng sim_rng(derive_seed(seed, 2 * i + 1));
    const auto theta = task.prior.sample(prior_rng);
    const auto x = task.simulate(theta, sim_rng);
    std::copy(theta.begin(), theta.end(), thetas.row(i).begin());
    std::copy(x.begin(), x.end(), xs.row(i).begin());
    ok[i] = all_finite(x) ? 1 : 0;
  });
  return SimulationDataset(std::move(thetas), std::move(xs), std::vector<bool>(ok.begin(), ok.end()));
}

Observation draw_observation(const TaskSpec& task, std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0x0b5e7ULL));
  for (int attempt = 0; attempt < 1000; ++attempt) {
    Observation o;
    o.theta = task.prior.sample(rng);
    o.x = task.simulate(o.theta, rng);
    if (all_finite(o.x)) return o;
  }
  throw Error("draw_observation: simulator produced no valid output in 1000 attempts");
}

}  // namespace npepfn
