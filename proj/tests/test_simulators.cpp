#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "npepfn/errors.hpp"
#include "npepfn/evaluation.hpp"
#include "npepfn/simulators.hpp"

using namespace npepfn;

TEST_CASE("task dimensions follow the benchmark table") {
  const std::vector<std::tuple<std::string, std::size_t, std::size_t>> expected = {
      {"gaussian_linear", 10, 10}, {"gaussian_mixture", 2, 2}, {"two_moons", 2, 2},
      {"sir", 2, 10},              {"lotka_volterra", 4, 20}};
  for (const auto& [name, dt, dx] : expected) {
    const auto task = make_task(name);
    CHECK(task.theta_dim == dt);
    CHECK(task.obs_dim == dx);
    CHECK(task.prior.dim() == dt);
  }
  CHECK_THROWS_AS(make_task("no_such_task"), Error);
}

TEST_CASE("every registered task simulates deterministically") {
  for (const auto& name : task_names()) {
    const auto task = make_task(name);
    const auto a = sample_joint(task, 20, 99);
    const auto b = sample_joint(task, 20, 99);
    CHECK_MESSAGE(a == b, name);
    CHECK(a.size() == 20);
  }
}

TEST_CASE("sample_joint with N = 0 is empty") {
  CHECK(sample_joint(gaussian_linear_task(), 0, 1).empty());
}

TEST_CASE("gaussian-linear theta means match the prior mean") {
  const auto d = sample_joint(gaussian_linear_task(), 10000, 5);
  const double se = std::sqrt(0.1 / 10000.0);
  for (double m : d.thetas().column_means()) CHECK(std::abs(m) < 3.0 * se);
}

TEST_CASE("gaussian-linear posterior is symmetric at the prior mean") {
  const auto task = gaussian_linear_task();
  const std::vector<double> x(10, 0.0);
  const auto post = task.analytic_posterior(x);
  for (std::size_t j = 0; j < 10; ++j) {
    CHECK(post.mean[j] == doctest::Approx(0.0));
    CHECK(post.variance[j] == doctest::Approx(0.05));
  }
}

TEST_CASE("gaussian-linear oracle matches rejection ABC") {
  // One-dimensional version so a tiny tolerance still accepts enough draws.
  const auto task = gaussian_linear_task(1);
  const std::vector<double> x_o{0.3};
  const auto post = task.analytic_posterior(x_o);
  Rng rng = make_rng(8, 0);
  std::vector<double> kept;
  while (kept.size() < 20000) {
    const auto theta = task.prior.sample(rng);
    const auto x = task.simulate(theta, rng);
    if (std::abs(x[0] - x_o[0]) < 0.01) kept.push_back(theta[0]);
  }
  double mean = 0.0, var = 0.0;
  for (double v : kept) mean += v;
  mean /= static_cast<double>(kept.size());
  for (double v : kept) var += (v - mean) * (v - mean);
  var /= static_cast<double>(kept.size());
  const double se = std::sqrt(post.variance[0] / static_cast<double>(kept.size()));
  CHECK(std::abs(mean - post.mean[0]) < 4.0 * se);
  CHECK(var == doctest::Approx(post.variance[0]).epsilon(0.05));
}

TEST_CASE("two moons at theta = 0 with the mean radius lies on the crescent midline") {
  const std::vector<double> theta{0.0, 0.0};
  for (double angle : {-1.0, 0.0, 0.7}) {
    const auto x = two_moons_map(theta, angle, 0.1);
    CHECK(x[0] == doctest::Approx(0.1 * std::cos(angle) + 0.25));
    CHECK(x[1] == doctest::Approx(0.1 * std::sin(angle)));
  }
}

TEST_CASE("two moons posterior is bimodal under rejection ABC") {
  const auto task = two_moons_task();
  const std::vector<double> x_o{0.0, 0.0};
  Rng rng = make_rng(12, 0);
  std::size_t pos = 0, total = 0;
  while (total < 2000) {
    const auto theta = task.prior.sample(rng);
    const auto x = task.simulate(theta, rng);
    if (std::hypot(x[0] - x_o[0], x[1] - x_o[1]) < 0.05) {
      ++total;
      // The two modes lie on opposite sides of theta_0 + theta_1 = 0.
      if (theta[0] + theta[1] > 0.0) ++pos;
    }
  }
  const double w = static_cast<double>(pos) / static_cast<double>(total);
  CHECK(w > 0.2);
  CHECK(w < 0.8);
}

TEST_CASE("misspecified gaussian: validation and supports") {
  CHECK_THROWS(MisspecConfig{0.0, 1.0, 1.5}.validate());
  CHECK_THROWS(MisspecConfig{0.0, 0.0, 0.0}.validate());
  const auto draw = misspecified_gaussian(3, {0.0, 1.0, 1.0}, 10000, MisspecKind::Likelihood);
  for (double v : draw.observations.data()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
}

TEST_CASE("misspecified gaussian at the well-specified point matches the truth") {
  Matrix a(1000, 2), b(1000, 2);
  Rng rng = make_rng(4, 0);
  for (std::size_t i = 0; i < 1000; ++i) {
    const auto d = misspecified_gaussian(derive_seed(4, i), {}, 1, MisspecKind::Prior);
    a(i, 0) = d.observations(0, 0);
    a(i, 1) = d.observations(0, 1);
    for (std::size_t j = 0; j < 2; ++j) b(i, j) = standard_normal(rng) + standard_normal(rng);
  }
  const auto res = c2st(a, b, 5, 1);
  CHECK(res.accuracy > 0.45);
  CHECK(res.accuracy < 0.55);
}

TEST_CASE("nonlinear task: first link mean and joint density") {
  Rng rng = make_rng(5, 0);
  const std::vector<double> x{0.8, -0.3};
  double mean = 0.0;
  for (int i = 0; i < 20000; ++i) mean += nonlinear_sample(x, rng)[0];
  CHECK(mean / 20000.0 == doctest::Approx(0.8).epsilon(0.03));
  const auto y = nonlinear_sample(x, rng);
  const auto lognorm = [](double v, double m) { return -0.5 * (v - m) * (v - m) - 0.5 * std::log(2 * M_PI); };
  const double expected = lognorm(y[0], x[0]) + lognorm(y[1], std::sin(y[0] + x[1])) +
                          lognorm(y[2], y[1] * y[1] + y[0]) + lognorm(y[3], y[0] * y[1] + y[2]);
  CHECK(nonlinear_log_density(x, y) == doctest::Approx(expected));
}

TEST_CASE("nonlinear task: E[y3 | x = 0] matches nested expectation") {
  // y3 = y2^2 + y1 + e, E[y3] = E[sin(y1)^2] + 1 with y1 ~ N(0,1).
  Rng rng = make_rng(6, 0);
  const std::vector<double> x{0.0, 0.0};
  double mc = 0.0, nested = 0.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    mc += nonlinear_sample(x, rng)[2];
    const double s = std::sin(standard_normal(rng));
    nested += s * s + 1.0;
  }
  CHECK(std::abs(mc / n - nested / n) < 0.03);
}

TEST_CASE("mixed task supports and Gamma mean") {
  Rng rng = make_rng(7, 0);
  const std::vector<double> x0{0.0, 0.5};
  double mean = 0.0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const auto y = mixed_sample(x0, rng);
    mean += y[0];
    CHECK(y[0] > 0.0);
    CHECK(y[1] >= 0.0);
    CHECK(y[1] <= 2.0 * y[0] + 0.5);
    CHECK(y[2] > 0.0);
    CHECK(y[2] < 1.0);
  }
  CHECK(std::abs(mean / n - 1.0) < 0.02);
}

TEST_CASE("SIR without contact has non-increasing infections") {
  const auto traj = sir_trajectory(0.0, 0.1);
  CHECK(traj.size() == 10);
  for (std::size_t t = 1; t < traj.size(); ++t) CHECK(traj[t] <= traj[t - 1]);
}

TEST_CASE("Lotka-Volterra without interaction grows prey exponentially") {
  LotkaVolterraConfig cfg;
  const auto traj = lotka_volterra_trajectory({0.2, 0.0, 0.5, 0.0}, cfg);
  CHECK(traj.size() == 20);
  for (std::size_t k = 0; k < cfg.observations; ++k) {
    const double t = cfg.horizon * static_cast<double>(k + 1) / static_cast<double>(cfg.observations);
    CHECK(traj[k] == doctest::Approx(cfg.prey0 * std::exp(0.2 * t)).epsilon(1e-6));
    CHECK(traj[cfg.observations + k] == doctest::Approx(cfg.predator0 * std::exp(-0.5 * t)).epsilon(1e-6));
  }
}

TEST_CASE("Lotka-Volterra blow-up is marked invalid") {
  const auto traj = lotka_volterra_trajectory({50.0, 0.0, 0.5, 0.0});
  CHECK_FALSE(all_finite(traj));
}
