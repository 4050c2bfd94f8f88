#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "npepfn/evaluation.hpp"
#include "npepfn/log.hpp"
#include "npepfn/reference_backend.hpp"
#include "npepfn/simulators.hpp"
#include "npepfn/tsnpe.hpp"

using namespace npepfn;

namespace {

/// Classifier that is certain every row is valid.
class AlwaysValidBackend final : public InContextBackend {
 public:
  BackendCapabilities capabilities() const override { return {}; }
  std::string describe() const override { return "always-valid"; }
  std::vector<PredictiveDistribution1D> regress(const ContextSet&, const Matrix&, std::uint64_t) override {
    return {};
  }
  ClassProbabilities classify(const ClassContext&, const Matrix& queries, std::uint64_t) override {
    ClassProbabilities out{{0, 1}, Matrix(queries.rows(), 2)};
    for (std::size_t q = 0; q < queries.rows(); ++q) out.probabilities(q, 1) = 1.0;
    return out;
  }
};

SimulationDataset planted_validity(std::size_t n, std::uint64_t seed) {
  const auto prior = PriorSpec::box_uniform({-1.0, -1.0}, {1.0, 1.0});
  Rng rng = make_rng(seed, 0);
  SimulationDataset d(2, 1);
  for (std::size_t i = 0; i < n; ++i) {
    const auto t = prior.sample(rng);
    const bool valid = t[0] > 0.0;
    const std::vector<double> x{valid ? t[1] : NAN};
    d.append(t, x, valid);
  }
  return d;
}

/// Two-dimensional Gaussian task whose simulator fails when theta_0 < -0.4.
TaskSpec planted_invalid_task() {
  TaskSpec t;
  t.name = "planted_invalid";
  t.theta_dim = 2;
  t.obs_dim = 2;
  t.prior = PriorSpec::box_uniform({-1.0, -1.0}, {1.0, 1.0});
  t.simulate = [](std::span<const double> theta, Rng& rng) {
    if (theta[0] < -0.4) return std::vector<double>(2, NAN);
    return std::vector<double>{theta[0] + 0.1 * standard_normal(rng), theta[1] + 0.1 * standard_normal(rng)};
  };
  return t;
}

}  // namespace

TEST_CASE("HDR threshold uses the lower empirical quantile") {
  const std::vector<double> v{5.0, 1.0, 4.0, 2.0, 3.0, NAN};
  CHECK(estimate_hdr_threshold(v, 0.0).k == 1.0);
  CHECK(estimate_hdr_threshold(v, 0.3).k == 2.0);
  CHECK(estimate_hdr_threshold(v, 0.5).k == 3.0);
  CHECK(estimate_hdr_threshold(v, 1e-9).k == 1.0);
  const std::vector<double> dead{-INFINITY, -INFINITY};
  CHECK_THROWS(estimate_hdr_threshold(dead, 0.1));
}

TEST_CASE("k = -inf is plain prior sampling and never scores") {
  const auto prior = PriorSpec::box_uniform({0.0}, {1.0});
  bool called = false;
  const BatchScorer scorer = [&](const Matrix& m) {
    called = true;
    return std::vector<double>(m.rows(), 0.0);
  };
  const auto res = truncated_prior_rejection_sample(prior, scorer, -INFINITY, 2000, 1);
  CHECK_FALSE(called);
  CHECK(res.samples.rows() == 2000);
  CHECK(res.proposals == 2000);
  Rng rng = make_rng(2, 0);
  const double acc = c2st(res.samples, prior.sample(2000, rng), 5, 3).accuracy;
  CHECK(acc > 0.45);
  CHECK(acc < 0.55);
}

TEST_CASE("truncated rejection keeps only the region above k") {
  const auto prior = PriorSpec::box_uniform({-1.0}, {1.0});
  const BatchScorer scorer = [](const Matrix& m) {
    std::vector<double> out(m.rows());
    for (std::size_t i = 0; i < m.rows(); ++i) out[i] = -m(i, 0) * m(i, 0);
    return out;
  };
  const auto res = truncated_prior_rejection_sample(prior, scorer, -0.25, 5000, 4);
  for (std::size_t i = 0; i < res.samples.rows(); ++i) CHECK(std::abs(res.samples(i, 0)) <= 0.5);
  CHECK(res.acceptance_rate() == doctest::Approx(0.5).epsilon(0.05));
  const auto again = truncated_prior_rejection_sample(prior, scorer, -0.25, 5000, 4);
  CHECK(again.samples == res.samples);
}

TEST_CASE("rejection aborts when the acceptance rate collapses") {
  const auto prior = PriorSpec::box_uniform({0.0}, {1.0});
  const BatchPredicate never = [](const Matrix& m) { return std::vector<bool>(m.rows(), false); };
  RejectionOptions opts;
  opts.probe_size = 5000;
  CHECK_THROWS_WITH(rejection_sample(prior, never, 10, 5, opts), doctest::Contains("acceptance"));
}

TEST_CASE("SIR with proposal equal to target keeps uniform weights") {
  const ProposalSampler proposal = [](std::size_t n, std::uint64_t seed) {
    Rng rng = make_rng(seed, 0);
    Matrix m(n, 1);
    for (auto& v : m.data()) v = standard_normal(rng);
    return m;
  };
  const BatchScorer log_density = [](const Matrix& m) {
    std::vector<double> out(m.rows());
    for (std::size_t i = 0; i < m.rows(); ++i) out[i] = -0.5 * m(i, 0) * m(i, 0);
    return out;
  };
  const auto res = sir_resample(proposal, log_density, log_density, 1000, 10, 6);
  CHECK(res.proposals == 10000);
  CHECK(res.effective_sample_size == doctest::Approx(10000.0));
  CHECK(res.samples.rows() == 1000);
  const BatchScorer zero = [](const Matrix& m) { return std::vector<double>(m.rows(), -INFINITY); };
  CHECK_THROWS(sir_resample(proposal, zero, 10, 10, 6));
}

TEST_CASE("restricted prior with an always-valid classifier is the prior") {
  AlwaysValidBackend backend;
  const auto data = planted_validity(200, 7);
  const RestrictedPrior rp(data, PriorSpec::box_uniform({-1.0, -1.0}, {1.0, 1.0}), 0.3, backend, 8);
  CHECK(rp.active());
  const auto res = rp.sample(1000, 9);
  CHECK(res.proposals == 1000);
}

TEST_CASE("restricted prior learns a planted validity rule") {
  ReferenceBackend backend;
  const auto data = planted_validity(1000, 10);
  const RestrictedPrior rp(data, PriorSpec::box_uniform({-1.0, -1.0}, {1.0, 1.0}), 0.3, backend, 11);
  const auto res = rp.sample(2000, 12);
  std::size_t ok = 0;
  for (std::size_t i = 0; i < res.samples.rows(); ++i) ok += res.samples(i, 0) > 0.0;
  CHECK(static_cast<double>(ok) / 2000.0 >= 0.95);
}

TEST_CASE("single-class validity data leaves the prior unrestricted") {
  ReferenceBackend backend;
  auto data = sample_joint(two_moons_task(), 100, 13);
  std::vector<std::string> warnings;
  auto old = set_warning_handler([&](const std::string& w) { warnings.push_back(w); });
  const RestrictedPrior rp(data, two_moons_task().prior, 0.3, backend, 14);
  set_warning_handler(old);
  CHECK_FALSE(rp.active());
  CHECK(warnings.size() == 1);
}

TEST_CASE("config validation") {
  TsnpeConfig c;
  CHECK_NOTHROW(c.validate());
  c.alpha = 1.0;
  CHECK_THROWS(c.validate());
  c = {};
  c.rounds = 0;
  CHECK_THROWS(c.validate());
  c = {};
  c.restricted_c = 1.5;
  CHECK_THROWS(c.validate());
}

TEST_CASE("one round is plain NPE on prior simulations") {
  ReferenceBackend backend;
  const auto task = two_moons_task();
  const std::vector<double> x_o{0.1, 0.0};
  TsnpeConfig cfg;
  cfg.rounds = 1;
  cfg.sims_per_round = 300;
  cfg.final_samples = 200;
  const auto res = run_tsnpe(task, cfg, x_o, 15, backend);
  CHECK(res.rounds.size() == 1);
  CHECK(res.acquisitions.empty());
  CHECK(std::isnan(res.rounds[0].hdr_threshold));
  CHECK(res.data.size() == 300);
  const auto npe = sample_posterior(res.data, x_o, 200, ArOrder::identity(2), tsnpe_round_seed(15, 1, kSeedPosterior),
                                    backend);
  CHECK(res.posterior.samples == npe.samples);
}

TEST_CASE("rounds add N_r simulations and every acquisition satisfies its predicate") {
  ReferenceBackend backend;
  const auto task = gaussian_linear_task(2);
  const auto obs = draw_observation(task, 16);
  TsnpeConfig cfg;
  cfg.rounds = 3;
  cfg.sims_per_round = 150;
  cfg.ratio_size = 500;
  cfg.final_samples = 300;
  const auto res = run_tsnpe(task, cfg, obs.x, 17, backend);
  REQUIRE_FALSE(res.failure);
  REQUIRE(res.rounds.size() == 3);
  for (std::size_t r = 0; r < 3; ++r) {
    CHECK(res.rounds[r].new_simulations == 150);
    CHECK(res.rounds[r].total_simulations == 150 * (r + 1));
  }
  CHECK(res.acquisitions.size() == 2);
  for (const auto& acq : res.acquisitions) {
    std::vector<std::size_t> rows(acq.count);
    for (std::size_t i = 0; i < acq.count; ++i) rows[i] = acq.first_row + i;
    const auto q = ratio_log_density(acq.estimator, res.data.thetas().select_rows(rows), backend);
    for (double v : q.values) CHECK(v >= acq.k);
    CHECK(res.rounds[acq.round - 1].hdr_threshold == acq.k);
  }
  CHECK(res.posterior.samples.rows() == 300);
}

TEST_CASE("SIR mode and the restricted prior run end to end") {
  ReferenceBackend backend;
  const auto task = planted_invalid_task();
  const std::vector<double> x_o{0.2, 0.3};
  TsnpeConfig cfg;
  cfg.rounds = 3;
  cfg.sims_per_round = 200;
  cfg.ratio_size = 400;
  cfg.final_samples = 200;
  cfg.mode = ProposalMode::Sir;
  cfg.sir_k = 5;
  cfg.restricted_c = 0.3;
  const auto res = run_tsnpe(task, cfg, x_o, 18, backend);
  REQUIRE_FALSE(res.failure);
  CHECK(res.rounds.size() == 3);
  CHECK(res.rounds[1].restricted_active);
  CHECK(res.rounds[1].proposals == 1000);
  CHECK(res.rounds[2].valid_fraction >= res.rounds[0].valid_fraction);
  CHECK(res.data.size() == 600);
}

TEST_CASE("a failing round keeps the earlier rounds") {
  ReferenceBackend backend;
  const auto task = gaussian_linear_task(2);
  const std::vector<double> x_o{0.0, 0.0};
  TsnpeConfig cfg;
  cfg.rounds = 3;
  cfg.sims_per_round = 100;
  cfg.ratio_size = 200;
  cfg.final_samples = 100;
  cfg.rejection.max_proposals = 50;
  cfg.rejection.min_batch = 16;
  const auto res = run_tsnpe(task, cfg, x_o, 19, backend);
  REQUIRE(res.failure);
  CHECK(res.failure->find("round 2") == 0);
  CHECK(res.rounds.size() == 1);
  CHECK(res.data.size() == 100);
  CHECK(res.posterior.samples.rows() == 100);
}

TEST_CASE("run_tsnpe is deterministic") {
  ReferenceBackend backend;
  const auto task = gaussian_linear_task(2);
  const std::vector<double> x_o{0.1, -0.2};
  TsnpeConfig cfg;
  cfg.rounds = 2;
  cfg.sims_per_round = 100;
  cfg.ratio_size = 200;
  cfg.final_samples = 100;
  const auto a = run_tsnpe(task, cfg, x_o, 20, backend);
  const auto b = run_tsnpe(task, cfg, x_o, 20, backend);
  CHECK(a.data == b.data);
  CHECK(a.posterior.samples == b.posterior.samples);
}
