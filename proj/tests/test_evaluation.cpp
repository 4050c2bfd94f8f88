#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "doctest.h"
#include "npepfn/errors.hpp"
#include "npepfn/evaluation.hpp"
#include "npepfn/rng.hpp"

using namespace npepfn;

namespace {

Matrix normal_sample(std::size_t n, std::size_t d, double shift, std::uint64_t seed) {
  Rng rng = make_rng(seed, 0);
  Matrix m(n, d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) m(i, j) = shift + standard_normal(rng);
  return m;
}

double std_normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

/// E||Z|| for Z ~ N(0, I_d).
double chi_mean(std::size_t d) {
  const auto k = static_cast<double>(d);
  return std::numbers::sqrt2 * std::exp(std::lgamma((k + 1.0) / 2.0) - std::lgamma(k / 2.0));
}

/// Rotation by `angle` in the (0, 1) plane.
Matrix rotate(const Matrix& m, double angle) {
  Matrix out = m;
  const double c = std::cos(angle), s = std::sin(angle);
  for (std::size_t i = 0; i < m.rows(); ++i) {
    out(i, 0) = c * m(i, 0) - s * m(i, 1);
    out(i, 1) = s * m(i, 0) + c * m(i, 1);
  }
  return out;
}

/// theta ~ N(0, 1), x = theta + N(0, 1); posterior N(x / 2, 1 / 2).
Simulator unit_noise() {
  return [](std::span<const double> theta, Rng& rng) { return std::vector<double>{theta[0] + standard_normal(rng)}; };
}

SbcSampler gaussian_posterior_sampler(double std_scale) {
  return [std_scale](std::span<const double> x, std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    Matrix m(n, 1);
    const double sd = std::sqrt(0.5) * std_scale;
    for (std::size_t i = 0; i < n; ++i) m(i, 0) = 0.5 * x[0] + sd * standard_normal(rng);
    return m;
  };
}

}  // namespace

TEST_CASE("c2st on a split of one sample is at chance") {
  const Matrix all = normal_sample(2000, 2, 0.0, 1);
  std::vector<std::size_t> a(1000), b(1000);
  std::iota(a.begin(), a.end(), std::size_t{0});
  std::iota(b.begin(), b.end(), std::size_t{1000});
  const auto res = c2st(all.select_rows(a), all.select_rows(b), 5, 2);
  CHECK(res.accuracy >= 0.45);
  CHECK(res.accuracy <= 0.55);
  CHECK(res.folds == 5);
  CHECK(res.fold_accuracies.size() == 5);
  CHECK(res.classifier.find("knn") != std::string::npos);
}

TEST_CASE("c2st separates far-apart Gaussians") {
  const auto res = c2st(normal_sample(1000, 1, 0.0, 3), normal_sample(1000, 1, 10.0, 4), 5, 5);
  CHECK(res.accuracy >= 0.99);
}

TEST_CASE("c2st approaches the Bayes accuracy for a unit mean shift") {
  // Threshold at 1/2 is optimal for equal priors: accuracy Phi(1/2).
  const double bayes = std_normal_cdf(0.5);
  CHECK(bayes == doctest::Approx(0.6915).epsilon(1e-4));
  const auto res = c2st(normal_sample(5000, 1, 0.0, 6), normal_sample(5000, 1, 1.0, 7), 5, 8);
  CHECK(std::abs(res.accuracy - bayes) <= 0.05);
}

TEST_CASE("c2st is symmetric in its inputs") {
  const Matrix p = normal_sample(1500, 2, 0.0, 9), q = normal_sample(1500, 2, 0.4, 10);
  const double pq = c2st(p, q, 5, 11).accuracy;
  const double qp = c2st(q, p, 5, 11).accuracy;
  CHECK(std::abs(pq - qp) < 0.02);
}

TEST_CASE("c2st contract errors") {
  CHECK_THROWS_AS(c2st(Matrix(0, 1), normal_sample(10, 1, 0.0, 0)), Error);
  CHECK_THROWS_AS(c2st(normal_sample(10, 1, 0.0, 0), normal_sample(10, 2, 0.0, 1)), ShapeError);
  CHECK_THROWS_AS(c2st(normal_sample(10, 1, 0.0, 0), normal_sample(10, 1, 0.0, 1), 1), Error);
}

TEST_CASE("knn classifier breaks vote ties with the nearest neighbour") {
  const KnnClassifier knn(2, false);
  const Matrix train{{0.0}, {1.0}, {5.0}};
  const std::vector<int> labels{1, 0, 0};
  const auto pred = knn.fit_predict(train, labels, Matrix{{0.1}, {0.9}});
  CHECK(pred == std::vector<int>{1, 0});
}

TEST_CASE("sbc rank counts samples below and splits ties") {
  Rng rng = make_rng(12, 0);
  const std::vector<double> samples{0.0, 1.0, 1.0, 2.0};
  CHECK(sbc_rank(-1.0, samples, rng) == 0);
  CHECK(sbc_rank(3.0, samples, rng) == 4);
  CHECK(sbc_rank(1.5, samples, rng) == 3);
  std::vector<std::size_t> hits(5, 0);
  for (int t = 0; t < 3000; ++t) ++hits[sbc_rank(1.0, samples, rng)];
  CHECK(hits[0] == 0);
  CHECK(hits[4] == 0);
  for (std::size_t r = 1; r <= 3; ++r) CHECK(std::abs(static_cast<double>(hits[r]) - 1000.0) < 100.0);
}

TEST_CASE("sbc with the prior as posterior and an uninformative simulator is calibrated") {
  const auto prior = PriorSpec::box_uniform({-1.0, 0.0}, {1.0, 3.0});
  const Simulator ignore = [](std::span<const double>, Rng& rng) { return std::vector<double>{uniform01(rng)}; };
  const SbcSampler from_prior = [&](std::span<const double>, std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    return prior.sample(n, rng);
  };
  const auto res = sbc(prior, ignore, from_prior, 500, 100, 13);
  REQUIRE(res.ranks.size() == 500);
  for (const auto& r : res.ranks) {
    REQUIRE(r.size() == 2);
    CHECK(r[0] <= 100);
    CHECK(r[1] <= 100);
  }
  CHECK(res.levels.size() == kSbcLevels);
  CHECK(res.curves.rows() == 2);
  CHECK(res.eod >= 0.0);
  CHECK(res.eod < 0.02);
}

TEST_CASE("sbc flags an overconfident posterior") {
  const auto prior = PriorSpec::diagonal_gaussian({0.0}, {1.0});
  const auto calibrated = sbc(prior, unit_noise(), gaussian_posterior_sampler(1.0), 500, 100, 14);
  const auto narrow = sbc(prior, unit_noise(), gaussian_posterior_sampler(0.1), 500, 100, 14);
  CHECK(calibrated.eod < 0.03);
  CHECK(narrow.eod > 0.1);
  // U-shaped ranks: most truths fall outside the narrow posterior.
  std::size_t extreme = 0;
  for (const auto& r : narrow.ranks) extreme += r[0] <= 5 || r[0] >= 95;
  CHECK(extreme > 250);
}

TEST_CASE("sbc ranks are invariant to permuting posterior samples") {
  const auto prior = PriorSpec::diagonal_gaussian({0.0}, {1.0});
  const auto base = gaussian_posterior_sampler(1.0);
  const SbcSampler reversed = [&](std::span<const double> x, std::size_t n, std::uint64_t seed) {
    const Matrix m = base(x, n, seed);
    std::vector<std::size_t> idx(n);
    std::iota(idx.rbegin(), idx.rend(), std::size_t{0});
    return m.select_rows(idx);
  };
  const auto a = sbc(prior, unit_noise(), base, 100, 50, 15);
  const auto b = sbc(prior, unit_noise(), reversed, 100, 50, 15);
  CHECK(a.ranks == b.ranks);
  CHECK(a.eod == b.eod);
}

TEST_CASE("sbc contract errors") {
  const auto prior = PriorSpec::diagonal_gaussian({0.0}, {1.0});
  CHECK_THROWS_AS(sbc(prior, unit_noise(), gaussian_posterior_sampler(1.0), 10, 9, 0), Error);
  CHECK_THROWS_AS(sbc_from_ranks({{11}}, 10, 0), Error);
  CHECK_THROWS_AS(sbc_from_ranks({{1, 2}, {3}}, 10, 0), ShapeError);
}

TEST_CASE("energy score is zero when every sample equals the observation") {
  const std::vector<double> x_o{0.3, -1.2};
  Matrix s(10, 2);
  for (std::size_t i = 0; i < 10; ++i) {
    s(i, 0) = x_o[0];
    s(i, 1) = x_o[1];
  }
  CHECK(energy_score(s, x_o) == 0.0);
  CHECK_THROWS_AS(energy_score(Matrix{{0.3, -1.2}}, x_o), Error);
}

TEST_CASE("energy score of N(x_o, I) matches the Gaussian expectation") {
  for (std::size_t d : {1, 2, 3}) {
    const std::vector<double> x_o(d, 0.5);
    const Matrix s = normal_sample(2000, d, 0.5, 16 + d);
    // E||Z|| - 1/2 E||Z - Z'|| with Z - Z' ~ N(0, 2 I).
    const double expected = chi_mean(d) * (1.0 - 0.5 * std::numbers::sqrt2);
    CHECK(std::abs(energy_score(s, x_o) - expected) < 0.05);
  }
}

TEST_CASE("energy score grows as samples move away from the observation") {
  const std::vector<double> x_o{0.0, 0.0};
  const Matrix base = normal_sample(500, 2, 0.0, 20);
  double prev = energy_score(base, x_o);
  for (double delta : {0.5, 1.0, 2.0}) {
    Matrix shifted = base;
    for (std::size_t i = 0; i < shifted.rows(); ++i) shifted(i, 0) += delta;
    const double e = energy_score(shifted, x_o);
    CHECK(e > prev);
    prev = e;
  }
}

TEST_CASE("predictive distance examples") {
  const StandardizationStats identity{{0.0, 0.0}, {1.0, 1.0}};
  const std::vector<double> x_o{1.0, 2.0};
  CHECK(predictive_distance(Matrix{{1.0, 2.0}, {1.0, 2.0}}, x_o, identity) == 0.0);
  CHECK(predictive_distance(Matrix{{4.0, 6.0}}, x_o, identity) == doctest::Approx(5.0));
  CHECK_THROWS_AS(predictive_distance(Matrix(0, 2), x_o, identity), Error);
  CHECK_THROWS_AS(predictive_distance(Matrix{{1.0}}, x_o, identity), ShapeError);

  Rng rng = make_rng(21, 0);
  for (int c = 0; c < 10; ++c) {
    const std::size_t d = 1 + static_cast<std::size_t>(rng() % 4);
    StandardizationStats stats;
    std::vector<double> xo(d);
    for (std::size_t j = 0; j < d; ++j) {
      stats.mean.push_back(standard_normal(rng));
      stats.std.push_back(0.5 + uniform01(rng));
      xo[j] = standard_normal(rng);
    }
    const Matrix s = normal_sample(20, d, 0.0, 100 + c);
    double expected = 0.0;
    for (std::size_t i = 0; i < 20; ++i) {
      double sq = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double diff = (s(i, j) - stats.mean[j]) / stats.std[j] - (xo[j] - stats.mean[j]) / stats.std[j];
        sq += diff * diff;
      }
      expected += std::sqrt(sq) / 20.0;
    }
    CHECK(predictive_distance(s, xo, stats) == doctest::Approx(expected).epsilon(1e-12));
  }
}

TEST_CASE("energy score and predictive distance are rotation invariant") {
  const StandardizationStats identity{{0.0, 0.0}, {1.0, 1.0}};
  const Matrix s = normal_sample(300, 2, 0.7, 22);
  const Matrix x_o_m{{0.2, -0.4}};
  for (double angle : {0.3, 1.7, 4.0}) {
    const Matrix rs = rotate(s, angle);
    const Matrix rx = rotate(x_o_m, angle);
    CHECK(std::abs(energy_score(rs, rx.row(0)) - energy_score(s, x_o_m.row(0))) < 1e-10);
    CHECK(std::abs(predictive_distance(rs, rx.row(0), identity) - predictive_distance(s, x_o_m.row(0), identity)) <
          1e-10);
  }
}

TEST_CASE("distance correlation loss is one for identical distances") {
  const Matrix a = normal_sample(200, 3, 0.0, 23), b = normal_sample(200, 3, 0.0, 24);
  CHECK(distance_correlation_loss(a, b, a, b) == doctest::Approx(1.0).epsilon(1e-12));
  const std::vector<double> d{0.5, 1.0, 2.0};
  CHECK(distance_correlation_loss(d, d) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("distance correlation loss rejects zero-variance distances") {
  const Matrix a = normal_sample(50, 2, 0.0, 25), b = normal_sample(50, 2, 0.0, 26);
  const Matrix e(50, 4, 1.0);
  CHECK_THROWS_AS(distance_correlation_loss(a, b, e, e), Error);
  CHECK_THROWS_AS(distance_correlation_loss(std::vector<double>{1.0}, std::vector<double>{1.0, 2.0}), ShapeError);
}

TEST_CASE("distance correlation loss of independent embeddings matches Monte Carlo") {
  const std::size_t n = 4000;
  const Matrix ta = normal_sample(n, 5, 0.0, 27), tb = normal_sample(n, 5, 0.0, 28);
  const Matrix ea = normal_sample(n, 50, 0.0, 29), eb = normal_sample(n, 50, 0.0, 30);
  const double loss = distance_correlation_loss(ta, tb, ea, eb);
  // Independent distance moments from a separate large sample.
  Rng rng = make_rng(31, 0);
  auto moments = [&](std::size_t d) {
    double m1 = 0.0, m2 = 0.0;
    const std::size_t reps = 100000;
    for (std::size_t r = 0; r < reps; ++r) {
      double sq = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double z = standard_normal(rng) - standard_normal(rng);
        sq += z * z;
      }
      m1 += std::sqrt(sq) / static_cast<double>(reps);
      m2 += sq / static_cast<double>(reps);
    }
    return std::pair{m1, m2};
  };
  const auto [t1, t2] = moments(5);
  const auto [e1, e2] = moments(50);
  CHECK(std::abs(loss - t1 * e1 / std::sqrt(t2 * e2)) < 0.01);
}
