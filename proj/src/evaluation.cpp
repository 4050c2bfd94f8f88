#include "npepfn/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "npepfn/errors.hpp"
#include "npepfn/kernels.hpp"

namespace npepfn {

namespace {

double euclidean(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    const double d = a[k] - b[k];
    s += d * d;
  }
  return std::sqrt(s);
}

}  // namespace

std::string KnnClassifier::describe() const {
  return k_ == 0 ? "knn(k=floor(sqrt(n)))" : "knn(k=" + std::to_string(k_) + ")";
}

std::vector<int> KnnClassifier::fit_predict(const Matrix& train, std::span<const int> labels,
                                            const Matrix& test) const {
  if (train.rows() != labels.size()) throw ShapeError("label count does not match training rows");
  if (train.empty()) throw Error("empty training set");
  std::size_t k = k_ == 0 ? static_cast<std::size_t>(std::floor(std::sqrt(static_cast<double>(train.rows())))) : k_;
  k = std::clamp<std::size_t>(k, 1, train.rows());
  const auto neighbours = use_threads_ ? kernels::parallel::knn_labels(train, labels, test, k)
                                       : kernels::serial::knn_labels(train, labels, test, k);
  std::vector<int> out(test.rows());
  for (std::size_t q = 0; q < test.rows(); ++q) {
    const auto& nb = neighbours[q];
    const auto ones = static_cast<std::size_t>(std::count(nb.begin(), nb.end(), 1));
    const std::size_t zeros = nb.size() - ones;
    out[q] = ones > zeros ? 1 : (zeros > ones ? 0 : nb.front());
  }
  return out;
}

C2stResult c2st(const Matrix& p, const Matrix& q, std::size_t folds, std::uint64_t seed,
                const TwoSampleClassifier* classifier) {
  if (p.empty() || q.empty()) throw Error("c2st needs two non-empty sample sets");
  if (p.cols() != q.cols()) throw ShapeError("c2st sample sets differ in dimensionality");
  const std::size_t n = p.rows() + q.rows();
  if (folds < 2 || folds > n) throw Error("c2st fold count must be in [2, n]");
  KnnClassifier knn;
  const TwoSampleClassifier& clf = classifier != nullptr ? *classifier : knn;

  Matrix pooled(n, p.cols());
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    const bool from_q = i >= p.rows();
    auto src = from_q ? q.row(i - p.rows()) : p.row(i);
    std::copy(src.begin(), src.end(), pooled.row(i).begin());
    labels[i] = from_q ? 1 : 0;
  }
  pooled = standardize(pooled).first;

  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng = make_rng(seed, 0xc25ULL);
  for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[static_cast<std::size_t>(rng() % i)]);

  C2stResult res;
  res.folds = folds;
  res.classifier = clf.describe();
  std::size_t correct_total = 0;
  for (std::size_t f = 0; f < folds; ++f) {
    std::vector<std::size_t> train_rows, test_rows;
    for (std::size_t k = 0; k < n; ++k) (k % folds == f ? test_rows : train_rows).push_back(perm[k]);
    std::vector<int> train_labels(train_rows.size());
    for (std::size_t k = 0; k < train_rows.size(); ++k) train_labels[k] = labels[train_rows[k]];
    const auto pred = clf.fit_predict(pooled.select_rows(train_rows), train_labels, pooled.select_rows(test_rows));
    std::size_t correct = 0;
    for (std::size_t k = 0; k < test_rows.size(); ++k) correct += pred[k] == labels[test_rows[k]] ? 1 : 0;
    correct_total += correct;
    res.fold_accuracies.push_back(static_cast<double>(correct) / static_cast<double>(test_rows.size()));
  }
  res.accuracy = static_cast<double>(correct_total) / static_cast<double>(n);
  return res;
}

std::size_t sbc_rank(double truth, std::span<const double> samples, Rng& rng) {
  std::size_t less = 0, equal = 0;
  for (double s : samples) {
    if (s < truth)
      ++less;
    else if (s == truth)
      ++equal;
  }
  if (equal == 0) return less;
  return less + static_cast<std::size_t>(rng() % (equal + 1));
}

SbcResult sbc_from_ranks(std::vector<std::vector<std::size_t>> ranks, std::size_t num_posterior_samples,
                         std::uint64_t seed, std::size_t levels) {
  if (ranks.empty()) throw Error("sbc needs at least one dataset");
  if (levels < 2) throw Error("sbc needs at least two credibility levels");
  const std::size_t dim = ranks.front().size();
  const std::size_t n = ranks.size();
  SbcResult res;
  res.num_posterior_samples = num_posterior_samples;
  res.levels.resize(levels);
  for (std::size_t k = 0; k < levels; ++k) res.levels[k] = static_cast<double>(k) / static_cast<double>(levels - 1);
  res.curves = Matrix(dim, levels);
  res.eod_per_dim.assign(dim, 0.0);

  Rng rng = make_rng(seed, 0x5bcULL);
  Matrix pit(n, dim);
  const double denom = static_cast<double>(num_posterior_samples + 1);
  for (std::size_t i = 0; i < n; ++i) {
    if (ranks[i].size() != dim) throw ShapeError("ragged sbc ranks");
    for (std::size_t j = 0; j < dim; ++j) {
      if (ranks[i][j] > num_posterior_samples) throw Error("sbc rank out of range");
      pit(i, j) = (static_cast<double>(ranks[i][j]) + uniform01(rng)) / denom;
    }
  }
  for (std::size_t j = 0; j < dim; ++j) {
    auto u = pit.column(j);
    std::sort(u.begin(), u.end());
    double dev = 0.0;
    for (std::size_t k = 0; k < levels; ++k) {
      const double level = res.levels[k];
      const auto below = static_cast<double>(std::upper_bound(u.begin(), u.end(), level) - u.begin());
      res.curves(j, k) = below / static_cast<double>(n);
      dev += std::abs(res.curves(j, k) - level);
    }
    res.eod_per_dim[j] = dev / static_cast<double>(levels);
  }
  res.eod = std::accumulate(res.eod_per_dim.begin(), res.eod_per_dim.end(), 0.0) / static_cast<double>(dim);
  res.ranks = std::move(ranks);
  return res;
}

SbcResult sbc(const PriorSpec& prior, const Simulator& simulator, const SbcSampler& sampler,
              std::size_t num_datasets, std::size_t num_posterior_samples, std::uint64_t seed, std::size_t levels) {
  if (num_posterior_samples < 10) throw Error("sbc needs at least 10 posterior samples per dataset");
  if (num_datasets < 1) throw Error("sbc needs at least one dataset");
  std::vector<std::vector<std::size_t>> ranks(num_datasets);
  for (std::size_t i = 0; i < num_datasets; ++i) {
    Rng prior_rng = make_rng(seed, 3 * i);
    Rng sim_rng = make_rng(seed, 3 * i + 1);
    const auto theta = prior.sample(prior_rng);
    const auto x = simulator(theta, sim_rng);
    const Matrix post = sampler(x, num_posterior_samples, derive_seed(seed, 3 * i + 2));
    if (post.rows() != num_posterior_samples || post.cols() != theta.size())
      throw ShapeError("sbc sampler returned the wrong shape");
    Rng tie_rng = make_rng(seed, 0x7135ULL + i);
    ranks[i].resize(theta.size());
    for (std::size_t j = 0; j < theta.size(); ++j) ranks[i][j] = sbc_rank(theta[j], post.column(j), tie_rng);
  }
  return sbc_from_ranks(std::move(ranks), num_posterior_samples, seed, levels);
}

double energy_score(const Matrix& samples, std::span<const double> x_o, const StandardizationStats* stats) {
  if (samples.rows() < 2) throw Error("energy score needs at least two samples");
  if (samples.cols() != x_o.size()) throw ShapeError("sample width does not match the observation");
  const Matrix s = stats != nullptr ? stats->apply(samples) : samples;
  const std::vector<double> xo = stats != nullptr ? stats->apply(x_o) : std::vector<double>(x_o.begin(), x_o.end());
  const std::size_t n = s.rows();
  double to_obs = 0.0;
  for (std::size_t i = 0; i < n; ++i) to_obs += euclidean(s.row(i), xo);
  std::vector<double> pair_row(n, 0.0);
  kernels::for_each_index(n, true, [&](std::size_t i) {
    double acc = 0.0;
    for (std::size_t j = i + 1; j < n; ++j) acc += euclidean(s.row(i), s.row(j));
    pair_row[i] = acc;
  });
  const double pairs = 2.0 * std::accumulate(pair_row.begin(), pair_row.end(), 0.0);
  const auto nd = static_cast<double>(n);
  return to_obs / nd - 0.5 * pairs / (nd * (nd - 1.0));
}

double predictive_distance(const Matrix& samples, std::span<const double> x_o, const StandardizationStats& stats) {
  if (samples.empty()) throw Error("predictive distance needs at least one sample");
  if (samples.cols() != x_o.size() || stats.dim() != x_o.size())
    throw ShapeError("sample width does not match the observation");
  const auto xo = stats.apply(x_o);
  const Matrix s = stats.apply(samples);
  double total = 0.0;
  for (std::size_t i = 0; i < s.rows(); ++i) total += euclidean(s.row(i), xo);
  return total / static_cast<double>(s.rows());
}

double distance_correlation_loss(std::span<const double> theta_distances, std::span<const double> embedding_distances) {
  if (theta_distances.size() != embedding_distances.size()) throw ShapeError("distance batches differ in length");
  if (theta_distances.empty()) throw Error("empty distance batch");
  double cross = 0.0, tt = 0.0, ee = 0.0;
  for (std::size_t i = 0; i < theta_distances.size(); ++i) {
    cross += theta_distances[i] * embedding_distances[i];
    tt += theta_distances[i] * theta_distances[i];
    ee += embedding_distances[i] * embedding_distances[i];
  }
  if (tt <= 0.0 || ee <= 0.0) throw Error("zero-variance distances");
  return cross / std::sqrt(tt * ee);
}

double distance_correlation_loss(const Matrix& theta_a, const Matrix& theta_b, const Matrix& e_a, const Matrix& e_b) {
  const std::size_t n = theta_a.rows();
  if (theta_b.rows() != n || e_a.rows() != n || e_b.rows() != n) throw ShapeError("pair batches differ in length");
  if (theta_a.cols() != theta_b.cols() || e_a.cols() != e_b.cols()) throw ShapeError("pair widths differ");
  std::vector<double> dt(n), de(n);
  for (std::size_t i = 0; i < n; ++i) {
    dt[i] = euclidean(theta_a.row(i), theta_b.row(i));
    de[i] = euclidean(e_a.row(i), e_b.row(i));
  }
  return distance_correlation_loss(dt, de);
}

}  // namespace npepfn
