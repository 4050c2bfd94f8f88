#include "npepfn/unconditional.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "npepfn/errors.hpp"
#include "npepfn/kernels.hpp"
#include "npepfn/log.hpp"
#include "npepfn/standardize.hpp"

namespace npepfn {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double log_sum_exp(std::span<const double> v) {
  double m = kNegInf;
  for (double x : v) m = std::max(m, x);
  if (m == kNegInf) return kNegInf;
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

}  // namespace

UnconditionalModel::UnconditionalModel(const Matrix& data, std::uint64_t seed, InContextBackend& backend,
                                       UnconditionalOptions options)
    : seed_(seed), backend_(&backend), options_(options) {
  if (data.rows() < 2) throw Error("unconditional density needs at least 2 points");
  if (data.cols() < 1) throw Error("unconditional density needs at least 1 dimension");
  if (options_.noise_draws < 1) throw Error("noise_draws must be >= 1");
  check_soft_limits(backend.capabilities(), data.rows(), data.cols());
  augmented_ = Matrix(data.rows(), data.cols() + 1);
  Rng rng = make_rng(seed, 0);
  for (std::size_t i = 0; i < data.rows(); ++i) {
    auto dst = augmented_.row(i);
    dst[0] = standard_normal(rng);
    auto src = data.row(i);
    std::copy(src.begin(), src.end(), dst.begin() + 1);
  }
}

ContextSet UnconditionalModel::chain_context(std::size_t j) const {
  // Dimension j (1-based in augmented columns) conditions on columns [0, j).
  std::vector<std::size_t> cols(j);
  std::iota(cols.begin(), cols.end(), std::size_t{0});
  return ContextSet{augmented_.select_cols(cols), augmented_.column(j)};
}

std::vector<double> UnconditionalModel::log_density(const Matrix& points) const {
  if (points.cols() != dim()) throw ShapeError("point width does not match the model");
  const std::size_t n = points.rows();
  const std::size_t draws = options_.noise_draws;
  const std::size_t batch = std::max<std::size_t>(options_.query_batch, 1);
  // chain[t][i]: log-density of point i under noise draw t.
  std::vector<std::vector<double>> chain(draws, std::vector<double>(n, 0.0));
  Matrix queries(n * draws, dim() + 1);
  Rng rng = make_rng(seed_, 1);
  for (std::size_t t = 0; t < draws; ++t) {
    for (std::size_t i = 0; i < n; ++i) {
      auto q = queries.row(t * n + i);
      q[0] = standard_normal(rng);
      auto p = points.row(i);
      std::copy(p.begin(), p.end(), q.begin() + 1);
    }
  }
  for (std::size_t j = 1; j <= dim(); ++j) {
    const ContextSet ctx = chain_context(j);
    std::vector<std::size_t> cols(j);
    std::iota(cols.begin(), cols.end(), std::size_t{0});
    const Matrix feats = queries.select_cols(cols);
    std::vector<std::size_t> idx;
    for (std::size_t begin = 0; begin < feats.rows(); begin += batch) {
      const std::size_t end = std::min(feats.rows(), begin + batch);
      idx.resize(end - begin);
      std::iota(idx.begin(), idx.end(), begin);
      const auto preds = backend_->regress(ctx, feats.select_rows(idx), 0);
      for (std::size_t r = begin; r < end; ++r)
        chain[r / n][r % n] += preds[r - begin].log_density(queries(r, j));
    }
  }
  std::vector<double> out(n);
  std::vector<double> per_draw(draws);
  const double log_draws = std::log(static_cast<double>(draws));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t t = 0; t < draws; ++t) per_draw[t] = chain[t][i];
    out[i] = log_sum_exp(per_draw) - log_draws;
  }
  return out;
}

Matrix UnconditionalModel::sample(std::size_t n, std::uint64_t seed) const {
  Matrix z(n, dim() + 1);
  Rng noise = make_rng(seed, 0);
  for (std::size_t i = 0; i < n; ++i) z(i, 0) = standard_normal(noise);
  const std::size_t batch = std::max<std::size_t>(options_.query_batch, 1);
  for (std::size_t j = 1; j <= dim(); ++j) {
    const ContextSet ctx = chain_context(j);
    std::vector<std::size_t> cols(j);
    std::iota(cols.begin(), cols.end(), std::size_t{0});
    std::vector<std::size_t> idx;
    for (std::size_t begin = 0; begin < n; begin += batch) {
      const std::size_t end = std::min(n, begin + batch);
      idx.resize(end - begin);
      std::iota(idx.begin(), idx.end(), begin);
      const auto preds = backend_->regress(ctx, z.select_rows(idx).select_cols(cols), 0);
      for (std::size_t s = begin; s < end; ++s) {
        Rng rng(derive_seed(derive_seed(seed, j), s));
        z(s, j) = preds[s - begin].sample(rng);
      }
    }
  }
  std::vector<std::size_t> data_cols(dim());
  std::iota(data_cols.begin(), data_cols.end(), std::size_t{1});
  return z.select_cols(data_cols);
}

UnconditionalModel fit_unconditional(const Matrix& data, std::uint64_t seed, InContextBackend& backend,
                                     UnconditionalOptions options) {
  return UnconditionalModel(data, seed, backend, options);
}

std::vector<std::size_t> PartitionModel::members(std::size_t cluster) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] == cluster) out.push_back(i);
  return out;
}

PartitionModel kmeans_partition(const Matrix& data, std::size_t k, std::uint64_t seed, bool use_threads) {
  const std::size_t n = data.rows();
  if (k < 1) throw Error("k must be >= 1");
  if (k > n) throw Error("k must not exceed the number of points");
  const auto [z, stats] = standardize(data);
  const std::size_t d = z.cols();
  auto assign = [&](const Matrix& c, std::span<std::size_t> labels, std::span<double> dist2) {
    if (use_threads)
      kernels::parallel::assign_nearest(z, c, labels, dist2);
    else
      kernels::serial::assign_nearest(z, c, labels, dist2);
  };

  // k-means++ seeding.
  Rng rng = make_rng(seed, 0);
  Matrix centroids(0, d);
  centroids.append_row(z.row(static_cast<std::size_t>(rng() % n)));
  std::vector<double> nearest(n, std::numeric_limits<double>::infinity());
  std::vector<double> d2(n);
  while (centroids.rows() < k) {
    Matrix last(1, d);
    auto lr = centroids.row(centroids.rows() - 1);
    std::copy(lr.begin(), lr.end(), last.row(0).begin());
    std::vector<std::size_t> unused(n);
    assign(last, unused, d2);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      nearest[i] = std::min(nearest[i], d2[i]);
      total += nearest[i];
    }
    std::size_t pick = 0;
    if (total > 0.0) {
      const double u = uniform01(rng) * total;
      double acc = 0.0;
      pick = n - 1;
      for (std::size_t i = 0; i < n; ++i) {
        acc += nearest[i];
        if (acc > u) {
          pick = i;
          break;
        }
      }
    } else {
      pick = static_cast<std::size_t>(rng() % n);
    }
    centroids.append_row(z.row(pick));
  }

  PartitionModel model;
  std::vector<std::size_t> labels(n, k), next(n);
  for (std::size_t it = 1; it <= kKmeansMaxIterations; ++it) {
    assign(centroids, next, d2);
    model.iterations = it;
    if (next == labels) {
      model.converged = true;
      break;
    }
    labels = next;
    Matrix sums(k, d, 0.0);
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      auto row = z.row(i);
      auto s = sums.row(labels[i]);
      for (std::size_t c = 0; c < d; ++c) s[c] += row[c];
      ++counts[labels[i]];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) {
        const auto far = static_cast<std::size_t>(std::max_element(d2.begin(), d2.end()) - d2.begin());
        auto src = z.row(far);
        std::copy(src.begin(), src.end(), centroids.row(c).begin());
        d2[far] = 0.0;
        continue;
      }
      for (std::size_t col = 0; col < d; ++col) centroids(c, col) = sums(c, col) / static_cast<double>(counts[c]);
    }
  }
  if (!model.converged) labels = next;

  model.labels = labels;
  model.centroids = stats.invert(centroids);
  model.weights.assign(k, 0.0);
  for (auto l : labels) model.weights[l] += 1.0;
  for (auto& w : model.weights) w /= static_cast<double>(n);
  return model;
}

MixtureDensityModel::MixtureDensityModel(const Matrix& data, std::size_t k, std::uint64_t seed,
                                         InContextBackend& backend, UnconditionalOptions options)
    : partition_(kmeans_partition(data, k, seed)) {
  components_.reserve(k);
  for (std::size_t c = 0; c < k; ++c) {
    const auto rows = partition_.members(c);
    if (rows.size() < 2)
      throw Error("cluster " + std::to_string(c) + " has " + std::to_string(rows.size()) +
                  " point(s); each cluster needs at least 2");
    components_.emplace_back(data.select_rows(rows), derive_seed(seed, c), backend, options);
  }
}

std::vector<double> MixtureDensityModel::log_density(const Matrix& points) const {
  std::vector<std::vector<double>> per(components_.size());
  for (std::size_t c = 0; c < components_.size(); ++c) per[c] = components_[c].log_density(points);
  return mixture_log_density(partition_.weights, per);
}

Matrix MixtureDensityModel::sample(std::size_t n, std::uint64_t seed) const {
  const std::size_t k = components_.size();
  std::vector<double> cumulative(k);
  std::partial_sum(partition_.weights.begin(), partition_.weights.end(), cumulative.begin());
  Rng rng = make_rng(seed, 0);
  std::vector<std::vector<std::size_t>> slots(k);
  for (std::size_t s = 0; s < n; ++s) {
    const double u = uniform01(rng) * cumulative.back();
    auto c = static_cast<std::size_t>(std::upper_bound(cumulative.begin(), cumulative.end(), u) - cumulative.begin());
    slots[std::min(c, k - 1)].push_back(s);
  }
  Matrix out(n, components_.front().dim());
  for (std::size_t c = 0; c < k; ++c) {
    if (slots[c].empty()) continue;
    const Matrix draws = components_[c].sample(slots[c].size(), derive_seed(seed, c + 1));
    for (std::size_t t = 0; t < slots[c].size(); ++t) {
      auto src = draws.row(t);
      std::copy(src.begin(), src.end(), out.row(slots[c][t]).begin());
    }
  }
  return out;
}

std::vector<double> mixture_log_density(std::span<const double> weights,
                                        const std::vector<std::vector<double>>& component_log_densities) {
  if (weights.size() != component_log_densities.size()) throw ShapeError("one weight per component required");
  if (weights.empty()) throw Error("mixture needs at least one component");
  const std::size_t n = component_log_densities.front().size();
  std::vector<double> out(n);
  std::vector<double> terms(weights.size());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < weights.size(); ++c)
      terms[c] = weights[c] > 0.0 ? std::log(weights[c]) + component_log_densities[c][i] : kNegInf;
    out[i] = log_sum_exp(terms);
  }
  return out;
}

double mean_nll(std::span<const double> log_densities) {
  if (log_densities.empty()) throw Error("empty evaluation set");
  double s = 0.0;
  for (double v : log_densities) s -= v;
  return s / static_cast<double>(log_densities.size());
}

}  // namespace npepfn
