#include "npepfn/ratio.hpp"

#include <algorithm>
#include <cmath>

#include "npepfn/errors.hpp"
#include "npepfn/log.hpp"

namespace npepfn {

RatioEstimator build_ratio_estimator(const Matrix& posterior_samples, std::vector<double> theta_min,
                                     std::vector<double> theta_max, std::size_t m, std::uint64_t seed) {
  const std::size_t dim = posterior_samples.cols();
  if (theta_min.size() != dim || theta_max.size() != dim) throw ShapeError("bounds do not match sample width");
  if (m < 1) throw Error("ratio size must be >= 1");
  if (posterior_samples.rows() < m) throw Error("fewer posterior samples than the ratio size");
  double log_volume = 0.0;
  for (std::size_t j = 0; j < dim; ++j) {
    if (!std::isfinite(theta_min[j]) || !std::isfinite(theta_max[j]) || !(theta_min[j] < theta_max[j]))
      throw Error("ratio bounds must be finite with theta_min < theta_max");
    log_volume += std::log(theta_max[j] - theta_min[j]);
  }

  RatioEstimator est;
  est.log_uniform = -log_volume;
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < posterior_samples.rows() && rows.size() < m; ++i) {
    auto r = posterior_samples.row(i);
    bool inside = true;
    for (std::size_t j = 0; j < dim; ++j) inside = inside && r[j] >= theta_min[j] && r[j] <= theta_max[j];
    if (inside)
      rows.push_back(i);
    else
      ++est.excluded;
  }
  if (rows.empty()) throw Error("no posterior samples inside the ratio bounds");
  if (est.excluded > 0)
    warn("ratio estimator: " + std::to_string(est.excluded) + " posterior samples outside the bounds were excluded");

  const std::size_t per_class = rows.size();
  est.context.features = Matrix(2 * per_class, dim);
  est.context.labels.assign(2 * per_class, 0);
  for (std::size_t k = 0; k < per_class; ++k) {
    auto src = posterior_samples.row(rows[k]);
    std::copy(src.begin(), src.end(), est.context.features.row(k).begin());
    est.context.labels[k] = 1;
  }
  Rng rng = make_rng(seed, 0x0u);
  for (std::size_t k = 0; k < per_class; ++k) {
    auto dst = est.context.features.row(per_class + k);
    for (std::size_t j = 0; j < dim; ++j) dst[j] = theta_min[j] + (theta_max[j] - theta_min[j]) * uniform01(rng);
  }
  est.theta_min = std::move(theta_min);
  est.theta_max = std::move(theta_max);
  return est;
}

double log_ratio_from_probability(double p, bool* clamped) {
  const double q = std::clamp(p, kProbabilityClamp, 1.0 - kProbabilityClamp);
  if (clamped != nullptr) *clamped = q != p;
  return std::log(q) - std::log1p(-q);
}

RatioDensities ratio_log_density(const RatioEstimator& estimator, const Matrix& thetas, InContextBackend& backend,
                                 std::size_t query_batch) {
  if (thetas.cols() != estimator.theta_min.size()) throw ShapeError("theta width does not match the estimator");
  const std::size_t n = thetas.rows();
  RatioDensities out{std::vector<double>(n), std::vector<bool>(n, false)};
  const std::size_t batch = std::max<std::size_t>(query_batch, 1);
  std::vector<std::size_t> idx;
  for (std::size_t begin = 0; begin < n; begin += batch) {
    const std::size_t end = std::min(n, begin + batch);
    idx.resize(end - begin);
    for (std::size_t i = begin; i < end; ++i) idx[i - begin] = i;
    const auto probs = backend.classify(estimator.context, thetas.select_rows(idx), 0);
    const std::size_t col = probs.column_of(1);
    for (std::size_t i = begin; i < end; ++i) {
      bool clamped = false;
      out.values[i] = log_ratio_from_probability(probs.probabilities(i - begin, col), &clamped);
      out.clamped[i] = clamped;
    }
  }
  return out;
}

}  // namespace npepfn
