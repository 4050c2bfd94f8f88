#include "npepfn/reference_backend.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numbers>
#include <numeric>
#include <optional>

#include "npepfn/errors.hpp"
#include "npepfn/kernels.hpp"

namespace npepfn {
namespace {

constexpr double kInvSqrtTwoPi = 0.39894228040143267793994605993438;
constexpr double kWeightCutoff = 40.0;   // exp(-40) ~ 4e-18
constexpr double kKernelReach = 5.0;     // KDE kernels truncated at 5 bandwidths
constexpr double kTargetBandwidthFloor = 1e-3;
constexpr double kLogFloor = -690.0;     // log(1e-300)
constexpr std::size_t kRelevanceSweeps = 3;

/// Lexicographic order of (row features, tie key) so results ignore input order.
template <typename Key>
std::vector<std::size_t> canonical_order(const Matrix& features, const std::vector<Key>& keys) {
  std::vector<std::size_t> idx(features.rows());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    auto ra = features.row(a), rb = features.row(b);
    for (std::size_t j = 0; j < ra.size(); ++j)
      if (ra[j] != rb[j]) return ra[j] < rb[j];
    return keys[a] < keys[b];
  });
  return idx;
}

std::vector<std::size_t> strided_rows(std::size_t n, std::size_t count) {
  count = std::min(n, count);
  std::vector<std::size_t> out(count);
  for (std::size_t k = 0; k < count; ++k) out[k] = k * n / count;
  return out;
}

/// Paired standard error of the mean score difference between candidates a and b.
double paired_se(const std::vector<double>& scores, std::size_t rows, std::size_t nc, std::size_t a, std::size_t b) {
  const auto n = static_cast<double>(rows);
  double mean = 0.0;
  for (std::size_t k = 0; k < rows; ++k) mean += scores[k * nc + a] - scores[k * nc + b];
  mean /= n;
  double ss = 0.0;
  for (std::size_t k = 0; k < rows; ++k) {
    const double d = scores[k * nc + a] - scores[k * nc + b] - mean;
    ss += d * d;
  }
  return rows > 1 ? std::sqrt(ss / (n - 1.0) / n) : 0.0;
}

/// Index of the candidate with the largest `width` whose mean score is within
/// one paired standard error of the best. scores is [row][candidate]. With a
/// `keep` index, that candidate stays unless the best beats it by more than
/// one standard error, in which case the best is taken.
std::size_t one_se_choice(const std::vector<double>& scores, std::size_t rows, std::span<const double> widths,
                          std::optional<std::size_t> keep = std::nullopt) {
  const std::size_t nc = widths.size();
  const auto n = static_cast<double>(rows);
  std::vector<double> mean(nc, 0.0);
  std::size_t best = 0;
  for (std::size_t c = 0; c < nc; ++c) {
    for (std::size_t k = 0; k < rows; ++k) mean[c] += scores[k * nc + c];
    mean[c] /= n;
    if (mean[c] > mean[best]) best = c;
  }
  if (keep) return mean[best] - mean[*keep] <= paired_se(scores, rows, nc, best, *keep) ? *keep : best;
  std::size_t chosen = best;
  for (std::size_t c = 0; c < nc; ++c)
    if (widths[c] > widths[chosen] && mean[best] - mean[c] <= paired_se(scores, rows, nc, best, c)) chosen = c;
  return chosen;
}

/// Cholesky solve of the (small, SPD) system a x = b; a is d x d row-major.
std::vector<double> cholesky_solve(std::vector<double> a, std::vector<double> b, std::size_t d) {
  for (std::size_t j = 0; j < d; ++j) {
    double s = a[j * d + j];
    for (std::size_t k = 0; k < j; ++k) s -= a[j * d + k] * a[j * d + k];
    if (!(s > 0.0)) throw Error("cholesky: matrix not positive definite");
    const double l = std::sqrt(s);
    a[j * d + j] = l;
    for (std::size_t i = j + 1; i < d; ++i) {
      double t = a[i * d + j];
      for (std::size_t k = 0; k < j; ++k) t -= a[i * d + k] * a[j * d + k];
      a[i * d + j] = t / l;
    }
  }
  for (std::size_t i = 0; i < d; ++i) {
    double t = b[i];
    for (std::size_t k = 0; k < i; ++k) t -= a[i * d + k] * b[k];
    b[i] = t / a[i * d + i];
  }
  for (std::size_t ii = d; ii-- > 0;) {
    double t = b[ii];
    for (std::size_t k = ii + 1; k < d; ++k) t -= a[k * d + ii] * b[k];
    b[ii] = t / a[ii * d + ii];
  }
  return b;
}

/// Gaussian feature weights relative to the nearest row (which gets weight 1
/// when `relative`); `exclude` (if < rows) gets weight 0.
std::vector<double> feature_weights(const Matrix& features, std::span<const double> zq, double bandwidth,
                                    std::size_t exclude, bool relative) {
  const std::size_t m = features.rows();
  std::vector<double> d2(m);
  kernels::serial::squared_distances(features, zq, d2);
  if (exclude < m) d2[exclude] = INFINITY;
  std::vector<double> w(m);
  if (std::isinf(bandwidth)) {
    std::fill(w.begin(), w.end(), 1.0);
    if (exclude < m) w[exclude] = 0.0;
    return w;
  }
  if (relative) {
    const double nearest = *std::min_element(d2.begin(), d2.end());
    if (std::isfinite(nearest))
      for (auto& v : d2) v -= nearest;
  }
  kernels::serial::gaussian_weights(d2, 1.0 / (2.0 * bandwidth * bandwidth), kWeightCutoff, w);
  return w;
}

}  // namespace

double weighted_silverman_bandwidth(std::span<const double> values, std::span<const double> weights,
                                    std::span<const std::size_t> order, double floor) {
  double total = 0.0, total2 = 0.0, mean = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    total += weights[i];
    total2 += weights[i] * weights[i];
    mean += weights[i] * values[i];
  }
  if (!(total > 0.0)) return floor;
  mean /= total;
  double var = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double c = values[i] - mean;
    var += weights[i] * c * c;
  }
  const double sd = std::sqrt(var / total);
  double q25 = NAN, q75 = NAN, cum = 0.0;
  for (std::size_t i : order) {
    cum += weights[i];
    if (std::isnan(q25) && cum >= 0.25 * total) q25 = values[i];
    if (cum >= 0.75 * total) {
      q75 = values[i];
      break;
    }
  }
  if (std::isnan(q75)) q75 = values[order.back()];
  if (std::isnan(q25)) q25 = q75;
  const double iqr = q75 - q25;
  const double spread = iqr > 0.0 ? std::min(sd, iqr / 1.34) : sd;
  const double n_eff = total * total / total2;
  return std::max(0.9 * spread * std::pow(n_eff, -0.2), floor);
}

double median_pairwise_distance(const Matrix& points, std::size_t max_rows) {
  const auto rows = strided_rows(points.rows(), max_rows);
  std::vector<double> d;
  d.reserve(rows.size() * (rows.size() - (rows.empty() ? 0 : 1)) / 2);
  for (std::size_t a = 0; a < rows.size(); ++a)
    for (std::size_t b = a + 1; b < rows.size(); ++b) {
      double s = 0.0;
      auto ra = points.row(rows[a]), rb = points.row(rows[b]);
      for (std::size_t j = 0; j < ra.size(); ++j) s += (ra[j] - rb[j]) * (ra[j] - rb[j]);
      if (s > 0.0) d.push_back(std::sqrt(s));
    }
  if (d.empty()) return 1.0;
  auto mid = d.begin() + static_cast<std::ptrdiff_t>(d.size() / 2);
  std::nth_element(d.begin(), mid, d.end());
  return *mid;
}

// ---- regression ------------------------------------------------------------------

struct KernelRegressionModel::Weighted {
  std::vector<double> w;
};

KernelRegressionModel::Weighted KernelRegressionModel::weights_for(std::span<const double> zq, double multiplier,
                                                                   std::size_t exclude) const {
  return {feature_weights(features_, zq, multiplier * scale_, exclude, true)};
}

KernelRegressionModel::KernelRegressionModel(const ContextSet& context, const ReferenceBackendOptions& options)
    : options_(&options) {
  const std::size_t m = context.features.rows();
  const std::size_t d = context.features.cols();
  const auto order = canonical_order(context.features, context.targets);
  const Matrix sorted = context.features.select_rows(order);
  feature_stats_ = fit_standardization(sorted);
  features_ = feature_stats_.apply(sorted);

  Matrix target_col(m, 1);
  for (std::size_t i = 0; i < m; ++i) target_col(i, 0) = context.targets[order[i]];
  const auto tstats = fit_standardization(target_col);
  target_mean_ = tstats.mean[0];
  target_std_ = tstats.std[0];
  targets_.resize(m);
  for (std::size_t i = 0; i < m; ++i) targets_[i] = (target_col(i, 0) - target_mean_) / target_std_;

  scale_ = median_pairwise_distance(features_, options.scale_subsample);

  // Global ridge fit of the standardized target on standardized features.
  coef_.assign(d, 0.0);
  const bool can_adjust = options.regression_adjustment && d > 0 && m > d;
  if (can_adjust) {
    std::vector<double> a(d * d, 0.0), b(d, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
      auto x = features_.row(i);
      for (std::size_t p = 0; p < d; ++p) {
        b[p] += x[p] * targets_[i];
        for (std::size_t q = 0; q <= p; ++q) a[p * d + q] += x[p] * x[q];
      }
    }
    for (std::size_t p = 0; p < d; ++p) {
      for (std::size_t q = 0; q < p; ++q) a[q * d + p] = a[p * d + q];
      a[p * d + p] += 1e-6 * static_cast<double>(m);
    }
    coef_ = cholesky_solve(std::move(a), std::move(b), d);
  }
  residuals_.resize(m);
  for (std::size_t i = 0; i < m; ++i) {
    auto x = features_.row(i);
    residuals_[i] = targets_[i] - std::inner_product(x.begin(), x.end(), coef_.begin(), 0.0);
  }
  by_target_.resize(m);
  std::iota(by_target_.begin(), by_target_.end(), std::size_t{0});
  by_residual_ = by_target_;
  std::stable_sort(by_target_.begin(), by_target_.end(), [&](auto a, auto b) { return targets_[a] < targets_[b]; });
  std::stable_sort(by_residual_.begin(), by_residual_.end(),
                   [&](auto a, auto b) { return residuals_[a] < residuals_[b]; });

  const auto& mults = options.bandwidth_multipliers;
  if (mults.empty()) throw Error("reference backend: no bandwidth candidates");
  if (m < 3) {
    multiplier_ = mults.back();
    adjust_ = false;
    return;
  }

  // Leave-one-out log predictive density for every (multiplier, adjust) pair.
  validation_ = strided_rows(m, options.validation_points);
  const std::size_t nc = mults.size();
  std::vector<double> scores(validation_.size() * nc * 2, 0.0);
  kernels::for_each_index(validation_.size(), options.use_threads, [&](std::size_t k) {
    const std::size_t v = validation_[k];
    auto zv = features_.row(v);
    const double fitted = std::inner_product(zv.begin(), zv.end(), coef_.begin(), 0.0);
    for (std::size_t c = 0; c < nc; ++c) {
      const auto w = weights_for(zv, mults[c], v).w;
      for (int adj = 0; adj < (can_adjust ? 2 : 1); ++adj) {
        const auto& values = adj ? residuals_ : targets_;
        const auto& ord = adj ? by_residual_ : by_target_;
        const double u = adj ? targets_[v] - fitted : targets_[v];
        const double bw = weighted_silverman_bandwidth(values, w, ord, kTargetBandwidthFloor);
        double dens = 0.0, total = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
          if (w[i] == 0.0) continue;
          total += w[i];
          const double e = (u - values[i]) / bw;
          if (std::abs(e) < 8.0) dens += w[i] * std::exp(-0.5 * e * e);
        }
        const double logp = total > 0.0 && dens > 0.0
                                ? std::max(std::log(dens * kInvSqrtTwoPi / (bw * total)), kLogFloor)
                                : kLogFloor;
        scores[(k * nc + c) * 2 + static_cast<std::size_t>(adj)] = logp;
      }
      if (!can_adjust) scores[(k * nc + c) * 2 + 1] = -INFINITY;
    }
  });
  double best = -INFINITY;
  for (std::size_t c = 0; c < nc; ++c)
    for (int adj = 0; adj < 2; ++adj) {
      double total = 0.0;
      for (std::size_t k = 0; k < validation_.size(); ++k) total += scores[(k * nc + c) * 2 + static_cast<std::size_t>(adj)];
      if (total > best) {
        best = total;
        multiplier_ = mults[c];
        adjust_ = adj == 1;
      }
    }
}

PredictiveDistribution1D KernelRegressionModel::predict(std::span<const double> query) const {
  const auto zq = feature_stats_.apply(query);
  const auto w = weights_for(zq, multiplier_, features_.rows()).w;
  const std::size_t m = features_.rows();
  const double base = adjust_ ? std::inner_product(zq.begin(), zq.end(), coef_.begin(), 0.0) : 0.0;
  const auto& values = adjust_ ? residuals_ : targets_;
  const auto& ord = adjust_ ? by_residual_ : by_target_;
  const double bw = weighted_silverman_bandwidth(values, w, ord, kTargetBandwidthFloor);

  double lo = INFINITY, hi = -INFINITY;
  for (std::size_t i = 0; i < m; ++i)
    if (w[i] > 0.0) lo = std::min(lo, values[i]), hi = std::max(hi, values[i]);
  lo += base - 3.0 * bw;
  hi += base + 3.0 * bw;

  const std::size_t g = std::max<std::size_t>(options_->grid_size, 2);
  const double step = (hi - lo) / static_cast<double>(g - 1);
  std::vector<double> grid(g), dens(g, 0.0);
  for (std::size_t k = 0; k < g; ++k) grid[k] = lo + step * static_cast<double>(k);

  if (bw >= 2.0 * step) {
    // Linear binning followed by a discrete Gaussian convolution.
    std::vector<double> bins(g, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
      if (w[i] == 0.0) continue;
      const double pos = std::clamp((base + values[i] - lo) / step, 0.0, static_cast<double>(g - 1));
      const auto k = std::min(static_cast<std::size_t>(pos), g - 2);
      const double frac = pos - static_cast<double>(k);
      bins[k] += w[i] * (1.0 - frac);
      bins[k + 1] += w[i] * frac;
    }
    const auto reach = std::min(static_cast<std::size_t>(std::ceil(kKernelReach * bw / step)), g - 1);
    std::vector<double> kernel(reach + 1);
    for (std::size_t r = 0; r <= reach; ++r) {
      const double e = static_cast<double>(r) * step / bw;
      kernel[r] = std::exp(-0.5 * e * e);
    }
    for (std::size_t k = 0; k < g; ++k) {
      if (bins[k] == 0.0) continue;
      const std::size_t a = k >= reach ? k - reach : 0;
      const std::size_t b = std::min(g - 1, k + reach);
      for (std::size_t t = a; t <= b; ++t) dens[t] += bins[k] * kernel[t > k ? t - k : k - t];
    }
  } else {
    // Narrow kernels: evaluate each one exactly on the cells it reaches.
    for (std::size_t i = 0; i < m; ++i) {
      if (w[i] == 0.0) continue;
      const double centre = base + values[i];
      const double first = std::ceil((centre - kKernelReach * bw - lo) / step);
      const double last = std::floor((centre + kKernelReach * bw - lo) / step);
      const auto a = static_cast<std::size_t>(std::max(first, 0.0));
      const auto b = static_cast<std::size_t>(std::min(last, static_cast<double>(g - 1)));
      for (std::size_t t = a; t <= b; ++t) {
        const double e = (grid[t] - centre) / bw;
        dens[t] += w[i] * std::exp(-0.5 * e * e);
      }
    }
  }

  std::vector<double> out_grid(g), logd(g);
  for (std::size_t k = 0; k < g; ++k) {
    out_grid[k] = target_mean_ + target_std_ * grid[k];
    logd[k] = dens[k] > 0.0 ? std::log(dens[k]) : -INFINITY;
  }
  return PredictiveDistribution1D(std::move(out_grid), std::move(logd));
}

// ---- classification ---------------------------------------------------------------

KernelClassifierModel::KernelClassifierModel(const ClassContext& context, const ReferenceBackendOptions& options)
    : options_(&options) {
  const std::size_t m = context.features.rows();
  const std::size_t d = context.features.cols();
  const auto order = canonical_order(context.features, context.labels);
  const Matrix sorted = context.features.select_rows(order);
  feature_stats_ = fit_standardization(sorted);
  features_ = feature_stats_.apply(sorted);
  classes_ = context.labels;
  std::sort(classes_.begin(), classes_.end());
  classes_.erase(std::unique(classes_.begin(), classes_.end()), classes_.end());
  label_index_.resize(m);
  for (std::size_t i = 0; i < m; ++i)
    label_index_[i] = static_cast<std::size_t>(
        std::lower_bound(classes_.begin(), classes_.end(), context.labels[order[i]]) - classes_.begin());
  scale_ = median_pairwise_distance(features_, options.scale_subsample);
  relevance_.assign(d, 1.0);

  const auto& mults = options.bandwidth_multipliers;
  if (mults.empty()) throw Error("reference backend: no bandwidth candidates");
  auto set_bandwidths = [&] {
    inv_bw2_.assign(d, 0.0);
    if (std::isinf(multiplier_)) return;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = multiplier_ * scale_ * relevance_[j];
      inv_bw2_[j] = std::isinf(h) ? 0.0 : 1.0 / (h * h);
    }
  };
  if (m < 3) {
    multiplier_ = mults.back();
    set_bandwidths();
    return;
  }
  const auto validation = strided_rows(m, options.classifier_validation_points);
  const std::size_t nv = validation.size();
  const double alpha = options.laplace_alpha;
  const double k_classes = static_cast<double>(classes_.size());
  const std::size_t nk = classes_.size();

  // Leave-one-out log-loss of row v when the squared scaled distance to row i is dist(i).
  auto loo_score = [&](std::size_t v, const auto& dist) {
    std::vector<double> per_class(nk, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
      if (i == v) continue;
      const double e = 0.5 * dist(i);
      if (e <= kWeightCutoff) per_class[label_index_[i]] += std::exp(-e);
    }
    const double total = std::accumulate(per_class.begin(), per_class.end(), 0.0);
    return std::log((per_class[label_index_[v]] + alpha) / (total + k_classes * alpha));
  };

  // Isotropic bandwidth first.
  const std::size_t nc = mults.size();
  std::vector<double> scores(nv * nc, 0.0);
  kernels::for_each_index(nv, options.use_threads, [&](std::size_t k) {
    const std::size_t v = validation[k];
    std::vector<double> d2(m);
    kernels::serial::squared_distances(features_, features_.row(v), d2);
    for (std::size_t c = 0; c < nc; ++c) {
      const double h = mults[c] * scale_;
      const double inv = std::isinf(h) ? 0.0 : 1.0 / (h * h);
      scores[k * nc + c] = loo_score(v, [&](std::size_t i) { return d2[i] * inv; });
    }
  });
  multiplier_ = mults[one_se_choice(scores, nv, mults)];
  set_bandwidths();
  if (!options.relevance_search || d < 2 || std::isinf(multiplier_)) return;

  // Rows whose neighbour weight is below the smoothing mass score near the
  // uniform floor whatever the bandwidths; they would reward dropping features
  // only for making the kernel wider, so the sweeps ignore them.
  std::vector<char> supported(nv, 0);
  kernels::for_each_index(nv, options.use_threads, [&](std::size_t k) {
    const std::size_t v = validation[k];
    double total = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      if (i == v) continue;
      double s = 0.0;
      for (std::size_t p = 0; p < d; ++p) s += inv_bw2_[p] * (features_(i, p) - features_(v, p)) * (features_(i, p) - features_(v, p));
      if (0.5 * s <= kWeightCutoff) total += std::exp(-0.5 * s);
    }
    supported[k] = total >= k_classes * alpha;
  });
  std::vector<std::size_t> sweep_rows;
  for (std::size_t k = 0; k < nv; ++k)
    if (supported[k]) sweep_rows.push_back(validation[k]);
  if (sweep_rows.size() < 2) return;
  const std::size_t ns = sweep_rows.size();

  // Coordinate sweeps over per-feature bandwidth factors until none changes.
  // The finite factors halve in turn, so each narrower factor's weight term
  // is the previous one to the fourth power.
  static constexpr double kFactors[] = {0.25, 0.5, 1.0, 2.0, 4.0, std::numeric_limits<double>::infinity()};
  constexpr std::size_t nf = std::size(kFactors);
  constexpr std::size_t widest = nf - 2;
  // Weighted squared distances from each sweep row, kept current as factors move.
  std::vector<double> dist(ns * m);
  kernels::for_each_index(ns, options.use_threads, [&](std::size_t k) {
    auto zv = features_.row(sweep_rows[k]);
    for (std::size_t i = 0; i < m; ++i) {
      auto zi = features_.row(i);
      double s = 0.0;
      for (std::size_t p = 0; p < d; ++p) s += inv_bw2_[p] * (zi[p] - zv[p]) * (zi[p] - zv[p]);
      dist[k * m + i] = s;
    }
  });
  for (std::size_t sweep = 0, changed = 1; sweep < kRelevanceSweeps && changed; ++sweep) {
    changed = 0;
    for (std::size_t j = 0; j < d; ++j) {
      std::vector<double> fscores(ns * nf, 0.0);
      const double h_wide = multiplier_ * scale_ * kFactors[widest];
      const double inv_wide = 1.0 / (h_wide * h_wide);
      kernels::for_each_index(ns, options.use_threads, [&](std::size_t k) {
        const std::size_t v = sweep_rows[k];
        const double zvj = features_(v, j);
        const double* row_dist = dist.data() + k * m;
        std::vector<double> per_class(nf * nk, 0.0);
        for (std::size_t i = 0; i < m; ++i) {
          if (i == v) continue;
          const double dj = (features_(i, j) - zvj) * (features_(i, j) - zvj);
          const double e_base = 0.5 * std::max(row_dist[i] - inv_bw2_[j] * dj, 0.0);
          if (e_base > kWeightCutoff) continue;
          const double w_base = std::exp(-e_base);
          const std::size_t c = label_index_[i];
          per_class[(nf - 1) * nk + c] += w_base;
          double t = std::exp(-0.5 * inv_wide * dj), scale = 1.0;
          for (std::size_t f = widest + 1; f-- > 0;) {
            if (e_base + 0.5 * inv_wide * scale * dj > kWeightCutoff) break;
            per_class[f * nk + c] += w_base * t;
            t = (t * t) * (t * t);
            scale *= 4.0;
          }
        }
        for (std::size_t f = 0; f < nf; ++f) {
          const double* pc = per_class.data() + f * nk;
          const double total = std::accumulate(pc, pc + nk, 0.0);
          fscores[k * nf + f] = std::log((pc[label_index_[v]] + alpha) / (total + k_classes * alpha));
        }
      });
      // A factor moves only on a clear gain, so repeated sweeps cannot drift.
      const auto current = static_cast<std::size_t>(std::find(kFactors, kFactors + nf, relevance_[j]) - kFactors);
      const double factor = kFactors[one_se_choice(fscores, ns, kFactors, current)];
      if (factor == relevance_[j]) continue;
      ++changed;
      const double old_inv = inv_bw2_[j];
      relevance_[j] = factor;
      set_bandwidths();
      const double delta = inv_bw2_[j] - old_inv;
      kernels::for_each_index(ns, options.use_threads, [&](std::size_t k) {
        const double zvj = features_(sweep_rows[k], j);
        for (std::size_t i = 0; i < m; ++i)
          dist[k * m + i] += delta * (features_(i, j) - zvj) * (features_(i, j) - zvj);
      });
    }
  }
}

std::vector<double> KernelClassifierModel::predict(std::span<const double> query) const {
  const auto zq = feature_stats_.apply(query);
  const std::size_t m = features_.rows();
  const std::size_t d = features_.cols();
  std::vector<double> w(classes_.size(), 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    auto zi = features_.row(i);
    double s = 0.0;
    for (std::size_t p = 0; p < d; ++p) s += inv_bw2_[p] * (zi[p] - zq[p]) * (zi[p] - zq[p]);
    if (0.5 * s <= kWeightCutoff) w[label_index_[i]] += std::exp(-0.5 * s);
  }
  const double alpha = options_->laplace_alpha;
  const double total = std::accumulate(w.begin(), w.end(), 0.0);
  const double denom = total + static_cast<double>(w.size()) * alpha;
  for (auto& v : w) v = (v + alpha) / denom;
  return w;
}

// ---- backend -------------------------------------------------------------------------

ReferenceBackend::ReferenceBackend(ReferenceBackendOptions options) : options_(std::move(options)) {}

namespace {

bool same_context(const ContextSet& a, const ContextSet& b) {
  return a.targets == b.targets && a.features == b.features;
}

bool same_context(const ClassContext& a, const ClassContext& b) {
  return a.labels == b.labels && a.features == b.features;
}

}  // namespace

template <class Context, class Model>
std::shared_ptr<const Model> ReferenceBackend::fitted(ModelCache<Context, Model>& cache, const Context& context) {
  const std::size_t capacity = options_.cached_models;
  if (capacity > 0) {
    std::lock_guard lock(cache_mutex_);
    auto& entries = cache.entries;
    for (auto it = entries.begin(); it != entries.end(); ++it) {
      if (!same_context(it->first, context)) continue;
      entries.splice(entries.begin(), entries, it);
      return entries.front().second;
    }
  }
  // Fitting happens outside the lock so concurrent calls on other contexts proceed.
  auto model = std::make_shared<const Model>(context, options_);
  if (capacity > 0) {
    std::lock_guard lock(cache_mutex_);
    cache.entries.emplace_front(context, model);
    if (cache.entries.size() > capacity) cache.entries.pop_back();
  }
  return model;
}

std::vector<PredictiveDistribution1D> ReferenceBackend::regress(const ContextSet& context, const Matrix& queries,
                                                                std::uint64_t) {
  validate_regression_call(context, queries);
  check_soft_limits(options_.capabilities, context.features.rows(), context.features.cols());
  const auto model = fitted(regressors_, context);
  std::vector<std::optional<PredictiveDistribution1D>> slots(queries.rows());
  kernels::for_each_index(queries.rows(), options_.use_threads,
                          [&](std::size_t q) { slots[q].emplace(model->predict(queries.row(q))); });
  std::vector<PredictiveDistribution1D> out;
  out.reserve(slots.size());
  for (auto& s : slots) out.push_back(std::move(*s));
  return out;
}

ClassProbabilities ReferenceBackend::classify(const ClassContext& context, const Matrix& queries, std::uint64_t) {
  validate_classification_call(context, queries);
  check_soft_limits(options_.capabilities, context.features.rows(), context.features.cols());
  const auto model = fitted(classifiers_, context);
  ClassProbabilities out{model->classes(), Matrix(queries.rows(), model->classes().size())};
  kernels::for_each_index(queries.rows(), options_.use_threads, [&](std::size_t q) {
    const auto p = model->predict(queries.row(q));
    std::copy(p.begin(), p.end(), out.probabilities.row(q).begin());
  });
  return out;
}

}  // namespace npepfn
