#include <algorithm>
#include <cmath>
#include <set>

#include "npepfn/backend.hpp"
#include "npepfn/errors.hpp"
#include "npepfn/log.hpp"

namespace npepfn {
namespace {

void check_grid(const std::vector<double>& grid, const std::vector<double>& logd) {
  if (grid.size() < 2) throw BackendError("predictive grid needs at least 2 points");
  if (grid.size() != logd.size()) throw ShapeError("predictive grid and log-density lengths differ");
  for (std::size_t k = 0; k < grid.size(); ++k) {
    if (!std::isfinite(grid[k])) throw BackendError("predictive grid is not finite");
    if (k > 0 && !(grid[k] > grid[k - 1])) throw BackendError("predictive grid must be strictly increasing");
    if (std::isnan(logd[k]) || logd[k] == INFINITY) throw BackendError("predictive log-density is NaN or +inf");
  }
}

}  // namespace

PredictiveDistribution1D::PredictiveDistribution1D(std::vector<double> grid, std::vector<double> log_density)
    : grid_(std::move(grid)), log_density_(std::move(log_density)) {
  check_grid(grid_, log_density_);
  const double peak = *std::max_element(log_density_.begin(), log_density_.end());
  if (!std::isfinite(peak)) throw BackendError("predictive density is zero everywhere");
  double z = 0.0;
  for (std::size_t k = 1; k < grid_.size(); ++k)
    z += 0.5 * (std::exp(log_density_[k - 1] - peak) + std::exp(log_density_[k] - peak)) * (grid_[k] - grid_[k - 1]);
  const double log_z = peak + std::log(z);
  for (auto& v : log_density_) v = std::max(v - log_z, kLogDensityFloor);
  build_cdf();
}

PredictiveDistribution1D PredictiveDistribution1D::from_normalized(std::vector<double> grid,
                                                                   std::vector<double> log_density) {
  check_grid(grid, log_density);
  PredictiveDistribution1D p;
  p.grid_ = std::move(grid);
  p.log_density_ = std::move(log_density);
  for (auto& v : p.log_density_) v = std::max(v, kLogDensityFloor);
  p.build_cdf();
  if (std::abs(p.cumulative_.back() - 1.0) > 1e-6) throw BackendError("predictive density is not normalised");
  return p;
}

void PredictiveDistribution1D::build_cdf() {
  density_.resize(grid_.size());
  for (std::size_t k = 0; k < grid_.size(); ++k) density_[k] = std::exp(log_density_[k]);
  cumulative_.assign(grid_.size(), 0.0);
  for (std::size_t k = 1; k < grid_.size(); ++k)
    cumulative_[k] = cumulative_[k - 1] + 0.5 * (density_[k - 1] + density_[k]) * (grid_[k] - grid_[k - 1]);
}

double PredictiveDistribution1D::total_mass() const { return cumulative_.back(); }

double PredictiveDistribution1D::log_density(double y) const {
  if (!(y >= grid_.front() && y <= grid_.back())) return -INFINITY;
  auto it = std::upper_bound(grid_.begin(), grid_.end(), y);
  if (it == grid_.end()) return log_density_.back();
  const auto k = static_cast<std::size_t>(it - grid_.begin()) - 1;
  const double t = (y - grid_[k]) / (grid_[k + 1] - grid_[k]);
  return log_density_[k] + t * (log_density_[k + 1] - log_density_[k]);
}

double PredictiveDistribution1D::cdf(double y) const {
  if (y <= grid_.front()) return 0.0;
  if (y >= grid_.back()) return cumulative_.back();
  auto it = std::upper_bound(grid_.begin(), grid_.end(), y);
  const auto k = static_cast<std::size_t>(it - grid_.begin()) - 1;
  const double h = grid_[k + 1] - grid_[k];
  const double t = (y - grid_[k]) / h;
  return cumulative_[k] + h * (density_[k] * t + 0.5 * (density_[k + 1] - density_[k]) * t * t);
}

double PredictiveDistribution1D::quantile(double u) const {
  const double target = std::clamp(u, 0.0, 1.0) * cumulative_.back();
  auto it = std::upper_bound(cumulative_.begin(), cumulative_.end(), target);
  if (it == cumulative_.begin()) return grid_.front();
  if (it == cumulative_.end()) return grid_.back();
  const auto k = static_cast<std::size_t>(it - cumulative_.begin()) - 1;
  const double h = grid_[k + 1] - grid_[k];
  // Solve h*(p0 t + (p1-p0) t^2/2) = c for t in [0,1].
  const double c = target - cumulative_[k];
  const double a = 0.5 * h * (density_[k + 1] - density_[k]);
  const double b = h * density_[k];
  double t;
  if (a == 0.0)
    t = b > 0.0 ? c / b : 0.0;
  else {
    const double disc = std::max(b * b + 4.0 * a * c, 0.0);
    const double denom = b + std::sqrt(disc);
    t = denom > 0.0 ? 2.0 * c / denom : 0.0;
  }
  return grid_[k] + std::clamp(t, 0.0, 1.0) * h;
}

double PredictiveDistribution1D::sample(Rng& rng) const { return quantile(uniform01(rng)); }

double PredictiveDistribution1D::mean() const {
  double m = 0.0;
  for (std::size_t k = 1; k < grid_.size(); ++k) {
    const double h = grid_[k] - grid_[k - 1];
    // Exact first moment of the linear density on [g_{k-1}, g_k].
    m += h * (grid_[k - 1] * 0.5 * (density_[k - 1] + density_[k]) + h * (density_[k - 1] + 2.0 * density_[k]) / 6.0);
  }
  return m / cumulative_.back();
}

std::size_t ClassProbabilities::column_of(int label) const {
  auto it = std::find(classes.begin(), classes.end(), label);
  if (it == classes.end()) throw BackendError("label " + std::to_string(label) + " not in context");
  return static_cast<std::size_t>(it - classes.begin());
}

void validate_regression_call(const ContextSet& context, const Matrix& queries) {
  if (context.features.rows() == 0) throw BackendError("empty context");
  if (context.features.rows() != context.targets.size())
    throw ShapeError("context features and targets differ in length");
  if (queries.cols() != context.features.cols())
    throw ShapeError("query width " + std::to_string(queries.cols()) + " != context width " +
                     std::to_string(context.features.cols()));
  for (double v : context.features.data())
    if (!std::isfinite(v)) throw BackendError("non-finite context feature");
  for (double v : context.targets)
    if (!std::isfinite(v)) throw BackendError("non-finite context target");
  for (double v : queries.data())
    if (!std::isfinite(v)) throw BackendError("non-finite query");
}

void validate_classification_call(const ClassContext& context, const Matrix& queries) {
  if (context.features.rows() == 0) throw BackendError("empty context");
  if (context.features.rows() != context.labels.size())
    throw ShapeError("context features and labels differ in length");
  if (queries.cols() != context.features.cols())
    throw ShapeError("query width " + std::to_string(queries.cols()) + " != context width " +
                     std::to_string(context.features.cols()));
  std::set<int> distinct(context.labels.begin(), context.labels.end());
  if (distinct.size() < 2) throw BackendError("classification context needs at least two classes");
  for (double v : context.features.data())
    if (!std::isfinite(v)) throw BackendError("non-finite context feature");
  for (double v : queries.data())
    if (!std::isfinite(v)) throw BackendError("non-finite query");
}

void check_soft_limits(const BackendCapabilities& caps, std::size_t context_rows, std::size_t feature_width) {
  if (context_rows > caps.max_context)
    warn("context of " + std::to_string(context_rows) + " rows exceeds the backend soft limit of " +
         std::to_string(caps.max_context));
  if (feature_width > caps.max_features)
    warn("feature width " + std::to_string(feature_width) + " exceeds the backend soft limit of " +
         std::to_string(caps.max_features));
}

}  // namespace npepfn
