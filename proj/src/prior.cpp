#include "npepfn/prior.hpp"

#include <cmath>
#include <numbers>

#include "npepfn/errors.hpp"

namespace npepfn {

PriorSpec::PriorSpec(Kind kind, std::vector<double> a, std::vector<double> b, std::vector<double> lo,
                     std::vector<double> hi)
    : kind_(kind), a_(std::move(a)), b_(std::move(b)), min_(std::move(lo)), max_(std::move(hi)) {
  if (a_.size() != b_.size() || min_.size() != a_.size() || max_.size() != a_.size())
    throw ShapeError("prior: parameter vectors differ in length");
  for (std::size_t j = 0; j < a_.size(); ++j) {
    if (!(min_[j] < max_[j])) throw Error("prior: theta_min must be < theta_max");
    if (kind_ == Kind::DiagonalGaussian && !(b_[j] > 0.0)) throw Error("prior: std must be > 0");
  }
}

PriorSpec PriorSpec::box_uniform(std::vector<double> lo, std::vector<double> hi) {
  for (std::size_t j = 0; j < lo.size() && j < hi.size(); ++j)
    if (!(lo[j] < hi[j])) throw Error("prior: lo must be < hi");
  return PriorSpec(Kind::BoxUniform, lo, hi, lo, hi);
}

PriorSpec PriorSpec::diagonal_gaussian(std::vector<double> mean, std::vector<double> std, double bound_sigmas) {
  if (mean.size() != std.size()) throw ShapeError("prior: mean/std length mismatch");
  std::vector<double> lo(mean.size()), hi(mean.size());
  for (std::size_t j = 0; j < mean.size(); ++j) {
    lo[j] = mean[j] - bound_sigmas * std[j];
    hi[j] = mean[j] + bound_sigmas * std[j];
  }
  return PriorSpec(Kind::DiagonalGaussian, std::move(mean), std::move(std), std::move(lo), std::move(hi));
}

std::vector<double> PriorSpec::sample(Rng& rng) const {
  std::vector<double> theta(dim());
  for (std::size_t j = 0; j < dim(); ++j) {
    if (kind_ == Kind::BoxUniform)
      theta[j] = a_[j] + (b_[j] - a_[j]) * uniform01(rng);
    else
      theta[j] = a_[j] + b_[j] * standard_normal(rng);
  }
  return theta;
}

Matrix PriorSpec::sample(std::size_t n, Rng& rng) const {
  Matrix out(0, dim());
  out.reserve_rows(n);
  for (std::size_t i = 0; i < n; ++i) out.append_row(sample(rng));
  return out;
}

double PriorSpec::log_density(std::span<const double> theta) const {
  if (theta.size() != dim()) throw ShapeError("prior: theta width mismatch");
  double lp = 0.0;
  for (std::size_t j = 0; j < dim(); ++j) {
    if (kind_ == Kind::BoxUniform) {
      if (theta[j] < a_[j] || theta[j] > b_[j]) return -INFINITY;
      lp -= std::log(b_[j] - a_[j]);
    } else {
      const double z = (theta[j] - a_[j]) / b_[j];
      lp += -0.5 * z * z - std::log(b_[j]) - 0.5 * std::log(2.0 * std::numbers::pi);
    }
  }
  return lp;
}

bool PriorSpec::in_bounds(std::span<const double> theta) const {
  for (std::size_t j = 0; j < dim(); ++j)
    if (!(theta[j] >= min_[j] && theta[j] <= max_[j])) return false;
  return true;
}

double PriorSpec::log_bounds_volume() const {
  double v = 0.0;
  for (std::size_t j = 0; j < dim(); ++j) v += std::log(max_[j] - min_[j]);
  return v;
}

}  // namespace npepfn
