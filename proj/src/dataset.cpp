#include "npepfn/dataset.hpp"

#include <algorithm>

#include "npepfn/errors.hpp"

namespace npepfn {

SimulationDataset::SimulationDataset(std::size_t theta_dim, std::size_t obs_dim)
    : theta_dim_(theta_dim), obs_dim_(obs_dim), thetas_(0, theta_dim), xs_(0, obs_dim) {}

SimulationDataset::SimulationDataset(Matrix thetas, Matrix xs, std::vector<bool> valid)
    : theta_dim_(thetas.cols()),
      obs_dim_(xs.cols()),
      thetas_(std::move(thetas)),
      xs_(std::move(xs)),
      valid_(std::move(valid)) {
  if (thetas_.rows() != xs_.rows() || thetas_.rows() != valid_.size())
    throw ShapeError("dataset: thetas, xs and valid_mask row counts differ");
}

SimulationDataset::SimulationDataset(Matrix thetas, Matrix xs)
    : SimulationDataset(thetas, xs, std::vector<bool>(thetas.rows(), true)) {}

std::size_t SimulationDataset::valid_count() const {
  return static_cast<std::size_t>(std::count(valid_.begin(), valid_.end(), true));
}

void SimulationDataset::append(std::span<const double> theta, std::span<const double> x, bool valid) {
  if (theta.size() != theta_dim_ || x.size() != obs_dim_) throw ShapeError("dataset append: width mismatch");
  thetas_.append_row(theta);
  xs_.append_row(x);
  valid_.push_back(valid);
}

void SimulationDataset::append(const SimulationDataset& other) {
  if (other.theta_dim_ != theta_dim_ || other.obs_dim_ != obs_dim_)
    throw ShapeError("dataset append: dimensionality mismatch");
  for (std::size_t i = 0; i < other.size(); ++i) append(other.thetas_.row(i), other.xs_.row(i), other.valid_[i]);
}

SimulationDataset SimulationDataset::subset(std::span<const std::size_t> rows) const {
  std::vector<bool> v(rows.size());
  for (std::size_t k = 0; k < rows.size(); ++k) v[k] = valid_[rows[k]];
  SimulationDataset out(thetas_.select_rows(rows), xs_.select_rows(rows), std::move(v));
  out.theta_dim_ = theta_dim_;
  out.obs_dim_ = obs_dim_;
  return out;
}

SimulationDataset SimulationDataset::valid_only() const {
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < size(); ++i)
    if (valid_[i]) rows.push_back(i);
  return subset(rows);
}

}  // namespace npepfn
