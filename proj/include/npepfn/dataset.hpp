#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "npepfn/matrix.hpp"

namespace npepfn {

/// N rows of (theta, x) simulations plus a validity flag per row.
/// Invalid rows (non-finite simulator output) are kept so validity
/// classifiers can learn from them; they never enter a regression context.
class SimulationDataset {
 public:
  SimulationDataset() = default;
  SimulationDataset(std::size_t theta_dim, std::size_t obs_dim);
  SimulationDataset(Matrix thetas, Matrix xs, std::vector<bool> valid);
  /// All rows valid.
  SimulationDataset(Matrix thetas, Matrix xs);

  std::size_t size() const noexcept { return thetas_.rows(); }
  bool empty() const noexcept { return size() == 0; }
  std::size_t theta_dim() const noexcept { return theta_dim_; }
  std::size_t obs_dim() const noexcept { return obs_dim_; }

  const Matrix& thetas() const noexcept { return thetas_; }
  const Matrix& xs() const noexcept { return xs_; }
  const std::vector<bool>& valid() const noexcept { return valid_; }
  std::size_t valid_count() const;

  void append(std::span<const double> theta, std::span<const double> x, bool valid);
  void append(const SimulationDataset& other);

  SimulationDataset subset(std::span<const std::size_t> rows) const;
  SimulationDataset valid_only() const;

  friend bool operator==(const SimulationDataset&, const SimulationDataset&) = default;

 private:
  std::size_t theta_dim_ = 0;
  std::size_t obs_dim_ = 0;
  Matrix thetas_;
  Matrix xs_;
  std::vector<bool> valid_;
};

}  // namespace npepfn
