#pragma once

#include <span>
#include <utility>
#include <vector>

#include "npepfn/matrix.hpp"

namespace npepfn {

/// Per-column z-score statistics. Population std (divide by N); columns
/// with std below 1e-12 get std 1 so constant features stay inert.
struct StandardizationStats {
  std::vector<double> mean;
  std::vector<double> std;

  std::size_t dim() const noexcept { return mean.size(); }

  std::vector<double> apply(std::span<const double> row) const;
  std::vector<double> invert(std::span<const double> row) const;
  Matrix apply(const Matrix& m) const;
  Matrix invert(const Matrix& m) const;
};

inline constexpr double kDegenerateStd = 1e-12;

/// Statistics over the rows where `mask` is true (all rows if mask is empty).
/// Throws "empty dataset" if no row qualifies.
StandardizationStats fit_standardization(const Matrix& m, const std::vector<bool>& mask = {});

std::pair<Matrix, StandardizationStats> standardize(const Matrix& m);

}  // namespace npepfn
