#include "npepfn/standardize.hpp"

#include <cmath>

#include "npepfn/errors.hpp"

namespace npepfn {

std::vector<double> StandardizationStats::apply(std::span<const double> row) const {
  if (row.size() != mean.size()) throw ShapeError("standardize: width mismatch");
  std::vector<double> out(row.size());
  for (std::size_t j = 0; j < row.size(); ++j) out[j] = (row[j] - mean[j]) / std[j];
  return out;
}

std::vector<double> StandardizationStats::invert(std::span<const double> row) const {
  if (row.size() != mean.size()) throw ShapeError("unstandardize: width mismatch");
  std::vector<double> out(row.size());
  for (std::size_t j = 0; j < row.size(); ++j) out[j] = row[j] * std[j] + mean[j];
  return out;
}

Matrix StandardizationStats::apply(const Matrix& m) const {
  if (m.cols() != mean.size()) throw ShapeError("standardize: width mismatch");
  Matrix out(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) out(i, j) = (m(i, j) - mean[j]) / std[j];
  return out;
}

Matrix StandardizationStats::invert(const Matrix& m) const {
  if (m.cols() != mean.size()) throw ShapeError("unstandardize: width mismatch");
  Matrix out(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) out(i, j) = m(i, j) * std[j] + mean[j];
  return out;
}

StandardizationStats fit_standardization(const Matrix& m, const std::vector<bool>& mask) {
  if (!mask.empty() && mask.size() != m.rows()) throw ShapeError("standardize: mask length mismatch");
  const std::size_t d = m.cols();
  StandardizationStats s{std::vector<double>(d, 0.0), std::vector<double>(d, 0.0)};
  std::size_t n = 0;
  for (std::size_t i = 0; i < m.rows(); ++i) {
    if (!mask.empty() && !mask[i]) continue;
    ++n;
    for (std::size_t j = 0; j < d; ++j) s.mean[j] += m(i, j);
  }
  if (n == 0) throw Error("empty dataset");
  for (auto& v : s.mean) v /= static_cast<double>(n);
  // Two-pass variance for accuracy.
  for (std::size_t i = 0; i < m.rows(); ++i) {
    if (!mask.empty() && !mask[i]) continue;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = m(i, j) - s.mean[j];
      s.std[j] += c * c;
    }
  }
  for (auto& v : s.std) {
    v = std::sqrt(v / static_cast<double>(n));
    if (!(v >= kDegenerateStd)) v = 1.0;
  }
  return s;
}

std::pair<Matrix, StandardizationStats> standardize(const Matrix& m) {
  auto stats = fit_standardization(m);
  return {stats.apply(m), std::move(stats)};
}

}  // namespace npepfn
