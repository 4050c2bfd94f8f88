#include "npepfn/matrix.hpp"

#include <algorithm>

#include "npepfn/errors.hpp"

namespace npepfn {

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> rows) {
  rows_ = rows.size();
  cols_ = rows_ == 0 ? 0 : rows.begin()->size();
  data_.reserve(rows_ * cols_);
  for (const auto& r : rows) {
    if (r.size() != cols_) throw ShapeError("ragged matrix initializer");
    data_.insert(data_.end(), r.begin(), r.end());
  }
}

Matrix Matrix::from_rows(const std::vector<std::vector<double>>& rows) {
  Matrix m(0, rows.empty() ? 0 : rows.front().size());
  m.reserve_rows(rows.size());
  for (const auto& r : rows) m.append_row(r);
  return m;
}

std::vector<double> Matrix::column(std::size_t j) const {
  std::vector<double> out(rows_);
  for (std::size_t i = 0; i < rows_; ++i) out[i] = (*this)(i, j);
  return out;
}

std::vector<double> Matrix::column_means() const {
  std::vector<double> mean(cols_, 0.0);
  for (std::size_t i = 0; i < rows_; ++i)
    for (std::size_t j = 0; j < cols_; ++j) mean[j] += (*this)(i, j);
  if (rows_ > 0)
    for (auto& v : mean) v /= static_cast<double>(rows_);
  return mean;
}

void Matrix::append_row(std::span<const double> values) {
  if (rows_ == 0 && cols_ == 0) cols_ = values.size();
  if (values.size() != cols_)
    throw ShapeError("row width " + std::to_string(values.size()) + " != " + std::to_string(cols_));
  data_.insert(data_.end(), values.begin(), values.end());
  ++rows_;
}

Matrix Matrix::select_rows(std::span<const std::size_t> indices) const {
  Matrix out(indices.size(), cols_);
  for (std::size_t k = 0; k < indices.size(); ++k) {
    auto src = row(indices[k]);
    std::copy(src.begin(), src.end(), out.row(k).begin());
  }
  return out;
}

Matrix Matrix::select_cols(std::span<const std::size_t> indices) const {
  Matrix out(rows_, indices.size());
  for (std::size_t i = 0; i < rows_; ++i)
    for (std::size_t k = 0; k < indices.size(); ++k) out(i, k) = (*this)(i, indices[k]);
  return out;
}

Matrix Matrix::hconcat(const Matrix& other) const {
  if (other.rows_ != rows_) throw ShapeError("hconcat: row counts differ");
  Matrix out(rows_, cols_ + other.cols_);
  for (std::size_t i = 0; i < rows_; ++i) {
    auto dst = out.row(i);
    std::copy(row(i).begin(), row(i).end(), dst.begin());
    std::copy(other.row(i).begin(), other.row(i).end(), dst.begin() + static_cast<std::ptrdiff_t>(cols_));
  }
  return out;
}

}  // namespace npepfn
