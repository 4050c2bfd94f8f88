#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "npepfn/dataset.hpp"

namespace npepfn {

// CSV with header theta_0..theta_{d-1},x_0..x_{k-1},valid. Values are
// written with 17 significant digits so finite doubles round-trip exactly.

void write_dataset_csv(const SimulationDataset& data, std::ostream& out);
void write_dataset_csv(const SimulationDataset& data, const std::filesystem::path& path);
SimulationDataset read_dataset_csv(std::istream& in);
SimulationDataset read_dataset_csv(const std::filesystem::path& path);

/// Generic numeric table: one header line of column names, then rows.
struct NumericTable {
  std::vector<std::string> columns;
  Matrix values;
};

void write_table_csv(const NumericTable& table, std::ostream& out);
void write_table_csv(const NumericTable& table, const std::filesystem::path& path);
NumericTable read_table_csv(std::istream& in);
NumericTable read_table_csv(const std::filesystem::path& path);

/// Shorthand: matrix with columns named prefix_0..prefix_{k-1}.
void write_matrix_csv(const Matrix& m, const std::string& prefix, const std::filesystem::path& path);

std::string format_double(double v);

}  // namespace npepfn
