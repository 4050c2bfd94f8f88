#include "npepfn/dataset_io.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "npepfn/errors.hpp"

namespace npepfn {
namespace {

std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(',', start);
    auto field = line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start);
    while (!field.empty() && (field.front() == ' ' || field.front() == '\t')) field.remove_prefix(1);
    while (!field.empty() && (field.back() == ' ' || field.back() == '\t' || field.back() == '\r'))
      field.remove_suffix(1);
    out.push_back(field);
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

double parse_double(std::string_view field, std::size_t line_no) {
  double v = 0.0;
  const auto* first = field.data();
  const auto* last = field.data() + field.size();
  if (!field.empty() && *first == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last || field.empty())
    throw ParseError("not a number: '" + std::string(field) + "'", line_no);
  return v;
}

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  return in;
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  return out;
}

}  // namespace

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_dataset_csv(const SimulationDataset& data, std::ostream& out) {
  std::string line;
  for (std::size_t j = 0; j < data.theta_dim(); ++j) line += "theta_" + std::to_string(j) + ",";
  for (std::size_t j = 0; j < data.obs_dim(); ++j) line += "x_" + std::to_string(j) + ",";
  line += "valid\n";
  out << line;
  for (std::size_t i = 0; i < data.size(); ++i) {
    line.clear();
    for (double v : data.thetas().row(i)) line += format_double(v) + ",";
    for (double v : data.xs().row(i)) line += format_double(v) + ",";
    line += data.valid()[i] ? "1\n" : "0\n";
    out << line;
  }
}

void write_dataset_csv(const SimulationDataset& data, const std::filesystem::path& path) {
  auto out = open_out(path);
  write_dataset_csv(data, out);
}

SimulationDataset read_dataset_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw ParseError("missing header", 1);
  const auto header = split_commas(line);
  std::size_t theta_dim = 0, obs_dim = 0, k = 0;
  while (k < header.size() && header[k] == "theta_" + std::to_string(theta_dim)) ++theta_dim, ++k;
  while (k < header.size() && header[k] == "x_" + std::to_string(obs_dim)) ++obs_dim, ++k;
  if (k + 1 != header.size() || header[k] != "valid")
    throw ParseError("header must be theta_0..,x_0..,valid", 1);

  SimulationDataset data(theta_dim, obs_dim);
  std::vector<double> theta(theta_dim), x(obs_dim);
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto fields = split_commas(line);
    if (fields.size() != header.size())
      throw ParseError("row " + std::to_string(data.size()) + " has " + std::to_string(fields.size()) +
                           " fields, expected " + std::to_string(header.size()),
                       line_no);
    for (std::size_t j = 0; j < theta_dim; ++j) theta[j] = parse_double(fields[j], line_no);
    for (std::size_t j = 0; j < obs_dim; ++j) x[j] = parse_double(fields[theta_dim + j], line_no);
    const auto flag = fields.back();
    if (flag != "0" && flag != "1") throw ParseError("valid flag must be 0 or 1", line_no);
    data.append(theta, x, flag == "1");
  }
  return data;
}

SimulationDataset read_dataset_csv(const std::filesystem::path& path) {
  auto in = open_in(path);
  return read_dataset_csv(in);
}

void write_table_csv(const NumericTable& table, std::ostream& out) {
  if (table.columns.size() != table.values.cols()) throw ShapeError("table: header width mismatch");
  for (std::size_t j = 0; j < table.columns.size(); ++j) out << (j ? "," : "") << table.columns[j];
  out << '\n';
  for (std::size_t i = 0; i < table.values.rows(); ++i) {
    std::string line;
    for (std::size_t j = 0; j < table.values.cols(); ++j) {
      if (j) line += ',';
      line += format_double(table.values(i, j));
    }
    out << line << '\n';
  }
}

void write_table_csv(const NumericTable& table, const std::filesystem::path& path) {
  auto out = open_out(path);
  write_table_csv(table, out);
}

NumericTable read_table_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw ParseError("missing header", 1);
  NumericTable table;
  for (auto f : split_commas(line)) table.columns.emplace_back(f);
  table.values = Matrix(0, table.columns.size());
  std::vector<double> row(table.columns.size());
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto fields = split_commas(line);
    if (fields.size() != row.size())
      throw ParseError("expected " + std::to_string(row.size()) + " fields, got " + std::to_string(fields.size()),
                       line_no);
    for (std::size_t j = 0; j < row.size(); ++j) row[j] = parse_double(fields[j], line_no);
    table.values.append_row(row);
  }
  return table;
}

NumericTable read_table_csv(const std::filesystem::path& path) {
  auto in = open_in(path);
  return read_table_csv(in);
}

void write_matrix_csv(const Matrix& m, const std::string& prefix, const std::filesystem::path& path) {
  NumericTable t;
  for (std::size_t j = 0; j < m.cols(); ++j) t.columns.push_back(prefix + "_" + std::to_string(j));
  t.values = m;
  write_table_csv(t, path);
}

}  // namespace npepfn
