#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "smtgp/types.hpp"

namespace smtgp {

/**
 * Matrix file formats.
 *
 * csv        RFC-4180-style rows of numeric cells; optional header row.
 * binary-v1  magic "KGPM", version byte 1, u64 rows, u64 cols, then
 *            rows*cols little-endian IEEE-754 doubles in column-major
 *            order. Round-trips are bit-exact.
 */
enum class MatrixFormat { Csv, BinaryV1 };

inline MatrixFormat matrix_format_from_name(const std::string& name) {
  if (name == "csv") return MatrixFormat::Csv;
  if (name == "binary-v1" || name == "binary") return MatrixFormat::BinaryV1;
  throw std::invalid_argument("unknown matrix format: " + name);
}

namespace detail {

constexpr char kMatrixMagic[4] = {'K', 'G', 'P', 'M'};

template <typename T>
void write_le(std::ostream& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big)
    std::reverse(std::begin(bytes), std::end(bytes));
  out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T read_le(std::istream& in) {
  unsigned char bytes[sizeof(T)];
  in.read(reinterpret_cast<char*>(bytes), sizeof(T));
  if (!in) throw std::runtime_error("matrix file truncated");
  if constexpr (std::endian::native == std::endian::big)
    std::reverse(std::begin(bytes), std::end(bytes));
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

inline void save_matrix_binary(std::ostream& out, const Matrix& m) {
  out.write(kMatrixMagic, 4);
  out.put(static_cast<char>(1));
  write_le<std::uint64_t>(out, static_cast<std::uint64_t>(m.rows()));
  write_le<std::uint64_t>(out, static_cast<std::uint64_t>(m.cols()));
  for (Index j = 0; j < m.cols(); ++j)
    for (Index i = 0; i < m.rows(); ++i) write_le<double>(out, m(i, j));
}

inline Matrix load_matrix_binary(std::istream& in, const std::string& what) {
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMatrixMagic, 4) != 0)
    throw std::runtime_error(what + ": bad magic (not a binary-v1 matrix)");
  const int version = in.get();
  if (version != 1)
    throw std::runtime_error(what + ": unsupported version " +
                             std::to_string(version));
  const auto rows = static_cast<Index>(read_le<std::uint64_t>(in));
  const auto cols = static_cast<Index>(read_le<std::uint64_t>(in));
  if (rows < 1 || cols < 1)
    throw std::runtime_error(what + ": invalid dimensions");
  Matrix m(rows, cols);
  for (Index j = 0; j < cols; ++j)
    for (Index i = 0; i < rows; ++i) m(i, j) = read_le<double>(in);
  return m;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cell += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cell += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      cells.push_back(cell);
      cell.clear();
    } else {
      cell += c;
    }
  }
  cells.push_back(cell);
  return cells;
}

inline double parse_numeric_cell(const std::string& cell,
                                 const std::string& what) {
  const char* begin = cell.c_str();
  char* end = nullptr;
  const double v = std::strtod(begin, &end);
  while (end && *end == ' ') ++end;
  if (end == begin || (end && *end != '\0'))
    throw std::runtime_error(what + ": non-numeric cell '" + cell + "'");
  return v;
}

}  // namespace detail

inline void save_matrix(const std::string& path, const Matrix& m,
                        MatrixFormat format) {
  if (m.size() == 0) throw std::invalid_argument("save_matrix: empty matrix");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_matrix: cannot open " + path);
  if (format == MatrixFormat::BinaryV1) {
    detail::save_matrix_binary(out, m);
  } else {
    char buf[64];
    for (Index i = 0; i < m.rows(); ++i) {
      for (Index j = 0; j < m.cols(); ++j) {
        std::snprintf(buf, sizeof(buf), "%.17g", m(i, j));
        out << (j ? "," : "") << buf;
      }
      out << '\n';
    }
  }
  if (!out) throw std::runtime_error("save_matrix: write failed for " + path);
}

inline Matrix load_matrix(const std::string& path, MatrixFormat format,
                          bool csv_has_header = false) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_matrix: cannot open " + path);
  if (format == MatrixFormat::BinaryV1)
    return detail::load_matrix_binary(in, path);

  std::vector<std::vector<double>> rows;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (first && csv_has_header) {
      first = false;
      continue;
    }
    first = false;
    const auto cells = detail::split_csv_line(line);
    std::vector<double> row;
    row.reserve(cells.size());
    for (const auto& cell : cells)
      row.push_back(detail::parse_numeric_cell(cell, path));
    if (!rows.empty() && row.size() != rows.front().size())
      throw std::runtime_error(path + ": ragged rows in CSV");
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw std::runtime_error(path + ": empty matrix file");
  Matrix m(static_cast<Index>(rows.size()),
           static_cast<Index>(rows.front().size()));
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j < m.cols(); ++j)
      m(i, j) = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
  return m;
}

// Detect the on-disk format from the leading bytes.
inline MatrixFormat detect_matrix_format(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("detect_matrix_format: cannot open " + path);
  char magic[4] = {0, 0, 0, 0};
  in.read(magic, 4);
  return std::memcmp(magic, detail::kMatrixMagic, 4) == 0 ? MatrixFormat::BinaryV1
                                                          : MatrixFormat::Csv;
}

}  // namespace smtgp
