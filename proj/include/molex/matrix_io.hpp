// Copyright 2026 The MoLEx Authors
// SPDX-License-Identifier: Apache-2.0
//
// Text format: a "rows cols" header line, then one line per row of
// space-separated decimals with 17 significant digits.

#pragma once

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "molex/numerics.hpp"

namespace molex {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline void write_matrix(std::ostream& os, const Matrix& m) {
  os << m.rows() << ' ' << m.cols() << '\n';
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t j = 0; j < m.cols(); ++j) {
      if (j) os << ' ';
      os << format_double(m(i, j));
    }
    os << '\n';
  }
}

inline std::string matrix_to_string(const Matrix& m) {
  std::ostringstream os;
  write_matrix(os, m);
  return os.str();
}

inline Matrix read_matrix(std::istream& is) {
  long long rows = -1, cols = -1;
  if (!(is >> rows >> cols) || rows < 0 || cols < 0) throw FormatError("matrix: bad header");
  std::vector<double> data(static_cast<std::size_t>(rows * cols));
  for (auto& v : data) {
    std::string tok;
    if (!(is >> tok)) throw FormatError("matrix: truncated data");
    // strtod, unlike stod, accepts subnormal literals.
    char* end = nullptr;
    v = std::strtod(tok.c_str(), &end);
    if (end != tok.c_str() + tok.size() || !std::isfinite(v)) throw FormatError("matrix: bad literal '" + tok + "'");
  }
  return Matrix(static_cast<std::size_t>(rows), static_cast<std::size_t>(cols), std::move(data));
}

inline Matrix matrix_from_string(const std::string& s) {
  std::istringstream is(s);
  return read_matrix(is);
}

inline void save_matrix(const std::filesystem::path& path, const Matrix& m) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  write_matrix(os, m);
}

inline Matrix load_matrix(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  return read_matrix(is);
}

}  // namespace molex
