// Copyright 2026 The MoLEx Authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major matrices of doubles and the handful of kernels the rest of
// the library is built on. Every reduction runs in a fixed order (row-major,
// left to right) so results are bitwise reproducible.

#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace molex {

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidRowError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

class Matrix {
 public:
  Matrix() = default;

  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw ShapeError("matrix data length " + std::to_string(data_.size()) +
                       " != " + std::to_string(rows_) + "x" + std::to_string(cols_));
    }
  }

  Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      if (r.size() != cols_) throw ShapeError("ragged matrix literal");
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  static Matrix row_vector(std::span<const double> values) {
    return Matrix(1, values.size(), std::vector<double>(values.begin(), values.end()));
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  friend bool operator==(const Matrix& a, const Matrix& b) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

namespace detail {

inline std::string shape_str(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

inline void require_finite(const Matrix& m, const char* op) {
  if (!m.all_finite()) throw NumericError(std::string(op) + ": non-finite result");
}

}  // namespace detail

// a (n×k) · b (k×m).
inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: " + detail::shape_str(a) + " x " + detail::shape_str(b));
  }
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double sum = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) sum += a(i, k) * b(k, j);
      out(i, j) = sum;
    }
  }
  detail::require_finite(out, "matmul");
  return out;
}

// a (n×k) · bᵀ where b is (m×k). The natural layout for "tokens as rows".
inline Matrix matmul_bt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_bt: " + detail::shape_str(a) + " x " + detail::shape_str(b) + "^T");
  }
  Matrix out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const auto ar = a.row(i);
    for (std::size_t j = 0; j < b.rows(); ++j) {
      const auto br = b.row(j);
      double sum = 0.0;
      for (std::size_t k = 0; k < ar.size(); ++k) sum += ar[k] * br[k];
      out(i, j) = sum;
    }
  }
  detail::require_finite(out, "matmul_bt");
  return out;
}

// aᵀ · b where a is (k×n) and b is (k×m). Used for weight gradients.
inline Matrix matmul_at(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) {
    throw ShapeError("matmul_at: " + detail::shape_str(a) + "^T x " + detail::shape_str(b));
  }
  Matrix out(a.cols(), b.cols());
  for (std::size_t i = 0; i < a.cols(); ++i) {
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double sum = 0.0;
      for (std::size_t k = 0; k < a.rows(); ++k) sum += a(k, i) * b(k, j);
      out(i, j) = sum;
    }
  }
  detail::require_finite(out, "matmul_at");
  return out;
}

inline Matrix transpose(const Matrix& m) {
  Matrix out(m.cols(), m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) out(j, i) = m(i, j);
  return out;
}

inline void add_inplace(Matrix& dst, const Matrix& src, double scale = 1.0) {
  if (!dst.same_shape(src)) {
    throw ShapeError("add: " + detail::shape_str(dst) + " vs " + detail::shape_str(src));
  }
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += scale * src[i];
}

inline Matrix add(const Matrix& a, const Matrix& b) {
  Matrix out = a;
  add_inplace(out, b);
  return out;
}

inline Matrix scaled(const Matrix& m, double s) {
  Matrix out = m;
  for (double& v : out.data()) v *= s;
  return out;
}

inline double sum_squares(const Matrix& m) {
  double s = 0.0;
  for (double v : m.data()) s += v * v;
  return s;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm2(std::span<const double> v) { return std::sqrt(dot(v, v)); }

// Mean over rows, returned as 1×cols.
inline Matrix mean_rows(const Matrix& m) {
  Matrix out(1, m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) out(0, j) += m(i, j);
  const double inv = 1.0 / static_cast<double>(m.rows());
  for (double& v : out.data()) v *= inv;
  return out;
}

// Numerically stable softmax of one row. -inf entries are masked sentinels and
// map to exactly 0.
inline void softmax_row(std::span<const double> in, std::span<double> out) {
  double mx = kNegInf;
  for (double v : in) {
    if (std::isnan(v) || v == std::numeric_limits<double>::infinity()) {
      throw NumericError("row_softmax: non-finite score");
    }
    if (v > mx) mx = v;
  }
  if (mx == kNegInf) throw InvalidRowError("row_softmax: row is entirely -inf");
  double total = 0.0;
  for (std::size_t j = 0; j < in.size(); ++j) {
    out[j] = in[j] == kNegInf ? 0.0 : std::exp(in[j] - mx);
    total += out[j];
  }
  for (std::size_t j = 0; j < in.size(); ++j) out[j] /= total;
}

inline Matrix row_softmax(const Matrix& m) {
  Matrix out(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i) softmax_row(m.row(i), out.row(i));
  return out;
}

enum class ActivationKind { kRelu, kGelu, kSigmoid, kIdentity };

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double activate(double x, ActivationKind kind) {
  switch (kind) {
    case ActivationKind::kRelu: return x > 0.0 ? x : 0.0;
    case ActivationKind::kGelu: return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0)));
    case ActivationKind::kSigmoid: return sigmoid(x);
    case ActivationKind::kIdentity: return x;
  }
  return x;
}

// d act / dx evaluated at pre-activation x.
inline double activate_grad(double x, ActivationKind kind) {
  switch (kind) {
    case ActivationKind::kRelu: return x > 0.0 ? 1.0 : 0.0;
    case ActivationKind::kGelu: {
      constexpr double kInvSqrt2Pi = 0.39894228040143267794;
      return 0.5 * (1.0 + std::erf(x / std::sqrt(2.0))) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
    }
    case ActivationKind::kSigmoid: {
      const double s = sigmoid(x);
      return s * (1.0 - s);
    }
    case ActivationKind::kIdentity: return 1.0;
  }
  return 1.0;
}

inline Matrix activation(const Matrix& m, ActivationKind kind) {
  if (kind == ActivationKind::kIdentity) return m;
  Matrix out(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.size(); ++i) out[i] = activate(m[i], kind);
  detail::require_finite(out, "activation");
  return out;
}

inline const char* activation_name(ActivationKind kind) {
  switch (kind) {
    case ActivationKind::kRelu: return "relu";
    case ActivationKind::kGelu: return "gelu";
    case ActivationKind::kSigmoid: return "sigmoid";
    case ActivationKind::kIdentity: return "identity";
  }
  return "identity";
}

inline ActivationKind parse_activation(const std::string& name) {
  if (name == "relu") return ActivationKind::kRelu;
  if (name == "gelu") return ActivationKind::kGelu;
  if (name == "sigmoid") return ActivationKind::kSigmoid;
  if (name == "identity") return ActivationKind::kIdentity;
  throw std::invalid_argument("unknown activation '" + name + "'");
}

}  // namespace molex
