#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "jpool/error.hpp"

namespace jpool {

using Dims = std::vector<std::size_t>;

inline std::size_t product(const Dims& dims) {
  return std::accumulate(dims.begin(), dims.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Dims& dims) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < dims.size(); ++i) os << (i ? "," : "") << dims[i];
  os << ']';
  return os.str();
}

/// Dense row-major N-d array of doubles. The slowest-varying extent comes first.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Dims dims, double fill = 0.0) : dims_(std::move(dims)) {
    check_dims(dims_);
    data_.assign(product(dims_), fill);
  }

  Tensor(Dims dims, std::vector<double> data) : dims_(std::move(dims)), data_(std::move(data)) {
    check_dims(dims_);
    if (product(dims_) != data_.size())
      throw ShapeError("tensor: " + std::to_string(data_.size()) + " values for dims " +
                       to_string(dims_));
  }

  const Dims& dims() const { return dims_; }
  std::size_t rank() const { return dims_.size(); }
  std::size_t dim(std::size_t axis) const { return dims_.at(axis); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }
  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  /// Flat offset of a full multi-index.
  std::size_t offset(std::initializer_list<std::size_t> idx) const {
    std::size_t off = 0, axis = 0;
    for (std::size_t i : idx) off = off * dims_[axis++] + i;
    return off;
  }
  double& at(std::initializer_list<std::size_t> idx) { return data_[offset(idx)]; }
  double at(std::initializer_list<std::size_t> idx) const { return data_[offset(idx)]; }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  bool operator==(const Tensor&) const = default;

 private:
  static void check_dims(const Dims& dims) {
    if (dims.empty()) throw ShapeError("tensor: rank must be at least 1");
    for (std::size_t d : dims)
      if (d == 0) throw ShapeError("tensor: zero extent in " + to_string(dims));
  }

  Dims dims_;
  std::vector<double> data_;
};

/// Relabels the extents; the element order is untouched.
inline Tensor reshape(const Tensor& t, Dims new_dims) {
  if (product(new_dims) != t.size())
    throw ShapeError("reshape: " + to_string(t.dims()) + " -> " + to_string(new_dims) +
                     " changes the element count");
  return Tensor(std::move(new_dims), t.storage());
}

inline Tensor reshape(Tensor&& t, Dims new_dims) {
  if (product(new_dims) != t.size())
    throw ShapeError("reshape: " + to_string(t.dims()) + " -> " + to_string(new_dims) +
                     " changes the element count");
  return Tensor(std::move(new_dims), std::move(t.storage()));
}

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {
    if (rows == 0 || cols == 0) throw ShapeError("matrix: zero extent");
  }
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (rows == 0 || cols == 0) throw ShapeError("matrix: zero extent");
    if (rows * cols != data_.size())
      throw ShapeError("matrix: " + std::to_string(data_.size()) + " values for " +
                       std::to_string(rows) + "x" + std::to_string(cols));
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  /// Views a tensor as rows x (everything else), e.g. C x l x h x w -> C x lhw.
  static Matrix from_tensor(const Tensor& t) {
    const std::size_t rows = t.dim(0);
    return Matrix(rows, t.size() / rows, t.storage());
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  Tensor to_tensor() const { return Tensor({rows_, cols_}, data_); }

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// All products accumulate over the contracted index in ascending order, starting
// from 0.0, so results are bitwise equal to the textbook triple loop.

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows())
    throw ShapeError("matmul: " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                     " times " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  Matrix c(a.rows(), b.cols());
  const std::size_t n = b.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double* crow = c.row(i).data();
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      const double* brow = b.row(k).data();
      for (std::size_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
    }
  }
  return c;
}

/// a * b^T without materializing the transpose.
inline Matrix matmul_bt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols())
    throw ShapeError("matmul_bt: inner extents " + std::to_string(a.cols()) + " vs " +
                     std::to_string(b.cols()));
  Matrix c(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const double* arow = a.row(i).data();
    for (std::size_t j = 0; j < b.rows(); ++j) {
      const double* brow = b.row(j).data();
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += arow[k] * brow[k];
      c(i, j) = s;
    }
  }
  return c;
}

/// a^T * b without materializing the transpose.
inline Matrix matmul_at(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows())
    throw ShapeError("matmul_at: inner extents " + std::to_string(a.rows()) + " vs " +
                     std::to_string(b.rows()));
  Matrix c(a.cols(), b.cols());
  const std::size_t n = b.cols();
  for (std::size_t i = 0; i < a.cols(); ++i) {
    double* crow = c.row(i).data();
    for (std::size_t k = 0; k < a.rows(); ++k) {
      const double aki = a(k, i);
      const double* brow = b.row(k).data();
      for (std::size_t j = 0; j < n; ++j) crow[j] += aki * brow[j];
    }
  }
  return c;
}

inline Matrix transpose(const Matrix& m) {
  Matrix t(m.cols(), m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) t(j, i) = m(i, j);
  return t;
}

inline double l2_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

/// Zero vectors pass through unchanged.
inline std::vector<double> l2_normalize(std::span<const double> v) {
  std::vector<double> out(v.begin(), v.end());
  const double n = l2_norm(v);
  if (n > 0.0)
    for (double& x : out) x /= n;
  return out;
}

}  // namespace jpool
