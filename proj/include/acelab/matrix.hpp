#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <stdexcept>
#include <vector>

#include "acelab/rng.hpp"

namespace acelab {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;

// Dense row-major double matrix; the value type everything else is built on.
struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(int r, int c, double fill = 0.0)
      : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, fill) {}

  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rws) {
    Matrix m(static_cast<int>(rws.size()),
             rws.size() ? static_cast<int>(rws.begin()->size()) : 0);
    int i = 0;
    for (const auto& row : rws) {
      int j = 0;
      for (double v : row) m(i, j++) = v;
      ++i;
    }
    return m;
  }

  static Matrix identity(int n) {
    Matrix m(n, n);
    for (int i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  static Matrix randn(int r, int c, Rng& rng, double stddev = 1.0) {
    Matrix m(r, c);
    for (double& v : m.data) v = stddev * rng.normal();
    return m;
  }

  double& operator()(int i, int j) { return data[static_cast<std::size_t>(i) * cols + j]; }
  double operator()(int i, int j) const {
    return data[static_cast<std::size_t>(i) * cols + j];
  }
  double* row_ptr(int i) { return data.data() + static_cast<std::size_t>(i) * cols; }
  const double* row_ptr(int i) const { return data.data() + static_cast<std::size_t>(i) * cols; }

  std::size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }

  EMap map() { return EMap(data.data(), rows, cols); }
  ECMap map() const { return ECMap(data.data(), rows, cols); }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  Matrix transposed() const {
    Matrix t(cols, rows);
    t.map() = map().transpose();
    return t;
  }

  Matrix row(int i) const {
    Matrix r(1, cols);
    for (int j = 0; j < cols; ++j) r(0, j) = (*this)(i, j);
    return r;
  }

  void set_row(int i, const Matrix& r) {
    for (int j = 0; j < cols; ++j) (*this)(i, j) = r(0, j);
  }

  Matrix block(int r0, int c0, int nr, int nc) const {
    Matrix b(nr, nc);
    b.map() = map().block(r0, c0, nr, nc);
    return b;
  }

  double frobenius_norm() const { return map().norm(); }
  double max_abs() const { return data.empty() ? 0.0 : map().cwiseAbs().maxCoeff(); }
};

inline Matrix operator+(const Matrix& a, const Matrix& b) {
  if (a.rows != b.rows || a.cols != b.cols) throw std::invalid_argument("matrix add: shape mismatch");
  Matrix c(a.rows, a.cols);
  c.map() = a.map() + b.map();
  return c;
}

inline Matrix operator-(const Matrix& a, const Matrix& b) {
  if (a.rows != b.rows || a.cols != b.cols) throw std::invalid_argument("matrix sub: shape mismatch");
  Matrix c(a.rows, a.cols);
  c.map() = a.map() - b.map();
  return c;
}

inline Matrix operator*(double s, const Matrix& a) {
  Matrix c(a.rows, a.cols);
  c.map() = s * a.map();
  return c;
}

// C = alpha * op(A) * op(B); transposition via flags avoids materialized copies.
inline Matrix matmul(const Matrix& a, const Matrix& b, bool trans_a = false,
                     bool trans_b = false, double alpha = 1.0) {
  const int am = trans_a ? a.cols : a.rows;
  const int ak = trans_a ? a.rows : a.cols;
  const int bk = trans_b ? b.cols : b.rows;
  const int bn = trans_b ? b.rows : b.cols;
  if (ak != bk) throw std::invalid_argument("matmul: inner dimension mismatch");
  Matrix c(am, bn);
  auto A = a.map();
  auto B = b.map();
  if (!trans_a && !trans_b)
    c.map().noalias() = alpha * (A * B);
  else if (trans_a && !trans_b)
    c.map().noalias() = alpha * (A.transpose() * B);
  else if (!trans_a && trans_b)
    c.map().noalias() = alpha * (A * B.transpose());
  else
    c.map().noalias() = alpha * (A.transpose() * B.transpose());
  return c;
}

inline double dot(const Matrix& a, const Matrix& b) {
  if (a.size() != b.size()) throw std::invalid_argument("dot: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a.data[i] * b.data[i];
  return s;
}

inline double trace(const Matrix& a) {
  double s = 0.0;
  const int n = std::min(a.rows, a.cols);
  for (int i = 0; i < n; ++i) s += a(i, i);
  return s;
}

inline Matrix column_means(const Matrix& a) {
  Matrix mu(1, a.cols);
  if (a.rows == 0) return mu;
  mu.map() = a.map().colwise().mean();
  return mu;
}

// Returns a copy with each column shifted to zero mean.
inline Matrix center_columns(const Matrix& a, const Matrix& mu) {
  Matrix c(a.rows, a.cols);
  c.map() = a.map().rowwise() - mu.map().row(0);
  return c;
}

inline double cosine_similarity(const Matrix& a, const Matrix& b) {
  double na = a.frobenius_norm();
  double nb = b.frobenius_norm();
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot(a, b) / (na * nb);
}

}  // namespace acelab
