#pragma once

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <complex>
#include <limits>
#include <stdexcept>
#include <vector>

#include "acelab/matrix.hpp"

namespace acelab {

struct SvdResult {
  Matrix u;                       // m x k, orthonormal columns
  std::vector<double> sigma;      // k, non-negative descending
  Matrix v;                       // n x k, orthonormal columns
};

inline SvdResult svd(const Matrix& m) {
  if (!m.all_finite()) throw std::invalid_argument("svd: non-finite input");
  Eigen::BDCSVD<EMat> dec(m.map(), Eigen::ComputeThinU | Eigen::ComputeThinV);
  if (dec.info() != Eigen::Success) throw std::runtime_error("svd: did not converge");
  SvdResult r;
  const int k = static_cast<int>(dec.singularValues().size());
  r.u = Matrix(m.rows, k);
  r.v = Matrix(m.cols, k);
  r.u.map() = dec.matrixU();
  r.v.map() = dec.matrixV();
  r.sigma.assign(dec.singularValues().data(), dec.singularValues().data() + k);
  return r;
}

struct QrResult {
  Matrix q;                        // m x rank
  Matrix r;                        // rank x n
  std::vector<int> dropped_columns;  // input columns below rank tolerance
};

// Orthonormalizes the columns of m in input order (modified Gram-Schmidt with
// re-orthogonalization). Columns falling below the rank tolerance are dropped
// and reported rather than silently producing a degenerate basis.
inline QrResult qr_orthonormalize(const Matrix& m) {
  if (m.rows < m.cols) throw std::invalid_argument("qr: more columns than rows");
  QrResult out;
  const double scale = std::max(1.0, m.map().norm());
  const double tol = 1e-12 * scale;

  EMat q(m.rows, m.cols);
  std::vector<std::vector<double>> rcols;  // column j of R over kept basis
  int rank = 0;
  for (int j = 0; j < m.cols; ++j) {
    Eigen::VectorXd v = m.map().col(j);
    std::vector<double> rj(rank, 0.0);
    for (int pass = 0; pass < 2; ++pass) {
      for (int i = 0; i < rank; ++i) {
        double c = q.col(i).dot(v);
        rj[i] += c;
        v -= c * q.col(i);
      }
    }
    double nv = v.norm();
    if (nv <= tol) {
      out.dropped_columns.push_back(j);
      continue;
    }
    rj.push_back(nv);
    q.col(rank) = v / nv;
    rcols.push_back(std::move(rj));
    ++rank;
  }
  out.q = Matrix(m.rows, rank);
  out.q.map() = q.leftCols(rank);
  out.r = Matrix(rank, rank);
  for (int j = 0; j < rank; ++j)
    for (std::size_t i = 0; i < rcols[j].size(); ++i)
      out.r(static_cast<int>(i), j) = rcols[j][i];
  return out;
}

// Eigenvalues of a general square real matrix (unordered, conjugate-closed).
inline std::vector<std::complex<double>> eig_general(const Matrix& m) {
  if (m.rows != m.cols) throw std::invalid_argument("eig_general: matrix not square");
  if (!m.all_finite()) throw std::invalid_argument("eig_general: non-finite input");
  if (m.rows == 0) return {};
  Eigen::EigenSolver<EMat> dec(m.map(), /*computeEigenvectors=*/false);
  if (dec.info() != Eigen::Success) throw std::runtime_error("eig_general: did not converge");
  std::vector<std::complex<double>> ev(m.rows);
  for (int i = 0; i < m.rows; ++i) ev[i] = dec.eigenvalues()[i];
  return ev;
}

struct LeastSquaresResult {
  Matrix coeffs;         // n x k solving min ||X B - Y||^2 + ridge ||B||^2
  bool min_norm = false;  // set when ridge = 0 hit a singular system
};

inline LeastSquaresResult solve_least_squares(const Matrix& x, const Matrix& y,
                                              double ridge = 0.0) {
  if (x.rows != y.rows) throw std::invalid_argument("least_squares: row mismatch");
  if (ridge < 0.0) throw std::invalid_argument("least_squares: negative ridge");
  LeastSquaresResult out;
  out.coeffs = Matrix(x.cols, y.cols);
  if (ridge > 0.0) {
    EMat g = x.map().transpose() * x.map();
    g.diagonal().array() += ridge;
    out.coeffs.map() = g.ldlt().solve(x.map().transpose() * y.map());
    return out;
  }
  Eigen::CompleteOrthogonalDecomposition<EMat> dec(x.map());
  if (dec.rank() < x.cols) out.min_norm = true;
  out.coeffs.map() = dec.solve(y.map());
  return out;
}

// Lower Cholesky factor of a symmetric positive definite matrix.
inline Matrix cholesky_lower(const Matrix& a) {
  if (a.rows != a.cols) throw std::invalid_argument("cholesky: matrix not square");
  Eigen::LLT<EMat> llt(a.map());
  if (llt.info() != Eigen::Success) throw std::runtime_error("cholesky: matrix not positive definite");
  Matrix l(a.rows, a.cols);
  l.map() = llt.matrixL();
  return l;
}

// Square-root factor G with G G^T = S for symmetric PSD S (eigen route, so
// exact semidefiniteness is fine; tiny negative eigenvalues are clamped).
inline Matrix psd_sqrt_factor(const Matrix& s) {
  if (s.rows != s.cols) throw std::invalid_argument("psd_sqrt_factor: matrix not square");
  Eigen::SelfAdjointEigenSolver<EMat> es(s.map());
  if (es.info() != Eigen::Success) throw std::runtime_error("psd_sqrt_factor: eigensolver failed");
  Matrix g(s.rows, s.cols);
  Eigen::VectorXd d = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  g.map() = es.eigenvectors() * d.asDiagonal();
  return g;
}

inline bool is_positive_definite(const Matrix& a) {
  if (a.rows != a.cols) return false;
  Eigen::LLT<EMat> llt(a.map());
  return llt.info() == Eigen::Success;
}

// Smallest rank whose cumulative squared-singular-value share reaches the
// energy fraction.
inline int rank_from_energy(const std::vector<double>& sigma, double energy) {
  double total = 0.0;
  for (double s : sigma) total += s * s;
  if (total <= 0.0) throw std::invalid_argument("rank selection: zero spectrum");
  double acc = 0.0;
  for (std::size_t i = 0; i < sigma.size(); ++i) {
    acc += sigma[i] * sigma[i];
    if (acc / total >= energy) return static_cast<int>(i) + 1;
  }
  return static_cast<int>(sigma.size());
}

// Coefficient of determination, pooled over all response columns.
inline double r_squared(const Matrix& predicted, const Matrix& actual) {
  if (predicted.rows != actual.rows || predicted.cols != actual.cols)
    throw std::invalid_argument("r_squared: shape mismatch");
  Matrix mu = column_means(actual);
  double ss_res = 0.0;
  double ss_tot = 0.0;
  for (int i = 0; i < actual.rows; ++i)
    for (int j = 0; j < actual.cols; ++j) {
      double e = actual(i, j) - predicted(i, j);
      double d = actual(i, j) - mu(0, j);
      ss_res += e * e;
      ss_tot += d * d;
    }
  if (ss_tot == 0.0) return ss_res == 0.0 ? 1.0 : -std::numeric_limits<double>::infinity();
  return 1.0 - ss_res / ss_tot;
}

}  // namespace acelab
