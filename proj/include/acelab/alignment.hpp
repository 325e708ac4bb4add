#pragma once

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "acelab/linalg.hpp"
#include "acelab/matrix.hpp"

namespace acelab {

// Normalized projector overlap tr(P_i P_j) / tr(P_i).
inline double projector_overlap(const Matrix& p_i, const Matrix& p_j) {
  if (p_i.rows != p_i.cols || p_j.rows != p_j.cols || p_i.rows != p_j.rows)
    throw std::invalid_argument("projector_overlap: shape mismatch");
  const double tr_i = trace(p_i);
  if (tr_i < 0.5) throw std::invalid_argument("projector_overlap: zero-rank projector");
  return trace(matmul(p_i, p_j)) / tr_i;
}

// Principal angles in degrees, ascending, between orthonormal bases.
// Singular values of Q_i^T Q_j are clamped to [0, 1] before arccos.
inline std::vector<double> principal_angles(const Matrix& q_i, const Matrix& q_j) {
  if (q_i.rows != q_j.rows) throw std::invalid_argument("principal_angles: ambient dim mismatch");
  auto dec = svd(matmul(q_i, q_j, true, false));
  std::vector<double> deg;
  deg.reserve(dec.sigma.size());
  for (double s : dec.sigma) {
    const double c = std::min(1.0, std::max(0.0, s));
    deg.push_back(std::acos(c) * 180.0 / std::numbers::pi);
  }
  std::sort(deg.begin(), deg.end());
  return deg;
}

// Canonical correlations between two score matrices (N x r each), descending
// in [0, 1]. A small ridge keeps the whitening well conditioned; for r = 1
// this equals |Pearson correlation|.
inline std::vector<double> cca(const Matrix& z_i, const Matrix& z_j, double ridge = 1e-8) {
  if (z_i.rows != z_j.rows) throw std::invalid_argument("cca: sample count mismatch");
  if (z_i.rows <= std::max(z_i.cols, z_j.cols))
    throw std::invalid_argument("cca: need more samples than score dimensions");
  Matrix a = center_columns(z_i, column_means(z_i));
  Matrix b = center_columns(z_j, column_means(z_j));
  const double n = static_cast<double>(a.rows - 1);
  Matrix caa = matmul(a, a, true, false, 1.0 / n);
  Matrix cbb = matmul(b, b, true, false, 1.0 / n);
  Matrix cab = matmul(a, b, true, false, 1.0 / n);
  const double ra = ridge * std::max(1.0, trace(caa) / caa.rows);
  const double rb = ridge * std::max(1.0, trace(cbb) / cbb.rows);
  for (int i = 0; i < caa.rows; ++i) caa(i, i) += ra;
  for (int i = 0; i < cbb.rows; ++i) cbb(i, i) += rb;

  // whitened cross-covariance via inverse sqrt factors
  auto inv_sqrt = [](const Matrix& c) {
    Eigen::SelfAdjointEigenSolver<EMat> es(c.map());
    Eigen::VectorXd d = es.eigenvalues().cwiseMax(1e-300).cwiseInverse().cwiseSqrt();
    Matrix out(c.rows, c.cols);
    out.map() = es.eigenvectors() * d.asDiagonal() * es.eigenvectors().transpose();
    return out;
  };
  Matrix w = matmul(matmul(inv_sqrt(caa), cab), inv_sqrt(cbb));
  auto dec = svd(w);
  std::vector<double> rho;
  rho.reserve(dec.sigma.size());
  for (double s : dec.sigma) rho.push_back(std::min(1.0, std::max(0.0, s)));
  return rho;
}

// Pairwise geometry/statistics between two cores, a Table-2-style row.
struct AlignmentReport {
  std::string pair_id;
  double projector_overlap = 0.0;
  std::vector<double> principal_angles_deg;  // ascending
  std::vector<double> canonical_correlations;  // descending
};

// Shared coordinate frame for m score matrices (MAXVAR-style generalized
// CCA): whiten each block, stack, take the top-r left singular vectors as the
// consensus scores G, then map each block onto G by least squares.
struct CanonicalAlignment {
  std::vector<Matrix> maps;  // per model: r x r, scores -> shared frame
  Matrix shared_scores;      // N x r
};

inline CanonicalAlignment canonical_align(const std::vector<Matrix>& scores, int rank,
                                          double ridge = 1e-8) {
  if (scores.size() < 2) throw std::invalid_argument("canonical_align: need at least two models");
  const int n = scores[0].rows;
  for (const Matrix& z : scores) {
    if (z.rows != n) throw std::invalid_argument("canonical_align: sample count mismatch");
    if (z.cols != rank) throw std::invalid_argument("canonical_align: rank mismatch");
  }
  std::vector<Matrix> centered;
  Matrix stacked(n, rank * static_cast<int>(scores.size()));
  for (std::size_t m = 0; m < scores.size(); ++m) {
    Matrix c = center_columns(scores[m], column_means(scores[m]));
    Matrix cov = matmul(c, c, true, false, 1.0 / (n - 1));
    const double r = ridge * std::max(1.0, trace(cov) / cov.rows);
    for (int i = 0; i < cov.rows; ++i) cov(i, i) += r;
    Eigen::SelfAdjointEigenSolver<EMat> es(cov.map());
    Eigen::VectorXd d = es.eigenvalues().cwiseMax(1e-300).cwiseInverse().cwiseSqrt();
    Matrix white(rank, rank);
    white.map() = es.eigenvectors() * d.asDiagonal() * es.eigenvectors().transpose();
    Matrix cw = matmul(c, white);
    stacked.map().block(0, static_cast<int>(m) * rank, n, rank) = cw.map();
    centered.push_back(std::move(c));
  }
  auto dec = svd(stacked);
  CanonicalAlignment out;
  out.shared_scores = dec.u.block(0, 0, n, rank);
  out.maps.reserve(scores.size());
  for (const Matrix& c : centered)
    out.maps.push_back(solve_least_squares(c, out.shared_scores, ridge).coeffs);
  return out;
}

// Control alignment over full activations: center each model's activations,
// concatenate along features, SVD, truncate to min(energy rank, cap_fraction
// * D), then fit per-model least-squares maps onto the shared scores and
// orthonormalize each map into a subspace basis.
struct ConsensusResult {
  int rank = 0;
  std::vector<Matrix> bases;  // per model: D x rank, orthonormal
  std::vector<Matrix> means;  // per model: 1 x D
};

inline ConsensusResult consensus_subspace(const std::vector<Matrix>& activations, double energy,
                                          double cap_fraction) {
  if (activations.empty()) throw std::invalid_argument("consensus: no activations");
  const int n = activations[0].rows;
  const int d = activations[0].cols;
  for (const Matrix& h : activations)
    if (h.rows != n || h.cols != d)
      throw std::invalid_argument("consensus: activation shape mismatch");

  ConsensusResult out;
  std::vector<Matrix> centered;
  Matrix stacked(n, d * static_cast<int>(activations.size()));
  for (std::size_t m = 0; m < activations.size(); ++m) {
    out.means.push_back(column_means(activations[m]));
    Matrix c = center_columns(activations[m], out.means.back());
    stacked.map().block(0, static_cast<int>(m) * d, n, d) = c.map();
    centered.push_back(std::move(c));
  }
  auto dec = svd(stacked);
  const int energy_rank = rank_from_energy(dec.sigma, energy);
  const int cap = static_cast<int>(std::floor(cap_fraction * d));
  out.rank = std::min(energy_rank, cap);
  Matrix shared = dec.u.block(0, 0, n, out.rank);
  for (const Matrix& c : centered) {
    Matrix map = solve_least_squares(c, shared, 0.0).coeffs;  // D x rank
    out.bases.push_back(qr_orthonormalize(map).q);
  }
  return out;
}

}  // namespace acelab
