#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "acelab/linalg.hpp"
#include "acelab/matrix.hpp"

namespace acelab {

// Linear operator fitted in core coordinates, with its spectrum and fit
// quality. r2_holdout is present only for holdout protocols.
struct OperatorFit {
  Matrix a;  // r x r
  std::vector<std::complex<double>> eigenvalues;
  double r2 = 0.0;
  std::optional<double> r2_holdout;
  double ridge = 0.0;
  bool ridge_fallback = false;  // degenerate covariance forced a ridge
  std::string protocol;
};

// Least-squares next-step operator z_{t+1} ~ A z_t over a set of score
// sequences (each T x r with T >= 2). A singular normal system with zero
// ridge falls back to a small ridge and flags it.
inline OperatorFit fit_state_operator(const std::vector<Matrix>& sequences, double ridge = 0.0) {
  if (sequences.empty()) throw std::invalid_argument("fit_state_operator: no sequences");
  const int r = sequences[0].cols;
  int total = 0;
  for (const Matrix& z : sequences) {
    if (z.cols != r) throw std::invalid_argument("fit_state_operator: dimension mismatch");
    if (z.rows < 2) throw std::invalid_argument("fit_state_operator: sequence shorter than 2");
    total += z.rows - 1;
  }
  Matrix prev(total, r), next(total, r);
  int at = 0;
  for (const Matrix& z : sequences) {
    prev.map().block(at, 0, z.rows - 1, r) = z.map().topRows(z.rows - 1);
    next.map().block(at, 0, z.rows - 1, r) = z.map().bottomRows(z.rows - 1);
    at += z.rows - 1;
  }
  OperatorFit fit;
  fit.ridge = ridge;
  fit.protocol = "state:pooled";
  auto sol = solve_least_squares(prev, next, ridge);
  if (ridge == 0.0 && sol.min_norm) {
    // degenerate covariance; refit with a small relative ridge
    auto dec = svd(prev);
    const double lam = 1e-8 * dec.sigma[0] * dec.sigma[0];
    sol = solve_least_squares(prev, next, lam);
    fit.ridge = lam;
    fit.ridge_fallback = true;
  }
  fit.a = sol.coeffs.transposed();  // so z_next ~ A z_prev column-convention
  Matrix predicted = matmul(prev, sol.coeffs);
  fit.r2 = r_squared(predicted, next);
  fit.eigenvalues = eig_general(fit.a);
  return fit;
}

// Removes the eigenvalue closest to 1 (the Perron-Frobenius eigenvalue of a
// row-stochastic operator, which only reflects normalization).
inline std::vector<std::complex<double>> exclude_perron(
    const std::vector<std::complex<double>>& spectrum) {
  if (spectrum.empty()) return {};
  std::size_t drop = 0;
  double best = std::abs(spectrum[0] - std::complex<double>(1.0, 0.0));
  for (std::size_t i = 1; i < spectrum.size(); ++i) {
    double d = std::abs(spectrum[i] - std::complex<double>(1.0, 0.0));
    if (d < best) {
      best = d;
      drop = i;
    }
  }
  std::vector<std::complex<double>> out;
  out.reserve(spectrum.size() - 1);
  for (std::size_t i = 0; i < spectrum.size(); ++i)
    if (i != drop) out.push_back(spectrum[i]);
  return out;
}

// Shift operator on answer-class centroids: fit r_{(c+1) mod p} ~ A r_c after
// SVD dimensionality reduction, training only on transitions whose endpoints
// both lie in the calibration class set and scoring R2_h on transitions inside
// the evaluation class set. With an empty eval set and zero ridge this is the
// descriptive protocol (fit on all transitions, R2 in-sample).
inline OperatorFit fit_shift_operator(const Matrix& centroids, const std::vector<int>& calib_classes,
                                      const std::vector<int>& eval_classes, double ridge_rel,
                                      double svd_energy = 0.99) {
  const int p = centroids.rows;
  if (p < 3) throw std::invalid_argument("fit_shift_operator: too few classes");

  auto dec = svd(centroids);
  const int k = rank_from_energy(dec.sigma, svd_energy);
  Matrix coords = matmul(centroids, dec.v.block(0, 0, centroids.cols, k));  // p x k

  std::set<int> calib(calib_classes.begin(), calib_classes.end());
  std::set<int> eval(eval_classes.begin(), eval_classes.end());
  const bool holdout = !eval.empty();

  std::vector<int> fit_rows, eval_rows;
  for (int c = 0; c < p; ++c) {
    const int nxt = (c + 1) % p;
    const bool c_in_calib = !holdout || (calib.count(c) && calib.count(nxt));
    const bool c_in_eval = holdout && eval.count(c) && eval.count(nxt);
    if (c_in_eval)
      eval_rows.push_back(c);
    else if (c_in_calib)
      fit_rows.push_back(c);
  }
  if (static_cast<int>(fit_rows.size()) < k)
    throw std::invalid_argument("fit_shift_operator: fewer calibration transitions than rank");

  auto gather = [&](const std::vector<int>& rows, int offset) {
    Matrix m(static_cast<int>(rows.size()), k);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const int c = (rows[i] + offset) % p;
      for (int j = 0; j < k; ++j) m(static_cast<int>(i), j) = coords(c, j);
    }
    return m;
  };
  Matrix x = gather(fit_rows, 0);
  Matrix y = gather(fit_rows, 1);

  OperatorFit fit;
  const double spectral = dec.sigma[0] * dec.sigma[0];
  fit.ridge = ridge_rel > 0.0 ? ridge_rel * spectral : 0.0;
  fit.protocol = holdout ? "shift:cycle-holdout" : "shift:descriptive";
  auto sol = solve_least_squares(x, y, fit.ridge);
  if (fit.ridge == 0.0 && sol.min_norm) {
    const double lam = 1e-8 * spectral;
    sol = solve_least_squares(x, y, lam);
    fit.ridge = lam;
    fit.ridge_fallback = true;
  }
  fit.a = sol.coeffs.transposed();
  fit.r2 = r_squared(matmul(x, sol.coeffs), y);
  fit.eigenvalues = eig_general(fit.a);
  if (holdout) {
    Matrix xe = gather(eval_rows, 0);
    Matrix ye = gather(eval_rows, 1);
    fit.r2_holdout = r_squared(matmul(xe, sol.coeffs), ye);
  }
  return fit;
}

// Contiguous evaluation block of classes starting at `start`.
inline std::pair<std::vector<int>, std::vector<int>> cycle_holdout_split(int p, double eval_fraction,
                                                                         int start) {
  const int n_eval = std::max(2, static_cast<int>(std::lround(eval_fraction * p)));
  std::vector<int> eval, calib;
  for (int i = 0; i < p; ++i) {
    const int c = (start + i) % p;
    if (i < n_eval)
      eval.push_back(c);
    else
      calib.push_back(c);
  }
  return {calib, eval};
}

// Rotational-mode histogram: eigenvalues with | |lambda| - 1 | <= tol are
// binned to the nearest integer multiple of 2 pi / p; conjugate bins k and
// p - k fold together, so mode count is the number of occupied nonzero bins.
struct ModeHistogram {
  int p = 0;
  double magnitude_tol = 0.05;
  std::set<int> occupied_nonzero_bins;
  std::vector<std::pair<std::complex<double>, int>> assignments;  // on-circle eigvals

  int mode_count() const { return static_cast<int>(occupied_nonzero_bins.size()); }
  int max_bins() const { return p / 2 + 1; }  // including the k = 0 bin
};

inline ModeHistogram rotational_modes(const OperatorFit& fit, int p, double magnitude_tol = 0.05) {
  ModeHistogram h;
  h.p = p;
  h.magnitude_tol = magnitude_tol;
  for (const auto& lambda : fit.eigenvalues) {
    if (std::abs(std::abs(lambda) - 1.0) > magnitude_tol) continue;
    const double angle = std::arg(lambda);
    int k = static_cast<int>(std::lround(angle * p / (2.0 * std::numbers::pi)));
    k = ((k % p) + p) % p;
    k = std::min(k, p - k);
    h.assignments.emplace_back(lambda, k);
    if (k != 0) h.occupied_nonzero_bins.insert(k);
  }
  return h;
}

// Greedy max relative complex distance between a fitted spectrum and a
// reference spectrum (equal lengths), pairing nearest first.
inline double spectrum_match_max_rel_error(std::vector<std::complex<double>> fitted,
                                           std::vector<std::complex<double>> reference) {
  if (fitted.size() != reference.size())
    throw std::invalid_argument("spectrum match: size mismatch");
  double worst = 0.0;
  while (!reference.empty()) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t bi = 0, bj = 0;
    for (std::size_t i = 0; i < reference.size(); ++i)
      for (std::size_t j = 0; j < fitted.size(); ++j) {
        double d = std::abs(fitted[j] - reference[i]);
        if (d < best) {
          best = d;
          bi = i;
          bj = j;
        }
      }
    const double rel = best / std::max(1e-12, std::abs(reference[bi]));
    worst = std::max(worst, rel);
    reference.erase(reference.begin() + static_cast<long>(bi));
    fitted.erase(fitted.begin() + static_cast<long>(bj));
  }
  return worst;
}

}  // namespace acelab
