#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "acelab/linalg.hpp"
#include "acelab/matrix.hpp"
#include "acelab/rng.hpp"
#include "acelab/train.hpp"

namespace acelab {

// Row-stochastic chain with its stationary distribution. The four-state
// shift-or-stay instance (alpha on the diagonal, beta one step ahead,
// wrapping) is the reference task.
struct MarkovChain {
  Matrix transition;  // n x n, rows sum to 1
  Matrix stationary;  // 1 x n
  double alpha = 0.0;
  double beta = 0.0;

  int n_states() const { return transition.rows; }

  void validate() const {
    if (transition.rows != transition.cols)
      throw std::invalid_argument("markov: transition matrix not square");
    for (int i = 0; i < transition.rows; ++i) {
      double s = 0.0;
      for (int j = 0; j < transition.cols; ++j) {
        if (transition(i, j) < 0.0) throw std::invalid_argument("markov: negative probability");
        s += transition(i, j);
      }
      if (std::abs(s - 1.0) > 1e-10) throw std::invalid_argument("markov: row does not sum to 1");
    }
    Matrix pi_t = matmul(stationary, transition);
    if ((pi_t - stationary).max_abs() > 1e-10)
      throw std::invalid_argument("markov: stationary distribution not stationary");
  }
};

inline Matrix stationary_distribution(const Matrix& transition) {
  // Left eigenvector for eigenvalue 1 via a least-squares system
  // (T^T - I) pi = 0 with sum(pi) = 1 appended.
  const int n = transition.rows;
  Matrix a(n + 1, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) a(i, j) = transition(j, i) - (i == j ? 1.0 : 0.0);
  for (int j = 0; j < n; ++j) a(n, j) = 1.0;
  Matrix b(n + 1, 1);
  b(n, 0) = 1.0;
  auto sol = solve_least_squares(a, b, 0.0);
  Matrix pi(1, n);
  for (int j = 0; j < n; ++j) pi(0, j) = sol.coeffs(j, 0);
  return pi;
}

inline MarkovChain make_shift_chain(double alpha, double beta, int n_states = 4) {
  if (std::abs(alpha + beta - 1.0) > 1e-12)
    throw std::invalid_argument("markov: alpha + beta must equal 1");
  MarkovChain c;
  c.alpha = alpha;
  c.beta = beta;
  c.transition = Matrix(n_states, n_states);
  for (int i = 0; i < n_states; ++i) {
    c.transition(i, i) = alpha;
    c.transition(i, (i + 1) % n_states) = beta;
  }
  c.stationary = Matrix(1, n_states, 1.0 / n_states);
  c.validate();
  return c;
}

// The reference instance: alpha = 0.75, beta = 0.25, four states.
inline MarkovChain reference_chain() { return make_shift_chain(0.75, 0.25); }

inline MarkovChain chain_from_transition(Matrix transition) {
  MarkovChain c;
  c.stationary = stationary_distribution(transition);
  c.transition = std::move(transition);
  c.validate();
  return c;
}

// Sequences with initial states drawn from the stationary distribution.
inline std::vector<std::vector<int>> markov_generate(const MarkovChain& chain, int n_sequences,
                                                     int length, Rng rng) {
  std::vector<std::vector<int>> out(n_sequences);
  std::vector<double> row(chain.n_states());
  for (int s = 0; s < n_sequences; ++s) {
    out[s].resize(length);
    for (int j = 0; j < chain.n_states(); ++j) row[j] = chain.stationary(0, j);
    int state = rng.discrete(row);
    out[s][0] = state;
    for (int p = 1; p < length; ++p) {
      for (int j = 0; j < chain.n_states(); ++j) row[j] = chain.transition(state, j);
      state = rng.discrete(row);
      out[s][p] = state;
    }
  }
  return out;
}

struct MarkovBaselines {
  double chance = 0.0;        // max_i pi_i
  double bayes_optimal = 0.0;  // sum_i pi_i max_j T_ij
};

inline MarkovBaselines markov_baselines(const MarkovChain& chain) {
  MarkovBaselines b;
  for (int i = 0; i < chain.n_states(); ++i) {
    b.chance = std::max(b.chance, chain.stationary(0, i));
    double row_max = 0.0;
    for (int j = 0; j < chain.n_states(); ++j) row_max = std::max(row_max, chain.transition(i, j));
    b.bayes_optimal += chain.stationary(0, i) * row_max;
  }
  return b;
}

// Oracle ceiling for one-step prediction R^2:
//   R2 = 1 - (1/|V|) 1^T (m / v),
//   m = diag(pi) (T .* (1-T))^T 1,  v = pi .* (1-pi).
inline double oracle_r2(const MarkovChain& chain) {
  const int n = chain.n_states();
  double acc = 0.0;
  for (int j = 0; j < n; ++j) {
    const double pj = chain.stationary(0, j);
    if (pj <= 0.0 || pj >= 1.0)
      throw std::invalid_argument("oracle_r2: zero-variance state");
    double col = 0.0;
    for (int i = 0; i < n; ++i) col += chain.transition(i, j) * (1.0 - chain.transition(i, j));
    const double m = pj * col;
    const double v = pj * (1.0 - pj);
    acc += m / v;
  }
  return 1.0 - acc / n;
}

// Next-token prediction dataset: targets shift tokens left by one; the last
// position carries no loss or accuracy weight.
inline SeqDataset markov_dataset(const std::vector<std::vector<int>>& sequences) {
  SeqDataset d;
  d.tokens = sequences;
  d.targets.reserve(sequences.size());
  for (const auto& s : sequences) {
    std::vector<int> tgt(s.size(), 0);
    for (std::size_t p = 0; p + 1 < s.size(); ++p) tgt[p] = s[p + 1];
    d.targets.push_back(std::move(tgt));
  }
  const int t = d.seq_len();
  d.loss_weights.assign(t, 1.0);
  d.loss_weights[t - 1] = 0.0;
  d.acc_weights = d.loss_weights;
  return d;
}

}  // namespace acelab
