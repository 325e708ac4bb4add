#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

#include "acelab/matrix.hpp"
#include "acelab/tape.hpp"

namespace acelab {

// Decoupled-weight-decay Adam. The decay term -lr*wd*w is applied outside the
// adaptive update, so zero gradients still shrink parameters by exactly
// (1 - lr*wd) per step.
struct AdamWState {
  double lr = 1e-3;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long step = 0;
  std::vector<Matrix> m;
  std::vector<Matrix> v;

  static AdamWState init(const std::vector<Matrix>& params, double lr, double weight_decay) {
    AdamWState s;
    s.lr = lr;
    s.weight_decay = weight_decay;
    s.m.reserve(params.size());
    s.v.reserve(params.size());
    for (const Matrix& p : params) {
      s.m.emplace_back(p.rows, p.cols);
      s.v.emplace_back(p.rows, p.cols);
    }
    return s;
  }
};

// Returns false (and leaves params/state untouched) when any gradient entry
// is non-finite.
inline bool adamw_step(std::vector<Matrix>& params, const std::vector<Matrix>& grads,
                       AdamWState& state) {
  if (params.size() != grads.size() || params.size() != state.m.size())
    throw std::invalid_argument("adamw_step: parameter/gradient count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].rows != grads[i].rows || params[i].cols != grads[i].cols)
      throw std::invalid_argument("adamw_step: shape mismatch");
    if (!grads[i].all_finite()) return false;
  }
  state.step += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Matrix& w = params[i];
    const Matrix& g = grads[i];
    Matrix& m = state.m[i];
    Matrix& v = state.v[i];
    for (std::size_t k = 0; k < w.size(); ++k) {
      m.data[k] = state.beta1 * m.data[k] + (1.0 - state.beta1) * g.data[k];
      v.data[k] = state.beta2 * v.data[k] + (1.0 - state.beta2) * g.data[k] * g.data[k];
      const double mhat = m.data[k] / bc1;
      const double vhat = v.data[k] / bc2;
      w.data[k] -= state.lr * (mhat / (std::sqrt(vhat) + state.eps) + state.weight_decay * w.data[k]);
    }
  }
  return true;
}

// Max relative error between tape gradients and central finite differences of
// a scalar-valued taped function, |analytic - numeric| / (|numeric| + 1e-8).
inline double grad_check(const std::function<int(Tape&, int)>& build, const Matrix& point,
                         double h = 1e-5) {
  Tape tape;
  int x = tape.leaf(point);
  int out = build(tape, x);
  if (tape.value(out).rows != 1 || tape.value(out).cols != 1)
    throw std::invalid_argument("grad_check: function must be scalar-valued");
  tape.backward_scalar(out);
  Matrix analytic = tape.grad(x);

  double worst = 0.0;
  for (std::size_t i = 0; i < point.size(); ++i) {
    Matrix xp = point;
    Matrix xm = point;
    xp.data[i] += h;
    xm.data[i] -= h;
    Tape tp;
    double fp = tp.value(build(tp, tp.leaf(xp)))(0, 0);
    Tape tm;
    double fm = tm.value(build(tm, tm.leaf(xm)))(0, 0);
    double numeric = (fp - fm) / (2.0 * h);
    double err = std::abs(analytic.data[i] - numeric) / (std::abs(numeric) + 1e-8);
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace acelab
