#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "acelab/matrix.hpp"
#include "acelab/transformer.hpp"

namespace acelab {

// Adaptive reflection steering along a unit core axis q at a hooked layer.
// Defaults follow the artifact-wide choices: gate on 1% verb mass, probe at
// s0 = 0.1, margin buffer 0.5, strength capped at 4.
struct SteeringPolicy {
  Matrix axis;        // 1 x D unit core axis q
  Matrix mean;        // 1 x D layer mean mu
  int layer = 0;
  double gate_threshold = 0.01;
  double probe_strength = 0.1;
  double margin_buffer = 0.5;
  double strength_cap = 4.0;
  std::vector<int> plural_verbs;
  std::vector<int> singular_verbs;

  void validate() const {
    double n = 0.0;
    for (int j = 0; j < axis.cols; ++j) n += axis(0, j) * axis(0, j);
    if (std::abs(std::sqrt(n) - 1.0) > 1e-10)
      throw std::invalid_argument("steering policy: axis must be unit norm");
    if (gate_threshold < 0.0 || probe_strength == 0.0 || margin_buffer <= 0.0 ||
        strength_cap <= 0.0)
      throw std::invalid_argument("steering policy: invalid thresholds");
    if (plural_verbs.empty() || singular_verbs.empty())
      throw std::invalid_argument("steering policy: verb sets must be non-empty");
  }
};

// h~ = h - 2 s [(h - mu)^T q] q: scales the q-component of (h - mu) by
// (1 - 2s) and leaves the orthogonal complement untouched. Involutive at s=1.
inline Matrix reflect(const Matrix& h, const Matrix& q, const Matrix& mu, double s) {
  if (h.cols != q.cols || h.cols != mu.cols)
    throw std::invalid_argument("reflect: dimension mismatch");
  Matrix out = h;
  for (int i = 0; i < h.rows; ++i) {
    double coord = 0.0;
    for (int j = 0; j < h.cols; ++j) coord += (h(i, j) - mu(0, j)) * q(0, j);
    const double scale = 2.0 * s * coord;
    for (int j = 0; j < h.cols; ++j) out(i, j) -= scale * q(0, j);
  }
  return out;
}

// Logsumexp margin between the plural and singular verb groups.
inline double generation_margin(const Matrix& logits_row, const std::vector<int>& plural,
                                const std::vector<int>& singular) {
  auto lse = [&](const std::vector<int>& ids) {
    double mx = logits_row(0, ids[0]);
    for (int id : ids) mx = std::max(mx, logits_row(0, id));
    double z = 0.0;
    for (int id : ids) z += std::exp(logits_row(0, id) - mx);
    return mx + std::log(z);
  };
  return lse(plural) - lse(singular);
}

// Steering applies only when the softmax mass on the agreement verbs reaches
// the gate threshold; low-mass positions are not agreement decisions.
inline bool gate(const Matrix& clean_logits_row, const SteeringPolicy& policy) {
  double mx = clean_logits_row(0, 0);
  for (int j = 1; j < clean_logits_row.cols; ++j) mx = std::max(mx, clean_logits_row(0, j));
  double z = 0.0;
  for (int j = 0; j < clean_logits_row.cols; ++j) z += std::exp(clean_logits_row(0, j) - mx);
  double verb_mass = 0.0;
  for (int id : policy.plural_verbs) verb_mass += std::exp(clean_logits_row(0, id) - mx) / z;
  for (int id : policy.singular_verbs) verb_mass += std::exp(clean_logits_row(0, id) - mx) / z;
  return verb_mass >= policy.gate_threshold;
}

struct StrengthCalibration {
  double s_star = 0.0;
  double gain = 0.0;
  bool degenerate = false;  // |gain| below 1e-8: no controllable direction
};

// One-probe linear calibration: gain g = (m1 - m0)/s0, target margin
// -sign(m0) * eps (sign(0) := +1), strength clamped to +-s_cap.
inline StrengthCalibration calibrate_strength(double m0, double m1, double s0, double eps,
                                              double s_cap) {
  if (s0 == 0.0) throw std::invalid_argument("calibrate_strength: probe strength must be nonzero");
  StrengthCalibration c;
  c.gain = (m1 - m0) / s0;
  if (std::abs(c.gain) < 1e-8) {
    c.degenerate = true;
    c.s_star = 0.0;
    return c;
  }
  const double sign_m0 = m0 >= 0.0 ? 1.0 : -1.0;
  const double target = -sign_m0 * eps;
  c.s_star = (target - m0) / c.gain;
  c.s_star = std::min(s_cap, std::max(-s_cap, c.s_star));
  return c;
}

struct StepTrace {
  bool gated_on = false;
  double m0 = 0.0;
  double m1 = 0.0;
  double gain = 0.0;
  double s_star = 0.0;  // 0 whenever gated off
  double post_margin = 0.0;
  bool degenerate_gain = false;
  int token = -1;
};

struct SteeredGeneration {
  std::vector<int> tokens;        // emitted continuation
  std::vector<int> base_tokens;   // unsteered greedy continuation
  std::vector<StepTrace> trace;
};

namespace detail {

inline Matrix last_logits(const TransformerParams& params, const std::vector<int>& ctx,
                          const std::vector<HookPoint>& hooks) {
  auto fr = forward(params, TokenBatch::from_rows({ctx}), hooks);
  const Matrix& all = fr.tape.value(fr.logits);
  Matrix row(1, all.cols);
  for (int j = 0; j < all.cols; ++j) row(0, j) = all(static_cast<int>(ctx.size()) - 1, j);
  return row;
}

inline int argmax_row(const Matrix& row) {
  int best = 0;
  for (int j = 1; j < row.cols; ++j)
    if (row(0, j) > row(0, best)) best = j;
  return best;
}

inline HookPoint reflect_hook(const SteeringPolicy& policy, double s) {
  HookPoint h;
  h.layer = policy.layer;
  h.position = HookPosition::kLastToken;
  h.mode = HookMode::kReplace;
  Matrix q = policy.axis, mu = policy.mean;
  h.transform = [q, mu, s](Matrix& rows) { rows = reflect(rows, q, mu, s); };
  return h;
}

}  // namespace detail

// Greedy decoding with per-token adaptive reflection: a clean pass gates and
// measures m0, a probe pass at s0 estimates the gain, and the final pass runs
// at the calibrated strength. Gated-off steps emit the clean logits verbatim.
inline SteeredGeneration generate_steered(const TransformerParams& params,
                                          const std::vector<int>& prompt,
                                          const SteeringPolicy& policy, int max_tokens) {
  policy.validate();
  SteeredGeneration out;
  std::vector<int> steered_ctx = prompt;
  std::vector<int> base_ctx = prompt;
  for (int step = 0; step < max_tokens; ++step) {
    if (static_cast<int>(steered_ctx.size()) >= params.cfg.max_seq_len) break;
    // unsteered reference continuation
    Matrix base_row = detail::last_logits(params, base_ctx, {});
    out.base_tokens.push_back(detail::argmax_row(base_row));
    base_ctx.push_back(out.base_tokens.back());

    StepTrace tr;
    Matrix clean = detail::last_logits(params, steered_ctx, {});
    tr.m0 = generation_margin(clean, policy.plural_verbs, policy.singular_verbs);
    tr.gated_on = gate(clean, policy);
    Matrix final_row = clean;
    if (tr.gated_on) {
      Matrix probe = detail::last_logits(params, steered_ctx,
                                         {detail::reflect_hook(policy, policy.probe_strength)});
      tr.m1 = generation_margin(probe, policy.plural_verbs, policy.singular_verbs);
      auto cal = calibrate_strength(tr.m0, tr.m1, policy.probe_strength, policy.margin_buffer,
                                    policy.strength_cap);
      tr.gain = cal.gain;
      tr.degenerate_gain = cal.degenerate;
      tr.s_star = cal.s_star;
      if (cal.s_star != 0.0)
        final_row = detail::last_logits(params, steered_ctx,
                                        {detail::reflect_hook(policy, cal.s_star)});
    }
    tr.post_margin = generation_margin(final_row, policy.plural_verbs, policy.singular_verbs);
    tr.token = detail::argmax_row(final_row);
    out.trace.push_back(tr);
    out.tokens.push_back(tr.token);
    steered_ctx.push_back(tr.token);
  }
  return out;
}

}  // namespace acelab
