#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "acelab/checkpoint.hpp"
#include "acelab/linalg.hpp"
#include "acelab/matrix.hpp"
#include "acelab/train.hpp"
#include "acelab/transformer.hpp"

namespace acelab {

// Mean-centered hidden states at a hooked layer, one row per sample.
struct ActivationBatch {
  Matrix centered;  // N x D, column means zero
  Matrix mean;      // 1 x D
  int layer = 0;
  HookPosition position = HookPosition::kAllPositions;

  static ActivationBatch from_raw(const Matrix& raw, int layer, HookPosition position) {
    ActivationBatch b;
    b.mean = column_means(raw);
    b.centered = center_columns(raw, b.mean);
    b.layer = layer;
    b.position = position;
    return b;
  }
};

// Stacked Jacobians of the task-relevant output with respect to the hooked
// hidden state: K rows per sample.
struct SensitivityBatch {
  Matrix jacobians;  // (N*K) x D
  int outputs_per_sample = 1;

  int n_samples() const {
    if (outputs_per_sample <= 0 || jacobians.rows % outputs_per_sample != 0)
      throw std::logic_error("sensitivity batch: row count not divisible by K");
    return jacobians.rows / outputs_per_sample;
  }
};

// The extracted core: orthonormal basis of the top-r jointly active and
// relevant directions, plus the full ranked basis and spectrum so rank
// refinement can re-slice without re-extracting.
struct CoreSubspace {
  Matrix basis;         // D x r
  Matrix ranked_basis;  // D x m, all ranked directions
  std::vector<double> spectrum;  // singular values of L^T Gamma, descending
  int rank = 0;
  double energy = 0.0;
  double epsilon = 0.0;
  int layer = 0;
  HookPosition position = HookPosition::kAllPositions;
  Matrix mean;  // 1 x D, the centering mean reused by ablations

  int dim() const { return basis.rows; }

  Matrix projector() const { return matmul(basis, basis, false, true); }

  // Core restricted to the top-k ranked directions.
  CoreSubspace truncated(int k) const {
    if (k < 1 || k > ranked_basis.cols) throw std::invalid_argument("core: bad truncation rank");
    CoreSubspace c = *this;
    c.basis = ranked_basis.block(0, 0, ranked_basis.rows, k);
    c.rank = k;
    return c;
  }
};

inline double default_core_epsilon(const Matrix& centered) {
  const double tr = centered.map().squaredNorm();
  return 1e-6 * tr / centered.cols;
}

// Core extraction, D x D formulation: with A = H^T H + eps I = L L^T and
// S = J^T J = Gamma Gamma^T, the SVD L^T Gamma = U Sigma V^T ranks joint
// directions; the core is the QR-orthonormalized span of L U_r (equivalently
// span(H^T U_r) from the SVD of H J^T when eps = 0).
inline CoreSubspace extract_core(const ActivationBatch& acts, const SensitivityBatch& sens,
                                 double energy, double epsilon) {
  if (acts.centered.cols != sens.jacobians.cols)
    throw std::invalid_argument("extract_core: dimension mismatch between activations and Jacobians");
  if (energy <= 0.0 || energy > 1.0)
    throw std::invalid_argument("extract_core: energy must be in (0, 1]");
  if (epsilon < 0.0) throw std::invalid_argument("extract_core: negative epsilon");
  if (sens.jacobians.max_abs() == 0.0)
    throw std::invalid_argument("extract_core: all-zero sensitivity (no relevant directions)");

  const int d = acts.centered.cols;
  Matrix a = matmul(acts.centered, acts.centered, true, false);
  for (int i = 0; i < d; ++i) a(i, i) += epsilon;
  Matrix s = matmul(sens.jacobians, sens.jacobians, true, false);

  Matrix l = epsilon > 0.0 ? cholesky_lower(a) : psd_sqrt_factor(a);
  Matrix gamma = psd_sqrt_factor(s);
  auto dec = svd(matmul(l, gamma, true, false));

  CoreSubspace core;
  core.spectrum = dec.sigma;
  core.energy = energy;
  core.epsilon = epsilon;
  core.layer = acts.layer;
  core.position = acts.position;
  core.mean = acts.mean;
  core.rank = rank_from_energy(dec.sigma, energy);

  Matrix ranked_raw = matmul(l, dec.u);
  auto qr = qr_orthonormalize(ranked_raw);
  core.ranked_basis = qr.q;
  if (core.rank > core.ranked_basis.cols) core.rank = core.ranked_basis.cols;
  core.basis = core.ranked_basis.block(0, 0, d, core.rank);
  return core;
}

// Ratio of the two largest squared singular values; +inf when the second is
// zero. Large gaps certify an effectively one-dimensional core.
inline double spectral_gap(const CoreSubspace& core) {
  if (core.rank < 1 || core.spectrum.size() < 2)
    throw std::invalid_argument("spectral_gap: needs rank >= 1 and at least two singular values");
  const double s1 = core.spectrum[0];
  const double s2 = core.spectrum[1];
  if (s2 == 0.0) return std::numeric_limits<double>::infinity();
  return (s1 * s1) / (s2 * s2);
}

enum class AblationMode { kBaseline, kCoreOnly, kCoreRemoved, kCoreFlipped };

inline const char* ablation_mode_name(AblationMode m) {
  switch (m) {
    case AblationMode::kBaseline: return "baseline";
    case AblationMode::kCoreOnly: return "core_only";
    case AblationMode::kCoreRemoved: return "core_removed";
    case AblationMode::kCoreFlipped: return "core_flipped";
  }
  return "?";
}

// All ablations are centered at the batch mean mu:
//   core-only:    mu + P (h - mu)
//   core-removed: h - P (h - mu)
//   core-flipped: h - 2 P (h - mu)
inline Matrix ablate(const Matrix& h, const CoreSubspace& core, AblationMode mode,
                     const Matrix& mu) {
  if (h.cols != core.dim()) throw std::invalid_argument("ablate: dimension mismatch");
  if (mode == AblationMode::kBaseline) return h;
  Matrix centered = center_columns(h, mu);
  Matrix proj = matmul(matmul(centered, core.basis), core.basis, false, true);
  Matrix out(h.rows, h.cols);
  switch (mode) {
    case AblationMode::kCoreOnly:
      out.map() = proj.map().rowwise() + mu.map().row(0);
      break;
    case AblationMode::kCoreRemoved:
      out.map() = h.map() - proj.map();
      break;
    case AblationMode::kCoreFlipped:
      out.map() = h.map() - 2.0 * proj.map();
      break;
    case AblationMode::kBaseline:
      break;
  }
  return out;
}

inline HookPoint ablation_hook(const CoreSubspace& core, AblationMode mode) {
  HookPoint h;
  h.layer = core.layer;
  h.position = core.position;
  h.mode = HookMode::kReplace;
  if (mode != AblationMode::kBaseline) {
    CoreSubspace c = core;  // owned copy keeps the hook self-contained
    h.transform = [c, mode](Matrix& rows) { rows = ablate(rows, c, mode, c.mean); };
  } else {
    h.transform = [](Matrix&) {};
  }
  return h;
}

// Task evaluation under an intervention: returns the headline score plus
// example-level scores. Tasks plug in accuracy or AUC as appropriate.
using AblationScorer =
    std::function<std::pair<double, std::vector<double>>(const std::vector<HookPoint>&)>;

inline AblationScorer accuracy_scorer(const TransformerParams& params, const SeqDataset& data) {
  return [&params, &data](const std::vector<HookPoint>& hooks) {
    EvalMetrics m = evaluate(params, data, hooks);
    return std::make_pair(m.accuracy, per_sequence_accuracy(params, data, hooks));
  };
}

// Causal evidence for a core: task score under baseline and the three
// interventions, with chance/optimal reference values attached.
struct AblationReport {
  double baseline = 0.0;
  double core_only = 0.0;
  double core_removed = 0.0;
  double core_flipped = 0.0;
  double chance = 0.0;
  double optimal = 0.0;
  std::vector<double> baseline_scores;
  std::vector<double> core_only_scores;
  std::vector<double> core_removed_scores;
  std::vector<double> core_flipped_scores;
};

inline AblationReport causal_validate(const CoreSubspace& core, const AblationScorer& scorer,
                                      double chance, double optimal) {
  AblationReport r;
  r.chance = chance;
  r.optimal = optimal;
  std::tie(r.baseline, r.baseline_scores) = scorer({});
  std::tie(r.core_only, r.core_only_scores) = scorer({ablation_hook(core, AblationMode::kCoreOnly)});
  std::tie(r.core_removed, r.core_removed_scores) =
      scorer({ablation_hook(core, AblationMode::kCoreRemoved)});
  std::tie(r.core_flipped, r.core_flipped_scores) =
      scorer({ablation_hook(core, AblationMode::kCoreFlipped)});
  return r;
}

struct RankRefinement {
  int rank = 0;
  bool satisfied = false;  // false: fell back to the energy-threshold rank
  double keep_accuracy = 0.0;
  double remove_accuracy = 0.0;
};

// Minimal rank r over the ranked directions such that keep-top-r stays within
// tol_keep of baseline AND remove-top-r falls within tol_drop of chance.
inline RankRefinement refine_rank(const CoreSubspace& core, const AblationScorer& scorer,
                                  double baseline, double chance, double tol_keep = 0.01,
                                  double tol_drop = 0.05) {
  RankRefinement out;
  const int max_r = core.ranked_basis.cols;
  for (int r = 1; r <= max_r; ++r) {
    CoreSubspace c = core.truncated(r);
    double keep = scorer({ablation_hook(c, AblationMode::kCoreOnly)}).first;
    if (keep < baseline - tol_keep) continue;
    double remove = scorer({ablation_hook(c, AblationMode::kCoreRemoved)}).first;
    if (remove <= chance + tol_drop) {
      out.rank = r;
      out.satisfied = true;
      out.keep_accuracy = keep;
      out.remove_accuracy = remove;
      return out;
    }
  }
  out.rank = core.rank;
  out.satisfied = false;
  return out;
}

struct DimensionProfile {
  int n_sufficient = -1;  // min k with keep-top-k >= baseline - tol_keep
  int n_necessary = -1;   // min k with remove-top-k <= chance + tol_drop
  bool sufficient_found = false;
  bool necessary_found = false;
};

inline DimensionProfile dimension_profile(const CoreSubspace& core, const AblationScorer& scorer,
                                          double baseline, double chance, double tol_keep = 0.01,
                                          double tol_drop = 0.05) {
  DimensionProfile p;
  const int max_r = core.ranked_basis.cols;
  for (int k = 1; k <= max_r && !(p.sufficient_found && p.necessary_found); ++k) {
    CoreSubspace c = core.truncated(k);
    if (!p.sufficient_found) {
      double keep = scorer({ablation_hook(c, AblationMode::kCoreOnly)}).first;
      if (keep >= baseline - tol_keep) {
        p.n_sufficient = k;
        p.sufficient_found = true;
      }
    }
    if (!p.necessary_found) {
      double remove = scorer({ablation_hook(c, AblationMode::kCoreRemoved)}).first;
      if (remove <= chance + tol_drop) {
        p.n_necessary = k;
        p.necessary_found = true;
      }
    }
  }
  return p;
}

// ---------------------------------------------------------------------------
// Serialization: versioned binary blob for the subspace itself.
// ---------------------------------------------------------------------------

inline std::vector<std::uint8_t> serialize_core(const CoreSubspace& core) {
  detail::ByteWriter w;
  w.u32(0x45524F43);  // "CORE"
  w.u32(1);
  w.matrix(core.basis);
  w.matrix(core.ranked_basis);
  w.matrix(core.mean);
  w.u32(static_cast<std::uint32_t>(core.spectrum.size()));
  for (double s : core.spectrum) w.f64(s);
  w.i32(core.rank);
  w.f64(core.energy);
  w.f64(core.epsilon);
  w.i32(core.layer);
  w.i32(core.position == HookPosition::kLastToken ? 1 : 0);
  std::vector<std::uint8_t> out = w.bytes();
  std::uint64_t h = detail::fnv1a(out.data(), out.size());
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(h >> (8 * i)));
  return out;
}

inline CoreSubspace deserialize_core(std::vector<std::uint8_t> bytes) {
  if (bytes.size() < 8) throw std::runtime_error("core: truncated blob");
  std::uint64_t stored = 0;
  for (int i = 0; i < 8; ++i)
    stored |= static_cast<std::uint64_t>(bytes[bytes.size() - 8 + i]) << (8 * i);
  bytes.resize(bytes.size() - 8);
  if (detail::fnv1a(bytes.data(), bytes.size()) != stored)
    throw std::runtime_error("core: content hash mismatch");
  detail::ByteReader r(std::move(bytes));
  if (r.u32() != 0x45524F43) throw std::runtime_error("core: bad magic");
  if (r.u32() != 1) throw std::runtime_error("core: unsupported version");
  CoreSubspace c;
  c.basis = r.matrix();
  c.ranked_basis = r.matrix();
  c.mean = r.matrix();
  const std::uint32_t n = r.u32();
  c.spectrum.resize(n);
  for (std::uint32_t i = 0; i < n; ++i) c.spectrum[i] = r.f64();
  c.rank = r.i32();
  c.energy = r.f64();
  c.epsilon = r.f64();
  c.layer = r.i32();
  c.position = r.i32() == 1 ? HookPosition::kLastToken : HookPosition::kAllPositions;
  return c;
}

inline void save_core(const CoreSubspace& core, const std::string& path) {
  auto bytes = serialize_core(core);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("core: cannot open for write: " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline CoreSubspace load_core(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("core: cannot open: " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
  return deserialize_core(std::move(bytes));
}

}  // namespace acelab
