#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <functional>
#include <numbers>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "acelab/linalg.hpp"
#include "acelab/matrix.hpp"
#include "acelab/modadd.hpp"
#include "acelab/train.hpp"

namespace acelab {

// ---------------------------------------------------------------------------
// Margin-dynamics theory
// ---------------------------------------------------------------------------

// Label-contrast vector psi_k = 1 - cos(2 pi k / p), k = 1..floor(p/2).
// For odd p, ||psi||^2 = 3p/4 exactly.
inline std::vector<double> psi_vector(int p) {
  if (p < 3 || p % 2 == 0)
    throw std::invalid_argument("psi_vector: p must be an odd modulus >= 3");
  std::vector<double> psi(p / 2);
  for (int k = 1; k <= p / 2; ++k)
    psi[k - 1] = 1.0 - std::cos(2.0 * std::numbers::pi * k / p);
  return psi;
}

inline double squared_norm(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return s;
}

// Minimum-norm mode amplitudes meeting the margin constraint <alpha, psi> = delta:
// alpha* = (delta / ||psi||^2) psi, every mode active.
inline std::vector<double> min_norm_alpha(const std::vector<double>& psi, double delta) {
  if (delta <= 0.0) throw std::invalid_argument("min_norm_alpha: delta must be positive");
  const double scale = delta / squared_norm(psi);
  std::vector<double> alpha(psi.size());
  for (std::size_t i = 0; i < psi.size(); ++i) alpha[i] = scale * psi[i];
  return alpha;
}

// Closed-form margin relaxation m(t) = m*(1 - e^{-omega t}), the solution of
// dm/dt = -omega m + omega m*.
inline double margin_trajectory(double t, double omega, double m_star) {
  if (omega <= 0.0) throw std::invalid_argument("margin_trajectory: omega must be positive");
  return m_star * (1.0 - std::exp(-omega * t));
}

// Residual of the margin ODE at time t using the analytic derivative of the
// closed form; zero (to roundoff) certifies the trajectory solves the ODE.
inline double margin_ode_residual(double t, double omega, double m_star) {
  const double m = margin_trajectory(t, omega, m_star);
  const double dm = m_star * omega * std::exp(-omega * t);
  return dm + omega * m - omega * m_star;
}

// Grokking-delay law tau(p) = -Omega log(1 - p_crit / p); diverges at p_crit.
inline double tau_grok(double p, double omega_const, double p_crit) {
  if (p <= p_crit) throw std::invalid_argument("tau_grok: undefined for p <= p_crit");
  return -omega_const * std::log(1.0 - p_crit / p);
}

// psi^T S^{-1} psi for a positive definite mode-overlap matrix S; equals
// ||psi||^2 when S = I.
inline double effective_redundancy(const std::vector<double>& psi, const Matrix& s) {
  const int n = static_cast<int>(psi.size());
  if (s.rows != n || s.cols != n)
    throw std::invalid_argument("effective_redundancy: shape mismatch");
  if (!is_positive_definite(s))
    throw std::invalid_argument("effective_redundancy: S must be positive definite");
  Matrix rhs(n, 1);
  for (int i = 0; i < n; ++i) rhs(i, 0) = psi[i];
  Eigen::LLT<EMat> llt(s.map());
  Eigen::VectorXd x = llt.solve(rhs.map().col(0));
  double out = 0.0;
  for (int i = 0; i < n; ++i) out += psi[i] * x[i];
  return out;
}

// ---------------------------------------------------------------------------
// Empirical grokking-time detection and curve fits
// ---------------------------------------------------------------------------

struct GrokTimes {
  bool grokked = false;    // both thresholds crossed
  bool memorized = false;  // train threshold crossed
  long tau_mem = -1;       // optimizer steps
  long tau_gen = -1;
  long tau_grok = -1;
};

inline GrokTimes detect_grok_times(const std::vector<MetricRow>& trace, double threshold = 0.99) {
  GrokTimes t;
  for (const MetricRow& row : trace) {
    if (!t.memorized && row.train_acc >= threshold) {
      t.tau_mem = row.step;
      t.memorized = true;
    }
    if (t.tau_gen < 0 && row.test_acc >= threshold) t.tau_gen = row.step;
    if (t.memorized && t.tau_gen >= 0) break;
  }
  if (t.memorized && t.tau_gen >= 0) {
    t.grokked = true;
    t.tau_grok = t.tau_gen - t.tau_mem;
  }
  return t;
}

struct PowerLawFit {
  double c = 0.0;
  double beta = 0.0;
  double r2 = 0.0;
};

// Ordinary least squares in log-log space for y = C x^beta.
inline PowerLawFit fit_power_law(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2)
    throw std::invalid_argument("fit_power_law: need at least two points");
  Matrix design(static_cast<int>(x.size()), 2);
  Matrix target(static_cast<int>(x.size()), 1);
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i] <= 0.0 || y[i] <= 0.0)
      throw std::invalid_argument("fit_power_law: values must be positive");
    design(static_cast<int>(i), 0) = 1.0;
    design(static_cast<int>(i), 1) = std::log(x[i]);
    target(static_cast<int>(i), 0) = std::log(y[i]);
  }
  auto sol = solve_least_squares(design, target, 0.0);
  PowerLawFit fit;
  fit.c = std::exp(sol.coeffs(0, 0));
  fit.beta = sol.coeffs(1, 0);
  fit.r2 = r_squared(matmul(design, sol.coeffs), target);
  return fit;
}

struct OdeLawFit {
  double omega_const = 0.0;  // Omega
  double p_crit = 0.0;
  double r2 = 0.0;
  bool converged = false;
};

// Nonlinear least squares for tau(p) = -Omega log(1 - p_crit / p). For fixed
// p_crit the optimal Omega is closed-form, so the search is a robust 1-D
// minimization over p_crit in (0, min p), multi-started per the protocol.
inline OdeLawFit fit_ode_law(const std::vector<double>& p_values, const std::vector<double>& tau) {
  if (p_values.size() != tau.size() || p_values.size() < 2)
    throw std::invalid_argument("fit_ode_law: need at least two points");
  const double min_p = *std::min_element(p_values.begin(), p_values.end());

  auto sse_at = [&](double p_crit, double* omega_out) {
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < p_values.size(); ++i) {
      const double g = -std::log(1.0 - p_crit / p_values[i]);
      num += g * tau[i];
      den += g * g;
    }
    const double omega = den > 0.0 ? num / den : 0.0;
    double sse = 0.0;
    for (std::size_t i = 0; i < p_values.size(); ++i) {
      const double g = -std::log(1.0 - p_crit / p_values[i]);
      const double e = tau[i] - omega * g;
      sse += e * e;
    }
    if (omega_out) *omega_out = omega;
    return sse;
  };

  // Multi-start local refinements (p_crit inits at {0.2, 0.5, 0.8} min p)
  // plus one full-domain pass as a safety net; golden-section each bracket
  // to relative width 1e-10.
  const double gr = (std::sqrt(5.0) - 1.0) / 2.0;
  const double dom_lo = 1e-6 * min_p;
  const double dom_hi = (1.0 - 1e-9) * min_p;
  double best_sse = std::numeric_limits<double>::infinity();
  double best_pc = dom_lo;
  bool converged = false;

  auto golden = [&](double lo, double hi) {
    double x1 = hi - gr * (hi - lo), x2 = lo + gr * (hi - lo);
    double f1 = sse_at(x1, nullptr), f2 = sse_at(x2, nullptr);
    int iters = 0;
    while (hi - lo > 1e-10 * min_p && iters < 600) {
      if (f1 < f2) {
        hi = x2;
        x2 = x1;
        f2 = f1;
        x1 = hi - gr * (hi - lo);
        f1 = sse_at(x1, nullptr);
      } else {
        lo = x1;
        x1 = x2;
        f1 = f2;
        x2 = lo + gr * (hi - lo);
        f2 = sse_at(x2, nullptr);
      }
      ++iters;
    }
    converged = converged || iters < 600;
    const double pc = 0.5 * (lo + hi);
    const double s = sse_at(pc, nullptr);
    if (s < best_sse) {
      best_sse = s;
      best_pc = pc;
    }
  };
  for (double frac : {0.2, 0.5, 0.8})
    golden(std::max(dom_lo, 0.5 * frac * min_p), std::min(dom_hi, 1.5 * frac * min_p));
  golden(dom_lo, dom_hi);

  OdeLawFit fit;
  fit.converged = converged;
  fit.p_crit = best_pc;
  sse_at(best_pc, &fit.omega_const);
  double mean = 0.0;
  for (double t : tau) mean += t;
  mean /= static_cast<double>(tau.size());
  double ss_tot = 0.0;
  for (double t : tau) ss_tot += (t - mean) * (t - mean);
  fit.r2 = ss_tot > 0.0 ? 1.0 - best_sse / ss_tot : (best_sse == 0.0 ? 1.0 : 0.0);
  return fit;
}

// ---------------------------------------------------------------------------
// Sweep driver
// ---------------------------------------------------------------------------

enum class SweepKind { kWeightDecay, kModulus };

struct SweepSpec {
  SweepKind kind = SweepKind::kWeightDecay;
  std::vector<double> grid;      // omega values, or prime moduli
  int seeds = 6;
  int fixed_p = 53;
  double fixed_omega = 1.0;
  int batch_size = 512;          // weight-decay sweep protocol (minibatch)
  long step_cap = 50000;
  double lr = 1e-3;
  double threshold = 0.99;
  int d_model = 128;
  int d_ff = 512;
  int n_heads = 4;
  std::uint64_t data_seed = 1000;
  std::uint64_t model_seed_base = 2000;
  int max_parallel = 2;
};

struct SweepRun {
  double value = 0.0;  // grid value
  int seed = 0;
  GrokTimes times;
  bool hit_cap = false;
  bool diverged = false;
};

struct SweepResult {
  SweepKind kind = SweepKind::kWeightDecay;
  std::vector<double> grid;
  std::vector<SweepRun> runs;
  std::string batch_protocol;
};

// One-layer transformer trained on modular addition with per-step accuracy
// evaluation; stops as soon as both thresholds have crossed.
inline SweepRun sweep_single_run(const SweepSpec& spec, double value, int seed_index) {
  SweepRun run;
  run.value = value;
  run.seed = seed_index;

  const int p = spec.kind == SweepKind::kModulus ? static_cast<int>(value) : spec.fixed_p;
  const double omega = spec.kind == SweepKind::kWeightDecay ? value : spec.fixed_omega;
  // Modulus sweep uses full-batch steps to isolate hitting times from
  // minibatch noise; the weight-decay sweep keeps minibatches.
  ModAddTask task = modadd_dataset(p, spec.data_seed + static_cast<std::uint64_t>(seed_index));
  SeqDataset train_d = modadd_train_dataset(task);
  SeqDataset test_d = modadd_test_dataset(task);
  const int batch =
      spec.kind == SweepKind::kModulus ? train_d.size() : std::min(spec.batch_size, train_d.size());

  TransformerConfig cfg;
  cfg.n_layers = 1;
  cfg.d_model = spec.d_model;
  cfg.d_ff = spec.d_ff;
  cfg.n_heads = spec.n_heads;
  cfg.vocab_size = p;
  cfg.max_seq_len = 2;

  Rng model_rng(spec.model_seed_base + 7919 * static_cast<std::uint64_t>(seed_index) +
                static_cast<std::uint64_t>(p) + static_cast<std::uint64_t>(1e6 * omega));
  TransformerParams params = TransformerParams::init(cfg, model_rng.split(1));
  AdamWState opt = AdamWState::init(params.tensors, spec.lr, omega);
  Rng train_rng = model_rng.split(2);

  TrainOptions opts;
  opts.epochs = std::numeric_limits<long>::max() / 2;  // step cap bounds the run
  opts.batch_size = batch;
  opts.lr = spec.lr;
  opts.weight_decay = omega;
  opts.cadence = EvalCadence::kPerStep;
  opts.max_steps = spec.step_cap;
  bool seen_mem = false, seen_gen = false;
  opts.stop_when = [&](const MetricRow& row) {
    seen_mem = seen_mem || row.train_acc >= spec.threshold;
    seen_gen = seen_gen || row.test_acc >= spec.threshold;
    return seen_mem && seen_gen;
  };

  TrainResult res = train(params, opt, train_rng, train_d, test_d, opts);
  run.diverged = res.diverged;
  run.hit_cap = res.hit_step_cap;
  run.times = detect_grok_times(res.trace, spec.threshold);
  return run;
}

inline SweepResult run_sweep(const SweepSpec& spec) {
  SweepResult out;
  out.kind = spec.kind;
  out.grid = spec.grid;
  out.batch_protocol = spec.kind == SweepKind::kModulus ? "full-batch" : "minibatch";

  struct Job {
    double value;
    int seed;
  };
  std::vector<Job> jobs;
  for (double v : spec.grid)
    for (int s = 0; s < spec.seeds; ++s) jobs.push_back({v, s});
  out.runs.resize(jobs.size());

  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    while (true) {
      const std::size_t i = next.fetch_add(1);
      if (i >= jobs.size()) return;
      out.runs[i] = sweep_single_run(spec, jobs[i].value, jobs[i].seed);
    }
  };
  const int n_threads = std::max(1, std::min<int>(spec.max_parallel,
                                                  static_cast<int>(jobs.size())));
  std::vector<std::thread> pool;
  for (int i = 0; i < n_threads; ++i) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  return out;
}

struct SweepAggregate {
  std::vector<double> values;     // grid values with at least one grokked run
  std::vector<double> tau_mean;   // mean tau_grok over grokked runs
  std::vector<double> tau_sd;
  int excluded = 0;  // runs that never grokked (or diverged / hit the cap)
};

inline SweepAggregate aggregate_sweep(const SweepResult& result) {
  SweepAggregate agg;
  for (double v : result.grid) {
    std::vector<double> taus;
    for (const SweepRun& r : result.runs) {
      if (r.value != v) continue;
      if (r.times.grokked)
        taus.push_back(static_cast<double>(r.times.tau_grok));
      else
        ++agg.excluded;
    }
    if (taus.empty()) continue;
    double mean = 0.0;
    for (double t : taus) mean += t;
    mean /= static_cast<double>(taus.size());
    double var = 0.0;
    for (double t : taus) var += (t - mean) * (t - mean);
    agg.values.push_back(v);
    agg.tau_mean.push_back(mean);
    agg.tau_sd.push_back(taus.size() > 1 ? std::sqrt(var / (taus.size() - 1)) : 0.0);
  }
  return agg;
}

// ---------------------------------------------------------------------------
// Branching
// ---------------------------------------------------------------------------

// Continues a checkpoint under a (possibly different) weight decay; branches
// share bit-identical state at the branch point by construction.
inline TrainResult continue_from_checkpoint(Checkpoint& ck, const SeqDataset& train_d,
                                            const SeqDataset& test_d, double weight_decay,
                                            long target_epochs, const TrainOptions& base,
                                            const CheckpointSink& sink = {}) {
  ck.opt.weight_decay = weight_decay;
  Rng rng(ck.rng_seed, ck.rng_counter);
  TrainOptions opts = base;
  opts.epochs = target_epochs;
  opts.weight_decay = weight_decay;
  TrainResult res = train(ck.params, ck.opt, rng, train_d, test_d, opts, ck.epoch, sink);
  ck.epoch = target_epochs;
  ck.rng_seed = rng.seed();
  ck.rng_counter = rng.counter();
  return res;
}

}  // namespace acelab
