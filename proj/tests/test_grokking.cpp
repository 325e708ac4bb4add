#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "acelab/grokking.hpp"
#include "acelab/markov.hpp"

using namespace acelab;

TEST_CASE("psi vector values and the 3p/4 identity") {
  auto psi5 = psi_vector(5);
  REQUIRE(psi5.size() == 2);
  REQUIRE_THAT(psi5[0], Catch::Matchers::WithinAbs(0.6909830056250526, 1e-12));
  REQUIRE_THAT(psi5[1], Catch::Matchers::WithinAbs(1.8090169943749475, 1e-12));
  REQUIRE_THAT(squared_norm(psi5), Catch::Matchers::WithinAbs(3.75, 1e-12));

  for (int p : {31, 43, 53, 61, 79, 89, 101}) {
    auto psi = psi_vector(p);
    REQUIRE_THAT(squared_norm(psi), Catch::Matchers::WithinAbs(0.75 * p, 1e-9));
    for (double v : psi) REQUIRE(v > 0.0);
  }
  REQUIRE_THAT(squared_norm(psi_vector(53)), Catch::Matchers::WithinAbs(39.75, 1e-10));
  REQUIRE_THROWS_AS(psi_vector(10), std::invalid_argument);
}

TEST_CASE("min-norm amplitudes: symmetry, feasibility, optimality") {
  auto a = min_norm_alpha({1.0, 1.0}, 2.0);
  REQUIRE_THAT(a[0], Catch::Matchers::WithinAbs(1.0, 1e-12));
  REQUIRE_THAT(a[1], Catch::Matchers::WithinAbs(1.0, 1e-12));

  auto psi = psi_vector(31);
  const double delta = 2.5;
  auto alpha = min_norm_alpha(psi, delta);
  double inner = 0.0;
  for (std::size_t i = 0; i < psi.size(); ++i) inner += alpha[i] * psi[i];
  REQUIRE_THAT(inner, Catch::Matchers::WithinAbs(delta, 1e-10));

  // optimality against 1e4 random feasible points
  Rng rng(1);
  const double opt_norm = std::sqrt(squared_norm(alpha));
  for (int trial = 0; trial < 10000; ++trial) {
    std::vector<double> cand(psi.size());
    double ip = 0.0;
    for (std::size_t i = 0; i < psi.size(); ++i) {
      cand[i] = rng.uniform();
      ip += cand[i] * psi[i];
    }
    const double scale = delta / ip;  // rescale onto the constraint boundary
    double norm2 = 0.0;
    for (double& v : cand) {
      v *= scale;
      norm2 += v * v;
    }
    REQUIRE(std::sqrt(norm2) >= opt_norm - 1e-9);
  }
}

TEST_CASE("margin trajectory endpoints and ODE residual") {
  REQUIRE(margin_trajectory(0.0, 2.0, 5.0) == 0.0);
  REQUIRE_THAT(margin_trajectory(1e9, 2.0, 5.0), Catch::Matchers::WithinAbs(5.0, 1e-12));
  REQUIRE_THAT(margin_trajectory(0.5, 2.0, 5.0),
               Catch::Matchers::WithinAbs(5.0 * (1.0 - std::exp(-1.0)), 1e-12));
  for (int i = 0; i < 1000; ++i) {
    const double t = 0.01 * i;
    REQUIRE(std::abs(margin_ode_residual(t, 1.7, 3.3)) < 1e-10);
  }
}

TEST_CASE("grokking delay law: value, divergence, monotonicity, asymptote") {
  REQUIRE_THAT(tau_grok(53.0, 2770.0, 23.0), Catch::Matchers::WithinAbs(1576.6, 1.0));
  REQUIRE(tau_grok(23.0 + 1e-9, 2770.0, 23.0) > 1e4);
  REQUIRE_THROWS_AS(tau_grok(23.0, 2770.0, 23.0), std::invalid_argument);

  double prev = std::numeric_limits<double>::infinity();
  for (double p = 24.0; p < 500.0; p += 1.0) {
    const double t = tau_grok(p, 2770.0, 23.0);
    REQUIRE(t < prev);
    REQUIRE(t > 0.0);
    prev = t;
  }
  // tau(p) ~ Omega p_crit / p for large p
  const double p_big = 1e7;
  REQUIRE_THAT(tau_grok(p_big, 2770.0, 23.0) / (2770.0 * 23.0 / p_big),
               Catch::Matchers::WithinAbs(1.0, 1e-5));

  // monotone in omega through Omega ~ 1/omega
  double prev_tau = std::numeric_limits<double>::infinity();
  for (double omega : {0.3, 0.5, 1.0, 2.0, 3.0}) {
    const double t = tau_grok(53.0, 2770.0 / omega, 23.0);
    REQUIRE(t < prev_tau);
    prev_tau = t;
  }
}

TEST_CASE("effective redundancy") {
  auto psi = psi_vector(11);
  Matrix eye = Matrix::identity(static_cast<int>(psi.size()));
  REQUIRE_THAT(effective_redundancy(psi, eye),
               Catch::Matchers::WithinAbs(squared_norm(psi), 1e-10));
  REQUIRE_THAT(effective_redundancy(psi, 2.0 * eye),
               Catch::Matchers::WithinAbs(0.5 * squared_norm(psi), 1e-10));

  Rng rng(2);
  Matrix b = Matrix::randn(5, 5, rng);
  Matrix s = matmul(b, b, true, false);
  for (int i = 0; i < 5; ++i) s(i, i) += 1.0;
  // explicit-inverse oracle
  Matrix sinv(5, 5);
  sinv.map() = s.map().inverse();
  std::vector<double> v = {1.0, -2.0, 0.5, 3.0, 1.5};
  Matrix vm(5, 1);
  for (int i = 0; i < 5; ++i) vm(i, 0) = v[i];
  double expected = dot(vm, matmul(sinv, vm));
  REQUIRE_THAT(effective_redundancy(v, s), Catch::Matchers::WithinAbs(expected, 1e-9));

  Matrix neg = Matrix::identity(5);
  neg(2, 2) = -1.0;
  REQUIRE_THROWS_AS(effective_redundancy(v, neg), std::invalid_argument);
}

TEST_CASE("grok time detection from metric traces") {
  std::vector<MetricRow> trace;
  for (long s = 1; s <= 1000; ++s) {
    MetricRow r;
    r.step = s;
    r.train_acc = s >= 100 ? 1.0 : 0.5;
    r.test_acc = s >= 600 ? 1.0 : 0.1;
    trace.push_back(r);
  }
  auto t = detect_grok_times(trace, 0.99);
  REQUIRE(t.grokked);
  REQUIRE(t.tau_mem == 100);
  REQUIRE(t.tau_gen == 600);
  REQUIRE(t.tau_grok == 500);

  for (auto& r : trace) r.test_acc = 0.5;
  auto nog = detect_grok_times(trace, 0.99);
  REQUIRE_FALSE(nog.grokked);
  REQUIRE(nog.memorized);
  REQUIRE(nog.tau_gen == -1);
}

TEST_CASE("power-law fit exact and under multiplicative noise") {
  std::vector<double> x = {0.3, 0.5, 1.0, 1.5, 2.0, 3.0};
  std::vector<double> y;
  for (double v : x) y.push_back(5.0 / v);
  auto fit = fit_power_law(x, y);
  REQUIRE_THAT(fit.beta, Catch::Matchers::WithinAbs(-1.0, 1e-12));
  REQUIRE_THAT(fit.c, Catch::Matchers::WithinAbs(5.0, 1e-10));
  REQUIRE_THAT(fit.r2, Catch::Matchers::WithinAbs(1.0, 1e-12));

  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> noisy;
    for (double v : y) noisy.push_back(v * (1.0 + 0.05 * (2.0 * rng.uniform() - 1.0)));
    auto nf = fit_power_law(x, noisy);
    REQUIRE_THAT(nf.beta, Catch::Matchers::WithinAbs(-1.0, 0.1));
  }
  REQUIRE_THROWS_AS(fit_power_law({1.0, -1.0}, {1.0, 1.0}), std::invalid_argument);
}

TEST_CASE("ode-law fit recovers planted constants exactly and under noise") {
  std::vector<double> p = {31, 43, 53, 61, 79, 89, 101};
  std::vector<double> tau;
  for (double v : p) tau.push_back(tau_grok(v, 2770.0, 23.0));
  auto fit = fit_ode_law(p, tau);
  REQUIRE(fit.converged);
  REQUIRE_THAT(fit.omega_const, Catch::Matchers::WithinAbs(2770.0, 1.0));
  REQUIRE_THAT(fit.p_crit, Catch::Matchers::WithinAbs(23.0, 0.01));
  REQUIRE(fit.r2 > 1.0 - 1e-10);

  Rng rng(4);
  std::vector<double> noisy;
  for (double t : tau) noisy.push_back(t * (1.0 + 0.05 * (2.0 * rng.uniform() - 1.0)));
  auto nf = fit_ode_law(p, noisy);
  REQUIRE(nf.r2 >= 0.98);
}

TEST_CASE("sweep machinery runs a capped micro-instance") {
  SweepSpec spec;
  spec.kind = SweepKind::kModulus;
  spec.grid = {5.0};
  spec.seeds = 1;
  spec.step_cap = 10;
  spec.d_model = 16;
  spec.d_ff = 32;
  spec.n_heads = 2;
  auto result = run_sweep(spec);
  REQUIRE(result.runs.size() == 1);
  REQUIRE(result.batch_protocol == "full-batch");
  REQUIRE(result.runs[0].hit_cap);
  REQUIRE_FALSE(result.runs[0].times.grokked);
  auto agg = aggregate_sweep(result);
  REQUIRE(agg.excluded == 1);
  REQUIRE(agg.values.empty());
}

TEST_CASE("branched continuation is bit-identical to an unbranched run") {
  auto chain = reference_chain();
  auto seqs = markov_generate(chain, 32, 10, Rng(1));
  SeqDataset train_d = markov_dataset({seqs.begin(), seqs.begin() + 24});
  SeqDataset test_d = markov_dataset({seqs.begin() + 24, seqs.end()});
  TransformerConfig cfg;
  cfg.n_layers = 1;
  cfg.d_model = 16;
  cfg.d_ff = 32;
  cfg.n_heads = 2;
  cfg.vocab_size = 4;
  cfg.max_seq_len = 10;

  TrainOptions opts;
  opts.epochs = 4;
  opts.batch_size = 8;
  opts.weight_decay = 0.5;
  opts.checkpoint_every = 2;

  // run A: straight through 4 epochs
  std::vector<Checkpoint> cks_a;
  {
    auto params = TransformerParams::init(cfg, Rng(7));
    AdamWState opt = AdamWState::init(params.tensors, 1e-3, 0.5);
    Rng rng(8);
    train(params, opt, rng, train_d, test_d, opts, 0,
          [&](const Checkpoint& c) { cks_a.push_back(c); });
  }
  // run B: stop at 2, branch with the same weight decay to 4
  Checkpoint mid;
  {
    auto params = TransformerParams::init(cfg, Rng(7));
    AdamWState opt = AdamWState::init(params.tensors, 1e-3, 0.5);
    Rng rng(8);
    TrainOptions half = opts;
    half.epochs = 2;
    std::vector<Checkpoint> cks;
    train(params, opt, rng, train_d, test_d, half, 0,
          [&](const Checkpoint& c) { cks.push_back(c); });
    mid = cks.back();
  }
  REQUIRE(serialize_checkpoint(mid) == serialize_checkpoint(cks_a[1]));  // 0, 2, 4

  Checkpoint same_wd = mid;
  std::vector<Checkpoint> cont;
  TrainOptions rest = opts;
  continue_from_checkpoint(same_wd, train_d, test_d, 0.5, 4, rest,
                           [&](const Checkpoint& c) { cont.push_back(c); });
  REQUIRE(serialize_checkpoint(cont.back()) == serialize_checkpoint(cks_a.back()));

  // branched with different weight decay diverges from the maintained branch
  Checkpoint no_wd = mid;
  continue_from_checkpoint(no_wd, train_d, test_d, 0.0, 4, rest);
  REQUIRE(serialize_checkpoint(no_wd) != serialize_checkpoint(same_wd));
}
