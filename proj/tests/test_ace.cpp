#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "acelab/ace.hpp"
#include "acelab/alignment.hpp"
#include "acelab/markov.hpp"

using namespace acelab;

namespace {

// Planted instance: activations live in span(B) + span(C) with exactly zero
// sample cross-covariance, the target map reads only span(B). ACE must
// recover span(B) to numerical precision.
struct Planted {
  Matrix h;      // N x D raw activations
  Matrix jac;    // (N*K) x D
  Matrix basis;  // D x r_rel, the planted relevant-and-active subspace
};

Planted make_planted(int n, int d, int r_rel, int r_act, int k_out, Rng& rng) {
  Matrix joint = qr_orthonormalize(Matrix::randn(d, r_rel + r_act, rng)).q;
  Matrix b = joint.block(0, 0, d, r_rel);
  Matrix c = joint.block(0, r_rel, d, r_act);
  Matrix x = Matrix::randn(n, r_rel, rng);
  Matrix y = Matrix::randn(n, r_act, rng);
  // Zero-mean both coordinate sets (extraction mean-centers activations) and
  // orthogonalize the irrelevant coordinates against the relevant ones in
  // sample space so that the planted subspace is exact, not statistical.
  x = center_columns(x, column_means(x));
  y = center_columns(y, column_means(y));
  Matrix coef = solve_least_squares(x, y, 0.0).coeffs;
  y = y - matmul(x, coef);
  Planted p;
  p.h = matmul(x, b, false, true) + matmul(y, c, false, true);
  p.basis = b;
  Matrix w = Matrix::randn(k_out, r_rel, rng);
  Matrix wb = matmul(w, b, false, true);  // K x D, constant per sample
  p.jac = Matrix(n * k_out, d);
  for (int i = 0; i < n; ++i)
    for (int k = 0; k < k_out; ++k)
      for (int j = 0; j < d; ++j) p.jac(i * k_out + k, j) = wb(k, j);
  return p;
}

double max_principal_angle(const Matrix& qa, const Matrix& qb) {
  auto deg = principal_angles(qa, qb);
  return deg.empty() ? 0.0 : deg.back();
}

}  // namespace

TEST_CASE("identity target map reduces to PCA") {
  Rng rng(1);
  const int n = 200, d = 12;
  Matrix raw = Matrix::randn(n, d, rng);
  // stretch a few directions so the spectrum is well separated
  for (int i = 0; i < n; ++i) {
    raw(i, 0) *= 6.0;
    raw(i, 1) *= 3.0;
    raw(i, 2) *= 1.7;
  }
  ActivationBatch acts = ActivationBatch::from_raw(raw, 0, HookPosition::kAllPositions);
  SensitivityBatch sens;
  sens.outputs_per_sample = d;
  sens.jacobians = Matrix(n * d, d);
  for (int i = 0; i < n; ++i)
    for (int k = 0; k < d; ++k) sens.jacobians(i * d + k, k) = 1.0;

  CoreSubspace core = extract_core(acts, sens, 0.9, 0.0);
  auto pca = svd(acts.centered);
  Matrix top = pca.v.block(0, 0, d, core.rank);
  REQUIRE(max_principal_angle(core.basis, top) < 1e-8 * 180.0 / 3.14159);
}

TEST_CASE("planted relevant-and-active subspaces are recovered exactly") {
  Rng rng(2);
  for (auto [d, r_rel] : {std::pair{20, 3}, std::pair{64, 1}, std::pair{64, 5}}) {
    Planted p = make_planted(300, d, r_rel, 6, r_rel + 2, rng);
    ActivationBatch acts = ActivationBatch::from_raw(p.h, 0, HookPosition::kAllPositions);
    SensitivityBatch sens{p.jac, r_rel + 2};
    CoreSubspace core = extract_core(acts, sens, 1.0, 0.0);
    REQUIRE(max_principal_angle(core.truncated(r_rel).basis, p.basis) < 1e-6 * 180.0 / 3.14159);
    // spectrum collapses after the planted rank
    REQUIRE(core.spectrum[r_rel] / core.spectrum[0] < 1e-6);
  }
}

TEST_CASE("energy rank selection arithmetic") {
  // sigma^2 = (100, 1, 0.01): 99% energy already in the first direction.
  std::vector<double> sigma = {10.0, 1.0, 0.1};
  REQUIRE(rank_from_energy(sigma, 0.99) == 1);
  REQUIRE(rank_from_energy(sigma, 0.995) == 2);
  REQUIRE(rank_from_energy(sigma, 1.0) == 3);
  REQUIRE(rank_from_energy({1.0, 1.0}, 0.5) == 1);
}

TEST_CASE("direct N x NK formulation spans the same core") {
  Rng rng(3);
  const int n = 40, d = 8, k = 2;
  Matrix raw = Matrix::randn(n, d, rng);
  Matrix jac = Matrix::randn(n * k, d, rng);
  ActivationBatch acts = ActivationBatch::from_raw(raw, 0, HookPosition::kAllPositions);
  SensitivityBatch sens{jac, k};
  CoreSubspace core = extract_core(acts, sens, 1.0, 0.0);

  // Independent direct route: SVD of H J^T, core = span(H^T U_r).
  Matrix hjt = matmul(acts.centered, jac, false, true);  // n x (n k)
  auto dec = svd(hjt);
  const int r = 3;
  Matrix u_r = dec.u.block(0, 0, n, r);
  Matrix direct = qr_orthonormalize(matmul(acts.centered, u_r, true, false)).q;
  REQUIRE(max_principal_angle(core.truncated(r).basis, direct) < 1e-6 * 180.0 / 3.14159);
}

TEST_CASE("scaling the target map leaves the core span unchanged") {
  Rng rng(4);
  Planted p = make_planted(150, 16, 2, 4, 3, rng);
  ActivationBatch acts = ActivationBatch::from_raw(p.h, 0, HookPosition::kAllPositions);
  CoreSubspace a = extract_core(acts, SensitivityBatch{p.jac, 3}, 1.0, 0.0);
  CoreSubspace b = extract_core(acts, SensitivityBatch{17.0 * p.jac, 3}, 1.0, 0.0);
  REQUIRE(max_principal_angle(a.truncated(2).basis, b.truncated(2).basis) < 1e-8);
}

TEST_CASE("projector is idempotent, symmetric, with trace equal to rank") {
  Rng rng(5);
  Planted p = make_planted(100, 24, 4, 4, 4, rng);
  ActivationBatch acts = ActivationBatch::from_raw(p.h, 0, HookPosition::kAllPositions);
  CoreSubspace core = extract_core(acts, SensitivityBatch{p.jac, 4},
                                   0.999, default_core_epsilon(acts.centered));
  Matrix proj = core.projector();
  REQUIRE((matmul(proj, proj) - proj).max_abs() < 1e-8);
  REQUIRE((proj - proj.transposed()).max_abs() < 1e-12);
  REQUIRE_THAT(trace(proj), Catch::Matchers::WithinAbs(core.rank, 1e-6));
  Matrix qtq = matmul(core.basis, core.basis, true, false);
  REQUIRE((qtq - Matrix::identity(core.rank)).max_abs() < 1e-10);
}

TEST_CASE("ablation geometry on and off the core") {
  Rng rng(6);
  Planted p = make_planted(100, 10, 2, 3, 2, rng);
  ActivationBatch acts = ActivationBatch::from_raw(p.h, 0, HookPosition::kAllPositions);
  CoreSubspace core = extract_core(acts, SensitivityBatch{p.jac, 2}, 1.0, 0.0);
  core = core.truncated(2);
  Matrix mu = core.mean;

  // h - mu inside the core: core-only returns h, core-removed returns mu
  Matrix in_core(1, 10);
  Matrix coeffs = Matrix::randn(2, 1, rng);
  in_core.map() = mu.map() + (core.basis.map() * coeffs.map()).transpose();
  REQUIRE((ablate(in_core, core, AblationMode::kCoreOnly, mu) - in_core).max_abs() < 1e-10);
  REQUIRE((ablate(in_core, core, AblationMode::kCoreRemoved, mu) - mu).max_abs() < 1e-10);

  // h - mu orthogonal to the core: core-only returns mu, core-removed returns h
  Matrix orth(1, 10);
  Rng rng2(7);
  Matrix z = Matrix::randn(1, 10, rng2);
  Matrix zc = z - matmul(matmul(z, core.basis), core.basis, false, true);
  orth.map() = mu.map() + zc.map();
  REQUIRE((ablate(orth, core, AblationMode::kCoreOnly, mu) - mu).max_abs() < 1e-9);
  REQUIRE((ablate(orth, core, AblationMode::kCoreRemoved, mu) - orth).max_abs() < 1e-9);

  // flip twice is the identity
  Matrix any = Matrix::randn(5, 10, rng2);
  Matrix once = ablate(any, core, AblationMode::kCoreFlipped, mu);
  Matrix twice = ablate(once, core, AblationMode::kCoreFlipped, mu);
  REQUIRE((twice - any).max_abs() < 1e-10);

  // decomposition: (core-only - mu) + (core-removed) = h exactly
  Matrix sum = ablate(any, core, AblationMode::kCoreOnly, mu) +
               ablate(any, core, AblationMode::kCoreRemoved, mu);
  Matrix expect(5, 10);
  expect.map() = any.map().rowwise() + mu.map().row(0);
  REQUIRE((sum - expect).max_abs() < 1e-10);
}

TEST_CASE("extraction rejects mismatched and degenerate inputs") {
  Rng rng(8);
  ActivationBatch acts =
      ActivationBatch::from_raw(Matrix::randn(20, 6, rng), 0, HookPosition::kAllPositions);
  SensitivityBatch wrong{Matrix::randn(20, 5, rng), 1};
  REQUIRE_THROWS_AS(extract_core(acts, wrong, 0.99, 0.0), std::invalid_argument);
  SensitivityBatch zero{Matrix(20, 6, 0.0), 1};
  REQUIRE_THROWS_AS(extract_core(acts, zero, 0.99, 0.0), std::invalid_argument);
  SensitivityBatch ok{Matrix::randn(20, 6, rng), 1};
  REQUIRE_THROWS_AS(extract_core(acts, ok, 1.5, 0.0), std::invalid_argument);
}

TEST_CASE("spectral gap values and the one-dimensional planted case") {
  CoreSubspace c;
  c.rank = 1;
  c.spectrum = {2.0, 1.0};
  REQUIRE(spectral_gap(c) == 4.0);
  c.spectrum = {1.0, 1.0};
  REQUIRE(spectral_gap(c) == 1.0);
  c.spectrum = {1.0, 0.0};
  REQUIRE(std::isinf(spectral_gap(c)));

  // one planted relevant direction, strongly dominant
  Rng rng(9);
  Planted p = make_planted(400, 32, 1, 5, 1, rng);
  ActivationBatch acts = ActivationBatch::from_raw(p.h, 0, HookPosition::kAllPositions);
  CoreSubspace core = extract_core(acts, SensitivityBatch{p.jac, 1}, 0.99,
                                   default_core_epsilon(acts.centered));
  REQUIRE(core.rank == 1);
  REQUIRE(spectral_gap(core) > 1e3);
}

namespace {

// Synthetic task for rank search: labels are the sign of a direction inside
// the planted core; "accuracy" is recovered by any subspace containing it.
AblationScorer planted_scorer(const Matrix& h, const std::vector<int>& labels, const Matrix& w,
                              const Matrix& mu) {
  return [&h, &labels, &w, &mu](const std::vector<HookPoint>& hooks) {
    Matrix cur = h;
    if (!hooks.empty()) hooks[0].transform(cur);
    std::vector<double> scores(h.rows);
    double acc = 0.0;
    for (int i = 0; i < h.rows; ++i) {
      double m = 0.0;
      for (int j = 0; j < h.cols; ++j) m += (cur(i, j) - mu(0, j)) * w(0, j);
      scores[i] = (m > 0 ? 1 : 0) == labels[i] ? 1.0 : 0.0;
      acc += scores[i];
    }
    return std::make_pair(acc / h.rows, scores);
  };
}

}  // namespace

TEST_CASE("refine_rank and dimension_profile find the planted single direction") {
  Rng rng(10);
  Planted p = make_planted(500, 16, 1, 5, 1, rng);
  ActivationBatch acts = ActivationBatch::from_raw(p.h, 0, HookPosition::kAllPositions);
  CoreSubspace core = extract_core(acts, SensitivityBatch{p.jac, 1}, 1.0, 0.0);

  Matrix w = p.basis.transposed();  // 1 x D readout along the planted axis
  std::vector<int> labels(p.h.rows);
  for (int i = 0; i < p.h.rows; ++i) {
    double m = 0.0;
    for (int j = 0; j < p.h.cols; ++j) m += (p.h(i, j) - acts.mean(0, j)) * w(0, j);
    labels[i] = m > 0 ? 1 : 0;
  }
  auto scorer = planted_scorer(p.h, labels, w, acts.mean);
  double baseline = scorer({}).first;
  REQUIRE(baseline == 1.0);

  auto refined = refine_rank(core, scorer, baseline, 0.5, 0.01, 0.05);
  REQUIRE(refined.satisfied);
  REQUIRE(refined.rank == 1);

  auto profile = dimension_profile(core, scorer, baseline, 0.5, 0.01, 0.05);
  REQUIRE(profile.n_sufficient == 1);
  REQUIRE(profile.n_necessary == 1);
}

TEST_CASE("full-space core: core-only equals baseline, core-removed pins to the mean") {
  TransformerConfig cfg;
  cfg.n_layers = 1;
  cfg.d_model = 16;
  cfg.d_ff = 32;
  cfg.n_heads = 2;
  cfg.vocab_size = 4;
  cfg.max_seq_len = 12;
  auto params = TransformerParams::init(cfg, Rng(11));
  auto chain = reference_chain();
  SeqDataset data = markov_dataset(markov_generate(chain, 60, 12, Rng(12)));

  // capture activations at the final layer to build a full-space core
  std::vector<Matrix> caps;
  HookPoint cap{.layer = 1, .position = HookPosition::kAllPositions, .mode = HookMode::kCapture};
  Matrix all(0, cfg.d_model);
  {
    std::vector<Matrix> rows;
    int total = 0;
    for (const auto& tok : data.tokens) {
      auto fr = forward(params, TokenBatch::from_rows({tok}), {cap});
      rows.push_back(fr.captures[0]);
      total += fr.captures[0].rows;
    }
    all = Matrix(total, cfg.d_model);
    int at = 0;
    for (const Matrix& m : rows) {
      all.map().block(at, 0, m.rows, cfg.d_model) = m.map();
      at += m.rows;
    }
  }
  CoreSubspace full;
  full.basis = Matrix::identity(cfg.d_model);
  full.ranked_basis = full.basis;
  full.rank = cfg.d_model;
  full.spectrum.assign(cfg.d_model, 1.0);
  full.layer = 1;
  full.position = HookPosition::kAllPositions;
  full.mean = column_means(all);

  auto scorer = accuracy_scorer(params, data);
  auto report = causal_validate(full, scorer, 0.25, 0.75);
  REQUIRE(report.core_only == report.baseline);

  // core-removed of the full space replaces h by the mean everywhere
  HookPoint mean_hook;
  mean_hook.layer = 1;
  mean_hook.mode = HookMode::kReplace;
  Matrix mu = full.mean;
  mean_hook.transform = [mu](Matrix& h) {
    for (int i = 0; i < h.rows; ++i)
      for (int j = 0; j < h.cols; ++j) h(i, j) = mu(0, j);
  };
  EvalMetrics at_mu = evaluate(params, data, {mean_hook});
  REQUIRE_THAT(report.core_removed, Catch::Matchers::WithinAbs(at_mu.accuracy, 1e-12));
}

TEST_CASE("untrained model scores near chance under every ablation") {
  TransformerConfig cfg;
  cfg.n_layers = 1;
  cfg.d_model = 16;
  cfg.d_ff = 32;
  cfg.n_heads = 2;
  cfg.vocab_size = 4;
  cfg.max_seq_len = 12;
  auto params = TransformerParams::init(cfg, Rng(13));
  auto chain = reference_chain();
  SeqDataset data = markov_dataset(markov_generate(chain, 150, 12, Rng(14)));

  HookPoint cap{.layer = 1, .position = HookPosition::kAllPositions, .mode = HookMode::kCapture};
  std::vector<Matrix> rows;
  int total = 0;
  for (int s = 0; s < data.size(); s += 50) {
    std::vector<std::vector<int>> chunk(data.tokens.begin() + s,
                                        data.tokens.begin() + std::min(s + 50, data.size()));
    auto fr = forward(params, TokenBatch::from_rows(chunk), {cap});
    rows.push_back(fr.captures[0]);
    total += fr.captures[0].rows;
  }
  Matrix all(total, cfg.d_model);
  int at = 0;
  for (const Matrix& m : rows) {
    all.map().block(at, 0, m.rows, cfg.d_model) = m.map();
    at += m.rows;
  }
  ActivationBatch acts = ActivationBatch::from_raw(all, 1, HookPosition::kAllPositions);
  Matrix readout = Matrix::identity(4);
  Matrix jac(0, 0);
  {
    TokenBatch tb = TokenBatch::from_rows(
        std::vector<std::vector<int>>(data.tokens.begin(), data.tokens.begin() + 40));
    jac = jacobian_all_positions_final(params, tb, readout);
  }
  CoreSubspace core = extract_core(acts, SensitivityBatch{jac, 4}, 0.999,
                                   default_core_epsilon(acts.centered));
  auto report = causal_validate(core, accuracy_scorer(params, data), 0.25, 0.75);
  for (double acc : {report.baseline, report.core_only, report.core_removed, report.core_flipped})
    REQUIRE_THAT(acc, Catch::Matchers::WithinAbs(0.25, 0.2));
}

TEST_CASE("core subspace serialization round-trips") {
  Rng rng(15);
  Planted p = make_planted(60, 12, 2, 2, 2, rng);
  ActivationBatch acts = ActivationBatch::from_raw(p.h, 3, HookPosition::kLastToken);
  CoreSubspace core = extract_core(acts, SensitivityBatch{p.jac, 2}, 0.99,
                                   default_core_epsilon(acts.centered));
  auto bytes = serialize_core(core);
  CoreSubspace back = deserialize_core(bytes);
  REQUIRE(serialize_core(back) == bytes);
  REQUIRE(back.rank == core.rank);
  REQUIRE(back.layer == 3);
  REQUIRE(back.position == HookPosition::kLastToken);
  REQUIRE((back.basis - core.basis).max_abs() == 0.0);
}
