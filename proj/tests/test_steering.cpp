#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "acelab/ace.hpp"
#include "acelab/agreement.hpp"
#include "acelab/steering.hpp"
#include "acelab/train.hpp"

using namespace acelab;

TEST_CASE("reflect basics: identity at s=0, involution at s=1, coordinate algebra") {
  Rng rng(1);
  Matrix q = qr_orthonormalize(Matrix::randn(6, 1, rng)).q.transposed();  // 1 x 6 unit
  Matrix mu = Matrix::randn(1, 6, rng);
  Matrix h = Matrix::randn(4, 6, rng);

  REQUIRE((reflect(h, q, mu, 0.0) - h).max_abs() == 0.0);
  Matrix twice = reflect(reflect(h, q, mu, 1.0), q, mu, 1.0);
  REQUIRE((twice - h).max_abs() < 1e-12);

  for (double s : {0.3, 1.0, 2.5}) {
    Matrix ref = reflect(h, q, mu, s);
    for (int i = 0; i < h.rows; ++i) {
      double before = 0.0, after = 0.0;
      for (int j = 0; j < 6; ++j) {
        before += (h(i, j) - mu(0, j)) * q(0, j);
        after += (ref(i, j) - mu(0, j)) * q(0, j);
      }
      REQUIRE_THAT(after, Catch::Matchers::WithinAbs((1.0 - 2.0 * s) * before, 1e-10));
      // orthogonal complement untouched: the difference is along q
      for (int j = 0; j < 6; ++j) {
        double diff = ref(i, j) - h(i, j);
        double expected = (after - before) * q(0, j);
        REQUIRE_THAT(diff, Catch::Matchers::WithinAbs(expected, 1e-10));
      }
    }
  }
}

TEST_CASE("reflect is affine: combinations about the mean are preserved") {
  Rng rng(2);
  Matrix q = qr_orthonormalize(Matrix::randn(5, 1, rng)).q.transposed();
  Matrix mu = Matrix::randn(1, 5, rng);
  Matrix h1 = Matrix::randn(1, 5, rng);
  Matrix h2 = Matrix::randn(1, 5, rng);
  const double a = 0.3;
  Matrix mix(1, 5);
  mix.map() = a * h1.map() + (1.0 - a) * h2.map();
  Matrix lhs = reflect(mix, q, mu, 0.7);
  Matrix rhs(1, 5);
  rhs.map() = a * reflect(h1, q, mu, 0.7).map() + (1.0 - a) * reflect(h2, q, mu, 0.7).map();
  REQUIRE((lhs - rhs).max_abs() < 1e-12);
}

TEST_CASE("generation margin on controlled logits") {
  Matrix logits(1, 6);
  // plural = {0, 1}, singular = {2, 3}
  std::vector<int> plural = {0, 1}, singular = {2, 3};
  REQUIRE_THAT(generation_margin(logits, plural, singular), Catch::Matchers::WithinAbs(0.0, 1e-12));

  logits(0, 0) = logits(0, 1) = 10.0;
  REQUIRE_THAT(generation_margin(logits, plural, singular), Catch::Matchers::WithinAbs(10.0, 1e-9));

  Matrix l2(1, 6);
  l2(0, 0) = 3.0;
  l2(0, 2) = 1.0;
  REQUIRE_THAT(generation_margin(l2, {0}, {2}), Catch::Matchers::WithinAbs(2.0, 1e-12));
}

TEST_CASE("gate thresholds") {
  SteeringPolicy policy;
  policy.plural_verbs = {0};
  policy.singular_verbs = {1};
  Matrix logits(1, 4);

  // verb mass 0.5 exactly at equal logits on 4 tokens
  policy.gate_threshold = 0.4;
  REQUIRE(gate(logits, policy));
  policy.gate_threshold = 0.6;
  REQUIRE_FALSE(gate(logits, policy));

  // tiny verb mass vs 0.01
  Matrix skew(1, 4);
  skew(0, 2) = 12.0;
  policy.gate_threshold = 0.01;
  REQUIRE_FALSE(gate(skew, policy));

  policy.gate_threshold = 0.0;
  REQUIRE(gate(skew, policy));
}

TEST_CASE("strength calibration arithmetic") {
  // m0 = -3, probe raises margin to m1 = m0 + g*s0 with g = 2
  auto c = calibrate_strength(-3.0, -3.0 + 2.0 * 0.1, 0.1, 0.5, 4.0);
  REQUIRE_THAT(c.gain, Catch::Matchers::WithinAbs(2.0, 1e-12));
  REQUIRE_THAT(c.s_star, Catch::Matchers::WithinAbs(1.75, 1e-12));

  // cap
  auto capped = calibrate_strength(-30.0, -30.0 + 2.0 * 0.1, 0.1, 0.5, 1.0);
  REQUIRE(capped.s_star == 1.0);

  // sign(0) := +1, so the target is -eps
  auto zero = calibrate_strength(0.0, 0.2, 0.1, 0.5, 4.0);
  REQUIRE_THAT(zero.s_star, Catch::Matchers::WithinAbs(-0.25, 1e-12));

  // degenerate gain
  auto degen = calibrate_strength(1.0, 1.0, 0.1, 0.5, 4.0);
  REQUIRE(degen.degenerate);
  REQUIRE(degen.s_star == 0.0);

  REQUIRE_THROWS_AS(calibrate_strength(1.0, 1.0, 0.0, 0.5, 4.0), std::invalid_argument);
}

TEST_CASE("first-order calibration is exact on a linear margin model") {
  // margin(s) = w . reflect(h, q, mu, s) is exactly linear in s, so one probe
  // pins the needed strength and the post margin hits the target exactly.
  Rng rng(3);
  Matrix q = qr_orthonormalize(Matrix::randn(8, 1, rng)).q.transposed();
  Matrix mu = Matrix::randn(1, 8, rng);
  Matrix h = Matrix::randn(1, 8, rng);
  Matrix w = Matrix::randn(1, 8, rng);
  auto margin_of = [&](double s) {
    Matrix r = reflect(h, q, mu, s);
    double m = 0.0;
    for (int j = 0; j < 8; ++j) m += w(0, j) * r(0, j);
    return m;
  };
  const double m0 = margin_of(0.0);
  const double s0 = 0.1, eps = 0.5;
  auto cal = calibrate_strength(m0, margin_of(s0), s0, eps, 100.0);
  const double target = -(m0 >= 0 ? 1.0 : -1.0) * eps;
  REQUIRE_THAT(margin_of(cal.s_star), Catch::Matchers::WithinAbs(target, 1e-9));
}

namespace {

// Shared trained surrogate for the generation tests (built once).
struct TrainedSurrogate {
  TransformerParams params;
  SteeringPolicy policy;
  SurrogateGrammar grammar;
};

TrainedSurrogate& trained_surrogate() {
  static TrainedSurrogate* cached = [] {
    auto* out = new TrainedSurrogate;
    SurrogateTaskSpec spec = surrogate_agreement_task();
    out->grammar = spec.grammar;
    auto sentences = surrogate_sentences(spec.grammar);
    SeqDataset data = surrogate_dataset(sentences);
    out->params = TransformerParams::init(spec.model, Rng(11));
    AdamWState opt = AdamWState::init(out->params.tensors, spec.lr, spec.weight_decay);
    Rng rng(12);
    TrainOptions opts;
    opts.epochs = spec.epochs;
    opts.batch_size = spec.batch_size;
    opts.weight_decay = spec.weight_decay;
    train(out->params, opt, rng, data, data, opts);

    // 1D core at the final layer from margin Jacobians
    auto prompts = surrogate_prompts(sentences);
    const int layer = spec.model.n_layers;
    HookPoint cap{.layer = layer, .position = HookPosition::kLastToken, .mode = HookMode::kCapture};
    auto fr = forward(out->params, TokenBatch::from_rows(prompts), {cap});
    ActivationBatch acts = ActivationBatch::from_raw(fr.captures[0], layer, HookPosition::kLastToken);
    Matrix readout = surrogate_margin_readout(spec.grammar);
    Matrix jac(static_cast<int>(prompts.size()), spec.model.d_model);
    for (std::size_t i = 0; i < prompts.size(); ++i) {
      Matrix j = jacobian_at(out->params, prompts[i], layer,
                             static_cast<int>(prompts[i].size()) - 1, readout);
      for (int d = 0; d < spec.model.d_model; ++d) jac(static_cast<int>(i), d) = j(0, d);
    }
    CoreSubspace core = extract_core(acts, SensitivityBatch{jac, 1}, 0.99,
                                     default_core_epsilon(acts.centered));
    out->policy.axis = core.ranked_basis.block(0, 0, spec.model.d_model, 1).transposed();
    out->policy.mean = core.mean;
    out->policy.layer = layer;
    out->policy.plural_verbs = spec.grammar.plural_verbs();
    out->policy.singular_verbs = spec.grammar.singular_verbs();
    return out;
  }();
  return *cached;
}

}  // namespace

TEST_CASE("gate threshold of one disables steering entirely") {
  auto& ts = trained_surrogate();
  SteeringPolicy off = ts.policy;
  off.gate_threshold = 1.0;
  std::vector<int> prompt = {9, 0, 1, 7, 0, 5};  // "now the key near the cups"
  auto gen = generate_steered(ts.params, prompt, off, 2);
  REQUIRE(gen.tokens == gen.base_tokens);
  for (const auto& tr : gen.trace) {
    REQUIRE_FALSE(tr.gated_on);
    REQUIRE(tr.s_star == 0.0);
  }
}

TEST_CASE("steered generation flips the verb at the decision point") {
  auto& ts = trained_surrogate();
  std::vector<int> prompt = {9, 0, 1, 7, 0, 5};  // singular head "key"
  auto base = generate_steered(ts.params, prompt, ts.policy, 1);
  REQUIRE(ts.grammar.is_verb(base.base_tokens[0]));
  REQUIRE_FALSE(ts.grammar.is_plural_verb(base.base_tokens[0]));  // base picks singular
  REQUIRE(base.trace[0].gated_on);
  REQUIRE(ts.grammar.is_plural_verb(base.tokens[0]));  // steered picks plural
}

TEST_CASE("trace invariant: zero strength on every gated-off step") {
  auto& ts = trained_surrogate();
  // start mid-sentence where the next token is not a verb decision
  std::vector<int> prompt = {9, 0, 1};  // "now the key ..."
  auto gen = generate_steered(ts.params, prompt, ts.policy, 3);
  bool saw_off = false;
  for (const auto& tr : gen.trace) {
    if (!tr.gated_on) {
      saw_off = true;
      REQUIRE(tr.s_star == 0.0);
    }
  }
  REQUIRE(saw_off);
}
