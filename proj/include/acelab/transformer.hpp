#pragma once

#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "acelab/matrix.hpp"
#include "acelab/rng.hpp"
#include "acelab/tape.hpp"

namespace acelab {

struct TransformerConfig {
  int n_layers = 1;
  int d_model = 64;
  int d_ff = 256;
  int n_heads = 4;
  int vocab_size = 4;
  int max_seq_len = 32;

  void validate() const {
    if (n_layers < 1 || d_model < 1 || d_ff < 1 || n_heads < 1 || vocab_size < 1 ||
        max_seq_len < 1)
      throw std::invalid_argument("transformer config: all sizes must be positive");
    if (d_model % n_heads != 0)
      throw std::invalid_argument("transformer config: d_model not divisible by n_heads");
  }

  bool operator==(const TransformerConfig&) const = default;
};

// Decoder-only pre-LN transformer without biases or learnable norm affines:
//   x = tok_emb[ids] + pos_emb
//   per block: x += attn(LN(x)); x += W_out gelu(W_in LN(x))
//   logits = unembed(LN(x))
// Residual-stream states are the hookable "layers": layer 0 is the embedding
// output, layer l the output of block l.
struct TransformerParams {
  TransformerConfig cfg;
  std::vector<Matrix> tensors;

  static std::vector<std::string> tensor_names(const TransformerConfig& cfg) {
    std::vector<std::string> names = {"tok_emb", "pos_emb"};
    for (int l = 0; l < cfg.n_layers; ++l) {
      const std::string p = "block" + std::to_string(l) + ".";
      for (const char* t : {"wq", "wk", "wv", "wo", "w_in", "w_out"}) names.push_back(p + t);
    }
    names.emplace_back("unembed");
    return names;
  }

  static TransformerParams init(const TransformerConfig& cfg, Rng rng) {
    cfg.validate();
    TransformerParams p;
    p.cfg = cfg;
    const double emb_std = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
    p.tensors.push_back(Matrix::randn(cfg.vocab_size, cfg.d_model, rng, emb_std));
    p.tensors.push_back(Matrix::randn(cfg.max_seq_len, cfg.d_model, rng, emb_std));
    for (int l = 0; l < cfg.n_layers; ++l) {
      const double attn_std = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
      for (int i = 0; i < 4; ++i)
        p.tensors.push_back(Matrix::randn(cfg.d_model, cfg.d_model, rng, attn_std));
      p.tensors.push_back(Matrix::randn(cfg.d_model, cfg.d_ff, rng, attn_std));
      p.tensors.push_back(
          Matrix::randn(cfg.d_ff, cfg.d_model, rng, 1.0 / std::sqrt(static_cast<double>(cfg.d_ff))));
    }
    p.tensors.push_back(Matrix::randn(cfg.d_model, cfg.vocab_size,
                                      rng, 1.0 / std::sqrt(static_cast<double>(cfg.d_model))));
    return p;
  }

  int n_tensors() const { return static_cast<int>(tensors.size()); }
};

// A batch of same-length token sequences, flattened row-major.
struct TokenBatch {
  int n_seqs = 0;
  int seq_len = 0;
  std::vector<int> ids;  // n_seqs * seq_len

  static TokenBatch from_rows(const std::vector<std::vector<int>>& rows) {
    TokenBatch b;
    if (rows.empty()) return b;
    b.n_seqs = static_cast<int>(rows.size());
    b.seq_len = static_cast<int>(rows[0].size());
    b.ids.reserve(static_cast<std::size_t>(b.n_seqs) * b.seq_len);
    for (const auto& r : rows) {
      if (static_cast<int>(r.size()) != b.seq_len)
        throw std::invalid_argument("token batch: ragged sequences");
      b.ids.insert(b.ids.end(), r.begin(), r.end());
    }
    return b;
  }
};

enum class HookPosition { kAllPositions, kLastToken };
enum class HookMode { kCapture, kReplace };

// Intervention point on the residual stream. layer in [0, n_layers];
// replace transforms act on the selected rows in place, so an identity
// transform reproduces baseline logits bit-exactly.
struct HookPoint {
  int layer = 0;
  HookPosition position = HookPosition::kAllPositions;
  HookMode mode = HookMode::kCapture;
  std::function<void(Matrix&)> transform;  // replace mode only
};

struct ForwardResult {
  Tape tape;
  int logits = -1;                       // (n_seqs*seq_len) x vocab node
  std::vector<int> residual_nodes;       // node id per hookable layer
  std::vector<Matrix> captures;          // one entry per capture hook, in order
  int n_seqs = 0;
  int seq_len = 0;
};

namespace detail {

inline std::vector<int> selected_rows(HookPosition pos, int n_seqs, int seq_len) {
  std::vector<int> rows;
  if (pos == HookPosition::kAllPositions) {
    rows.resize(static_cast<std::size_t>(n_seqs) * seq_len);
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = static_cast<int>(i);
  } else {
    rows.reserve(n_seqs);
    for (int s = 0; s < n_seqs; ++s) rows.push_back(s * seq_len + seq_len - 1);
  }
  return rows;
}

inline Matrix gather_rows(const Matrix& m, const std::vector<int>& rows) {
  Matrix out(static_cast<int>(rows.size()), m.cols);
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (int j = 0; j < m.cols; ++j) out(static_cast<int>(i), j) = m(rows[i], j);
  return out;
}

inline void scatter_rows(Matrix& m, const std::vector<int>& rows, const Matrix& vals) {
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (int j = 0; j < m.cols; ++j) m(rows[i], j) = vals(static_cast<int>(i), j);
}

}  // namespace detail

// Runs the model over a batch, applying hooks on the residual stream.
// Capture hooks copy the selected rows out; replace hooks transform them in
// place before downstream computation. Tapes with replace hooks must not be
// used for backward passes.
inline ForwardResult forward(const TransformerParams& params, const TokenBatch& batch,
                             const std::vector<HookPoint>& hooks = {}) {
  const TransformerConfig& cfg = params.cfg;
  if (batch.seq_len > cfg.max_seq_len)
    throw std::invalid_argument("forward: sequence longer than max_seq_len");
  for (int id : batch.ids)
    if (id < 0 || id >= cfg.vocab_size) throw std::out_of_range("forward: token id out of range");

  ForwardResult out;
  out.n_seqs = batch.n_seqs;
  out.seq_len = batch.seq_len;
  Tape& t = out.tape;

  std::vector<int> leaves(params.n_tensors());
  for (int i = 0; i < params.n_tensors(); ++i) leaves[i] = t.leaf(params.tensors[i], i);

  std::vector<int> pos_ids(batch.ids.size());
  for (int s = 0; s < batch.n_seqs; ++s)
    for (int p = 0; p < batch.seq_len; ++p) pos_ids[s * batch.seq_len + p] = p;

  int x = t.add(t.embedding(leaves[0], batch.ids), t.embedding(leaves[1], pos_ids));

  auto apply_hooks = [&](int layer, int node) {
    for (const HookPoint& h : hooks) {
      if (h.layer != layer) continue;
      auto rows = detail::selected_rows(h.position, batch.n_seqs, batch.seq_len);
      if (h.mode == HookMode::kCapture) {
        out.captures.push_back(detail::gather_rows(t.value(node), rows));
      } else {
        Matrix sel = detail::gather_rows(t.value(node), rows);
        h.transform(sel);
        detail::scatter_rows(t.mutable_value(node), rows, sel);
      }
    }
  };

  out.residual_nodes.push_back(x);
  apply_hooks(0, x);

  int base = 2;
  for (int l = 0; l < cfg.n_layers; ++l) {
    int a = t.layer_norm(x);
    int q = t.matmul(a, leaves[base + 0]);
    int k = t.matmul(a, leaves[base + 1]);
    int v = t.matmul(a, leaves[base + 2]);
    int att = t.causal_attention(q, k, v, cfg.n_heads, batch.n_seqs);
    x = t.add(x, t.matmul(att, leaves[base + 3]));
    int m = t.layer_norm(x);
    int ff = t.matmul(t.gelu(t.matmul(m, leaves[base + 4])), leaves[base + 5]);
    x = t.add(x, ff);
    out.residual_nodes.push_back(x);
    apply_hooks(l + 1, x);
    base += 6;
  }

  int fn = t.layer_norm(x);
  out.logits = t.matmul(fn, leaves[base]);
  return out;
}

// Jacobian of a linear readout of the same-position logits with respect to
// the residual stream at `layer`, for one sequence and position. readout is
// (K x vocab); the result is (K x d_model). The map from the hooked state to
// the readout is "the rest of the network", so hooks below the final layer
// see gradients routed through the remaining blocks.
inline Matrix jacobian_at(const TransformerParams& params, const std::vector<int>& tokens,
                          int layer, int position, const Matrix& readout) {
  if (readout.cols != params.cfg.vocab_size)
    throw std::invalid_argument("jacobian_at: readout width must equal vocab size");
  if (layer < 0 || layer > params.cfg.n_layers)
    throw std::invalid_argument("jacobian_at: layer out of range");
  ForwardResult fr = forward(params, TokenBatch::from_rows({tokens}));
  if (position < 0 || position >= fr.seq_len)
    throw std::invalid_argument("jacobian_at: position out of range");
  const int hook = fr.residual_nodes[layer];
  Matrix jac(readout.rows, params.cfg.d_model);
  Matrix seed(fr.seq_len, params.cfg.vocab_size);
  for (int k = 0; k < readout.rows; ++k) {
    seed.map().setZero();
    for (int j = 0; j < readout.cols; ++j) seed(position, j) = readout(k, j);
    fr.tape.backward(fr.logits, seed, hook + 1);
    const Matrix& g = fr.tape.grad(hook);
    for (int j = 0; j < params.cfg.d_model; ++j) jac(k, j) = g(position, j);
  }
  return jac;
}

// Jacobians of per-position logits readouts with respect to the final-layer
// residual, for every position of every sequence at once. Valid only at the
// final layer, where the remaining map (layer norm + unembedding) is
// position-local; one backward pass per readout component covers all
// positions. Returns (n_rows*K) x d_model with K-row blocks per position.
inline Matrix jacobian_all_positions_final(const TransformerParams& params,
                                           const TokenBatch& batch, const Matrix& readout) {
  if (readout.cols != params.cfg.vocab_size)
    throw std::invalid_argument("jacobian: readout width must equal vocab size");
  ForwardResult fr = forward(params, batch);
  const int hook = fr.residual_nodes[params.cfg.n_layers];
  const int n_rows = batch.n_seqs * batch.seq_len;
  const int kk = readout.rows;
  Matrix jac(n_rows * kk, params.cfg.d_model);
  Matrix seed(n_rows, params.cfg.vocab_size);
  for (int k = 0; k < kk; ++k) {
    for (int i = 0; i < n_rows; ++i)
      for (int j = 0; j < readout.cols; ++j) seed(i, j) = readout(k, j);
    fr.tape.backward(fr.logits, seed, hook + 1);
    const Matrix& g = fr.tape.grad(hook);
    for (int i = 0; i < n_rows; ++i)
      for (int j = 0; j < params.cfg.d_model; ++j) jac(i * kk + k, j) = g(i, j);
  }
  return jac;
}

}  // namespace acelab
