#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <utility>
#include <vector>

#include "acelab/matrix.hpp"

namespace acelab {

// Reverse-mode tape over Matrix values with a closed op set:
// matmul, add (same-shape / broadcast bias), scale, gelu, layer_norm,
// softmax over rows, causal multi-head attention (a fixed composition of
// matmul + masked softmax, fused for batching), embedding lookup, and mean
// cross-entropy. Nodes execute eagerly at record time; backward() walks the
// node list in reverse creation order, which is a reverse topological order
// by construction, and visits each node exactly once per call.
class Tape {
 public:
  enum class Op : std::uint8_t {
    kLeaf,
    kMatmul,
    kAdd,
    kAddBias,
    kScale,
    kGelu,
    kLayerNorm,
    kSoftmaxRows,
    kCausalAttention,
    kEmbedding,
    kCrossEntropyMean,
  };

  struct Node {
    Op op = Op::kLeaf;
    int a = -1;
    int b = -1;
    int c = -1;  // third input (attention value)
    Matrix val;
    Matrix grad;
    Matrix stash;            // op-specific saved state for backward
    std::vector<int> ints;   // op-specific integer aux (ids, flags, dims)
    double x0 = 0.0;         // op-specific scalar aux
    int param_slot = -1;     // >= 0 when this leaf mirrors a trainable parameter
  };

  int size() const { return static_cast<int>(nodes_.size()); }
  const Matrix& value(int id) const { return nodes_[id].val; }
  Matrix& mutable_value(int id) { return nodes_[id].val; }
  const Matrix& grad(int id) const { return nodes_[id].grad; }
  const Node& node(int id) const { return nodes_[id]; }

  int leaf(Matrix m, int param_slot = -1) {
    Node n;
    n.op = Op::kLeaf;
    n.val = std::move(m);
    n.param_slot = param_slot;
    return push(std::move(n));
  }

  int matmul(int a, int b, bool trans_a = false, bool trans_b = false, double alpha = 1.0) {
    Node n;
    n.op = Op::kMatmul;
    n.a = a;
    n.b = b;
    n.ints = {trans_a ? 1 : 0, trans_b ? 1 : 0};
    n.x0 = alpha;
    n.val = acelab::matmul(nodes_[a].val, nodes_[b].val, trans_a, trans_b, alpha);
    return push(std::move(n));
  }

  int add(int a, int b) {
    const Matrix& va = nodes_[a].val;
    const Matrix& vb = nodes_[b].val;
    if (va.rows != vb.rows || va.cols != vb.cols)
      throw std::invalid_argument("tape add: shape mismatch");
    Node n;
    n.op = Op::kAdd;
    n.a = a;
    n.b = b;
    n.val = va + vb;
    return push(std::move(n));
  }

  // a: (N x D), bias: (1 x D) broadcast over rows.
  int add_bias(int a, int bias) {
    const Matrix& va = nodes_[a].val;
    const Matrix& vb = nodes_[bias].val;
    if (vb.rows != 1 || vb.cols != va.cols)
      throw std::invalid_argument("tape add_bias: bias must be 1 x cols");
    Node n;
    n.op = Op::kAddBias;
    n.a = a;
    n.b = bias;
    n.val = Matrix(va.rows, va.cols);
    n.val.map() = va.map().rowwise() + vb.map().row(0);
    return push(std::move(n));
  }

  int scale(int a, double s) {
    Node n;
    n.op = Op::kScale;
    n.a = a;
    n.x0 = s;
    n.val = s * nodes_[a].val;
    return push(std::move(n));
  }

  int gelu(int a) {
    const Matrix& x = nodes_[a].val;
    Node n;
    n.op = Op::kGelu;
    n.a = a;
    n.val = Matrix(x.rows, x.cols);
    for (std::size_t i = 0; i < x.size(); ++i) n.val.data[i] = gelu_fwd(x.data[i]);
    return push(std::move(n));
  }

  // Row-wise normalization without learnable affine terms.
  int layer_norm(int a, double eps = 1e-5) {
    const Matrix& x = nodes_[a].val;
    Node n;
    n.op = Op::kLayerNorm;
    n.a = a;
    n.x0 = eps;
    n.val = Matrix(x.rows, x.cols);
    n.stash = Matrix(x.rows, 2);  // per-row mean, inverse stddev
    for (int i = 0; i < x.rows; ++i) {
      double mu = 0.0;
      for (int j = 0; j < x.cols; ++j) mu += x(i, j);
      mu /= x.cols;
      double var = 0.0;
      for (int j = 0; j < x.cols; ++j) {
        double d = x(i, j) - mu;
        var += d * d;
      }
      var /= x.cols;
      double inv = 1.0 / std::sqrt(var + eps);
      n.stash(i, 0) = mu;
      n.stash(i, 1) = inv;
      for (int j = 0; j < x.cols; ++j) n.val(i, j) = (x(i, j) - mu) * inv;
    }
    return push(std::move(n));
  }

  int softmax_rows(int a) {
    const Matrix& x = nodes_[a].val;
    Node n;
    n.op = Op::kSoftmaxRows;
    n.a = a;
    n.val = Matrix(x.rows, x.cols);
    for (int i = 0; i < x.rows; ++i) softmax_row(x.row_ptr(i), n.val.row_ptr(i), x.cols);
    return push(std::move(n));
  }

  // q, k, v: (n_seqs * seq_len) x d_model, multi-head causal attention per
  // sequence. Saves attention probabilities for backward.
  int causal_attention(int q, int k, int v, int n_heads, int n_seqs) {
    const Matrix& vq = nodes_[q].val;
    const int total = vq.rows;
    const int d_model = vq.cols;
    if (total % n_seqs != 0) throw std::invalid_argument("attention: rows not divisible by sequences");
    if (d_model % n_heads != 0) throw std::invalid_argument("attention: d_model not divisible by heads");
    const int t = total / n_seqs;
    const int dh = d_model / n_heads;
    Node n;
    n.op = Op::kCausalAttention;
    n.a = q;
    n.b = k;
    n.c = v;
    n.ints = {n_heads, n_seqs};
    n.val = Matrix(total, d_model);
    n.stash = Matrix(n_seqs * n_heads * t, t);  // probs per (seq, head)
    const Matrix& vk = nodes_[k].val;
    const Matrix& vv = nodes_[v].val;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<double> scores(t);
    for (int s = 0; s < n_seqs; ++s) {
      for (int h = 0; h < n_heads; ++h) {
        for (int i = 0; i < t; ++i) {
          const double* qi = vq.row_ptr(s * t + i) + h * dh;
          for (int j = 0; j <= i; ++j) {
            const double* kj = vk.row_ptr(s * t + j) + h * dh;
            double acc = 0.0;
            for (int d = 0; d < dh; ++d) acc += qi[d] * kj[d];
            scores[j] = acc * inv_sqrt;
          }
          double* prow = n.stash.row_ptr((s * n_heads + h) * t + i);
          softmax_row(scores.data(), prow, i + 1);
          for (int j = i + 1; j < t; ++j) prow[j] = 0.0;
          double* out = n.val.row_ptr(s * t + i) + h * dh;
          for (int d = 0; d < dh; ++d) out[d] = 0.0;
          for (int j = 0; j <= i; ++j) {
            const double p = prow[j];
            const double* vj = vv.row_ptr(s * t + j) + h * dh;
            for (int d = 0; d < dh; ++d) out[d] += p * vj[d];
          }
        }
      }
    }
    return push(std::move(n));
  }

  // table: (vocab x d), ids: one row per lookup.
  int embedding(int table, std::vector<int> ids) {
    const Matrix& w = nodes_[table].val;
    Node n;
    n.op = Op::kEmbedding;
    n.a = table;
    n.val = Matrix(static_cast<int>(ids.size()), w.cols);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (ids[i] < 0 || ids[i] >= w.rows) throw std::out_of_range("embedding: id out of range");
      for (int j = 0; j < w.cols; ++j) n.val(static_cast<int>(i), j) = w(ids[i], j);
    }
    n.ints.assign(ids.begin(), ids.end());
    return push(std::move(n));
  }

  // Mean cross-entropy over rows with weight > 0; targets/weights per row.
  // Stashes row softmax for backward. Produces a 1x1 value.
  int cross_entropy_mean(int logits, std::vector<int> targets, std::vector<double> weights) {
    const Matrix& x = nodes_[logits].val;
    if (static_cast<int>(targets.size()) != x.rows || weights.size() != targets.size())
      throw std::invalid_argument("cross_entropy: target/weight size mismatch");
    Node n;
    n.op = Op::kCrossEntropyMean;
    n.a = logits;
    n.stash = Matrix(x.rows, x.cols);
    n.ints.assign(targets.begin(), targets.end());
    double wsum = 0.0;
    double loss = 0.0;
    for (int i = 0; i < x.rows; ++i) {
      softmax_row(x.row_ptr(i), n.stash.row_ptr(i), x.cols);
      if (weights[i] <= 0.0) continue;
      if (targets[i] < 0 || targets[i] >= x.cols) throw std::out_of_range("cross_entropy: target out of range");
      loss -= weights[i] * std::log(std::max(n.stash(i, targets[i]), 1e-300));
      wsum += weights[i];
    }
    n.x0 = wsum;
    n.val = Matrix(1, 1);
    n.val(0, 0) = wsum > 0.0 ? loss / wsum : 0.0;
    weights_.push_back(std::move(weights));
    n.b = static_cast<int>(weights_.size()) - 1;
    return push(std::move(n));
  }

  // Runs one backward pass from `out` seeded with `seed` (same shape as the
  // output). Grad buffers are reset at entry, so repeated calls with
  // different seeds give independent vector-Jacobian products. Nodes below
  // `stop_before` are not expanded, which keeps tail-only Jacobians cheap.
  void backward(int out, const Matrix& seed, int stop_before = 0) {
    for (Node& n : nodes_) {
      if (!n.grad.empty()) n.grad.map().setZero();
    }
    ensure_grad(out);
    if (seed.rows != nodes_[out].val.rows || seed.cols != nodes_[out].val.cols)
      throw std::invalid_argument("backward: seed shape mismatch");
    nodes_[out].grad = seed;
    for (int id = out; id >= stop_before; --id) {
      Node& n = nodes_[id];
      if (n.grad.empty()) continue;
      backprop_node(id);
    }
  }

  void backward_scalar(int out, int stop_before = 0) {
    Matrix seed(1, 1);
    seed(0, 0) = 1.0;
    backward(out, seed, stop_before);
  }

  // Gradients for parameter leaves, accumulated by slot.
  std::vector<Matrix> param_grads(int n_slots) const {
    std::vector<Matrix> out(n_slots);
    for (const Node& n : nodes_) {
      if (n.param_slot < 0) continue;
      if (out[n.param_slot].empty()) out[n.param_slot] = Matrix(n.val.rows, n.val.cols);
      if (!n.grad.empty()) out[n.param_slot].map() += n.grad.map();
    }
    return out;
  }

 private:
  int push(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  void ensure_grad(int id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad = Matrix(n.val.rows, n.val.cols);
  }

  static double gelu_fwd(double x) {
    const double k = 0.7978845608028654;  // sqrt(2/pi)
    double u = k * (x + 0.044715 * x * x * x);
    return 0.5 * x * (1.0 + std::tanh(u));
  }

  static double gelu_bwd(double x) {
    const double k = 0.7978845608028654;
    double u = k * (x + 0.044715 * x * x * x);
    double th = std::tanh(u);
    double sech2 = 1.0 - th * th;
    return 0.5 * (1.0 + th) + 0.5 * x * sech2 * k * (1.0 + 3.0 * 0.044715 * x * x);
  }

  static void softmax_row(const double* x, double* y, int n) {
    double mx = x[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, x[j]);
    double z = 0.0;
    for (int j = 0; j < n; ++j) {
      y[j] = std::exp(x[j] - mx);
      z += y[j];
    }
    for (int j = 0; j < n; ++j) y[j] /= z;
  }

  void backprop_node(int id) {
    Node& n = nodes_[id];
    const Matrix& g = n.grad;
    switch (n.op) {
      case Op::kLeaf:
        break;
      case Op::kMatmul: {
        const bool ta = n.ints[0] != 0;
        const bool tb = n.ints[1] != 0;
        const double alpha = n.x0;
        Node& na = nodes_[n.a];
        Node& nb = nodes_[n.b];
        ensure_grad(n.a);
        ensure_grad(n.b);
        auto G = g.map();
        if (!ta && !tb) {
          na.grad.map().noalias() += alpha * (G * nb.val.map().transpose());
          nb.grad.map().noalias() += alpha * (na.val.map().transpose() * G);
        } else if (ta && !tb) {
          na.grad.map().noalias() += alpha * (nb.val.map() * G.transpose());
          nb.grad.map().noalias() += alpha * (na.val.map() * G);
        } else if (!ta && tb) {
          na.grad.map().noalias() += alpha * (G * nb.val.map());
          nb.grad.map().noalias() += alpha * (G.transpose() * na.val.map());
        } else {
          na.grad.map().noalias() += alpha * (nb.val.map().transpose() * G.transpose());
          nb.grad.map().noalias() += alpha * (G.transpose() * na.val.map().transpose());
        }
        break;
      }
      case Op::kAdd:
        ensure_grad(n.a);
        ensure_grad(n.b);
        nodes_[n.a].grad.map() += g.map();
        nodes_[n.b].grad.map() += g.map();
        break;
      case Op::kAddBias:
        ensure_grad(n.a);
        ensure_grad(n.b);
        nodes_[n.a].grad.map() += g.map();
        nodes_[n.b].grad.map().row(0) += g.map().colwise().sum();
        break;
      case Op::kScale:
        ensure_grad(n.a);
        nodes_[n.a].grad.map() += n.x0 * g.map();
        break;
      case Op::kGelu: {
        ensure_grad(n.a);
        Node& na = nodes_[n.a];
        for (std::size_t i = 0; i < g.size(); ++i)
          na.grad.data[i] += g.data[i] * gelu_bwd(na.val.data[i]);
        break;
      }
      case Op::kLayerNorm: {
        ensure_grad(n.a);
        Node& na = nodes_[n.a];
        const int cols = n.val.cols;
        for (int i = 0; i < n.val.rows; ++i) {
          double inv = n.stash(i, 1);
          double gmean = 0.0;
          double gymean = 0.0;
          for (int j = 0; j < cols; ++j) {
            gmean += g(i, j);
            gymean += g(i, j) * n.val(i, j);
          }
          gmean /= cols;
          gymean /= cols;
          for (int j = 0; j < cols; ++j)
            na.grad(i, j) += inv * (g(i, j) - gmean - n.val(i, j) * gymean);
        }
        break;
      }
      case Op::kSoftmaxRows: {
        ensure_grad(n.a);
        Node& na = nodes_[n.a];
        for (int i = 0; i < n.val.rows; ++i) {
          double dotgy = 0.0;
          for (int j = 0; j < n.val.cols; ++j) dotgy += g(i, j) * n.val(i, j);
          for (int j = 0; j < n.val.cols; ++j)
            na.grad(i, j) += n.val(i, j) * (g(i, j) - dotgy);
        }
        break;
      }
      case Op::kCausalAttention:
        backprop_attention(id);
        break;
      case Op::kEmbedding: {
        ensure_grad(n.a);
        Node& na = nodes_[n.a];
        for (std::size_t i = 0; i < n.ints.size(); ++i)
          for (int j = 0; j < n.val.cols; ++j)
            na.grad(n.ints[i], j) += g(static_cast<int>(i), j);
        break;
      }
      case Op::kCrossEntropyMean: {
        ensure_grad(n.a);
        Node& na = nodes_[n.a];
        const std::vector<double>& w = weights_[n.b];
        const double gscale = g(0, 0) / std::max(n.x0, 1e-300);
        for (int i = 0; i < na.val.rows; ++i) {
          if (w[i] <= 0.0) continue;
          const double wi = w[i] * gscale;
          for (int j = 0; j < na.val.cols; ++j) na.grad(i, j) += wi * n.stash(i, j);
          na.grad(i, n.ints[i]) -= wi;
        }
        break;
      }
    }
  }

  void backprop_attention(int id) {
    Node& n = nodes_[id];
    const int n_heads = n.ints[0];
    const int n_seqs = n.ints[1];
    const int total = n.val.rows;
    const int d_model = n.val.cols;
    const int t = total / n_seqs;
    const int dh = d_model / n_heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    ensure_grad(n.a);
    ensure_grad(n.b);
    ensure_grad(n.c);
    Node& nq = nodes_[n.a];
    Node& nk = nodes_[n.b];
    Node& nv = nodes_[n.c];
    std::vector<double> dp(t), ds(t);
    for (int s = 0; s < n_seqs; ++s) {
      for (int h = 0; h < n_heads; ++h) {
        for (int i = 0; i < t; ++i) {
          const double* go = n.grad.row_ptr(s * t + i) + h * dh;
          const double* prow = n.stash.row_ptr((s * n_heads + h) * t + i);
          // dV and dP
          double dotpp = 0.0;
          for (int j = 0; j <= i; ++j) {
            const double* vj = nv.val.row_ptr(s * t + j) + h * dh;
            double acc = 0.0;
            for (int d = 0; d < dh; ++d) acc += go[d] * vj[d];
            dp[j] = acc;
            double* dvj = nv.grad.row_ptr(s * t + j) + h * dh;
            for (int d = 0; d < dh; ++d) dvj[d] += prow[j] * go[d];
            dotpp += dp[j] * prow[j];
          }
          // softmax backward, then scores -> q, k
          const double* qi = nq.val.row_ptr(s * t + i) + h * dh;
          double* dqi = nq.grad.row_ptr(s * t + i) + h * dh;
          for (int j = 0; j <= i; ++j) {
            ds[j] = prow[j] * (dp[j] - dotpp) * inv_sqrt;
            const double* kj = nk.val.row_ptr(s * t + j) + h * dh;
            double* dkj = nk.grad.row_ptr(s * t + j) + h * dh;
            for (int d = 0; d < dh; ++d) {
              dqi[d] += ds[j] * kj[d];
              dkj[d] += ds[j] * qi[d];
            }
          }
        }
      }
    }
  }

  std::vector<Node> nodes_;
  std::vector<std::vector<double>> weights_;
};

}  // namespace acelab
