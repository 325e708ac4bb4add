#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "acelab/checkpoint.hpp"
#include "acelab/matrix.hpp"
#include "acelab/optim.hpp"
#include "acelab/rng.hpp"
#include "acelab/tape.hpp"
#include "acelab/transformer.hpp"

namespace acelab {

// Per-position supervision shared by every sequence of a task: target token
// per position comes from the sequence data, loss/accuracy weights are
// position templates (e.g. next-token tasks weight the final position zero).
struct SeqDataset {
  std::vector<std::vector<int>> tokens;
  std::vector<std::vector<int>> targets;
  std::vector<double> loss_weights;  // per position
  std::vector<double> acc_weights;   // per position

  int seq_len() const { return tokens.empty() ? 0 : static_cast<int>(tokens[0].size()); }
  int size() const { return static_cast<int>(tokens.size()); }
};

struct EvalMetrics {
  double loss = 0.0;
  double accuracy = 0.0;
};

namespace detail {

inline void flatten_supervision(const SeqDataset& d, const std::vector<int>& idx,
                                std::vector<std::vector<int>>& tok_rows,
                                std::vector<int>& targets, std::vector<double>& weights) {
  const int t = d.seq_len();
  tok_rows.clear();
  targets.clear();
  weights.clear();
  for (int i : idx) {
    tok_rows.push_back(d.tokens[i]);
    targets.insert(targets.end(), d.targets[i].begin(), d.targets[i].end());
    weights.insert(weights.end(), d.loss_weights.begin(), d.loss_weights.begin() + t);
  }
}

}  // namespace detail

// Weighted-mean loss and argmax accuracy over a dataset, in chunks. Hooks are
// forwarded so ablation evaluations reuse the exact inference path.
inline EvalMetrics evaluate(const TransformerParams& params, const SeqDataset& data,
                            const std::vector<HookPoint>& hooks = {}, int chunk = 256) {
  EvalMetrics out;
  double loss_w = 0.0, acc_w = 0.0, loss_sum = 0.0, acc_sum = 0.0;
  const int t = data.seq_len();
  for (int start = 0; start < data.size(); start += chunk) {
    const int n = std::min(chunk, data.size() - start);
    std::vector<std::vector<int>> rows(data.tokens.begin() + start,
                                       data.tokens.begin() + start + n);
    ForwardResult fr = forward(params, TokenBatch::from_rows(rows), hooks);
    const Matrix& logits = fr.tape.value(fr.logits);
    for (int s = 0; s < n; ++s) {
      for (int p = 0; p < t; ++p) {
        const int row = s * t + p;
        const int target = data.targets[start + s][p];
        if (data.loss_weights[p] > 0.0) {
          // log-softmax at the target
          const double* l = logits.row_ptr(row);
          double mx = l[0];
          for (int j = 1; j < logits.cols; ++j) mx = std::max(mx, l[j]);
          double z = 0.0;
          for (int j = 0; j < logits.cols; ++j) z += std::exp(l[j] - mx);
          loss_sum += data.loss_weights[p] * (std::log(z) - (l[target] - mx));
          loss_w += data.loss_weights[p];
        }
        if (data.acc_weights[p] > 0.0) {
          const double* l = logits.row_ptr(row);
          int best = 0;
          for (int j = 1; j < logits.cols; ++j)
            if (l[j] > l[best]) best = j;
          acc_sum += data.acc_weights[p] * (best == target ? 1.0 : 0.0);
          acc_w += data.acc_weights[p];
        }
      }
    }
  }
  out.loss = loss_w > 0.0 ? loss_sum / loss_w : 0.0;
  out.accuracy = acc_w > 0.0 ? acc_sum / acc_w : 0.0;
  return out;
}

// Per-sequence accuracy over the accuracy-weighted positions (example-level
// scores for ablation reports).
inline std::vector<double> per_sequence_accuracy(const TransformerParams& params,
                                                 const SeqDataset& data,
                                                 const std::vector<HookPoint>& hooks = {},
                                                 int chunk = 256) {
  std::vector<double> scores;
  scores.reserve(data.size());
  const int t = data.seq_len();
  for (int start = 0; start < data.size(); start += chunk) {
    const int n = std::min(chunk, data.size() - start);
    std::vector<std::vector<int>> rows(data.tokens.begin() + start,
                                       data.tokens.begin() + start + n);
    ForwardResult fr = forward(params, TokenBatch::from_rows(rows), hooks);
    const Matrix& logits = fr.tape.value(fr.logits);
    for (int s = 0; s < n; ++s) {
      double acc = 0.0, w = 0.0;
      for (int p = 0; p < t; ++p) {
        if (data.acc_weights[p] <= 0.0) continue;
        const double* l = logits.row_ptr(s * t + p);
        int best = 0;
        for (int j = 1; j < logits.cols; ++j)
          if (l[j] > l[best]) best = j;
        acc += data.acc_weights[p] * (best == data.targets[start + s][p] ? 1.0 : 0.0);
        w += data.acc_weights[p];
      }
      scores.push_back(w > 0.0 ? acc / w : 0.0);
    }
  }
  return scores;
}

struct MetricRow {
  long step = 0;   // optimizer steps completed
  long epoch = 0;  // epochs completed
  double train_loss = 0.0;
  double train_acc = 0.0;
  double test_loss = 0.0;
  double test_acc = 0.0;
};

enum class EvalCadence { kPerEpoch, kPerStep };

struct TrainOptions {
  long epochs = 1;
  int batch_size = 64;
  double lr = 1e-3;
  double weight_decay = 0.0;
  long checkpoint_every = 0;  // epochs; 0 disables
  EvalCadence cadence = EvalCadence::kPerEpoch;
  long max_steps = 0;  // 0 = unlimited
  // Optional early stop, checked against each metric row.
  std::function<bool(const MetricRow&)> stop_when;
};

struct TrainResult {
  std::vector<MetricRow> trace;
  bool diverged = false;
  long steps = 0;
  long epochs_done = 0;
  bool hit_step_cap = false;
};

using CheckpointSink = std::function<void(const Checkpoint&)>;

// Trains in place starting from (params, opt, rng, start_epoch) so branched
// continuations share state with the run they fork from. Deterministic given
// identical inputs: batch order comes from the threaded rng only.
inline TrainResult train(TransformerParams& params, AdamWState& opt, Rng& rng,
                         const SeqDataset& train_data, const SeqDataset& test_data,
                         const TrainOptions& options, long start_epoch = 0,
                         const CheckpointSink& on_checkpoint = {}) {
  TrainResult result;
  result.steps = opt.step;
  const int n = train_data.size();
  const int t = train_data.seq_len();
  if (n == 0) throw std::invalid_argument("train: empty training set");

  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;

  auto snapshot = [&](long epoch) {
    if (!on_checkpoint) return;
    Checkpoint ck;
    ck.params = params;
    ck.opt = opt;
    ck.epoch = epoch;
    ck.rng_seed = rng.seed();
    ck.rng_counter = rng.counter();
    on_checkpoint(ck);
  };

  if (start_epoch == 0 && options.checkpoint_every > 0) snapshot(0);

  std::vector<std::vector<int>> tok_rows;
  std::vector<int> targets;
  std::vector<double> weights;

  for (long epoch = start_epoch; epoch < options.epochs; ++epoch) {
    rng.shuffle(order);
    double ep_loss = 0.0, ep_loss_w = 0.0, ep_acc = 0.0, ep_acc_w = 0.0;
    for (int start = 0; start < n; start += options.batch_size) {
      if (options.max_steps > 0 && opt.step >= options.max_steps) {
        result.hit_step_cap = true;
        break;
      }
      const int bsz = std::min(options.batch_size, n - start);
      std::vector<int> idx(order.begin() + start, order.begin() + start + bsz);
      detail::flatten_supervision(train_data, idx, tok_rows, targets, weights);
      ForwardResult fr = forward(params, TokenBatch::from_rows(tok_rows));
      int loss_node = fr.tape.cross_entropy_mean(fr.logits, targets, weights);
      const double loss = fr.tape.value(loss_node)(0, 0);
      if (!std::isfinite(loss)) {
        result.diverged = true;
        result.epochs_done = epoch;
        return result;
      }
      // Batch-level train metrics (pre-update), aggregated per epoch.
      {
        const Matrix& logits = fr.tape.value(fr.logits);
        for (int s = 0; s < bsz; ++s)
          for (int p = 0; p < t; ++p) {
            if (train_data.acc_weights[p] <= 0.0) continue;
            const double* l = logits.row_ptr(s * t + p);
            int best = 0;
            for (int j = 1; j < logits.cols; ++j)
              if (l[j] > l[best]) best = j;
            ep_acc += train_data.acc_weights[p] *
                      (best == train_data.targets[idx[s]][p] ? 1.0 : 0.0);
            ep_acc_w += train_data.acc_weights[p];
          }
        double batch_w = 0.0;
        for (double w : weights) batch_w += w;
        ep_loss += loss * batch_w;
        ep_loss_w += batch_w;
      }
      fr.tape.backward_scalar(loss_node);
      std::vector<Matrix> grads = fr.tape.param_grads(params.n_tensors());
      if (!adamw_step(params.tensors, grads, opt)) {
        result.diverged = true;
        result.epochs_done = epoch;
        return result;
      }
      if (options.cadence == EvalCadence::kPerStep) {
        MetricRow row;
        row.step = opt.step;
        row.epoch = epoch;
        EvalMetrics tr = evaluate(params, train_data);
        EvalMetrics te = evaluate(params, test_data);
        row.train_loss = tr.loss;
        row.train_acc = tr.accuracy;
        row.test_loss = te.loss;
        row.test_acc = te.accuracy;
        result.trace.push_back(row);
        if (options.stop_when && options.stop_when(row)) {
          result.steps = opt.step;
          result.epochs_done = epoch + 1;
          return result;
        }
      }
    }
    result.epochs_done = epoch + 1;
    if (options.cadence == EvalCadence::kPerEpoch) {
      MetricRow row;
      row.step = opt.step;
      row.epoch = epoch + 1;
      row.train_loss = ep_loss_w > 0.0 ? ep_loss / ep_loss_w : 0.0;
      row.train_acc = ep_acc_w > 0.0 ? ep_acc / ep_acc_w : 0.0;
      EvalMetrics te = evaluate(params, test_data);
      row.test_loss = te.loss;
      row.test_acc = te.accuracy;
      result.trace.push_back(row);
      if (options.stop_when && options.stop_when(row)) {
        if (options.checkpoint_every > 0 && (epoch + 1) % options.checkpoint_every == 0)
          snapshot(epoch + 1);
        result.steps = opt.step;
        return result;
      }
    }
    if (options.checkpoint_every > 0 && (epoch + 1) % options.checkpoint_every == 0)
      snapshot(epoch + 1);
    if (result.hit_step_cap) break;
  }
  result.steps = opt.step;
  return result;
}

inline void write_trace_csv(const std::vector<MetricRow>& trace, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("trace: cannot open for write: " + path);
  f << "epoch,train_loss,train_acc,test_loss,test_acc\n";
  char buf[160];
  for (const MetricRow& r : trace) {
    std::snprintf(buf, sizeof(buf), "%ld,%.17g,%.17g,%.17g,%.17g\n", r.epoch, r.train_loss,
                  r.train_acc, r.test_loss, r.test_acc);
    f << buf;
  }
}

}  // namespace acelab
