#pragma once

#include <cstdint>
#include <stdexcept>
#include <utility>
#include <vector>

#include "acelab/rng.hpp"
#include "acelab/train.hpp"

namespace acelab {

// Modular addition task a + b = c (mod p) over all p^2 input pairs, split
// 50/50 into disjoint train/test index sets by a seeded shuffle.
struct ModAddTask {
  int p = 0;
  std::vector<std::pair<int, int>> pairs;  // all (a, b), lexicographic
  std::vector<int> train_idx;
  std::vector<int> test_idx;
  std::uint64_t seed = 0;
};

inline ModAddTask modadd_dataset(int p, std::uint64_t seed) {
  if (p < 2) throw std::invalid_argument("modadd: p must be at least 2");
  ModAddTask task;
  task.p = p;
  task.seed = seed;
  task.pairs.reserve(static_cast<std::size_t>(p) * p);
  for (int a = 0; a < p; ++a)
    for (int b = 0; b < p; ++b) task.pairs.emplace_back(a, b);
  std::vector<int> idx(task.pairs.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
  Rng rng(seed);
  rng.shuffle(idx);
  const int n_train = static_cast<int>(task.pairs.size()) / 2;
  task.train_idx.assign(idx.begin(), idx.begin() + n_train);
  task.test_idx.assign(idx.begin() + n_train, idx.end());
  std::sort(task.train_idx.begin(), task.train_idx.end());
  std::sort(task.test_idx.begin(), task.test_idx.end());
  return task;
}

// Sequences [a, b] with targets [b, c]: position 0 predicts b, position 1
// predicts c = (a+b) mod p. Loss covers both positions, accuracy only c.
inline SeqDataset modadd_split_dataset(const ModAddTask& task, const std::vector<int>& idx) {
  SeqDataset d;
  d.tokens.reserve(idx.size());
  d.targets.reserve(idx.size());
  for (int i : idx) {
    const auto [a, b] = task.pairs[i];
    d.tokens.push_back({a, b});
    d.targets.push_back({b, (a + b) % task.p});
  }
  d.loss_weights = {1.0, 1.0};
  d.acc_weights = {0.0, 1.0};
  return d;
}

inline SeqDataset modadd_train_dataset(const ModAddTask& t) {
  return modadd_split_dataset(t, t.train_idx);
}
inline SeqDataset modadd_test_dataset(const ModAddTask& t) {
  return modadd_split_dataset(t, t.test_idx);
}

// Answer class (c value) per sequence of a split, aligned with the dataset rows.
inline std::vector<int> modadd_answers(const ModAddTask& task, const std::vector<int>& idx) {
  std::vector<int> out;
  out.reserve(idx.size());
  for (int i : idx) out.push_back((task.pairs[i].first + task.pairs[i].second) % task.p);
  return out;
}

}  // namespace acelab
