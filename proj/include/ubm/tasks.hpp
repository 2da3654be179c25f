// Copyright 2026 The UBM Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef UBM_TASKS_HPP
#define UBM_TASKS_HPP

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ubm/common.hpp"
#include "ubm/contrastive.hpp"
#include "ubm/encoders.hpp"
#include "ubm/nn/graph.hpp"
#include "ubm/nn/optim.hpp"
#include "ubm/synthetic.hpp"
#include "ubm/vocab.hpp"

namespace ubm {

/// Task-specific layers on top of h'. PIP: two GELU feed-forward layers
/// (d -> d), a linear layer (d -> 1) and a sigmoid. RLP: one GELU
/// feed-forward layer and a linear layer to a scalar. NIP has no layers; it
/// scores h' against the candidate pool.
template <typename T>
struct TaskHead {
  Task task = Task::pip;
  std::vector<Parameter<T>> weights;  // w0, b0, w1, b1, ...

  static TaskHead init(Task task, std::size_t d, std::uint64_t seed) {
    TaskHead h;
    h.task = task;
    Rng rng(seed, Purpose::init, 1000 + static_cast<std::uint64_t>(task));
    std::vector<std::size_t> outs;
    if (task == Task::pip) outs = {d, d, 1};
    if (task == Task::rlp) outs = {d, 1};
    for (std::size_t i = 0; i < outs.size(); ++i) {
      const std::string prefix = "head." + task_name(task) + "." + std::to_string(i) + ".";
      h.weights.emplace_back(prefix + "w", detail::truncated_normal<T>(d, outs[i], 0.02, rng));
      h.weights.emplace_back(prefix + "b", Tensor<T>(1, outs[i]));
    }
    return h;
  }

  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> out;
    for (auto& w : weights) out.push_back(&w);
    return out;
  }

  /// PIP: probabilities [n x 1]; RLP: predictions [n x 1]; NIP: h unchanged.
  Var forward(Graph<T>& g, Var h) {
    const std::size_t layers = weights.size() / 2;
    for (std::size_t i = 0; i < layers; ++i) {
      h = detail::linear(g, h, weights[2 * i], weights[2 * i + 1]);
      if (i + 1 < layers) h = g.gelu(h);
    }
    return task == Task::pip ? g.sigmoid(h) : h;
  }

  template <typename U>
  TaskHead<U> cast() const {
    TaskHead<U> out;
    out.task = task;
    for (const auto& w : weights) {
      std::vector<U> data(w.value.values().begin(), w.value.values().end());
      out.weights.emplace_back(w.name, Tensor<U>(w.value.shape(), std::move(data)));
    }
    return out;
  }
};

/// Mean binary cross-entropy; labels must be 0 or 1.
template <typename T>
Var pip_loss(Graph<T>& g, Var probs, std::span<const T> labels) {
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] != T{0} && labels[i] != T{1})
      throw ValidationError("label", "PIP label " + std::to_string(static_cast<double>(labels[i])) + " at row " +
                                         std::to_string(i) + " is not 0 or 1");
  return g.binary_cross_entropy(probs, labels);
}

template <typename T>
Var rlp_loss(Graph<T>& g, Var pred, std::span<const T> labels) {
  return g.mse(pred, labels);
}

/// Scores z = h V^T against a fixed pool matrix, and the mean cross-entropy
/// of the labelled rows.
template <typename T>
Var nip_scores(Graph<T>& g, Var h, const Tensor<T>& pool) {
  return g.matmul_nt(h, g.constant(pool));
}

template <typename T>
Var nip_loss(Graph<T>& g, Var scores, std::span<const std::size_t> targets) {
  return g.softmax_cross_entropy(scores, targets);
}

/// A task dataset tokenized for the model.
struct TaskData {
  Task task = Task::pip;
  std::vector<EncodedSession> inputs;
  std::vector<double> labels;       // PIP / RLP
  std::vector<std::size_t> targets;  // NIP pool rows
  std::size_t size() const { return inputs.size(); }
};

inline TaskData encode_task_dataset(const TaskDataset& ds, const Vocabulary& v, const TokenLimits& limits,
                                    const NipPool* pool = nullptr) {
  if (ds.task == Task::nip && !pool) throw ValidationError("pool", "NIP data needs the candidate pool");
  TaskData d;
  d.task = ds.task;
  for (const auto& e : ds.examples) {
    d.inputs.push_back(encode_session(e.input, v, limits));
    if (ds.task == Task::nip) d.targets.push_back(pool->at(*e.item));
    else d.labels.push_back(e.label);
  }
  return d;
}

inline std::vector<EncodedInteraction> encode_pool(const NipPool& pool, const Vocabulary& v, const TokenLimits& limits) {
  std::vector<EncodedInteraction> out;
  for (const auto& item : pool.items) out.push_back(tokenize_item(item, v, limits));
  return out;
}

/// Loss of a batch of examples; `pool` is required for NIP.
template <typename T>
Var task_batch_loss(Graph<T>& g, UbmParams<T>& p, TaskHead<T>& head, const TaskData& d,
                    std::span<const std::size_t> ids, const Tensor<T>* pool, const ForwardContext& ctx) {
  std::vector<EncodedSession> batch;
  for (auto i : ids) batch.push_back(d.inputs[i]);
  Var h = ubm_forward(g, p, std::span<const EncodedSession>(batch), ctx).sessions;
  if (d.task == Task::nip) {
    if (!pool) throw ValidationError("pool", "NIP loss needs pool embeddings");
    std::vector<std::size_t> t;
    for (auto i : ids) t.push_back(d.targets[i]);
    return nip_loss(g, nip_scores(g, h, *pool), std::span<const std::size_t>(t));
  }
  std::vector<T> y;
  for (auto i : ids) y.push_back(static_cast<T>(d.labels[i]));
  Var out = head.forward(g, h);
  return d.task == Task::pip ? pip_loss(g, out, std::span<const T>(y)) : rlp_loss(g, out, std::span<const T>(y));
}

struct FinetuneConfig {
  Task task = Task::pip;
  std::size_t batch_size = 32;
  double lr = 3e-5;
  std::size_t epochs = 30;
  std::uint64_t seed = 42;
  /// Optimizer steps between recomputations of the NIP pool embeddings.
  std::size_t pool_refresh_steps = 1;
  double threshold = 0.5;
  nn::AdamConfig adam;

  void validate() const {
    if (batch_size == 0) throw ValidationError("finetune.batch_size", "must be positive");
    if (!(lr > 0)) throw ValidationError("finetune.lr", "must be positive");
    if (epochs == 0) throw ValidationError("finetune.epochs", "must be positive");
    if (pool_refresh_steps == 0) throw ValidationError("finetune.pool_refresh_steps", "must be positive");
    if (!(threshold > 0 && threshold < 1)) throw ValidationError("finetune.threshold", "must lie in (0, 1)");
  }
};

struct EpochReport {
  std::size_t epoch = 0;
  double train_loss = 0;
  double valid_loss = 0;
};

/// Index of the smallest loss; the earliest wins ties.
inline std::size_t select_best_epoch(std::span<const double> valid_losses) {
  if (valid_losses.empty()) throw ValidationError("valid_losses", "no epochs to select from");
  std::size_t best = 0;
  for (std::size_t i = 1; i < valid_losses.size(); ++i)
    if (valid_losses[i] < valid_losses[best]) best = i;
  return best;
}

/// Mean eval-mode loss over a dataset.
template <typename T>
double dataset_loss(UbmParams<T>& p, TaskHead<T>& head, const TaskData& d, const Tensor<T>* pool,
                    std::size_t chunk = 64) {
  if (d.size() == 0) throw ValidationError("dataset", "empty dataset");
  double total = 0;
  for (std::size_t at = 0; at < d.size(); at += chunk) {
    const std::size_t n = std::min(chunk, d.size() - at);
    const auto ids = index_range(at, at + n);
    Graph<T> g;
    total += static_cast<double>(g.value(task_batch_loss(g, p, head, d, ids, pool, ForwardContext{}))[0]) *
             static_cast<double>(n);
  }
  return total / static_cast<double>(d.size());
}

struct FinetuneResult {
  std::size_t best_epoch = 0;
  std::vector<EpochReport> epochs;
  UbmParams<float> params;
  TaskHead<float> head;
};

/// Trains the encoders and the head end to end with a constant learning rate
/// and returns the weights of the epoch with the lowest validation loss.
inline FinetuneResult finetune(UbmParams<float> params, TaskHead<float> head, const TaskData& train,
                               const TaskData& valid, const std::vector<EncodedInteraction>* pool_items,
                               const FinetuneConfig& cfg,
                               const std::function<void(const EpochReport&)>& on_epoch = {}) {
  cfg.validate();
  if (train.task != cfg.task || valid.task != cfg.task || head.task != cfg.task)
    throw ValidationError("task", "datasets, head and config disagree on the task");
  if (train.size() == 0 || valid.size() == 0) throw ValidationError("dataset", "train and valid must be non-empty");
  if (cfg.task == Task::nip && (!pool_items || pool_items->empty()))
    throw ValidationError("pool", "NIP fine-tuning needs a non-empty candidate pool");
  auto refresh_pool = [&] {
    return cfg.task == Task::nip ? item_embeddings(params, std::span<const EncodedInteraction>(*pool_items))
                                 : Tensor<float>();
  };
  std::vector<Parameter<float>*> trainable = params.parameters();
  for (auto* w : head.parameters()) trainable.push_back(w);
  nn::AdamState<float> adam;
  adam.config = cfg.adam;
  FinetuneResult result{0, {}, params, head};
  std::vector<double> valid_losses;
  std::size_t step = 0;
  Tensor<float> pool;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = shuffled_indices(train.size(), cfg.seed, 10 + static_cast<std::uint64_t>(cfg.task), epoch);
    double sum = 0;
    std::size_t batches = 0;
    for (std::size_t at = 0; at < order.size(); at += cfg.batch_size, ++step) {
      if (cfg.task == Task::nip && step % cfg.pool_refresh_steps == 0) pool = refresh_pool();
      const auto ids = std::span<const std::size_t>(order).subspan(at, std::min(cfg.batch_size, order.size() - at));
      for (auto* w : trainable) w->zero_grad();
      Rng drop(cfg.seed, Purpose::dropout, step, 10 + static_cast<std::uint64_t>(cfg.task));
      Graph<float> g;
      Var loss = task_batch_loss(g, params, head, train, ids, &pool, ForwardContext{true, &drop});
      g.backward(loss);
      sum += g.value(loss)[0];
      ++batches;
      nn::adam_step<float>(trainable, adam, cfg.lr);
    }
    if (cfg.task == Task::nip) pool = refresh_pool();
    EpochReport rep{epoch, sum / static_cast<double>(batches), dataset_loss(params, head, valid, &pool)};
    result.epochs.push_back(rep);
    valid_losses.push_back(rep.valid_loss);
    if (select_best_epoch(valid_losses) == epoch) {
      result.best_epoch = epoch;
      result.params = params;
      result.head = head;
    }
    if (on_epoch) on_epoch(rep);
  }
  for (auto* w : result.params.parameters()) w->zero_grad();
  for (auto* w : result.head.parameters()) w->zero_grad();
  return result;
}

/// Starts the RLP output at the mean training label.
inline void set_rlp_output_bias(TaskHead<float>& head, const TaskData& train) {
  if (head.task != Task::rlp || train.labels.empty()) return;
  double mean = 0;
  for (double y : train.labels) mean += y;
  head.weights.back().value[0] = static_cast<float>(mean / static_cast<double>(train.labels.size()));
}

// --- metrics -----------------------------------------------------------------

struct PipMetrics {
  double accuracy = 0;
  std::optional<double> auroc;  // undefined when only one class is present
  double f1 = 0;
  double kappa = 0;
  double precision = 0;
  double recall = 0;
};

struct Confusion {
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
};

inline Confusion confusion(std::span<const double> scores, std::span<const double> labels, double threshold) {
  if (scores.size() != labels.size()) throw DimensionError("confusion: scores and labels differ in length");
  Confusion c;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 0.0 && labels[i] != 1.0) throw ValidationError("label", "PIP labels must be 0 or 1");
    const bool pred = scores[i] >= threshold;
    const bool y = labels[i] == 1.0;
    (pred ? (y ? c.tp : c.fp) : (y ? c.fn : c.tn))++;
  }
  return c;
}

/// Rank-statistic AUROC with midranks for ties.
inline std::optional<double> auroc(std::span<const double> scores, std::span<const double> labels) {
  const std::size_t n = scores.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double pos_rank_sum = 0, n1 = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[idx[j]] == scores[idx[i]]) ++j;
    const double mid = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t k = i; k < j; ++k)
      if (labels[idx[k]] == 1.0) pos_rank_sum += mid, n1 += 1;
    i = j;
  }
  const double n0 = static_cast<double>(n) - n1;
  if (n1 == 0 || n0 == 0) return std::nullopt;
  return (pos_rank_sum - n1 * (n1 + 1) / 2.0) / (n1 * n0);
}

inline PipMetrics evaluate_pip(std::span<const double> scores, std::span<const double> labels,
                               double threshold = 0.5) {
  const Confusion c = confusion(scores, labels, threshold);
  const double n = static_cast<double>(scores.size());
  if (n == 0) throw ValidationError("scores", "cannot evaluate an empty prediction set");
  PipMetrics m;
  m.accuracy = static_cast<double>(c.tp + c.tn) / n;
  m.precision = c.tp + c.fp ? static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp) : 0.0;
  m.recall = c.tp + c.fn ? static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn) : 0.0;
  const std::size_t f1_den = 2 * c.tp + c.fp + c.fn;
  m.f1 = f1_den ? 2.0 * static_cast<double>(c.tp) / static_cast<double>(f1_den) : 0.0;
  // Kappa as one ratio of integers: (n(tp+tn) - A) / (n^2 - A), where A sums
  // the products of matching marginals.
  const auto tp = static_cast<std::int64_t>(c.tp), fp = static_cast<std::int64_t>(c.fp);
  const auto tn = static_cast<std::int64_t>(c.tn), fn = static_cast<std::int64_t>(c.fn);
  const std::int64_t total = tp + fp + tn + fn;
  const std::int64_t chance = (tp + fp) * (tp + fn) + (tn + fn) * (tn + fp);
  const std::int64_t den = total * total - chance;
  m.kappa = den ? static_cast<double>(total * (tp + tn) - chance) / static_cast<double>(den) : 0.0;
  m.auroc = auroc(scores, labels);
  return m;
}

struct RlpMetrics {
  double mae = 0;
  double mse = 0;
  double msle = 0;
  std::optional<double> r2;  // undefined when the labels have no variance
};

inline RlpMetrics evaluate_rlp(std::span<const double> pred, std::span<const double> labels) {
  if (pred.size() != labels.size()) throw DimensionError("evaluate_rlp: predictions and labels differ in length");
  if (pred.empty()) throw ValidationError("pred", "cannot evaluate an empty prediction set");
  const double n = static_cast<double>(pred.size());
  RlpMetrics m;
  double mean = 0;
  for (double y : labels) mean += y;
  mean /= n;
  double ss_res = 0, ss_tot = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double e = pred[i] - labels[i];
    m.mae += std::abs(e);
    ss_res += e * e;
    ss_tot += (labels[i] - mean) * (labels[i] - mean);
    const double le = std::log1p(std::max(pred[i], 0.0)) - std::log1p(labels[i]);
    m.msle += le * le;
  }
  m.mae /= n;
  m.mse = ss_res / n;
  m.msle /= n;
  if (ss_tot > 0) m.r2 = 1.0 - ss_res / ss_tot;
  return m;
}

/// 1-based rank of the label's score in a row of scores. Equal scores are
/// broken by pool index.
inline std::size_t label_rank(std::span<const double> scores, std::size_t label) {
  std::size_t rank = 1;
  for (std::size_t j = 0; j < scores.size(); ++j)
    if (scores[j] > scores[label] || (scores[j] == scores[label] && j < label)) ++rank;
  return rank;
}

struct NipMetrics {
  std::size_t k = 10;
  double hit = 0;
  double mrr = 0;
  std::size_t evaluated = 0;
  std::size_t excluded = 0;
};

/// hit@K and mrr@K from label ranks. A rank of 0 marks a label absent from
/// the pool; such examples are excluded and counted.
inline NipMetrics evaluate_nip(std::span<const std::size_t> ranks, std::size_t k) {
  if (k == 0) throw ValidationError("k", "must be positive");
  NipMetrics m;
  m.k = k;
  for (std::size_t r : ranks) {
    if (r == 0) {
      ++m.excluded;
      continue;
    }
    ++m.evaluated;
    if (r <= k) {
      m.hit += 1;
      m.mrr += 1.0 / static_cast<double>(r);
    }
  }
  if (m.evaluated) {
    m.hit /= static_cast<double>(m.evaluated);
    m.mrr /= static_cast<double>(m.evaluated);
  }
  return m;
}

/// Eval-mode model outputs for a dataset: PIP probabilities, RLP values, or
/// NIP label ranks.
struct TaskPredictions {
  std::vector<double> values;
  std::vector<std::size_t> ranks;
};

template <typename T>
TaskPredictions predict(UbmParams<T>& p, TaskHead<T>& head, const TaskData& d, const Tensor<T>* pool,
                        std::size_t chunk = 64) {
  TaskPredictions out;
  for (std::size_t at = 0; at < d.size(); at += chunk) {
    const std::size_t n = std::min(chunk, d.size() - at);
    Graph<T> g;
    Var h = ubm_forward(g, p, std::span<const EncodedSession>(d.inputs).subspan(at, n), ForwardContext{}).sessions;
    if (d.task == Task::nip) {
      if (!pool) throw ValidationError("pool", "NIP prediction needs pool embeddings");
      const auto& Z = g.value(nip_scores(g, h, *pool));
      for (std::size_t r = 0; r < n; ++r) {
        std::vector<double> row(Z.row(r).begin(), Z.row(r).end());
        out.ranks.push_back(label_rank(row, d.targets[at + r]));
      }
    } else {
      const auto& Y = g.value(head.forward(g, h));
      for (std::size_t r = 0; r < n; ++r) out.values.push_back(static_cast<double>(Y[r]));
    }
  }
  return out;
}

inline nlohmann::json optional_json(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

/// Metrics object for the task's predictions.
inline nlohmann::json task_metrics(const TaskData& d, const TaskPredictions& pred, double threshold = 0.5) {
  switch (d.task) {
    case Task::pip: {
      const auto m = evaluate_pip(pred.values, d.labels, threshold);
      return {{"accuracy", m.accuracy}, {"auroc", optional_json(m.auroc)}, {"f1", m.f1}, {"kappa", m.kappa}};
    }
    case Task::rlp: {
      const auto m = evaluate_rlp(pred.values, d.labels);
      return {{"mae", m.mae}, {"mse", m.mse}, {"msle", m.msle}, {"r2", optional_json(m.r2)}};
    }
    case Task::nip: {
      const auto m10 = evaluate_nip(pred.ranks, 10), m20 = evaluate_nip(pred.ranks, 20);
      return {{"hit@10", m10.hit}, {"mrr@10", m10.mrr}, {"hit@20", m20.hit}, {"mrr@20", m20.mrr},
              {"evaluated", m10.evaluated}, {"excluded", m10.excluded}};
    }
  }
  return {};
}

}  // namespace ubm

#endif  // UBM_TASKS_HPP
