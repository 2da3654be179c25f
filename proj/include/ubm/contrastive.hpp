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

#ifndef UBM_CONTRASTIVE_HPP
#define UBM_CONTRASTIVE_HPP

#include <chrono>
#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ubm/augment.hpp"
#include "ubm/common.hpp"
#include "ubm/encoders.hpp"
#include "ubm/nn/graph.hpp"
#include "ubm/nn/optim.hpp"
#include "ubm/rng.hpp"
#include "ubm/vocab.hpp"

namespace ubm {

/// How the InfoNCE denominator treats the positive pair.
/// standard: sum over all j (NT-Xent). exclude_positive: sum over j != i only.
enum class LossMode { standard, exclude_positive };

inline std::string loss_mode_name(LossMode m) { return m == LossMode::standard ? "standard" : "exclude_positive"; }

inline LossMode parse_loss_mode(const std::string& s) {
  if (s == "standard") return LossMode::standard;
  if (s == "exclude_positive") return LossMode::exclude_positive;
  throw ValidationError("loss_mode", "expected 'standard' or 'exclude_positive', got '" + s + "'");
}

/// Cosine similarity of every row of `a` with every row of `b`.
template <typename T>
Tensor<T> cosine_sim_matrix(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.cols() != b.cols()) throw DimensionError("cosine_sim_matrix: " + a.shape_str() + " vs " + b.shape_str());
  auto norms = [](const Tensor<T>& m, const char* which) {
    std::vector<double> n(m.rows());
    for (std::size_t r = 0; r < m.rows(); ++r) {
      double s = 0;
      for (T v : m.row(r)) s += static_cast<double>(v) * static_cast<double>(v);
      if (!(s > 0)) throw DimensionError(std::string("cosine_sim_matrix: row ") + std::to_string(r) + " of " + which + " has zero norm");
      n[r] = std::sqrt(s);
    }
    return n;
  };
  const auto na = norms(a, "A"), nb = norms(b, "B");
  Tensor<T> out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.rows(); ++j) {
      double s = 0;
      for (std::size_t c = 0; c < a.cols(); ++c) s += static_cast<double>(a(i, c)) * static_cast<double>(b(j, c));
      out(i, j) = T(s / (na[i] * nb[j]));
    }
  return out;
}

/// Summed InfoNCE over aligned (anchor_i, positive_i) rows with in-batch
/// negatives: sum_i [ log sum_j exp(sim(a_i, p_j)/tau) - sim(a_i, p_i)/tau ].
template <typename T>
Var info_nce(Graph<T>& g, Var anchors, Var positives, double tau, LossMode mode = LossMode::standard) {
  const auto& A = g.value(anchors);
  const auto& P = g.value(positives);
  if (!A.same_shape(P)) throw DimensionError("info_nce: anchors " + A.shape_str() + " vs positives " + P.shape_str());
  if (!(tau > 0)) throw ValidationError("temperature", "must be positive");
  const bool literal = mode == LossMode::exclude_positive;
  if (literal && A.rows() < 2) throw DimensionError("info_nce: exclude_positive mode needs at least two rows");
  Var s = g.scale(g.matmul_nt(g.l2_normalize_rows(anchors), g.l2_normalize_rows(positives)), T(1.0 / tau));
  return g.sum(g.sub(g.row_logsumexp(s, literal), g.diag(s)));
}

/// Value-only convenience over plain tensors.
template <typename T>
double info_nce(const Tensor<T>& anchors, const Tensor<T>& positives, double tau, LossMode mode = LossMode::standard) {
  Graph<T> g;
  return static_cast<double>(g.value(info_nce(g, g.constant(anchors), g.constant(positives), tau, mode))[0]);
}

struct StageLosses {
  Var total;
  Var first;   // l1 (stage 1) or l3 (stage 2)
  Var second;  // l2 (stage 1) or l4 (stage 2)
};

inline std::vector<std::size_t> index_range(std::size_t from, std::size_t to) {
  std::vector<std::size_t> r(to - from);
  std::iota(r.begin(), r.end(), from);
  return r;
}

/// Stage-1 objective from embeddings. `items` holds 2N rows: the N anchors
/// followed by their N next items; `masked` holds the token-masked views of
/// the same 2N rows.
template <typename T>
StageLosses stage1_loss(Graph<T>& g, Var items, Var masked, double tau, LossMode mode) {
  const std::size_t rows = g.value(items).rows();
  if (rows % 2 != 0 || rows < 4) throw DimensionError("stage1_loss: need 2N rows with N >= 2");
  const std::size_t n = rows / 2;
  Var l1 = info_nce(g, items, masked, tau, mode);
  Var l2 = info_nce(g, g.take_rows(items, index_range(0, n)), g.take_rows(items, index_range(n, 2 * n)), tau, mode);
  return {g.add(l1, l2), l1, l2};
}

/// Stage-2 objective from session embeddings: 3N rows holding originals,
/// reordered views, and action-and-item-masked views.
template <typename T>
StageLosses stage2_loss(Graph<T>& g, Var sessions, double tau, LossMode mode) {
  const std::size_t rows = g.value(sessions).rows();
  if (rows % 3 != 0 || rows < 6) throw DimensionError("stage2_loss: need 3N rows with N >= 2");
  const std::size_t n = rows / 3;
  Var h = g.take_rows(sessions, index_range(0, n));
  Var l3 = info_nce(g, h, g.take_rows(sessions, index_range(n, 2 * n)), tau, mode);
  Var l4 = info_nce(g, h, g.take_rows(sessions, index_range(2 * n, 3 * n)), tau, mode);
  return {g.add(l3, l4), l3, l4};
}

struct PretrainConfig {
  /// Item pairs per stage-1 batch; the batch holds 2N item rows.
  std::size_t stage1_batch = 256;
  std::size_t stage2_batch = 128;
  std::size_t stage1_epochs = 1;
  std::size_t stage2_epochs = 1;
  double peak_lr = 3e-5;
  double warmup_fraction = 0.10;
  double temperature = 0.05;
  LossMode loss_mode = LossMode::standard;
  MaskPolicy item_mask;
  MaskPolicy session_mask;
  std::optional<std::size_t> reorder_max_distance;
  /// Micro-batches summed per optimizer step.
  std::size_t grad_accum = 1;
  nn::AdamConfig adam;
  std::uint64_t seed = 42;

  void validate() const {
    if (stage1_batch < 2 || stage2_batch < 2)
      throw ValidationError("pretrain.batch", "batch must be at least 2 (a batch of 1 has no negatives)");
    if (grad_accum == 0) throw ValidationError("pretrain.grad_accum", "must be positive");
    if (!(temperature > 0)) throw ValidationError("temperature", "must be positive");
    item_mask.validate();
    session_mask.validate();
    nn::ScheduleConfig{1, warmup_fraction, peak_lr}.validate();
  }
};

/// Pre-tokenized pre-training inputs.
struct PretrainData {
  std::vector<std::pair<EncodedInteraction, EncodedInteraction>> item_pairs;
  std::vector<EncodedSession> sessions;
  MaskVocab mask_vocab;

  static PretrainData from(std::span<const Session> corpus, const Vocabulary& v, const TokenLimits& limits) {
    PretrainData d;
    for (const auto& [a, b] : next_item_pairs(corpus))
      d.item_pairs.emplace_back(tokenize_item(a, v, limits), tokenize_item(b, v, limits));
    for (const auto& s : corpus) d.sessions.push_back(encode_session(s, v, limits));
    d.mask_vocab = MaskVocab::from(v);
    return d;
  }
};

/// Builds the stage-1 loss for a batch of item pairs. `pair_ids` are the
/// global indices of the pairs, used to key the masking streams.
template <typename T>
StageLosses stage1_step(Graph<T>& g, UbmParams<T>& params,
                        std::span<const std::pair<EncodedInteraction, EncodedInteraction>> pairs,
                        std::span<const std::size_t> pair_ids, std::size_t epoch, const PretrainConfig& cfg,
                        const MaskVocab& mv, Rng& dropout_rng) {
  const std::size_t n = pairs.size();
  if (n < 2) throw DimensionError("stage1_step: need at least 2 pairs");
  std::vector<EncodedInteraction> items(2 * n), masked(2 * n);
  for (std::size_t k = 0; k < n; ++k) {
    items[k] = pairs[k].first;
    items[n + k] = pairs[k].second;
  }
  for (std::size_t r = 0; r < 2 * n; ++r) {
    const std::size_t key = 2 * pair_ids[r % n] + (r < n ? 0 : 1);
    Rng rng(cfg.seed, Purpose::item_mask, key, epoch);
    masked[r] = item_token_mask(items[r], cfg.item_mask, mv, rng);
  }
  // One packed pass over originals and masked views.
  std::vector<EncodedInteraction> all = items;
  all.insert(all.end(), masked.begin(), masked.end());
  const ForwardContext ctx{true, &dropout_rng};
  Var b = interaction_encode(g, params, std::span<const EncodedInteraction>(all), ctx);
  Var orig = g.take_rows(b, index_range(0, 2 * n));
  Var plus = g.take_rows(b, index_range(2 * n, 4 * n));
  return stage1_loss(g, orig, plus, cfg.temperature, cfg.loss_mode);
}

/// Builds the stage-2 loss for a batch of sessions (global indices
/// `session_ids` key the augmentation streams).
template <typename T>
StageLosses stage2_step(Graph<T>& g, UbmParams<T>& params, std::span<const EncodedSession> sessions,
                        std::span<const std::size_t> session_ids, std::size_t epoch, const PretrainConfig& cfg,
                        const MaskVocab& mv, Rng& dropout_rng) {
  const std::size_t n = sessions.size();
  if (n < 2) throw DimensionError("stage2_step: need at least 2 sessions");
  std::vector<EncodedSession> views(sessions.begin(), sessions.end());
  views.reserve(3 * n);
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(cfg.seed, Purpose::reorder, session_ids[i], epoch);
    views.push_back(interaction_reorder(sessions[i], rng, cfg.reorder_max_distance));
  }
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(cfg.seed, Purpose::action_item_mask, session_ids[i], epoch);
    views.push_back(action_item_token_mask(sessions[i], cfg.session_mask, mv, rng));
  }
  const ForwardContext ctx{true, &dropout_rng};
  auto out = ubm_forward(g, params, std::span<const EncodedSession>(views), ctx);
  return stage2_loss(g, out.sessions, cfg.temperature, cfg.loss_mode);
}

struct TrainLogEntry {
  int stage = 1;
  std::size_t step = 0;
  double loss = 0;
  double lr = 0;
  double elapsed_s = 0;
};

inline std::string to_json_line(const TrainLogEntry& e) {
  nlohmann::json j{{"stage", e.stage}, {"step", e.step}, {"loss", e.loss}, {"lr", e.lr}, {"elapsed_s", e.elapsed_s}};
  return j.dump();
}

/// Where a stage starts: zero for a fresh stage, or the state restored from
/// an end-of-epoch checkpoint.
struct StageProgress {
  std::size_t epochs_done = 0;
  std::size_t step = 0;
  nn::AdamState<float> adam;
};

struct PretrainHooks {
  std::function<void(const TrainLogEntry&)> on_step;
  /// Called after every epoch with the progress needed to resume.
  std::function<void(int stage, const StageProgress&)> on_epoch_end;
};

inline std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed, std::uint64_t stream,
                                                 std::uint64_t epoch) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed, Purpose::shuffle, stream, epoch);
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
  return idx;
}

inline std::size_t stage_samples(int stage, const PretrainData& data) {
  return stage == 1 ? data.item_pairs.size() : data.sessions.size();
}

inline std::size_t stage_batch(int stage, const PretrainConfig& cfg) {
  return stage == 1 ? cfg.stage1_batch : cfg.stage2_batch;
}

/// Optimizer steps per epoch. Trailing samples that do not fill a batch are
/// dropped.
inline std::size_t steps_per_epoch(int stage, const PretrainData& data, const PretrainConfig& cfg) {
  const std::size_t batches = stage_samples(stage, data) / stage_batch(stage, cfg);
  return batches / cfg.grad_accum;
}

/// Computes the loss of one micro-batch and accumulates its gradients.
inline double pretrain_microbatch(int stage, UbmParams<float>& params, const PretrainData& data,
                                  const PretrainConfig& cfg, std::span<const std::size_t> ids, std::size_t epoch,
                                  Rng& dropout_rng) {
  Graph<float> g;
  StageLosses l;
  if (stage == 1) {
    std::vector<std::pair<EncodedInteraction, EncodedInteraction>> batch;
    for (auto i : ids) batch.push_back(data.item_pairs[i]);
    l = stage1_step<float>(g, params, batch, ids, epoch, cfg, data.mask_vocab, dropout_rng);
  } else {
    std::vector<EncodedSession> batch;
    for (auto i : ids) batch.push_back(data.sessions[i]);
    l = stage2_step<float>(g, params, batch, ids, epoch, cfg, data.mask_vocab, dropout_rng);
  }
  g.backward(l.total);
  return g.value(l.total)[0];
}

/// Runs one pre-training stage from `start`. Stage 1 updates only the
/// interaction encoder; stage 2 updates both levels.
inline StageProgress run_pretrain_stage(int stage, UbmParams<float>& params, const PretrainData& data,
                                        const PretrainConfig& cfg, StageProgress start, const PretrainHooks& hooks) {
  if (stage != 1 && stage != 2) throw ValidationError("stage", "must be 1 or 2");
  cfg.validate();
  const std::size_t per_epoch = steps_per_epoch(stage, data, cfg);
  const std::size_t epochs = stage == 1 ? cfg.stage1_epochs : cfg.stage2_epochs;
  if (per_epoch == 0)
    throw ValidationError("pretrain", "stage " + std::to_string(stage) + " has too few samples for one batch");
  const nn::ScheduleConfig sched{per_epoch * epochs, cfg.warmup_fraction, cfg.peak_lr};
  auto trainable = stage == 1 ? params.interaction_parameters() : params.parameters();
  StageProgress prog = std::move(start);
  prog.adam.config = cfg.adam;
  const std::size_t batch = stage_batch(stage, cfg);
  const auto t0 = std::chrono::steady_clock::now();
  for (std::size_t epoch = prog.epochs_done; epoch < epochs; ++epoch) {
    const auto order = shuffled_indices(stage_samples(stage, data), cfg.seed, static_cast<std::uint64_t>(stage), epoch);
    for (std::size_t s = 0; s < per_epoch; ++s) {
      for (auto* p : trainable) p->zero_grad();
      Rng dropout_rng(cfg.seed, Purpose::dropout, prog.step, static_cast<std::uint64_t>(stage));
      double loss = 0;
      for (std::size_t a = 0; a < cfg.grad_accum; ++a) {
        const std::size_t at = (s * cfg.grad_accum + a) * batch;
        loss += pretrain_microbatch(stage, params, data, cfg, std::span<const std::size_t>(order).subspan(at, batch),
                                    epoch, dropout_rng);
      }
      const double lr = nn::lr_at(prog.step, sched);
      nn::adam_step<float>(trainable, prog.adam, lr);
      ++prog.step;
      if (hooks.on_step) {
        const double el = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        hooks.on_step(TrainLogEntry{stage, prog.step, loss, lr, el});
      }
    }
    prog.epochs_done = epoch + 1;
    if (hooks.on_epoch_end) hooks.on_epoch_end(stage, prog);
  }
  for (auto* p : trainable) p->zero_grad();
  return prog;
}

/// Mean stage losses over fixed probe batches (augmentation and dropout
/// streams keyed by `probe_seed`), without touching gradients.
inline std::pair<double, double> probe_pretrain_losses(UbmParams<float>& params, const PretrainData& data,
                                                       const PretrainConfig& cfg, std::uint64_t probe_seed,
                                                       std::size_t max_batches = 4) {
  PretrainConfig pc = cfg;
  pc.seed = probe_seed;
  auto probe = [&](int stage) {
    const std::size_t batch = stage_batch(stage, pc);
    const std::size_t n = std::min(max_batches, stage_samples(stage, data) / batch);
    if (n == 0) return 0.0;
    const auto order = shuffled_indices(stage_samples(stage, data), probe_seed, static_cast<std::uint64_t>(stage), 0);
    double total = 0;
    for (std::size_t b = 0; b < n; ++b) {
      Rng dropout_rng(probe_seed, Purpose::dropout, b, static_cast<std::uint64_t>(stage));
      std::span<const std::size_t> ids = std::span<const std::size_t>(order).subspan(b * batch, batch);
      Graph<float> g;
      StageLosses l;
      if (stage == 1) {
        std::vector<std::pair<EncodedInteraction, EncodedInteraction>> bt;
        for (auto i : ids) bt.push_back(data.item_pairs[i]);
        l = stage1_step<float>(g, params, bt, ids, 0, pc, data.mask_vocab, dropout_rng);
      } else {
        std::vector<EncodedSession> bt;
        for (auto i : ids) bt.push_back(data.sessions[i]);
        l = stage2_step<float>(g, params, bt, ids, 0, pc, data.mask_vocab, dropout_rng);
      }
      total += g.value(l.total)[0];
    }
    return total / static_cast<double>(n);
  };
  return {probe(1), probe(2)};
}

}  // namespace ubm

#endif  // UBM_CONTRASTIVE_HPP
