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

#ifndef UBM_ANALYSIS_HPP
#define UBM_ANALYSIS_HPP

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ubm/augment.hpp"
#include "ubm/common.hpp"
#include "ubm/encoders.hpp"
#include "ubm/synthetic.hpp"
#include "ubm/tasks.hpp"

namespace ubm {

namespace detail {

template <typename T>
std::vector<std::vector<double>> normalized_rows(const Tensor<T>& m) {
  std::vector<std::vector<double>> out(m.rows());
  for (std::size_t r = 0; r < m.rows(); ++r) {
    double s = 0;
    for (T v : m.row(r)) s += double(v) * double(v);
    if (!(s > 0)) throw DimensionError("row " + std::to_string(r) + " has zero norm");
    const double inv = 1.0 / std::sqrt(s);
    for (T v : m.row(r)) out[r].push_back(double(v) * inv);
  }
  return out;
}

inline double squared_distance(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

}  // namespace detail

/// Mean squared distance between l2-normalized positive pairs (row i of `a`
/// with row i of `b`).
template <typename T>
double alignment_loss(const Tensor<T>& a, const Tensor<T>& b) {
  if (!a.same_shape(b)) throw DimensionError("alignment_loss: " + a.shape_str() + " vs " + b.shape_str());
  if (a.rows() == 0) throw ValidationError("pairs", "alignment needs at least one pair");
  const auto na = detail::normalized_rows(a);
  const auto nb = detail::normalized_rows(b);
  double s = 0;
  for (std::size_t i = 0; i < na.size(); ++i) s += detail::squared_distance(na[i], nb[i]);
  return s / static_cast<double>(na.size());
}

/// log of the mean of exp(-2 |x - y|^2) over ordered pairs of distinct rows,
/// on l2-normalized rows.
template <typename T>
double uniformity_loss(const Tensor<T>& x) {
  if (x.rows() < 2) throw ValidationError("embeddings", "uniformity needs at least two rows");
  const auto n = detail::normalized_rows(x);
  // log-mean-exp with the largest exponent (0 at most) factored out.
  std::vector<double> e;
  e.reserve(n.size() * (n.size() - 1) / 2);
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n.size(); ++i)
    for (std::size_t j = i + 1; j < n.size(); ++j) {
      e.push_back(-2.0 * detail::squared_distance(n[i], n[j]));
      mx = std::max(mx, e.back());
    }
  // Ordered pairs count each unordered pair twice, which cancels in the mean.
  double s = 0;
  for (double v : e) s += std::exp(v - mx);
  return mx + std::log(s / static_cast<double>(e.size()));
}

enum class AnalysisAugmentation { action_item_mask, reorder };

inline std::string augmentation_name(AnalysisAugmentation a) {
  return a == AnalysisAugmentation::action_item_mask ? "action_item_mask" : "reorder";
}

inline AnalysisAugmentation parse_augmentation(const std::string& s) {
  if (s == "action_item_mask") return AnalysisAugmentation::action_item_mask;
  if (s == "reorder") return AnalysisAugmentation::reorder;
  throw ValidationError("augmentation", "expected 'action_item_mask' or 'reorder', got '" + s + "'");
}

struct AlignUniformReport {
  double alignment = 0;
  double uniformity = 0;
  std::size_t samples = 0;
  AnalysisAugmentation augmentation = AnalysisAugmentation::action_item_mask;

  nlohmann::json to_json() const {
    return {{"alignment_loss", alignment},
            {"uniformity_loss", uniformity},
            {"sample_count", samples},
            {"augmentation", augmentation_name(augmentation)}};
  }
};

/// Eval-mode session embeddings of `sessions` and of one augmented view each;
/// alignment over (original, view) pairs and uniformity over the originals.
inline AlignUniformReport align_uniform_report(UbmParams<float>& p, std::span<const EncodedSession> sessions,
                                               const MaskVocab& mv, AnalysisAugmentation aug, std::uint64_t seed,
                                               const MaskPolicy& policy = {}) {
  std::vector<EncodedSession> views;
  for (std::size_t i = 0; i < sessions.size(); ++i) {
    Rng rng(seed, Purpose::analysis, i);
    views.push_back(aug == AnalysisAugmentation::action_item_mask ? action_item_token_mask(sessions[i], policy, mv, rng)
                                                                  : interaction_reorder(sessions[i], rng));
  }
  const auto h = session_embeddings(p, sessions);
  const auto hv = session_embeddings(p, std::span<const EncodedSession>(views));
  return {alignment_loss(h, hv), uniformity_loss(h), sessions.size(), aug};
}

/// CSV: header "session_id,e0,...", one row per session, shortest decimal
/// form that round-trips each float.
inline void export_embeddings(UbmParams<float>& p, std::span<const EncodedSession> sessions, const std::string& path) {
  const auto h = session_embeddings(p, sessions);
  std::ofstream out(path);
  if (!out) throw Error("cannot write embeddings to '" + path + "'");
  out << "session_id";
  for (std::size_t c = 0; c < h.cols(); ++c) out << ",e" << c;
  out << '\n';
  char buf[32];
  for (std::size_t r = 0; r < h.rows(); ++r) {
    const auto& id = sessions[r].session_id;
    if (id.find_first_of(",\"\n") != std::string::npos) {
      out << '"';
      for (char ch : id) out << (ch == '"' ? std::string("\"\"") : std::string(1, ch));
      out << '"';
    } else {
      out << id;
    }
    for (float v : h.row(r)) {
      std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(v));
      out << ',' << buf;
    }
    out << '\n';
  }
  if (!out) throw Error("write failed for '" + path + "'");
}

struct SparsityGroup {
  std::size_t lo = 0;
  std::optional<std::size_t> hi;  // exclusive; none means unbounded
  std::size_t count = 0;
  NipMetrics at10;
  NipMetrics at20;

  nlohmann::json to_json() const {
    return {{"range", {lo, hi ? nlohmann::json(*hi) : nlohmann::json("inf")}},
            {"count", count},
            {"hit@10", at10.hit},
            {"mrr@10", at10.mrr},
            {"hit@20", at20.hit},
            {"mrr@20", at20.mrr}};
  }
};

/// Label occurrences among training examples.
inline std::map<std::string, std::size_t> label_counts(const TaskDataset& train) {
  std::map<std::string, std::size_t> counts;
  for (const auto& e : train.examples)
    if (e.item) ++counts[item_key(*e.item)];
  return counts;
}

/// Buckets test examples by their label's training frequency, with groups
/// [edges[i], edges[i+1]) and a last open-ended group, and evaluates each.
inline std::vector<SparsityGroup> sparsity_report(std::span<const std::size_t> ranks,
                                                  std::span<const std::string> label_keys,
                                                  const std::map<std::string, std::size_t>& train_counts,
                                                  std::span<const std::size_t> edges) {
  if (ranks.size() != label_keys.size()) throw DimensionError("sparsity_report: ranks and labels differ in length");
  if (edges.empty()) throw ValidationError("edges", "need at least one group edge");
  for (std::size_t i = 1; i < edges.size(); ++i)
    if (edges[i] <= edges[i - 1]) throw ValidationError("edges", "must be strictly increasing");
  std::string missing;
  for (const auto& k : label_keys)
    if (!train_counts.count(k)) missing += (missing.empty() ? "" : ", ") + k;
  if (!missing.empty()) throw ValidationError("train_counts", "no training count for items: " + missing);
  std::vector<std::vector<std::size_t>> buckets(edges.size());
  for (std::size_t i = 0; i < ranks.size(); ++i) {
    const std::size_t c = train_counts.at(label_keys[i]);
    std::size_t g = edges.size();
    for (std::size_t b = 0; b < edges.size(); ++b)
      if (c >= edges[b] && (b + 1 == edges.size() || c < edges[b + 1])) g = b;
    if (g == edges.size()) throw ValidationError("edges", "count " + std::to_string(c) + " below the first edge");
    buckets[g].push_back(ranks[i]);
  }
  std::vector<SparsityGroup> out;
  for (std::size_t b = 0; b < edges.size(); ++b) {
    SparsityGroup grp;
    grp.lo = edges[b];
    if (b + 1 < edges.size()) grp.hi = edges[b + 1];
    grp.count = buckets[b].size();
    grp.at10 = evaluate_nip(buckets[b], 10);
    grp.at20 = evaluate_nip(buckets[b], 20);
    out.push_back(grp);
  }
  return out;
}

}  // namespace ubm

#endif  // UBM_ANALYSIS_HPP
