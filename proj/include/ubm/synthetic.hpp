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

#ifndef UBM_SYNTHETIC_HPP
#define UBM_SYNTHETIC_HPP

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "ubm/common.hpp"
#include "ubm/rng.hpp"
#include "ubm/session.hpp"

namespace ubm {

/// Parameters of the synthetic shopping corpus. Every session follows one
/// latent intent; the intent shapes its words, items, length and whether it
/// ends in a purchase.
struct SynthConfig {
  std::size_t num_intents = 10;
  std::size_t vocab_size = 500;
  std::size_t items_per_intent = 20;
  std::size_t min_length = 4;
  std::size_t max_length = 24;
  /// Success probability of the geometric length tail. Each intent scales it
  /// by a factor in [0.5, 1.5], so expected length is intent-dependent.
  double geometric_p = 0.15;
  /// One probability per intent; empty means evenly spaced in [0.1, 0.9].
  std::vector<double> purchase_prob;
  std::uint64_t seed = 1;
  std::size_t num_sessions = 2000;

  double purchase_prob_of(std::size_t intent) const {
    if (!purchase_prob.empty()) return purchase_prob[intent];
    if (num_intents == 1) return 0.5;
    return 0.1 + 0.8 * static_cast<double>(intent) / static_cast<double>(num_intents - 1);
  }

  double length_p_of(std::size_t intent) const {
    const double scale = num_intents == 1 ? 1.0 : 0.5 + static_cast<double>(intent) / static_cast<double>(num_intents - 1);
    return std::min(1.0, geometric_p * scale);
  }

  void validate(const TokenLimits& limits = {}) const {
    if (num_intents == 0) throw ConfigError("synth.num_intents", "must be positive");
    if (vocab_size < num_intents) throw ConfigError("synth.vocab_size", "must be at least num_intents");
    if (items_per_intent == 0) throw ConfigError("synth.items_per_intent", "must be positive");
    if (min_length < 1) throw ConfigError("synth.min_length", "must be at least 1");
    if (max_length < min_length) throw ConfigError("synth.max_length", "must be at least min_length");
    if (max_length > limits.max_session_len) throw ConfigError("synth.max_length", "exceeds max_session_len");
    if (!(geometric_p > 0.0 && geometric_p <= 1.0)) throw ConfigError("synth.geometric_p", "must lie in (0, 1]");
    if (!purchase_prob.empty() && purchase_prob.size() != num_intents)
      throw ConfigError("synth.purchase_prob", "needs one entry per intent");
    for (double p : purchase_prob)
      if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("synth.purchase_prob", "probabilities must lie in [0, 1]");
  }
};

enum class Split { train, valid, test };

inline std::string split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::valid: return "valid";
    case Split::test: return "test";
  }
  return "?";
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "valid") return Split::valid;
  if (s == "test") return Split::test;
  throw ValidationError("split", "unknown split '" + s + "'");
}

/// Pronounceable, unique word for a vocabulary index.
inline std::string synth_word(std::size_t index) {
  static constexpr const char* kOnset[] = {"b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"};
  static constexpr const char* kNucleus[] = {"a", "e", "i", "o", "u"};
  constexpr std::size_t kSyl = 14 * 5;
  std::string w;
  std::size_t i = index;
  do {
    w += kOnset[(i % kSyl) / 5];
    w += kNucleus[i % 5];
    i /= kSyl;
  } while (i > 0);
  // Two-syllable floor keeps words from colliding with common short tokens.
  if (w.size() < 4) w += "x";
  return w;
}

/// The fixed catalogue and word distributions behind a corpus. Depends only
/// on the configuration, never on the session index.
class SyntheticWorld {
 public:
  explicit SyntheticWorld(const SynthConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    constexpr std::uint64_t kWorldEpoch = 0xC0FFEE;
    words_.reserve(cfg_.vocab_size);
    for (std::size_t i = 0; i < cfg_.vocab_size; ++i) words_.push_back(synth_word(i));
    cdfs_.resize(cfg_.num_intents);
    orders_.resize(cfg_.num_intents);
    items_.resize(cfg_.num_intents);
    for (std::size_t k = 0; k < cfg_.num_intents; ++k) {
      Rng rng(cfg_.seed, Purpose::corpus, k, kWorldEpoch);
      auto& order = orders_[k];
      order.resize(cfg_.vocab_size);
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
      // Zipf weights over the intent's private ranking.
      auto& cdf = cdfs_[k];
      double acc = 0;
      for (std::size_t r = 0; r < cfg_.vocab_size; ++r) cdf.push_back(acc += 1.0 / std::pow(double(r + 1), 1.1));
      for (auto& c : cdf) c /= acc;
      for (std::size_t j = 0; j < cfg_.items_per_intent; ++j) {
        Item item;
        const std::size_t n = 2 + rng.below(4);
        for (std::size_t w = 0; w < n; ++w) item.title += (w ? " " : "") + sample_word(k, rng);
        item.category = "dept " + synth_word(k / 2);
        item.attributes.push_back({"brand", sample_word(k, rng)});
        if (rng.bernoulli(0.5)) item.attributes.push_back({"color", kColors[rng.below(std::size(kColors))]});
        item.item_id = "i" + std::to_string(k) + "_" + std::to_string(j);
        items_[k].push_back(std::move(item));
      }
    }
  }

  const SynthConfig& config() const { return cfg_; }
  const std::vector<Item>& items(std::size_t intent) const { return items_.at(intent); }

  std::string sample_word(std::size_t intent, Rng& rng) const {
    const auto& cdf = cdfs_[intent];
    const double u = rng.uniform();
    const std::size_t r = static_cast<std::size_t>(std::upper_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
    return words_[orders_[intent][std::min(r, cdf.size() - 1)]];
  }

  /// Session `index` of a split, with its latent intent.
  std::pair<Session, std::size_t> session(std::uint64_t index, Split split = Split::train) const {
    Rng rng(cfg_.seed, Purpose::corpus, index, static_cast<std::uint64_t>(split) + 1);
    const std::size_t k = rng.below(cfg_.num_intents);
    std::size_t len = cfg_.min_length;
    const double p = cfg_.length_p_of(k);
    while (len < cfg_.max_length && !rng.bernoulli(p)) ++len;
    const bool buys = rng.bernoulli(cfg_.purchase_prob_of(k));

    Session s;
    s.session_id = split_name(split) + "-" + std::to_string(index);
    const auto& catalogue = items_[k];
    std::optional<std::size_t> current;
    auto next_item = [&]() -> const Item& {
      // Mostly the next item of the intent's chain, sometimes a jump, rarely
      // an item of another intent.
      if (rng.bernoulli(0.1)) {
        const auto& other = items_[rng.below(cfg_.num_intents)];
        return other[rng.below(other.size())];
      }
      if (current && rng.bernoulli(0.6)) current = (*current + 1) % catalogue.size();
      else current = rng.below(catalogue.size());
      return catalogue[*current];
    };
    const Item* last = nullptr;
    const std::size_t body = buys ? len - 1 : len;
    for (std::size_t i = 0; i < body; ++i) {
      const bool search = (i == 0 && rng.bernoulli(0.5)) || (i > 0 && rng.bernoulli(0.15));
      if (search) {
        Query q;
        const std::size_t n = 1 + rng.below(3);
        for (std::size_t w = 0; w < n; ++w) q.text += (w ? " " : "") + sample_word(k, rng);
        s.interactions.push_back(Interaction{Action::search, std::move(q)});
      } else if (last && rng.bernoulli(0.1)) {
        s.interactions.push_back(Interaction{Action::add, *last});
      } else {
        last = &next_item();
        s.interactions.push_back(Interaction{Action::view, *last});
      }
    }
    if (buys) s.interactions.push_back(Interaction{Action::buy, last ? *last : next_item()});
    return {std::move(s), k};
  }

 private:
  static constexpr const char* kColors[] = {"red", "blue", "green", "black", "white"};
  SynthConfig cfg_;
  std::vector<std::string> words_;
  std::vector<std::vector<double>> cdfs_;
  std::vector<std::vector<std::size_t>> orders_;
  std::vector<std::vector<Item>> items_;
};

/// Deterministic corpus of cfg.num_sessions sessions for a split.
inline std::vector<Session> generate_corpus(const SynthConfig& cfg, Split split = Split::train,
                                            std::vector<std::size_t>* intents = nullptr) {
  const SyntheticWorld world(cfg);
  std::vector<Session> out;
  out.reserve(cfg.num_sessions);
  for (std::size_t i = 0; i < cfg.num_sessions; ++i) {
    auto [s, k] = world.session(i, split);
    out.push_back(std::move(s));
    if (intents) intents->push_back(k);
  }
  return out;
}

enum class Task { pip, rlp, nip };

inline std::string task_name(Task t) {
  switch (t) {
    case Task::pip: return "pip";
    case Task::rlp: return "rlp";
    case Task::nip: return "nip";
  }
  return "?";
}

inline Task parse_task(const std::string& s) {
  std::string l;
  for (char c : s) l += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (l == "pip") return Task::pip;
  if (l == "rlp") return Task::rlp;
  if (l == "nip") return Task::nip;
  throw ValidationError("task", "unknown task '" + s + "' (expected pip, rlp or nip)");
}

/// One downstream example. `label` is 0/1 for PIP and the remaining length
/// for RLP; NIP carries the target item instead.
struct TaskExample {
  Session input;
  double label = 0;
  std::optional<Item> item;
};

struct TaskDataset {
  Task task = Task::pip;
  Split split = Split::train;
  std::vector<TaskExample> examples;

  std::size_t size() const { return examples.size(); }
};

struct DeriveConfig {
  std::uint64_t seed = 1;
  std::size_t min_input_length = 5;
  /// RLP cuts happen before this interaction index.
  std::size_t rlp_max_cut = 31;
  std::size_t nip_min_count = 5;
  /// Target positive share after over-sampling the PIP training split.
  double pip_positive_fraction = 0.5;
  bool oversample = true;
};

/// NIP candidate items, in first-seen order.
struct NipPool {
  std::vector<Item> items;
  std::unordered_map<std::string, std::size_t> index;

  void add(const Item& item) {
    const auto key = item_key(item);
    if (index.emplace(key, items.size()).second) items.push_back(item);
  }
  bool contains(const Item& item) const { return index.count(item_key(item)) > 0; }
  std::size_t at(const Item& item) const {
    auto it = index.find(item_key(item));
    if (it == index.end()) throw ValidationError("label", "item '" + item_key(item) + "' is not in the candidate pool");
    return it->second;
  }
  std::size_t size() const { return items.size(); }
};

inline Session prefix(const Session& s, std::size_t n) {
  return Session{s.session_id, std::vector<Interaction>(s.interactions.begin(), s.interactions.begin() + n)};
}

namespace detail {

inline void oversample_pip(TaskDataset& ds, const DeriveConfig& dc) {
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < ds.examples.size(); ++i) (ds.examples[i].label > 0.5 ? pos : neg).push_back(i);
  if (pos.empty() || neg.empty()) return;
  const double f = dc.pip_positive_fraction;
  const bool grow_pos = static_cast<double>(pos.size()) / static_cast<double>(ds.size()) < f;
  const auto& src = grow_pos ? pos : neg;
  const double keep = grow_pos ? static_cast<double>(neg.size()) : static_cast<double>(pos.size());
  const double share = grow_pos ? f : 1.0 - f;
  const auto target = static_cast<std::size_t>(std::llround(keep * share / (1.0 - share)));
  Rng rng(dc.seed, Purpose::oversample);
  for (std::size_t have = src.size(); have < target; ++have) ds.examples.push_back(ds.examples[src[rng.below(src.size())]]);
}

}  // namespace detail

/// Builds a downstream dataset from a corpus split. For NIP the training
/// split fills `pool`; other splits read it and drop labels outside it.
inline TaskDataset derive_task_dataset(const std::vector<Session>& corpus, Task task, Split split,
                                       const DeriveConfig& dc, NipPool* pool = nullptr) {
  TaskDataset ds{task, split, {}};
  switch (task) {
    case Task::pip:
      for (const auto& s : corpus) {
        std::size_t cut = s.length();
        for (std::size_t i = 0; i < s.length(); ++i)
          if (s.interactions[i].action == Action::buy) {
            cut = i;
            break;
          }
        if (cut < dc.min_input_length) continue;
        ds.examples.push_back({prefix(s, cut), cut < s.length() ? 1.0 : 0.0, std::nullopt});
      }
      if (split == Split::train && dc.oversample) detail::oversample_pip(ds, dc);
      break;
    case Task::rlp:
      for (std::size_t n = 0; n < corpus.size(); ++n) {
        const auto& s = corpus[n];
        const std::size_t hi = std::min(s.length() - 1, dc.rlp_max_cut);
        if (s.length() < 1 || hi < dc.min_input_length) continue;
        Rng rng(dc.seed, Purpose::rlp_cut, n, static_cast<std::uint64_t>(split));
        const std::size_t cut = dc.min_input_length + rng.below(hi - dc.min_input_length + 1);
        ds.examples.push_back({prefix(s, cut), static_cast<double>(s.length() - cut), std::nullopt});
      }
      break;
    case Task::nip: {
      if (!pool) throw ValidationError("pool", "NIP derivation needs a candidate pool");
      for (const auto& s : corpus)
        for (std::size_t i = 1; i < s.length(); ++i)
          if (s.interactions[i].has_item()) ds.examples.push_back({prefix(s, i), 0.0, s.interactions[i].item()});
      if (split == Split::train) {
        std::map<std::string, std::size_t> counts;
        for (const auto& e : ds.examples) ++counts[item_key(*e.item)];
        std::erase_if(ds.examples, [&](const TaskExample& e) { return counts[item_key(*e.item)] < dc.nip_min_count; });
        *pool = NipPool{};
        for (const auto& e : ds.examples) pool->add(*e.item);
      } else {
        std::erase_if(ds.examples, [&](const TaskExample& e) { return !pool->contains(*e.item); });
      }
      break;
    }
  }
  return ds;
}

inline nlohmann::json example_to_json(const TaskExample& e, Task task) {
  nlohmann::json j{{"input", session_to_json(e.input)}};
  if (task == Task::nip) j["label"] = item_key(*e.item);
  else if (task == Task::pip) j["label"] = static_cast<int>(e.label);
  else j["label"] = e.label;
  return j;
}

inline void write_task_dataset(const std::string& path, const TaskDataset& ds) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write dataset '" + path + "'");
  for (const auto& e : ds.examples) out << example_to_json(e, ds.task).dump() << '\n';
  if (!out) throw Error("write failed for '" + path + "'");
}

inline void write_nip_pool(const std::string& path, const NipPool& pool) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write pool '" + path + "'");
  for (const auto& item : pool.items) out << item_to_json(item).dump() << '\n';
}

inline NipPool read_nip_pool(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open pool '" + path + "'");
  NipPool pool;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      pool.add(item_from_json(nlohmann::json::parse(line), "item"));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(e.what(), line_no);
    }
  }
  return pool;
}

/// Reads a dataset written by write_task_dataset. NIP labels are resolved
/// through `pool`.
inline TaskDataset read_task_dataset(const std::string& path, Task task, Split split, const TokenLimits& limits,
                                     const NipPool* pool = nullptr) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open dataset '" + path + "'");
  if (task == Task::nip && !pool) throw ValidationError("pool", "NIP datasets need a candidate pool");
  TaskDataset ds{task, split, {}};
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(e.what(), line_no);
    }
    if (!j.is_object() || !j.contains("input") || !j.contains("label"))
      throw ValidationError("input", "dataset record needs 'input' and 'label' (line " + std::to_string(line_no) + ")");
    TaskExample ex;
    ex.input = session_from_json(j["input"], limits);
    const auto& lab = j["label"];
    if (task == Task::nip) {
      if (!lab.is_string()) throw ValidationError("label", "NIP label must be an item id (line " + std::to_string(line_no) + ")");
      auto it = pool->index.find(lab.get<std::string>());
      if (it == pool->index.end())
        throw ValidationError("label", "item '" + lab.get<std::string>() + "' not in pool (line " + std::to_string(line_no) + ")");
      ex.item = pool->items[it->second];
    } else {
      if (!lab.is_number()) throw ValidationError("label", "label must be a number (line " + std::to_string(line_no) + ")");
      ex.label = lab.get<double>();
      if (task == Task::pip && ex.label != 0.0 && ex.label != 1.0)
        throw ValidationError("label", "PIP label must be 0 or 1 (line " + std::to_string(line_no) + ")");
      if (task == Task::rlp && ex.label < 0) throw ValidationError("label", "RLP label must be non-negative");
    }
    ds.examples.push_back(std::move(ex));
  }
  return ds;
}

}  // namespace ubm

#endif  // UBM_SYNTHETIC_HPP
