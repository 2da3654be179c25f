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

#ifndef UBM_VOCAB_HPP
#define UBM_VOCAB_HPP

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "ubm/common.hpp"
#include "ubm/session.hpp"

namespace ubm {

using TokenId = std::int32_t;

/// Lowercases ASCII and splits on whitespace and ASCII punctuation, which is
/// dropped. Bytes outside ASCII are kept as word characters.
inline std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::string cur;
  for (unsigned char c : text) {
    const bool ascii = c < 0x80;
    if (ascii && (std::isspace(c) || std::ispunct(c) || std::iscntrl(c))) {
      if (!cur.empty()) words.push_back(std::move(cur)), cur.clear();
      continue;
    }
    cur.push_back(ascii ? static_cast<char>(std::tolower(c)) : static_cast<char>(c));
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

/// "screen  size" -> "[SCREEN_SIZE]".
inline std::string attribute_token(std::string_view name) {
  std::string out = "[";
  bool pending_space = false;
  for (unsigned char c : name) {
    if (c < 0x80 && std::isspace(c)) {
      pending_space = out.size() > 1;
      continue;
    }
    if (pending_space) out.push_back('_'), pending_space = false;
    out.push_back(c < 0x80 ? static_cast<char>(std::toupper(c)) : static_cast<char>(c));
  }
  out.push_back(']');
  return out;
}

struct EncodedInteraction {
  std::vector<TokenId> token_ids;
  bool operator==(const EncodedInteraction&) const = default;
};

struct EncodedSession {
  std::string session_id;
  std::vector<EncodedInteraction> interactions;
  std::vector<bool> pad_mask;  // true = real interaction

  std::size_t length() const noexcept {
    return static_cast<std::size_t>(std::count(pad_mask.begin(), pad_mask.end(), true));
  }
  bool operator==(const EncodedSession&) const = default;
};

struct TokenizeStats {
  std::size_t unknown_attribute_tokens = 0;
  std::size_t unknown_words = 0;
};

class Vocabulary {
 public:
  static constexpr TokenId pad = 0;
  static constexpr TokenId unk = 1;
  static constexpr TokenId cls = 2;
  static constexpr TokenId sep = 3;
  static constexpr TokenId mask = 4;
  static constexpr TokenId search = 5;
  static constexpr TokenId view = 6;
  static constexpr TokenId add = 7;
  static constexpr TokenId buy = 8;
  static constexpr TokenId title = 9;
  static constexpr TokenId category = 10;

  static constexpr std::array<std::string_view, 11> fixed_reserved = {
      "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "[SEARCH]", "[VIEW]", "[ADD]", "[BUY]", "[TITLE]", "[CATEGORY]"};

  Vocabulary() = default;

  /// Reserved tokens are the fixed set followed by `attribute_tokens`; corpus
  /// words follow in the given order.
  Vocabulary(std::vector<std::string> attribute_tokens, std::vector<std::string> words) {
    for (auto t : fixed_reserved) append(std::string(t));
    std::sort(attribute_tokens.begin(), attribute_tokens.end());
    for (auto& t : attribute_tokens)
      if (!index_.count(t)) append(std::move(t));
    num_reserved_ = tokens_.size();
    for (auto& w : words) {
      if (index_.count(w)) throw ValidationError("vocabulary", "duplicate token '" + w + "'");
      append(std::move(w));
    }
  }

  std::size_t size() const noexcept { return tokens_.size(); }
  std::size_t num_reserved() const noexcept { return num_reserved_; }

  std::optional<TokenId> find(std::string_view token) const {
    auto it = index_.find(std::string(token));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }
  TokenId id(std::string_view token) const { return find(token).value_or(unk); }
  const std::string& token(TokenId id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }

  static constexpr TokenId action_id(Action a) noexcept {
    switch (a) {
      case Action::search: return search;
      case Action::view: return view;
      case Action::add: return add;
      case Action::buy: return buy;
    }
    return view;
  }
  static constexpr bool is_action(TokenId id) noexcept { return id >= search && id <= buy; }
  static constexpr bool is_structural(TokenId id) noexcept { return id == cls || id == sep || id == pad; }
  bool is_reserved(TokenId id) const noexcept { return id >= 0 && static_cast<std::size_t>(id) < num_reserved_; }

  /// Content hash over (id, token) pairs and the reserved boundary.
  std::string hash() const {
    const std::string head = "reserved=" + std::to_string(num_reserved_) + "\n";
    std::uint64_t h = fnv1a(head.data(), head.size());
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      const std::string line = std::to_string(i) + "\t" + tokens_[i] + "\n";
      h = fnv1a(line.data(), line.size(), h);
    }
    return hex64(h);
  }

  nlohmann::json to_json() const {
    nlohmann::json reserved = nlohmann::json::array();
    for (std::size_t i = 0; i < num_reserved_; ++i) reserved.push_back(tokens_[i]);
    nlohmann::json map = nlohmann::json::object();
    for (std::size_t i = 0; i < tokens_.size(); ++i) map[tokens_[i]] = i;
    return {{"format", "ubm-vocab-1"}, {"reserved", reserved}, {"tokens", map}, {"hash", hash()}};
  }

  static Vocabulary from_json(const nlohmann::json& j) {
    if (!j.is_object() || !j.contains("tokens") || !j.contains("reserved"))
      throw ValidationError("vocabulary", "missing 'tokens' or 'reserved'");
    const auto& map = j.at("tokens");
    std::vector<std::string> by_id(map.size());
    std::vector<bool> seen(map.size(), false);
    for (auto it = map.begin(); it != map.end(); ++it) {
      const auto id = it.value().get<std::size_t>();
      if (id >= by_id.size() || seen[id]) throw ValidationError("vocabulary.tokens", "ids must be dense and unique");
      by_id[id] = it.key();
      seen[id] = true;
    }
    const auto& reserved = j.at("reserved");
    if (reserved.size() < fixed_reserved.size() || reserved.size() > by_id.size())
      throw ValidationError("vocabulary.reserved", "inconsistent reserved list");
    for (std::size_t i = 0; i < reserved.size(); ++i) {
      if (reserved[i].get<std::string>() != by_id[i])
        throw ValidationError("vocabulary.reserved", "reserved token order does not match ids");
      if (i < fixed_reserved.size() && by_id[i] != fixed_reserved[i])
        throw ValidationError("vocabulary.reserved", "unexpected structural token '" + by_id[i] + "'");
    }
    Vocabulary v;
    for (auto& t : by_id) v.append(std::move(t));
    v.num_reserved_ = reserved.size();
    if (j.contains("hash") && j.at("hash").get<std::string>() != v.hash())
      throw ValidationError("vocabulary.hash", "content hash mismatch");
    return v;
  }

  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw Error("cannot write vocabulary '" + path + "'");
    out << to_json().dump(1) << '\n';
    if (!out) throw Error("write failed for '" + path + "'");
  }

  static Vocabulary load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open vocabulary '" + path + "'");
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(std::string("malformed vocabulary JSON: ") + e.what());
    }
    return from_json(j);
  }

 private:
  void append(std::string t) {
    index_.emplace(t, static_cast<TokenId>(tokens_.size()));
    tokens_.push_back(std::move(t));
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
  std::size_t num_reserved_ = 0;
};

namespace detail {

template <typename F>
void for_each_text(const Interaction& b, F&& f) {
  if (!b.has_item()) {
    f(b.query().text);
    return;
  }
  const Item& item = b.item();
  f(item.title);
  f(item.category);
  for (const auto& a : item.attributes) f(a.value);
}

}  // namespace detail

/// Builds a word-level vocabulary. Words seen fewer than `min_freq` times are
/// left out and later tokenize to [UNK]. Corpus words are ordered by
/// descending frequency, ties broken lexicographically.
inline Vocabulary build_vocab(std::span<const Session> corpus, std::size_t min_freq = 2) {
  if (corpus.empty()) throw ValidationError("corpus", "cannot build a vocabulary from an empty corpus");
  std::map<std::string, std::size_t> freq;
  std::vector<std::string> attrs;
  for (const auto& s : corpus) {
    for (const auto& b : s.interactions) {
      detail::for_each_text(b, [&](const std::string& text) {
        for (auto& w : split_words(text)) ++freq[w];
      });
      if (b.has_item())
        for (const auto& a : b.item().attributes) attrs.push_back(attribute_token(a.name));
    }
  }
  std::sort(attrs.begin(), attrs.end());
  attrs.erase(std::unique(attrs.begin(), attrs.end()), attrs.end());
  std::vector<std::pair<std::string, std::size_t>> kept;
  for (auto& [w, n] : freq)
    if (n >= min_freq) kept.emplace_back(w, n);
  std::stable_sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> words;
  words.reserve(kept.size());
  for (auto& [w, n] : kept) words.push_back(std::move(w));
  return Vocabulary(std::move(attrs), std::move(words));
}

namespace detail {

inline void append_words(std::vector<TokenId>& out, std::string_view text, const Vocabulary& v, std::size_t limit,
                         TokenizeStats* stats) {
  std::size_t n = 0;
  for (const auto& w : split_words(text)) {
    if (n++ >= limit) break;
    const auto id = v.find(w);
    if (!id && stats) ++stats->unknown_words;
    out.push_back(id.value_or(Vocabulary::unk));
  }
}

inline std::vector<TokenId> item_payload(const Item& item, const Vocabulary& v, const TokenLimits& limits,
                                         TokenizeStats* stats) {
  std::vector<TokenId> p;
  p.push_back(Vocabulary::title);
  append_words(p, item.title, v, limits.max_title_tokens, stats);
  if (!item.category.empty()) {
    p.push_back(Vocabulary::category);
    append_words(p, item.category, v, limits.max_item_tokens, stats);
  }
  for (const auto& a : item.attributes) {
    if (p.size() >= limits.max_item_tokens) break;
    const auto id = v.find(attribute_token(a.name));
    if (!id) {
      if (stats) ++stats->unknown_attribute_tokens;
    }
    p.push_back(id.value_or(Vocabulary::unk));
    append_words(p, a.value, v, limits.max_item_tokens, stats);
  }
  if (p.size() > limits.max_item_tokens) p.resize(limits.max_item_tokens);
  return p;
}

}  // namespace detail

/// [CLS] [ACTION] payload [SEP], where the payload is the query words or
/// [TITLE] title [CATEGORY] category ([ATTR] value)*, cut to max_item_tokens.
inline EncodedInteraction tokenize_interaction(const Interaction& b, const Vocabulary& v, const TokenLimits& limits,
                                               TokenizeStats* stats = nullptr) {
  EncodedInteraction enc;
  enc.token_ids.push_back(Vocabulary::cls);
  enc.token_ids.push_back(Vocabulary::action_id(b.action));
  std::vector<TokenId> payload;
  if (b.has_item()) {
    payload = detail::item_payload(b.item(), v, limits, stats);
  } else {
    detail::append_words(payload, b.query().text, v, limits.max_item_tokens, stats);
  }
  enc.token_ids.insert(enc.token_ids.end(), payload.begin(), payload.end());
  enc.token_ids.push_back(Vocabulary::sep);
  return enc;
}

/// Item text without an action token: [CLS] payload [SEP].
inline EncodedInteraction tokenize_item(const Item& item, const Vocabulary& v, const TokenLimits& limits,
                                        TokenizeStats* stats = nullptr) {
  EncodedInteraction enc;
  enc.token_ids.push_back(Vocabulary::cls);
  auto payload = detail::item_payload(item, v, limits, stats);
  enc.token_ids.insert(enc.token_ids.end(), payload.begin(), payload.end());
  enc.token_ids.push_back(Vocabulary::sep);
  return enc;
}

/// Tokenizes every interaction and pads to max_session_len with single
/// [PAD] slots.
inline EncodedSession encode_session(const Session& s, const Vocabulary& v, const TokenLimits& limits,
                                     TokenizeStats* stats = nullptr) {
  if (s.interactions.empty()) throw ValidationError("interactions", "cannot encode an empty session");
  if (s.interactions.size() > limits.max_session_len)
    throw ValidationError("interactions", "session longer than max_session_len");
  EncodedSession es;
  es.session_id = s.session_id;
  for (const auto& b : s.interactions) {
    es.interactions.push_back(tokenize_interaction(b, v, limits, stats));
    es.pad_mask.push_back(true);
  }
  while (es.interactions.size() < limits.max_session_len) {
    es.interactions.push_back(EncodedInteraction{{Vocabulary::pad}});
    es.pad_mask.push_back(false);
  }
  return es;
}

}  // namespace ubm

#endif  // UBM_VOCAB_HPP
