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

#ifndef UBM_SESSION_HPP
#define UBM_SESSION_HPP

#include <algorithm>
#include <fstream>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <variant>
#include <vector>

#include <json.hpp>

#include "ubm/common.hpp"

namespace ubm {

enum class Action { search, view, add, buy };

inline constexpr std::string_view action_name(Action a) noexcept {
  switch (a) {
    case Action::search: return "search";
    case Action::view: return "view";
    case Action::add: return "add";
    case Action::buy: return "buy";
  }
  return "view";
}

/// Reserved vocabulary token for an action, e.g. "[SEARCH]".
inline constexpr std::string_view action_token(Action a) noexcept {
  switch (a) {
    case Action::search: return "[SEARCH]";
    case Action::view: return "[VIEW]";
    case Action::add: return "[ADD]";
    case Action::buy: return "[BUY]";
  }
  return "[VIEW]";
}

inline std::optional<Action> parse_action(std::string_view s) noexcept {
  if (s == "search") return Action::search;
  if (s == "view") return Action::view;
  if (s == "add") return Action::add;
  if (s == "buy") return Action::buy;
  return std::nullopt;
}

struct Attribute {
  std::string name;
  std::string value;
  bool operator==(const Attribute&) const = default;
};

struct Item {
  std::string title;
  std::string category;
  std::vector<Attribute> attributes;
  /// Optional stable identifier; derived from content when absent.
  std::string item_id;

  bool operator==(const Item&) const = default;
};

struct Query {
  std::string text;
  bool operator==(const Query&) const = default;
};

struct Interaction {
  Action action = Action::view;
  std::variant<Item, Query> payload;

  bool has_item() const noexcept { return std::holds_alternative<Item>(payload); }
  const Item& item() const { return std::get<Item>(payload); }
  const Query& query() const { return std::get<Query>(payload); }
  bool operator==(const Interaction&) const = default;
};

struct Session {
  std::string session_id;
  std::vector<Interaction> interactions;

  std::size_t length() const noexcept { return interactions.size(); }
  bool operator==(const Session&) const = default;
};

struct TokenLimits {
  std::size_t max_title_tokens = 32;
  std::size_t max_item_tokens = 64;
  std::size_t max_session_len = 32;

  void validate() const {
    if (max_title_tokens == 0 || max_item_tokens == 0 || max_session_len == 0)
      throw ValidationError("limits", "all token limits must be positive");
    if (max_title_tokens > max_item_tokens)
      throw ValidationError("limits.max_title_tokens", "must not exceed max_item_tokens");
  }
};

/// Identifier used for an item in next-item datasets and candidate pools.
inline std::string item_key(const Item& item) {
  if (!item.item_id.empty()) return item.item_id;
  std::string canon = item.title + '\x1f' + item.category;
  for (const auto& a : item.attributes) canon += '\x1f' + a.name + '\x1e' + a.value;
  return "h" + hex64(fnv1a(canon.data(), canon.size()));
}

inline void validate_item(const Item& item, const std::string& field) {
  if (item.title.empty()) throw ValidationError(field + ".title", "must be non-empty");
  std::unordered_set<std::string> seen;
  for (std::size_t i = 0; i < item.attributes.size(); ++i) {
    const auto& name = item.attributes[i].name;
    const std::string f = field + ".attributes[" + std::to_string(i) + "].name";
    if (name.empty()) throw ValidationError(f, "must be non-empty");
    if (!seen.insert(name).second) throw ValidationError(f, "duplicate attribute '" + name + "'");
  }
}

inline void validate_interaction(const Interaction& b, const std::string& field) {
  if (b.action == Action::search) {
    if (b.has_item()) throw ValidationError(field + ".item", "search interaction must carry a query");
    if (b.query().text.empty()) throw ValidationError(field + ".query", "must be non-empty");
  } else {
    if (!b.has_item())
      throw ValidationError(field + ".query", std::string(action_name(b.action)) + " interaction must carry an item");
    validate_item(b.item(), field + ".item");
  }
}

inline void validate_session(const Session& s, const TokenLimits& limits) {
  if (s.interactions.empty()) throw ValidationError("interactions", "session must contain at least one interaction");
  if (s.interactions.size() > limits.max_session_len)
    throw ValidationError("interactions", "session longer than max_session_len");
  for (std::size_t i = 0; i < s.interactions.size(); ++i)
    validate_interaction(s.interactions[i], "interactions[" + std::to_string(i) + "]");
}

namespace detail {

inline const nlohmann::json& require(const nlohmann::json& obj, const char* key, const std::string& field) {
  auto it = obj.find(key);
  if (it == obj.end()) throw ValidationError(field.empty() ? key : field + "." + key, "missing");
  return *it;
}

inline std::string require_string(const nlohmann::json& obj, const char* key, const std::string& field) {
  const auto& v = require(obj, key, field);
  if (!v.is_string()) throw ValidationError(field.empty() ? key : field + "." + key, "must be a string");
  return v.get<std::string>();
}

}  // namespace detail

inline Item item_from_json(const nlohmann::json& j, const std::string& field) {
  if (!j.is_object()) throw ValidationError(field, "must be an object");
  Item item;
  item.title = detail::require_string(j, "title", field);
  if (auto it = j.find("category"); it != j.end()) {
    if (!it->is_string()) throw ValidationError(field + ".category", "must be a string");
    item.category = it->get<std::string>();
  }
  if (auto it = j.find("item_id"); it != j.end()) {
    if (!it->is_string()) throw ValidationError(field + ".item_id", "must be a string");
    item.item_id = it->get<std::string>();
  }
  if (auto it = j.find("attributes"); it != j.end()) {
    if (!it->is_array()) throw ValidationError(field + ".attributes", "must be an array");
    for (std::size_t i = 0; i < it->size(); ++i) {
      const auto& a = (*it)[i];
      const std::string f = field + ".attributes[" + std::to_string(i) + "]";
      if (!a.is_object()) throw ValidationError(f, "must be an object");
      item.attributes.push_back({detail::require_string(a, "name", f), detail::require_string(a, "value", f)});
    }
  }
  validate_item(item, field);
  return item;
}

inline nlohmann::json item_to_json(const Item& item) {
  nlohmann::json j = nlohmann::json::object();
  j["title"] = item.title;
  j["category"] = item.category;
  nlohmann::json attrs = nlohmann::json::array();
  for (const auto& a : item.attributes) attrs.push_back({{"name", a.name}, {"value", a.value}});
  j["attributes"] = std::move(attrs);
  if (!item.item_id.empty()) j["item_id"] = item.item_id;
  return j;
}

/// Builds a Session from an already-parsed JSON object. Sessions longer than
/// `limits.max_session_len` keep their most recent interactions.
inline Session session_from_json(const nlohmann::json& j, const TokenLimits& limits) {
  if (!j.is_object()) throw ValidationError("record", "must be a JSON object");
  Session s;
  s.session_id = detail::require_string(j, "session_id", "");
  const auto& arr = detail::require(j, "interactions", "");
  if (!arr.is_array()) throw ValidationError("interactions", "must be an array");
  for (std::size_t i = 0; i < arr.size(); ++i) {
    const auto& r = arr[i];
    const std::string f = "interactions[" + std::to_string(i) + "]";
    if (!r.is_object()) throw ValidationError(f, "must be an object");
    const std::string act = detail::require_string(r, "action", f);
    auto action = parse_action(act);
    if (!action) throw ValidationError(f + ".action", "unknown action '" + act + "'");
    const bool has_q = r.contains("query");
    const bool has_i = r.contains("item");
    if (has_q == has_i) throw ValidationError(f, "exactly one of 'query' or 'item' is required");
    Interaction b;
    b.action = *action;
    if (*action == Action::search && has_i) throw ValidationError(f + ".item", "search interaction must carry a query");
    if (*action != Action::search && has_q)
      throw ValidationError(f + ".query", act + " interaction must carry an item");
    if (has_q) {
      b.payload = Query{detail::require_string(r, "query", f)};
    } else {
      b.payload = item_from_json(r["item"], f + ".item");
    }
    validate_interaction(b, f);
    s.interactions.push_back(std::move(b));
  }
  if (s.interactions.size() > limits.max_session_len) {
    const auto drop = static_cast<std::ptrdiff_t>(s.interactions.size() - limits.max_session_len);
    s.interactions.erase(s.interactions.begin(), s.interactions.begin() + drop);
  }
  validate_session(s, limits);
  return s;
}

/// Parses one JSONL record. `line_no` is reported in parse errors.
inline Session parse_session_record(std::string_view line, const TokenLimits& limits, std::size_t line_no = 0) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("malformed JSON: ") + e.what(), line_no);
  }
  return session_from_json(j, limits);
}

inline nlohmann::json session_to_json(const Session& s) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& b : s.interactions) {
    nlohmann::json r = nlohmann::json::object();
    r["action"] = std::string(action_name(b.action));
    if (b.has_item())
      r["item"] = item_to_json(b.item());
    else
      r["query"] = b.query().text;
    arr.push_back(std::move(r));
  }
  return nlohmann::json{{"session_id", s.session_id}, {"interactions", std::move(arr)}};
}

inline std::string serialize_session(const Session& s) { return session_to_json(s).dump(); }

/// Reads a session JSONL file; blank lines are skipped.
inline std::vector<Session> read_sessions(const std::string& path, const TokenLimits& limits) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open session file '" + path + "'");
  std::vector<Session> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(parse_session_record(line, limits, line_no));
    } catch (const ValidationError& e) {
      const std::string msg = std::string(e.what()).substr(e.field().size() + 2);
      throw ValidationError(e.field(), msg + " (line " + std::to_string(line_no) + ")");
    }
  }
  return out;
}

inline void write_sessions(const std::string& path, const std::vector<Session>& sessions) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write session file '" + path + "'");
  for (const auto& s : sessions) out << serialize_session(s) << '\n';
  if (!out) throw Error("write failed for '" + path + "'");
}

}  // namespace ubm

#endif  // UBM_SESSION_HPP
