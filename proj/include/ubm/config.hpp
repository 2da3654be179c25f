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

#ifndef UBM_CONFIG_HPP
#define UBM_CONFIG_HPP

#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ubm/analysis.hpp"
#include "ubm/contrastive.hpp"
#include "ubm/encoders.hpp"
#include "ubm/synthetic.hpp"
#include "ubm/tasks.hpp"

namespace ubm {

/// Every setting of a run, with defaults for the full-size model. Sub-module
/// configs take their seed from `seed`.
struct RunConfig {
  std::uint64_t seed = 42;
  TokenLimits limits;
  std::size_t min_freq = 2;
  SynthConfig synth;
  std::size_t valid_sessions = 500;
  std::size_t test_sessions = 500;
  DeriveConfig derive;
  EncoderConfig model;
  PretrainConfig pretrain;
  FinetuneConfig finetune;
  std::string augmentation = "action_item_mask";
  std::vector<std::size_t> sparsity_edges{0, 5, 20};
  std::size_t analysis_samples = 1000;

  PretrainConfig pretrain_config() const {
    PretrainConfig c = pretrain;
    c.seed = seed;
    return c;
  }
  FinetuneConfig finetune_config(Task task) const {
    FinetuneConfig c = finetune;
    c.task = task;
    c.seed = seed;
    return c;
  }
  DeriveConfig derive_config() const {
    DeriveConfig c = derive;
    c.seed = seed;
    return c;
  }

  void validate() const {
    limits.validate();
    synth.validate(limits);
    model.validate();
    pretrain_config().validate();
    finetune.validate();
    parse_augmentation(augmentation);
    if (model.max_positions < limits.max_item_tokens + 3)
      throw ConfigError("model.max_positions", "must hold max_item_tokens plus [CLS], action and [SEP]");
  }

  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  /// Full key for a bare or qualified key; throws ConfigError when unknown or
  /// ambiguous.
  static std::string resolve_key(const std::string& key);
  static std::vector<std::string> keys();

  nlohmann::json to_json() const {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& k : keys()) j[k] = get(k);
    return j;
  }
  static RunConfig from_json(const nlohmann::json& j) {
    RunConfig c;
    for (const auto& [k, v] : j.items()) c.set(k, v.get<std::string>());
    return c;
  }

  /// Sectioned key = value text that parse() reads back.
  std::string to_text() const {
    std::string out, section;
    for (const auto& k : keys()) {
      const auto dot = k.find('.');
      const std::string s = k.substr(0, dot);
      if (s != section) out += (out.empty() ? "[" : "\n[") + s + "]\n", section = s;
      out += k.substr(dot + 1) + " = " + get(k) + "\n";
    }
    return out;
  }

  static RunConfig parse(const std::string& text) {
    RunConfig c;
    std::istringstream in(text);
    std::string line, section;
    std::size_t line_no = 0;
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      if (b == std::string::npos) return std::string();
      return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
    };
    while (std::getline(in, line)) {
      ++line_no;
      const auto hash = line.find('#');
      line = trim(hash == std::string::npos ? line : line.substr(0, hash));
      if (line.empty()) continue;
      if (line.front() == '[') {
        if (line.back() != ']') throw ParseError("unterminated section header", line_no);
        section = trim(line.substr(1, line.size() - 2));
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ParseError("expected key = value", line_no);
      const std::string key = trim(line.substr(0, eq));
      c.set(section.empty() ? key : section + "." + key, trim(line.substr(eq + 1)));
    }
    return c;
  }

  static RunConfig load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open config '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
  }

  /// UBM_SEED, when set, replaces the run seed.
  void apply_env() {
    if (const char* s = std::getenv("UBM_SEED"); s && *s) set("run.seed", s);
  }
};

namespace config_detail {

struct Field {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

inline std::string format_double(double v) {
  char buf[32];
  for (int prec = 1; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& s) {
  std::uint64_t v = 0;
  const auto* end = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || p != end || s.empty()) throw ConfigError(key, "expected a non-negative integer, got '" + s + "'");
  return v;
}

inline double parse_double(const std::string& key, const std::string& s) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size() || !std::isfinite(v))
    throw ConfigError(key, "expected a number, got '" + s + "'");
  return v;
}

inline bool parse_bool(const std::string& key, const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ConfigError(key, "expected true or false, got '" + s + "'");
}

template <typename Get>
Field size_field(std::string key, Get ref) {
  return {key, [ref](const RunConfig& c) { return std::to_string(ref(const_cast<RunConfig&>(c))); },
          [ref, key](RunConfig& c, const std::string& s) {
            ref(c) = static_cast<std::remove_reference_t<decltype(ref(c))>>(parse_uint(key, s));
          }};
}

template <typename Get>
Field double_field(std::string key, Get ref) {
  return {key, [ref](const RunConfig& c) { return format_double(ref(const_cast<RunConfig&>(c))); },
          [ref, key](RunConfig& c, const std::string& s) { ref(c) = parse_double(key, s); }};
}

template <typename Get>
Field bool_field(std::string key, Get ref) {
  return {key, [ref](const RunConfig& c) { return std::string(ref(const_cast<RunConfig&>(c)) ? "true" : "false"); },
          [ref, key](RunConfig& c, const std::string& s) { ref(c) = parse_bool(key, s); }};
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : s) {
    if (ch == ',') out.push_back(cur), cur.clear();
    else if (ch != ' ') cur += ch;
  }
  if (!cur.empty() || !out.empty()) out.push_back(cur);
  return out;
}

#define UBM_REF(expr) [](RunConfig& c) -> auto& { return c.expr; }

inline const std::vector<Field>& fields() {
  static const std::vector<Field> all = [] {
    std::vector<Field> f;
    f.push_back(size_field("run.seed", UBM_REF(seed)));
    f.push_back(size_field("data.max_title_tokens", UBM_REF(limits.max_title_tokens)));
    f.push_back(size_field("data.max_item_tokens", UBM_REF(limits.max_item_tokens)));
    f.push_back(size_field("data.max_session_len", UBM_REF(limits.max_session_len)));
    f.push_back(size_field("data.min_freq", UBM_REF(min_freq)));
    f.push_back(size_field("synth.corpus_seed", UBM_REF(synth.seed)));
    f.push_back(size_field("synth.num_sessions", UBM_REF(synth.num_sessions)));
    f.push_back(size_field("synth.valid_sessions", UBM_REF(valid_sessions)));
    f.push_back(size_field("synth.test_sessions", UBM_REF(test_sessions)));
    f.push_back(size_field("synth.num_intents", UBM_REF(synth.num_intents)));
    f.push_back(size_field("synth.vocab_size", UBM_REF(synth.vocab_size)));
    f.push_back(size_field("synth.items_per_intent", UBM_REF(synth.items_per_intent)));
    f.push_back(size_field("synth.min_length", UBM_REF(synth.min_length)));
    f.push_back(size_field("synth.max_length", UBM_REF(synth.max_length)));
    f.push_back(double_field("synth.geometric_p", UBM_REF(synth.geometric_p)));
    f.push_back({"synth.purchase_prob",
                 [](const RunConfig& c) {
                   std::string s;
                   for (double p : c.synth.purchase_prob) s += (s.empty() ? "" : ",") + format_double(p);
                   return s;
                 },
                 [](RunConfig& c, const std::string& s) {
                   c.synth.purchase_prob.clear();
                   for (const auto& x : split_list(s)) c.synth.purchase_prob.push_back(parse_double("synth.purchase_prob", x));
                 }});
    f.push_back(size_field("derive.min_input_length", UBM_REF(derive.min_input_length)));
    f.push_back(size_field("derive.rlp_max_cut", UBM_REF(derive.rlp_max_cut)));
    f.push_back(size_field("derive.nip_min_count", UBM_REF(derive.nip_min_count)));
    f.push_back(double_field("derive.pip_positive_fraction", UBM_REF(derive.pip_positive_fraction)));
    f.push_back(bool_field("derive.oversample", UBM_REF(derive.oversample)));
    f.push_back(size_field("model.num_layers", UBM_REF(model.num_layers)));
    f.push_back(size_field("model.hidden_size", UBM_REF(model.hidden_size)));
    f.push_back(size_field("model.num_heads", UBM_REF(model.num_heads)));
    f.push_back(size_field("model.ff_size", UBM_REF(model.ff_size)));
    f.push_back(double_field("model.dropout", UBM_REF(model.dropout_rate)));
    f.push_back(size_field("model.max_positions", UBM_REF(model.max_positions)));
    f.push_back(size_field("pretrain.stage1_batch", UBM_REF(pretrain.stage1_batch)));
    f.push_back(size_field("pretrain.stage2_batch", UBM_REF(pretrain.stage2_batch)));
    f.push_back(size_field("pretrain.stage1_epochs", UBM_REF(pretrain.stage1_epochs)));
    f.push_back(size_field("pretrain.stage2_epochs", UBM_REF(pretrain.stage2_epochs)));
    f.push_back(double_field("pretrain.peak_lr", UBM_REF(pretrain.peak_lr)));
    f.push_back(double_field("pretrain.warmup_fraction", UBM_REF(pretrain.warmup_fraction)));
    f.push_back(double_field("pretrain.temperature", UBM_REF(pretrain.temperature)));
    f.push_back({"pretrain.loss_mode", [](const RunConfig& c) { return loss_mode_name(c.pretrain.loss_mode); },
                 [](RunConfig& c, const std::string& s) {
                   try {
                     c.pretrain.loss_mode = parse_loss_mode(s);
                   } catch (const ValidationError& e) {
                     throw ConfigError("pretrain.loss_mode", "expected standard or exclude_positive, got '" + s + "'");
                   }
                 }});
    for (const char* which : {"item_mask", "session_mask"}) {
      const std::string w = which;
      auto policy = [w](RunConfig& c) -> MaskPolicy& { return w == "item_mask" ? c.pretrain.item_mask : c.pretrain.session_mask; };
      f.push_back(double_field("pretrain." + w + "_select_prob", [policy](RunConfig& c) -> auto& { return policy(c).select_prob; }));
      f.push_back(double_field("pretrain." + w + "_mask_frac", [policy](RunConfig& c) -> auto& { return policy(c).mask_frac; }));
      f.push_back(double_field("pretrain." + w + "_random_frac", [policy](RunConfig& c) -> auto& { return policy(c).random_frac; }));
      f.push_back(double_field("pretrain." + w + "_keep_frac", [policy](RunConfig& c) -> auto& { return policy(c).keep_frac; }));
      f.push_back(bool_field("pretrain." + w + "_protect_structural",
                             [policy](RunConfig& c) -> auto& { return policy(c).protect_structural; }));
    }
    f.push_back({"pretrain.reorder_max_distance",
                 [](const RunConfig& c) {
                   return c.pretrain.reorder_max_distance ? std::to_string(*c.pretrain.reorder_max_distance) : std::string("none");
                 },
                 [](RunConfig& c, const std::string& s) {
                   if (s == "none" || s.empty()) c.pretrain.reorder_max_distance.reset();
                   else c.pretrain.reorder_max_distance = parse_uint("pretrain.reorder_max_distance", s);
                 }});
    f.push_back(size_field("pretrain.grad_accum", UBM_REF(pretrain.grad_accum)));
    f.push_back(double_field("pretrain.adam_beta1", UBM_REF(pretrain.adam.beta1)));
    f.push_back(double_field("pretrain.adam_beta2", UBM_REF(pretrain.adam.beta2)));
    f.push_back(double_field("pretrain.adam_epsilon", UBM_REF(pretrain.adam.epsilon)));
    f.push_back(double_field("pretrain.weight_decay", UBM_REF(pretrain.adam.weight_decay)));
    f.push_back(size_field("finetune.batch_size", UBM_REF(finetune.batch_size)));
    f.push_back(double_field("finetune.lr", UBM_REF(finetune.lr)));
    f.push_back(size_field("finetune.epochs", UBM_REF(finetune.epochs)));
    f.push_back(size_field("finetune.pool_refresh_steps", UBM_REF(finetune.pool_refresh_steps)));
    f.push_back(double_field("finetune.threshold", UBM_REF(finetune.threshold)));
    f.push_back({"analysis.augmentation", [](const RunConfig& c) { return c.augmentation; },
                 [](RunConfig& c, const std::string& s) {
                   if (s != "action_item_mask" && s != "reorder")
                     throw ConfigError("analysis.augmentation", "expected action_item_mask or reorder, got '" + s + "'");
                   c.augmentation = s;
                 }});
    f.push_back({"analysis.sparsity_edges",
                 [](const RunConfig& c) {
                   std::string s;
                   for (auto e : c.sparsity_edges) s += (s.empty() ? "" : ",") + std::to_string(e);
                   return s;
                 },
                 [](RunConfig& c, const std::string& s) {
                   c.sparsity_edges.clear();
                   for (const auto& x : split_list(s)) c.sparsity_edges.push_back(parse_uint("analysis.sparsity_edges", x));
                 }});
    f.push_back(size_field("analysis.samples", UBM_REF(analysis_samples)));
    return f;
  }();
  return all;
}

#undef UBM_REF

}  // namespace config_detail

inline std::vector<std::string> RunConfig::keys() {
  std::vector<std::string> out;
  for (const auto& f : config_detail::fields()) out.push_back(f.key);
  return out;
}

inline std::string RunConfig::resolve_key(const std::string& key) {
  const auto& fs = config_detail::fields();
  if (key.find('.') != std::string::npos) {
    for (const auto& f : fs)
      if (f.key == key) return key;
    throw ConfigError(key, "unknown configuration key");
  }
  std::vector<std::string> hits;
  for (const auto& f : fs)
    if (f.key.substr(f.key.find('.') + 1) == key) hits.push_back(f.key);
  if (hits.empty()) throw ConfigError(key, "unknown configuration key");
  if (hits.size() > 1) {
    std::string all;
    for (const auto& h : hits) all += (all.empty() ? "" : ", ") + h;
    throw ConfigError(key, "ambiguous; qualify it as one of " + all);
  }
  return hits.front();
}

inline void RunConfig::set(const std::string& key, const std::string& value) {
  const std::string full = resolve_key(key);
  for (const auto& f : config_detail::fields())
    if (f.key == full) return f.set(*this, value);
}

inline std::string RunConfig::get(const std::string& key) const {
  const std::string full = resolve_key(key);
  for (const auto& f : config_detail::fields())
    if (f.key == full) return f.get(*this);
  return {};
}

}  // namespace ubm

#endif  // UBM_CONFIG_HPP
