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

#ifndef UBM_ENCODERS_HPP
#define UBM_ENCODERS_HPP

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "ubm/common.hpp"
#include "ubm/nn/graph.hpp"
#include "ubm/nn/tensor.hpp"
#include "ubm/rng.hpp"
#include "ubm/vocab.hpp"

namespace ubm {

using nn::Graph;
using nn::Parameter;
using nn::Tensor;
using nn::Var;

struct EncoderConfig {
  std::size_t num_layers = 4;
  std::size_t hidden_size = 256;
  std::size_t num_heads = 4;
  std::size_t ff_size = 1024;
  double dropout_rate = 0.10;
  /// Longest token sequence the interaction encoder accepts.
  std::size_t max_positions = 128;

  void validate() const {
    if (num_layers == 0 || hidden_size == 0 || num_heads == 0 || ff_size == 0 || max_positions == 0)
      throw ValidationError("model", "sizes must be positive");
    if (hidden_size % num_heads != 0) throw ValidationError("model.hidden_size", "must be divisible by num_heads");
    if (hidden_size % 2 != 0) throw ValidationError("model.hidden_size", "must be even for sinusoidal positions");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ValidationError("model.dropout", "must lie in [0, 1)");
  }
};

/// Post-LN transformer block weights.
template <typename T>
struct TransformerLayer {
  Parameter<T> wq, bq, wk, bk, wv, bv, wo, bo;
  Parameter<T> ln1_g, ln1_b;
  Parameter<T> w1, b1, w2, b2;
  Parameter<T> ln2_g, ln2_b;

  std::vector<Parameter<T>*> parameters() {
    return {&wq, &bq, &wk, &bk, &wv, &bv, &wo, &bo, &ln1_g, &ln1_b, &w1, &b1, &w2, &b2, &ln2_g, &ln2_b};
  }
};

namespace detail {

template <typename T>
Tensor<T> truncated_normal(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
  Tensor<T> t(rows, cols);
  for (auto& v : t.values()) v = T(stddev * rng.truncated_normal());
  return t;
}

template <typename T>
TransformerLayer<T> make_layer(const std::string& prefix, std::size_t d, std::size_t ff, Rng& rng) {
  constexpr double sd = 0.02;
  auto w = [&](const char* n, std::size_t r, std::size_t c) {
    return Parameter<T>(prefix + n, truncated_normal<T>(r, c, sd, rng));
  };
  auto z = [&](const char* n, std::size_t c) { return Parameter<T>(prefix + n, Tensor<T>(1, c)); };
  auto one = [&](const char* n, std::size_t c) { return Parameter<T>(prefix + n, Tensor<T>(1, c, T{1})); };
  TransformerLayer<T> L;
  L.wq = w("wq", d, d), L.bq = z("bq", d);
  L.wk = w("wk", d, d), L.bk = z("bk", d);
  L.wv = w("wv", d, d), L.bv = z("bv", d);
  L.wo = w("wo", d, d), L.bo = z("bo", d);
  L.ln1_g = one("ln1_g", d), L.ln1_b = z("ln1_b", d);
  L.w1 = w("w1", d, ff), L.b1 = z("b1", ff);
  L.w2 = w("w2", ff, d), L.b2 = z("b2", d);
  L.ln2_g = one("ln2_g", d), L.ln2_b = z("ln2_b", d);
  return L;
}

}  // namespace detail

/// All encoder weights: token and learned position embeddings plus the two
/// transformer stacks.
template <typename T>
struct UbmParams {
  EncoderConfig config;
  std::size_t vocab_size = 0;
  Parameter<T> token_embedding;
  Parameter<T> position_embedding;
  Parameter<T> embed_ln_g, embed_ln_b;
  std::vector<TransformerLayer<T>> interaction_layers;
  std::vector<TransformerLayer<T>> session_layers;

  /// Truncated normal (sd 0.02) weights, zero biases, unit layer-norm gains.
  static UbmParams init(std::size_t vocab_size, const EncoderConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    if (vocab_size == 0) throw ValidationError("vocab_size", "must be positive");
    Rng rng(seed, Purpose::init);
    const std::size_t d = cfg.hidden_size;
    UbmParams p;
    p.config = cfg;
    p.vocab_size = vocab_size;
    p.token_embedding = Parameter<T>("ie.token_embedding", detail::truncated_normal<T>(vocab_size, d, 0.02, rng));
    p.position_embedding =
        Parameter<T>("ie.position_embedding", detail::truncated_normal<T>(cfg.max_positions, d, 0.02, rng));
    p.embed_ln_g = Parameter<T>("ie.embed_ln_g", Tensor<T>(1, d, T{1}));
    p.embed_ln_b = Parameter<T>("ie.embed_ln_b", Tensor<T>(1, d));
    for (std::size_t i = 0; i < cfg.num_layers; ++i)
      p.interaction_layers.push_back(
          detail::make_layer<T>("ie.layer" + std::to_string(i) + ".", d, cfg.ff_size, rng));
    for (std::size_t i = 0; i < cfg.num_layers; ++i)
      p.session_layers.push_back(detail::make_layer<T>("se.layer" + std::to_string(i) + ".", d, cfg.ff_size, rng));
    return p;
  }

  std::vector<Parameter<T>*> interaction_parameters() {
    std::vector<Parameter<T>*> out{&token_embedding, &position_embedding, &embed_ln_g, &embed_ln_b};
    for (auto& L : interaction_layers)
      for (auto* q : L.parameters()) out.push_back(q);
    return out;
  }

  std::vector<Parameter<T>*> session_parameters() {
    std::vector<Parameter<T>*> out;
    for (auto& L : session_layers)
      for (auto* q : L.parameters()) out.push_back(q);
    return out;
  }

  std::vector<Parameter<T>*> parameters() {
    auto out = interaction_parameters();
    for (auto* q : session_parameters()) out.push_back(q);
    return out;
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    for (auto* p : parameters()) n += p->value.size();
    return n;
  }

  void zero_grad() {
    for (auto* p : parameters()) p->zero_grad();
  }

  /// Same weights in another scalar type (used by double-precision checks).
  template <typename U>
  UbmParams<U> cast() const {
    auto conv = [](const Parameter<T>& p) {
      std::vector<U> data(p.value.values().begin(), p.value.values().end());
      return Parameter<U>(p.name, Tensor<U>(p.value.shape(), std::move(data)));
    };
    auto conv_layer = [&](const TransformerLayer<T>& L) {
      TransformerLayer<U> o;
      o.wq = conv(L.wq), o.bq = conv(L.bq), o.wk = conv(L.wk), o.bk = conv(L.bk);
      o.wv = conv(L.wv), o.bv = conv(L.bv), o.wo = conv(L.wo), o.bo = conv(L.bo);
      o.ln1_g = conv(L.ln1_g), o.ln1_b = conv(L.ln1_b);
      o.w1 = conv(L.w1), o.b1 = conv(L.b1), o.w2 = conv(L.w2), o.b2 = conv(L.b2);
      o.ln2_g = conv(L.ln2_g), o.ln2_b = conv(L.ln2_b);
      return o;
    };
    UbmParams<U> out;
    out.config = config;
    out.vocab_size = vocab_size;
    out.token_embedding = conv(token_embedding);
    out.position_embedding = conv(position_embedding);
    out.embed_ln_g = conv(embed_ln_g);
    out.embed_ln_b = conv(embed_ln_b);
    for (const auto& L : interaction_layers) out.interaction_layers.push_back(conv_layer(L));
    for (const auto& L : session_layers) out.session_layers.push_back(conv_layer(L));
    return out;
  }
};

/// Closed-form count for a vocabulary size and configuration.
inline std::size_t expected_parameter_count(std::size_t vocab_size, const EncoderConfig& c) {
  const std::size_t d = c.hidden_size, f = c.ff_size;
  const std::size_t layer = 4 * (d * d + d) + 4 * d + (d * f + f) + (f * d + d);
  return vocab_size * d + c.max_positions * d + 2 * d + 2 * c.num_layers * layer;
}

/// Train mode enables dropout, drawing masks from `rng`.
struct ForwardContext {
  bool train = false;
  Rng* rng = nullptr;
};

/// Sinusoidal position table: (pos, 2i) = sin(pos / 10000^(2i/d)),
/// (pos, 2i+1) = cos of the same angle.
template <typename T = float>
Tensor<T> sinusoidal_positions(std::size_t length, std::size_t dim) {
  if (length == 0 || dim == 0) throw DimensionError("sinusoidal_positions: length and dim must be positive");
  if (dim % 2 != 0) throw DimensionError("sinusoidal_positions: dim must be even, got " + std::to_string(dim));
  Tensor<T> t(length, dim);
  for (std::size_t pos = 0; pos < length; ++pos)
    for (std::size_t i = 0; i < dim / 2; ++i) {
      const double angle = static_cast<double>(pos) / std::pow(10000.0, 2.0 * static_cast<double>(i) / dim);
      t(pos, 2 * i) = T(std::sin(angle));
      t(pos, 2 * i + 1) = T(std::cos(angle));
    }
  return t;
}

namespace detail {

template <typename T>
Var maybe_dropout(Graph<T>& g, Var x, double rate, const ForwardContext& ctx) {
  if (!ctx.train || rate == 0.0) return x;
  if (!ctx.rng) throw Error("train-mode forward requires an rng");
  return g.dropout(x, rate, *ctx.rng);
}

template <typename T>
Var linear(Graph<T>& g, Var x, Parameter<T>& w, Parameter<T>& b) {
  return g.add_bias(g.matmul(x, g.param(w)), g.param(b));
}

template <typename T>
Var transformer_layer(Graph<T>& g, TransformerLayer<T>& L, Var x, const std::vector<std::size_t>& offsets,
                      const EncoderConfig& cfg, const ForwardContext& ctx) {
  Var q = linear(g, x, L.wq, L.bq);
  Var k = linear(g, x, L.wk, L.bk);
  Var v = linear(g, x, L.wv, L.bv);
  Var a = g.segment_attention(q, k, v, offsets, cfg.num_heads);
  a = maybe_dropout(g, linear(g, a, L.wo, L.bo), cfg.dropout_rate, ctx);
  x = g.layer_norm(g.add(x, a), g.param(L.ln1_g), g.param(L.ln1_b));
  Var f = g.gelu(linear(g, x, L.w1, L.b1));
  f = maybe_dropout(g, linear(g, f, L.w2, L.b2), cfg.dropout_rate, ctx);
  return g.layer_norm(g.add(x, f), g.param(L.ln2_g), g.param(L.ln2_b));
}

inline std::vector<std::size_t> offsets_from_lengths(std::span<const std::size_t> lengths) {
  std::vector<std::size_t> off{0};
  for (auto n : lengths) off.push_back(off.back() + n);
  return off;
}

}  // namespace detail

struct InteractionOutput {
  Var tokens;                        // all token states, packed
  Var cls;                           // [n x d], one row per sequence
  std::vector<std::size_t> offsets;  // token row ranges per sequence
};

/// Runs the token-level encoder over each sequence independently (sequences
/// are packed, attention never crosses sequence boundaries) and pools the
/// state at each sequence's [CLS] position.
template <typename T>
InteractionOutput interaction_encode_full(Graph<T>& g, UbmParams<T>& p, std::span<const EncodedInteraction> batch,
                                          const ForwardContext& ctx) {
  if (batch.empty()) throw DimensionError("interaction_encode: empty batch");
  std::vector<TokenId> ids;
  std::vector<std::size_t> positions, lengths, cls_rows;
  for (const auto& enc : batch) {
    const auto& t = enc.token_ids;
    if (t.empty()) throw ValidationError("token_ids", "empty interaction sequence");
    if (t.size() > p.config.max_positions)
      throw ValidationError("token_ids", "sequence of " + std::to_string(t.size()) + " tokens exceeds max_positions " +
                                             std::to_string(p.config.max_positions));
    cls_rows.push_back(ids.size());
    for (std::size_t i = 0; i < t.size(); ++i) {
      if (t[i] < 0 || static_cast<std::size_t>(t[i]) >= p.vocab_size)
        throw ValidationError("token_ids", "id " + std::to_string(t[i]) + " outside vocabulary");
      ids.push_back(t[i]);
      positions.push_back(i);
    }
    lengths.push_back(t.size());
  }
  Var tok = g.gather_rows(g.param(p.token_embedding), std::span<const TokenId>(ids));
  Var pos = g.take_rows(g.param(p.position_embedding), positions);
  Var x = g.layer_norm(g.add(tok, pos), g.param(p.embed_ln_g), g.param(p.embed_ln_b));
  x = detail::maybe_dropout(g, x, p.config.dropout_rate, ctx);
  auto offsets = detail::offsets_from_lengths(lengths);
  for (auto& L : p.interaction_layers) x = detail::transformer_layer(g, L, x, offsets, p.config, ctx);
  Var cls = g.take_rows(x, cls_rows);
  return {x, cls, std::move(offsets)};
}

template <typename T>
Var interaction_encode(Graph<T>& g, UbmParams<T>& p, std::span<const EncodedInteraction> batch,
                       const ForwardContext& ctx) {
  return interaction_encode_full(g, p, batch, ctx).cls;
}

struct SessionOutput {
  Var outputs;   // o' rows, packed like the input
  Var sessions;  // h', one row per segment
};

/// Session-level encoder over packed interaction embeddings. Segment s covers
/// rows [offsets[s], offsets[s+1]); each gets sinusoidal positions from 0,
/// attends within itself and is mean-pooled.
template <typename T>
SessionOutput session_encode(Graph<T>& g, UbmParams<T>& p, Var interactions, const std::vector<std::size_t>& offsets,
                             const ForwardContext& ctx) {
  const std::size_t d = p.config.hidden_size;
  const auto& B = g.value(interactions);
  if (B.cols() != d) throw DimensionError("session_encode: expected width " + std::to_string(d) + ", got " + B.shape_str());
  if (offsets.size() < 2 || offsets.back() != B.rows())
    throw DimensionError("session_encode: offsets do not cover the input rows");
  std::size_t longest = 0;
  for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
    if (offsets[s + 1] <= offsets[s]) throw ValidationError("pad_mask", "session has no real interactions");
    longest = std::max(longest, offsets[s + 1] - offsets[s]);
  }
  const auto table = sinusoidal_positions<T>(longest, d);
  Tensor<T> pe(B.rows(), d);
  for (std::size_t s = 0; s + 1 < offsets.size(); ++s)
    for (std::size_t r = offsets[s]; r < offsets[s + 1]; ++r)
      std::copy_n(table.row(r - offsets[s]).data(), d, pe.row(r).data());
  Var x = g.add(interactions, g.constant(std::move(pe)));
  x = detail::maybe_dropout(g, x, p.config.dropout_rate, ctx);
  for (auto& L : p.session_layers) x = detail::transformer_layer(g, L, x, offsets, p.config, ctx);
  return {x, g.segment_mean(x, offsets)};
}

/// Single-session form: rows of `interactions` whose pad_mask entry is true
/// are encoded in order; the rest are ignored.
template <typename T>
SessionOutput session_encode(Graph<T>& g, UbmParams<T>& p, Var interactions, const std::vector<bool>& pad_mask,
                             const ForwardContext& ctx) {
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < pad_mask.size(); ++i)
    if (pad_mask[i]) rows.push_back(i);
  if (rows.empty()) throw ValidationError("pad_mask", "session has no real interactions");
  return session_encode(g, p, g.take_rows(interactions, rows), std::vector<std::size_t>{0, rows.size()}, ctx);
}

struct UbmOutput {
  Var interactions;                  // b' for every real interaction, packed per session
  std::vector<std::size_t> offsets;  // interaction rows per session
  Var outputs;                       // o'
  Var sessions;                      // h'
};

/// Full two-level forward over a batch of sessions. Padded slots never enter
/// either encoder.
template <typename T>
UbmOutput ubm_forward(Graph<T>& g, UbmParams<T>& p, std::span<const EncodedSession> batch, const ForwardContext& ctx) {
  std::vector<EncodedInteraction> flat;
  std::vector<std::size_t> lengths;
  for (const auto& s : batch) {
    if (s.pad_mask.size() != s.interactions.size()) throw ValidationError("pad_mask", "length mismatch");
    std::size_t n = 0;
    for (std::size_t i = 0; i < s.interactions.size(); ++i)
      if (s.pad_mask[i]) flat.push_back(s.interactions[i]), ++n;
    if (n == 0) throw ValidationError("pad_mask", "session '" + s.session_id + "' has no real interactions");
    lengths.push_back(n);
  }
  Var b = interaction_encode(g, p, std::span<const EncodedInteraction>(flat), ctx);
  auto offsets = detail::offsets_from_lengths(lengths);
  auto so = session_encode(g, p, b, offsets, ctx);
  return {b, std::move(offsets), so.outputs, so.sessions};
}

/// Items encoded without an action token, each treated as a length-1
/// session. `items` are outputs of tokenize_item.
template <typename T>
Var embed_items(Graph<T>& g, UbmParams<T>& p, std::span<const EncodedInteraction> items, const ForwardContext& ctx) {
  Var b = interaction_encode(g, p, items, ctx);
  std::vector<std::size_t> offsets(items.size() + 1);
  for (std::size_t i = 0; i <= items.size(); ++i) offsets[i] = i;
  return session_encode(g, p, b, offsets, ctx).sessions;
}

/// Eval-mode session embeddings, computed in chunks.
template <typename T>
Tensor<T> session_embeddings(UbmParams<T>& p, std::span<const EncodedSession> sessions, std::size_t chunk = 64) {
  Tensor<T> out(sessions.size(), p.config.hidden_size);
  for (std::size_t at = 0; at < sessions.size(); at += chunk) {
    const std::size_t n = std::min(chunk, sessions.size() - at);
    Graph<T> g;
    auto o = ubm_forward(g, p, sessions.subspan(at, n), ForwardContext{});
    const auto& H = g.value(o.sessions);
    std::copy(H.values().begin(), H.values().end(), out.data() + at * p.config.hidden_size);
  }
  return out;
}

/// Eval-mode item embeddings v_i.
template <typename T>
Tensor<T> item_embeddings(UbmParams<T>& p, std::span<const EncodedInteraction> items, std::size_t chunk = 128) {
  Tensor<T> out(items.size(), p.config.hidden_size);
  for (std::size_t at = 0; at < items.size(); at += chunk) {
    const std::size_t n = std::min(chunk, items.size() - at);
    Graph<T> g;
    Var v = embed_items(g, p, items.subspan(at, n), ForwardContext{});
    const auto& V = g.value(v);
    std::copy(V.values().begin(), V.values().end(), out.data() + at * p.config.hidden_size);
  }
  return out;
}

/// Embedding of a single item under the current weights (eval mode).
template <typename T>
Tensor<T> embed_item_as_session(const Item& item, UbmParams<T>& p, const Vocabulary& v, const TokenLimits& limits) {
  const EncodedInteraction enc = tokenize_item(item, v, limits);
  return item_embeddings(p, std::span<const EncodedInteraction>(&enc, 1));
}

}  // namespace ubm

#endif  // UBM_ENCODERS_HPP
