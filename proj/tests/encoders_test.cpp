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

#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "test_support.hpp"
#include "ubm/encoders.hpp"
#include "ubm/vocab.hpp"

namespace ubm {
namespace {

constexpr std::size_t kVocab = 60;

EncoderConfig tiny_config() {
  EncoderConfig c;
  c.num_layers = 1;
  c.hidden_size = 8;
  c.num_heads = 2;
  c.ff_size = 16;
  c.max_positions = 16;
  return c;
}

EncodedInteraction seq(std::vector<TokenId> body) {
  EncodedInteraction e;
  e.token_ids.push_back(Vocabulary::cls);
  for (auto t : body) e.token_ids.push_back(t);
  e.token_ids.push_back(Vocabulary::sep);
  return e;
}

EncodedSession session(const std::vector<EncodedInteraction>& rows, std::size_t pads = 0) {
  EncodedSession s{"s", rows, std::vector<bool>(rows.size(), true)};
  for (std::size_t i = 0; i < pads; ++i) {
    s.interactions.push_back(EncodedInteraction{{Vocabulary::pad}});
    s.pad_mask.push_back(false);
  }
  return s;
}

double max_abs_diff(const nn::Tensor<float>& a, const nn::Tensor<float>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
  return m;
}

TEST(InteractionEncode, SingleClsTokenShape) {
  auto p = UbmParams<float>::init(kVocab, EncoderConfig{}, 1);
  Graph<float> g;
  const EncodedInteraction e{{Vocabulary::cls}};
  auto out = interaction_encode_full(g, p, std::span<const EncodedInteraction>(&e, 1), ForwardContext{});
  const auto& cls = g.value(out.cls);
  EXPECT_EQ(cls.rows(), 1u);
  EXPECT_EQ(cls.cols(), 256u);
  EXPECT_EQ(cls, g.value(out.tokens));
}

TEST(InteractionEncode, IdenticalSequencesIdenticalEmbeddings) {
  auto p = UbmParams<float>::init(kVocab, tiny_config(), 2);
  std::vector<EncodedInteraction> batch{seq({20, 21, 22}), seq({30}), seq({20, 21, 22})};
  Graph<float> g;
  const auto& b = g.value(interaction_encode(g, p, std::span<const EncodedInteraction>(batch), ForwardContext{}));
  for (std::size_t c = 0; c < b.cols(); ++c) EXPECT_EQ(b(0, c), b(2, c));
}

TEST(InteractionEncode, TrainModeAppliesDropout) {
  auto p = UbmParams<float>::init(kVocab, tiny_config(), 3);
  const auto e = seq({20, 21, 22});
  Rng r1(1, Purpose::dropout, 0), r2(1, Purpose::dropout, 1);
  Graph<float> g;
  const auto a = g.value(interaction_encode(g, p, std::span<const EncodedInteraction>(&e, 1), ForwardContext{true, &r1}));
  const auto& b = g.value(interaction_encode(g, p, std::span<const EncodedInteraction>(&e, 1), ForwardContext{true, &r2}));
  EXPECT_GT(max_abs_diff(a, b), 1e-6);
}

TEST(InteractionEncode, PoolingReadsOnlyCls) {
  auto p = UbmParams<float>::init(kVocab, tiny_config(), 4);
  std::vector<EncodedInteraction> batch{seq({20, 21}), seq({22, 23, 24, 25})};
  Graph<float> g;
  auto out = interaction_encode_full(g, p, std::span<const EncodedInteraction>(batch), ForwardContext{});
  const auto& tokens = g.value(out.tokens);
  const auto& cls = g.value(out.cls);
  for (std::size_t s = 0; s < batch.size(); ++s)
    for (std::size_t c = 0; c < cls.cols(); ++c) EXPECT_EQ(cls(s, c), tokens(out.offsets[s], c));
}

TEST(InteractionEncode, RejectsLongSequencesAndBadIds) {
  auto p = UbmParams<float>::init(kVocab, tiny_config(), 5);
  Graph<float> g;
  EncodedInteraction too_long{std::vector<TokenId>(17, 20)};
  EXPECT_THROW(interaction_encode(g, p, std::span<const EncodedInteraction>(&too_long, 1), ForwardContext{}),
               ValidationError);
  const auto bad = seq({static_cast<TokenId>(kVocab)});
  EXPECT_THROW(interaction_encode(g, p, std::span<const EncodedInteraction>(&bad, 1), ForwardContext{}),
               ValidationError);
}

TEST(SinusoidalPositions, ClosedForm) {
  const auto t = sinusoidal_positions<double>(50, 16);
  for (std::size_t i = 0; i < 8; ++i) {
    EXPECT_EQ(t(0, 2 * i), 0.0);
    EXPECT_EQ(t(0, 2 * i + 1), 1.0);
  }
  EXPECT_NEAR(t(1, 0), 0.8415, 1e-4);
  EXPECT_NEAR(t(7, 5), std::cos(7 / std::pow(10000.0, 4.0 / 16)), 1e-12);
  for (double v : t.values()) EXPECT_LE(std::abs(v), 1.0);
  EXPECT_THROW(sinusoidal_positions<double>(3, 5), DimensionError);
}

TEST(SessionEncode, SingleInteractionPoolsToItself) {
  auto p = UbmParams<float>::init(kVocab, tiny_config(), 6);
  Graph<float> g;
  const EncodedSession s = session({seq({20, 21})});
  auto o = ubm_forward(g, p, std::span<const EncodedSession>(&s, 1), ForwardContext{});
  EXPECT_EQ(g.value(o.sessions), g.value(o.outputs));
}

TEST(SessionEncode, MeanPoolingOverRealRows) {
  auto p = UbmParams<float>::init(kVocab, tiny_config(), 7);
  Graph<float> g;
  const EncodedSession s = session({seq({20}), seq({21, 22}), seq({23})}, 2);
  auto o = ubm_forward(g, p, std::span<const EncodedSession>(&s, 1), ForwardContext{});
  const auto& O = g.value(o.outputs);
  const auto& H = g.value(o.sessions);
  ASSERT_EQ(O.rows(), 3u);
  for (std::size_t c = 0; c < H.cols(); ++c)
    EXPECT_NEAR(H(0, c), (O(0, c) + O(1, c) + O(2, c)) / 3.0, 1e-6);
}

TEST(SessionEncode, PaddingInvariance) {
  auto p = UbmParams<float>::init(kVocab, tiny_config(), 8);
  const std::vector<EncodedInteraction> rows{seq({20, 21}), seq({22}), seq({23, 24, 25})};
  const std::vector<EncodedSession> plain{session(rows)}, padded{session(rows, 5)};
  Graph<float> g;
  auto a = ubm_forward(g, p, std::span<const EncodedSession>(plain), ForwardContext{});
  auto b = ubm_forward(g, p, std::span<const EncodedSession>(padded), ForwardContext{});
  EXPECT_LT(max_abs_diff(g.value(a.sessions), g.value(b.sessions)), 1e-6);
  EXPECT_LT(max_abs_diff(g.value(a.interactions), g.value(b.interactions)), 1e-6);
}

TEST(SessionEncode, BatchingMatchesSingleSessions) {
  auto p = UbmParams<float>::init(kVocab, tiny_config(), 9);
  const std::vector<EncodedSession> batch{session({seq({20}), seq({21})}, 1), session({seq({22, 23})}, 3),
                                          session({seq({24}), seq({25}), seq({26})})};
  Graph<float> g;
  const auto& all = g.value(ubm_forward(g, p, std::span<const EncodedSession>(batch), ForwardContext{}).sessions);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    Graph<float> h;
    const auto& one = h.value(ubm_forward(h, p, std::span<const EncodedSession>(&batch[i], 1), ForwardContext{}).sessions);
    for (std::size_t c = 0; c < one.cols(); ++c) EXPECT_NEAR(all(i, c), one(0, c), 1e-6);
  }
}

TEST(SessionEncode, OrderMatters) {
  auto p = UbmParams<float>::init(kVocab, tiny_config(), 10);
  const std::vector<EncodedSession> batch{session({seq({20, 21}), seq({30}), seq({40, 41})}),
                                          session({seq({40, 41}), seq({30}), seq({20, 21})})};
  Graph<float> g;
  const auto& H = g.value(ubm_forward(g, p, std::span<const EncodedSession>(batch), ForwardContext{}).sessions);
  double diff = 0;
  for (std::size_t c = 0; c < H.cols(); ++c) diff = std::max(diff, std::abs(double(H(0, c)) - double(H(1, c))));
  EXPECT_GT(diff, 1e-6);
}

TEST(SessionEncode, EmptySessionIsAnError) {
  auto p = UbmParams<float>::init(kVocab, tiny_config(), 11);
  Graph<float> g;
  const EncodedSession s = session({}, 2);
  EXPECT_THROW(ubm_forward(g, p, std::span<const EncodedSession>(&s, 1), ForwardContext{}), ValidationError);
  Var b = g.constant(nn::Tensor<float>(2, 8));
  EXPECT_THROW(session_encode(g, p, b, std::vector<bool>{false, false}, ForwardContext{}), ValidationError);
}

TEST(UbmForward, DefaultDimensionsAndDeterminism) {
  auto p = UbmParams<float>::init(kVocab, EncoderConfig{}, 12);
  const EncodedSession s = session({seq({20, 21}), seq({22})});
  Graph<float> g;
  auto a = ubm_forward(g, p, std::span<const EncodedSession>(&s, 1), ForwardContext{});
  auto b = ubm_forward(g, p, std::span<const EncodedSession>(&s, 1), ForwardContext{});
  EXPECT_EQ(g.value(a.interactions).cols(), 256u);
  EXPECT_EQ(g.value(a.sessions).cols(), 256u);
  EXPECT_EQ(g.value(a.sessions), g.value(b.sessions));
}

TEST(UbmForward, GradientReachesUsedTokenEmbeddings) {
  auto p = UbmParams<float>::init(kVocab, tiny_config(), 13);
  const EncodedSession s = session({seq({20, 21}), seq({22})});
  Graph<float> g;
  auto o = ubm_forward(g, p, std::span<const EncodedSession>(&s, 1), ForwardContext{});
  nn::Tensor<float> w(1, 8);
  for (std::size_t c = 0; c < 8; ++c) w[c] = float(c + 1);
  g.backward(g.sum(g.mul(o.sessions, g.constant(w))));
  auto row_norm = [&](TokenId id) {
    double s2 = 0;
    for (float v : p.token_embedding.grad.row(id)) s2 += double(v) * v;
    return s2;
  };
  for (TokenId id : {Vocabulary::cls, Vocabulary::sep, TokenId{20}, TokenId{21}, TokenId{22}}) EXPECT_GT(row_norm(id), 0) << id;
  EXPECT_EQ(row_norm(30), 0);
  for (auto* q : p.session_parameters()) {
    double s2 = 0;
    for (float v : q->grad.values()) s2 += std::abs(v);
    if (q->name.find("ln") == std::string::npos) EXPECT_GT(s2, 0) << q->name;
  }
}

TEST(UbmForward, GradientsMatchFiniteDifferences) {
  auto p = UbmParams<double>::init(kVocab, tiny_config(), 14);
  const std::vector<EncodedSession> batch{session({seq({20, 21}), seq({22})}, 1), session({seq({23, 24, 25})})};
  Rng wr(5, Purpose::test);
  const auto w = testing::random_tensor(2, 8, wr);
  auto loss = [&](Graph<double>& g) {
    Rng drop(3, Purpose::dropout);
    auto o = ubm_forward(g, p, std::span<const EncodedSession>(batch), ForwardContext{true, &drop});
    return g.sum(g.mul(o.sessions, g.constant(w)));
  };
  const auto r = testing::gradcheck(p.parameters(), loss, 1e-3, 12);
  EXPECT_GT(r.checked, 100u);
  EXPECT_LT(r.max_rel_error, 1e-3);
}

TEST(EmbedItem, ShapeDeterminismAndNoActionToken) {
  const Item item{"red shoes", "footwear", {{"size", "large"}}, ""};
  std::vector<Session> corpus{Session{"a", {Interaction{Action::view, item}, Interaction{Action::view, item}}}};
  const Vocabulary v = build_vocab(corpus, 1);
  auto p = UbmParams<float>::init(v.size(), EncoderConfig{}, 15);
  const TokenLimits limits;
  const auto a = embed_item_as_session(item, p, v, limits);
  const auto b = embed_item_as_session(item, p, v, limits);
  EXPECT_EQ(a.cols(), 256u);
  EXPECT_EQ(a, b);
  const EncodedSession with_view{"x", {tokenize_interaction(Interaction{Action::view, item}, v, limits)}, {true}};
  const auto c = session_embeddings(p, std::span<const EncodedSession>(&with_view, 1));
  EXPECT_GT(max_abs_diff(a, c), 1e-6);
}

TEST(UbmParams, ParameterCount) {
  auto p = UbmParams<float>::init(1000, EncoderConfig{}, 16);
  EXPECT_EQ(p.parameter_count(), expected_parameter_count(1000, EncoderConfig{}));
  // 1000*256 + 128*256 + 2*256 + 8 * (263168 + 1024 + 263168 + 262400)
  EXPECT_EQ(p.parameter_count(), 6607360u);
  auto q = UbmParams<float>::init(kVocab, tiny_config(), 16);
  EXPECT_EQ(q.parameter_count(), expected_parameter_count(kVocab, tiny_config()));
}

TEST(UbmParams, InitStatistics) {
  auto p = UbmParams<float>::init(1000, EncoderConfig{}, 17);
  double s = 0, s2 = 0, mx = 0;
  for (float v : p.token_embedding.value.values()) s += v, s2 += double(v) * v, mx = std::max(mx, double(std::abs(v)));
  const double n = static_cast<double>(p.token_embedding.value.size());
  EXPECT_NEAR(s / n, 0.0, 1e-3);
  // A normal truncated at two standard deviations has sd 0.02 * 0.8796.
  EXPECT_NEAR(std::sqrt(s2 / n), 0.02 * 0.8796, 5e-4);
  EXPECT_LE(mx, 0.04 + 1e-7);
  for (float v : p.interaction_layers[0].ln1_g.value.values()) EXPECT_EQ(v, 1.0f);
  for (float v : p.interaction_layers[0].bq.value.values()) EXPECT_EQ(v, 0.0f);
}

TEST(EncoderConfig, Validation) {
  EncoderConfig c;
  c.num_heads = 3;
  EXPECT_THROW(c.validate(), ValidationError);
  c = EncoderConfig{};
  c.dropout_rate = 1.0;
  EXPECT_THROW(c.validate(), ValidationError);
}

}  // namespace
}  // namespace ubm
