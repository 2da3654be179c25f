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

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include <gtest/gtest.h>

#include "ubm/checkpoint.hpp"
#include "ubm/config.hpp"

namespace ubm {
namespace {

TEST(RunConfig, DefaultsFollowPublishedSetup) {
  const RunConfig c;
  EXPECT_EQ(c.get("model.hidden_size"), "256");
  EXPECT_EQ(c.get("model.num_layers"), "4");
  EXPECT_EQ(c.get("model.dropout"), "0.1");
  EXPECT_EQ(c.get("pretrain.temperature"), "0.05");
  EXPECT_EQ(c.get("pretrain.peak_lr"), "3e-05");
  EXPECT_EQ(c.get("pretrain.stage1_batch"), "256");
  EXPECT_EQ(c.get("pretrain.stage2_batch"), "128");
  EXPECT_EQ(c.get("finetune.batch_size"), "32");
  EXPECT_EQ(c.get("finetune.epochs"), "30");
  EXPECT_NO_THROW(c.validate());
}

TEST(RunConfig, BareAndQualifiedKeys) {
  RunConfig c;
  c.set("temperature", "0.1");
  EXPECT_EQ(c.pretrain.temperature, 0.1);
  c.set("finetune.lr", "0.001");
  EXPECT_EQ(c.finetune.lr, 0.001);
  try {
    c.set("bogus", "1");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.key(), "bogus");
  }
  EXPECT_THROW(c.set("model.bogus", "1"), ConfigError);
  EXPECT_THROW(c.set("hidden_size", "abc"), ConfigError);
  EXPECT_THROW(c.set("loss_mode", "weird"), ConfigError);
}

TEST(RunConfig, AmbiguousBareKeyRejected) {
  RunConfig c;
  try {
    c.set("min_length", "3");
    SUCCEED();
  } catch (const ConfigError&) {
    FAIL() << "min_length is unique";
  }
  // item_mask and session_mask share suffixes only when qualified.
  EXPECT_NO_THROW(c.set("item_mask_select_prob", "0.15"));
}

TEST(RunConfig, TextRoundTrip) {
  RunConfig c;
  c.set("seed", "7");
  c.set("purchase_prob", "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1");
  c.set("reorder_max_distance", "3");
  c.set("sparsity_edges", "0,10,50");
  c.set("geometric_p", "0.123456789");
  const RunConfig back = RunConfig::parse(c.to_text());
  EXPECT_EQ(back.to_json(), c.to_json());
  EXPECT_EQ(back.synth.purchase_prob.size(), 10u);
  EXPECT_EQ(*back.pretrain.reorder_max_distance, 3u);
  EXPECT_EQ(RunConfig::from_json(c.to_json()).to_json(), c.to_json());
}

TEST(RunConfig, ParseErrors) {
  EXPECT_THROW(RunConfig::parse("[model\nhidden_size = 8\n"), ParseError);
  EXPECT_THROW(RunConfig::parse("[model]\nhidden_size 8\n"), ParseError);
  EXPECT_THROW(RunConfig::parse("[nosuch]\nx = 1\n"), ConfigError);
  const RunConfig c = RunConfig::parse("# comment\n[model]\nhidden_size = 64  # inline\n");
  EXPECT_EQ(c.model.hidden_size, 64u);
}

TEST(RunConfig, SeedFromEnvironment) {
  ::setenv("UBM_SEED", "1234", 1);
  RunConfig c;
  c.apply_env();
  ::unsetenv("UBM_SEED");
  EXPECT_EQ(c.seed, 1234u);
  EXPECT_EQ(c.pretrain_config().seed, 1234u);
  EXPECT_EQ(c.finetune_config(Task::rlp).seed, 1234u);
}

EncoderConfig tiny() {
  EncoderConfig c;
  c.num_layers = 1;
  c.hidden_size = 8;
  c.num_heads = 2;
  c.ff_size = 16;
  c.max_positions = 80;
  return c;
}

class CheckpointTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = std::filesystem::temp_directory_path() / ("ubm_ckpt_" + std::to_string(::getpid()));
    std::filesystem::create_directories(dir_);
  }
  void TearDown() override { std::filesystem::remove_all(dir_); }
  std::string path(const std::string& n) const { return (dir_ / n).string(); }
  std::filesystem::path dir_;
};

TEST_F(CheckpointTest, BitExactRoundTrip) {
  RunConfig cfg;
  cfg.model = tiny();
  cfg.set("temperature", "0.05");
  auto p = UbmParams<float>::init(50, cfg.model, 3);
  nn::AdamState<float> adam;
  for (auto* q : p.parameters())
    for (auto& g : q->grad.values()) g = 0.01f;
  nn::adam_step<float>(p.parameters(), adam, 1e-3);
  std::vector<NamedTensor> ts;
  append_params(ts, p.parameters());
  append_adam(ts, adam);
  Provenance prov;
  prov.stage = 1;
  prov.epoch = 1;
  prov.step = 1;
  save_checkpoint(path("a.ckpt"), make_header(cfg, "abc", 50, prov), ts);

  const auto header = read_checkpoint_header(path("a.ckpt"));
  EXPECT_EQ(header["config"]["pretrain.temperature"], "0.05");
  EXPECT_EQ(header["vocab_hash"], "abc");
  EXPECT_EQ(header["stage"], 1);
  EXPECT_TRUE(header.contains("created"));

  const auto c = load_checkpoint(path("a.ckpt"));
  auto q = restore_params(c);
  const auto pa = p.parameters(), qa = q.parameters();
  ASSERT_EQ(pa.size(), qa.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    ASSERT_EQ(pa[i]->value.size(), qa[i]->value.size());
    EXPECT_EQ(0, std::memcmp(pa[i]->value.data(), qa[i]->value.data(), pa[i]->value.size() * sizeof(float)));
  }
  const auto a2 = restore_adam(c, adam.t);
  EXPECT_EQ(a2.m.size(), adam.m.size());
  for (const auto& [k, v] : adam.m) EXPECT_EQ(a2.m.at(k), v);

  // Saving the restored tensors reproduces the tensor section exactly.
  std::vector<NamedTensor> ts2;
  append_params(ts2, q.parameters());
  append_adam(ts2, a2);
  save_checkpoint(path("b.ckpt"), c.header, ts2);
  EXPECT_EQ(load_checkpoint(path("b.ckpt")).header["tensor_hash"], c.header["tensor_hash"]);
  EXPECT_EQ(file_hash(path("a.ckpt")), file_hash(path("b.ckpt")));
}

TEST_F(CheckpointTest, CorruptionDetected) {
  RunConfig cfg;
  cfg.model = tiny();
  auto p = UbmParams<float>::init(20, cfg.model, 3);
  std::vector<NamedTensor> ts;
  append_params(ts, p.parameters());
  save_checkpoint(path("a.ckpt"), make_header(cfg, "h", 20, Provenance{}), ts);
  std::string bytes;
  {
    std::ifstream in(path("a.ckpt"), std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), {});
  }
  bytes[bytes.size() - 3] ^= 0x10;
  {
    std::ofstream out(path("bad.ckpt"), std::ios::binary);
    out << bytes;
  }
  EXPECT_THROW(load_checkpoint(path("bad.ckpt")), MismatchError);
  {
    std::ofstream out(path("short.ckpt"), std::ios::binary);
    out << bytes.substr(0, bytes.size() / 2);
  }
  EXPECT_THROW(load_checkpoint(path("short.ckpt")), Error);
  {
    std::ofstream out(path("junk.ckpt"), std::ios::binary);
    out << "not a checkpoint at all";
  }
  EXPECT_THROW(read_checkpoint_header(path("junk.ckpt")), Error);
}

TEST_F(CheckpointTest, VocabularyMismatchRefused) {
  nlohmann::json h{{"vocab_hash", "aaaa"}};
  EXPECT_NO_THROW(require_vocab(h, "aaaa"));
  try {
    require_vocab(h, "bbbb");
    FAIL();
  } catch (const MismatchError& e) {
    EXPECT_NE(std::string(e.what()).find("aaaa"), std::string::npos);
  }
}

TEST_F(CheckpointTest, HeadRoundTrip) {
  RunConfig cfg;
  cfg.model = tiny();
  auto head = TaskHead<float>::init(Task::pip, 8, 4);
  std::vector<NamedTensor> ts;
  auto p = UbmParams<float>::init(20, cfg.model, 3);
  append_params(ts, p.parameters());
  append_params(ts, head.parameters());
  Provenance prov;
  prov.kind = "finetune";
  prov.task = Task::pip;
  save_checkpoint(path("h.ckpt"), make_header(cfg, "h", 20, prov), ts);
  const auto c = load_checkpoint(path("h.ckpt"));
  EXPECT_EQ(c.header["task"], "pip");
  const auto back = restore_head(c, Task::pip, 8);
  for (std::size_t i = 0; i < head.weights.size(); ++i) EXPECT_EQ(back.weights[i].value, head.weights[i].value);
  EXPECT_THROW(restore_head(c, Task::rlp, 8), MismatchError);
}

}  // namespace
}  // namespace ubm
