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

// Acceptance suite: one PASS/FAIL line per criterion, exit status 0 only when
// every criterion passes.

#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "test_support.hpp"
#include "ubm/analysis.hpp"
#include "ubm/checkpoint.hpp"
#include "ubm/contrastive.hpp"
#include "ubm/synthetic.hpp"
#include "ubm/tasks.hpp"

namespace ubm {
namespace {

namespace fs = std::filesystem;
using nn::Graph;
using nn::Tensor;
using nn::Var;
using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

struct Outcome {
  bool pass = true;
  std::vector<std::string> notes;

  void check(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      notes.push_back("failed: " + what);
    }
  }
  void note(const std::string& s) { notes.push_back(s); }
};

int failures = 0;

void report(int id, const std::string& name, const Outcome& o) {
  std::printf("%s  [%d] %s\n", o.pass ? "PASS" : "FAIL", id, name.c_str());
  for (const auto& n : o.notes) std::printf("        %s\n", n.c_str());
  std::fflush(stdout);
  if (!o.pass) ++failures;
}

// --- 1. gradient integrity -------------------------------------------------------

EncoderConfig grad_model() {
  EncoderConfig c;
  c.num_layers = 1;
  c.hidden_size = 8;
  c.num_heads = 2;
  c.ff_size = 16;
  c.max_positions = 80;
  return c;
}

Outcome gradient_integrity() {
  Outcome o;
  const auto t0 = Clock::now();
  double worst_op = 0, worst_s1 = 0, worst_s2 = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    for (const auto& op : testing::op_cases()) {
      Rng rng(seed, Purpose::test, 1);
      std::vector<nn::Parameter<double>> params;
      for (std::size_t i = 0; i < op.shapes.size(); ++i)
        params.emplace_back("in" + std::to_string(i),
                            testing::random_tensor(op.shapes[i].first, op.shapes[i].second, rng, op.input_scale));
      std::vector<nn::Parameter<double>*> ptrs;
      for (auto& p : params) ptrs.push_back(&p);
      const auto r = testing::gradcheck(ptrs, [&](Graph<double>& g) {
        std::vector<Var> vars;
        for (auto& p : params) vars.push_back(g.param(p));
        Var y = op.build(g, vars, seed);
        return g.value(y).size() == 1 ? y : testing::weighted(g, y, seed);
      });
      worst_op = std::max(worst_op, r.max_rel_error);
      o.check(r.max_rel_error < 1e-3, std::string(op.name) + " seed " + std::to_string(seed));
    }
    SynthConfig sc;
    sc.num_sessions = 20;
    sc.vocab_size = 120;
    sc.seed = seed + 1;
    const auto corpus = generate_corpus(sc);
    const auto vocab = build_vocab(corpus);
    const auto data = PretrainData::from(corpus, vocab, TokenLimits{});
    auto p = UbmParams<double>::init(vocab.size(), grad_model(), seed);
    PretrainConfig cfg;
    cfg.seed = seed;
    const std::vector<std::size_t> ids{0, 1, 2};
    std::vector<std::pair<EncodedInteraction, EncodedInteraction>> pairs(data.item_pairs.begin(),
                                                                         data.item_pairs.begin() + 3);
    const auto r1 = testing::gradcheck(
        p.interaction_parameters(),
        [&](Graph<double>& g) {
          Rng drop(seed, Purpose::dropout, 1);
          return stage1_step<double>(g, p, pairs, ids, 0, cfg, data.mask_vocab, drop).total;
        },
        1e-5, 8);
    std::vector<EncodedSession> sess(data.sessions.begin(), data.sessions.begin() + 3);
    const auto r2 = testing::gradcheck(
        p.parameters(),
        [&](Graph<double>& g) {
          Rng drop(seed, Purpose::dropout, 2);
          return stage2_step<double>(g, p, sess, ids, 0, cfg, data.mask_vocab, drop).total;
        },
        1e-5, 8);
    worst_s1 = std::max(worst_s1, r1.max_rel_error);
    worst_s2 = std::max(worst_s2, r2.max_rel_error);
    o.check(r1.max_rel_error < 1e-3, "stage-1 loss seed " + std::to_string(seed));
    o.check(r2.max_rel_error < 1e-3, "stage-2 loss seed " + std::to_string(seed));
  }
  const double t = seconds_since(t0);
  o.check(t < 120, "runtime under 2 min");
  o.note("max relative error: ops " + fmt("%.2e", worst_op) + ", l1+l2 " + fmt("%.2e", worst_s1) + ", l3+l4 " +
         fmt("%.2e", worst_s2) + " (limit 1e-3, 10 seeds)");
  o.note("runtime " + fmt("%.1f", t) + " s (limit 120 s)");
  return o;
}

// --- 2. closed-form losses -----------------------------------------------------------

Tensor<double> constant_rows(std::size_t n, std::size_t d, double v) {
  Tensor<double> t(n, d);
  for (auto& x : t.values()) x = v;
  return t;
}

Outcome closed_forms() {
  Outcome o;
  double worst = 0;
  for (std::size_t n : {2, 3, 8, 32, 128}) {
    const auto e = constant_rows(n, 5, 0.7);
    const double want = static_cast<double>(n) * std::log(static_cast<double>(n));
    const double got = info_nce(e, e, 0.05, LossMode::standard);
    worst = std::max(worst, std::abs(got - want));
    Graph<double> g;
    const auto twice = constant_rows(2 * n, 5, -1.3);
    const auto l = stage1_loss(g, g.constant(twice), g.constant(twice), 0.05, LossMode::standard);
    const double two_n = 2.0 * static_cast<double>(n);
    worst = std::max(worst, std::abs(g.value(l.first)[0] - two_n * std::log(two_n)));
    worst = std::max(worst, std::abs(g.value(l.second)[0] - want));
    const auto thrice = constant_rows(3 * n, 5, 0.2);
    const auto l2 = stage2_loss(g, g.constant(thrice), 0.05, LossMode::standard);
    worst = std::max(worst, std::abs(g.value(l2.first)[0] - want));
    worst = std::max(worst, std::abs(g.value(l2.second)[0] - want));
  }
  o.check(worst < 1e-6, "uniform-similarity InfoNCE equals N log N");
  o.note("uniform-similarity InfoNCE |loss - N log N| max " + fmt("%.2e", worst) + " (limit 1e-6)");

  Graph<double> g;
  const std::vector<double> half(7, 0.5), labels{1, 0, 1, 1, 0, 0, 1};
  const double pip = g.value(pip_loss(g, g.constant(Tensor<double>::from_rows(7, 1, half)), std::span<const double>(labels)))[0];
  o.check(std::abs(pip - std::log(2.0)) < 1e-12, "PIP loss at 0.5 is log 2");
  const std::size_t m = 37;
  const std::vector<std::size_t> targets{0, 5, 36};
  const double nip = g.value(nip_loss(g, g.constant(constant_rows(3, m, 2.5)), std::span<const std::size_t>(targets)))[0];
  o.check(std::abs(nip - std::log(static_cast<double>(m))) < 1e-12, "NIP loss at uniform scores is log m");
  const auto same = Tensor<double>::from_rows(3, 2, {0.6, 0.8, 0.6, 0.8, 0.6, 0.8});
  const double al = alignment_loss(same, same), un = uniformity_loss(same);
  o.check(al == 0.0, "alignment 0 for identical embeddings");
  o.check(std::abs(un) < 1e-12, "uniformity 0 for identical embeddings");
  const double anti = uniformity_loss(Tensor<double>::from_rows(2, 2, {1, 0, -1, 0}));
  o.check(std::abs(anti + 8.0) < 1e-12, "antipodal uniformity -8");
  o.note("PIP " + fmt("%.12f", pip) + " (log 2), NIP " + fmt("%.12f", nip) + " (log 37), alignment " + fmt("%g", al) +
         ", uniformity " + fmt("%g", un) + ", antipodal uniformity " + fmt("%.12f", anti));
  return o;
}

// --- 3. metric oracles -------------------------------------------------------------------

double brute_auroc(const std::vector<double>& s, const std::vector<double>& y) {
  double wins = 0, pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (y[i] == 1 && y[j] == 0) {
        pairs += 1;
        wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
      }
  return wins / pairs;
}

Outcome metric_oracles() {
  Outcome o;
  std::size_t mismatches = 0;
  double auroc_err = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed, Purpose::test, 3);
    const std::size_t n = 2 + rng.below(40);
    std::vector<double> s(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = static_cast<double>(rng.below(12)) / 11.0;
      y[i] = static_cast<double>(rng.below(2));
    }
    y[0] = 0, y[1] = 1;
    const auto m = evaluate_pip(s, y);
    std::int64_t tp = 0, fp = 0, tn = 0, fn = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const bool p = s[i] >= 0.5;
      tp += p && y[i] == 1, fp += p && y[i] == 0, tn += !p && y[i] == 0, fn += !p && y[i] == 1;
    }
    const auto N = static_cast<std::int64_t>(n);
    const double f1 = (2 * tp + fp + fn) ? static_cast<double>(2 * tp) / static_cast<double>(2 * tp + fp + fn) : 0.0;
    const std::int64_t chance = (tp + fp) * (tp + fn) + (fn + tn) * (fp + tn);
    const double kappa =
        N * N == chance ? 0.0 : static_cast<double>(N * (tp + tn) - chance) / static_cast<double>(N * N - chance);
    mismatches += m.f1 != f1;
    mismatches += m.kappa != kappa;
    auroc_err = std::max(auroc_err, std::abs(*m.auroc - brute_auroc(s, y)));

    const std::size_t pool = 2 + rng.below(40), examples = 1 + rng.below(25);
    std::vector<std::size_t> ranks;
    double hit[2] = {0, 0}, mrr[2] = {0, 0};
    for (std::size_t e = 0; e < examples; ++e) {
      std::vector<double> scores(pool);
      for (auto& v : scores) v = static_cast<double>(rng.below(6));
      const std::size_t label = rng.below(pool);
      ranks.push_back(label_rank(scores, label));
      std::size_t pos = 1;
      for (std::size_t j = 0; j < pool; ++j)
        if (scores[j] > scores[label] || (scores[j] == scores[label] && j < label)) ++pos;
      mismatches += pos != ranks.back();
      for (int k = 0; k < 2; ++k)
        if (pos <= (k ? 20u : 10u)) hit[k] += 1, mrr[k] += 1.0 / static_cast<double>(pos);
    }
    for (int k = 0; k < 2; ++k) {
      const auto nm = evaluate_nip(ranks, k ? 20 : 10);
      mismatches += nm.hit != hit[k] / static_cast<double>(examples);
      mismatches += nm.mrr != mrr[k] / static_cast<double>(examples);
    }
  }
  o.check(mismatches == 0, "F1/kappa/hit@K/MRR@K exact agreement");
  o.check(auroc_err <= 1e-9, "AUROC within 1e-9");
  o.note("100 random instances: " + std::to_string(mismatches) + " exact mismatches, AUROC max error " +
         fmt("%.1e", auroc_err));

  // Constant predictor at the mean training label on a large synthetic RLP split.
  SynthConfig sc;
  sc.num_sessions = 20000;
  const auto train = derive_task_dataset(generate_corpus(sc, Split::train), Task::rlp, Split::train, DeriveConfig{});
  const auto test = derive_task_dataset(generate_corpus(sc, Split::test), Task::rlp, Split::test, DeriveConfig{});
  double mean = 0;
  for (const auto& e : train.examples) mean += e.label;
  mean /= static_cast<double>(train.size());
  std::vector<double> y, pred(test.size(), mean);
  for (const auto& e : test.examples) y.push_back(e.label);
  const auto r = evaluate_rlp(pred, y);
  o.check(r.r2 && std::abs(*r.r2) < 1e-3, "constant-predictor R^2 within 1e-3 of 0");
  o.note("constant predictor (train mean " + fmt("%.4f", mean) + ", " + std::to_string(train.size()) + " train / " +
         std::to_string(test.size()) + " test examples): R^2 = " + fmt("%.3e", r.r2.value_or(NAN)));
  return o;
}

// --- 4. augmentation statistics ------------------------------------------------------------

constexpr double kZ99 = 2.5758;

bool within_ci(std::size_t hits, std::size_t n, double p, std::string* line) {
  const double half = kZ99 * std::sqrt(p * (1 - p) / static_cast<double>(n));
  const double rate = static_cast<double>(hits) / static_cast<double>(n);
  *line += fmt("%.4f", rate) + " (expect " + fmt("%.4f", p) + " +/- " + fmt("%.4f", half) + ") ";
  return std::abs(rate - p) <= half;
}

EncodedInteraction text_row(std::size_t words) {
  EncodedInteraction e;
  e.token_ids = {Vocabulary::cls, Vocabulary::view, Vocabulary::title};
  for (std::size_t i = 0; i < words; ++i) e.token_ids.push_back(static_cast<TokenId>(11 + i % 900));
  e.token_ids.push_back(Vocabulary::sep);
  return e;
}

EncodedSession view_session(std::size_t real) {
  EncodedSession s;
  s.session_id = "s";
  for (std::size_t i = 0; i < real; ++i) {
    s.interactions.push_back(EncodedInteraction{{Vocabulary::cls, Vocabulary::view, Vocabulary::title,
                                                 static_cast<TokenId>(20 + i), Vocabulary::sep}});
    s.pad_mask.push_back(true);
  }
  return s;
}

Outcome augmentation_statistics() {
  Outcome o;
  const MaskVocab mv{11, 1000};
  const double k = static_cast<double>(mv.vocab_size - mv.first_corpus_id);
  std::string line;
  {
    MaskPolicy p;  // default: 20% selected, then 50/25/25
    std::size_t n = 0, masked = 0, replaced = 0, changed_or_masked = 0;
    for (std::uint64_t t = 0; t < 100; ++t) {
      const auto e = text_row(1000);
      Rng rng(21, Purpose::test, t);
      const auto m = item_token_mask(e, p, mv, rng);
      for (std::size_t i = 3; i + 1 < e.token_ids.size(); ++i) {
        ++n;
        masked += m.token_ids[i] == Vocabulary::mask;
        replaced += m.token_ids[i] != Vocabulary::mask && m.token_ids[i] != e.token_ids[i];
        changed_or_masked += m.token_ids[i] != e.token_ids[i];
      }
    }
    line = "item mask over " + std::to_string(n) + " tokens: [MASK] ";
    o.check(within_ci(masked, n, 0.2 * 0.5, &line), "item [MASK] rate");
    line += "random ";
    o.check(within_ci(replaced, n, 0.2 * 0.25 * (1 - 1 / k), &line), "item random-replacement rate");
    o.note(line);
  }
  {
    MaskPolicy p;
    p.mask_frac = 1, p.random_frac = 0, p.keep_frac = 0;
    std::size_t n = 0, hits = 0;
    for (std::uint64_t t = 0; t < 100; ++t) {
      const auto e = text_row(1000);
      Rng rng(22, Purpose::test, t);
      const auto m = item_token_mask(e, p, mv, rng);
      for (std::size_t i = 3; i + 1 < e.token_ids.size(); ++i) ++n, hits += m.token_ids[i] == Vocabulary::mask;
    }
    line = "selection rate ";
    o.check(within_ci(hits, n, 0.2, &line), "selection rate");
    o.note(line);
  }
  {
    std::size_t n = 0, masked = 0, replaced = 0;
    for (std::uint64_t t = 0; t < 3200; ++t) {
      const auto s = view_session(32);
      Rng rng(23, Purpose::test, t);
      const auto m = action_item_token_mask(s, MaskPolicy{}, mv, rng);
      for (std::size_t i = 0; i < 32; ++i) {
        ++n;
        const TokenId a = m.interactions[i].token_ids[1];
        masked += a == Vocabulary::mask;
        replaced += a != Vocabulary::mask && a != Vocabulary::view;
      }
    }
    line = "action tokens over " + std::to_string(n) + ": [MASK] ";
    o.check(within_ci(masked, n, 0.10, &line), "action [MASK] rate");
    line += "random ";
    o.check(within_ci(replaced, n, 0.05, &line), "action replacement rate");
    o.note(line);
  }
  {
    const auto s = view_session(4);
    std::map<std::pair<std::size_t, std::size_t>, std::size_t> counts;
    const std::size_t n = 60000;
    for (std::uint64_t t = 0; t < n; ++t) {
      Rng rng(24, Purpose::test, t);
      const auto r = interaction_reorder(s, rng);
      std::vector<std::size_t> diff;
      for (std::size_t i = 0; i < 4; ++i)
        if (r.interactions[i].token_ids != s.interactions[i].token_ids) diff.push_back(i);
      o.check(diff.size() == 2, "reorder swaps exactly two interactions");
      if (diff.size() == 2) ++counts[{diff[0], diff[1]}];
    }
    line = "reorder pairs (6 pairs, " + std::to_string(n) + " draws): ";
    bool ok = counts.size() == 6;
    for (const auto& kv : counts) ok = within_ci(kv.second, n, 1.0 / 6, &line) && ok;
    o.check(ok, "reorder pair choice uniform");
    o.note(line);
  }
  {
    MaskPolicy p;
    p.select_prob = 1, p.mask_frac = 1, p.random_frac = 0, p.keep_frac = 0;
    std::size_t violations = 0;
    for (std::uint64_t t = 0; t < 10000; ++t) {
      Rng rng(25, Purpose::test, t);
      const auto e = text_row(4);
      const auto m = item_token_mask(e, p, mv, rng);
      violations += m.token_ids[0] != Vocabulary::cls || m.token_ids[1] != Vocabulary::view ||
                    m.token_ids[2] != Vocabulary::title || m.token_ids.back() != Vocabulary::sep;
      Rng rng2(26, Purpose::test, t);
      const auto s = action_item_token_mask(view_session(3), p, mv, rng2);
      for (const auto& row : s.interactions)
        violations += row.token_ids.front() != Vocabulary::cls || row.token_ids[2] != Vocabulary::title ||
                      row.token_ids.back() != Vocabulary::sep;
    }
    o.check(violations == 0, "structural tokens never altered");
    o.note("structural-token violations in 10^4 trials (both masks, every eligible token selected): " +
           std::to_string(violations));
  }
  return o;
}

// --- 5. pre-training effect ------------------------------------------------------------------

struct World {
  TokenLimits limits;
  std::vector<Session> train, test;
  Vocabulary vocab;
  PretrainData data;
  std::map<Task, TaskDataset> tr, va, te;
  NipPool pool;
  std::vector<EncodedInteraction> pool_items;
  std::vector<EncodedSession> held_out;
};

World make_world() {
  World w;
  SynthConfig sc;  // 10 intents, vocabulary of 500 words, 2000 training sessions
  w.train = generate_corpus(sc, Split::train);
  SynthConfig small = sc;
  small.num_sessions = 400;
  const auto valid = generate_corpus(small, Split::valid);
  w.test = generate_corpus(small, Split::test);
  w.vocab = build_vocab(w.train);
  w.data = PretrainData::from(w.train, w.vocab, w.limits);
  const DeriveConfig dc;
  for (Task t : {Task::pip, Task::rlp, Task::nip}) {
    NipPool* p = t == Task::nip ? &w.pool : nullptr;
    w.tr[t] = derive_task_dataset(w.train, t, Split::train, dc, p);
    w.va[t] = derive_task_dataset(valid, t, Split::valid, dc, p);
    w.te[t] = derive_task_dataset(w.test, t, Split::test, dc, p);
  }
  w.pool_items = encode_pool(w.pool, w.vocab, w.limits);
  for (const auto& s : w.test) w.held_out.push_back(encode_session(s, w.vocab, w.limits));
  return w;
}

/// A random subset of `n` training examples, standing in for scarce labels.
TaskDataset labelled_subset(const TaskDataset& ds, std::size_t n, std::uint64_t seed) {
  TaskDataset out{ds.task, ds.split, {}};
  const auto order = shuffled_indices(ds.size(), seed, 500 + static_cast<std::uint64_t>(ds.task), 0);
  for (std::size_t i = 0; i < std::min(n, order.size()); ++i) out.examples.push_back(ds.examples[order[i]]);
  return out;
}

EncoderConfig small_model() {
  EncoderConfig c;
  c.num_layers = 2;
  c.hidden_size = 32;
  c.num_heads = 2;
  c.ff_size = 64;
  c.dropout_rate = 0.0;
  return c;
}

struct TaskScore {
  nlohmann::json metrics;
  double value = 0;  // the compared metric
};

std::vector<nlohmann::json> nip_reports;  // every NIP evaluation, for criterion 7

TaskScore finetune_and_test(const World& w, const UbmParams<float>& start, Task task, std::uint64_t seed) {
  FinetuneConfig fc;
  fc.task = task;
  fc.lr = 1e-3;
  fc.epochs = 6;
  fc.seed = seed;
  const std::size_t budget = task == Task::nip ? 1500 : 300;
  const NipPool* pool = task == Task::nip ? &w.pool : nullptr;
  const auto train = encode_task_dataset(labelled_subset(w.tr.at(task), budget, seed), w.vocab, w.limits, pool);
  const auto valid = encode_task_dataset(w.va.at(task), w.vocab, w.limits, pool);
  const auto test = encode_task_dataset(w.te.at(task), w.vocab, w.limits, pool);
  auto head = TaskHead<float>::init(task, start.config.hidden_size, seed);
  set_rlp_output_bias(head, train);
  auto res = finetune(start, head, train, valid, &w.pool_items, fc);
  Tensor<float> pool_emb;
  if (task == Task::nip) pool_emb = item_embeddings(res.params, std::span<const EncodedInteraction>(w.pool_items));
  const auto pred = predict(res.params, res.head, test, &pool_emb);
  TaskScore s;
  s.metrics = task_metrics(test, pred);
  if (task == Task::pip) s.value = s.metrics["auroc"].is_null() ? 0.5 : s.metrics["auroc"].get<double>();
  if (task == Task::rlp) s.value = s.metrics["mse"].get<double>();
  if (task == Task::nip) {
    s.value = s.metrics["hit@10"].get<double>();
    nip_reports.push_back(s.metrics);
  }
  return s;
}

std::optional<UbmParams<float>> kept_model;  // seed-1 pre-trained weights, reused by criterion 6

Outcome pretraining_effect() {
  Outcome o;
  const auto t0 = Clock::now();
  const World w = make_world();
  o.note("corpus: " + std::to_string(w.train.size()) + " training sessions, 10 intents, vocabulary " +
         std::to_string(w.vocab.size()) + " ids; model d=32, 2+2 layers, dropout 0");
  std::size_t seed_wins = 0;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    PretrainConfig pc;
    pc.stage1_batch = 64;
    pc.stage2_batch = 64;
    pc.stage1_epochs = 3;
    pc.stage2_epochs = 2;
    pc.peak_lr = 1e-3;
    pc.seed = seed;
    const auto init = UbmParams<float>::init(w.vocab.size(), small_model(), seed);
    auto model = init;
    const auto before = probe_pretrain_losses(model, w.data, pc, 9000 + seed);
    run_pretrain_stage(1, model, w.data, pc, {}, {});
    run_pretrain_stage(2, model, w.data, pc, {}, {});
    const auto after = probe_pretrain_losses(model, w.data, pc, 9000 + seed);
    const double c0 = before.first + before.second, c1 = after.first + after.second;
    const double drop = 1 - c1 / c0;
    o.check(drop >= 0.30, "(a) seed " + std::to_string(seed) + " contrastive loss reduction >= 30%");

    auto init_copy = init;
    const double u_init = uniformity_loss(session_embeddings(init_copy, std::span<const EncodedSession>(w.held_out)));
    const double u_pre = uniformity_loss(session_embeddings(model, std::span<const EncodedSession>(w.held_out)));
    o.check(u_pre < u_init, "(b) seed " + std::to_string(seed) + " uniformity below random init");

    std::size_t wins = 0;
    std::string detail;
    for (Task t : {Task::nip, Task::pip, Task::rlp}) {
      const auto pre = finetune_and_test(w, model, t, seed);
      const auto scratch = finetune_and_test(w, init, t, seed);
      const bool better = t == Task::rlp ? pre.value < scratch.value : pre.value > scratch.value;
      wins += better;
      const char* name = t == Task::nip ? "hit@10" : (t == Task::pip ? "AUROC" : "MSE");
      detail += std::string(name) + " " + fmt("%.4f", pre.value) + " vs " + fmt("%.4f", scratch.value) +
                (better ? " (+)" : " (-)") + "; ";
    }
    seed_wins += wins >= 2;
    o.note("seed " + std::to_string(seed) + ": combined loss " + fmt("%.1f", c0) + " -> " + fmt("%.1f", c1) + " (" +
           fmt("%.1f", 100 * drop) + "% lower); uniformity " + fmt("%.3f", u_pre) + " vs random init " +
           fmt("%.3f", u_init));
    o.note("seed " + std::to_string(seed) + " pre-trained vs scratch: " + detail + std::to_string(wins) + "/3 better");
    if (seed == 1) kept_model = model;
  }
  o.check(seed_wins >= 2, "(c) pre-training wins on >= 2 metrics in >= 2 of 3 seeds");
  const double t = seconds_since(t0);
  o.check(t < 1200, "runtime under 20 min");
  o.note("(c) seeds with >= 2 wins: " + std::to_string(seed_wins) + "/3; runtime " + fmt("%.0f", t) + " s (limit 1200 s)");
  return o;
}

// --- 6. determinism ------------------------------------------------------------------------------

const char* kPipelineConfig = R"([synth]
num_sessions = 300
valid_sessions = 80
test_sessions = 80
num_intents = 4
vocab_size = 80
items_per_intent = 8

[derive]
nip_min_count = 2

[model]
num_layers = 1
hidden_size = 16
num_heads = 2
ff_size = 32

[pretrain]
stage1_batch = 16
stage2_batch = 16
stage1_epochs = 1
stage2_epochs = 1
peak_lr = 0.001

[finetune]
epochs = 2
lr = 0.001
)";

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

bool ubm(const fs::path& root, const std::string& args) {
  const std::string cmd = "'" + std::string(UBM_CLI_PATH) + "' " + args + " --config '" + (root / "run.ini").string() +
                          "' 2>> '" + (root / "log.txt").string() + "' > /dev/null";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) && WEXITSTATUS(status) == 0;
}

Outcome determinism() {
  Outcome o;
  const fs::path root = fs::temp_directory_path() / ("ubm_accept_" + std::to_string(::getpid()));
  fs::remove_all(root);
  fs::create_directories(root);
  std::ofstream(root / "run.ini") << kPipelineConfig;
  std::map<std::string, std::string> first;
  bool identical = true, ran = true;
  for (int r = 0; r < 2; ++r) {
    const fs::path base = root / ("run" + std::to_string(r));
    const std::string data = (base / "data").string();
    ran = ran && ubm(root, "generate-corpus --out '" + data + "'");
    ran = ran && ubm(root, "build-vocab --data '" + data + "' --out '" + data + "'");
    ran = ran && ubm(root, "pretrain --stage all --data '" + data + "' --out '" + (base / "pt").string() + "'");
    for (const char* task : {"pip", "rlp", "nip"}) {
      const std::string t(task);
      ran = ran && ubm(root, "finetune --task " + t + " --from '" + (base / "pt/stage2.ckpt").string() + "' --data '" +
                                 data + "' --out '" + (base / "ft").string() + "'");
      ran = ran && ubm(root, "evaluate --checkpoint '" + (base / ("ft/finetune_" + t + ".ckpt")).string() +
                                 "' --data '" + data + "' --out '" + (base / "ev").string() + "'");
      const std::string file = "metrics_" + t + "_test.json";
      const std::string text = slurp(base / "ev" / file);
      if (r == 0) first[file] = text;
      else identical = identical && !text.empty() && text == first[file];
      if (r == 0 && t == "nip" && !text.empty()) nip_reports.push_back(nlohmann::json::parse(text)["metrics"]);
    }
  }
  o.check(ran, "pipeline commands exit 0 (log: " + (root / "log.txt").string() + ")");
  o.check(identical && first.size() == 3, "metrics JSON identical across runs");
  o.note("two seeded CLI runs (generate-corpus, build-vocab, pretrain, finetune x3, evaluate x3): metrics JSON " +
         std::string(identical ? "byte-identical" : "DIFFERENT"));

  // Checkpoint round trip on the pre-trained weights from criterion 5.
  auto p = kept_model ? *kept_model : UbmParams<float>::init(100, small_model(), 1);
  RunConfig cfg;
  cfg.model = p.config;
  std::vector<NamedTensor> ts;
  append_params(ts, p.parameters());
  Provenance prov;
  prov.stage = 2;
  const auto a = (root / "a.ckpt").string(), b = (root / "b.ckpt").string();
  save_checkpoint(a, make_header(cfg, "v", p.vocab_size, prov), ts);
  const auto loaded = load_checkpoint(a);
  auto q = restore_params(loaded);
  bool bits = true;
  const auto pa = p.parameters(), qa = q.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i)
    bits = bits && pa[i]->value.size() == qa[i]->value.size() &&
           std::memcmp(pa[i]->value.data(), qa[i]->value.data(), pa[i]->value.size() * sizeof(float)) == 0;
  std::vector<NamedTensor> again;
  append_params(again, q.parameters());
  save_checkpoint(b, loaded.header, again);
  const bool same_file = file_hash(a) == file_hash(b);
  o.check(bits, "restored tensors bit-identical");
  o.check(same_file, "re-saved checkpoint hash identical");
  o.note("checkpoint round trip: tensors " + std::string(bits ? "bit-identical" : "differ") + ", file hash " +
         file_hash(a) + (same_file ? " == " : " != ") + file_hash(b));
  if (o.pass) fs::remove_all(root);
  return o;
}

// --- 7. encoder invariants -----------------------------------------------------------------------

Outcome encoder_invariants() {
  Outcome o;
  EncoderConfig c = small_model();
  c.dropout_rate = 0.1;
  auto p = UbmParams<float>::init(200, c, 5);
  auto row = [](std::vector<TokenId> body) {
    EncodedInteraction e;
    e.token_ids.push_back(Vocabulary::cls);
    e.token_ids.push_back(Vocabulary::view);
    for (auto t : body) e.token_ids.push_back(t);
    e.token_ids.push_back(Vocabulary::sep);
    return e;
  };
  double pad_diff = 0, cls_diff = 0, mean_diff = 0;
  for (std::uint64_t t = 0; t < 20; ++t) {
    Rng rng(t, Purpose::test, 7);
    EncodedSession s;
    s.session_id = "s";
    const std::size_t len = 1 + rng.below(6);
    for (std::size_t i = 0; i < len; ++i) {
      std::vector<TokenId> body;
      for (std::size_t k = 0, n = 1 + rng.below(8); k < n; ++k) body.push_back(static_cast<TokenId>(11 + rng.below(189)));
      s.interactions.push_back(row(body));
      s.pad_mask.push_back(true);
    }
    EncodedSession padded = s;
    for (std::size_t i = 0, n = 1 + rng.below(6); i < n; ++i) {
      padded.interactions.push_back(EncodedInteraction{{Vocabulary::pad}});
      padded.pad_mask.push_back(false);
    }
    Graph<float> g;
    const auto a = ubm_forward(g, p, std::span<const EncodedSession>(&s, 1), ForwardContext{});
    const auto b = ubm_forward(g, p, std::span<const EncodedSession>(&padded, 1), ForwardContext{});
    const Tensor<float> ha = g.value(a.sessions), hb = g.value(b.sessions), out = g.value(a.outputs);
    for (std::size_t k = 0; k < ha.size(); ++k) pad_diff = std::max(pad_diff, std::abs(double(ha[k]) - double(hb[k])));
    for (std::size_t col = 0; col < ha.cols(); ++col) {
      double m = 0;
      for (std::size_t r = 0; r < out.rows(); ++r) m += out(r, col);
      mean_diff = std::max(mean_diff, std::abs(m / static_cast<double>(out.rows()) - ha(0, col)));
    }
    const auto full = interaction_encode_full(g, p, std::span<const EncodedInteraction>(s.interactions), ForwardContext{});
    const Tensor<float> tokens = g.value(full.tokens), cls = g.value(full.cls);
    for (std::size_t r = 0; r < cls.rows(); ++r)
      for (std::size_t col = 0; col < cls.cols(); ++col)
        cls_diff = std::max(cls_diff, std::abs(double(cls(r, col)) - double(tokens(full.offsets[r], col))));
  }
  o.check(pad_diff < 1e-6, "padding invariance below 1e-6");
  o.check(cls_diff == 0.0, "interaction embedding is the [CLS] output");
  o.check(mean_diff < 1e-6, "session embedding is the mean of real outputs");
  o.note("padding invariance max |diff| " + fmt("%.2e", pad_diff) + " (limit 1e-6); CLS pooling " + fmt("%.1e", cls_diff) +
         "; mean pooling " + fmt("%.2e", mean_diff));

  const auto pe = sinusoidal_positions<double>(64, 32);
  double pe_err = 0;
  for (std::size_t pos : {0u, 1u, 7u, 33u, 63u})
    for (std::size_t i = 0; i < 16; ++i) {
      const double angle = static_cast<double>(pos) / std::pow(10000.0, 2.0 * static_cast<double>(i) / 32.0);
      pe_err = std::max(pe_err, std::abs(pe(pos, 2 * i) - std::sin(angle)));
      pe_err = std::max(pe_err, std::abs(pe(pos, 2 * i + 1) - std::cos(angle)));
    }
  o.check(pe_err < 1e-12, "sinusoidal table closed form");
  o.check(std::abs(pe(1, 0) - std::sin(1.0)) < 1e-12 && pe(0, 1) == 1.0, "sinusoidal spot values");
  o.note("sinusoidal table max error " + fmt("%.1e", pe_err) + " over positions {0,1,7,33,63}");

  std::size_t violations = 0;
  for (const auto& m : nip_reports) violations += m["hit@10"].get<double>() > m["hit@20"].get<double>();
  o.check(!nip_reports.empty(), "NIP evaluations were run");
  o.check(violations == 0, "hit@10 <= hit@20 on every evaluation");
  o.note("hit@10 <= hit@20 held on " + std::to_string(nip_reports.size() - violations) + "/" +
         std::to_string(nip_reports.size()) + " NIP evaluations");
  return o;
}

}  // namespace
}  // namespace ubm

int main() {
  using namespace ubm;
  const auto t0 = Clock::now();
  report(1, "gradient integrity", gradient_integrity());
  report(2, "closed-form losses", closed_forms());
  report(3, "metric oracles", metric_oracles());
  report(4, "augmentation statistics", augmentation_statistics());
  report(5, "pre-training effect", pretraining_effect());
  report(6, "determinism", determinism());
  report(7, "encoder invariants", encoder_invariants());
  std::printf("%d of 7 criteria failed; total %.0f s\n", failures, seconds_since(t0));
  return failures == 0 ? 0 : 1;
}
