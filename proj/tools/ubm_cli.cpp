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

// ubm: corpus generation, vocabulary, pre-training, fine-tuning, evaluation
// and analysis from the command line.

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ubm/analysis.hpp"
#include "ubm/checkpoint.hpp"
#include "ubm/config.hpp"
#include "ubm/contrastive.hpp"
#include "ubm/synthetic.hpp"
#include "ubm/tasks.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace ubm::cli {
namespace {

void log_event(const std::string& event, json fields = json::object()) {
  fields["event"] = event;
  std::cerr << fields.dump() << '\n';
}

/// Advisory exclusive lock on an output directory, held for the process.
class DirLock {
 public:
  explicit DirLock(const fs::path& dir) {
    fs::create_directories(dir);
    const auto path = (dir / ".lock").string();
    fd_ = ::open(path.c_str(), O_CREAT | O_RDWR, 0644);
    if (fd_ < 0) throw Error("cannot open lock file '" + path + "'");
    if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
      ::close(fd_);
      throw Error("output directory '" + dir.string() + "' is in use by another ubm process");
    }
  }
  ~DirLock() {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  int fd_ = -1;
};

struct Common {
  std::string config_path;
  std::vector<std::string> sets;
  std::string out;
  std::string data = "data";
  std::string vocab;

  void add_to(CLI::App* app, bool needs_data) {
    app->add_option("--config", config_path, "Config file (ini style)")->check(CLI::ExistingFile);
    app->add_option("--set", sets, "Override a config key: key=value (repeatable)");
    app->add_option("--out", out, "Output directory")->required();
    if (needs_data) {
      app->add_option("--data", data, "Directory written by generate-corpus")->capture_default_str();
      app->add_option("--vocab", vocab, "Vocabulary file (default <data>/vocab.json)");
    }
  }

  std::string vocab_path() const { return vocab.empty() ? (fs::path(data) / "vocab.json").string() : vocab; }
  std::string corpus_path(Split s) const { return (fs::path(data) / "corpus" / (split_name(s) + ".jsonl")).string(); }
  std::string task_path(Task t, Split s) const {
    return (fs::path(data) / "tasks" / (task_name(t) + "_" + split_name(s) + ".jsonl")).string();
  }
  std::string pool_path() const { return (fs::path(data) / "tasks" / "nip_pool.jsonl").string(); }

  void apply_sets(RunConfig& c) const {
    for (const auto& kv : sets) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos || eq == 0) throw ConfigError(kv, "expected key=value");
      c.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
  }

  /// Config file (or defaults), then UBM_SEED, then --set.
  RunConfig config() const {
    RunConfig c = config_path.empty() ? RunConfig{} : RunConfig::load(config_path);
    c.apply_env();
    apply_sets(c);
    c.validate();
    return c;
  }
};

/// Architecture and tokenization keys always come from the checkpoint.
void adopt_model(RunConfig& cfg, const json& header) {
  const RunConfig saved = RunConfig::from_json(header.at("config"));
  cfg.model = saved.model;
  cfg.limits = saved.limits;
  cfg.min_freq = saved.min_freq;
}

json checkpoint_ref(const std::string& path, const json& header) {
  return {{"file", fs::path(path).filename().string()}, {"tensor_hash", header.value("tensor_hash", "")}};
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << j.dump(2) << '\n';
  if (!out) throw Error("write failed for '" + path.string() + "'");
}

// --- generate-corpus ---------------------------------------------------------

int generate_corpus_cmd(const Common& o) {
  const RunConfig cfg = o.config();
  DirLock lock(o.out);
  const fs::path out(o.out);
  fs::create_directories(out / "corpus");
  fs::create_directories(out / "tasks");
  const DeriveConfig dc = cfg.derive_config();
  std::map<Split, std::vector<Session>> corpus;
  for (Split s : {Split::train, Split::valid, Split::test}) {
    SynthConfig sc = cfg.synth;
    if (s == Split::valid) sc.num_sessions = cfg.valid_sessions;
    if (s == Split::test) sc.num_sessions = cfg.test_sessions;
    corpus[s] = generate_corpus(sc, s);
    write_sessions((out / "corpus" / (split_name(s) + ".jsonl")).string(), corpus[s]);
    log_event("corpus", {{"split", split_name(s)}, {"sessions", corpus[s].size()}});
  }
  for (Task t : {Task::pip, Task::rlp, Task::nip}) {
    NipPool pool;
    for (Split s : {Split::train, Split::valid, Split::test}) {
      const auto ds = derive_task_dataset(corpus[s], t, s, dc, t == Task::nip ? &pool : nullptr);
      write_task_dataset((out / "tasks" / (task_name(t) + "_" + split_name(s) + ".jsonl")).string(), ds);
      log_event("task_dataset", {{"task", task_name(t)}, {"split", split_name(s)}, {"examples", ds.size()}});
    }
    if (t == Task::nip) {
      write_nip_pool((out / "tasks" / "nip_pool.jsonl").string(), pool);
      log_event("nip_pool", {{"items", pool.size()}});
    }
  }
  std::ofstream(out / "config.ini") << cfg.to_text();
  return 0;
}

// --- build-vocab ---------------------------------------------------------------

int build_vocab_cmd(const Common& o, std::string corpus) {
  const RunConfig cfg = o.config();
  if (corpus.empty()) corpus = o.corpus_path(Split::train);
  const auto sessions = read_sessions(corpus, cfg.limits);
  const Vocabulary v = build_vocab(sessions, cfg.min_freq);
  DirLock lock(o.out);
  v.save((fs::path(o.out) / "vocab.json").string());
  log_event("vocab", {{"size", v.size()}, {"hash", v.hash()}, {"sessions", sessions.size()}});
  return 0;
}

// --- pretrain --------------------------------------------------------------------

struct PretrainOptions {
  std::string stage = "all";
  std::string resume;
  std::string init;
};

void save_pretrain(const fs::path& path, const RunConfig& cfg, const Vocabulary& v, UbmParams<float>& p, int stage,
                   const StageProgress& prog) {
  std::vector<NamedTensor> ts;
  append_params(ts, p.parameters());
  append_adam(ts, prog.adam);
  Provenance prov;
  prov.stage = stage;
  prov.epoch = prog.epochs_done;
  prov.step = prog.step;
  save_checkpoint(path.string(), make_header(cfg, v.hash(), v.size(), prov), ts);
  log_event("checkpoint", {{"path", path.string()}, {"stage", stage}, {"epoch", prog.epochs_done}});
}

int pretrain_cmd(const Common& o, const PretrainOptions& po) {
  if (po.stage != "1" && po.stage != "2" && po.stage != "all") throw Error("--stage must be 1, 2 or all");
  if (!po.resume.empty() && !po.init.empty()) throw Error("--resume and --init are exclusive");
  RunConfig cfg = o.config();
  const Vocabulary vocab = Vocabulary::load(o.vocab_path());
  std::optional<UbmParams<float>> params;
  int first = po.stage == "2" ? 2 : 1;
  const int last = po.stage == "1" ? 1 : 2;
  StageProgress start;
  if (!po.resume.empty()) {
    const auto c = load_checkpoint(po.resume);
    require_vocab(c.header, vocab.hash());
    cfg = RunConfig::from_json(c.header.at("config"));
    o.apply_sets(cfg);
    cfg.validate();
    first = c.header.at("stage").get<int>();
    if (first < 1 || first > last) throw MismatchError("checkpoint stage " + std::to_string(first) + " is not resumable here");
    params = restore_params(c);
    start.epochs_done = c.header.at("epoch").get<std::size_t>();
    start.step = c.header.at("step").get<std::size_t>();
    start.adam = restore_adam(c, start.step);
    log_event("resume", {{"checkpoint", po.resume}, {"stage", first}, {"epoch", start.epochs_done}});
  } else if (!po.init.empty()) {
    const auto c = load_checkpoint(po.init);
    require_vocab(c.header, vocab.hash());
    adopt_model(cfg, c.header);
    cfg.validate();
    params = restore_params(c);
  } else {
    params = UbmParams<float>::init(vocab.size(), cfg.model, cfg.seed);
  }
  const auto corpus = read_sessions(o.corpus_path(Split::train), cfg.limits);
  const auto data = PretrainData::from(corpus, vocab, cfg.limits);
  const PretrainConfig pc = cfg.pretrain_config();
  DirLock lock(o.out);
  const fs::path out(o.out);
  PretrainHooks hooks;
  hooks.on_step = [](const TrainLogEntry& e) {
    log_event("step", {{"stage", e.stage}, {"step", e.step}, {"loss", e.loss}, {"lr", e.lr}, {"elapsed_s", e.elapsed_s}});
  };
  hooks.on_epoch_end = [&](int stage, const StageProgress& prog) {
    save_pretrain(out / ("stage" + std::to_string(stage) + "_epoch" + std::to_string(prog.epochs_done) + ".ckpt"), cfg,
                  vocab, *params, stage, prog);
  };
  for (int stage = first; stage <= last; ++stage) {
    const StageProgress done = run_pretrain_stage(stage, *params, data, pc, stage == first ? start : StageProgress{}, hooks);
    save_pretrain(out / ("stage" + std::to_string(stage) + ".ckpt"), cfg, vocab, *params, stage, done);
  }
  return 0;
}

// --- finetune --------------------------------------------------------------------

struct FinetuneOptions {
  std::string task;
  std::string from;
  bool from_scratch = false;
};

struct LoadedTask {
  TaskData data;
  TaskDataset raw;
};

LoadedTask load_task(const Common& o, Task t, Split s, const Vocabulary& v, const TokenLimits& limits,
                     const NipPool* pool) {
  LoadedTask lt;
  lt.raw = read_task_dataset(o.task_path(t, s), t, s, limits, pool);
  lt.data = encode_task_dataset(lt.raw, v, limits, pool);
  return lt;
}

int finetune_cmd(const Common& o, const FinetuneOptions& fo) {
  if (fo.from.empty() == !fo.from_scratch) throw Error("give exactly one of --from or --from-scratch");
  const Task task = parse_task(fo.task);
  RunConfig cfg = o.config();
  const Vocabulary vocab = Vocabulary::load(o.vocab_path());
  std::optional<UbmParams<float>> params;
  if (!fo.from.empty()) {
    const auto c = load_checkpoint(fo.from);
    require_vocab(c.header, vocab.hash());
    adopt_model(cfg, c.header);
    cfg.validate();
    params = restore_params(c);
  } else {
    params = UbmParams<float>::init(vocab.size(), cfg.model, cfg.seed);
  }
  auto head = TaskHead<float>::init(task, cfg.model.hidden_size, cfg.seed);
  std::optional<NipPool> pool;
  std::vector<EncodedInteraction> pool_items;
  if (task == Task::nip) {
    pool = read_nip_pool(o.pool_path());
    pool_items = encode_pool(*pool, vocab, cfg.limits);
  }
  const NipPool* pp = pool ? &*pool : nullptr;
  const auto train = load_task(o, task, Split::train, vocab, cfg.limits, pp);
  const auto valid = load_task(o, task, Split::valid, vocab, cfg.limits, pp);
  set_rlp_output_bias(head, train.data);
  DirLock lock(o.out);
  const fs::path out(o.out);
  std::ofstream epochs(out / ("finetune_" + task_name(task) + "_epochs.jsonl"));
  const auto result = finetune(*params, head, train.data, valid.data, &pool_items, cfg.finetune_config(task),
                               [&](const EpochReport& r) {
                                 json j{{"task", task_name(task)},
                                        {"epoch", r.epoch},
                                        {"train_loss", r.train_loss},
                                        {"valid_loss", r.valid_loss}};
                                 epochs << j.dump() << '\n' << std::flush;
                                 log_event("finetune_epoch", j);
                               });
  auto rp = result.params;
  auto rh = result.head;
  std::vector<NamedTensor> ts;
  append_params(ts, rp.parameters());
  append_params(ts, rh.parameters());
  Provenance prov;
  prov.kind = "finetune";
  prov.task = task;
  prov.epoch = result.epochs.size();
  prov.best_epoch = result.best_epoch;
  auto header = make_header(cfg, vocab.hash(), vocab.size(), prov);
  header["init"] = fo.from_scratch ? json("scratch") : json(fs::path(fo.from).filename().string());
  const auto path = out / ("finetune_" + task_name(task) + ".ckpt");
  save_checkpoint(path.string(), header, ts);
  log_event("checkpoint", {{"path", path.string()}, {"task", task_name(task)}, {"best_epoch", result.best_epoch}});
  return 0;
}

// --- evaluate ----------------------------------------------------------------------

struct Finetuned {
  Checkpoint ckpt;
  RunConfig cfg;
  Task task = Task::pip;
  UbmParams<float> params;
  TaskHead<float> head;
};

Finetuned load_finetuned(const Common& o, const std::string& path, const Vocabulary& vocab) {
  Finetuned f;
  f.ckpt = load_checkpoint(path);
  if (f.ckpt.header.value("kind", "") != "finetune" || !f.ckpt.header["task"].is_string())
    throw MismatchError("checkpoint '" + path + "' is not a fine-tuned task checkpoint");
  require_vocab(f.ckpt.header, vocab.hash());
  f.cfg = o.config();
  adopt_model(f.cfg, f.ckpt.header);
  f.task = parse_task(f.ckpt.header["task"].get<std::string>());
  f.params = restore_params(f.ckpt);
  f.head = restore_head(f.ckpt, f.task, f.cfg.model.hidden_size);
  return f;
}

struct Scored {
  LoadedTask ds;
  TaskPredictions pred;
};

Scored score_split(const Common& o, Finetuned& f, Split split, const Vocabulary& vocab) {
  std::optional<NipPool> pool;
  Tensor<float> pool_emb;
  if (f.task == Task::nip) {
    pool = read_nip_pool(o.pool_path());
    const auto items = encode_pool(*pool, vocab, f.cfg.limits);
    pool_emb = item_embeddings(f.params, std::span<const EncodedInteraction>(items));
  }
  Scored s;
  s.ds = load_task(o, f.task, split, vocab, f.cfg.limits, pool ? &*pool : nullptr);
  s.pred = predict(f.params, f.head, s.ds.data, &pool_emb);
  return s;
}

int evaluate_cmd(const Common& o, const std::string& ckpt, const std::string& split_s) {
  const Split split = parse_split(split_s);
  const Vocabulary vocab = Vocabulary::load(o.vocab_path());
  auto f = load_finetuned(o, ckpt, vocab);
  const auto s = score_split(o, f, split, vocab);
  const json saved = f.ckpt.header.at("config");
  json report{{"task", task_name(f.task)},
              {"split", split_name(split)},
              {"metrics", task_metrics(s.ds.data, s.pred, f.cfg.finetune.threshold)},
              {"checkpoint", checkpoint_ref(ckpt, f.ckpt.header)},
              {"seed", std::stoull(saved.at("run.seed").get<std::string>())},
              {"examples", s.ds.data.size()},
              {"config", saved}};
  DirLock lock(o.out);
  write_json(fs::path(o.out) / ("metrics_" + task_name(f.task) + "_" + split_name(split) + ".json"), report);
  std::cout << report.dump(2) << '\n';
  return 0;
}

// --- analyze ------------------------------------------------------------------------

struct AnalyzeOptions {
  std::string checkpoint;
  std::string split = "test";
  bool align_uniform = false;
  bool sparsity = false;
  bool export_embeddings = false;
};

int analyze_cmd(const Common& o, const AnalyzeOptions& ao) {
  if (ao.align_uniform + ao.sparsity + ao.export_embeddings != 1)
    throw Error("give exactly one of --align-uniform, --sparsity, --export-embeddings");
  const Split split = parse_split(ao.split);
  const Vocabulary vocab = Vocabulary::load(o.vocab_path());
  const fs::path out(o.out);

  if (ao.sparsity) {
    if (ao.checkpoint.empty()) throw Error("--sparsity needs a NIP --checkpoint");
    auto f = load_finetuned(o, ao.checkpoint, vocab);
    if (f.task != Task::nip) throw MismatchError("--sparsity needs a NIP checkpoint, got " + task_name(f.task));
    const auto s = score_split(o, f, split, vocab);
    const NipPool pool = read_nip_pool(o.pool_path());
    const auto train = read_task_dataset(o.task_path(Task::nip, Split::train), Task::nip, Split::train, f.cfg.limits, &pool);
    std::vector<std::string> keys;
    for (const auto& e : s.ds.raw.examples) keys.push_back(item_key(*e.item));
    const auto groups = sparsity_report(s.pred.ranks, keys, label_counts(train), f.cfg.sparsity_edges);
    json j{{"split", split_name(split)}, {"checkpoint", checkpoint_ref(ao.checkpoint, f.ckpt.header)}, {"groups", json::array()}};
    for (const auto& g : groups) j["groups"].push_back(g.to_json());
    DirLock lock(o.out);
    write_json(out / "sparsity.json", j);
    std::cout << j.dump(2) << '\n';
    return 0;
  }

  RunConfig cfg = o.config();
  std::optional<UbmParams<float>> params;
  json ref = "random-init";
  if (!ao.checkpoint.empty()) {
    const auto c = load_checkpoint(ao.checkpoint);
    require_vocab(c.header, vocab.hash());
    adopt_model(cfg, c.header);
    params = restore_params(c);
    ref = checkpoint_ref(ao.checkpoint, c.header);
  } else {
    params = UbmParams<float>::init(vocab.size(), cfg.model, cfg.seed);
  }
  auto sessions = read_sessions(o.corpus_path(split), cfg.limits);
  std::vector<EncodedSession> enc;
  for (const auto& s : sessions) enc.push_back(encode_session(s, vocab, cfg.limits));
  DirLock lock(o.out);
  if (ao.export_embeddings) {
    const auto path = out / "embeddings.csv";
    export_embeddings(*params, enc, path.string());
    log_event("embeddings", {{"path", path.string()}, {"sessions", enc.size()}});
    return 0;
  }
  if (enc.size() > cfg.analysis_samples) enc.resize(cfg.analysis_samples);
  const auto rep = align_uniform_report(*params, enc, MaskVocab::from(vocab), parse_augmentation(cfg.augmentation),
                                        cfg.seed, cfg.pretrain.session_mask);
  json j = rep.to_json();
  j["split"] = split_name(split);
  j["checkpoint"] = ref;
  write_json(out / "align_uniform.json", j);
  std::cout << j.dump(2) << '\n';
  return 0;
}

}  // namespace
}  // namespace ubm::cli

int main(int argc, char** argv) {
  using namespace ubm::cli;
  CLI::App app{"ubm: hierarchical user behavior model"};
  app.require_subcommand(1);

  Common gen_o, vocab_o, pre_o, ft_o, eval_o, an_o, show_o;
  auto* gen = app.add_subcommand("generate-corpus", "Write a synthetic corpus and derived task datasets");
  gen_o.add_to(gen, false);

  std::string corpus;
  auto* voc = app.add_subcommand("build-vocab", "Build the vocabulary from the training corpus");
  vocab_o.add_to(voc, true);
  voc->add_option("--corpus", corpus, "Session file (default <data>/corpus/train.jsonl)");

  PretrainOptions po;
  auto* pre = app.add_subcommand("pretrain", "Contrastive pre-training");
  pre_o.add_to(pre, true);
  pre->add_option("--stage", po.stage, "1, 2 or all")->capture_default_str();
  pre->add_option("--resume", po.resume, "Continue from an end-of-epoch checkpoint")->check(CLI::ExistingFile);
  pre->add_option("--init", po.init, "Start from the weights of a checkpoint")->check(CLI::ExistingFile);

  FinetuneOptions fo;
  auto* ft = app.add_subcommand("finetune", "Fine-tune on a downstream task");
  ft_o.add_to(ft, true);
  ft->add_option("--task", fo.task, "pip, rlp or nip")->required();
  ft->add_option("--from", fo.from, "Pre-trained checkpoint")->check(CLI::ExistingFile);
  ft->add_flag("--from-scratch", fo.from_scratch, "Random initialization instead of a checkpoint");

  std::string eval_ckpt, eval_split = "test";
  auto* ev = app.add_subcommand("evaluate", "Metrics of a fine-tuned checkpoint");
  eval_o.add_to(ev, true);
  ev->add_option("--checkpoint", eval_ckpt, "Fine-tuned checkpoint")->required()->check(CLI::ExistingFile);
  ev->add_option("--split", eval_split, "train, valid or test")->capture_default_str();

  AnalyzeOptions ao;
  auto* an = app.add_subcommand("analyze", "Embedding diagnostics");
  an_o.add_to(an, true);
  an->add_option("--checkpoint", ao.checkpoint, "Checkpoint (default: random initialization)")->check(CLI::ExistingFile);
  an->add_option("--split", ao.split, "Corpus split")->capture_default_str();
  an->add_flag("--align-uniform", ao.align_uniform, "Alignment and uniformity losses");
  an->add_flag("--sparsity", ao.sparsity, "NIP metrics by training label frequency");
  an->add_flag("--export-embeddings", ao.export_embeddings, "Session embeddings as CSV");

  auto* show = app.add_subcommand("show-config", "Print the effective configuration");
  show->add_option("--config", show_o.config_path, "Config file")->check(CLI::ExistingFile);
  show->add_option("--set", show_o.sets, "Override a config key: key=value");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*gen) return generate_corpus_cmd(gen_o);
    if (*voc) return build_vocab_cmd(vocab_o, corpus);
    if (*pre) return pretrain_cmd(pre_o, po);
    if (*ft) return finetune_cmd(ft_o, fo);
    if (*ev) return evaluate_cmd(eval_o, eval_ckpt, eval_split);
    if (*an) return analyze_cmd(an_o, ao);
    if (*show) {
      std::cout << show_o.config().to_text();
      return 0;
    }
  } catch (const ubm::ConfigError& e) {
    log_event("error", {{"kind", "config"}, {"key", e.key()}, {"message", e.what()}});
    return 2;
  } catch (const ubm::MismatchError& e) {
    log_event("error", {{"kind", "mismatch"}, {"message", e.what()}});
    return 3;
  } catch (const std::exception& e) {
    log_event("error", {{"kind", "runtime"}, {"message", e.what()}});
    return 1;
  }
  return 1;
}
