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

#ifndef UBM_CHECKPOINT_HPP
#define UBM_CHECKPOINT_HPP

#include <algorithm>
#include <bit>
#include <chrono>
#include <cstdint>
#include <cstring>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "ubm/common.hpp"
#include "ubm/config.hpp"
#include "ubm/encoders.hpp"
#include "ubm/nn/optim.hpp"
#include "ubm/tasks.hpp"

namespace ubm {

/// File layout: the 8-byte magic, a u64 header length, the UTF-8 JSON header,
/// then u32 tensor count and per tensor: u32 name length, name, u32 rank, u64
/// extents, float32 data. All integers and floats are little-endian.
inline constexpr char kCheckpointMagic[8] = {'U', 'B', 'M', 'C', 'K', 'P', 'T', '1'};
inline constexpr int kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor<float> value;
};

struct Checkpoint {
  nlohmann::json header;
  std::vector<NamedTensor> tensors;

  const Tensor<float>* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t.value;
    return nullptr;
  }
};

namespace ckpt_detail {

template <typename U>
void put(std::string& out, U v) {
  static_assert(std::is_trivially_copyable_v<U>);
  unsigned char b[sizeof(U)];
  std::memcpy(b, &v, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(U));
  out.append(reinterpret_cast<const char*>(b), sizeof(U));
}

class Reader {
 public:
  Reader(const std::string& data, std::string path) : d_(data), path_(std::move(path)) {}

  template <typename U>
  U get() {
    need(sizeof(U));
    unsigned char b[sizeof(U)];
    std::memcpy(b, d_.data() + at_, sizeof(U));
    if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(U));
    at_ += sizeof(U);
    U v;
    std::memcpy(&v, b, sizeof(U));
    return v;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = d_.substr(at_, n);
    at_ += n;
    return s;
  }
  bool done() const { return at_ == d_.size(); }

 private:
  void need(std::size_t n) const {
    if (d_.size() - at_ < n) throw Error("checkpoint '" + path_ + "' is truncated");
  }
  const std::string& d_;
  std::string path_;
  std::size_t at_ = 0;
};

inline std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint '" + path + "'");
  return std::string(std::istreambuf_iterator<char>(in), {});
}

inline std::string encode_tensors(const std::vector<NamedTensor>& tensors) {
  std::string out;
  put<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
    out += t.name;
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.value.shape().size()));
    for (auto e : t.value.shape()) put<std::uint64_t>(out, e);
    for (float v : t.value.values()) put<float>(out, v);
  }
  return out;
}

}  // namespace ckpt_detail

inline std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// Writes atomically (temporary file, then rename). The header gains
/// "format", "version" and "tensor_hash" fields.
inline void save_checkpoint(const std::string& path, nlohmann::json header, const std::vector<NamedTensor>& tensors) {
  const std::string body = ckpt_detail::encode_tensors(tensors);
  header["format"] = "ubm-checkpoint";
  header["version"] = kCheckpointVersion;
  header["tensor_hash"] = hex64(fnv1a(body.data(), body.size()));
  const std::string h = header.dump();
  std::string out(kCheckpointMagic, sizeof kCheckpointMagic);
  ckpt_detail::put<std::uint64_t>(out, h.size());
  out += h;
  out += body;
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot write checkpoint '" + tmp + "'");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw Error("write failed for '" + tmp + "'");
  }
  std::filesystem::rename(tmp, path);
}

namespace ckpt_detail {

inline nlohmann::json parse_header(Reader& r, const std::string& path) {
  if (r.bytes(sizeof kCheckpointMagic) != std::string(kCheckpointMagic, sizeof kCheckpointMagic))
    throw Error("'" + path + "' is not a checkpoint (bad magic)");
  const auto n = r.get<std::uint64_t>();
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(r.bytes(static_cast<std::size_t>(n)));
  } catch (const nlohmann::json::exception& e) {
    throw Error("checkpoint '" + path + "' has a malformed header: " + e.what());
  }
  if (h.value("version", 0) != kCheckpointVersion)
    throw MismatchError("checkpoint '" + path + "' has unsupported format version " + h.value("version", nlohmann::json()).dump());
  return h;
}

}  // namespace ckpt_detail

/// Reads only the JSON header.
inline nlohmann::json read_checkpoint_header(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint '" + path + "'");
  std::string head(sizeof kCheckpointMagic + 8, '\0');
  in.read(head.data(), static_cast<std::streamsize>(head.size()));
  if (!in) throw Error("checkpoint '" + path + "' is truncated");
  if (head.compare(0, sizeof kCheckpointMagic, kCheckpointMagic, sizeof kCheckpointMagic) != 0)
    throw Error("'" + path + "' is not a checkpoint (bad magic)");
  ckpt_detail::Reader pre(head, path);
  pre.bytes(sizeof kCheckpointMagic);
  const auto n = pre.get<std::uint64_t>();
  if (n > std::filesystem::file_size(path)) throw Error("checkpoint '" + path + "' is truncated");
  std::string json(static_cast<std::size_t>(n), '\0');
  in.read(json.data(), static_cast<std::streamsize>(n));
  if (!in) throw Error("checkpoint '" + path + "' is truncated");
  const std::string all = head + json;
  ckpt_detail::Reader r(all, path);
  return ckpt_detail::parse_header(r, path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  const std::string data = ckpt_detail::slurp(path);
  ckpt_detail::Reader r(data, path);
  Checkpoint c;
  c.header = ckpt_detail::parse_header(r, path);
  const std::size_t count = r.get<std::uint32_t>();
  for (std::size_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name = r.bytes(r.get<std::uint32_t>());
    const std::size_t rank = r.get<std::uint32_t>();
    std::vector<std::size_t> shape;
    std::size_t n = 1;
    for (std::size_t k = 0; k < rank; ++k) {
      shape.push_back(static_cast<std::size_t>(r.get<std::uint64_t>()));
      n *= shape.back();
    }
    std::vector<float> values(n);
    for (auto& v : values) v = r.get<float>();
    t.value = Tensor<float>(std::move(shape), std::move(values));
    c.tensors.push_back(std::move(t));
  }
  if (!r.done()) throw Error("checkpoint '" + path + "' has trailing bytes");
  const std::string body = ckpt_detail::encode_tensors(c.tensors);
  if (c.header.value("tensor_hash", "") != hex64(fnv1a(body.data(), body.size())))
    throw MismatchError("checkpoint '" + path + "' tensor hash does not match its header");
  return c;
}

/// Hash of a file's bytes, for bit-exactness checks.
inline std::string file_hash(const std::string& path) {
  const std::string d = ckpt_detail::slurp(path);
  return hex64(fnv1a(d.data(), d.size()));
}

// --- model state <-> tensors --------------------------------------------------

/// Where a checkpoint sits in the pipeline.
struct Provenance {
  std::string kind = "pretrain";  // pretrain | finetune | init
  int stage = 0;
  std::size_t epoch = 0;
  std::size_t step = 0;
  std::optional<Task> task;
  std::optional<std::size_t> best_epoch;
};

inline nlohmann::json make_header(const RunConfig& cfg, const std::string& vocab_hash, std::size_t vocab_size,
                                  const Provenance& prov) {
  nlohmann::json h{{"config", cfg.to_json()},
                   {"vocab_hash", vocab_hash},
                   {"vocab_size", vocab_size},
                   {"kind", prov.kind},
                   {"stage", prov.stage},
                   {"epoch", prov.epoch},
                   {"step", prov.step},
                   {"created", utc_timestamp()}};
  h["task"] = prov.task ? nlohmann::json(task_name(*prov.task)) : nlohmann::json(nullptr);
  if (prov.best_epoch) h["best_epoch"] = *prov.best_epoch;
  return h;
}

inline void append_params(std::vector<NamedTensor>& out, const std::vector<Parameter<float>*>& ps) {
  for (auto* p : ps) out.push_back({p->name, p->value});
}

inline void append_adam(std::vector<NamedTensor>& out, const nn::AdamState<float>& s) {
  for (const auto& [name, t] : s.m) out.push_back({"adam.m." + name, t});
  for (const auto& [name, t] : s.v) out.push_back({"adam.v." + name, t});
}

/// Model weights rebuilt from a checkpoint's header config and tensors.
inline UbmParams<float> restore_params(const Checkpoint& c) {
  const RunConfig cfg = RunConfig::from_json(c.header.at("config"));
  auto p = UbmParams<float>::init(c.header.at("vocab_size").get<std::size_t>(), cfg.model, 0);
  for (auto* q : p.parameters()) {
    const auto* t = c.find(q->name);
    if (!t) throw MismatchError("checkpoint lacks tensor '" + q->name + "'");
    if (t->shape() != q->value.shape())
      throw MismatchError("tensor '" + q->name + "' has shape " + t->shape_str() + ", model expects " + q->value.shape_str());
    q->value = *t;
    q->zero_grad();
  }
  return p;
}

inline TaskHead<float> restore_head(const Checkpoint& c, Task task, std::size_t d) {
  auto head = TaskHead<float>::init(task, d, 0);
  for (auto* q : head.parameters()) {
    const auto* t = c.find(q->name);
    if (!t) throw MismatchError("checkpoint lacks head tensor '" + q->name + "'");
    if (t->shape() != q->value.shape()) throw MismatchError("head tensor '" + q->name + "' has the wrong shape");
    q->value = *t;
  }
  return head;
}

inline nn::AdamState<float> restore_adam(const Checkpoint& c, std::size_t t) {
  nn::AdamState<float> s;
  s.t = t;
  for (const auto& nt : c.tensors) {
    if (nt.name.rfind("adam.m.", 0) == 0) s.m[nt.name.substr(7)] = nt.value;
    if (nt.name.rfind("adam.v.", 0) == 0) s.v[nt.name.substr(7)] = nt.value;
  }
  return s;
}

/// Refuses a checkpoint trained against a different vocabulary.
inline void require_vocab(const nlohmann::json& header, const std::string& vocab_hash) {
  const std::string have = header.value("vocab_hash", "");
  if (have != vocab_hash)
    throw MismatchError("checkpoint was built with vocabulary " + have + " but the data uses vocabulary " + vocab_hash +
                        "; rebuild the vocabulary or pick a matching checkpoint");
}

}  // namespace ubm

#endif  // UBM_CHECKPOINT_HPP
