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

#ifndef UBM_COMMON_HPP
#define UBM_COMMON_HPP

#include <cstdint>
#include <iostream>
#include <stdexcept>
#include <string>

namespace ubm {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed input text (JSON, config lines). `offset` is a 1-based line
/// number when known, 0 otherwise.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t offset = 0)
      : Error(offset ? "line " + std::to_string(offset) + ": " + what : what), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

/// Well-formed input that violates a domain invariant.
class ValidationError : public Error {
 public:
  ValidationError(const std::string& field, const std::string& what)
      : Error(field + ": " + what), field_(field) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

/// Tensor shape incompatibility.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Unknown or ill-typed configuration key.
class ConfigError : public Error {
 public:
  ConfigError(const std::string& key, const std::string& what)
      : Error("config key '" + key + "': " + what), key_(key) {}
  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

/// Checkpoint and vocabulary (or dataset) do not belong together.
class MismatchError : public Error {
 public:
  using Error::Error;
};

/// Emits a single-line JSON warning on stderr.
inline void warn(const std::string& message) {
  std::string escaped;
  for (char c : message) {
    if (c == '"' || c == '\\') escaped.push_back('\\');
    escaped.push_back(c);
  }
  std::cerr << "{\"warning\":\"" << escaped << "\"}\n";
}

/// 64-bit FNV-1a, used for content hashes of vocabularies and checkpoints.
inline std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[v & 0xF];
    v >>= 4;
  }
  return out;
}

}  // namespace ubm

#endif  // UBM_COMMON_HPP
