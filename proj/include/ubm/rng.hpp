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

#ifndef UBM_RNG_HPP
#define UBM_RNG_HPP

#include <cmath>
#include <cstddef>
#include <cstdint>

namespace ubm {

/// Stream identifiers for keyed random number generation. Every random
/// decision in the library draws from a stream keyed by
/// (global seed, purpose, sample index, epoch), so runs are reproducible
/// and can be sharded without coordination.
enum class Purpose : std::uint64_t {
  corpus = 1,
  corpus_split = 2,
  init = 3,
  shuffle = 4,
  item_mask = 5,
  action_item_mask = 6,
  reorder = 7,
  dropout = 8,
  oversample = 9,
  rlp_cut = 10,
  analysis = 11,
  test = 99,
};

inline constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Counter-based generator: output n is a hash of (key, n).
class Rng {
 public:
  Rng(std::uint64_t seed, Purpose purpose, std::uint64_t index = 0, std::uint64_t epoch = 0) noexcept {
    std::uint64_t k = splitmix64(seed);
    k = splitmix64(k ^ static_cast<std::uint64_t>(purpose));
    k = splitmix64(k ^ index);
    key_ = splitmix64(k ^ (epoch * 0xd1b54a32d192ed03ULL));
  }

  std::uint64_t next_u64() noexcept { return splitmix64(key_ ^ splitmix64(counter_++)); }

  /// Uniform in [0, 1) with 53 bits of resolution.
  double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n) noexcept {
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t r;
    do {
      r = next_u64();
    } while (r >= limit);
    return r % n;
  }

  bool bernoulli(double p) noexcept { return uniform() < p; }

  /// Standard normal via Box-Muller; avoids the implementation-defined
  /// std::normal_distribution so streams match across standard libraries.
  double normal() noexcept {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    constexpr double two_pi = 6.283185307179586476925286766559;
    spare_ = r * std::sin(two_pi * u2);
    has_spare_ = true;
    return r * std::cos(two_pi * u2);
  }

  /// Normal truncated to [-2, 2] standard deviations, by rejection.
  double truncated_normal() noexcept {
    for (;;) {
      const double z = normal();
      if (z >= -2.0 && z <= 2.0) return z;
    }
  }

  std::uint64_t counter() const noexcept { return counter_; }

 private:
  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace ubm

#endif  // UBM_RNG_HPP
