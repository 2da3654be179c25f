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

#ifndef UBM_AUGMENT_HPP
#define UBM_AUGMENT_HPP

#include <cmath>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "ubm/common.hpp"
#include "ubm/rng.hpp"
#include "ubm/session.hpp"
#include "ubm/vocab.hpp"

namespace ubm {

/// BERT-style token corruption. Each eligible position is selected with
/// select_prob; a selected token becomes [MASK] with probability mask_frac,
/// a random corpus token with probability random_frac, and is otherwise
/// kept.
struct MaskPolicy {
  double select_prob = 0.20;
  double mask_frac = 0.50;
  double random_frac = 0.25;
  double keep_frac = 0.25;
  /// When set, [CLS], [SEP] and [PAD] are never selected.
  bool protect_structural = true;

  void validate() const {
    if (!(select_prob >= 0.0 && select_prob <= 1.0)) throw ValidationError("select_prob", "must lie in [0, 1]");
    if (mask_frac < 0 || random_frac < 0 || keep_frac < 0 ||
        std::abs(mask_frac + random_frac + keep_frac - 1.0) > 1e-9)
      throw ValidationError("mask_frac", "mask, random and keep fractions must be non-negative and sum to 1");
  }
};

/// Vocabulary facts the corruption needs: the corpus-word id range.
struct MaskVocab {
  TokenId first_corpus_id = 0;
  TokenId vocab_size = 0;

  static MaskVocab from(const Vocabulary& v) {
    return {static_cast<TokenId>(v.num_reserved()), static_cast<TokenId>(v.size())};
  }
};

namespace detail {

inline bool eligible(TokenId id, const MaskVocab& mv, const MaskPolicy& policy, bool include_actions) {
  if (Vocabulary::is_structural(id)) return !policy.protect_structural;
  if (Vocabulary::is_action(id)) return include_actions;
  return id >= mv.first_corpus_id || id == Vocabulary::unk;
}

inline TokenId corrupt(TokenId id, const MaskVocab& mv, const MaskPolicy& policy, Rng& rng) {
  const double u = rng.uniform();
  if (u < policy.mask_frac) return Vocabulary::mask;
  if (u < policy.mask_frac + policy.random_frac) {
    if (mv.vocab_size <= mv.first_corpus_id) return Vocabulary::unk;
    return mv.first_corpus_id + static_cast<TokenId>(rng.below(static_cast<std::uint64_t>(mv.vocab_size - mv.first_corpus_id)));
  }
  return id;
}

inline EncodedInteraction mask_tokens(const EncodedInteraction& enc, const MaskPolicy& policy, const MaskVocab& mv,
                                      Rng& rng, bool include_actions) {
  EncodedInteraction out = enc;
  for (auto& id : out.token_ids) {
    if (!eligible(id, mv, policy, include_actions)) continue;
    if (rng.uniform() < policy.select_prob) id = corrupt(id, mv, policy, rng);
  }
  return out;
}

}  // namespace detail

/// Item Token Masking: corrupts text tokens; action and field-marker tokens
/// are never eligible.
inline EncodedInteraction item_token_mask(const EncodedInteraction& enc, const MaskPolicy& policy, const MaskVocab& mv,
                                          Rng& rng) {
  return detail::mask_tokens(enc, policy, mv, rng, false);
}

/// Action and Item Token Masking: as item_token_mask, with action tokens also
/// eligible. Applied to every real interaction of the session; padded slots
/// are untouched.
inline EncodedSession action_item_token_mask(const EncodedSession& s, const MaskPolicy& policy, const MaskVocab& mv,
                                             Rng& rng) {
  EncodedSession out = s;
  for (std::size_t i = 0; i < out.interactions.size(); ++i)
    if (out.pad_mask[i]) out.interactions[i] = detail::mask_tokens(s.interactions[i], policy, mv, rng, true);
  return out;
}

/// Interaction Reordering: swaps one uniformly chosen pair of distinct real
/// interactions (at most `max_distance` apart when given). Sessions with
/// fewer than two real interactions are returned unchanged.
inline EncodedSession interaction_reorder(const EncodedSession& s, Rng& rng,
                                          std::optional<std::size_t> max_distance = std::nullopt) {
  std::vector<std::size_t> real;
  for (std::size_t i = 0; i < s.pad_mask.size(); ++i)
    if (s.pad_mask[i]) real.push_back(i);
  EncodedSession out = s;
  if (real.size() < 2) return out;
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t a = 0; a < real.size(); ++a)
    for (std::size_t b = a + 1; b < real.size(); ++b)
      if (!max_distance || b - a <= *max_distance) pairs.emplace_back(real[a], real[b]);
  if (pairs.empty()) return out;
  const auto [i, j] = pairs[rng.below(pairs.size())];
  std::swap(out.interactions[i], out.interactions[j]);
  return out;
}

/// Next Item Pairing: each item-bearing interaction paired with the next
/// item-bearing interaction of the same session. Searches in between do not
/// break adjacency; a purchase closes the episode, so nothing pairs across it.
inline std::vector<std::pair<Item, Item>> next_item_pairs(std::span<const Session> corpus) {
  std::vector<std::pair<Item, Item>> pairs;
  for (const auto& s : corpus) {
    const Item* prev = nullptr;
    for (const auto& b : s.interactions) {
      if (!b.has_item()) continue;
      if (prev) pairs.emplace_back(*prev, b.item());
      prev = b.action == Action::buy ? nullptr : &b.item();
    }
  }
  return pairs;
}

}  // namespace ubm

#endif  // UBM_AUGMENT_HPP
