// SPDX-License-Identifier: Apache-2.0
//
// Prompt/main documents built from recommendation data.
//
// Every document splits into a heterogeneous prompt (user/item ID tokens mixed
// with fixed wording) that only conditions the model, and a homogeneous main
// text (all item tokens, or all word tokens) that receives the language
// modeling loss.

#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cllm4rec/rng.hpp"
#include "cllm4rec/vocab.hpp"

namespace cllm4rec {

namespace phrases {
inline constexpr std::string_view kInteracted = "has interacted with";
inline constexpr std::string_view kReview = "writes the review for";
inline constexpr std::string_view kColon = ":";
inline constexpr std::string_view kBiography = "the biography of";
inline constexpr std::string_view kContent = "the content of";
inline constexpr std::string_view kIs = "is :";
inline constexpr std::string_view kWillInteract = "the user will interact with :";
}  // namespace phrases

/// Every template phrase; these words are always part of the vocabulary.
std::vector<std::string> template_phrases();

enum class DocFamily : std::uint8_t { interaction = 0, review = 1, user_feature = 2, item_feature = 3 };

const char* to_string(DocFamily family);

struct Document {
  std::vector<TokenId> prompt;
  std::vector<TokenId> main;
  TokenKind main_kind = TokenKind::vocab;
  DocFamily family = DocFamily::interaction;
  std::optional<std::size_t> user;
  std::optional<std::size_t> item;

  bool operator==(const Document&) const = default;
};

/// Throws ValidationError unless the prompt is nonempty and every main token
/// has kind `main_kind`.
void validate_document(const Document& doc, const ExtendedVocabulary& vocab);

/// <user_i> has interacted with | <item_a> <item_b> ...
Document build_interaction_doc(const ExtendedVocabulary& vocab, std::size_t user,
                               std::span<const std::size_t> train_items);

/// <user_i> writes the review for <item_j> : | review words.
/// Returns nullopt when the text has no tokens.
std::optional<Document> build_review_doc(const ExtendedVocabulary& vocab, std::size_t user, std::size_t item,
                                         std::string_view text);

struct Entity {
  TokenKind kind = TokenKind::user;
  std::size_t index = 0;
};

/// the biography of <user_i> is : | text   (users)
/// the content of <item_j> is : | text     (items)
std::optional<Document> build_feature_doc(const ExtendedVocabulary& vocab, Entity entity, std::string_view text);

/// Uniformly random permutation of an item-token sequence. Any non-item
/// token throws ValidationError.
std::vector<TokenId> reorder_items(std::span<const TokenId> items, const ExtendedVocabulary& vocab, Rng& rng);

/// Masked-prompt finetuning sample: a prompt built from the kept items and a
/// multi-hot target over all J items for the held-out ones.
struct MaskedSample {
  std::size_t user = 0;
  std::vector<TokenId> prompt;
  std::vector<int> hold;                 // length J, 0/1
  std::vector<std::size_t> hold_items;   // ascending
  std::vector<std::size_t> prompt_items; // in prompt order
  std::size_t n_hold = 0;
};

/// Number of held-out items for n train items: clamp(ceil(p_m * n), 1, n - 1).
std::size_t hold_count(std::size_t n, double p_m);

/// Holds out hold_count(n, p_m) random train items. The kept items are
/// permuted when `reorder` is set, otherwise they keep the given order; when
/// more than `max_prompt_items` (> 0) remain, a uniform subsample is used.
/// Returns nullopt for users with fewer than 2 train items.
std::optional<MaskedSample> build_masked_sample(const ExtendedVocabulary& vocab, std::size_t user,
                                                std::span<const std::size_t> train_items, double p_m, Rng& rng,
                                                bool reorder = true, std::size_t max_prompt_items = 0);

/// Recommendation prompt over the whole train history, no target:
/// <user_i> has interacted with <items...> the user will interact with :
/// With `max_items` > 0 only the most recent max_items are used.
std::vector<TokenId> build_full_history_prompt(const ExtendedVocabulary& vocab, std::size_t user,
                                               std::span<const std::size_t> train_items, std::size_t max_items = 0);

/// Token overhead of the recommendation prompt (everything but the items).
std::size_t rec_prompt_overhead(const ExtendedVocabulary& vocab);
/// Token overhead of the interaction prompt.
std::size_t interaction_prompt_overhead(const ExtendedVocabulary& vocab);

}  // namespace cllm4rec
