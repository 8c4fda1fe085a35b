// SPDX-License-Identifier: Apache-2.0
#include "cllm4rec/documents.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cllm4rec/errors.hpp"

namespace cllm4rec {

std::vector<std::string> template_phrases() {
  return {std::string(phrases::kInteracted), std::string(phrases::kReview),  std::string(phrases::kColon),
          std::string(phrases::kBiography),  std::string(phrases::kContent), std::string(phrases::kIs),
          std::string(phrases::kWillInteract)};
}

const char* to_string(DocFamily family) {
  switch (family) {
    case DocFamily::interaction:
      return "interaction";
    case DocFamily::review:
      return "review";
    case DocFamily::user_feature:
      return "user_feature";
    case DocFamily::item_feature:
      return "item_feature";
  }
  return "?";
}

namespace {

void append(std::vector<TokenId>& dst, const std::vector<TokenId>& src) {
  dst.insert(dst.end(), src.begin(), src.end());
}

}  // namespace

void validate_document(const Document& doc, const ExtendedVocabulary& vocab) {
  if (doc.prompt.empty()) throw ValidationError("document prompt is empty");
  for (TokenId id : doc.main) {
    if (vocab.kind(id) != doc.main_kind) {
      throw ValidationError(std::string("main text of a ") + to_string(doc.main_kind) + " document contains a " +
                            to_string(vocab.kind(id)) + " token (" + std::to_string(id) + ")");
    }
  }
}

Document build_interaction_doc(const ExtendedVocabulary& vocab, std::size_t user,
                               std::span<const std::size_t> train_items) {
  if (train_items.empty()) throw ValidationError("interaction document needs at least one train item");
  Document d;
  d.family = DocFamily::interaction;
  d.main_kind = TokenKind::item;
  d.user = user;
  d.prompt.push_back(vocab.user_token(user));
  append(d.prompt, vocab.encode(phrases::kInteracted));
  for (std::size_t j : train_items) d.main.push_back(vocab.item_token(j));
  return d;
}

std::optional<Document> build_review_doc(const ExtendedVocabulary& vocab, std::size_t user, std::size_t item,
                                         std::string_view text) {
  auto words = vocab.encode(text);
  if (words.empty()) return std::nullopt;
  Document d;
  d.family = DocFamily::review;
  d.main_kind = TokenKind::vocab;
  d.user = user;
  d.item = item;
  d.prompt.push_back(vocab.user_token(user));
  append(d.prompt, vocab.encode(phrases::kReview));
  d.prompt.push_back(vocab.item_token(item));
  append(d.prompt, vocab.encode(phrases::kColon));
  d.main = std::move(words);
  return d;
}

std::optional<Document> build_feature_doc(const ExtendedVocabulary& vocab, Entity entity, std::string_view text) {
  auto words = vocab.encode(text);
  if (words.empty()) return std::nullopt;
  Document d;
  d.main_kind = TokenKind::vocab;
  if (entity.kind == TokenKind::user) {
    d.family = DocFamily::user_feature;
    d.user = entity.index;
    d.prompt = vocab.encode(phrases::kBiography);
    d.prompt.push_back(vocab.user_token(entity.index));
  } else if (entity.kind == TokenKind::item) {
    d.family = DocFamily::item_feature;
    d.item = entity.index;
    d.prompt = vocab.encode(phrases::kContent);
    d.prompt.push_back(vocab.item_token(entity.index));
  } else {
    throw ValidationError("feature documents describe a user or an item");
  }
  append(d.prompt, vocab.encode(phrases::kIs));
  d.main = std::move(words);
  return d;
}

std::vector<TokenId> reorder_items(std::span<const TokenId> items, const ExtendedVocabulary& vocab, Rng& rng) {
  for (TokenId id : items) {
    if (vocab.kind(id) != TokenKind::item) {
      throw ValidationError("reorder_items: token " + std::to_string(id) + " is not an item token");
    }
  }
  std::vector<TokenId> out(items.begin(), items.end());
  shuffle(out.begin(), out.end(), rng);
  return out;
}

std::size_t hold_count(std::size_t n, double p_m) {
  if (n < 2) return 0;
  const auto raw = static_cast<std::size_t>(std::ceil(p_m * static_cast<double>(n) - 1e-12));
  return std::clamp<std::size_t>(raw, 1, n - 1);
}

std::optional<MaskedSample> build_masked_sample(const ExtendedVocabulary& vocab, std::size_t user,
                                                std::span<const std::size_t> train_items, double p_m, Rng& rng,
                                                bool reorder, std::size_t max_prompt_items) {
  if (!(p_m > 0.0 && p_m < 1.0)) throw ValidationError("mask fraction p_m must lie in (0, 1)");
  const std::size_t n = train_items.size();
  if (n < 2) return std::nullopt;
  const std::size_t n_hold = hold_count(n, p_m);

  std::vector<std::size_t> positions(n);
  std::iota(positions.begin(), positions.end(), std::size_t{0});
  shuffle(positions.begin(), positions.end(), rng);
  std::vector<std::size_t> held(positions.begin(), positions.begin() + static_cast<std::ptrdiff_t>(n_hold));
  std::vector<std::size_t> kept(positions.begin() + static_cast<std::ptrdiff_t>(n_hold), positions.end());
  // kept positions in stored order first, then optionally permuted
  std::sort(kept.begin(), kept.end());
  if (reorder) shuffle(kept.begin(), kept.end(), rng);
  if (max_prompt_items > 0 && kept.size() > max_prompt_items) {
    std::vector<std::size_t> pick(kept.size());
    std::iota(pick.begin(), pick.end(), std::size_t{0});
    shuffle(pick.begin(), pick.end(), rng);
    pick.resize(max_prompt_items);
    std::sort(pick.begin(), pick.end());
    std::vector<std::size_t> sub;
    for (std::size_t p : pick) sub.push_back(kept[p]);
    kept = std::move(sub);
  }

  MaskedSample s;
  s.user = user;
  s.hold.assign(vocab.item_count(), 0);
  for (std::size_t p : held) {
    s.hold_items.push_back(train_items[p]);
    s.hold.at(train_items[p]) = 1;
  }
  std::sort(s.hold_items.begin(), s.hold_items.end());
  s.n_hold = s.hold_items.size();

  s.prompt.push_back(vocab.user_token(user));
  append(s.prompt, vocab.encode(phrases::kInteracted));
  for (std::size_t p : kept) {
    s.prompt_items.push_back(train_items[p]);
    s.prompt.push_back(vocab.item_token(train_items[p]));
  }
  append(s.prompt, vocab.encode(phrases::kWillInteract));
  return s;
}

std::vector<TokenId> build_full_history_prompt(const ExtendedVocabulary& vocab, std::size_t user,
                                               std::span<const std::size_t> train_items, std::size_t max_items) {
  std::vector<TokenId> p{vocab.user_token(user)};
  append(p, vocab.encode(phrases::kInteracted));
  std::size_t first = 0;
  if (max_items > 0 && train_items.size() > max_items) first = train_items.size() - max_items;
  for (std::size_t k = first; k < train_items.size(); ++k) p.push_back(vocab.item_token(train_items[k]));
  append(p, vocab.encode(phrases::kWillInteract));
  return p;
}

std::size_t rec_prompt_overhead(const ExtendedVocabulary& vocab) {
  return 1 + vocab.encode(phrases::kInteracted).size() + vocab.encode(phrases::kWillInteract).size();
}

std::size_t interaction_prompt_overhead(const ExtendedVocabulary& vocab) {
  return 1 + vocab.encode(phrases::kInteracted).size();
}

}  // namespace cllm4rec
