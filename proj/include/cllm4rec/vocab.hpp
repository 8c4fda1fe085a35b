// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace cllm4rec {

using TokenId = std::uint32_t;

enum class TokenKind : std::uint8_t { vocab = 0, user = 1, item = 2 };

const char* to_string(TokenKind kind);

/// Lowercases, splits on whitespace and makes every ASCII punctuation
/// character its own token.
std::vector<std::string> tokenize(std::string_view text);

/// Word vocabulary extended with one atomic token per user and per item.
///
/// Token space layout, with N words, I users and J items:
///   [0, N)          words (ids 0..2 are <pad>, <unk>, <eos>)
///   [N, N+I)        <user_i>  = N + i
///   [N+I, N+I+J)    <item_j>  = N + I + j
class ExtendedVocabulary {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kUnk = 1;
  static constexpr TokenId kEos = 2;
  static constexpr std::string_view kPadWord = "<pad>";
  static constexpr std::string_view kUnkWord = "<unk>";
  static constexpr std::string_view kEosWord = "<eos>";

  ExtendedVocabulary() = default;
  /// `words[0..2]` must be the three specials; words must be unique.
  explicit ExtendedVocabulary(std::vector<std::string> words, std::size_t users = 0, std::size_t items = 0);

  /// Counts tokens over `texts`; keeps words with count >= min_freq, most
  /// frequent first (ties lexicographic), capped so that N <= max_vocab.
  /// `always_include` words are kept regardless of frequency.
  static ExtendedVocabulary build(std::span<const std::string> texts, std::size_t min_freq, std::size_t max_vocab,
                                  std::span<const std::string> always_include = {});

  /// Sets the user and item counts (I, J).
  void attach(std::size_t users, std::size_t items);

  std::size_t word_count() const noexcept { return words_.size(); }
  std::size_t user_count() const noexcept { return users_; }
  std::size_t item_count() const noexcept { return items_; }
  std::size_t total_size() const noexcept { return words_.size() + users_ + items_; }

  TokenId user_token(std::size_t user) const;
  TokenId item_token(std::size_t item) const;
  TokenKind kind(TokenId id) const;
  std::size_t user_index(TokenId id) const;
  std::size_t item_index(TokenId id) const;

  std::optional<TokenId> find(std::string_view word) const;
  /// Word id, or <unk>.
  TokenId word_id(std::string_view word) const;
  const std::string& word(TokenId id) const;

  std::vector<TokenId> encode(std::string_view text) const;
  /// Space-joined surface form; user/item tokens render as <user_i>/<item_j>.
  std::string decode(std::span<const TokenId> ids) const;

  void save(const std::filesystem::path& path) const;
  static ExtendedVocabulary load(const std::filesystem::path& path);

  bool operator==(const ExtendedVocabulary& other) const {
    return words_ == other.words_ && users_ == other.users_ && items_ == other.items_;
  }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, TokenId> index_;
  std::size_t users_ = 0;
  std::size_t items_ = 0;
};

}  // namespace cllm4rec
