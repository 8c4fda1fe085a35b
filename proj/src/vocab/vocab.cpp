// SPDX-License-Identifier: Apache-2.0
#include "cllm4rec/vocab.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "cllm4rec/errors.hpp"

namespace cllm4rec {

const char* to_string(TokenKind kind) {
  switch (kind) {
    case TokenKind::vocab:
      return "vocab";
    case TokenKind::user:
      return "user";
    case TokenKind::item:
      return "item";
  }
  return "?";
}

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      flush();
    } else if (c < 0x80 && std::ispunct(c)) {
      flush();
      out.emplace_back(1, ch);
    } else {
      cur.push_back(c < 0x80 ? static_cast<char>(std::tolower(c)) : ch);
    }
  }
  flush();
  return out;
}

ExtendedVocabulary::ExtendedVocabulary(std::vector<std::string> words, std::size_t users, std::size_t items)
    : words_(std::move(words)), users_(users), items_(items) {
  if (words_.size() < 3 || words_[kPad] != kPadWord || words_[kUnk] != kUnkWord || words_[kEos] != kEosWord) {
    throw ValidationError("vocabulary must start with <pad>, <unk>, <eos>");
  }
  index_.reserve(words_.size());
  for (std::size_t i = 0; i < words_.size(); ++i) {
    if (words_[i].empty()) throw ValidationError("vocabulary contains an empty word at id " + std::to_string(i));
    if (!index_.emplace(words_[i], static_cast<TokenId>(i)).second) {
      throw ValidationError("duplicate vocabulary word '" + words_[i] + "'");
    }
  }
}

ExtendedVocabulary ExtendedVocabulary::build(std::span<const std::string> texts, std::size_t min_freq,
                                             std::size_t max_vocab, std::span<const std::string> always_include) {
  if (texts.empty()) throw ValidationError("build_vocab: empty corpus");
  if (min_freq == 0) throw ValidationError("build_vocab: min_freq must be positive");
  std::map<std::string, std::size_t> counts;
  for (const auto& t : texts)
    for (auto& w : tokenize(t)) ++counts[std::move(w)];

  std::vector<std::string> words{std::string(kPadWord), std::string(kUnkWord), std::string(kEosWord)};
  std::vector<std::string> forced;
  for (const auto& text : always_include)
    for (auto& w : tokenize(text))
      if (std::find(forced.begin(), forced.end(), w) == forced.end()) forced.push_back(std::move(w));
  if (words.size() + forced.size() > max_vocab) {
    throw ValidationError("build_vocab: max_vocab " + std::to_string(max_vocab) + " cannot hold " +
                          std::to_string(words.size() + forced.size()) + " reserved words");
  }
  words.insert(words.end(), forced.begin(), forced.end());

  std::vector<std::pair<std::string, std::size_t>> ranked;
  for (auto& [w, c] : counts) {
    if (c < min_freq) continue;
    if (w == kPadWord || w == kUnkWord || w == kEosWord) continue;
    if (std::find(forced.begin(), forced.end(), w) != forced.end()) continue;
    ranked.emplace_back(w, c);
  }
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  for (auto& [w, c] : ranked) {
    if (words.size() >= max_vocab) break;
    words.push_back(w);
  }
  return ExtendedVocabulary(std::move(words));
}

void ExtendedVocabulary::attach(std::size_t users, std::size_t items) {
  users_ = users;
  items_ = items;
}

TokenId ExtendedVocabulary::user_token(std::size_t user) const {
  if (user >= users_) {
    throw ValidationError("user index " + std::to_string(user) + " out of range " + std::to_string(users_));
  }
  return static_cast<TokenId>(words_.size() + user);
}

TokenId ExtendedVocabulary::item_token(std::size_t item) const {
  if (item >= items_) {
    throw ValidationError("item index " + std::to_string(item) + " out of range " + std::to_string(items_));
  }
  return static_cast<TokenId>(words_.size() + users_ + item);
}

TokenKind ExtendedVocabulary::kind(TokenId id) const {
  if (id < words_.size()) return TokenKind::vocab;
  if (id < words_.size() + users_) return TokenKind::user;
  if (id < total_size()) return TokenKind::item;
  throw ValidationError("token id " + std::to_string(id) + " out of range " + std::to_string(total_size()));
}

std::size_t ExtendedVocabulary::user_index(TokenId id) const {
  if (kind(id) != TokenKind::user) throw ValidationError("token " + std::to_string(id) + " is not a user token");
  return id - words_.size();
}

std::size_t ExtendedVocabulary::item_index(TokenId id) const {
  if (kind(id) != TokenKind::item) throw ValidationError("token " + std::to_string(id) + " is not an item token");
  return id - words_.size() - users_;
}

std::optional<TokenId> ExtendedVocabulary::find(std::string_view word) const {
  auto it = index_.find(std::string(word));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

TokenId ExtendedVocabulary::word_id(std::string_view word) const {
  return find(word).value_or(kUnk);
}

const std::string& ExtendedVocabulary::word(TokenId id) const {
  if (id >= words_.size()) throw ValidationError("token id " + std::to_string(id) + " is not a word");
  return words_[id];
}

std::vector<TokenId> ExtendedVocabulary::encode(std::string_view text) const {
  std::vector<TokenId> ids;
  for (const auto& w : tokenize(text)) ids.push_back(word_id(w));
  return ids;
}

std::string ExtendedVocabulary::decode(std::span<const TokenId> ids) const {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    switch (kind(ids[i])) {
      case TokenKind::vocab:
        out += words_[ids[i]];
        break;
      case TokenKind::user:
        out += "<user_" + std::to_string(user_index(ids[i])) + ">";
        break;
      case TokenKind::item:
        out += "<item_" + std::to_string(item_index(ids[i])) + ">";
        break;
    }
  }
  return out;
}

void ExtendedVocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write vocabulary file " + path.string());
  out << "#N=" << words_.size() << " I=" << users_ << " J=" << items_ << "\n";
  for (const auto& w : words_) out << w << "\n";
  if (!out) throw ValidationError("failed writing vocabulary file " + path.string());
}

ExtendedVocabulary ExtendedVocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open vocabulary file " + path.string());
  std::string header;
  std::getline(in, header);
  std::size_t n = 0, users = 0, items = 0;
  if (std::sscanf(header.c_str(), "#N=%zu I=%zu J=%zu", &n, &users, &items) != 3) {
    throw FormatError("vocabulary header must be '#N=<N> I=<I> J=<J>', got '" + header + "'");
  }
  std::vector<std::string> words;
  words.reserve(n);
  std::string line;
  while (std::getline(in, line)) words.push_back(line);
  if (words.size() != n) {
    throw FormatError("vocabulary header declares N=" + std::to_string(n) + " but file has " +
                      std::to_string(words.size()) + " words");
  }
  return ExtendedVocabulary(std::move(words), users, items);
}

}  // namespace cllm4rec
