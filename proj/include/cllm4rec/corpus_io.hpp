// SPDX-License-Identifier: Apache-2.0
//
// The prepare pipeline (load -> binarize/core -> split -> vocab -> documents)
// and the on-disk layout of a prepared corpus directory:
//
//   vocab.txt            word list with `#N= I= J=` header
//   user_map.tsv         original_id TAB index
//   item_map.tsv
//   splits.csv           user,item,rating,timestamp,split (dense indices)
//   interactions.bin     u32 users, then per user: u32 n, n item token ids
//   docs_<family>.bin    u32 docs, then per doc: u32 family, u32 user,
//                        u32 item (0xFFFFFFFF = none), u32 |prompt|, prompt
//                        ids, u32 |main|, main ids
//   prepare.json         counts and options
//
// All integers are little-endian.
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "cllm4rec/documents.hpp"
#include "cllm4rec/interactions.hpp"
#include "cllm4rec/vocab.hpp"

namespace cllm4rec {

/// One line of a reviews or feature JSON Lines file. For feature files only
/// one of user_id/item_id is set.
struct TextRecord {
  std::optional<std::string> user_id;
  std::optional<std::string> item_id;
  std::string text;
};

/// Reads JSON Lines objects with a `text` key and the id keys required by
/// `need_user`/`need_item`. Malformed lines throw ParseError.
std::vector<TextRecord> read_text_records(const std::filesystem::path& path, bool need_user, bool need_item);

struct PrepareOptions {
  std::size_t min_freq = 1;
  std::size_t max_vocab = 20000;
  std::uint64_t seed = 0;
  double rating_threshold = 3.0;
  std::size_t core = 5;
};

struct PrepareInputs {
  InteractionTable raw;
  std::vector<TextRecord> reviews;
  std::vector<TextRecord> user_features;
  std::vector<TextRecord> item_features;
};

struct PreparedCorpus {
  ExtendedVocabulary vocab;
  InteractionTable table;  // split-tagged
  std::vector<Document> interaction_docs;
  std::vector<Document> review_docs;
  std::vector<Document> feature_docs;

  std::vector<std::size_t> train_items(std::size_t user) const { return table.items_of(user, Split::train); }
  bool operator==(const PreparedCorpus&) const = default;
};

/// Reviews are kept only for train (user, item) pairs and are the only
/// texts that feed the vocabulary together with feature texts. Records
/// naming unknown users or items are dropped.
PreparedCorpus prepare_corpus(const PrepareInputs& inputs, const PrepareOptions& options);

void save_prepared(const PreparedCorpus& corpus, const std::filesystem::path& dir, const PrepareOptions& options);
PreparedCorpus load_prepared(const std::filesystem::path& dir);

void write_documents(const std::filesystem::path& path, const std::vector<Document>& docs);
std::vector<Document> read_documents(const std::filesystem::path& path, const ExtendedVocabulary& vocab);

}  // namespace cllm4rec
