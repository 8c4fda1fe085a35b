// SPDX-License-Identifier: Apache-2.0
// Shared fixtures and generators for the test binaries.
#pragma once

#include <atomic>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <unistd.h>
#include <vector>

#include "cllm4rec/corpus_io.hpp"
#include "cllm4rec/documents.hpp"
#include "cllm4rec/model.hpp"
#include "cllm4rec/rng.hpp"
#include "cllm4rec/synth.hpp"
#include "cllm4rec/vocab.hpp"

namespace cllm4rec::test {

inline std::filesystem::path data_dir() { return CLLM4REC_TEST_DATA_DIR; }

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("cllm4rec_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

inline void spit(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

/// Word list "<pad> <unk> <eos> w3 ... w{n-1}" with I users and J items.
inline ExtendedVocabulary plain_vocab(std::size_t words, std::size_t users, std::size_t items) {
  std::vector<std::string> w{"<pad>", "<unk>", "<eos>"};
  for (const auto& phrase : template_phrases())
    for (auto& t : tokenize(phrase))
      if (std::find(w.begin(), w.end(), t) == w.end()) w.push_back(t);
  while (w.size() < words) w.push_back("w" + std::to_string(w.size()));
  return ExtendedVocabulary(std::move(w), users, items);
}

/// Small random corpus over `vocab`: every user gets `per_user` distinct items
/// (first `per_user - 2` train, then one val, one test) and one review per
/// train pair.
inline PreparedCorpus random_corpus(std::size_t words, std::size_t users, std::size_t items, std::size_t per_user,
                                    std::uint64_t seed) {
  PreparedCorpus c;
  c.vocab = plain_vocab(words, users, items);
  Rng rng = make_rng(seed, {0x636f72});
  for (std::size_t u = 0; u < users; ++u) c.table.user_ids.push_back("u" + std::to_string(u));
  for (std::size_t i = 0; i < items; ++i) c.table.item_ids.push_back("i" + std::to_string(i));
  c.table.rows.resize(users);
  for (std::size_t u = 0; u < users; ++u) {
    std::vector<std::size_t> pool(items);
    for (std::size_t i = 0; i < items; ++i) pool[i] = i;
    shuffle(pool.begin(), pool.end(), rng);
    for (std::size_t k = 0; k < per_user; ++k) {
      Interaction x;
      x.item = pool[k];
      x.rating = 5;
      x.timestamp = static_cast<std::int64_t>(k);
      x.split = k + 2 < per_user ? Split::train : (k + 2 == per_user ? Split::val : Split::test);
      c.table.rows[u].push_back(x);
    }
  }
  for (std::size_t u = 0; u < users; ++u) {
    const auto train = c.train_items(u);
    c.interaction_docs.push_back(build_interaction_doc(c.vocab, u, train));
    for (auto item : train) {
      std::string text;
      for (int k = 0; k < 4; ++k) text += c.vocab.word(static_cast<TokenId>(3 + uniform_index(rng, words - 3))) + " ";
      c.review_docs.push_back(*build_review_doc(c.vocab, u, item, text));
    }
  }
  return c;
}

inline std::string join(std::span<const TokenId> ids) {
  std::string s;
  for (std::size_t k = 0; k < ids.size(); ++k) s += (k ? " " : "") + std::to_string(ids[k]);
  return s;
}

inline std::vector<std::size_t> parse_items(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string t;
  while (std::getline(ss, t, ',')) out.push_back(std::stoul(t));
  return out;
}

struct TemplateCase {
  std::string kind;
  std::vector<std::string> args;
};

/// Rows of fixtures/templates/cases.tsv: kind TAB args...
inline std::vector<TemplateCase> load_cases() {
  std::ifstream in(data_dir() / "fixtures/templates/cases.tsv");
  std::vector<TemplateCase> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::stringstream ss(line);
    TemplateCase c;
    std::getline(ss, c.kind, '\t');
    for (std::string f; std::getline(ss, f, '\t');) c.args.push_back(f);
    out.push_back(c);
  }
  return out;
}

/// Token streams of every fixture case, keyed by golden file name.
inline std::map<std::string, std::string> render_templates() {
  const auto vocab = ExtendedVocabulary::load(data_dir() / "fixtures/templates/vocab.txt");
  std::map<std::string, std::string> out{
      {"interaction.txt", ""}, {"review.txt", ""}, {"feature.txt", ""}, {"rec_prompt.txt", ""}};
  for (const auto& c : load_cases()) {
    if (c.kind == "interaction") {
      const auto d = build_interaction_doc(vocab, std::stoul(c.args[0]), parse_items(c.args[1]));
      out["interaction.txt"] += "user " + c.args[0] + ": prompt " + join(d.prompt) + " | main " + join(d.main) + "\n";
    } else if (c.kind == "review") {
      const auto d = build_review_doc(vocab, std::stoul(c.args[0]), std::stoul(c.args[1]), c.args[2]);
      out["review.txt"] += "user " + c.args[0] + " item " + c.args[1] + ": prompt " + (d ? join(d->prompt) : "-") +
                           " | main " + (d ? join(d->main) : "-") + "\n";
    } else if (c.kind == "user_feature" || c.kind == "item_feature") {
      const bool user = c.kind == "user_feature";
      const auto d = build_feature_doc(vocab, {user ? TokenKind::user : TokenKind::item, std::stoul(c.args[0])},
                                       c.args[1]);
      out["feature.txt"] += std::string(user ? "user " : "item ") + c.args[0] + ": prompt " +
                            (d ? join(d->prompt) : "-") + " | main " + (d ? join(d->main) : "-") + "\n";
    } else if (c.kind == "history") {
      out["rec_prompt.txt"] += "user " + c.args[0] + ": " +
                               join(build_full_history_prompt(vocab, std::stoul(c.args[0]), parse_items(c.args[1]))) +
                               "\n";
    }
  }
  return out;
}

/// Micro-model configuration used by gradient and loss tests.
inline ModelConfig micro_config(std::size_t N = 20, std::size_t I = 4, std::size_t J = 6) {
  ModelConfig m;
  m.N = N;
  m.I = I;
  m.J = J;
  m.K = 8;
  m.layers = 2;
  m.heads = 2;
  m.context_length = 32;
  m.init_std = 0.3;
  return m;
}

}  // namespace cllm4rec::test
