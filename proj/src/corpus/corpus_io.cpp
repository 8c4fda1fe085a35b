// SPDX-License-Identifier: Apache-2.0
#include "cllm4rec/corpus_io.hpp"

#include <fstream>
#include <json.hpp>
#include <map>
#include <sstream>
#include <unordered_map>

#include "cllm4rec/binary_io.hpp"
#include "cllm4rec/errors.hpp"

namespace cllm4rec {

namespace {

constexpr std::uint32_t kNone = 0xFFFFFFFFu;

std::unordered_map<std::string, std::size_t> index_of(const std::vector<std::string>& ids) {
  std::unordered_map<std::string, std::size_t> m;
  for (std::size_t i = 0; i < ids.size(); ++i) m.emplace(ids[i], i);
  return m;
}

std::optional<std::string> id_field(const nlohmann::json& j, const char* key, std::size_t line) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) return std::nullopt;
  if (it->is_string()) return it->get<std::string>();
  if (it->is_number_integer()) return std::to_string(it->get<long long>());
  throw ParseError(std::string("key '") + key + "' must be a string", line);
}

}  // namespace

std::vector<TextRecord> read_text_records(const std::filesystem::path& path, bool need_user, bool need_item) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path.string());
  std::vector<TextRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(path.filename().string() + ": invalid JSON (" + e.what() + ")", lineno);
    }
    if (!j.is_object()) throw ParseError(path.filename().string() + ": expected a JSON object", lineno);
    TextRecord r;
    r.user_id = id_field(j, "user_id", lineno);
    r.item_id = id_field(j, "item_id", lineno);
    if (need_user && !r.user_id) throw ParseError(path.filename().string() + ": missing key 'user_id'", lineno);
    if (need_item && !r.item_id) throw ParseError(path.filename().string() + ": missing key 'item_id'", lineno);
    auto t = j.find("text");
    if (t == j.end() || !t->is_string()) throw ParseError(path.filename().string() + ": missing key 'text'", lineno);
    r.text = t->get<std::string>();
    out.push_back(std::move(r));
  }
  return out;
}

PreparedCorpus prepare_corpus(const PrepareInputs& inputs, const PrepareOptions& options) {
  InteractionTable table = binarize_and_core(inputs.raw, options.rating_threshold, options.core);
  table = split_interactions(table, options.seed);
  const auto users = index_of(table.user_ids);
  const auto items = index_of(table.item_ids);

  // train pair -> review text; later records for the same pair win
  std::map<std::pair<std::size_t, std::size_t>, std::string> reviews;
  {
    std::vector<std::vector<char>> is_train(table.users());
    for (std::size_t u = 0; u < table.users(); ++u) {
      is_train[u].assign(table.items(), 0);
      for (const auto& x : table.rows[u])
        if (x.split == Split::train) is_train[u][x.item] = 1;
    }
    for (const auto& r : inputs.reviews) {
      if (!r.user_id || !r.item_id) continue;
      auto u = users.find(*r.user_id);
      auto i = items.find(*r.item_id);
      if (u == users.end() || i == items.end() || !is_train[u->second][i->second]) continue;
      reviews[{u->second, i->second}] = r.text;
    }
  }
  std::map<std::size_t, std::string> user_text, item_text;
  for (const auto& r : inputs.user_features) {
    if (!r.user_id) continue;
    if (auto u = users.find(*r.user_id); u != users.end()) user_text[u->second] = r.text;
  }
  for (const auto& r : inputs.item_features) {
    if (!r.item_id) continue;
    if (auto i = items.find(*r.item_id); i != items.end()) item_text[i->second] = r.text;
  }

  std::vector<std::string> texts;
  for (const auto& [k, t] : reviews) texts.push_back(t);
  for (const auto& [k, t] : user_text) texts.push_back(t);
  for (const auto& [k, t] : item_text) texts.push_back(t);
  std::vector<std::string> forced;
  for (const auto& p : template_phrases())
    for (auto& w : tokenize(p)) forced.push_back(std::move(w));
  if (texts.empty()) texts.push_back(std::string());

  PreparedCorpus c;
  c.vocab = ExtendedVocabulary::build(texts, options.min_freq, options.max_vocab, forced);
  c.vocab.attach(table.users(), table.items());
  c.table = std::move(table);

  for (std::size_t u = 0; u < c.table.users(); ++u) {
    const auto train = c.train_items(u);
    if (!train.empty()) c.interaction_docs.push_back(build_interaction_doc(c.vocab, u, train));
  }
  for (const auto& [key, text] : reviews)
    if (auto d = build_review_doc(c.vocab, key.first, key.second, text)) c.review_docs.push_back(std::move(*d));
  for (const auto& [u, text] : user_text)
    if (auto d = build_feature_doc(c.vocab, Entity{TokenKind::user, u}, text)) c.feature_docs.push_back(std::move(*d));
  for (const auto& [i, text] : item_text)
    if (auto d = build_feature_doc(c.vocab, Entity{TokenKind::item, i}, text)) c.feature_docs.push_back(std::move(*d));
  return c;
}

void write_documents(const std::filesystem::path& path, const std::vector<Document>& docs) {
  ByteWriter w;
  w.put(static_cast<std::uint32_t>(docs.size()));
  for (const auto& d : docs) {
    w.put(static_cast<std::uint32_t>(d.family));
    w.put(d.user ? static_cast<std::uint32_t>(*d.user) : kNone);
    w.put(d.item ? static_cast<std::uint32_t>(*d.item) : kNone);
    w.put(static_cast<std::uint32_t>(d.prompt.size()));
    for (TokenId t : d.prompt) w.put(t);
    w.put(static_cast<std::uint32_t>(d.main.size()));
    for (TokenId t : d.main) w.put(t);
  }
  w.save(path);
}

std::vector<Document> read_documents(const std::filesystem::path& path, const ExtendedVocabulary& vocab) {
  ByteReader r = ByteReader::open(path);
  const auto n = r.get<std::uint32_t>();
  std::vector<Document> docs;
  auto read_ids = [&](std::vector<TokenId>& ids) {
    const auto len = r.get<std::uint32_t>();
    r.need(static_cast<std::size_t>(len) * 4);
    ids.resize(len);
    for (auto& t : ids) {
      t = r.get<std::uint32_t>();
      if (t >= vocab.total_size()) throw FormatError(path.string() + ": token id " + std::to_string(t) + " out of range");
    }
  };
  for (std::uint32_t k = 0; k < n; ++k) {
    Document d;
    const auto family = r.get<std::uint32_t>();
    if (family > 3) throw FormatError(path.string() + ": unknown document family " + std::to_string(family));
    d.family = static_cast<DocFamily>(family);
    d.main_kind = d.family == DocFamily::interaction ? TokenKind::item : TokenKind::vocab;
    if (auto u = r.get<std::uint32_t>(); u != kNone) d.user = u;
    if (auto i = r.get<std::uint32_t>(); i != kNone) d.item = i;
    read_ids(d.prompt);
    read_ids(d.main);
    try {
      validate_document(d, vocab);
    } catch (const ValidationError& e) {
      throw FormatError(path.string() + ": " + e.what());
    }
    docs.push_back(std::move(d));
  }
  if (!r.at_end()) throw FormatError(path.string() + ": trailing bytes");
  return docs;
}

void save_prepared(const PreparedCorpus& c, const std::filesystem::path& dir, const PrepareOptions& options) {
  std::filesystem::create_directories(dir);
  c.vocab.save(dir / "vocab.txt");
  write_id_map(dir / "user_map.tsv", c.table.user_ids);
  write_id_map(dir / "item_map.tsv", c.table.item_ids);
  {
    std::ostringstream s;
    s << "user,item,rating,timestamp,split\n";
    for (std::size_t u = 0; u < c.table.users(); ++u)
      for (const auto& x : c.table.rows[u])
        s << u << ',' << x.item << ',' << x.rating << ',' << x.timestamp << ',' << to_string(x.split) << '\n';
    write_file_atomic(dir / "splits.csv", s.str());
  }
  {
    ByteWriter w;
    w.put(static_cast<std::uint32_t>(c.table.users()));
    for (std::size_t u = 0; u < c.table.users(); ++u) {
      w.put(static_cast<std::uint32_t>(c.table.rows[u].size()));
      for (const auto& x : c.table.rows[u]) w.put(c.vocab.item_token(x.item));
    }
    w.save(dir / "interactions.bin");
  }
  write_documents(dir / "docs_interaction.bin", c.interaction_docs);
  write_documents(dir / "docs_review.bin", c.review_docs);
  write_documents(dir / "docs_feature.bin", c.feature_docs);

  nlohmann::ordered_json j;
  j["users"] = c.table.users();
  j["items"] = c.table.items();
  j["words"] = c.vocab.word_count();
  j["interactions"] = c.table.interaction_count();
  j["interaction_docs"] = c.interaction_docs.size();
  j["review_docs"] = c.review_docs.size();
  j["feature_docs"] = c.feature_docs.size();
  j["min_freq"] = options.min_freq;
  j["max_vocab"] = options.max_vocab;
  j["seed"] = options.seed;
  j["rating_threshold"] = options.rating_threshold;
  j["core"] = options.core;
  write_file_atomic(dir / "prepare.json", j.dump(2) + "\n");
}

PreparedCorpus load_prepared(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw ValidationError("prepared corpus directory not found: " + dir.string());
  PreparedCorpus c;
  c.vocab = ExtendedVocabulary::load(dir / "vocab.txt");
  c.table.user_ids = read_id_map(dir / "user_map.tsv");
  c.table.item_ids = read_id_map(dir / "item_map.tsv");
  if (c.table.users() != c.vocab.user_count() || c.table.items() != c.vocab.item_count()) {
    throw FormatError("id maps disagree with the vocabulary header in " + dir.string());
  }
  c.table.rows.resize(c.table.users());
  {
    std::ifstream in(dir / "splits.csv", std::ios::binary);
    if (!in) throw ValidationError("cannot open " + (dir / "splits.csv").string());
    std::string line;
    std::getline(in, line);
    if (line != "user,item,rating,timestamp,split") throw FormatError("splits.csv: unexpected header");
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      const auto f = split_csv_line(line);
      if (f.size() != 5) throw FormatError("splits.csv line " + std::to_string(lineno) + ": expected 5 fields");
      try {
        const std::size_t u = std::stoul(f[0]);
        Interaction x;
        x.item = std::stoul(f[1]);
        x.rating = std::stod(f[2]);
        x.timestamp = std::stoll(f[3]);
        x.split = parse_split(f[4]);
        if (u >= c.table.users() || x.item >= c.table.items()) throw std::out_of_range("index");
        c.table.rows[u].push_back(x);
      } catch (const std::logic_error&) {
        throw FormatError("splits.csv line " + std::to_string(lineno) + ": bad record");
      } catch (const ValidationError&) {
        throw FormatError("splits.csv line " + std::to_string(lineno) + ": bad split name");
      }
    }
  }
  c.interaction_docs = read_documents(dir / "docs_interaction.bin", c.vocab);
  c.review_docs = read_documents(dir / "docs_review.bin", c.vocab);
  c.feature_docs = read_documents(dir / "docs_feature.bin", c.vocab);
  return c;
}

}  // namespace cllm4rec
