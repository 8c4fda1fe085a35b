// SPDX-License-Identifier: Apache-2.0
#include "cllm4rec/interactions.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <unordered_map>

#include "cllm4rec/errors.hpp"
#include "cllm4rec/rng.hpp"

namespace cllm4rec {

const char* to_string(Split split) {
  switch (split) {
    case Split::train:
      return "train";
    case Split::val:
      return "val";
    case Split::test:
      return "test";
  }
  return "?";
}

Split parse_split(const std::string& name) {
  if (name == "train") return Split::train;
  if (name == "val") return Split::val;
  if (name == "test") return Split::test;
  throw ValidationError("unknown split '" + name + "'");
}

std::size_t InteractionTable::interaction_count() const {
  std::size_t n = 0;
  for (const auto& r : rows) n += r.size();
  return n;
}

std::vector<std::size_t> InteractionTable::items_of(std::size_t user, Split split) const {
  std::vector<std::size_t> out;
  for (const auto& x : rows.at(user))
    if (x.split == split) out.push_back(x.item);
  return out;
}

std::vector<std::size_t> InteractionTable::item_degrees(Split split) const {
  std::vector<std::size_t> deg(items(), 0);
  for (const auto& r : rows)
    for (const auto& x : r)
      if (x.split == split) ++deg[x.item];
  return deg;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur.push_back('"');
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur.push_back(c);
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(std::move(cur));
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  fields.push_back(std::move(cur));
  return fields;
}

namespace {

void sort_rows(InteractionTable& t) {
  for (auto& r : t.rows) {
    std::sort(r.begin(), r.end(), [](const Interaction& a, const Interaction& b) {
      return a.timestamp != b.timestamp ? a.timestamp < b.timestamp : a.item < b.item;
    });
  }
}

template <typename N>
N parse_number(const std::string& s, const char* column, std::size_t line) {
  N value{};
  const char* first = s.data();
  const char* last = s.data() + s.size();
  while (first < last && *first == ' ') ++first;
  while (last > first && last[-1] == ' ') --last;
  auto [ptr, ec] = std::from_chars(first, last, value);
  if (ec != std::errc() || ptr != last) {
    throw ParseError(std::string("invalid ") + column + " value '" + s + "'", line);
  }
  return value;
}

}  // namespace

InteractionTable parse_interactions(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw ParseError("empty interactions file (missing header)", 1);
  auto header = split_csv_line(line);
  auto column = [&](const char* name) {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    throw ParseError(std::string("missing column '") + name + "'", 1);
  };
  const std::size_t cu = column("user_id");
  const std::size_t ci = column("item_id");
  const std::size_t cr = column("rating");
  const std::size_t ct = column("timestamp");
  const std::size_t needed = std::max({cu, ci, cr, ct}) + 1;

  InteractionTable t;
  std::unordered_map<std::string, std::size_t> users, items;
  // (user, item) -> position in t.rows[user]
  std::map<std::pair<std::size_t, std::size_t>, std::size_t> seen;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    auto f = split_csv_line(line);
    if (f.size() < needed) {
      throw ParseError("expected " + std::to_string(header.size()) + " fields, got " + std::to_string(f.size()),
                       lineno);
    }
    if (f[cu].empty()) throw ParseError("empty user_id", lineno);
    if (f[ci].empty()) throw ParseError("empty item_id", lineno);
    Interaction x;
    x.rating = parse_number<double>(f[cr], "rating", lineno);
    x.timestamp = parse_number<std::int64_t>(f[ct], "timestamp", lineno);
    auto [uit, unew] = users.emplace(f[cu], t.user_ids.size());
    if (unew) {
      t.user_ids.push_back(f[cu]);
      t.rows.emplace_back();
    }
    auto [iit, inew] = items.emplace(f[ci], t.item_ids.size());
    if (inew) t.item_ids.push_back(f[ci]);
    x.item = iit->second;
    const std::size_t u = uit->second;
    auto [sit, fresh] = seen.emplace(std::make_pair(u, x.item), t.rows[u].size());
    if (fresh) {
      t.rows[u].push_back(x);
    } else if (x.timestamp >= t.rows[u][sit->second].timestamp) {
      t.rows[u][sit->second] = x;
    }
  }
  sort_rows(t);
  return t;
}

InteractionTable load_interactions(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open interactions file " + path.string());
  return parse_interactions(in);
}

InteractionTable binarize_and_core(const InteractionTable& table, double threshold, std::size_t core) {
  const std::size_t nu = table.users();
  const std::size_t ni = table.items();
  std::vector<std::vector<Interaction>> rows(nu);
  for (std::size_t u = 0; u < nu; ++u)
    for (const auto& x : table.rows[u])
      if (x.rating > threshold) rows[u].push_back(x);

  std::vector<char> user_alive(nu, 1), item_alive(ni, 1);
  for (bool changed = true; changed;) {
    changed = false;
    std::vector<std::size_t> udeg(nu, 0), ideg(ni, 0);
    for (std::size_t u = 0; u < nu; ++u) {
      if (!user_alive[u]) continue;
      for (const auto& x : rows[u])
        if (item_alive[x.item]) {
          ++udeg[u];
          ++ideg[x.item];
        }
    }
    for (std::size_t u = 0; u < nu; ++u)
      if (user_alive[u] && udeg[u] < core) {
        user_alive[u] = 0;
        changed = true;
      }
    for (std::size_t i = 0; i < ni; ++i)
      if (item_alive[i] && ideg[i] < core) {
        item_alive[i] = 0;
        changed = true;
      }
  }

  InteractionTable out;
  std::vector<std::size_t> item_index(ni, 0);
  for (std::size_t i = 0; i < ni; ++i) {
    if (!item_alive[i]) continue;
    item_index[i] = out.item_ids.size();
    out.item_ids.push_back(table.item_ids[i]);
  }
  for (std::size_t u = 0; u < nu; ++u) {
    if (!user_alive[u]) continue;
    std::vector<Interaction> kept;
    for (auto x : rows[u]) {
      if (!item_alive[x.item]) continue;
      x.item = item_index[x.item];
      kept.push_back(x);
    }
    out.user_ids.push_back(table.user_ids[u]);
    out.rows.push_back(std::move(kept));
  }
  if (out.users() == 0 || out.items() == 0) {
    throw EmptyResultError("no interactions survive binarization at threshold " + std::to_string(threshold) +
                          " and " + std::to_string(core) + "-core filtering; try a smaller core");
  }
  sort_rows(out);
  return out;
}

InteractionTable split_interactions(const InteractionTable& table, std::uint64_t seed, SplitRatios ratios) {
  InteractionTable out = table;
  for (std::size_t u = 0; u < out.users(); ++u) {
    auto& r = out.rows[u];
    const std::size_t n = r.size();
    if (n < 3) {
      throw ValidationError("user '" + out.user_ids[u] + "' has " + std::to_string(n) +
                            " interactions; splitting needs at least 3");
    }
    const auto quota = [n](double ratio) {
      return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(ratio * static_cast<double>(n))));
    };
    std::size_t n_val = quota(ratios.val);
    std::size_t n_test = quota(ratios.test);
    while (n_val + n_test > n - 1) {
      if (n_val >= n_test && n_val > 1) {
        --n_val;
      } else {
        --n_test;
      }
    }
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng = make_rng(seed, {0x73706c6974, u});
    shuffle(order.begin(), order.end(), rng);
    for (std::size_t k = 0; k < n; ++k) {
      Split s = Split::train;
      if (k < n_val) {
        s = Split::val;
      } else if (k < n_val + n_test) {
        s = Split::test;
      }
      r[order[k]].split = s;
    }
  }
  return out;
}

void write_id_map(const std::filesystem::path& path, const std::vector<std::string>& ids) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write " + path.string());
  for (std::size_t i = 0; i < ids.size(); ++i) out << ids[i] << '\t' << i << '\n';
}

std::vector<std::string> read_id_map(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path.string());
  std::vector<std::string> ids;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto tab = line.rfind('\t');
    if (tab == std::string::npos) throw ParseError("expected 'original_id<TAB>index'", lineno);
    const std::size_t index = parse_number<std::size_t>(line.substr(tab + 1), "index", lineno);
    if (index != ids.size()) throw ParseError("indices must be dense and ascending", lineno);
    ids.push_back(line.substr(0, tab));
  }
  return ids;
}

}  // namespace cllm4rec
