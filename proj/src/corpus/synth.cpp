// SPDX-License-Identifier: Apache-2.0
#include "cllm4rec/synth.hpp"

#include <fstream>
#include <json.hpp>

#include "cllm4rec/errors.hpp"
#include "cllm4rec/rng.hpp"

namespace cllm4rec {

std::size_t block_of(std::size_t k, std::size_t n, std::size_t blocks) {
  return k * blocks / n;
}

SynthDataset synth_generate(const SynthConfig& c) {
  if (c.users == 0 || c.items == 0) throw ValidationError("synth: users and items must be positive");
  if (c.blocks == 0 || c.blocks > c.users || c.blocks > c.items) {
    throw ValidationError("synth: blocks must lie in [1, min(users, items)]");
  }
  if (!(c.noise >= 0.0 && c.noise <= 1.0)) throw ValidationError("synth: noise must lie in [0, 1]");
  if (c.inter_per_user == 0) throw ValidationError("synth: inter_per_user must be positive");
  if (c.words_per_block == 0 || c.review_length == 0) throw ValidationError("synth: empty review vocabulary");

  std::vector<std::vector<std::size_t>> block_items(c.blocks);
  for (std::size_t j = 0; j < c.items; ++j) block_items[block_of(j, c.items, c.blocks)].push_back(j);
  for (const auto& b : block_items) {
    if (c.inter_per_user > b.size()) {
      throw ValidationError("synth: inter_per_user " + std::to_string(c.inter_per_user) + " exceeds the " +
                            std::to_string(b.size()) + " items of a block");
    }
  }

  SynthDataset d;
  d.config = c;
  for (std::size_t u = 0; u < c.users; ++u) d.table.user_ids.push_back("u" + std::to_string(u));
  for (std::size_t j = 0; j < c.items; ++j) d.table.item_ids.push_back("i" + std::to_string(j));
  d.table.rows.resize(c.users);
  for (std::size_t u = 0; u < c.users; ++u) d.truth.user_block.push_back(block_of(u, c.users, c.blocks));
  for (std::size_t j = 0; j < c.items; ++j) d.truth.item_block.push_back(block_of(j, c.items, c.blocks));

  std::int64_t clock = 0;
  for (std::size_t u = 0; u < c.users; ++u) {
    Rng rng = make_rng(c.seed, {0x73796e7468, u});
    const std::size_t home = d.truth.user_block[u];
    std::vector<std::size_t> inside = block_items[home];
    std::vector<std::size_t> outside;
    for (std::size_t j = 0; j < c.items; ++j)
      if (d.truth.item_block[j] != home) outside.push_back(j);
    for (std::size_t k = 0; k < c.inter_per_user; ++k) {
      const bool cross = c.blocks > 1 && !outside.empty() && uniform_real(rng) < c.noise;
      auto& pool = (cross || inside.empty()) ? outside : inside;
      const std::size_t pick = uniform_index(rng, pool.size());
      const std::size_t item = pool[pick];
      pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(pick));
      if (d.truth.item_block[item] != home) ++d.truth.cross_block;
      d.table.rows[u].push_back(Interaction{item, 5.0, clock++, Split::train});

      std::string text;
      const std::size_t ib = d.truth.item_block[item];
      for (std::size_t w = 0; w < c.review_length; ++w) {
        if (w) text += ' ';
        text += "b" + std::to_string(ib) + "w" + std::to_string(uniform_index(rng, c.words_per_block));
      }
      d.reviews.push_back(Review{d.table.user_ids[u], d.table.item_ids[item], std::move(text)});
    }
  }
  return d;
}

PrepareInputs to_prepare_inputs(const SynthDataset& data) {
  PrepareInputs in;
  in.raw = data.table;
  for (const auto& r : data.reviews) in.reviews.push_back(TextRecord{r.user_id, r.item_id, r.text});
  return in;
}

void write_raw_dataset(const SynthDataset& data, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "interactions.csv", std::ios::binary);
    if (!out) throw ValidationError("cannot write " + (dir / "interactions.csv").string());
    out << "user_id,item_id,rating,timestamp\n";
    for (std::size_t u = 0; u < data.table.users(); ++u)
      for (const auto& x : data.table.rows[u])
        out << data.table.user_ids[u] << ',' << data.table.item_ids[x.item] << ',' << static_cast<int>(x.rating)
            << ',' << x.timestamp << '\n';
  }
  std::ofstream out(dir / "reviews.jsonl", std::ios::binary);
  if (!out) throw ValidationError("cannot write " + (dir / "reviews.jsonl").string());
  for (const auto& r : data.reviews) {
    nlohmann::ordered_json j;
    j["user_id"] = r.user_id;
    j["item_id"] = r.item_id;
    j["text"] = r.text;
    out << j.dump() << '\n';
  }
}

void write_synth_truth(const SynthDataset& data, const std::filesystem::path& path) {
  nlohmann::ordered_json j;
  const auto& c = data.config;
  j["users"] = c.users;
  j["items"] = c.items;
  j["blocks"] = c.blocks;
  j["inter_per_user"] = c.inter_per_user;
  j["noise"] = c.noise;
  j["seed"] = c.seed;
  j["cross_block_interactions"] = data.truth.cross_block;
  nlohmann::ordered_json ub = nlohmann::ordered_json::object();
  for (std::size_t u = 0; u < data.truth.user_block.size(); ++u) ub[data.table.user_ids[u]] = data.truth.user_block[u];
  nlohmann::ordered_json ib = nlohmann::ordered_json::object();
  for (std::size_t i = 0; i < data.truth.item_block.size(); ++i) ib[data.table.item_ids[i]] = data.truth.item_block[i];
  j["user_block"] = std::move(ub);
  j["item_block"] = std::move(ib);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

}  // namespace cllm4rec
