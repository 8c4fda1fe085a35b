// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cllm4rec/corpus_io.hpp"
#include "cllm4rec/interactions.hpp"

namespace cllm4rec {

/// Planted block structure: users and items are split into `blocks` groups;
/// a user interacts with items of its own block, except for a `noise`
/// fraction of draws that go to another block.
struct SynthConfig {
  std::size_t users = 200;
  std::size_t items = 50;
  std::size_t blocks = 2;
  std::size_t inter_per_user = 20;
  std::size_t words_per_block = 20;
  std::size_t review_length = 8;
  double noise = 0.05;
  std::uint64_t seed = 0;
};

struct Review {
  std::string user_id;
  std::string item_id;
  std::string text;
};

struct SynthTruth {
  std::vector<std::size_t> user_block;  // by generator index (id "u<k>")
  std::vector<std::size_t> item_block;  // by generator index (id "i<k>")
  std::size_t cross_block = 0;          // interactions outside the user's block
};

struct SynthDataset {
  SynthConfig config;
  InteractionTable table;  // raw: ratings 5, timestamps = draw order
  std::vector<Review> reviews;
  SynthTruth truth;
};

/// Block of index `k` among `n` entities split into `blocks` near-even groups.
std::size_t block_of(std::size_t k, std::size_t n, std::size_t blocks);

SynthDataset synth_generate(const SynthConfig& config);

/// The dataset as prepare-pipeline input (what the raw files would load to).
PrepareInputs to_prepare_inputs(const SynthDataset& data);

/// Writes `interactions.csv` and `reviews.jsonl` under `dir`.
void write_raw_dataset(const SynthDataset& data, const std::filesystem::path& dir);
/// Writes `synth_truth.json`.
void write_synth_truth(const SynthDataset& data, const std::filesystem::path& path);

}  // namespace cllm4rec
