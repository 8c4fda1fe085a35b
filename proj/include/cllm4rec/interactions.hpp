// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace cllm4rec {

enum class Split : std::uint8_t { train = 0, val = 1, test = 2 };

const char* to_string(Split split);
Split parse_split(const std::string& name);

struct Interaction {
  std::size_t item = 0;
  double rating = 0;
  std::int64_t timestamp = 0;
  Split split = Split::train;

  bool operator==(const Interaction&) const = default;
};

/// User-item interactions with dense indices. `rows[u]` is sorted by
/// (timestamp, item); original string ids are kept for reporting.
struct InteractionTable {
  std::vector<std::string> user_ids;
  std::vector<std::string> item_ids;
  std::vector<std::vector<Interaction>> rows;

  std::size_t users() const noexcept { return user_ids.size(); }
  std::size_t items() const noexcept { return item_ids.size(); }
  std::size_t interaction_count() const;

  /// Items of `user` tagged `split`, in row order.
  std::vector<std::size_t> items_of(std::size_t user, Split split) const;
  /// Per-item count of interactions tagged `split`.
  std::vector<std::size_t> item_degrees(Split split) const;

  bool operator==(const InteractionTable&) const = default;
};

/// Parses CSV with header `user_id,item_id,rating,timestamp` (any column
/// order, extra columns ignored). Ids are densely reindexed in order of first
/// appearance. Duplicate (user, item) pairs keep the latest timestamp.
InteractionTable parse_interactions(std::istream& in);
InteractionTable load_interactions(const std::filesystem::path& path);

/// Drops ratings <= threshold, then prunes users and items with fewer than
/// `core` interactions until a fixpoint, and reindexes densely.
InteractionTable binarize_and_core(const InteractionTable& table, double threshold = 3.0, std::size_t core = 5);

struct SplitRatios {
  double train = 0.8;
  double val = 0.1;
  double test = 0.1;
};

/// Per-user random partition: val and test get max(1, round(ratio * n))
/// interactions each, train keeps the rest. Needs n >= 3 per user.
InteractionTable split_interactions(const InteractionTable& table, std::uint64_t seed, SplitRatios ratios = {});

/// `original_id TAB index` lines.
void write_id_map(const std::filesystem::path& path, const std::vector<std::string>& ids);
std::vector<std::string> read_id_map(const std::filesystem::path& path);

/// Splits one CSV record, honoring double-quoted fields.
std::vector<std::string> split_csv_line(const std::string& line);

}  // namespace cllm4rec
