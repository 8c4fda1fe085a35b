// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint file layout (little-endian):
//
//   "CLLMRECK"  u32 version
//   repeated records:
//     u16 name length, name bytes, u8 rank, rank x u64 dims, u8 dtype, payload
//
// dtype: 0 = f32, 1 = f64, 2 = UTF-8 bytes, 3 = u64.
// Records: one per parameter (by name), `<name>#m` / `<name>#v` optimizer
// moments when present, `<name>#steps`, the run configuration as JSON in
// `__config__` and the trainer position as JSON in `__train_state__`.
#pragma once

#include <filesystem>
#include <json.hpp>

#include "cllm4rec/model.hpp"

namespace cllm4rec {

inline constexpr char kCheckpointMagic[] = "CLLMRECK";
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointMeta {
  /// Run configuration; save_checkpoint sets its "model" entry from the model.
  nlohmann::json config;
  nlohmann::json train_state = nlohmann::json::object();
};

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const Model<T>& model, const CheckpointMeta& meta);

/// Reads the whole file before building anything; any structural problem
/// (magic, version, truncation, missing or misshaped tensor) throws
/// FormatError.
template <typename T>
Model<T> load_checkpoint(const std::filesystem::path& path, CheckpointMeta* meta = nullptr);

/// Only the metadata records.
CheckpointMeta read_checkpoint_meta(const std::filesystem::path& path);

}  // namespace cllm4rec
