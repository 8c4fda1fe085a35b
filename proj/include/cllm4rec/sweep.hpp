// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <json.hpp>
#include <string>
#include <vector>

#include "cllm4rec/trainer.hpp"

namespace cllm4rec {

struct SweepRow {
  double value = 0;
  std::size_t best_epoch = 0;
  RankingReport test;
};

struct SweepReport {
  std::string param;  // lambda_c | lambda_l | p_m
  std::vector<SweepRow> rows;

  /// {"param", "rows": [{"value", "best_epoch", "metrics": {...}}]}
  nlohmann::ordered_json to_json() const;
};

/// Sets `param` in a copy of `train`, runs warm-up, pretraining and
/// finetuning at the shared seed for every value (each in
/// out_dir/<param>_<index>), and evaluates the selected model on the test
/// split. An empty value list or unknown parameter throws ValidationError.
SweepReport run_sweep(const PreparedCorpus& corpus, const ModelConfig& base, const TrainConfig& train,
                      const std::string& param, const std::vector<double>& values,
                      const std::vector<std::string>& metrics, const RunOptions& options);

/// The config after setting one sweep parameter (validated).
TrainConfig with_param(TrainConfig train, const std::string& param, double value);

}  // namespace cllm4rec
