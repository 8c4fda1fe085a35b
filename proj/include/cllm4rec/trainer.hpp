// SPDX-License-Identifier: Apache-2.0
//
// Training schedule: content warm-up, alternating collaborative/content
// pretraining with mutual regularization, and masked-prompt finetuning with
// validation-based selection.
//
// Every random draw of an epoch comes from a stream derived from
// (seed, stage, epoch), and optimizer moments live in the checkpoint, so a
// run resumed from an epoch checkpoint repeats the uninterrupted run.
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <json.hpp>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cllm4rec/corpus_io.hpp"
#include "cllm4rec/losses.hpp"
#include "cllm4rec/model.hpp"
#include "cllm4rec/optimizer.hpp"
#include "cllm4rec/recommend.hpp"

namespace cllm4rec {

struct TrainConfig {
  double lambda_l = 0.0;
  double lambda_c = 1.0;
  double p_m = 0.3;
  std::size_t warmup_epochs = 10;
  std::size_t pretrain_epochs = 100;
  std::size_t finetune_epochs = 150;
  double lr = 1e-3;
  double finetune_lr = 1e-3;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
  bool no_reorder = false;
  bool no_content = false;
  bool trainable_backbone = false;
  std::vector<std::string> val_metrics = {"recall@20", "recall@40", "ndcg@100"};
  std::string select_metric = "ndcg@100";

  void validate() const;
  nlohmann::ordered_json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
  LossWeights weights() const { return {lambda_l, no_content ? 0.0 : lambda_c}; }
};

struct EpochStats {
  std::string stage;  // warmup | pretrain_l | pretrain_c | finetune
  std::size_t epoch = 0;
  double loss_lm = 0;
  double loss_mr = 0;
  double loss_prior = 0;
  std::map<std::string, double> val;  // finetune only
  double wall_ms = 0;

  /// One training-log line.
  nlohmann::ordered_json to_json() const;
};

struct TrainerHooks {
  std::function<void(const EpochStats&)> on_epoch;
  /// After every warm-up and pretraining epoch.
  std::function<void(const std::string& stage, std::size_t epoch)> on_checkpoint;
  /// Finetuning found a new best validation score (epoch 0 = before training).
  std::function<void(std::size_t epoch, const RankingReport& val)> on_best;
};

struct FinetuneResult {
  std::size_t best_epoch = 0;
  RankingReport best_val;
  std::vector<EpochStats> epochs;
};

class Trainer {
 public:
  /// `model` must outlive the trainer and stay at the same address.
  Trainer(const PreparedCorpus& corpus, Model<float>& model, TrainConfig config, TrainerHooks hooks = {});

  /// Content LM only; the collaborative tables are not touched.
  std::vector<EpochStats> warmup(std::size_t first_epoch = 1);
  /// Per epoch: L pass against a fresh content snapshot, then C pass against
  /// a fresh collaborative snapshot. With no_content only the L pass runs,
  /// without regularization.
  std::vector<EpochStats> pretrain(std::size_t first_epoch = 1);
  /// Restores the best-validation weights before returning.
  FinetuneResult finetune();

  EpochStats warmup_epoch(std::size_t epoch);
  EpochStats l_epoch(std::size_t epoch);
  EpochStats c_epoch(std::size_t epoch);
  EpochStats finetune_epoch(std::size_t epoch);
  RankingReport validate() const;

  /// Documents of one epoch, as trained (reordering and subsampling applied).
  std::vector<Document> interaction_docs(std::size_t epoch) const;
  std::vector<MaskedSample> masked_samples(std::size_t epoch) const;

  std::size_t content_snapshot_refreshes() const noexcept { return content_snap_.refreshes; }
  std::size_t collaborative_snapshot_refreshes() const noexcept { return collab_snap_.refreshes; }
  const TrainConfig& config() const noexcept { return config_; }

 private:
  enum class Phase { warmup, l_step, c_step, finetune };
  template <typename Item, typename Build>
  EpochStats run_pass(const std::string& stage, std::size_t epoch, std::vector<Item> items, Phase phase,
                      const Build& build);
  std::vector<Parameter<float>*> group(Phase phase);
  std::vector<Document> content_docs(std::size_t epoch, std::uint64_t tag) const;

  const PreparedCorpus& corpus_;
  Model<float>& model_;
  TrainConfig config_;
  TrainerHooks hooks_;
  Optimizer<float> optimizer_;
  Snapshot<float> content_snap_;
  Snapshot<float> collab_snap_;
};

/// Item limit of an interaction document's main text.
std::size_t interaction_window(const ModelConfig& model, const ExtendedVocabulary& vocab);
/// Item limit of a recommendation prompt.
std::size_t rec_window(const ModelConfig& model, const ExtendedVocabulary& vocab);

/// ModelConfig sized for a corpus.
ModelConfig model_config_for(const PreparedCorpus& corpus, ModelConfig base, const TrainConfig& train);

// File-level runs used by the command-line tool. Checkpoints and the JSONL
// training log go to `out_dir`:
//   pretrain.ckpt        latest warm-up/pretraining epoch
//   finetune.ckpt        best validation epoch
//   train_log.jsonl
struct RunOptions {
  std::filesystem::path out_dir;
  nlohmann::json run_config = nlohmann::json::object();  // echoed into checkpoints
  bool resume = false;
  bool quiet = true;
};

Model<float> run_pretraining(const PreparedCorpus& corpus, const ModelConfig& model_config, const TrainConfig& train,
                             const RunOptions& options);
FinetuneResult run_finetuning(const PreparedCorpus& corpus, Model<float>& model, const TrainConfig& train,
                              const RunOptions& options);

}  // namespace cllm4rec
