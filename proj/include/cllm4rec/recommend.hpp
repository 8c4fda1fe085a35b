// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <json.hpp>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "cllm4rec/corpus_io.hpp"
#include "cllm4rec/model.hpp"

namespace cllm4rec {

struct ScoredItem {
  std::size_t item = 0;
  double score = 0;
};

/// 0/1 mask over the J items of the user's train interactions.
std::vector<std::uint8_t> train_mask(const InteractionTable& table, std::size_t user);

/// Recommendation distribution for `user` from the full-history prompt (the
/// most recent items that fit the context).
template <typename T>
std::vector<T> rec_scores(const Model<T>& model, const PreparedCorpus& corpus, std::size_t user);

/// Item-head logits after the interaction prompt followed by the user's
/// train history (the ranking of the pretrained collaborative model).
template <typename T>
std::vector<T> pretrain_scores(const Model<T>& model, const PreparedCorpus& corpus, std::size_t user);

/// Top-M uninteracted items by rec_scores; ties by ascending item index.
/// Unknown users throw ValidationError.
template <typename T>
std::vector<ScoredItem> recommend_topM(const Model<T>& model, const PreparedCorpus& corpus, std::size_t user,
                                       std::size_t m);

template <typename T>
std::vector<ScoredItem> recommend_pretrain(const Model<T>& model, const PreparedCorpus& corpus, std::size_t user,
                                           std::size_t m);

/// Items by train-split degree, ties by index.
std::vector<std::size_t> popularity_ranking(const InteractionTable& table);
std::vector<ScoredItem> recommend_popular(const InteractionTable& table, std::size_t user, std::size_t m);

/// Ranked candidate list for a user, train items already removed.
using Ranker = std::function<std::vector<std::size_t>(std::size_t user, std::size_t depth)>;

template <typename T>
Ranker model_ranker(const Model<T>& model, const PreparedCorpus& corpus);
template <typename T>
Ranker pretrain_ranker(const Model<T>& model, const PreparedCorpus& corpus);
Ranker popularity_ranker(const InteractionTable& table);

struct UserMetrics {
  std::size_t user = 0;
  std::map<std::string, double> values;
};

struct RankingReport {
  Split split = Split::test;
  std::map<std::string, double> metrics;  // e.g. "recall@20" -> mean
  std::size_t users_evaluated = 0;
  std::vector<UserMetrics> per_user;

  double at(const std::string& name) const;
};

/// Parses names like "recall@20" and "ndcg@100".
struct MetricName {
  enum Kind { recall, ndcg } kind = recall;
  std::size_t k = 1;
};
MetricName parse_metric_name(const std::string& name);

/// Averages each metric over users with a nonempty holdout in `split`.
RankingReport evaluate_ranker(const InteractionTable& table, Split split, std::span<const std::string> metrics,
                              const Ranker& ranker);

/// Report file: {"metrics", "users", "per_user"?, "checkpoint", "split", "config_hash"}.
nlohmann::ordered_json report_to_json(const RankingReport& report, const std::string& checkpoint,
                                      const std::string& config_hash, bool include_per_user);

/// FNV-1a 64-bit hash of the compact JSON dump, as 16 hex digits.
std::string config_hash(const nlohmann::json& config);

}  // namespace cllm4rec
