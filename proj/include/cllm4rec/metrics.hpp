// SPDX-License-Identifier: Apache-2.0
// Top-K ranking metrics for implicit feedback.
#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

namespace cllm4rec {

/// |top-K ∩ holdout| / min(K, |holdout|). nullopt when the holdout is empty
/// (the user is skipped, not scored 0). K = 0 throws ValidationError.
std::optional<double> recall_at_k(std::span<const std::size_t> ranked, std::span<const std::size_t> holdout,
                                  std::size_t k);

/// Binary-relevance NDCG: DCG = sum over hits at rank p <= K of 1/log2(p+1),
/// normalized by the ideal DCG over min(K, |holdout|) ranks.
std::optional<double> ndcg_at_k(std::span<const std::size_t> ranked, std::span<const std::size_t> holdout,
                                std::size_t k);

/// Indices of the `m` highest scores, skipping `excluded` (a 0/1 mask of
/// scores.size(), may be empty). Ties go to the smaller index.
template <typename T>
std::vector<std::size_t> top_m(std::span<const T> scores, std::span<const std::uint8_t> excluded, std::size_t m);

}  // namespace cllm4rec
