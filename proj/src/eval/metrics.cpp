// SPDX-License-Identifier: Apache-2.0
#include "cllm4rec/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <unordered_set>

#include "cllm4rec/errors.hpp"

namespace cllm4rec {

namespace {

std::size_t hits_in_top(std::span<const std::size_t> ranked, const std::unordered_set<std::size_t>& holdout,
                        std::size_t k, std::vector<std::size_t>* ranks = nullptr) {
  std::size_t hits = 0;
  const std::size_t n = std::min(k, ranked.size());
  for (std::size_t p = 0; p < n; ++p) {
    if (holdout.count(ranked[p])) {
      ++hits;
      if (ranks) ranks->push_back(p + 1);
    }
  }
  return hits;
}

}  // namespace

std::optional<double> recall_at_k(std::span<const std::size_t> ranked, std::span<const std::size_t> holdout,
                                  std::size_t k) {
  if (k == 0) throw ValidationError("recall@K needs K >= 1");
  const std::unordered_set<std::size_t> h(holdout.begin(), holdout.end());
  if (h.empty()) return std::nullopt;
  const std::size_t hits = hits_in_top(ranked, h, k);
  return static_cast<double>(hits) / static_cast<double>(std::min(k, h.size()));
}

std::optional<double> ndcg_at_k(std::span<const std::size_t> ranked, std::span<const std::size_t> holdout,
                                std::size_t k) {
  if (k == 0) throw ValidationError("NDCG@K needs K >= 1");
  const std::unordered_set<std::size_t> h(holdout.begin(), holdout.end());
  if (h.empty()) return std::nullopt;
  std::vector<std::size_t> ranks;
  hits_in_top(ranked, h, k, &ranks);
  double dcg = 0;
  for (std::size_t p : ranks) dcg += 1.0 / std::log2(static_cast<double>(p) + 1.0);
  double idcg = 0;
  for (std::size_t p = 1, n = std::min(k, h.size()); p <= n; ++p) idcg += 1.0 / std::log2(static_cast<double>(p) + 1.0);
  return dcg / idcg;
}

template <typename T>
std::vector<std::size_t> top_m(std::span<const T> scores, std::span<const std::uint8_t> excluded, std::size_t m) {
  if (!excluded.empty() && excluded.size() != scores.size()) throw ShapeError("top_m: exclusion mask size mismatch");
  std::vector<std::size_t> idx;
  idx.reserve(scores.size());
  for (std::size_t j = 0; j < scores.size(); ++j)
    if (excluded.empty() || !excluded[j]) idx.push_back(j);
  const auto better = [&](std::size_t a, std::size_t b) {
    return scores[a] != scores[b] ? scores[a] > scores[b] : a < b;
  };
  if (m < idx.size()) {
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(m), idx.end(), better);
    idx.resize(m);
  } else {
    std::sort(idx.begin(), idx.end(), better);
  }
  return idx;
}

template std::vector<std::size_t> top_m<float>(std::span<const float>, std::span<const std::uint8_t>, std::size_t);
template std::vector<std::size_t> top_m<double>(std::span<const double>, std::span<const std::uint8_t>, std::size_t);

}  // namespace cllm4rec
