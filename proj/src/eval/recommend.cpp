// SPDX-License-Identifier: Apache-2.0
#include "cllm4rec/recommend.hpp"

#include <algorithm>
#include <cstdio>

#include "cllm4rec/errors.hpp"
#include "cllm4rec/metrics.hpp"
#include "cllm4rec/parallel.hpp"

namespace cllm4rec {

namespace {

void check_user(const PreparedCorpus& corpus, std::size_t user) {
  if (user >= corpus.table.users()) {
    throw ValidationError("unknown user index " + std::to_string(user) + " (corpus has " +
                          std::to_string(corpus.table.users()) + " users)");
  }
}

template <typename T>
std::vector<ScoredItem> pick(const std::vector<T>& scores, const std::vector<std::uint8_t>& excluded, std::size_t m) {
  std::vector<ScoredItem> out;
  for (std::size_t j : top_m<T>(scores, excluded, m)) out.push_back({j, static_cast<double>(scores[j])});
  return out;
}

std::vector<std::size_t> items_only(const std::vector<ScoredItem>& v) {
  std::vector<std::size_t> out;
  out.reserve(v.size());
  for (const auto& s : v) out.push_back(s.item);
  return out;
}

}  // namespace

std::vector<std::uint8_t> train_mask(const InteractionTable& table, std::size_t user) {
  std::vector<std::uint8_t> mask(table.items(), 0);
  for (const auto& x : table.rows.at(user))
    if (x.split == Split::train) mask[x.item] = 1;
  return mask;
}

template <typename T>
std::vector<T> rec_scores(const Model<T>& model, const PreparedCorpus& corpus, std::size_t user) {
  check_user(corpus, user);
  const auto items = corpus.train_items(user);
  const std::size_t overhead = rec_prompt_overhead(corpus.vocab);
  const std::size_t ctx = model.config().context_length;
  if (ctx <= overhead) throw ValidationError("context_length too small for the recommendation prompt");
  const auto prompt = build_full_history_prompt(corpus.vocab, user, items, ctx - overhead);
  return model.rec_distribution(prompt);
}

template <typename T>
std::vector<T> pretrain_scores(const Model<T>& model, const PreparedCorpus& corpus, std::size_t user) {
  check_user(corpus, user);
  auto items = corpus.train_items(user);
  const std::size_t overhead = interaction_prompt_overhead(corpus.vocab);
  const std::size_t ctx = model.config().context_length;
  if (ctx <= overhead) throw ValidationError("context_length too small for the interaction prompt");
  if (items.size() > ctx - overhead) items.erase(items.begin(), items.end() - static_cast<std::ptrdiff_t>(ctx - overhead));
  std::vector<TokenId> prompt{corpus.vocab.user_token(user)};
  for (TokenId t : corpus.vocab.encode(phrases::kInteracted)) prompt.push_back(t);
  std::vector<TokenId> main;
  for (std::size_t j : items) main.push_back(corpus.vocab.item_token(j));
  return model.next_item_logits(prompt, main);
}

template <typename T>
std::vector<ScoredItem> recommend_topM(const Model<T>& model, const PreparedCorpus& corpus, std::size_t user,
                                       std::size_t m) {
  const auto scores = rec_scores(model, corpus, user);
  return pick(scores, train_mask(corpus.table, user), m);
}

template <typename T>
std::vector<ScoredItem> recommend_pretrain(const Model<T>& model, const PreparedCorpus& corpus, std::size_t user,
                                           std::size_t m) {
  const auto scores = pretrain_scores(model, corpus, user);
  return pick(scores, train_mask(corpus.table, user), m);
}

std::vector<std::size_t> popularity_ranking(const InteractionTable& table) {
  const auto deg = table.item_degrees(Split::train);
  std::vector<double> scores(deg.begin(), deg.end());
  return top_m<double>(scores, {}, scores.size());
}

std::vector<ScoredItem> recommend_popular(const InteractionTable& table, std::size_t user, std::size_t m) {
  if (user >= table.users()) throw ValidationError("unknown user index " + std::to_string(user));
  const auto deg = table.item_degrees(Split::train);
  std::vector<double> scores(deg.begin(), deg.end());
  return pick(scores, train_mask(table, user), m);
}

template <typename T>
Ranker model_ranker(const Model<T>& model, const PreparedCorpus& corpus) {
  return [&model, &corpus](std::size_t user, std::size_t depth) {
    return items_only(recommend_topM(model, corpus, user, depth));
  };
}

template <typename T>
Ranker pretrain_ranker(const Model<T>& model, const PreparedCorpus& corpus) {
  return [&model, &corpus](std::size_t user, std::size_t depth) {
    return items_only(recommend_pretrain(model, corpus, user, depth));
  };
}

Ranker popularity_ranker(const InteractionTable& table) {
  return [&table](std::size_t user, std::size_t depth) { return items_only(recommend_popular(table, user, depth)); };
}

double RankingReport::at(const std::string& name) const {
  auto it = metrics.find(name);
  if (it == metrics.end()) throw ValidationError("report has no metric '" + name + "'");
  return it->second;
}

MetricName parse_metric_name(const std::string& name) {
  const auto at = name.find('@');
  MetricName m;
  const std::string kind = name.substr(0, at);
  if (at == std::string::npos || (kind != "recall" && kind != "ndcg")) {
    throw ValidationError("metric '" + name + "' must look like recall@K or ndcg@K");
  }
  m.kind = kind == "recall" ? MetricName::recall : MetricName::ndcg;
  try {
    std::size_t used = 0;
    const long k = std::stol(name.substr(at + 1), &used);
    if (k < 1 || used != name.size() - at - 1) throw std::invalid_argument("k");
    m.k = static_cast<std::size_t>(k);
  } catch (const std::logic_error&) {
    throw ValidationError("metric '" + name + "' needs a positive integer K");
  }
  return m;
}

RankingReport evaluate_ranker(const InteractionTable& table, Split split, std::span<const std::string> metrics,
                              const Ranker& ranker) {
  std::vector<MetricName> parsed;
  std::size_t depth = 1;
  for (const auto& name : metrics) {
    parsed.push_back(parse_metric_name(name));
    depth = std::max(depth, parsed.back().k);
  }
  std::vector<std::optional<UserMetrics>> rows(table.users());
  parallel_for(table.users(), [&](std::size_t u) {
    const auto holdout = table.items_of(u, split);
    if (holdout.empty()) return;
    const auto ranked = ranker(u, depth);
    UserMetrics um;
    um.user = u;
    for (std::size_t k = 0; k < parsed.size(); ++k) {
      const auto v = parsed[k].kind == MetricName::recall ? recall_at_k(ranked, holdout, parsed[k].k)
                                                           : ndcg_at_k(ranked, holdout, parsed[k].k);
      um.values[std::string(metrics[k])] = *v;
    }
    rows[u] = std::move(um);
  });
  RankingReport report;
  report.split = split;
  for (const auto& name : metrics) report.metrics[name] = 0.0;
  for (auto& r : rows) {
    if (!r) continue;
    ++report.users_evaluated;
    for (const auto& [name, v] : r->values) report.metrics[name] += v;
    report.per_user.push_back(std::move(*r));
  }
  if (report.users_evaluated > 0)
    for (auto& [name, v] : report.metrics) v /= static_cast<double>(report.users_evaluated);
  return report;
}

nlohmann::ordered_json report_to_json(const RankingReport& report, const std::string& checkpoint,
                                      const std::string& hash, bool include_per_user) {
  nlohmann::ordered_json j;
  j["metrics"] = nlohmann::ordered_json::object();
  for (const auto& [name, v] : report.metrics) j["metrics"][name] = v;
  j["users"] = report.users_evaluated;
  if (include_per_user) {
    j["per_user"] = nlohmann::ordered_json::array();
    for (const auto& u : report.per_user) {
      nlohmann::ordered_json row;
      row["user"] = u.user;
      for (const auto& [name, v] : u.values) row[name] = v;
      j["per_user"].push_back(std::move(row));
    }
  }
  j["checkpoint"] = checkpoint;
  j["split"] = to_string(report.split);
  j["config_hash"] = hash;
  return j;
}

std::string config_hash(const nlohmann::json& config) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : config.dump()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

template std::vector<float> rec_scores(const Model<float>&, const PreparedCorpus&, std::size_t);
template std::vector<double> rec_scores(const Model<double>&, const PreparedCorpus&, std::size_t);
template std::vector<float> pretrain_scores(const Model<float>&, const PreparedCorpus&, std::size_t);
template std::vector<double> pretrain_scores(const Model<double>&, const PreparedCorpus&, std::size_t);
template std::vector<ScoredItem> recommend_topM(const Model<float>&, const PreparedCorpus&, std::size_t, std::size_t);
template std::vector<ScoredItem> recommend_topM(const Model<double>&, const PreparedCorpus&, std::size_t, std::size_t);
template std::vector<ScoredItem> recommend_pretrain(const Model<float>&, const PreparedCorpus&, std::size_t,
                                                    std::size_t);
template std::vector<ScoredItem> recommend_pretrain(const Model<double>&, const PreparedCorpus&, std::size_t,
                                                    std::size_t);
template Ranker model_ranker(const Model<float>&, const PreparedCorpus&);
template Ranker model_ranker(const Model<double>&, const PreparedCorpus&);
template Ranker pretrain_ranker(const Model<float>&, const PreparedCorpus&);
template Ranker pretrain_ranker(const Model<double>&, const PreparedCorpus&);

}  // namespace cllm4rec
