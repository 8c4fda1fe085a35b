// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "cllm4rec/errors.hpp"
#include "cllm4rec/metrics.hpp"
#include "cllm4rec/recommend.hpp"
#include "support.hpp"

using namespace cllm4rec;
using namespace cllm4rec::test;

namespace {

// Set-based oracles, written independently of the library code.
double oracle_recall(const std::vector<std::size_t>& ranked, const std::vector<std::size_t>& holdout,
                     std::size_t k) {
  std::set<std::size_t> top(ranked.begin(), ranked.begin() + static_cast<long>(std::min(k, ranked.size())));
  std::set<std::size_t> h(holdout.begin(), holdout.end());
  std::vector<std::size_t> both;
  std::set_intersection(top.begin(), top.end(), h.begin(), h.end(), std::back_inserter(both));
  return static_cast<double>(both.size()) / static_cast<double>(std::min(k, h.size()));
}

double oracle_ndcg(const std::vector<std::size_t>& ranked, const std::vector<std::size_t>& holdout, std::size_t k) {
  std::set<std::size_t> h(holdout.begin(), holdout.end());
  double dcg = 0;
  for (std::size_t p = 1; p <= std::min(k, ranked.size()); ++p)
    if (h.count(ranked[p - 1])) dcg += std::log(2.0) / std::log(static_cast<double>(p) + 1.0);
  double idcg = 0;
  for (std::size_t p = 1; p <= std::min(k, h.size()); ++p)
    idcg += std::log(2.0) / std::log(static_cast<double>(p) + 1.0);
  return dcg / idcg;
}

struct Instance {
  std::vector<std::size_t> ranked;
  std::vector<std::size_t> holdout;
  std::size_t k = 1;
};

Instance random_instance(Rng& rng) {
  Instance x;
  const std::size_t items = 2 + uniform_index(rng, 60);
  std::vector<std::size_t> pool(items);
  std::iota(pool.begin(), pool.end(), 0);
  shuffle(pool.begin(), pool.end(), rng);
  x.ranked.assign(pool.begin(), pool.begin() + static_cast<long>(1 + uniform_index(rng, items)));
  shuffle(pool.begin(), pool.end(), rng);
  x.holdout.assign(pool.begin(), pool.begin() + static_cast<long>(1 + uniform_index(rng, std::min<std::size_t>(items, 12))));
  x.k = 1 + uniform_index(rng, 25);
  return x;
}

InteractionTable table_from(const std::vector<std::vector<std::pair<std::size_t, Split>>>& rows, std::size_t items) {
  InteractionTable t;
  for (std::size_t u = 0; u < rows.size(); ++u) t.user_ids.push_back("u" + std::to_string(u));
  for (std::size_t i = 0; i < items; ++i) t.item_ids.push_back("i" + std::to_string(i));
  t.rows.resize(rows.size());
  for (std::size_t u = 0; u < rows.size(); ++u) {
    std::int64_t ts = 0;
    for (auto [item, split] : rows[u]) {
      Interaction x;
      x.item = item;
      x.rating = 5;
      x.timestamp = ts++;
      x.split = split;
      t.rows[u].push_back(x);
    }
  }
  return t;
}

}  // namespace

TEST_SUITE("eval") {
  TEST_CASE("hand-computed recall and ndcg") {
    const std::vector<std::size_t> ranked{7, 3, 9, 1};
    const std::vector<std::size_t> holdout{3, 4};
    CHECK(*recall_at_k(ranked, holdout, 2) == doctest::Approx(0.5).epsilon(1e-12));
    const double expect = (1.0 / std::log2(3.0)) / (1.0 + 1.0 / std::log2(3.0));
    CHECK(*ndcg_at_k(ranked, holdout, 2) == doctest::Approx(expect).epsilon(1e-12));

    const std::vector<std::size_t> single{5};
    const std::vector<std::size_t> r2{0, 5, 1};
    CHECK(*ndcg_at_k(r2, single, 3) == doctest::Approx(1.0 / std::log2(3.0)).epsilon(1e-12));
    CHECK(*recall_at_k(r2, single, 1) == 0.0);
    CHECK(*recall_at_k(r2, single, 2) == 1.0);
  }

  TEST_CASE("empty holdout is skipped and K = 0 is rejected") {
    const std::vector<std::size_t> ranked{1, 2};
    const std::vector<std::size_t> none;
    CHECK_FALSE(recall_at_k(ranked, none, 5).has_value());
    CHECK_FALSE(ndcg_at_k(ranked, none, 5).has_value());
    const std::vector<std::size_t> h{1};
    CHECK_THROWS_AS(recall_at_k(ranked, h, 0), ValidationError);
    CHECK_THROWS_AS(ndcg_at_k(ranked, h, 0), ValidationError);
  }

  TEST_CASE("metrics agree with the set oracle on random instances") {
    Rng rng = make_rng(11, {1});
    for (int n = 0; n < 1000; ++n) {
      const auto x = random_instance(rng);
      const double r = *recall_at_k(x.ranked, x.holdout, x.k);
      const double g = *ndcg_at_k(x.ranked, x.holdout, x.k);
      REQUIRE(r == doctest::Approx(oracle_recall(x.ranked, x.holdout, x.k)).epsilon(1e-12));
      REQUIRE(g == doctest::Approx(oracle_ndcg(x.ranked, x.holdout, x.k)).epsilon(1e-12));
      REQUIRE(r >= 0.0);
      REQUIRE(r <= 1.0);
      REQUIRE(g >= 0.0);
      REQUIRE(g <= 1.0 + 1e-12);
    }
  }

  TEST_CASE("metrics ignore the order below rank K") {
    Rng rng = make_rng(12, {1});
    for (int n = 0; n < 300; ++n) {
      auto x = random_instance(rng);
      const double r = *recall_at_k(x.ranked, x.holdout, x.k);
      const double g = *ndcg_at_k(x.ranked, x.holdout, x.k);
      if (x.ranked.size() > x.k) shuffle(x.ranked.begin() + static_cast<long>(x.k), x.ranked.end(), rng);
      REQUIRE(*recall_at_k(x.ranked, x.holdout, x.k) == r);
      REQUIRE(*ndcg_at_k(x.ranked, x.holdout, x.k) == g);
    }
  }

  TEST_CASE("ndcg is 1 exactly when the leading ranks are all hits") {
    Rng rng = make_rng(13, {1});
    int ones = 0;
    for (int n = 0; n < 1000; ++n) {
      auto x = random_instance(rng);
      if (n % 3 == 0) {
        // plant a perfect prefix
        std::vector<std::size_t> rest;
        for (auto i : x.ranked)
          if (std::find(x.holdout.begin(), x.holdout.end(), i) == x.holdout.end()) rest.push_back(i);
        x.ranked = x.holdout;
        x.ranked.insert(x.ranked.end(), rest.begin(), rest.end());
      }
      const std::size_t lead = std::min(x.k, x.holdout.size());
      bool all_hits = x.ranked.size() >= lead;
      for (std::size_t p = 0; all_hits && p < lead; ++p)
        all_hits = std::find(x.holdout.begin(), x.holdout.end(), x.ranked[p]) != x.holdout.end();
      const double g = *ndcg_at_k(x.ranked, x.holdout, x.k);
      REQUIRE((std::abs(g - 1.0) < 1e-12) == all_hits);
      ones += all_hits;
    }
    CHECK(ones > 300);
  }

  TEST_CASE("top_m excludes masked items and breaks ties by index") {
    const std::vector<double> s{0.5, 0.9, 0.5, 0.9, 0.1};
    const std::vector<std::uint8_t> none;
    CHECK(top_m<double>(s, none, 3) == std::vector<std::size_t>{1, 3, 0});
    const std::vector<std::uint8_t> mask{0, 1, 0, 0, 0};
    CHECK(top_m<double>(s, mask, 10) == std::vector<std::size_t>{3, 0, 2, 4});
    const std::vector<float> f{1.f, 1.f, 1.f};
    CHECK(top_m<float>(f, std::vector<std::uint8_t>{}, 2) == std::vector<std::size_t>{0, 1});
  }

  TEST_CASE("parse_metric_name") {
    auto r = parse_metric_name("recall@20");
    CHECK(r.kind == MetricName::recall);
    CHECK(r.k == 20);
    auto n = parse_metric_name("ndcg@100");
    CHECK(n.kind == MetricName::ndcg);
    CHECK(n.k == 100);
    for (const char* bad : {"recall", "recall@0", "map@10", "ndcg@x", "recall@-3", ""})
      CHECK_THROWS_AS(parse_metric_name(bad), ValidationError);
  }

  TEST_CASE("popularity ranks by train degree with index ties") {
    const auto t = table_from({{{0, Split::train}, {2, Split::train}, {3, Split::test}},
                               {{2, Split::train}, {1, Split::train}, {0, Split::val}},
                               {{2, Split::train}, {3, Split::train}}},
                              5);
    CHECK(popularity_ranking(t) == std::vector<std::size_t>{2, 0, 1, 3, 4});
    const auto rec = recommend_popular(t, 0, 10);
    std::vector<std::size_t> items;
    for (auto& s : rec) items.push_back(s.item);
    CHECK(items == std::vector<std::size_t>{1, 3, 4});
  }

  TEST_CASE("perfect ranker scores 1 and the average skips empty holdouts") {
    const auto t = table_from({{{0, Split::train}, {1, Split::test}, {2, Split::test}},
                               {{3, Split::train}},
                               {{1, Split::train}, {4, Split::test}}},
                              6);
    const std::vector<std::string> metrics{"recall@1", "recall@5", "ndcg@5"};
    const Ranker perfect = [&](std::size_t u, std::size_t) { return t.items_of(u, Split::test); };
    const auto rep = evaluate_ranker(t, Split::test, metrics, perfect);
    CHECK(rep.users_evaluated == 2);
    for (auto& m : metrics) CHECK(rep.at(m) == doctest::Approx(1.0));
    CHECK(rep.per_user.size() == 2);
    CHECK(rep.per_user[0].user == 0);
    CHECK(rep.per_user[1].user == 2);
  }

  TEST_CASE("random ranker recall matches K/J") {
    const std::size_t users = 1000, items = 40, k = 5;
    std::vector<std::vector<std::pair<std::size_t, Split>>> rows(users);
    Rng rng = make_rng(21, {1});
    for (auto& r : rows) r.push_back({uniform_index(rng, items), Split::test});
    const auto t = table_from(rows, items);
    const Ranker random = [&](std::size_t u, std::size_t depth) {
      Rng r = make_rng(22, {u});
      std::vector<std::size_t> pool(items);
      std::iota(pool.begin(), pool.end(), 0);
      shuffle(pool.begin(), pool.end(), r);
      pool.resize(depth);
      return pool;
    };
    const std::vector<std::string> metrics{"recall@5"};
    const auto rep = evaluate_ranker(t, Split::test, metrics, random);
    const double p = static_cast<double>(k) / static_cast<double>(items);
    const double sigma = std::sqrt(p * (1 - p) / static_cast<double>(users));
    CHECK(std::abs(rep.at("recall@5") - p) < 3 * sigma);
  }

  TEST_CASE("popularity recall equals a count-based oracle on synthetic data") {
    SynthConfig sc;
    sc.users = 120;
    sc.items = 30;
    sc.blocks = 3;
    sc.inter_per_user = 10;
    sc.seed = 5;
    const auto data = synth_generate(sc);
    PrepareOptions po;
    po.seed = 5;
    const auto corpus = prepare_corpus(to_prepare_inputs(data), po);
    const auto& t = corpus.table;

    // Oracle: train counts from the raw rows, descending count then index.
    std::vector<std::size_t> count(t.items(), 0);
    for (const auto& row : t.rows)
      for (const auto& x : row)
        if (x.split == Split::train) ++count[x.item];
    std::vector<std::size_t> order(t.items());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return count[a] > count[b]; });
    double sum = 0;
    std::size_t n = 0;
    for (std::size_t u = 0; u < t.users(); ++u) {
      std::set<std::size_t> seen, test;
      for (const auto& x : t.rows[u]) {
        if (x.split == Split::train) seen.insert(x.item);
        if (x.split == Split::test) test.insert(x.item);
      }
      if (test.empty()) continue;
      std::size_t hits = 0, taken = 0;
      for (auto i : order) {
        if (taken == 5) break;
        if (seen.count(i)) continue;
        ++taken;
        hits += test.count(i);
      }
      sum += static_cast<double>(hits) / static_cast<double>(std::min<std::size_t>(5, test.size()));
      ++n;
    }
    const std::vector<std::string> metrics{"recall@5"};
    const auto rep = evaluate_ranker(t, Split::test, metrics, popularity_ranker(t));
    CHECK(rep.users_evaluated == n);
    CHECK(rep.at("recall@5") == doctest::Approx(sum / static_cast<double>(n)).epsilon(1e-12));
  }

  TEST_CASE("recommendations never contain train items or out-of-range ids") {
    for (std::uint64_t seed = 0; seed < 6; ++seed) {
      const auto corpus = random_corpus(40, 6, 9, 5, seed);
      auto cfg = micro_config(corpus.vocab.word_count(), 6, 9);
      Model<double> model(cfg, seed);
      for (std::size_t u = 0; u < 6; ++u) {
        const auto train = corpus.train_items(u);
        for (std::size_t m : {1u, 3u, 9u, 50u}) {
          const auto rec = recommend_topM(model, corpus, u, m);
          REQUIRE(rec.size() == std::min<std::size_t>(m, 9 - train.size()));
          std::set<std::size_t> seen;
          for (std::size_t r = 0; r < rec.size(); ++r) {
            REQUIRE(rec[r].item < 9);
            REQUIRE(std::find(train.begin(), train.end(), rec[r].item) == train.end());
            REQUIRE(seen.insert(rec[r].item).second);
            if (r > 0) REQUIRE(rec[r - 1].score >= rec[r].score);
          }
          const auto pre = recommend_pretrain(model, corpus, u, m);
          for (auto& s : pre) REQUIRE(std::find(train.begin(), train.end(), s.item) == train.end());
        }
      }
      CHECK_THROWS_AS(recommend_topM(model, corpus, 6, 3), ValidationError);
    }
  }

  TEST_CASE("model ranker follows recommend_topM") {
    const auto corpus = random_corpus(40, 5, 9, 5, 3);
    Model<double> model(micro_config(corpus.vocab.word_count(), 5, 9), 3);
    const auto ranker = model_ranker(model, corpus);
    for (std::size_t u = 0; u < 5; ++u) {
      const auto rec = recommend_topM(model, corpus, u, 4);
      const auto ranked = ranker(u, 4);
      REQUIRE(ranked.size() == rec.size());
      for (std::size_t r = 0; r < rec.size(); ++r) CHECK(ranked[r] == rec[r].item);
    }
  }

  TEST_CASE("report json schema and config hash") {
    const auto t = table_from({{{0, Split::train}, {1, Split::test}}}, 3);
    const std::vector<std::string> metrics{"recall@2", "ndcg@2"};
    const auto rep = evaluate_ranker(t, Split::test, metrics, popularity_ranker(t));
    const auto j = report_to_json(rep, "ck.bin", "0123456789abcdef", true);
    for (const char* key : {"metrics", "users", "per_user", "checkpoint", "split", "config_hash"})
      CHECK(j.contains(key));
    CHECK(j["users"] == 1);
    CHECK(j["split"] == "test");
    CHECK_FALSE(report_to_json(rep, "ck.bin", "x", false).contains("per_user"));

    const nlohmann::json a = {{"train", {{"seed", 1}}}};
    const nlohmann::json b = {{"train", {{"seed", 2}}}};
    const auto ha = config_hash(a);
    CHECK(ha.size() == 16);
    CHECK(ha == config_hash(a));
    CHECK(ha != config_hash(b));
  }
}
