// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <set>

#include "cllm4rec/checkpoint.hpp"
#include "cllm4rec/errors.hpp"
#include "cllm4rec/gradcheck.hpp"
#include "cllm4rec/losses.hpp"
#include "cllm4rec/parallel.hpp"
#include "cllm4rec/optimizer.hpp"
#include "cllm4rec/sweep.hpp"
#include "cllm4rec/synth.hpp"
#include "cllm4rec/trainer.hpp"
#include "support.hpp"

using namespace cllm4rec;
using cllm4rec::test::TempDir;

namespace {

TrainConfig quick_train() {
  TrainConfig t;
  t.warmup_epochs = 1;
  t.pretrain_epochs = 2;
  t.finetune_epochs = 2;
  t.lr = 1e-2;
  t.finetune_lr = 1e-2;
  t.batch_size = 4;
  t.val_metrics = {"recall@2", "ndcg@4"};
  t.select_metric = "ndcg@4";
  return t;
}

ModelConfig tiny_shape() {
  ModelConfig m;
  m.K = 8;
  m.heads = 2;
  m.layers = 1;
  m.context_length = 24;
  return m;
}

std::vector<Tensor<float>> values_of(Model<float>& m) {
  std::vector<Tensor<float>> out;
  for (auto* p : m.parameters()) out.push_back(p->value);
  return out;
}

std::string strip_wall(const std::string& log) {
  std::string out;
  std::istringstream in(log);
  for (std::string line; std::getline(in, line);) {
    auto j = nlohmann::ordered_json::parse(line);
    j.erase("wall_ms");
    out += j.dump() + "\n";
  }
  return out;
}

}  // namespace

TEST_SUITE("losses") {
  TEST_CASE("l-step language term equals an nll computed from the model outputs") {
    const auto c = test::random_corpus(20, 4, 6, 5, 1);
    Model<double> m(test::micro_config(), 1);
    const Document& doc = c.interaction_docs[2];
    Graph<double> g;
    const auto b = m.bind(g);
    const auto terms = l_step_terms<double>(g, m, b, doc, nullptr, {0, 0});
    CHECK(terms.tokens == doc.main.size());
    CHECK(terms.entities == 1 + doc.main.size());
    CHECK(!terms.mr.has_value());

    const auto h = g.value(m.forward(g, b, doc.prompt, doc.main, Mode::collaborative));
    double nll = 0;
    for (std::size_t k = 0; k < doc.main.size(); ++k) {
      std::vector<double> logits(6);
      for (std::size_t j = 0; j < 6; ++j)
        for (std::size_t d = 0; d < 8; ++d) logits[j] += h.at(k, d) * m.z_lv.value.at(j, d);
      double mx = *std::max_element(logits.begin(), logits.end()), z = 0;
      for (double l : logits) z += std::exp(l - mx);
      nll -= logits[c.vocab.item_index(doc.main[k])] - mx - std::log(z);
    }
    CHECK(g.scalar(terms.lm) == doctest::Approx(nll).epsilon(1e-10));
  }

  TEST_CASE("mutual regularization and prior have the quadratic form") {
    const auto c = test::random_corpus(20, 4, 6, 5, 2);
    Model<double> m(test::micro_config(), 2);
    Snapshot<double> snap = content_snapshot(m);
    snap.users.fill(0.0);
    snap.items.fill(0.0);
    const Document& doc = c.interaction_docs[0];
    Graph<double> g;
    const auto b = m.bind(g);
    const auto t = l_step_terms<double>(g, m, b, doc, &snap, {0.5, 2.0});
    double sq = 0;
    const auto add_row = [&](const Tensor<double>& table, std::size_t r) {
      for (std::size_t d = 0; d < table.cols(); ++d) sq += table.at(r, d) * table.at(r, d);
    };
    add_row(m.z_lu.value, *doc.user);
    for (auto id : doc.main) add_row(m.z_lv.value, c.vocab.item_index(id));
    REQUIRE(t.mr.has_value());
    REQUIRE(t.prior.has_value());
    CHECK(g.scalar(*t.mr) == doctest::Approx(2.0 / 2 * sq));
    CHECK(g.scalar(*t.prior) == doctest::Approx(0.5 / 2 * sq));
  }

  TEST_CASE("c-step regularizes the entities named in the prompt") {
    const auto c = test::random_corpus(20, 4, 6, 5, 3);
    Model<double> m(test::micro_config(), 3);
    const auto collab = collaborative_snapshot(m);
    const Document& doc = c.review_docs[1];
    Graph<double> g;
    const auto b = m.bind(g);
    const auto t = c_step_terms<double>(g, m, b, doc, &collab, {0, 1.0});
    CHECK(t.entities == 2);
    CHECK(t.tokens == doc.main.size());
    double sq = 0;
    for (std::size_t d = 0; d < 8; ++d) {
      const double du = m.z_cu.value.at(*doc.user, d) - m.z_lu.value.at(*doc.user, d);
      const double dv = m.z_cv.value.at(*doc.item, d) - m.z_lv.value.at(*doc.item, d);
      sq += du * du + dv * dv;
    }
    CHECK(g.scalar(*t.mr) == doctest::Approx(0.5 * sq));
    CHECK(!t.prior.has_value());
  }

  TEST_CASE("wrong document kinds and empty hold sets are rejected") {
    const auto c = test::random_corpus(20, 4, 6, 5, 4);
    Model<double> m(test::micro_config(), 4);
    Graph<double> g;
    const auto b = m.bind(g);
    CHECK_THROWS_AS(l_step_terms<double>(g, m, b, c.review_docs[0], nullptr, {}), ValidationError);
    CHECK_THROWS_AS(c_step_terms<double>(g, m, b, c.interaction_docs[0], nullptr, {}), ValidationError);
    MaskedSample s;
    s.user = 0;
    s.prompt = {20, 3};
    s.hold.assign(6, 0);
    CHECK_THROWS_AS(rec_step_terms<double>(g, m, b, s, nullptr, {}), ValidationError);
  }

  TEST_CASE("finite differences agree with the composite losses on a micro model") {
    const auto c = test::random_corpus(20, 4, 6, 5, 5);
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      Model<double> m(test::micro_config(), seed);
      m.set_backbone_frozen(false);
      const auto content = content_snapshot(m);
      const auto collab = collaborative_snapshot(m);
      Rng rng = make_rng(seed, {1});
      const auto sample = *build_masked_sample(c.vocab, 1, c.train_items(1), 0.3, rng);
      const LossWeights w{0.3, 1.0};
      auto params = m.parameters();
      const auto l = finite_diff_check(
          [&](Graph<double>& g) { return l_step_loss<double>(g, m, c.interaction_docs[1], &content, w); }, params,
          1e-5, 12, seed);
      const auto cs = finite_diff_check(
          [&](Graph<double>& g) { return c_step_loss<double>(g, m, c.review_docs[3], &collab, w); }, params, 1e-5, 12,
          seed);
      const auto r = finite_diff_check(
          [&](Graph<double>& g) { return rec_step_loss<double>(g, m, sample, &content, w); }, params, 1e-5, 12, seed);
      CAPTURE(l.worst_parameter);
      CAPTURE(cs.worst_parameter);
      CAPTURE(r.worst_parameter);
      CAPTURE(cs.worst_analytic);
      CAPTURE(cs.worst_numeric);
      CAPTURE(l.worst_analytic);
      CAPTURE(l.worst_numeric);
      CHECK(l.max_rel_error < 1e-4);
      CHECK(cs.max_rel_error < 1e-4);
      CHECK(r.max_rel_error < 1e-4);
    }
  }
}

TEST_SUITE("train") {
  TEST_CASE("train config validation and json") {
    TrainConfig t;
    CHECK_NOTHROW(t.validate());
    t.p_m = 1.0;
    CHECK_THROWS_AS(t.validate(), ValidationError);
    t = TrainConfig{};
    t.lambda_c = -1;
    CHECK_THROWS_AS(t.validate(), ValidationError);
    t = TrainConfig{};
    t.select_metric = "mrr@3";
    CHECK_THROWS_AS(t.validate(), ValidationError);
    t = quick_train();
    const auto back = TrainConfig::from_json(t.to_json());
    CHECK(back.to_json() == t.to_json());
    t.no_content = true;
    CHECK(t.weights().lambda_c == 0.0);
  }

  TEST_CASE("interaction documents: reordering, stored order and the window cap") {
    const auto c = test::random_corpus(20, 6, 30, 25, 6);
    auto cfg = model_config_for(c, tiny_shape(), quick_train());
    Model<float> m(cfg, 0);
    Trainer t(c, m, quick_train());
    const std::size_t window = interaction_window(cfg, c.vocab);
    CHECK(window == cfg.context_length - interaction_prompt_overhead(c.vocab));
    const auto e1 = t.interaction_docs(1), e2 = t.interaction_docs(2);
    CHECK(e1 == t.interaction_docs(1));
    CHECK(e1 != e2);
    for (const auto& d : e1) {
      CHECK(d.main.size() == window);
      const auto train = c.train_items(*d.user);
      std::set<std::size_t> allowed(train.begin(), train.end());
      std::set<std::size_t> seen;
      for (auto id : d.main) {
        CHECK(allowed.count(c.vocab.item_index(id)) == 1);
        CHECK(seen.insert(c.vocab.item_index(id)).second);
      }
    }
    auto fixed = quick_train();
    fixed.no_reorder = true;
    const auto small = test::random_corpus(20, 6, 30, 8, 6);
    Model<float> m2(model_config_for(small, tiny_shape(), fixed), 0);
    Trainer t2(small, m2, fixed);
    for (const auto& d : t2.interaction_docs(3)) {
      std::vector<TokenId> expected;
      for (auto i : small.train_items(*d.user)) expected.push_back(small.vocab.item_token(i));
      CHECK(d.main == expected);
    }
  }

  TEST_CASE("masked samples are redrawn each epoch and partition the train items") {
    const auto c = test::random_corpus(20, 10, 12, 9, 7);
    Model<float> m(model_config_for(c, tiny_shape(), quick_train()), 0);
    Trainer t(c, m, quick_train());
    const auto a = t.masked_samples(1), b = t.masked_samples(2);
    CHECK(a.size() == 10);
    bool differs = false;
    for (std::size_t k = 0; k < a.size(); ++k) differs |= a[k].hold_items != b[k].hold_items;
    CHECK(differs);
    for (const auto& s : a) {
      auto all = s.hold_items;
      all.insert(all.end(), s.prompt_items.begin(), s.prompt_items.end());
      std::sort(all.begin(), all.end());
      auto train = c.train_items(s.user);
      std::sort(train.begin(), train.end());
      CHECK(all == train);
      CHECK(s.n_hold == hold_count(train.size(), 0.3));
    }
  }

  TEST_CASE("each phase updates only its own parameter group") {
    const auto c = test::random_corpus(20, 6, 10, 7, 8);
    Model<float> m(model_config_for(c, tiny_shape(), quick_train()), 0);
    Trainer t(c, m, quick_train());
    auto before = values_of(m);
    t.l_epoch(1);
    CHECK(m.z_lu.value != before[1]);
    CHECK(m.z_lv.value != before[2]);
    CHECK(m.z_cu.value == before[3]);
    CHECK(m.z_cv.value == before[4]);
    CHECK(m.z_t.value == before[0]);
    before = values_of(m);
    t.c_epoch(1);
    CHECK(m.z_lu.value == before[1]);
    CHECK(m.z_cu.value != before[3]);
    auto params = m.parameters();
    for (std::size_t k = 5; k < params.size(); ++k) CHECK(params[k]->value == before[k]);

    auto open = quick_train();
    open.trainable_backbone = true;
    Model<float> m2(model_config_for(c, tiny_shape(), open), 0);
    Trainer t2(c, m2, open);
    const auto b2 = values_of(m2);
    t2.warmup_epoch(1);
    CHECK(m2.z_t.value != b2[0]);
    CHECK(m2.blocks[0].w_qkv.value != b2[6 + 2]);
    CHECK(m2.z_lu.value == b2[1]);
  }

  TEST_CASE("snapshots refresh once per alternation phase") {
    const auto c = test::random_corpus(20, 4, 8, 6, 9);
    Model<float> m(model_config_for(c, tiny_shape(), quick_train()), 0);
    Trainer t(c, m, quick_train());
    t.pretrain();
    CHECK(t.content_snapshot_refreshes() == 1 + 2);
    CHECK(t.collaborative_snapshot_refreshes() == 1 + 2);
  }

  TEST_CASE("training is bitwise independent of the worker count") {
    const auto c = test::random_corpus(20, 8, 10, 7, 10);
    std::vector<std::vector<Tensor<float>>> results;
    for (std::size_t threads : {1, 3}) {
      set_thread_count(threads);
      Model<float> m(model_config_for(c, tiny_shape(), quick_train()), 0);
      Trainer t(c, m, quick_train());
      t.warmup();
      t.pretrain();
      t.finetune();
      results.push_back(values_of(m));
    }
    set_thread_count(0);
    CHECK(results[0] == results[1]);
  }

  TEST_CASE("finetuning keeps the best validation epoch") {
    const auto c = test::random_corpus(20, 8, 10, 7, 11);
    Model<float> m(model_config_for(c, tiny_shape(), quick_train()), 0);
    auto tc = quick_train();
    tc.finetune_epochs = 4;
    std::vector<double> scores;
    TrainerHooks hooks;
    hooks.on_epoch = [&](const EpochStats& st) {
      if (st.stage == "finetune") scores.push_back(st.val.at("ndcg@4"));
    };
    Trainer t(c, m, tc, hooks);
    const auto r = t.finetune();
    REQUIRE(scores.size() == 5);
    const auto best = std::max_element(scores.begin(), scores.end()) - scores.begin();
    CHECK(r.best_epoch == static_cast<std::size_t>(best));
    CHECK(t.validate().at("ndcg@4") == doctest::Approx(scores[best]));
    CHECK(r.epochs.front().epoch == 0);
  }

  TEST_CASE("model and corpus token spaces must match") {
    const auto c = test::random_corpus(20, 4, 8, 6, 12);
    auto cfg = model_config_for(c, tiny_shape(), quick_train());
    cfg.J += 1;
    Model<float> m(cfg, 0);
    CHECK_THROWS_AS(Trainer(c, m, quick_train()), ValidationError);
  }

  TEST_CASE("pretraining writes a log and resumes to the identical trace") {
    const auto c = test::random_corpus(20, 6, 10, 7, 13);
    auto full = quick_train();
    full.warmup_epochs = 2;
    full.pretrain_epochs = 3;
    TempDir a, b;
    const auto cfg = model_config_for(c, tiny_shape(), full);
    run_pretraining(c, cfg, full, {a.path()});
    auto cut = full;
    cut.pretrain_epochs = 1;
    run_pretraining(c, cfg, cut, {b.path()});
    // A line written after the last checkpoint must not survive the resume.
    {
      std::ofstream extra(b / "train_log.jsonl", std::ios::app);
      extra << "{\"stage\":\"pretrain_l\",\"epoch\":2,\"wall_ms\":0}\n";
    }
    run_pretraining(c, cfg, full, {b.path(), nlohmann::json::object(), true});
    const auto log_a = test::slurp(a / "train_log.jsonl");
    CHECK(std::count(log_a.begin(), log_a.end(), '\n') == 2 + 3 * 2);
    CHECK(strip_wall(log_a) == strip_wall(test::slurp(b / "train_log.jsonl")));
    CHECK(test::slurp(a / "pretrain.ckpt") == test::slurp(b / "pretrain.ckpt"));
    const auto meta = read_checkpoint_meta(a / "pretrain.ckpt");
    CHECK(meta.train_state["stage"] == "pretrain");
    CHECK(meta.train_state["epoch"] == 3);
    CHECK(meta.config["train"]["pretrain_epochs"] == 3);
  }

  TEST_CASE("collaborative-only mode skips content epochs") {
    const auto c = test::random_corpus(20, 6, 10, 7, 14);
    auto tc = quick_train();
    tc.no_content = true;
    tc.lambda_c = 0;
    TempDir dir;
    Model<float> m = run_pretraining(c, model_config_for(c, tiny_shape(), tc), tc, {dir.path()});
    const auto log = test::slurp(dir / "train_log.jsonl");
    CHECK(log.find("warmup") == std::string::npos);
    CHECK(log.find("pretrain_c") == std::string::npos);
    CHECK(std::count(log.begin(), log.end(), '\n') == 2);
    const auto fit = run_finetuning(c, m, tc, {dir.path()});
    CHECK(std::filesystem::exists(dir / "finetune.ckpt"));
    CHECK(fit.epochs.size() == 3);
  }

  TEST_CASE("sweep runs the schedule per value") {
    const auto c = test::random_corpus(20, 6, 10, 7, 15);
    auto tc = quick_train();
    tc.pretrain_epochs = 1;
    tc.finetune_epochs = 1;
    TempDir dir;
    const std::vector<double> values{0.0, 1.0};
    const std::vector<std::string> metrics{"recall@3"};
    const auto report = run_sweep(c, tiny_shape(), tc, "lambda_c", values, metrics, {dir.path()});
    REQUIRE(report.rows.size() == 2);
    CHECK(report.rows[1].value == 1.0);
    CHECK(report.rows[0].test.metrics.count("recall@3") == 1);
    CHECK(std::filesystem::exists(dir / "lambda_c_1" / "finetune.ckpt"));
    CHECK(report.to_json()["rows"].size() == 2);
    CHECK_THROWS_AS(with_param(tc, "lr", 0.1), ValidationError);
    CHECK_THROWS_AS(with_param(tc, "p_m", 0.0), ValidationError);
    CHECK_THROWS_AS(run_sweep(c, tiny_shape(), tc, "lambda_c", {}, metrics, {dir.path()}), ValidationError);
  }

  TEST_CASE("snapshot stop-gradient: each step leaves the other tables without gradient") {
    const auto c = test::random_corpus(20, 4, 6, 5, 16);
    Model<double> m(test::micro_config(), 16);
    const auto content = content_snapshot(m);
    const auto collab = collaborative_snapshot(m);
    GradStore<double> l_store, c_store;
    {
      Graph<double> g(&l_store);
      g.backward(l_step_loss<double>(g, m, c.interaction_docs[0], &content, {0.2, 1.0}));
    }
    {
      Graph<double> g(&c_store);
      g.backward(c_step_loss<double>(g, m, c.review_docs[0], &collab, {0.2, 1.0}));
    }
    const auto zero = [](const Tensor<double>* t) {
      return t == nullptr || std::all_of(t->values().begin(), t->values().end(), [](double v) { return v == 0.0; });
    };
    CHECK(zero(l_store.find(m.z_cu)));
    CHECK(zero(l_store.find(m.z_cv)));
    CHECK(!zero(l_store.find(m.z_lv)));
    CHECK(zero(c_store.find(m.z_lu)));
    CHECK(zero(c_store.find(m.z_lv)));
    CHECK(!zero(c_store.find(m.z_cv)));
  }

  TEST_CASE("a small plain-gradient step decreases the recommendation loss") {
    const auto c = test::random_corpus(20, 4, 6, 5, 17);
    Model<double> m(test::micro_config(), 17);
    const auto content = content_snapshot(m);
    Rng rng = make_rng(17, {});
    const auto sample = *build_masked_sample(c.vocab, 2, c.train_items(2), 0.3, rng);
    const LossWeights w{0.1, 1.0};
    auto loss = [&] {
      Graph<double> g;
      return g.scalar(rec_step_loss<double>(g, m, sample, &content, w));
    };
    const double before = loss();
    GradStore<double> store;
    {
      Graph<double> g(&store);
      g.backward(rec_step_loss<double>(g, m, sample, &content, w));
    }
    std::vector<Parameter<double>*> group{&m.z_lu, &m.z_lv};
    Optimizer<double>({1e-3, 0.9, 0.999, 1e-8, true}).step(group, store);
    CHECK(loss() < before);
  }

  TEST_CASE("warm-up touches only content tables and lowers the content loss on synthetic data") {
    const auto data = synth_generate(SynthConfig{});
    const auto c = prepare_corpus(to_prepare_inputs(data), {});
    auto tc = quick_train();
    tc.warmup_epochs = 10;
    tc.lr = 1e-3;
    tc.batch_size = 16;
    ModelConfig shape = tiny_shape();
    shape.K = 16;
    shape.context_length = 64;
    Model<float> m(model_config_for(c, shape, tc), 0);
    const auto lu = m.z_lu.value, lv = m.z_lv.value;
    Trainer t(c, m, tc);
    const auto stats = t.warmup();
    REQUIRE(stats.size() == 10);
    CHECK(stats.back().loss_lm < stats.front().loss_lm);
    CHECK(stats.front().loss_mr == 0.0);
    CHECK(m.z_lu.value == lu);
    CHECK(m.z_lv.value == lv);

    auto none = tc;
    none.warmup_epochs = 0;
    Model<float> m0(model_config_for(c, shape, none), 0);
    const auto before = values_of(m0);
    Trainer t0(c, m0, none);
    CHECK(t0.warmup().empty());
    CHECK(values_of(m0) == before);
  }

  TEST_CASE("collaborative-only mode equals a run whose mutual regularization weight is zero") {
    const auto c = test::random_corpus(20, 6, 10, 7, 18);
    auto off = quick_train();
    off.lambda_c = 0;
    auto cf = off;
    cf.no_content = true;
    std::vector<double> trace_off, trace_cf;
    TrainerHooks h1, h2;
    h1.on_epoch = [&](const EpochStats& s) {
      if (s.stage == "pretrain_l" || s.stage == "finetune") trace_off.push_back(s.loss_lm);
    };
    h2.on_epoch = [&](const EpochStats& s) { trace_cf.push_back(s.loss_lm); };
    Model<float> a(model_config_for(c, tiny_shape(), off), 0), b(model_config_for(c, tiny_shape(), cf), 0);
    Trainer ta(c, a, off, h1), tb(c, b, cf, h2);
    ta.warmup();
    ta.pretrain();
    ta.finetune();
    tb.pretrain();
    tb.finetune();
    CHECK(trace_off == trace_cf);
    CHECK(a.z_lv.value == b.z_lv.value);
    CHECK(ta.validate().metrics == tb.validate().metrics);
  }
}
