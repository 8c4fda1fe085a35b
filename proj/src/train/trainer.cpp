// SPDX-License-Identifier: Apache-2.0
#include "cllm4rec/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <iostream>
#include <memory>
#include <numeric>

#include "cllm4rec/binary_io.hpp"
#include "cllm4rec/checkpoint.hpp"
#include "cllm4rec/errors.hpp"
#include "cllm4rec/parallel.hpp"
#include "cllm4rec/rng.hpp"

namespace cllm4rec {

namespace {

constexpr std::uint64_t kTagWarmup = 0x7761726d;
constexpr std::uint64_t kTagL = 0x6c73746570;
constexpr std::uint64_t kTagC = 0x63737465;
constexpr std::uint64_t kTagRec = 0x726563;
constexpr std::uint64_t kOrder = 0xFFFFFFFFull;

// Gradient shards per batch. Fixed so that the summation order, and hence
// every result, is the same for any worker count.
constexpr std::size_t kShards = 4;

double elapsed_ms(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
}

template <typename V>
void shuffle_order(std::vector<V>& v, std::uint64_t seed, std::uint64_t tag, std::size_t epoch) {
  Rng rng = make_rng(seed, {tag, epoch, kOrder});
  shuffle(v.begin(), v.end(), rng);
}

}  // namespace

void TrainConfig::validate() const {
  if (!(lambda_l >= 0.0) || !(lambda_c >= 0.0)) throw ValidationError("lambda_l and lambda_c must be >= 0");
  if (!(p_m > 0.0 && p_m < 1.0)) throw ValidationError("p_m must lie in (0, 1)");
  if (!(lr > 0.0) || !(finetune_lr > 0.0)) throw ValidationError("learning rates must be positive");
  if (batch_size == 0) throw ValidationError("batch_size must be positive");
  if (val_metrics.empty()) throw ValidationError("at least one validation metric is required");
  for (const auto& m : val_metrics) parse_metric_name(m);
  if (std::find(val_metrics.begin(), val_metrics.end(), select_metric) == val_metrics.end()) {
    throw ValidationError("selection metric '" + select_metric + "' is not among the validation metrics");
  }
}

nlohmann::ordered_json TrainConfig::to_json() const {
  nlohmann::ordered_json j;
  j["lambda_l"] = lambda_l;
  j["lambda_c"] = lambda_c;
  j["p_m"] = p_m;
  j["warmup_epochs"] = warmup_epochs;
  j["pretrain_epochs"] = pretrain_epochs;
  j["finetune_epochs"] = finetune_epochs;
  j["lr"] = lr;
  j["finetune_lr"] = finetune_lr;
  j["batch_size"] = batch_size;
  j["seed"] = seed;
  j["no_reorder"] = no_reorder;
  j["no_content"] = no_content;
  j["trainable_backbone"] = trainable_backbone;
  j["val_metrics"] = val_metrics;
  j["select_metric"] = select_metric;
  return j;
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  try {
    c.lambda_l = j.value("lambda_l", c.lambda_l);
    c.lambda_c = j.value("lambda_c", c.lambda_c);
    c.p_m = j.value("p_m", c.p_m);
    c.warmup_epochs = j.value("warmup_epochs", c.warmup_epochs);
    c.pretrain_epochs = j.value("pretrain_epochs", c.pretrain_epochs);
    c.finetune_epochs = j.value("finetune_epochs", c.finetune_epochs);
    c.lr = j.value("lr", c.lr);
    c.finetune_lr = j.value("finetune_lr", c.finetune_lr);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.seed = j.value("seed", c.seed);
    c.no_reorder = j.value("no_reorder", c.no_reorder);
    c.no_content = j.value("no_content", c.no_content);
    c.trainable_backbone = j.value("trainable_backbone", c.trainable_backbone);
    c.val_metrics = j.value("val_metrics", c.val_metrics);
    c.select_metric = j.value("select_metric", c.select_metric);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("train config: ") + e.what());
  }
  return c;
}

nlohmann::ordered_json EpochStats::to_json() const {
  nlohmann::ordered_json j;
  j["stage"] = stage;
  j["epoch"] = epoch;
  j["loss_lm"] = loss_lm;
  j["loss_mr"] = loss_mr;
  j["loss_prior"] = loss_prior;
  for (const char* key : {"recall@20", "recall@40", "ndcg@100"}) {
    auto it = val.find(key);
    j[std::string("val_") + key] = it == val.end() ? nlohmann::ordered_json(nullptr) : nlohmann::ordered_json(it->second);
  }
  for (const auto& [name, v] : val)
    if (name != "recall@20" && name != "recall@40" && name != "ndcg@100") j["val_" + name] = v;
  j["wall_ms"] = wall_ms;
  return j;
}

std::size_t interaction_window(const ModelConfig& model, const ExtendedVocabulary& vocab) {
  const std::size_t overhead = interaction_prompt_overhead(vocab);
  if (model.context_length <= overhead) throw ValidationError("context_length too small for interaction documents");
  return model.context_length - overhead;
}

std::size_t rec_window(const ModelConfig& model, const ExtendedVocabulary& vocab) {
  const std::size_t overhead = rec_prompt_overhead(vocab);
  if (model.context_length <= overhead) throw ValidationError("context_length too small for recommendation prompts");
  return model.context_length - overhead;
}

ModelConfig model_config_for(const PreparedCorpus& corpus, ModelConfig base, const TrainConfig& train) {
  base.N = corpus.vocab.word_count();
  base.I = corpus.vocab.user_count();
  base.J = corpus.vocab.item_count();
  base.lambda_l = train.lambda_l;
  base.lambda_c = train.no_content ? 0.0 : train.lambda_c;
  base.backbone_frozen = !train.trainable_backbone;
  return base;
}

Trainer::Trainer(const PreparedCorpus& corpus, Model<float>& model, TrainConfig config, TrainerHooks hooks)
    : corpus_(corpus),
      model_(model),
      config_(std::move(config)),
      hooks_(std::move(hooks)),
      optimizer_(OptimizerConfig{config_.lr}) {
  config_.validate();
  const auto& mc = model_.config();
  if (mc.N != corpus_.vocab.word_count() || mc.I != corpus_.vocab.user_count() || mc.J != corpus_.vocab.item_count()) {
    throw ValidationError("model token space (N=" + std::to_string(mc.N) + " I=" + std::to_string(mc.I) + " J=" +
                          std::to_string(mc.J) + ") does not match the corpus");
  }
  model_.set_backbone_frozen(!config_.trainable_backbone);
  content_snap_.refresh(model_.z_cu, model_.z_cv);
  collab_snap_.refresh(model_.z_lu, model_.z_lv);
}

std::vector<Parameter<float>*> Trainer::group(Phase phase) {
  std::vector<Parameter<float>*> out;
  if (phase == Phase::warmup || phase == Phase::c_step) {
    out = {&model_.z_cu, &model_.z_cv};
  } else {
    out = {&model_.z_lu, &model_.z_lv};
  }
  if (config_.trainable_backbone) {
    out.push_back(&model_.z_t);
    for (auto* p : model_.backbone()) out.push_back(p);
  }
  return out;
}

std::vector<Document> Trainer::interaction_docs(std::size_t epoch) const {
  const std::size_t window = interaction_window(model_.config(), corpus_.vocab);
  std::vector<Document> docs;
  for (std::size_t u = 0; u < corpus_.table.users(); ++u) {
    auto items = corpus_.train_items(u);
    if (items.empty()) continue;
    Rng rng = make_rng(config_.seed, {kTagL, epoch, u});
    if (items.size() > window) {
      std::vector<std::size_t> pos(items.size());
      std::iota(pos.begin(), pos.end(), std::size_t{0});
      shuffle(pos.begin(), pos.end(), rng);
      pos.resize(window);
      std::sort(pos.begin(), pos.end());
      std::vector<std::size_t> sub;
      for (std::size_t p : pos) sub.push_back(items[p]);
      items = std::move(sub);
    }
    if (!config_.no_reorder) shuffle(items.begin(), items.end(), rng);
    docs.push_back(build_interaction_doc(corpus_.vocab, u, items));
  }
  shuffle_order(docs, config_.seed, kTagL, epoch);
  return docs;
}

std::vector<Document> Trainer::content_docs(std::size_t epoch, std::uint64_t tag) const {
  const std::size_t ctx = model_.config().context_length;
  std::vector<Document> docs;
  for (const auto* family : {&corpus_.review_docs, &corpus_.feature_docs}) {
    for (const auto& d : *family) {
      if (d.prompt.size() >= ctx) continue;
      Document c = d;
      if (c.prompt.size() + c.main.size() > ctx) c.main.resize(ctx - c.prompt.size());
      docs.push_back(std::move(c));
    }
  }
  shuffle_order(docs, config_.seed, tag, epoch);
  return docs;
}

std::vector<MaskedSample> Trainer::masked_samples(std::size_t epoch) const {
  const std::size_t window = rec_window(model_.config(), corpus_.vocab);
  std::vector<MaskedSample> out;
  for (std::size_t u = 0; u < corpus_.table.users(); ++u) {
    const auto items = corpus_.train_items(u);
    Rng rng = make_rng(config_.seed, {kTagRec, epoch, u});
    if (auto s = build_masked_sample(corpus_.vocab, u, items, config_.p_m, rng, !config_.no_reorder, window)) {
      out.push_back(std::move(*s));
    }
  }
  shuffle_order(out, config_.seed, kTagRec, epoch);
  return out;
}

template <typename Item, typename Build>
EpochStats Trainer::run_pass(const std::string& stage, std::size_t epoch, std::vector<Item> items, Phase phase,
                             const Build& build) {
  const auto start = std::chrono::steady_clock::now();
  const auto params = group(phase);
  double sum_lm = 0, sum_mr = 0, sum_prior = 0;
  std::size_t sum_tokens = 0, sum_entities = 0;

  struct Slot {
    std::unique_ptr<Graph<float>> graph;
    LossTerms terms;
  };
  for (std::size_t begin = 0; begin < items.size(); begin += config_.batch_size) {
    const std::size_t n = std::min(config_.batch_size, items.size() - begin);
    const std::size_t shards = std::min(kShards, n);
    std::vector<GradStore<float>> stores(shards);
    std::vector<Slot> slots(n);
    const auto first = [&](std::size_t s) { return s * n / shards; };

    parallel_for(shards, [&](std::size_t s) {
      for (std::size_t i = first(s); i < first(s + 1); ++i) {
        slots[i].graph = std::make_unique<Graph<float>>(&stores[s]);
        const auto bound = model_.bind(*slots[i].graph);
        slots[i].terms = build(*slots[i].graph, bound, items[begin + i]);
      }
    });
    std::size_t tokens = 0, entities = 0;
    for (const auto& s : slots) {
      tokens += s.terms.tokens;
      entities += s.terms.entities;
    }
    const float inv_tokens = 1.0f / static_cast<float>(std::max<std::size_t>(tokens, 1));
    const float inv_entities = 1.0f / static_cast<float>(std::max<std::size_t>(entities, 1));
    parallel_for(shards, [&](std::size_t s) {
      for (std::size_t i = first(s); i < first(s + 1); ++i) {
        auto& g = *slots[i].graph;
        const auto& t = slots[i].terms;
        std::vector<Var> parts{g.scale(t.lm, inv_tokens)};
        if (t.mr) parts.push_back(g.scale(*t.mr, inv_entities));
        if (t.prior) parts.push_back(g.scale(*t.prior, inv_entities));
        g.backward(g.sum(parts));
      }
    });
    for (std::size_t s = 1; s < shards; ++s) stores[0].accumulate(stores[s]);
    std::vector<Parameter<float>*> active;
    for (auto* p : params)
      if (p->trainable && stores[0].has(*p)) active.push_back(p);
    optimizer_.step(active, stores[0]);

    for (const auto& s : slots) {
      sum_lm += s.graph->scalar(s.terms.lm);
      if (s.terms.mr) sum_mr += s.graph->scalar(*s.terms.mr);
      if (s.terms.prior) sum_prior += s.graph->scalar(*s.terms.prior);
    }
    sum_tokens += tokens;
    sum_entities += entities;
  }
  EpochStats st;
  st.stage = stage;
  st.epoch = epoch;
  st.loss_lm = sum_tokens ? sum_lm / static_cast<double>(sum_tokens) : 0.0;
  st.loss_mr = sum_entities ? sum_mr / static_cast<double>(sum_entities) : 0.0;
  st.loss_prior = sum_entities ? sum_prior / static_cast<double>(sum_entities) : 0.0;
  st.wall_ms = elapsed_ms(start);
  return st;
}

EpochStats Trainer::warmup_epoch(std::size_t epoch) {
  optimizer_.set_lr(config_.lr);
  const LossWeights w = config_.weights();
  return run_pass("warmup", epoch, content_docs(epoch, kTagWarmup), Phase::warmup,
                  [&](Graph<float>& g, const Model<float>::Bound& b, const Document& d) {
                    return c_step_terms<float>(g, model_, b, d, nullptr, w);
                  });
}

EpochStats Trainer::l_epoch(std::size_t epoch) {
  optimizer_.set_lr(config_.lr);
  const LossWeights w = config_.weights();
  const Snapshot<float>* snap = config_.no_content ? nullptr : &content_snap_;
  return run_pass("pretrain_l", epoch, interaction_docs(epoch), Phase::l_step,
                  [&](Graph<float>& g, const Model<float>::Bound& b, const Document& d) {
                    return l_step_terms<float>(g, model_, b, d, snap, w);
                  });
}

EpochStats Trainer::c_epoch(std::size_t epoch) {
  optimizer_.set_lr(config_.lr);
  const LossWeights w = config_.weights();
  return run_pass("pretrain_c", epoch, content_docs(epoch, kTagC), Phase::c_step,
                  [&](Graph<float>& g, const Model<float>::Bound& b, const Document& d) {
                    return c_step_terms<float>(g, model_, b, d, &collab_snap_, w);
                  });
}

EpochStats Trainer::finetune_epoch(std::size_t epoch) {
  optimizer_.set_lr(config_.finetune_lr);
  const LossWeights w = config_.weights();
  const Snapshot<float>* snap = config_.no_content ? nullptr : &content_snap_;
  return run_pass("finetune", epoch, masked_samples(epoch), Phase::finetune,
                  [&](Graph<float>& g, const Model<float>::Bound& b, const MaskedSample& s) {
                    return rec_step_terms<float>(g, model_, b, s, snap, w);
                  });
}

std::vector<EpochStats> Trainer::warmup(std::size_t first_epoch) {
  std::vector<EpochStats> out;
  for (std::size_t e = first_epoch; e <= config_.warmup_epochs; ++e) {
    out.push_back(warmup_epoch(e));
    if (hooks_.on_epoch) hooks_.on_epoch(out.back());
    if (hooks_.on_checkpoint) hooks_.on_checkpoint("warmup", e);
  }
  return out;
}

std::vector<EpochStats> Trainer::pretrain(std::size_t first_epoch) {
  std::vector<EpochStats> out;
  for (std::size_t e = first_epoch; e <= config_.pretrain_epochs; ++e) {
    if (!config_.no_content) content_snap_.refresh(model_.z_cu, model_.z_cv);
    out.push_back(l_epoch(e));
    if (hooks_.on_epoch) hooks_.on_epoch(out.back());
    if (!config_.no_content) {
      collab_snap_.refresh(model_.z_lu, model_.z_lv);
      out.push_back(c_epoch(e));
      if (hooks_.on_epoch) hooks_.on_epoch(out.back());
    }
    if (hooks_.on_checkpoint) hooks_.on_checkpoint("pretrain", e);
  }
  return out;
}

RankingReport Trainer::validate() const {
  return evaluate_ranker(corpus_.table, Split::val, config_.val_metrics, model_ranker(model_, corpus_));
}

FinetuneResult Trainer::finetune() {
  for (auto* p : model_.parameters()) p->state.reset();
  if (!config_.no_content) content_snap_.refresh(model_.z_cu, model_.z_cv);

  FinetuneResult result;
  std::vector<Tensor<float>> best;
  double best_score = 0;
  const auto consider = [&](std::size_t epoch, EpochStats st) {
    const auto report = validate();
    st.val = report.metrics;
    result.epochs.push_back(st);
    if (hooks_.on_epoch) hooks_.on_epoch(st);
    const double score = report.at(config_.select_metric);
    if (epoch == 0 || score > best_score) {
      best_score = score;
      result.best_epoch = epoch;
      result.best_val = report;
      best.clear();
      for (const auto* p : model_.parameters()) best.push_back(p->value);
      if (hooks_.on_best) hooks_.on_best(epoch, report);
    }
  };
  EpochStats initial;
  initial.stage = "finetune";
  initial.epoch = 0;
  consider(0, initial);
  for (std::size_t e = 1; e <= config_.finetune_epochs; ++e) consider(e, finetune_epoch(e));
  auto params = model_.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = std::move(best[i]);
  return result;
}

namespace {

class LogFile {
 public:
  LogFile(const std::filesystem::path& path, bool append)
      : out_(path, std::ios::binary | (append ? std::ios::app : std::ios::trunc)) {
    if (!out_) throw ValidationError("cannot write " + path.string());
  }
  void write(const EpochStats& st, bool echo) {
    const std::string line = st.to_json().dump();
    out_ << line << '\n';
    out_.flush();
    if (echo) std::cerr << line << '\n';
  }

 private:
  std::ofstream out_;
};

// Drops log lines written after the checkpoint a run resumes from.
void truncate_lines(const std::filesystem::path& path, std::size_t keep) {
  std::ifstream in(path, std::ios::binary);
  std::string text, line;
  for (std::size_t n = 0; n < keep && std::getline(in, line); ++n) text += line + '\n';
  in.close();
  write_file_atomic(path, text);
}

nlohmann::json checkpoint_config(const RunOptions& options, const Model<float>& model, const TrainConfig& train) {
  nlohmann::json cfg = options.run_config.is_object() ? options.run_config : nlohmann::json::object();
  cfg["model"] = model.config().to_json();
  cfg["train"] = train.to_json();
  return cfg;
}

}  // namespace

Model<float> run_pretraining(const PreparedCorpus& corpus, const ModelConfig& model_config, const TrainConfig& train,
                             const RunOptions& options) {
  std::filesystem::create_directories(options.out_dir);
  const auto ckpt = options.out_dir / "pretrain.ckpt";
  std::size_t warm_first = 1, pre_first = 1;
  bool resumed = false;
  std::size_t keep_log_lines = 0;
  Model<float> model = [&] {
    if (options.resume && std::filesystem::exists(ckpt)) {
      CheckpointMeta meta;
      Model<float> m = load_checkpoint<float>(ckpt, &meta);
      const std::string stage = meta.train_state.value("stage", "");
      const std::size_t epoch = meta.train_state.value("epoch", std::size_t{0});
      if (stage == "warmup") {
        warm_first = epoch + 1;
      } else if (stage == "pretrain") {
        warm_first = train.warmup_epochs + 1;
        pre_first = epoch + 1;
      } else {
        throw FormatError(ckpt.string() + ": no resumable pretraining state");
      }
      resumed = true;
      keep_log_lines = stage == "warmup" ? epoch
                                         : (train.no_content ? 0 : train.warmup_epochs) +
                                               epoch * (train.no_content ? 1 : 2);
      return m;
    }
    return Model<float>(model_config, train.seed);
  }();
  const auto log_path = options.out_dir / "train_log.jsonl";
  if (resumed) truncate_lines(log_path, keep_log_lines);
  LogFile log(log_path, resumed);
  TrainerHooks hooks;
  hooks.on_epoch = [&](const EpochStats& st) { log.write(st, !options.quiet); };
  hooks.on_checkpoint = [&](const std::string& stage, std::size_t epoch) {
    CheckpointMeta meta;
    meta.config = checkpoint_config(options, model, train);
    meta.train_state = {{"stage", stage}, {"epoch", epoch}};
    save_checkpoint(ckpt, model, meta);
  };
  {
    Trainer trainer(corpus, model, train, hooks);
    if (!train.no_content) trainer.warmup(warm_first);
    trainer.pretrain(pre_first);
  }
  if (train.warmup_epochs == 0 && train.pretrain_epochs == 0) hooks.on_checkpoint("pretrain", 0);
  return model;
}

FinetuneResult run_finetuning(const PreparedCorpus& corpus, Model<float>& model, const TrainConfig& train,
                              const RunOptions& options) {
  std::filesystem::create_directories(options.out_dir);
  LogFile log(options.out_dir / "train_log.jsonl", true);
  TrainerHooks hooks;
  hooks.on_epoch = [&](const EpochStats& st) { log.write(st, !options.quiet); };
  hooks.on_best = [&](std::size_t epoch, const RankingReport& val) {
    CheckpointMeta meta;
    meta.config = checkpoint_config(options, model, train);
    meta.train_state = {{"stage", "finetune"}, {"epoch", epoch}, {"val", val.metrics}};
    save_checkpoint(options.out_dir / "finetune.ckpt", model, meta);
  };
  Trainer trainer(corpus, model, train, hooks);
  return trainer.finetune();
}

}  // namespace cllm4rec
