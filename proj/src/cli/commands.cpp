// SPDX-License-Identifier: Apache-2.0
#include <CLI11.hpp>
#include <algorithm>
#include <cerrno>
#include <csignal>
#include <fcntl.h>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <sys/types.h>
#include <unistd.h>

#include "cllm4rec/binary_io.hpp"
#include "cllm4rec/checkpoint.hpp"
#include "cllm4rec/cli.hpp"
#include "cllm4rec/corpus_io.hpp"
#include "cllm4rec/errors.hpp"
#include "cllm4rec/parallel.hpp"
#include "cllm4rec/recommend.hpp"
#include "cllm4rec/run_config.hpp"
#include "cllm4rec/sweep.hpp"
#include "cllm4rec/synth.hpp"
#include "cllm4rec/trainer.hpp"

namespace cllm4rec {

namespace {

namespace fs = std::filesystem;

/// Exclusive writer lock on an output directory. A lock left behind by a
/// process that no longer exists is taken over.
class DirLock {
 public:
  explicit DirLock(const fs::path& dir) : path_(dir / ".cllm4rec.lock") {
    fs::create_directories(dir);
    for (int attempt = 0; attempt < 2; ++attempt) {
      const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
      if (fd >= 0) {
        const std::string pid = std::to_string(::getpid()) + "\n";
        [[maybe_unused]] auto n = ::write(fd, pid.data(), pid.size());
        ::close(fd);
        return;
      }
      if (errno != EEXIST) throw ValidationError("cannot create lock file " + path_.string());
      long owner = 0;
      std::ifstream(path_) >> owner;
      if (owner > 0 && (::kill(static_cast<pid_t>(owner), 0) == 0 || errno == EPERM)) {
        throw ValidationError("output directory " + dir.string() + " is locked by process " + std::to_string(owner));
      }
      fs::remove(path_);
    }
    throw ValidationError("cannot lock output directory " + dir.string());
  }
  ~DirLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  fs::path path_;
};

void require_file(const fs::path& p, const char* what) {
  if (!fs::is_regular_file(p)) throw ValidationError(std::string(what) + " not found: " + p.string());
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto b = item.find_first_not_of(' ');
    const auto e = item.find_last_not_of(' ');
    if (b != std::string::npos) out.push_back(item.substr(b, e - b + 1));
  }
  return out;
}

/// Flags that override config keys, shared by the training commands.
struct Overrides {
  std::string config_file;
  std::vector<std::string> assignments;  // --set section.key=value
  std::vector<std::pair<std::string, std::string>> flag_values;
  std::size_t threads = 0;

  void attach(CLI::App* app, bool training) {
    app->add_option("--config", config_file, "config file with [model]/[train]/[data] sections");
    app->add_option("--set", assignments, "override any config key: section.key=value (repeatable)");
    app->add_option("--threads", threads, "worker threads (default: CLLM4REC_THREADS or all cores)");
    bind(app, "--corpus", "data.corpus", "prepared corpus directory");
    if (!training) return;
    bind(app, "--out", "data.out", "output directory");
    bind(app, "--seed", "train.seed", "random seed");
    bind(app, "--lambda-c", "train.lambda_c", "mutual-regularization precision");
    bind(app, "--lambda-l", "train.lambda_l", "prior precision");
    bind(app, "--p-m", "train.p_m", "held-out fraction for finetuning samples");
    bind(app, "--lr", "train.lr", "pretraining learning rate");
    bind(app, "--finetune-lr", "train.finetune_lr", "finetuning learning rate");
    bind(app, "--batch-size", "train.batch_size", "documents per step");
    bind(app, "--warmup-epochs", "train.warmup_epochs", "content warm-up epochs");
    bind(app, "--pretrain-epochs", "train.pretrain_epochs", "pretraining epochs");
    bind(app, "--finetune-epochs", "train.finetune_epochs", "finetuning epochs");
    bind(app, "--dim", "model.K", "embedding width K");
    bind(app, "--layers", "model.layers", "transformer blocks");
    bind(app, "--heads", "model.heads", "attention heads");
    bind(app, "--context-length", "model.context_length", "context length in tokens");
    flag(app, "--no-reorder", "train.no_reorder", "keep stored item order (no per-epoch permutation)");
    flag(app, "--no-content", "train.no_content", "collaborative model only (lambda_c forced to 0)");
    flag(app, "--trainable-backbone", "train.trainable_backbone", "train the transformer and word embeddings");
  }

  RunConfig resolve() const {
    RunConfig cfg;
    if (!config_file.empty()) cfg.load_file(config_file);
    for (const auto& [key, value] : flag_values) cfg.set(key, value, Provenance::flag);
    for (const auto& a : assignments) {
      const auto eq = a.find('=');
      if (eq == std::string::npos) throw ValidationError("--set expects section.key=value, got '" + a + "'");
      cfg.set(a.substr(0, eq), a.substr(eq + 1), Provenance::flag);
    }
    if (threads > 0) set_thread_count(threads);
    return cfg;
  }

 private:
  // CLI11 callbacks record the raw string so that provenance is exact.
  void bind(CLI::App* app, const std::string& flag_name, const std::string& key, const std::string& help) {
    app->add_option_function<std::string>(
        flag_name, [this, key](const std::string& v) { flag_values.emplace_back(key, v); }, help + " [" + key + "]");
  }
  void flag(CLI::App* app, const std::string& flag_name, const std::string& key, const std::string& help) {
    app->add_flag_callback(flag_name, [this, key] { flag_values.emplace_back(key, "true"); }, help + " [" + key + "]");
  }
};

fs::path required_path(const RunConfig& cfg, const char* key, const char* flag) {
  const std::string v = cfg.get(key);
  if (v.empty()) throw ValidationError(std::string("missing ") + flag + " (or " + key + " in the config file)");
  return v;
}

nlohmann::json run_config_json(const RunConfig& cfg) {
  nlohmann::json j;
  j["effective"] = cfg.to_json();
  return j;
}

void write_json(const fs::path& path, const nlohmann::ordered_json& j) { write_file_atomic(path, j.dump(2) + "\n"); }

std::size_t find_user(const PreparedCorpus& corpus, const std::string& id) {
  const auto& ids = corpus.table.user_ids;
  const auto it = std::find(ids.begin(), ids.end(), id);
  if (it == ids.end()) throw ValidationError("unknown user id '" + id + "'");
  return static_cast<std::size_t>(it - ids.begin());
}

void check_model_matches(const Model<float>& model, const PreparedCorpus& corpus) {
  const auto& c = model.config();
  if (c.N != corpus.vocab.word_count() || c.I != corpus.vocab.user_count() || c.J != corpus.vocab.item_count()) {
    throw ValidationError("checkpoint token space does not match the corpus (N/I/J differ)");
  }
}

std::string format_score(double v) {
  std::ostringstream s;
  s << std::setprecision(6) << v;
  return s.str();
}

std::string help_footer() {
  std::ostringstream s;
  s << "\nConfig keys (file sections [model]/[train]/[data]; flags override the file, which overrides defaults):\n";
  for (const auto& k : config_keys()) {
    s << "  " << std::left << std::setw(26) << k.name << " default "
      << (k.default_value.empty() ? "(none)" : k.default_value) << ". " << k.help << "\n";
  }
  s << "\nEnvironment: CLLM4REC_THREADS caps worker threads.\n"
    << "Exit codes: 0 ok, 1 unexpected failure, 2 usage or input error, 3 empty result, 4 malformed file.\n";
  return s.str();
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Collaborative + content LLM-style recommender: data preparation, training, evaluation"};
  app.name("cllm4rec");
  app.footer(help_footer());
  app.require_subcommand(1);

  // prepare
  auto* prepare = app.add_subcommand("prepare", "build a prepared corpus from raw interactions and texts");
  std::string p_inter, p_reviews, p_ufeat, p_ifeat, p_out;
  PrepareOptions popt;
  prepare->add_option("--interactions", p_inter, "CSV with user_id,item_id,rating,timestamp")->required();
  prepare->add_option("--reviews", p_reviews, "JSON Lines with user_id, item_id, text")->required();
  prepare->add_option("--user-features", p_ufeat, "JSON Lines with user_id, text");
  prepare->add_option("--item-features", p_ifeat, "JSON Lines with item_id, text");
  prepare->add_option("--out", p_out, "output corpus directory")->required();
  prepare->add_option("--min-freq", popt.min_freq, "minimum word count")->capture_default_str();
  prepare->add_option("--max-vocab", popt.max_vocab, "maximum word vocabulary size")->capture_default_str();
  prepare->add_option("--seed", popt.seed, "split seed")->capture_default_str();
  prepare->add_option("--core", popt.core, "k-core threshold")->capture_default_str();
  prepare->add_option("--rating-threshold", popt.rating_threshold, "keep ratings above this")->capture_default_str();

  // synth
  auto* synth = app.add_subcommand("synth", "generate a planted-block synthetic corpus");
  SynthConfig sc;
  std::string s_out;
  std::size_t s_min_freq = 1;
  synth->add_option("--users", sc.users, "users")->capture_default_str();
  synth->add_option("--items", sc.items, "items")->capture_default_str();
  synth->add_option("--blocks", sc.blocks, "planted blocks")->capture_default_str();
  synth->add_option("--inter-per-user", sc.inter_per_user, "interactions per user")->capture_default_str();
  synth->add_option("--noise", sc.noise, "cross-block interaction rate")->capture_default_str();
  synth->add_option("--words-per-block", sc.words_per_block, "review word pool per block")->capture_default_str();
  synth->add_option("--review-length", sc.review_length, "words per review")->capture_default_str();
  synth->add_option("--seed", sc.seed, "seed")->capture_default_str();
  synth->add_option("--min-freq", s_min_freq, "minimum word count")->capture_default_str();
  synth->add_option("--out", s_out, "output corpus directory")->required();

  // pretrain
  auto* pretrain = app.add_subcommand("pretrain", "content warm-up and alternating pretraining");
  Overrides pre_ov;
  pre_ov.attach(pretrain, true);
  bool resume = false, verbose = false;
  pretrain->add_flag("--resume", resume, "continue from <out>/pretrain.ckpt");
  pretrain->add_flag("--verbose", verbose, "echo training log lines to stderr");

  // finetune
  auto* finetune = app.add_subcommand("finetune", "masked-prompt recommendation finetuning");
  Overrides fin_ov;
  fin_ov.attach(finetune, true);
  std::string f_ckpt;
  bool from_scratch = false, f_verbose = false;
  finetune->add_option("--checkpoint", f_ckpt, "pretrained checkpoint (default <out>/pretrain.ckpt)");
  finetune->add_flag("--from-scratch", from_scratch, "start from a fresh model instead of a checkpoint");
  finetune->add_flag("--verbose", f_verbose, "echo training log lines to stderr");

  // evaluate
  auto* evaluate = app.add_subcommand("evaluate", "ranking metrics on a split");
  Overrides ev_ov;
  ev_ov.attach(evaluate, false);
  std::string e_ckpt, e_split = "test", e_metrics = "recall@20,recall@40,ndcg@100", e_report, e_baseline;
  bool pretrain_rec = false, per_user = false;
  evaluate->add_option("--checkpoint", e_ckpt, "model checkpoint");
  evaluate->add_option("--split", e_split, "val or test")->capture_default_str();
  evaluate->add_option("--metrics", e_metrics, "comma-separated recall@K / ndcg@K")->capture_default_str();
  evaluate->add_option("--report", e_report, "write the report JSON here (default: stdout)");
  evaluate->add_flag("--pretrain-rec", pretrain_rec, "rank with the pretrained item head");
  evaluate->add_flag("--per-user", per_user, "include per-user values");
  evaluate->add_option("--baseline", e_baseline, "evaluate a baseline instead of a model: popularity");

  // recommend
  auto* recommend = app.add_subcommand("recommend", "top-M items for one user");
  Overrides rec_ov;
  rec_ov.attach(recommend, false);
  std::string r_ckpt, r_user;
  std::size_t r_top = 10;
  bool r_pretrain = false;
  recommend->add_option("--checkpoint", r_ckpt, "model checkpoint")->required();
  recommend->add_option("--user-id", r_user, "original user id")->required();
  recommend->add_option("--top", r_top, "number of items")->capture_default_str();
  recommend->add_flag("--pretrain-rec", r_pretrain, "rank with the pretrained item head");

  // sweep
  auto* sweep = app.add_subcommand("sweep", "full schedule per value of one hyperparameter");
  Overrides sw_ov;
  sw_ov.attach(sweep, true);
  std::string w_param, w_values, w_metrics = "recall@20,recall@40,ndcg@100";
  sweep->add_option("--param", w_param, "lambda_c, lambda_l or p_m")->required();
  sweep->add_option("--values", w_values, "comma-separated values")->required();
  sweep->add_option("--metrics", w_metrics, "test metrics per row")->capture_default_str();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*prepare) {
      require_file(p_inter, "interactions file");
      require_file(p_reviews, "reviews file");
      if (!p_ufeat.empty()) require_file(p_ufeat, "user feature file");
      if (!p_ifeat.empty()) require_file(p_ifeat, "item feature file");
      DirLock lock(p_out);
      PrepareInputs in;
      in.raw = load_interactions(p_inter);
      in.reviews = read_text_records(p_reviews, true, true);
      if (!p_ufeat.empty()) in.user_features = read_text_records(p_ufeat, true, false);
      if (!p_ifeat.empty()) in.item_features = read_text_records(p_ifeat, false, true);
      const auto corpus = prepare_corpus(in, popt);
      save_prepared(corpus, p_out, popt);
      out << "prepared " << corpus.table.users() << " users, " << corpus.table.items() << " items, "
          << corpus.table.interaction_count() << " interactions, " << corpus.vocab.word_count() << " words -> "
          << p_out << "\n";
      return kExitOk;
    }
    if (*synth) {
      const auto data = synth_generate(sc);
      DirLock lock(s_out);
      const fs::path raw = fs::path(s_out) / "raw";
      write_raw_dataset(data, raw);
      PrepareInputs in;
      in.raw = load_interactions(raw / "interactions.csv");
      in.reviews = read_text_records(raw / "reviews.jsonl", true, true);
      PrepareOptions opt;
      opt.seed = sc.seed;
      opt.min_freq = s_min_freq;
      const auto corpus = prepare_corpus(in, opt);
      save_prepared(corpus, s_out, opt);
      write_synth_truth(data, fs::path(s_out) / "synth_truth.json");
      out << "synthesized " << corpus.table.users() << " users, " << corpus.table.items() << " items, "
          << data.truth.cross_block << " cross-block interactions -> " << s_out << "\n";
      return kExitOk;
    }
    if (*pretrain) {
      const RunConfig cfg = pre_ov.resolve();
      const TrainConfig train = cfg.train(&err);
      const fs::path corpus_dir = required_path(cfg, "data.corpus", "--corpus");
      const fs::path out_dir = required_path(cfg, "data.out", "--out");
      const auto corpus = load_prepared(corpus_dir);
      DirLock lock(out_dir);
      write_json(out_dir / "config.json", cfg.to_json());
      RunOptions ro{out_dir, run_config_json(cfg), resume, !verbose};
      run_pretraining(corpus, model_config_for(corpus, cfg.model(), train), train, ro);
      out << "pretrained -> " << (out_dir / "pretrain.ckpt").string() << "\n";
      return kExitOk;
    }
    if (*finetune) {
      const RunConfig cfg = fin_ov.resolve();
      const TrainConfig train = cfg.train(&err);
      const fs::path corpus_dir = required_path(cfg, "data.corpus", "--corpus");
      const fs::path out_dir = required_path(cfg, "data.out", "--out");
      const auto corpus = load_prepared(corpus_dir);
      Model<float> model = [&] {
        if (from_scratch) return Model<float>(model_config_for(corpus, cfg.model(), train), train.seed);
        const fs::path ckpt = f_ckpt.empty() ? out_dir / "pretrain.ckpt" : fs::path(f_ckpt);
        require_file(ckpt, "checkpoint");
        return load_checkpoint<float>(ckpt);
      }();
      check_model_matches(model, corpus);
      DirLock lock(out_dir);
      write_json(out_dir / "finetune_config.json", cfg.to_json());
      RunOptions ro{out_dir, run_config_json(cfg), false, !f_verbose};
      const auto result = run_finetuning(corpus, model, train, ro);
      out << "finetuned: best epoch " << result.best_epoch << ", val " << train.select_metric << " "
          << format_score(result.best_val.at(train.select_metric)) << " -> " << (out_dir / "finetune.ckpt").string()
          << "\n";
      return kExitOk;
    }
    if (*evaluate) {
      const RunConfig cfg = ev_ov.resolve();
      const auto corpus = load_prepared(required_path(cfg, "data.corpus", "--corpus"));
      const Split split = parse_split(e_split);
      if (split == Split::train) throw ValidationError("evaluate needs --split val or test");
      const auto metrics = split_list(e_metrics);
      for (const auto& m : metrics) parse_metric_name(m);
      nlohmann::ordered_json report;
      if (!e_baseline.empty()) {
        if (e_baseline != "popularity") throw ValidationError("unknown baseline '" + e_baseline + "'");
        const auto r = evaluate_ranker(corpus.table, split, metrics, popularity_ranker(corpus.table));
        if (r.users_evaluated == 0) throw EmptyResultError("no users with a nonempty " + e_split + " holdout");
        report = report_to_json(r, "", config_hash({{"baseline", "popularity"}}), per_user);
      } else {
        if (e_ckpt.empty()) throw ValidationError("evaluate needs --checkpoint (or --baseline popularity)");
        require_file(e_ckpt, "checkpoint");
        CheckpointMeta meta;
        const auto model = load_checkpoint<float>(e_ckpt, &meta);
        check_model_matches(model, corpus);
        const Ranker ranker = pretrain_rec ? pretrain_ranker(model, corpus) : model_ranker(model, corpus);
        const auto r = evaluate_ranker(corpus.table, split, metrics, ranker);
        if (r.users_evaluated == 0) throw EmptyResultError("no users with a nonempty " + e_split + " holdout");
        report = report_to_json(r, e_ckpt, config_hash(meta.config), per_user);
        report["mode"] = pretrain_rec ? "pretrain_head" : "recommendation_head";
      }
      if (e_report.empty()) {
        out << report.dump(2) << "\n";
      } else {
        write_json(e_report, report);
        for (const auto& [name, v] : report["metrics"].items()) out << name << "\t" << format_score(v.get<double>()) << "\n";
      }
      return kExitOk;
    }
    if (*recommend) {
      const RunConfig cfg = rec_ov.resolve();
      const auto corpus = load_prepared(required_path(cfg, "data.corpus", "--corpus"));
      require_file(r_ckpt, "checkpoint");
      const auto model = load_checkpoint<float>(r_ckpt);
      check_model_matches(model, corpus);
      const std::size_t user = find_user(corpus, r_user);
      const auto items = r_pretrain ? recommend_pretrain(model, corpus, user, r_top)
                                    : recommend_topM(model, corpus, user, r_top);
      if (items.empty()) throw EmptyResultError("user '" + r_user + "' has no uninteracted items");
      for (std::size_t k = 0; k < items.size(); ++k) {
        out << (k + 1) << '\t' << corpus.table.item_ids[items[k].item] << '\t' << format_score(items[k].score) << '\n';
      }
      return kExitOk;
    }
    if (*sweep) {
      const RunConfig cfg = sw_ov.resolve();
      const TrainConfig train = cfg.train(&err);
      const fs::path out_dir = required_path(cfg, "data.out", "--out");
      const auto corpus = load_prepared(required_path(cfg, "data.corpus", "--corpus"));
      std::vector<double> values;
      for (const auto& v : split_list(w_values)) {
        try {
          std::size_t used = 0;
          values.push_back(std::stod(v, &used));
          if (used != v.size()) throw std::invalid_argument(v);
        } catch (const std::logic_error&) {
          throw ValidationError("--values: '" + v + "' is not a number");
        }
      }
      const auto metrics = split_list(w_metrics);
      for (const auto& m : metrics) parse_metric_name(m);
      DirLock lock(out_dir);
      write_json(out_dir / "config.json", cfg.to_json());
      RunOptions ro{out_dir, run_config_json(cfg), false, true};
      const auto report = run_sweep(corpus, cfg.model(), train, w_param, values, metrics, ro);
      auto j = report.to_json();
      j["config_hash"] = config_hash(cfg.to_json());
      write_json(out_dir / "sweep.json", j);
      out << j.dump(2) << "\n";
      return kExitOk;
    }
  } catch (const EmptyResultError& e) {
    err << "error: " << e.what() << "\n";
    return kExitEmpty;
  } catch (const FormatError& e) {
    err << "error: " << e.what() << "\n";
    return kExitFormat;
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitUsage;
}

}  // namespace cllm4rec
