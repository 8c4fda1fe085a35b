// SPDX-License-Identifier: Apache-2.0
#include "cllm4rec/run_config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <ostream>

#include "cllm4rec/errors.hpp"

namespace cllm4rec {

const char* to_string(Provenance p) {
  switch (p) {
    case Provenance::default_value:
      return "default";
    case Provenance::file:
      return "file";
    case Provenance::flag:
      return "flag";
  }
  return "?";
}

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = {
      {"model.K", "64", "embedding width (also the head input width); multiple of heads"},
      {"model.layers", "2", "transformer blocks"},
      {"model.heads", "4", "attention heads per block"},
      {"model.context_length", "128", "maximum prompt + main length in tokens"},
      {"model.init_std", "0.02", "standard deviation of the initial weights"},
      {"train.lambda_l", "0", "prior precision on collaborative embeddings"},
      {"train.lambda_c", "1", "mutual-regularization precision between collaborative and content embeddings"},
      {"train.p_m", "0.3", "fraction of a user's train items held out per finetuning sample"},
      {"train.warmup_epochs", "10", "content-only warm-up epochs"},
      {"train.pretrain_epochs", "100", "alternating pretraining epochs"},
      {"train.finetune_epochs", "150", "recommendation finetuning epochs"},
      {"train.lr", "0.001", "learning rate for warm-up and pretraining"},
      {"train.finetune_lr", "0.001", "learning rate for finetuning"},
      {"train.batch_size", "16", "documents per optimizer step"},
      {"train.seed", "0", "seed for initialization and every per-epoch draw"},
      {"train.no_reorder", "false", "keep item order fixed (timestamp order) instead of permuting it each epoch"},
      {"train.no_content", "false", "collaborative model only: no warm-up, no content steps, lambda_c forced to 0"},
      {"train.trainable_backbone", "false", "train the transformer and word embeddings too"},
      {"train.select_metric", "ndcg@100", "validation metric used to pick the finetuned model"},
      {"data.corpus", "", "prepared corpus directory"},
      {"data.out", "", "output directory"},
  };
  return keys;
}

RunConfig::RunConfig() {
  for (const auto& k : config_keys()) entries_[k.name] = Entry{k.default_value, Provenance::default_value};
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

void RunConfig::load_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open config file " + path.string());
  parse(in, path.string());
}

void RunConfig::parse(std::istream& in, const std::string& source) {
  std::string line, section;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find_first_of("#;");
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ParseError(source + ": unterminated section header", lineno);
      section = trim(line.substr(1, line.size() - 2));
      if (section != "model" && section != "train" && section != "data") {
        throw ParseError(source + ": unknown section [" + section + "]", lineno);
      }
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError(source + ": expected 'key = value'", lineno);
    if (section.empty()) throw ParseError(source + ": key outside of a section", lineno);
    const std::string key = section + "." + trim(line.substr(0, eq));
    if (!entries_.count(key)) throw ParseError(source + ": unknown key '" + key + "'", lineno);
    entries_[key] = Entry{trim(line.substr(eq + 1)), Provenance::file};
  }
}

void RunConfig::set(const std::string& key, const std::string& value, Provenance source) {
  auto it = entries_.find(key);
  if (it == entries_.end()) throw ValidationError("unknown config key '" + key + "'");
  it->second = Entry{value, source};
}

const std::string& RunConfig::get(const std::string& key) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) throw ValidationError("unknown config key '" + key + "'");
  return it->second.value;
}

Provenance RunConfig::provenance(const std::string& key) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) throw ValidationError("unknown config key '" + key + "'");
  return it->second.source;
}

double RunConfig::get_double(const std::string& key) const {
  const std::string& v = get(key);
  double out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw ValidationError("config key '" + key + "' expects a number, got '" + v + "'");
  }
  return out;
}

std::size_t RunConfig::get_size(const std::string& key) const {
  const std::string& v = get(key);
  std::size_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw ValidationError("config key '" + key + "' expects a non-negative integer, got '" + v + "'");
  }
  return out;
}

bool RunConfig::get_bool(const std::string& key) const {
  std::string v = get(key);
  std::transform(v.begin(), v.end(), v.begin(), [](unsigned char c) { return std::tolower(c); });
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ValidationError("config key '" + key + "' expects true/false, got '" + v + "'");
}

ModelConfig RunConfig::model() const {
  ModelConfig m;
  m.K = get_size("model.K");
  m.layers = get_size("model.layers");
  m.heads = get_size("model.heads");
  m.context_length = get_size("model.context_length");
  m.init_std = get_double("model.init_std");
  return m;
}

TrainConfig RunConfig::train(std::ostream* warn) const {
  TrainConfig t;
  t.lambda_l = get_double("train.lambda_l");
  t.lambda_c = get_double("train.lambda_c");
  t.p_m = get_double("train.p_m");
  t.warmup_epochs = get_size("train.warmup_epochs");
  t.pretrain_epochs = get_size("train.pretrain_epochs");
  t.finetune_epochs = get_size("train.finetune_epochs");
  t.lr = get_double("train.lr");
  t.finetune_lr = get_double("train.finetune_lr");
  t.batch_size = get_size("train.batch_size");
  t.seed = get_size("train.seed");
  t.no_reorder = get_bool("train.no_reorder");
  t.no_content = get_bool("train.no_content");
  t.trainable_backbone = get_bool("train.trainable_backbone");
  t.select_metric = get("train.select_metric");
  if (std::find(t.val_metrics.begin(), t.val_metrics.end(), t.select_metric) == t.val_metrics.end()) {
    t.val_metrics.push_back(t.select_metric);
  }
  if (t.no_content && t.lambda_c > 0.0) {
    if (warn) *warn << "warning: no_content disables mutual regularization; lambda_c " << get("train.lambda_c")
                    << " forced to 0\n";
    t.lambda_c = 0.0;
  }
  t.validate();
  return t;
}

nlohmann::ordered_json RunConfig::to_json() const {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (const auto& k : config_keys()) {
    const auto& e = entries_.at(k.name);
    j[k.name] = {{"value", e.value}, {"source", to_string(e.source)}};
  }
  return j;
}

}  // namespace cllm4rec
