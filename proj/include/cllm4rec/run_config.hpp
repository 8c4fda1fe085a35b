// SPDX-License-Identifier: Apache-2.0
//
// Effective run configuration: defaults, overridden by a config file,
// overridden by command-line flags. Keys are `section.name`:
//
//   [model]  K layers heads context_length init_std
//   [train]  lambda_l lambda_c p_m warmup_epochs pretrain_epochs
//            finetune_epochs lr finetune_lr batch_size seed no_reorder
//            no_content trainable_backbone select_metric
//   [data]   corpus out
//
// Config files are flat `key = value` lines under `[section]` headers;
// `#` and `;` start comments.
#pragma once

#include <filesystem>
#include <iosfwd>
#include <json.hpp>
#include <map>
#include <string>
#include <vector>

#include "cllm4rec/model.hpp"
#include "cllm4rec/trainer.hpp"

namespace cllm4rec {

enum class Provenance { default_value, file, flag };
const char* to_string(Provenance p);

struct ConfigKey {
  std::string name;  // section.key
  std::string default_value;
  std::string help;
};

/// Every supported key, in documentation order.
const std::vector<ConfigKey>& config_keys();

class RunConfig {
 public:
  RunConfig();

  /// Unknown keys and malformed lines throw ParseError.
  void load_file(const std::filesystem::path& path);
  void parse(std::istream& in, const std::string& source);
  /// Unknown keys throw ValidationError.
  void set(const std::string& key, const std::string& value, Provenance source);

  const std::string& get(const std::string& key) const;
  double get_double(const std::string& key) const;
  std::size_t get_size(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  Provenance provenance(const std::string& key) const;

  /// Model shape keys only; N, I, J come from the corpus.
  ModelConfig model() const;
  /// Emits a warning to `warn` and forces lambda_c = 0 when no_content is
  /// set together with a positive lambda_c.
  TrainConfig train(std::ostream* warn = nullptr) const;

  /// {"section.key": {"value": ..., "source": ...}}
  nlohmann::ordered_json to_json() const;

 private:
  struct Entry {
    std::string value;
    Provenance source = Provenance::default_value;
  };
  std::map<std::string, Entry> entries_;
};

}  // namespace cllm4rec
