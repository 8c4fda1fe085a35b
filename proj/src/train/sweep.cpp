// SPDX-License-Identifier: Apache-2.0
#include "cllm4rec/sweep.hpp"

#include "cllm4rec/errors.hpp"

namespace cllm4rec {

nlohmann::ordered_json SweepReport::to_json() const {
  nlohmann::ordered_json j;
  j["param"] = param;
  j["rows"] = nlohmann::ordered_json::array();
  for (const auto& r : rows) {
    nlohmann::ordered_json row;
    row["value"] = r.value;
    row["best_epoch"] = r.best_epoch;
    row["users"] = r.test.users_evaluated;
    row["metrics"] = nlohmann::ordered_json::object();
    for (const auto& [name, v] : r.test.metrics) row["metrics"][name] = v;
    j["rows"].push_back(std::move(row));
  }
  return j;
}

TrainConfig with_param(TrainConfig train, const std::string& param, double value) {
  if (param == "lambda_c") {
    train.lambda_c = value;
  } else if (param == "lambda_l") {
    train.lambda_l = value;
  } else if (param == "p_m") {
    train.p_m = value;
  } else {
    throw ValidationError("sweep parameter must be lambda_c, lambda_l or p_m, got '" + param + "'");
  }
  train.validate();
  return train;
}

SweepReport run_sweep(const PreparedCorpus& corpus, const ModelConfig& base, const TrainConfig& train,
                      const std::string& param, const std::vector<double>& values,
                      const std::vector<std::string>& metrics, const RunOptions& options) {
  if (values.empty()) throw ValidationError("sweep needs at least one value");
  std::vector<TrainConfig> configs;
  for (double v : values) configs.push_back(with_param(train, param, v));
  SweepReport report;
  report.param = param;
  for (std::size_t k = 0; k < values.size(); ++k) {
    RunOptions run = options;
    run.resume = false;
    run.out_dir = options.out_dir / (param + "_" + std::to_string(k));
    Model<float> model = run_pretraining(corpus, model_config_for(corpus, base, configs[k]), configs[k], run);
    const FinetuneResult fit = run_finetuning(corpus, model, configs[k], run);
    SweepRow row;
    row.value = values[k];
    row.best_epoch = fit.best_epoch;
    row.test = evaluate_ranker(corpus.table, Split::test, metrics, model_ranker(model, corpus));
    report.rows.push_back(std::move(row));
  }
  return report;
}

}  // namespace cllm4rec
