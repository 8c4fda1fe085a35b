// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>

#include "cllm4rec/parameter.hpp"

namespace cllm4rec {

struct OptimizerConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// p -= lr * g, no moments. Used by deterministic unit tests.
  bool plain_gradient = false;
};

/// Adam-style per-coordinate adaptive update. Moments live in each
/// Parameter's OptimizerState so they checkpoint with the parameter.
template <typename T>
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig config = {});

  /// Updates every trainable parameter in `params` from `grads`, then zeroes
  /// the consumed gradients. Frozen parameters are skipped. A trainable
  /// parameter without a gradient throws StateError.
  void step(std::span<Parameter<T>* const> params, GradStore<T>& grads);

  const OptimizerConfig& config() const noexcept { return config_; }
  void set_lr(double lr) { config_.lr = lr; }

 private:
  OptimizerConfig config_;
};

extern template class Optimizer<float>;
extern template class Optimizer<double>;

}  // namespace cllm4rec
