// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>

#include "cllm4rec/tensor.hpp"

namespace cllm4rec {

/// Per-element first/second moment accumulators of the adaptive optimizer.
template <typename T>
struct OptimizerState {
  Tensor<T> first_moment;
  Tensor<T> second_moment;
  std::uint64_t steps = 0;

  void reset() {
    first_moment = Tensor<T>();
    second_moment = Tensor<T>();
    steps = 0;
  }
};

/// A named model tensor. The optimizer never mutates a parameter whose
/// `trainable` flag is false.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  bool trainable = true;
  OptimizerState<T> state;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v, bool train = true)
      : name(std::move(n)), value(std::move(v)), trainable(train) {}
};

/// Gradient accumulators keyed by parameter. One store per worker shard;
/// shards are reduced in a fixed order so results do not depend on the
/// number of threads.
template <typename T>
class GradStore {
 public:
  Tensor<T>& grad(const Parameter<T>& p) {
    auto it = grads_.find(&p);
    if (it == grads_.end()) it = grads_.emplace(&p, Tensor<T>(p.value.shape())).first;
    return it->second;
  }

  const Tensor<T>* find(const Parameter<T>& p) const {
    auto it = grads_.find(&p);
    return it == grads_.end() ? nullptr : &it->second;
  }

  bool has(const Parameter<T>& p) const { return grads_.count(&p) != 0; }
  void erase(const Parameter<T>& p) { grads_.erase(&p); }
  void clear() { grads_.clear(); }
  bool empty() const { return grads_.empty(); }

  void zero() {
    for (auto& [p, g] : grads_) g.fill(T(0));
  }

  void accumulate(const GradStore& other) {
    for (const auto& [p, g] : other.grads_) {
      Tensor<T>& dst = grad(*p);
      T* d = dst.data();
      const T* s = g.data();
      for (std::size_t i = 0, n = g.size(); i < n; ++i) d[i] += s[i];
    }
  }

 private:
  std::unordered_map<const Parameter<T>*, Tensor<T>> grads_;
};

}  // namespace cllm4rec
