// SPDX-License-Identifier: Apache-2.0
#include "cllm4rec/optimizer.hpp"

#include <cmath>

namespace cllm4rec {

template <typename T>
Optimizer<T>::Optimizer(OptimizerConfig config) : config_(config) {
  if (!(config_.lr > 0)) throw ValidationError("optimizer: learning rate must be positive");
}

template <typename T>
void Optimizer<T>::step(std::span<Parameter<T>* const> params, GradStore<T>& grads) {
  for (Parameter<T>* p : params) {
    if (!p->trainable) continue;
    if (!grads.has(*p)) throw StateError("optimizer: no gradient for trainable parameter '" + p->name + "'");
  }
  for (Parameter<T>* p : params) {
    if (!p->trainable) continue;
    Tensor<T>& g = grads.grad(*p);
    T* w = p->value.data();
    const std::size_t n = p->value.size();
    if (config_.plain_gradient) {
      const T lr = T(config_.lr);
      for (std::size_t i = 0; i < n; ++i) w[i] -= lr * g[i];
    } else {
      auto& st = p->state;
      if (st.first_moment.shape() != p->value.shape()) {
        st.first_moment = Tensor<T>(p->value.shape());
        st.second_moment = Tensor<T>(p->value.shape());
        st.steps = 0;
      }
      ++st.steps;
      const double t = static_cast<double>(st.steps);
      const T b1 = T(config_.beta1);
      const T b2 = T(config_.beta2);
      const T c1 = T(1.0 / (1.0 - std::pow(config_.beta1, t)));
      const T c2 = T(1.0 / (1.0 - std::pow(config_.beta2, t)));
      const T lr = T(config_.lr);
      const T eps = T(config_.eps);
      T* m = st.first_moment.data();
      T* v = st.second_moment.data();
      for (std::size_t i = 0; i < n; ++i) {
        m[i] = b1 * m[i] + (T(1) - b1) * g[i];
        v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
        w[i] -= lr * (m[i] * c1) / (std::sqrt(v[i] * c2) + eps);
      }
    }
    g.fill(T(0));
  }
}

template class Optimizer<float>;
template class Optimizer<double>;

}  // namespace cllm4rec
