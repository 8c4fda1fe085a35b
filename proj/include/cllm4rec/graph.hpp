// SPDX-License-Identifier: Apache-2.0
//
// Tape-based reverse-mode automatic differentiation over dense tensors.
//
// A Graph records operations in creation order; backward() replays the tape
// in reverse. Parameters enter the tape by reference (no copy). When the
// graph is bound to a GradStore, gradients of trainable parameters are
// accumulated directly into the store; frozen parameters are constants.

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "cllm4rec/parameter.hpp"
#include "cllm4rec/tensor.hpp"

namespace cllm4rec {

/// Floor applied to probabilities before taking logarithms.
inline constexpr double kProbabilityFloor = 1e-12;

/// Handle to a node on a Graph tape.
struct Var {
  std::size_t id = 0;
};

template <typename T>
class Graph {
 public:
  /// One row of a table, used by gather_rows.
  struct RowRef {
    Var table;
    std::size_t row;
  };

  explicit Graph(GradStore<T>* sink = nullptr) : sink_(sink) {}

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor<T> value);
  /// Constant that references external storage; `value` must outlive the graph.
  Var constant_ref(const Tensor<T>& value);
  /// Free leaf that requires a gradient; read it back with grad().
  Var leaf(Tensor<T> value);
  /// Parameter leaf. Gradients reach the bound GradStore only when the
  /// parameter is trainable.
  Var param(const Parameter<T>& p);

  const Tensor<T>& value(Var v) const;
  T scalar(Var v) const;
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
  /// Gradient of a leaf or intermediate after backward(). Throws StateError
  /// when the node never received a gradient.
  const Tensor<T>& grad(Var v) const;

  /// Seeds d(loss)/d(loss) = 1 and propagates to every reachable node.
  void backward(Var loss);

  std::size_t size() const noexcept { return nodes_.size(); }

  Var add(Var a, Var b);
  /// [R,C] + [C] broadcast over rows.
  Var add_row(Var x, Var bias);
  Var mul(Var a, Var b);
  Var scale(Var a, T factor);
  /// Sum of scalar nodes.
  Var sum(std::span<const Var> scalars);

  /// [R,A] x [A,B] -> [R,B]
  Var matmul(Var x, Var w);
  /// [R,A] x [B,A]^T -> [R,B]; the tied-head product h * Z^T.
  Var matmul_nt(Var x, Var w);

  Var rows(Var x, std::size_t begin, std::size_t count);
  Var gather_rows(std::span<const RowRef> refs);

  Var layer_norm(Var x, Var gain, Var bias, T eps = T(1e-5));
  /// tanh-approximated GELU.
  Var gelu(Var x);
  /// Multi-head causal self-attention over a packed [R, 3C] q|k|v input.
  /// `key_valid` (empty = all valid) removes padding keys from every row.
  Var causal_attention(Var qkv, std::size_t heads, std::span<const std::uint8_t> key_valid = {});

  /// Row-wise softmax over the trailing dimension. Non-finite input throws
  /// NumericDomainError.
  Var softmax(Var x);
  /// sum_{k: mask_k = 1} -ln softmax(logits_k)[target_k]
  Var masked_nll(Var logits, std::span<const std::size_t> targets, std::span<const std::uint8_t> mask);
  /// -sum_j counts_j * ln max(probs_j, floor); the multinomial coefficient is omitted.
  Var multinomial_nll(Var probs, std::span<const int> counts);
  /// (lambda/2) * ||a - b||^2, or (lambda/2) * ||a||^2 when b is absent.
  /// `b` is a stop-gradient constant.
  Var l2_penalty(Var a, std::optional<std::span<const T>> b, T lambda);

 private:
  struct Node {
    Tensor<T> own;
    const Tensor<T>* external = nullptr;
    Tensor<T> grad;
    Tensor<T>* grad_sink = nullptr;
    bool requires_grad = false;
    std::function<void()> backward;

    const Tensor<T>& value() const { return external ? *external : own; }
  };

  Var push(Tensor<T> value, bool requires_grad);
  Tensor<T>& grad_ref(std::size_t id);
  bool grad_touched(std::size_t id) const;

  std::vector<Node> nodes_;
  GradStore<T>* sink_ = nullptr;
};

/// Row-wise softmax of a plain tensor (max-subtracted).
template <typename T>
Tensor<T> softmax(const Tensor<T>& logits);

extern template class Graph<float>;
extern template class Graph<double>;

}  // namespace cllm4rec
