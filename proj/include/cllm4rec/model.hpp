// SPDX-License-Identifier: Apache-2.0
//
// Base model: word/user/item embedding tables, a small pre-LN causal
// transformer, and the tied prediction heads.
//
// Two embedding tables exist per entity type. The collaborative tables
// (z_lu, z_lv) embed user/item tokens when the model reads interaction
// sequences; the content tables (z_cu, z_cv) embed them when it reads text.
// Word tokens always use z_t. Heads are the tables themselves:
//   item head, recommendation head: logits = h z_lv^T
//   vocab head:                      logits = h z_t^T
#pragma once

#include <cstddef>
#include <cstdint>
#include <json.hpp>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "cllm4rec/graph.hpp"
#include "cllm4rec/parameter.hpp"
#include "cllm4rec/vocab.hpp"

namespace cllm4rec {

struct ModelConfig {
  std::size_t N = 0;  // words
  std::size_t I = 0;  // users
  std::size_t J = 0;  // items
  std::size_t K = 64;
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t context_length = 128;
  bool backbone_frozen = true;
  double lambda_l = 0.0;
  double lambda_c = 1.0;
  double init_std = 0.02;

  /// Throws ValidationError on inconsistent values.
  void validate() const;
  nlohmann::ordered_json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
  bool operator==(const ModelConfig&) const = default;
};

/// Which user/item tables embed ID tokens.
enum class Mode : std::uint8_t { collaborative, content };

template <typename T>
struct Block {
  Parameter<T> ln1_gain, ln1_bias;
  Parameter<T> w_qkv, b_qkv;  // [K, 3K], [3K]
  Parameter<T> w_out, b_out;  // [K, K], [K]
  Parameter<T> ln2_gain, ln2_bias;
  Parameter<T> w_fc, b_fc;      // [K, 4K], [4K]
  Parameter<T> w_proj, b_proj;  // [4K, K], [K]
};

template <typename T>
class Model {
 public:
  /// Parameter handles of one model on one graph tape.
  struct Bound {
    Var z_t, z_lu, z_lv, z_cu, z_cv, pos;
    struct Layer {
      Var ln1_gain, ln1_bias, w_qkv, b_qkv, w_out, b_out, ln2_gain, ln2_bias, w_fc, b_fc, w_proj, b_proj;
    };
    std::vector<Layer> layers;
    Var lnf_gain, lnf_bias;
  };

  /// Draws every weight from N(0, init_std^2) (layer-norm gains 1, biases 0).
  /// The content tables start at the collaborative ones plus N(0, 1/lambda_c)
  /// noise; with lambda_c = 0 they are drawn independently like z_l.
  Model(const ModelConfig& config, std::uint64_t seed);

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  const ModelConfig& config() const noexcept { return config_; }

  Parameter<T> z_t, z_lu, z_lv, z_cu, z_cv;
  Parameter<T> pos;  // [context_length, K]
  std::vector<Block<T>> blocks;
  Parameter<T> lnf_gain, lnf_bias;

  /// Every parameter in a fixed order (tables, positions, blocks, final norm).
  std::vector<Parameter<T>*> parameters();
  std::vector<const Parameter<T>*> parameters() const;
  /// Positions, blocks and final norm.
  std::vector<Parameter<T>*> backbone();
  Parameter<T>* find(const std::string& name);

  /// Freezes or unfreezes the backbone and z_t together.
  void set_backbone_frozen(bool frozen);

  Bound bind(Graph<T>& g) const;

  /// [len, K] token embeddings plus positions 0..len-1. Throws IndexError for
  /// ids >= N+I+J and LengthError past the context.
  Var embed(Graph<T>& g, const Bound& b, std::span<const TokenId> tokens, Mode mode) const;

  /// Hidden states at positions [P-1, P+M-1] (M+1 rows) for prompt length P
  /// and main length M. Row k predicts main[k]; the last row follows the
  /// final main token (or the prompt, when M = 0).
  Var forward(Graph<T>& g, const Bound& b, std::span<const TokenId> prompt, std::span<const TokenId> main,
              Mode mode) const;

  Var item_logits(Graph<T>& g, const Bound& b, Var h) const { return g.matmul_nt(h, b.z_lv); }
  Var vocab_logits(Graph<T>& g, const Bound& b, Var h) const { return g.matmul_nt(h, b.z_t); }
  Var rec_probs(Graph<T>& g, const Bound& b, Var h_last) const { return g.softmax(item_logits(g, b, h_last)); }

  /// Recommendation distribution over the J items after `prompt`.
  std::vector<T> rec_distribution(std::span<const TokenId> prompt) const;
  /// Item-head logits at the last position of prompt + main.
  std::vector<T> next_item_logits(std::span<const TokenId> prompt, std::span<const TokenId> main) const;

  /// Same weights in another precision (optimizer state included).
  template <typename U>
  Model<U> converted() const;

 private:
  struct Uninitialized {};
  explicit Model(const ModelConfig& config, Uninitialized);
  template <typename U>
  friend class Model;

  void allocate();
  ModelConfig config_;
};

extern template class Model<float>;
extern template class Model<double>;

}  // namespace cllm4rec
