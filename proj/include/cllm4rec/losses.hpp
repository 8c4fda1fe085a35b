// SPDX-License-Identifier: Apache-2.0
//
// Per-document training objectives.
//
//   L-step   item-head NLL of an interaction document, plus mutual
//            regularization of z_lu/z_lv toward frozen content embeddings
//            and the z_l prior, for the user and every item in the document.
//   C-step   vocab-head NLL of a review/feature document, plus mutual
//            regularization of z_cu/z_cv toward frozen collaborative
//            embeddings for the entities named in the prompt.
//   rec      multinomial NLL of held-out items under the recommendation
//            head, plus prior and regularization terms over the user and
//            the prompt items.
//
// Terms are returned unnormalized so the trainer can average them per token
// and per entity over a batch.
#pragma once

#include <cstddef>
#include <optional>

#include "cllm4rec/documents.hpp"
#include "cllm4rec/model.hpp"

namespace cllm4rec {

/// Frozen copy of one user table and one item table, refreshed at the start
/// of an alternation phase. Never part of a graph's trainable set.
template <typename T>
struct Snapshot {
  Tensor<T> users;
  Tensor<T> items;
  std::size_t refreshes = 0;

  void refresh(const Parameter<T>& user_table, const Parameter<T>& item_table) {
    users = user_table.value;
    items = item_table.value;
    ++refreshes;
  }
};

template <typename T>
Snapshot<T> content_snapshot(const Model<T>& m) {
  Snapshot<T> s;
  s.refresh(m.z_cu, m.z_cv);
  return s;
}

template <typename T>
Snapshot<T> collaborative_snapshot(const Model<T>& m) {
  Snapshot<T> s;
  s.refresh(m.z_lu, m.z_lv);
  return s;
}

struct LossWeights {
  double lambda_l = 0.0;
  double lambda_c = 1.0;
};

struct LossTerms {
  Var lm;
  std::optional<Var> mr;
  std::optional<Var> prior;
  std::size_t tokens = 0;    // LM targets (rec: number of samples = 1)
  std::size_t entities = 0;  // penalized rows (user + items)
};

/// `snapshot` null disables mutual regularization (collaborative-only mode).
/// A document whose main text is not items throws ValidationError.
template <typename T>
LossTerms l_step_terms(Graph<T>& g, const Model<T>& model, const typename Model<T>::Bound& b, const Document& doc,
                       const Snapshot<T>* content, const LossWeights& w);

/// `collab` null disables mutual regularization (content warm-up).
template <typename T>
LossTerms c_step_terms(Graph<T>& g, const Model<T>& model, const typename Model<T>::Bound& b, const Document& doc,
                       const Snapshot<T>* collab, const LossWeights& w);

/// Empty hold set throws ValidationError.
template <typename T>
LossTerms rec_step_terms(Graph<T>& g, const Model<T>& model, const typename Model<T>::Bound& b,
                         const MaskedSample& sample, const Snapshot<T>* content, const LossWeights& w);

/// lm + mr + prior, unnormalized.
template <typename T>
Var total(Graph<T>& g, const LossTerms& t);

template <typename T>
Var l_step_loss(Graph<T>& g, const Model<T>& model, const Document& doc, const Snapshot<T>* content,
                const LossWeights& w);
template <typename T>
Var c_step_loss(Graph<T>& g, const Model<T>& model, const Document& doc, const Snapshot<T>* collab,
                const LossWeights& w);
template <typename T>
Var rec_step_loss(Graph<T>& g, const Model<T>& model, const MaskedSample& sample, const Snapshot<T>* content,
                  const LossWeights& w);

}  // namespace cllm4rec
