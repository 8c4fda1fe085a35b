// SPDX-License-Identifier: Apache-2.0
#include "cllm4rec/losses.hpp"

#include "cllm4rec/errors.hpp"

namespace cllm4rec {

namespace {

template <typename T>
struct RowSet {
  std::vector<typename Graph<T>::RowRef> refs;
  std::vector<T> frozen;  // matching snapshot rows, concatenated
};

template <typename T>
void add_row(RowSet<T>& s, Var table, std::size_t row, const Tensor<T>* snapshot) {
  s.refs.push_back({table, row});
  if (snapshot) {
    const auto r = snapshot->row_span(row);
    s.frozen.insert(s.frozen.end(), r.begin(), r.end());
  }
}

template <typename T>
void add_penalties(Graph<T>& g, LossTerms& t, const RowSet<T>& s, bool mr, const LossWeights& w, bool prior) {
  if (s.refs.empty()) return;
  const Var rows = g.gather_rows(s.refs);
  if (mr) t.mr = g.l2_penalty(rows, std::span<const T>(s.frozen), static_cast<T>(w.lambda_c));
  if (prior) t.prior = g.l2_penalty(rows, std::nullopt, static_cast<T>(w.lambda_l));
  t.entities = s.refs.size();
}

}  // namespace

template <typename T>
LossTerms l_step_terms(Graph<T>& g, const Model<T>& model, const typename Model<T>::Bound& b, const Document& doc,
                       const Snapshot<T>* content, const LossWeights& w) {
  if (doc.main_kind != TokenKind::item || doc.family != DocFamily::interaction) {
    throw ValidationError("L-step expects an interaction document with item main text");
  }
  if (!doc.user) throw ValidationError("interaction document has no user");
  if (doc.main.empty()) throw ValidationError("interaction document has no items");
  const auto& vocab_n = model.config().N;
  const auto& users = model.config().I;
  std::vector<std::size_t> targets;
  targets.reserve(doc.main.size());
  for (TokenId t : doc.main) {
    if (t < vocab_n + users || t >= vocab_n + users + model.config().J) {
      throw ValidationError("L-step main text contains a non-item token " + std::to_string(t));
    }
    targets.push_back(t - vocab_n - users);
  }
  LossTerms terms;
  const Var h = model.forward(g, b, doc.prompt, doc.main, Mode::collaborative);
  const Var logits = model.item_logits(g, b, g.rows(h, 0, doc.main.size()));
  const std::vector<std::uint8_t> mask(targets.size(), 1);
  terms.lm = g.masked_nll(logits, targets, mask);
  terms.tokens = targets.size();

  RowSet<T> s;
  add_row(s, b.z_lu, *doc.user, content ? &content->users : nullptr);
  for (std::size_t j : targets) add_row(s, b.z_lv, j, content ? &content->items : nullptr);
  add_penalties(g, terms, s, content != nullptr, w, true);
  return terms;
}

template <typename T>
LossTerms c_step_terms(Graph<T>& g, const Model<T>& model, const typename Model<T>::Bound& b, const Document& doc,
                       const Snapshot<T>* collab, const LossWeights& w) {
  if (doc.main_kind != TokenKind::vocab || doc.family == DocFamily::interaction) {
    throw ValidationError("C-step expects a review or feature document with word main text");
  }
  if (doc.main.empty()) throw ValidationError("content document has no words");
  std::vector<std::size_t> targets;
  targets.reserve(doc.main.size());
  for (TokenId t : doc.main) {
    if (t >= model.config().N) throw ValidationError("C-step main text contains a non-word token " + std::to_string(t));
    targets.push_back(t);
  }
  LossTerms terms;
  const Var h = model.forward(g, b, doc.prompt, doc.main, Mode::content);
  const Var logits = model.vocab_logits(g, b, g.rows(h, 0, doc.main.size()));
  const std::vector<std::uint8_t> mask(targets.size(), 1);
  terms.lm = g.masked_nll(logits, targets, mask);
  terms.tokens = targets.size();

  if (collab) {
    RowSet<T> s;
    if (doc.user) add_row(s, b.z_cu, *doc.user, &collab->users);
    if (doc.item) add_row(s, b.z_cv, *doc.item, &collab->items);
    add_penalties(g, terms, s, true, w, false);
  }
  return terms;
}

template <typename T>
LossTerms rec_step_terms(Graph<T>& g, const Model<T>& model, const typename Model<T>::Bound& b,
                         const MaskedSample& sample, const Snapshot<T>* content, const LossWeights& w) {
  if (sample.n_hold == 0 || sample.hold_items.empty()) throw ValidationError("recommendation sample has no held-out items");
  if (sample.hold.size() != model.config().J) throw ShapeError("hold vector length differs from J");
  LossTerms terms;
  const Var h = model.forward(g, b, sample.prompt, {}, Mode::collaborative);
  terms.lm = g.multinomial_nll(model.rec_probs(g, b, h), sample.hold);
  terms.tokens = 1;

  RowSet<T> s;
  add_row(s, b.z_lu, sample.user, content ? &content->users : nullptr);
  for (std::size_t j : sample.prompt_items) add_row(s, b.z_lv, j, content ? &content->items : nullptr);
  add_penalties(g, terms, s, content != nullptr, w, true);
  return terms;
}

template <typename T>
Var total(Graph<T>& g, const LossTerms& t) {
  std::vector<Var> parts{t.lm};
  if (t.mr) parts.push_back(*t.mr);
  if (t.prior) parts.push_back(*t.prior);
  return parts.size() == 1 ? t.lm : g.sum(parts);
}

template <typename T>
Var l_step_loss(Graph<T>& g, const Model<T>& model, const Document& doc, const Snapshot<T>* content,
                const LossWeights& w) {
  const auto b = model.bind(g);
  return total(g, l_step_terms(g, model, b, doc, content, w));
}

template <typename T>
Var c_step_loss(Graph<T>& g, const Model<T>& model, const Document& doc, const Snapshot<T>* collab,
                const LossWeights& w) {
  const auto b = model.bind(g);
  return total(g, c_step_terms(g, model, b, doc, collab, w));
}

template <typename T>
Var rec_step_loss(Graph<T>& g, const Model<T>& model, const MaskedSample& sample, const Snapshot<T>* content,
                  const LossWeights& w) {
  const auto b = model.bind(g);
  return total(g, rec_step_terms(g, model, b, sample, content, w));
}

#define CLLM4REC_INSTANTIATE(T)                                                                                   \
  template LossTerms l_step_terms(Graph<T>&, const Model<T>&, const Model<T>::Bound&, const Document&,           \
                                  const Snapshot<T>*, const LossWeights&);                                        \
  template LossTerms c_step_terms(Graph<T>&, const Model<T>&, const Model<T>::Bound&, const Document&,           \
                                  const Snapshot<T>*, const LossWeights&);                                        \
  template LossTerms rec_step_terms(Graph<T>&, const Model<T>&, const Model<T>::Bound&, const MaskedSample&,     \
                                    const Snapshot<T>*, const LossWeights&);                                      \
  template Var total(Graph<T>&, const LossTerms&);                                                                \
  template Var l_step_loss(Graph<T>&, const Model<T>&, const Document&, const Snapshot<T>*, const LossWeights&); \
  template Var c_step_loss(Graph<T>&, const Model<T>&, const Document&, const Snapshot<T>*, const LossWeights&); \
  template Var rec_step_loss(Graph<T>&, const Model<T>&, const MaskedSample&, const Snapshot<T>*, const LossWeights&);

CLLM4REC_INSTANTIATE(float)
CLLM4REC_INSTANTIATE(double)

}  // namespace cllm4rec
