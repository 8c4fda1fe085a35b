// SPDX-License-Identifier: Apache-2.0
#include "cllm4rec/model.hpp"

#include <cmath>

#include "cllm4rec/errors.hpp"
#include "cllm4rec/rng.hpp"

namespace cllm4rec {

void ModelConfig::validate() const {
  if (N < 3) throw ValidationError("model: N must include the three special words");
  if (I == 0 || J == 0) throw ValidationError("model: I and J must be positive");
  if (K == 0 || heads == 0 || K % heads != 0) {
    throw ValidationError("model: K (" + std::to_string(K) + ") must be a positive multiple of heads (" +
                          std::to_string(heads) + ")");
  }
  if (context_length < 2) throw ValidationError("model: context_length must be at least 2");
  if (!(lambda_l >= 0.0) || !(lambda_c >= 0.0)) throw ValidationError("model: lambda_l and lambda_c must be >= 0");
  if (!(init_std > 0.0)) throw ValidationError("model: init_std must be positive");
}

nlohmann::ordered_json ModelConfig::to_json() const {
  nlohmann::ordered_json j;
  j["N"] = N;
  j["I"] = I;
  j["J"] = J;
  j["K"] = K;
  j["layers"] = layers;
  j["heads"] = heads;
  j["context_length"] = context_length;
  j["backbone_frozen"] = backbone_frozen;
  j["lambda_l"] = lambda_l;
  j["lambda_c"] = lambda_c;
  j["init_std"] = init_std;
  return j;
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.N = j.at("N").get<std::size_t>();
    c.I = j.at("I").get<std::size_t>();
    c.J = j.at("J").get<std::size_t>();
    c.K = j.at("K").get<std::size_t>();
    c.layers = j.at("layers").get<std::size_t>();
    c.heads = j.at("heads").get<std::size_t>();
    c.context_length = j.at("context_length").get<std::size_t>();
    c.backbone_frozen = j.at("backbone_frozen").get<bool>();
    c.lambda_l = j.at("lambda_l").get<double>();
    c.lambda_c = j.at("lambda_c").get<double>();
    c.init_std = j.value("init_std", 0.02);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("model config: ") + e.what());
  }
  return c;
}

namespace {

template <typename T>
void fill_normal(Tensor<T>& t, Rng& rng, double stddev) {
  for (auto& v : t.values()) v = static_cast<T>(normal(rng) * stddev);
}

constexpr std::uint64_t kInitTag = 0x696e6974;

}  // namespace

template <typename T>
Model<T>::Model(const ModelConfig& config, Uninitialized) : config_(config) {
  config_.validate();
  allocate();
}

template <typename T>
void Model<T>::allocate() {
  const std::size_t K = config_.K;
  z_t = Parameter<T>("z_t", Tensor<T>({config_.N, K}));
  z_lu = Parameter<T>("z_lu", Tensor<T>({config_.I, K}));
  z_lv = Parameter<T>("z_lv", Tensor<T>({config_.J, K}));
  z_cu = Parameter<T>("z_cu", Tensor<T>({config_.I, K}));
  z_cv = Parameter<T>("z_cv", Tensor<T>({config_.J, K}));
  pos = Parameter<T>("pos", Tensor<T>({config_.context_length, K}));
  blocks.clear();
  blocks.resize(config_.layers);
  for (std::size_t l = 0; l < config_.layers; ++l) {
    auto& b = blocks[l];
    const std::string p = "blocks." + std::to_string(l) + ".";
    b.ln1_gain = Parameter<T>(p + "ln1.gain", Tensor<T>({K}, T(1)));
    b.ln1_bias = Parameter<T>(p + "ln1.bias", Tensor<T>({K}));
    b.w_qkv = Parameter<T>(p + "attn.w_qkv", Tensor<T>({K, 3 * K}));
    b.b_qkv = Parameter<T>(p + "attn.b_qkv", Tensor<T>({3 * K}));
    b.w_out = Parameter<T>(p + "attn.w_out", Tensor<T>({K, K}));
    b.b_out = Parameter<T>(p + "attn.b_out", Tensor<T>({K}));
    b.ln2_gain = Parameter<T>(p + "ln2.gain", Tensor<T>({K}, T(1)));
    b.ln2_bias = Parameter<T>(p + "ln2.bias", Tensor<T>({K}));
    b.w_fc = Parameter<T>(p + "mlp.w_fc", Tensor<T>({K, 4 * K}));
    b.b_fc = Parameter<T>(p + "mlp.b_fc", Tensor<T>({4 * K}));
    b.w_proj = Parameter<T>(p + "mlp.w_proj", Tensor<T>({4 * K, K}));
    b.b_proj = Parameter<T>(p + "mlp.b_proj", Tensor<T>({K}));
  }
  lnf_gain = Parameter<T>("lnf.gain", Tensor<T>({K}, T(1)));
  lnf_bias = Parameter<T>("lnf.bias", Tensor<T>({K}));
  set_backbone_frozen(config_.backbone_frozen);
}

template <typename T>
Model<T>::Model(const ModelConfig& config, std::uint64_t seed) : Model(config, Uninitialized{}) {
  const double sd = config_.init_std;
  // one stream per table so that the collaborative tables do not depend on
  // lambda_c or on the backbone shape
  {
    Rng rng = make_rng(seed, {kInitTag, 1});
    fill_normal(z_lu.value, rng, sd);
  }
  {
    Rng rng = make_rng(seed, {kInitTag, 2});
    fill_normal(z_lv.value, rng, sd);
  }
  {
    Rng rng = make_rng(seed, {kInitTag, 3});
    if (config_.lambda_c > 0.0) {
      const double noise = 1.0 / std::sqrt(config_.lambda_c);
      fill_normal(z_cu.value, rng, noise);
      fill_normal(z_cv.value, rng, noise);
      for (std::size_t i = 0; i < z_cu.value.size(); ++i) z_cu.value[i] += z_lu.value[i];
      for (std::size_t i = 0; i < z_cv.value.size(); ++i) z_cv.value[i] += z_lv.value[i];
    } else {
      fill_normal(z_cu.value, rng, sd);
      fill_normal(z_cv.value, rng, sd);
    }
  }
  Rng rng = make_rng(seed, {kInitTag, 4});
  fill_normal(z_t.value, rng, sd);
  fill_normal(pos.value, rng, sd);
  for (auto& b : blocks) {
    fill_normal(b.w_qkv.value, rng, sd);
    fill_normal(b.w_out.value, rng, sd);
    fill_normal(b.w_fc.value, rng, sd);
    fill_normal(b.w_proj.value, rng, sd);
  }
}

template <typename T>
std::vector<Parameter<T>*> Model<T>::backbone() {
  std::vector<Parameter<T>*> out{&pos};
  for (auto& b : blocks) {
    for (auto* p : {&b.ln1_gain, &b.ln1_bias, &b.w_qkv, &b.b_qkv, &b.w_out, &b.b_out, &b.ln2_gain, &b.ln2_bias,
                    &b.w_fc, &b.b_fc, &b.w_proj, &b.b_proj})
      out.push_back(p);
  }
  out.push_back(&lnf_gain);
  out.push_back(&lnf_bias);
  return out;
}

template <typename T>
std::vector<Parameter<T>*> Model<T>::parameters() {
  std::vector<Parameter<T>*> out{&z_t, &z_lu, &z_lv, &z_cu, &z_cv};
  for (auto* p : backbone()) out.push_back(p);
  return out;
}

template <typename T>
std::vector<const Parameter<T>*> Model<T>::parameters() const {
  auto mut = const_cast<Model*>(this)->parameters();
  return {mut.begin(), mut.end()};
}

template <typename T>
Parameter<T>* Model<T>::find(const std::string& name) {
  for (auto* p : parameters())
    if (p->name == name) return p;
  return nullptr;
}

template <typename T>
void Model<T>::set_backbone_frozen(bool frozen) {
  config_.backbone_frozen = frozen;
  z_t.trainable = !frozen;
  for (auto* p : backbone()) p->trainable = !frozen;
}

template <typename T>
typename Model<T>::Bound Model<T>::bind(Graph<T>& g) const {
  Bound b;
  b.z_t = g.param(z_t);
  b.z_lu = g.param(z_lu);
  b.z_lv = g.param(z_lv);
  b.z_cu = g.param(z_cu);
  b.z_cv = g.param(z_cv);
  b.pos = g.param(pos);
  for (const auto& l : blocks) {
    b.layers.push_back({g.param(l.ln1_gain), g.param(l.ln1_bias), g.param(l.w_qkv), g.param(l.b_qkv),
                        g.param(l.w_out), g.param(l.b_out), g.param(l.ln2_gain), g.param(l.ln2_bias),
                        g.param(l.w_fc), g.param(l.b_fc), g.param(l.w_proj), g.param(l.b_proj)});
  }
  b.lnf_gain = g.param(lnf_gain);
  b.lnf_bias = g.param(lnf_bias);
  return b;
}

template <typename T>
Var Model<T>::embed(Graph<T>& g, const Bound& b, std::span<const TokenId> tokens, Mode mode) const {
  const std::size_t n = tokens.size();
  if (n == 0) throw LengthError("embed: empty token sequence");
  if (n > config_.context_length) {
    throw LengthError("sequence of " + std::to_string(n) + " tokens exceeds context_length " +
                      std::to_string(config_.context_length));
  }
  const std::size_t N = config_.N, I = config_.I, J = config_.J;
  const Var users = mode == Mode::collaborative ? b.z_lu : b.z_cu;
  const Var items = mode == Mode::collaborative ? b.z_lv : b.z_cv;
  std::vector<typename Graph<T>::RowRef> refs;
  refs.reserve(n);
  for (TokenId t : tokens) {
    if (t < N) {
      refs.push_back({b.z_t, t});
    } else if (t < N + I) {
      refs.push_back({users, t - N});
    } else if (t < N + I + J) {
      refs.push_back({items, t - N - I});
    } else {
      throw IndexError("token id " + std::to_string(t) + " out of range " + std::to_string(N + I + J));
    }
  }
  return g.add(g.gather_rows(refs), g.rows(b.pos, 0, n));
}

template <typename T>
Var Model<T>::forward(Graph<T>& g, const Bound& b, std::span<const TokenId> prompt, std::span<const TokenId> main,
                      Mode mode) const {
  if (prompt.empty()) throw LengthError("forward: empty prompt");
  std::vector<TokenId> seq(prompt.begin(), prompt.end());
  seq.insert(seq.end(), main.begin(), main.end());
  std::vector<std::uint8_t> valid(seq.size());
  bool any_pad = false;
  for (std::size_t k = 0; k < seq.size(); ++k) {
    valid[k] = seq[k] != ExtendedVocabulary::kPad;
    any_pad = any_pad || !valid[k];
  }
  const std::span<const std::uint8_t> mask = any_pad ? std::span<const std::uint8_t>(valid) : std::span<const std::uint8_t>();

  Var x = embed(g, b, seq, mode);
  for (const auto& l : b.layers) {
    Var a = g.layer_norm(x, l.ln1_gain, l.ln1_bias);
    a = g.add_row(g.matmul(a, l.w_qkv), l.b_qkv);
    a = g.causal_attention(a, config_.heads, mask);
    a = g.add_row(g.matmul(a, l.w_out), l.b_out);
    x = g.add(x, a);
    Var m = g.layer_norm(x, l.ln2_gain, l.ln2_bias);
    m = g.gelu(g.add_row(g.matmul(m, l.w_fc), l.b_fc));
    m = g.add_row(g.matmul(m, l.w_proj), l.b_proj);
    x = g.add(x, m);
  }
  x = g.rows(x, prompt.size() - 1, main.size() + 1);
  return g.layer_norm(x, b.lnf_gain, b.lnf_bias);
}

template <typename T>
std::vector<T> Model<T>::rec_distribution(std::span<const TokenId> prompt) const {
  Graph<T> g;
  const Bound b = bind(g);
  const Var h = forward(g, b, prompt, {}, Mode::collaborative);
  const auto& p = g.value(rec_probs(g, b, h));
  return {p.values().begin(), p.values().end()};
}

template <typename T>
std::vector<T> Model<T>::next_item_logits(std::span<const TokenId> prompt, std::span<const TokenId> main) const {
  Graph<T> g;
  const Bound b = bind(g);
  const Var h = forward(g, b, prompt, main, Mode::collaborative);
  const Var last = g.rows(h, main.size(), 1);
  const auto& z = g.value(item_logits(g, b, last));
  return {z.values().begin(), z.values().end()};
}

template <typename T>
template <typename U>
Model<U> Model<T>::converted() const {
  Model<U> out(config_, typename Model<U>::Uninitialized{});
  auto dst = out.parameters();
  auto src = parameters();
  for (std::size_t i = 0; i < src.size(); ++i) {
    dst[i]->value = src[i]->value.template cast<U>();
    dst[i]->trainable = src[i]->trainable;
    dst[i]->state.first_moment = src[i]->state.first_moment.template cast<U>();
    dst[i]->state.second_moment = src[i]->state.second_moment.template cast<U>();
    dst[i]->state.steps = src[i]->state.steps;
  }
  return out;
}

template class Model<float>;
template class Model<double>;
template Model<double> Model<float>::converted<double>() const;
template Model<float> Model<double>::converted<float>() const;
template Model<float> Model<float>::converted<float>() const;
template Model<double> Model<double>::converted<double>() const;

}  // namespace cllm4rec
