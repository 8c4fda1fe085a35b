// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>

#include "cllm4rec/errors.hpp"
#include "cllm4rec/gradcheck.hpp"
#include "cllm4rec/graph.hpp"
#include "cllm4rec/optimizer.hpp"
#include "cllm4rec/rng.hpp"

using namespace cllm4rec;

namespace {

Tensor<double> random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor<double> t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = scale * normal(rng);
  return t;
}

// 0.5 * ||w o x||^2 with fixed random weights, so every output coordinate
// carries a distinct upstream gradient.
Var weighted_energy(Graph<double>& g, Var x, const Tensor<double>& w) {
  return g.l2_penalty(g.mul(x, g.constant(w)), std::nullopt, 1.0);
}

struct OpCase {
  std::vector<Parameter<double>> params;
  std::function<Var(Graph<double>&, std::vector<Var>&)> body;
};

double check_op(OpCase& c, std::uint64_t seed) {
  Rng rng = make_rng(seed, {99});
  Tensor<double> w;
  std::vector<Parameter<double>*> ptrs;
  for (auto& p : c.params) ptrs.push_back(&p);
  auto build = [&](Graph<double>& g) {
    std::vector<Var> vars;
    for (auto& p : c.params) vars.push_back(g.param(p));
    Var out = c.body(g, vars);
    if (g.value(out).size() == 1) return out;
    if (w.empty()) w = random_tensor(g.value(out).shape(), rng);
    return weighted_energy(g, out, w);
  };
  return finite_diff_check(build, ptrs).max_rel_error;
}

}  // namespace

TEST_SUITE("numeric") {
  TEST_CASE("tensor construction checks the shape") {
    CHECK_THROWS_AS(Tensor<float>(Shape{2, 3}, std::vector<float>(5)), ShapeError);
    Tensor<float> t({2, 3}, 1.5f);
    CHECK(t.rows() == 2);
    CHECK(t.cols() == 3);
    CHECK(t.at(1, 2) == 1.5f);
    CHECK(Tensor<float>().cast<double>().empty());
    CHECK(t.cast<double>().at(0, 0) == 1.5);
  }

  TEST_CASE("forward values of elementary ops") {
    Graph<double> g;
    Var a = g.constant(Tensor<double>({2, 2}, {1, 2, 3, 4}));
    Var b = g.constant(Tensor<double>({2, 2}, {5, 6, 7, 8}));
    CHECK(g.value(g.matmul(a, b)) == Tensor<double>({2, 2}, {19, 22, 43, 50}));
    CHECK(g.value(g.matmul_nt(a, b)) == Tensor<double>({2, 2}, {17, 23, 39, 53}));
    CHECK(g.value(g.rows(a, 1, 1)) == Tensor<double>({1, 2}, {3, 4}));
    CHECK(g.value(g.add_row(a, g.constant(Tensor<double>({2}, {10, 20})))) == Tensor<double>({2, 2}, {11, 22, 13, 24}));
    CHECK(g.scalar(g.l2_penalty(a, std::nullopt, 2.0)) == doctest::Approx(30.0));
    const std::vector<double> ref{1, 1, 1, 1};
    CHECK(g.scalar(g.l2_penalty(a, std::span<const double>(ref), 1.0)) == doctest::Approx(0.5 * (0 + 1 + 4 + 9)));

    const auto sm = g.value(g.softmax(g.constant(Tensor<double>({1, 3}, {0, std::log(2.0), std::log(3.0)}))));
    CHECK(sm[0] == doctest::Approx(1.0 / 6));
    CHECK(sm[1] == doctest::Approx(2.0 / 6));
    CHECK(sm[2] == doctest::Approx(3.0 / 6));

    const auto gl = g.value(g.gelu(g.constant(Tensor<double>({3}, {-1, 0, 1}))));
    CHECK(gl[1] == 0.0);
    CHECK(gl[2] == doctest::Approx(0.841192).epsilon(1e-5));
    CHECK(gl[0] == doctest::Approx(-0.158808).epsilon(1e-5));
  }

  TEST_CASE("layer norm output has zero mean and unit variance per row") {
    Rng rng = make_rng(1, {});
    Graph<double> g;
    Var x = g.constant(random_tensor({3, 16}, rng, 4.0));
    const auto y = g.value(g.layer_norm(x, g.constant(Tensor<double>({16}, 1.0)), g.constant(Tensor<double>({16}))));
    for (std::size_t r = 0; r < 3; ++r) {
      double mean = 0, var = 0;
      for (std::size_t c = 0; c < 16; ++c) mean += y.at(r, c) / 16;
      for (std::size_t c = 0; c < 16; ++c) var += (y.at(r, c) - mean) * (y.at(r, c) - mean) / 16;
      CHECK(mean == doctest::Approx(0.0).epsilon(1e-9));
      CHECK(var == doctest::Approx(1.0).epsilon(1e-4));
    }
  }

  TEST_CASE("masked nll equals the hand-computed cross entropy") {
    Graph<double> g;
    Var logits = g.constant(Tensor<double>({2, 3}, {0, 0, 0, 1, 2, 3}));
    const std::vector<std::size_t> targets{1, 2};
    const std::vector<std::uint8_t> mask{1, 0};
    CHECK(g.scalar(g.masked_nll(logits, targets, mask)) == doctest::Approx(std::log(3.0)));
    const std::vector<std::uint8_t> both{1, 1};
    const double lse = std::log(std::exp(1.0) + std::exp(2.0) + std::exp(3.0));
    CHECK(g.scalar(g.masked_nll(logits, targets, both)) == doctest::Approx(std::log(3.0) + lse - 3.0));
  }

  TEST_CASE("multinomial nll applies the probability floor") {
    Graph<double> g;
    Var p = g.constant(Tensor<double>({1, 3}, {0.5, 0.5, 0.0}));
    const std::vector<int> counts{1, 0, 0};
    CHECK(g.scalar(g.multinomial_nll(p, counts)) == doctest::Approx(std::log(2.0)));
    const std::vector<int> zero_prob{0, 0, 2};
    CHECK(g.scalar(g.multinomial_nll(p, zero_prob)) == doctest::Approx(-2 * std::log(kProbabilityFloor)));
  }

  TEST_CASE("causal attention ignores future and padded keys") {
    Rng rng = make_rng(2, {});
    const std::size_t K = 4;
    Tensor<double> qkv = random_tensor({3, 3 * K}, rng);
    Graph<double> g;
    const auto base = g.value(g.causal_attention(g.constant(qkv), 2));
    Tensor<double> changed = qkv;
    for (std::size_t c = 0; c < 3 * K; ++c) changed.at(2, c) += 5.0;
    const auto out = g.value(g.causal_attention(g.constant(changed), 2));
    for (std::size_t c = 0; c < K; ++c) {
      CHECK(out.at(0, c) == base.at(0, c));
      CHECK(out.at(1, c) == base.at(1, c));
    }
    // With key 0 padded, row 1 only sees itself: output = its own value vector.
    const std::vector<std::uint8_t> valid{0, 1, 1};
    const auto masked = g.value(g.causal_attention(g.constant(qkv), 2, valid));
    for (std::size_t c = 0; c < K; ++c) CHECK(masked.at(1, c) == doctest::Approx(qkv.at(1, 2 * K + c)));
  }

  TEST_CASE("every op passes the finite-difference check") {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      Rng rng = make_rng(seed, {7});
      auto P = [&](const char* name, Shape s, double scale = 1.0) {
        return Parameter<double>(name, random_tensor(std::move(s), rng, scale));
      };
      std::vector<std::pair<std::string, OpCase>> cases;
      cases.push_back({"add", {{P("a", {3, 4}), P("b", {3, 4})}, [](auto& g, auto& v) { return g.add(v[0], v[1]); }}});
      cases.push_back(
          {"add_row", {{P("a", {3, 4}), P("b", {4})}, [](auto& g, auto& v) { return g.add_row(v[0], v[1]); }}});
      cases.push_back({"mul", {{P("a", {3, 4}), P("b", {3, 4})}, [](auto& g, auto& v) { return g.mul(v[0], v[1]); }}});
      cases.push_back({"scale", {{P("a", {5})}, [](auto& g, auto& v) { return g.scale(v[0], -1.7); }}});
      cases.push_back(
          {"matmul", {{P("a", {3, 4}), P("b", {4, 2})}, [](auto& g, auto& v) { return g.matmul(v[0], v[1]); }}});
      cases.push_back(
          {"matmul_nt", {{P("a", {3, 4}), P("b", {5, 4})}, [](auto& g, auto& v) { return g.matmul_nt(v[0], v[1]); }}});
      cases.push_back({"rows", {{P("a", {4, 3})}, [](auto& g, auto& v) { return g.rows(v[0], 1, 2); }}});
      cases.push_back({"gather_rows", {{P("a", {4, 3}), P("b", {2, 3})}, [](auto& g, auto& v) {
                                         std::vector<typename Graph<double>::RowRef> refs{
                                             {v[0], 2}, {v[1], 0}, {v[0], 2}, {v[0], 0}};
                                         return g.gather_rows(refs);
                                       }}});
      cases.push_back({"layer_norm", {{P("x", {3, 6}), P("g", {6}), P("b", {6})}, [](auto& g, auto& v) {
                                        return g.layer_norm(v[0], v[1], v[2]);
                                      }}});
      cases.push_back({"gelu", {{P("x", {3, 5})}, [](auto& g, auto& v) { return g.gelu(v[0]); }}});
      cases.push_back({"softmax", {{P("x", {2, 5})}, [](auto& g, auto& v) { return g.softmax(v[0]); }}});
      cases.push_back({"attention", {{P("qkv", {4, 12})}, [](auto& g, auto& v) {
                                       return g.causal_attention(v[0], 2);
                                     }}});
      cases.push_back({"attention_pad", {{P("qkv", {4, 12})}, [](auto& g, auto& v) {
                                           static const std::vector<std::uint8_t> valid{0, 1, 1, 1};
                                           return g.causal_attention(v[0], 2, valid);
                                         }}});
      cases.push_back({"masked_nll", {{P("x", {3, 5})}, [](auto& g, auto& v) {
                                        static const std::vector<std::size_t> t{4, 0, 2};
                                        static const std::vector<std::uint8_t> m{1, 0, 1};
                                        return g.masked_nll(v[0], t, m);
                                      }}});
      cases.push_back({"multinomial_nll", {{P("x", {1, 5})}, [](auto& g, auto& v) {
                                             static const std::vector<int> counts{0, 2, 0, 1, 0};
                                             return g.multinomial_nll(g.softmax(v[0]), counts);
                                           }}});
      cases.push_back({"l2_penalty", {{P("x", {2, 3})}, [](auto& g, auto& v) {
                                        static const std::vector<double> ref{1, 2, 3, 4, 5, 6};
                                        return g.l2_penalty(v[0], std::span<const double>(ref), 0.7);
                                      }}});
      cases.push_back({"sum", {{P("a", {1}), P("b", {1})}, [](auto& g, auto& v) {
                                 std::vector<Var> s{g.mul(v[0], v[1]), v[0]};
                                 return g.sum(s);
                               }}});
      for (auto& [name, c] : cases) {
        CAPTURE(name);
        CAPTURE(seed);
        CHECK(check_op(c, seed) < 1e-5);
      }
    }
  }

  TEST_CASE("the finite-difference check flags a missing gradient path") {
    Parameter<double> p("p", Tensor<double>({2}, {0.3, -0.4}));
    std::vector<Parameter<double>*> params{&p};
    auto build = [&](Graph<double>& g) { return g.l2_penalty(g.constant(p.value), std::nullopt, 1.0); };
    const auto report = finite_diff_check(build, params);
    CHECK(report.max_rel_error > 0.5);
    CHECK(report.worst_parameter == "p");
  }

  TEST_CASE("frozen parameters get no gradient and are skipped by the optimizer") {
    Parameter<double> a("a", Tensor<double>({2}, {1, 2}));
    Parameter<double> b("b", Tensor<double>({2}, {3, 4}), false);
    GradStore<double> store;
    {
      Graph<double> g(&store);
      g.backward(g.l2_penalty(g.mul(g.param(a), g.param(b)), std::nullopt, 1.0));
    }
    REQUIRE(store.find(a) != nullptr);
    CHECK(store.find(b) == nullptr);
    CHECK((*store.find(a))[0] == doctest::Approx(1 * 3 * 3));
    Optimizer<double> opt({0.1, 0.9, 0.999, 1e-8, true});
    std::vector<Parameter<double>*> ps{&a, &b};
    opt.step(ps, store);
    CHECK(a.value[0] == doctest::Approx(1 - 0.1 * 9));
    CHECK(a.value[1] == doctest::Approx(2 - 0.1 * 32));
    CHECK(b.value == Tensor<double>({2}, {3, 4}));
  }

  TEST_CASE("adaptive step moves each coordinate by about lr on the first step") {
    Parameter<double> a("a", Tensor<double>({3}, {1, 1, 1}));
    GradStore<double> store;
    store.grad(a) = Tensor<double>({3}, {100.0, -0.01, 3.0});
    Optimizer<double> opt({0.05});
    std::vector<Parameter<double>*> ps{&a};
    opt.step(ps, store);
    CHECK(a.value[0] == doctest::Approx(0.95).epsilon(1e-6));
    CHECK(a.value[1] == doctest::Approx(1.05).epsilon(1e-5));
    CHECK(a.value[2] == doctest::Approx(0.95).epsilon(1e-6));
    CHECK(a.state.steps == 1);
    CHECK(store.find(a)->at(0, 0) == 0.0);
  }

  TEST_CASE("a trainable parameter without a gradient is a state error") {
    Parameter<double> a("a", Tensor<double>({1}, {1}));
    GradStore<double> store;
    Optimizer<double> opt;
    std::vector<Parameter<double>*> ps{&a};
    CHECK_THROWS_AS(opt.step(ps, store), StateError);
  }

  TEST_CASE("gradient stores reduce by summation") {
    Parameter<float> a("a", Tensor<float>({2}));
    GradStore<float> s1, s2;
    s1.grad(a) = Tensor<float>({2}, {1, 2});
    s2.grad(a) = Tensor<float>({2}, {10, 20});
    s1.accumulate(s2);
    CHECK(*s1.find(a) == Tensor<float>({2}, {11, 22}));
  }

  TEST_CASE("rng streams are reproducible and uniform_index is unbiased") {
    Rng a = make_rng(5, {1, 2}), b = make_rng(5, {1, 2}), c = make_rng(5, {2, 1});
    CHECK(a() == b());
    CHECK(make_rng(5, {1, 2})() != c());
    Rng r = make_rng(11, {});
    std::vector<int> counts(6, 0);
    for (int k = 0; k < 60000; ++k) ++counts[uniform_index(r, 6)];
    for (int v : counts) CHECK(std::abs(v - 10000) < 400);
  }
}
