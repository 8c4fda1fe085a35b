// SPDX-License-Identifier: Apache-2.0
#include "cllm4rec/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "cllm4rec/rng.hpp"

namespace cllm4rec {

namespace {

double evaluate(const LossBuilder& build) {
  Graph<double> g;
  return g.scalar(build(g));
}

}  // namespace

GradCheckReport finite_diff_check(const LossBuilder& build, std::span<Parameter<double>* const> params, double eps,
                                  std::size_t max_coords_per_param, std::uint64_t seed) {
  GradStore<double> store;
  {
    Graph<double> g(&store);
    g.backward(build(g));
  }

  GradCheckReport report;
  Rng rng = make_rng(seed, {0x6772616463686b});
  for (Parameter<double>* p : params) {
    if (!p->trainable) continue;
    const Tensor<double>* analytic = store.find(*p);
    std::vector<std::size_t> coords(p->value.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (max_coords_per_param > 0 && coords.size() > max_coords_per_param) {
      shuffle(coords.begin(), coords.end(), rng);
      coords.resize(max_coords_per_param);
      std::sort(coords.begin(), coords.end());
    }
    for (std::size_t idx : coords) {
      double& x = p->value[idx];
      const double saved = x;
      x = saved + eps;
      const double up = evaluate(build);
      x = saved - eps;
      const double down = evaluate(build);
      x = saved;
      const double numeric = (up - down) / (2 * eps);
      const double a = analytic ? (*analytic)[idx] : 0.0;
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), kGradCheckFloor});
      ++report.coordinates;
      if (rel > report.max_rel_error || report.coordinates == 1) {
        report.max_rel_error = rel;
        report.worst_parameter = p->name;
        report.worst_index = idx;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
  }
  return report;
}

}  // namespace cllm4rec
