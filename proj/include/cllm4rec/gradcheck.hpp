// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>

#include "cllm4rec/graph.hpp"

namespace cllm4rec {

inline constexpr double kGradCheckFloor = 1e-5;

struct GradCheckReport {
  double max_rel_error = 0;
  std::size_t coordinates = 0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  double worst_analytic = 0;
  double worst_numeric = 0;
};

/// Builds a scalar loss on the given graph. Must be deterministic.
using LossBuilder = std::function<Var(Graph<double>&)>;

/// Compares analytic gradients of every trainable parameter in `params`
/// against central differences (f(x+eps) - f(x-eps)) / 2eps. Relative error
/// per coordinate is |analytic - numeric| / max(|analytic|, |numeric|, 1e-5);
/// below the floor the comparison is effectively absolute.
/// `max_coords_per_param` = 0 checks every coordinate; otherwise a seeded
/// random subset is sampled.
GradCheckReport finite_diff_check(const LossBuilder& build, std::span<Parameter<double>* const> params,
                                  double eps = 1e-5, std::size_t max_coords_per_param = 0, std::uint64_t seed = 0);

}  // namespace cllm4rec
