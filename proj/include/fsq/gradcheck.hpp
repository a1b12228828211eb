// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <span>
#include <vector>

#include "fsq/autodiff.hpp"

namespace fsq::ad {

/// Builds a rank-0 result from leaves holding the parameters.
using ScalarBuilder = std::function<Var(Tape&, std::span<const Var>)>;

struct GradCheckReport {
  /// max over entries of |analytic - central| / max(1, |analytic|);
  /// +inf when any value was not finite.
  double max_rel_error = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  bool finite = true;
  std::size_t evaluations = 0;
};

/// Compares reverse-mode gradients of `f` against central differences with
/// step `h` on every entry of every parameter.
GradCheckReport finite_diff_check(const ScalarBuilder& f, std::span<const Tensor> params,
                                  double h = 1e-6);

/// Relative error in the form used by finite_diff_check.
inline double relative_error(double analytic, double numeric) {
  const double denom = std::max(1.0, std::abs(analytic));
  const double err = std::abs(analytic - numeric) / denom;
  return std::isfinite(err) ? err : std::numeric_limits<double>::infinity();
}

}  // namespace fsq::ad
