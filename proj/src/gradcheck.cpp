// SPDX-License-Identifier: Apache-2.0
#include "fsq/gradcheck.hpp"

#include <cmath>

#include "fsq/error.hpp"

namespace fsq::ad {
namespace {

double evaluate(const ScalarBuilder& f, std::span<const Tensor> params) {
  // Leaves are variables so builders that take gradients internally still work.
  Tape tape;
  std::vector<Var> leaves;
  leaves.reserve(params.size());
  for (const auto& p : params) leaves.push_back(tape.variable(p));
  return f(tape, leaves).value().item();
}

}  // namespace

GradCheckReport finite_diff_check(const ScalarBuilder& f, std::span<const Tensor> params,
                                  double h) {
  if (!(h > 0.0)) throw ContractError("finite_diff_check: step must be positive");
  GradCheckReport report;

  std::vector<Tensor> analytic;
  {
    Tape tape;
    std::vector<Var> leaves;
    for (const auto& p : params) leaves.push_back(tape.variable(p));
    Var out = f(tape, leaves);
    for (const auto& g : tape.gradients(out, leaves)) analytic.push_back(g.value());
  }

  std::vector<Tensor> probe(params.begin(), params.end());
  for (std::size_t p = 0; p < params.size(); ++p) {
    std::vector<double> values = params[p].to_vector();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double original = values[i];
      const double hi = original + h;
      const double lo = original - h;
      values[i] = hi;
      probe[p] = Tensor(params[p].shape(), values);
      const double up = evaluate(f, probe);
      values[i] = lo;
      probe[p] = Tensor(params[p].shape(), values);
      const double down = evaluate(f, probe);
      values[i] = original;
      report.evaluations += 2;

      const double numeric = (up - down) / (hi - lo);
      const double err = relative_error(analytic[p][i], numeric);
      if (!std::isfinite(analytic[p][i]) || !std::isfinite(numeric)) report.finite = false;
      if (err > report.max_rel_error || !report.finite) {
        report.max_rel_error = report.finite ? err : std::numeric_limits<double>::infinity();
        report.worst_param = p;
        report.worst_index = i;
      }
    }
    probe[p] = params[p];
  }
  return report;
}

}  // namespace fsq::ad
