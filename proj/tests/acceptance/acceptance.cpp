// SPDX-License-Identifier: Apache-2.0
// Acceptance suite. Prints one PASS/FAIL line per criterion; run with
// criterion ids (c01 ... c10) to select a subset.
#include <chrono>
#include <cstdio>
#include <functional>
#include <map>
#include <set>
#include <string>

#include "criteria.hpp"

namespace fsq::acceptance {
namespace {

const std::map<std::string, std::pair<std::string, std::function<Outcome()>>>& registry() {
  static const std::map<std::string, std::pair<std::string, std::function<Outcome()>>> r = {
      {"c01", {"full-model gradient vs central differences", c01_gradient}},
      {"c02", {"second-order meta-gradient vs central differences", c02_second_order}},
      {"c03", {"inner loop collapse and partition freezing", c03_collapse}},
      {"c04", {"A-MAML desk-scale learning", c04_amaml_learning}},
      {"c05", {"strategy ordering across seeds", c05_ordering}},
      {"c06", {"KNN vs brute-force oracle", c06_knn_oracle}},
      {"c07", {"protocol repeat and update counters", c07_protocol_counts}},
      {"c08", {"model invariants", c08_model_invariants}},
      {"c09", {"cue geometry", c09_cue_geometry}},
      {"c10", {"harness determinism", c10_determinism}},
  };
  return r;
}

}  // namespace
}  // namespace fsq::acceptance

int main(int argc, char** argv) {
  using namespace fsq::acceptance;
  std::set<std::string> wanted(argv + 1, argv + argc);
  int failures = 0;
  for (const auto& [id, entry] : registry()) {
    if (!wanted.empty() && !wanted.count(id)) continue;
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = entry.second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::printf("%s %s %s: %s (%.1fs)\n", o.pass ? "PASS" : "FAIL", id.c_str(),
                entry.first.c_str(), o.detail.c_str(), secs);
    std::fflush(stdout);
    failures += o.pass ? 0 : 1;
  }
  return failures == 0 ? 0 : 1;
}
