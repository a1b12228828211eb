// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>

namespace fsq::acceptance {

struct Outcome {
  bool pass = false;
  std::string detail;
};

Outcome c01_gradient();
Outcome c02_second_order();
Outcome c03_collapse();
Outcome c04_amaml_learning();
Outcome c05_ordering();
Outcome c06_knn_oracle();
Outcome c07_protocol_counts();
Outcome c08_model_invariants();
Outcome c09_cue_geometry();
Outcome c10_determinism();

}  // namespace fsq::acceptance
