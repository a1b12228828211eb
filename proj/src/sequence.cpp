// SPDX-License-Identifier: Apache-2.0
#include "fsq/sequence.hpp"

#include "fsq/error.hpp"

namespace fsq {

const char* cue_name(CueKind kind) {
  switch (kind) {
    case CueKind::hand: return "hand";
    case CueKind::obj: return "obj";
    case CueKind::flow: return "flow";
    case CueKind::grasp: return "grasp";
    case CueKind::traj: return "traj";
  }
  return "?";
}

CueKind parse_cue(std::string_view name) {
  for (CueKind k : kAllCueKinds)
    if (name == cue_name(k)) return k;
  throw LayoutError("unknown cue kind '" + std::string(name) + "'");
}

std::size_t layout_dim(const Layout& layout) {
  std::size_t n = 0;
  for (const auto& b : layout) n += b.dim;
  return n;
}

std::string layout_string(const Layout& layout) {
  std::string out;
  for (const auto& b : layout) {
    if (!out.empty()) out += '+';
    out += cue_name(b.kind);
    out += ':' + std::to_string(b.dim);
  }
  return out;
}

void FeatureSequence::validate() const {
  if (data.rank() != 2 || data.rows() == 0)
    throw LayoutError("sequence '" + id + "' has no frames");
  for (const auto& b : layout)
    if (b.dim == 0) throw LayoutError("sequence '" + id + "' has an empty cue block");
  if (data.cols() != layout_dim(layout))
    throw LayoutError("sequence '" + id + "' has " + std::to_string(data.cols()) +
                      " columns but layout " + layout_string(layout) + " declares " +
                      std::to_string(layout_dim(layout)));
}

}  // namespace fsq
