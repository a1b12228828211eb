// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "fsq/tensor.hpp"

namespace fsq {

/// Kinds of per-frame cue blocks, in the fixed concatenation order.
enum class CueKind { hand, obj, flow, grasp, traj };

inline constexpr CueKind kAllCueKinds[] = {CueKind::hand, CueKind::obj, CueKind::flow,
                                           CueKind::grasp, CueKind::traj};

const char* cue_name(CueKind kind);
/// Throws LayoutError for unknown names.
CueKind parse_cue(std::string_view name);

struct BlockSpec {
  CueKind kind;
  std::size_t dim;
  bool operator==(const BlockSpec&) const = default;
};

using Layout = std::vector<BlockSpec>;

std::size_t layout_dim(const Layout& layout);
std::string layout_string(const Layout& layout);

/// T x N per-frame cue vectors of one labeled segment.
struct FeatureSequence {
  std::string id;
  int label = 0;
  Layout layout;
  /// frames x layout_dim(layout), row-major.
  Tensor data;

  std::size_t frames() const { return data.rows(); }
  std::size_t dim() const { return data.cols(); }
  /// Throws LayoutError when data does not match the layout.
  void validate() const;
};

}  // namespace fsq
