// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fsq/sequence.hpp"

namespace fsq::cues {

/// Pixel box, corners inclusive of x1/y1.
struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double cx() const { return 0.5 * (x1 + x2); }
  double cy() const { return 0.5 * (y1 + y2); }
  bool valid() const { return x1 < x2 && y1 < y2; }
  bool operator==(const Box&) const = default;
};

enum class Side { L, R };
inline constexpr Side kSides[] = {Side::L, Side::R};
const char* side_name(Side s);

struct Hand {
  Side side = Side::L;
  Box box;
  double score = 1.0;
};

struct DetectionFrame {
  std::size_t t = 0;
  double frame_w = 0, frame_h = 0;
  std::vector<Hand> hands;

  const Hand* find(Side side) const;
  /// Throws DataError on a bad score, box, frame size or duplicated side.
  void validate() const;
};

/// Scales width and height by `s` about the centre, then clips to the frame.
/// Throws OffFrameError when nothing of the box is left inside the frame.
Box expand_box(const Box& b, double s, double frame_w, double frame_h);

struct Sighting {
  std::size_t t = 0;
  Box box;
};

/// Box of one side at frame `t` from earlier sightings (ascending t, all
/// before `t`). Constant velocity of the centre from the last two, hold with
/// one, nothing once the last sighting is more than `max_gap` frames old.
std::optional<Box> track_hand(std::span<const Sighting> history, std::size_t t,
                              std::size_t max_gap = 5);

struct GridSpec {
  std::size_t rows = 5, cols = 5;
};

struct Cell {
  std::size_t row = 0, col = 0;
  bool operator==(const Cell&) const = default;
  auto operator<=>(const Cell&) const = default;
};

/// Grid cell containing a point; points on the far frame edge belong to the
/// last row/column.
Cell cell_at(double x, double y, const GridSpec& grid, double frame_w, double frame_h);

/// Cell of the box centre, then its up, down, left and right neighbours that
/// exist in the grid.
std::vector<Cell> activate_cells(const Box& b, const GridSpec& grid, double frame_w,
                                 double frame_h);

/// Element-wise maximum. Throws ContractError on an empty list or unequal
/// lengths.
std::vector<double> fuse_cells(std::span<const std::vector<double>> cells);

/// Hands of one frame after tracking.
struct FrameHands {
  double frame_w = 0, frame_h = 0;
  std::optional<Box> left, right;
};

/// For the W frames ending at t, oldest first, L then R: the box corners
/// divided by the frame size and clamped to [0, 1]. Missing hands and frames
/// before the start contribute zeros.
std::vector<double> trajectory_feature(std::span<const FrameHands> frames, std::size_t t,
                                       std::size_t W);

/// Region tags used to address injected features.
std::string hand_tag(Side side);
std::string cell_tag(const Cell& c);
inline constexpr const char* kGlobalTag = "global";

struct Region {
  std::string tag;
  /// Pixel area of the region (the expanded hand box for hands).
  Box box;
};

/// Feature vector of one region in one frame.
struct Provider {
  std::size_t dim = 0;
  std::function<std::vector<double>(std::size_t frame, const Region& region)> lookup;
};

struct CueConfig {
  double s_hand = 1.5;
  GridSpec grid;
  std::size_t traj_window = 5;
  std::size_t max_gap = 5;
  /// Blocks to emit; order is always hand, obj, flow, grasp, traj.
  std::vector<CueKind> enabled = {std::begin(kAllCueKinds), std::end(kAllCueKinds)};
  void validate() const;
};

/// hand, flow and grasp are pooled per hand (L block then R block), obj is
/// the fused object cells around both hands, traj is the trajectory window.
Layout cue_layout(const CueConfig& config, const std::map<CueKind, Provider>& providers);

/// Hands per frame after filling gaps with the tracker.
std::vector<FrameHands> tracked_hands(std::span<const DetectionFrame> detections,
                                      std::size_t max_gap);

FeatureSequence assemble_sequence(std::span<const DetectionFrame> detections,
                                  const std::map<CueKind, Provider>& providers,
                                  const CueConfig& config);

/// One JSON object per line: t, frame_w, frame_h, hands[{side, box, score}].
std::vector<DetectionFrame> read_detections(std::istream& in);
std::vector<DetectionFrame> load_detections(const std::filesystem::path& path);
void write_detections(std::ostream& out, std::span<const DetectionFrame> detections);

/// Injected per-region features: a `manifest` listing one blob per cue kind
/// and the (frame, region) key of each row.
class FeatureStore {
 public:
  void put(CueKind kind, std::size_t frame, const std::string& tag, std::vector<double> values);
  bool has(CueKind kind) const { return kinds_.count(kind) != 0; }
  std::size_t dim(CueKind kind) const;
  /// Throws DataError naming the missing key.
  const std::vector<double>& get(CueKind kind, std::size_t frame, const std::string& tag) const;
  Provider provider(CueKind kind) const;
  std::map<CueKind, Provider> providers() const;

  void save(const std::filesystem::path& dir) const;
  static FeatureStore load(const std::filesystem::path& dir);

 private:
  struct Kind {
    std::size_t dim = 0;
    std::map<std::pair<std::size_t, std::string>, std::vector<double>> rows;
  };
  std::map<CueKind, Kind> kinds_;
};

}  // namespace fsq::cues
