// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "fsq/sequence.hpp"

namespace fsq::data {

enum class Split { base, novel };

const char* split_name(Split s);
Split parse_split(std::string_view name);

struct ClassInfo {
  int id = 0;
  std::string name;
  Split split = Split::base;
  bool operator==(const ClassInfo&) const = default;
};

struct Dataset {
  std::vector<ClassInfo> classes;
  std::vector<FeatureSequence> sequences;

  /// Layout shared by every sequence (empty for an empty dataset).
  Layout layout() const;
  /// Throws DataError / LayoutError on inconsistent content.
  void validate() const;
  const ClassInfo& class_info(int id) const;
  /// Classes of one split and the sequences labeled with them.
  Dataset subset(Split split) const;
};

bool bitwise_equal(const Dataset& a, const Dataset& b);

/// Default block layout for a feature width: N split evenly over hand, obj,
/// flow and grasp, the remainder going to the first blocks.
Layout default_layout(std::size_t dim);

struct SyntheticSpec {
  std::size_t base_classes = 20;
  std::size_t novel_classes = 10;
  std::size_t samples_per_class = 30;
  std::size_t dim = 16;
  std::size_t min_frames = 8;
  std::size_t max_frames = 8;
  /// Per-coordinate standard deviation of the class prototypes.
  double prototype_scale = 1.0;
  /// Per-element standard deviation of the additive Gaussian noise.
  double noise_scale = 0.5;
  /// Time-warp strength in [0, 1); 0 samples the prototype uniformly.
  double warp_scale = 0.3;
  /// Control points of each prototype trajectory.
  std::size_t knots = 6;
  std::uint64_t seed = 1;

  void validate() const;
};

/// Each class gets a smooth random trajectory through feature space; samples
/// are time-warped copies plus noise, stored at 32-bit precision.
Dataset generate_synthetic(const SyntheticSpec& spec);

inline constexpr std::size_t kDefaultMaxSegmentFrames = 144;

/// Contiguous pieces of at most `max_frames` frames, in order.
std::vector<FeatureSequence> split_segments(const FeatureSequence& seq,
                                            std::size_t max_frames = kDefaultMaxSegmentFrames);

struct BatchPlan {
  /// Sequence indices; all members of a batch share one length.
  std::vector<std::vector<std::size_t>> batches;
  std::size_t max_segment_frames = kDefaultMaxSegmentFrames;
};

/// Groups sequences by exact length, shuffles each group and cuts it into
/// batches of at most `batch_size`. Throws when a sequence is longer than
/// `max_segment_frames`.
BatchPlan bucket_batches(const Dataset& dataset, std::size_t batch_size, std::uint64_t seed,
                         std::size_t max_segment_frames = kDefaultMaxSegmentFrames);

// Directory with a `manifest` and a `blobs/` subdirectory of little-endian
// float32 T x N blobs.
inline constexpr const char* kFormatVersion = "fsq-v1";
void save_dataset(const Dataset& dataset, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

struct EpisodeSpec {
  std::size_t n_way = 5;
  std::size_t k_shot = 5;
  std::size_t q_query = 15;
  void validate() const;
};

struct Episode {
  /// Labels remapped to 0..n_way-1 in sampling order.
  std::vector<FeatureSequence> support, query;
  /// Original class id of each episode label.
  std::vector<int> classes;
};

/// Samples n_way classes without replacement from `dataset`, then k_shot
/// support and q_query query items per class, disjoint.
Episode sample_episode(const Dataset& dataset, const EpisodeSpec& spec, std::mt19937_64& rng);

/// Sequence indices grouped by label, labels ascending.
std::vector<std::pair<int, std::vector<std::size_t>>> by_label(const Dataset& dataset);

}  // namespace fsq::data
