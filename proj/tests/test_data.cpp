// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>
#include <unistd.h>
#include <set>

#include "fsq/data.hpp"
#include "fsq/error.hpp"

namespace fsq::data {
namespace {

namespace fs = std::filesystem;

SyntheticSpec small_spec() {
  SyntheticSpec s;
  s.base_classes = 4;
  s.novel_classes = 3;
  s.samples_per_class = 6;
  s.dim = 10;
  s.min_frames = 3;
  s.max_frames = 9;
  s.seed = 17;
  return s;
}

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() /
                   ("fsq_test_data_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  return dir;
}

bool thrown_message_contains(const std::function<void()>& f, const std::string& needle) {
  try {
    f();
  } catch (const DataError& e) {
    return std::string(e.what()).find(needle) != std::string::npos;
  }
  return false;
}

TEST(Synthetic, ShapesAndSplits) {
  const auto spec = small_spec();
  const Dataset ds = generate_synthetic(spec);
  ASSERT_EQ(ds.classes.size(), 7u);
  EXPECT_EQ(ds.sequences.size(), 42u);
  EXPECT_EQ(ds.subset(Split::base).classes.size(), 4u);
  EXPECT_EQ(ds.subset(Split::novel).sequences.size(), 18u);
  EXPECT_EQ(layout_dim(ds.layout()), 10u);
  for (const auto& s : ds.sequences) {
    EXPECT_GE(s.frames(), 3u);
    EXPECT_LE(s.frames(), 9u);
    for (double v : s.data.data()) EXPECT_EQ(v, static_cast<double>(static_cast<float>(v)));
  }
  EXPECT_NO_THROW(ds.validate());
}

TEST(Synthetic, DeterministicPerSeed) {
  auto spec = small_spec();
  EXPECT_TRUE(bitwise_equal(generate_synthetic(spec), generate_synthetic(spec)));
  auto other = spec;
  other.seed = 18;
  EXPECT_FALSE(bitwise_equal(generate_synthetic(spec), generate_synthetic(other)));
}

TEST(Synthetic, DefaultLayoutSplitsEvenly) {
  const Layout l = default_layout(10);
  ASSERT_EQ(l.size(), 4u);
  EXPECT_EQ(l[0].dim, 3u);
  EXPECT_EQ(l[1].dim, 3u);
  EXPECT_EQ(l[2].dim, 2u);
  EXPECT_EQ(l[3].dim, 2u);
}

// Nearest class mean on time-averaged features should be far above chance.
TEST(Synthetic, ClassesAreSeparable) {
  SyntheticSpec spec;
  spec.base_classes = 0;
  spec.novel_classes = 5;
  spec.samples_per_class = 20;
  const Dataset ds = generate_synthetic(spec);
  const std::size_t N = spec.dim;
  auto pooled = [&](const FeatureSequence& s) {
    std::vector<double> m(N, 0.0);
    for (std::size_t t = 0; t < s.frames(); ++t)
      for (std::size_t d = 0; d < N; ++d) m[d] += s.data.at(t, d) / static_cast<double>(s.frames());
    return m;
  };
  std::vector<std::vector<double>> centre(5, std::vector<double>(N, 0.0));
  for (const auto& s : ds.sequences) {
    const auto m = pooled(s);
    for (std::size_t d = 0; d < N; ++d) centre[s.label][d] += m[d] / 20.0;
  }
  int correct = 0;
  for (const auto& s : ds.sequences) {
    const auto m = pooled(s);
    int best = 0;
    double best_d = 1e300;
    for (int c = 0; c < 5; ++c) {
      double dist = 0;
      for (std::size_t d = 0; d < N; ++d) dist += (m[d] - centre[c][d]) * (m[d] - centre[c][d]);
      if (dist < best_d) best_d = dist, best = c;
    }
    correct += best == s.label;
  }
  EXPECT_GT(correct, 80);
}

TEST(Synthetic, RejectsBadSpec) {
  auto spec = small_spec();
  spec.min_frames = 10;
  EXPECT_THROW(generate_synthetic(spec), ConfigError);
  spec = small_spec();
  spec.warp_scale = 1.0;
  EXPECT_THROW(generate_synthetic(spec), ConfigError);
}

FeatureSequence ramp(std::size_t T, std::size_t N) {
  std::vector<double> v(T * N);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<double>(i);
  return {"r", 3, default_layout(N), Tensor::matrix(T, N, std::move(v))};
}

TEST(Segments, ConcatenationRestoresSequence) {
  for (std::size_t T : {1u, 5u, 144u, 145u, 300u, 433u}) {
    const auto seq = ramp(T, 4);
    const auto parts = split_segments(seq);
    std::vector<double> joined;
    for (const auto& p : parts) {
      EXPECT_LE(p.frames(), kDefaultMaxSegmentFrames);
      EXPECT_GE(p.frames(), 1u);
      EXPECT_EQ(p.label, 3);
      EXPECT_EQ(p.layout, seq.layout);
      joined.insert(joined.end(), p.data.data().begin(), p.data.data().end());
    }
    EXPECT_EQ(joined, seq.data.to_vector()) << T;
    EXPECT_EQ(parts.size(), (T + 143) / 144);
  }
}

TEST(Segments, ShortSequenceIsUnchanged) {
  const auto seq = ramp(7, 3);
  const auto parts = split_segments(seq, 7);
  ASSERT_EQ(parts.size(), 1u);
  EXPECT_EQ(parts[0].id, "r");
  EXPECT_TRUE(bitwise_equal(parts[0].data, seq.data));
}

TEST(Segments, DistinctIds) {
  const auto parts = split_segments(ramp(10, 2), 3);
  std::set<std::string> ids;
  for (const auto& p : parts) ids.insert(p.id);
  EXPECT_EQ(ids.size(), 4u);
}

TEST(Buckets, PartitionByLength) {
  const Dataset ds = generate_synthetic(small_spec());
  const auto plan = bucket_batches(ds, 4, 3);
  std::vector<int> seen(ds.sequences.size(), 0);
  for (const auto& b : plan.batches) {
    ASSERT_FALSE(b.empty());
    EXPECT_LE(b.size(), 4u);
    for (auto i : b) {
      ++seen[i];
      EXPECT_EQ(ds.sequences[i].frames(), ds.sequences[b[0]].frames());
    }
  }
  for (int c : seen) EXPECT_EQ(c, 1);
  EXPECT_EQ(bucket_batches(ds, 4, 3).batches, plan.batches);
}

TEST(Buckets, RejectsOverlongSequence) {
  Dataset ds;
  ds.classes = {{3, "c", Split::base}};
  ds.sequences = {ramp(145, 2)};
  EXPECT_THROW(bucket_batches(ds, 2, 0), DataError);
  EXPECT_NO_THROW(bucket_batches(ds, 2, 0, 200));
}

TEST(Storage, RoundTripIsBitwise) {
  const Dataset ds = generate_synthetic(small_spec());
  const auto dir = scratch("roundtrip");
  save_dataset(ds, dir);
  EXPECT_TRUE(bitwise_equal(load_dataset(dir), ds));
  fs::remove_all(dir);
}

TEST(Storage, EmptyDatasetRoundTrips) {
  const auto dir = scratch("empty");
  save_dataset(Dataset{}, dir);
  const Dataset back = load_dataset(dir);
  EXPECT_TRUE(back.classes.empty());
  EXPECT_TRUE(back.sequences.empty());
  fs::remove_all(dir);
}

TEST(Storage, VersionMismatch) {
  const auto dir = scratch("version");
  fs::create_directories(dir);
  std::ofstream(dir / "manifest") << R"({"format":"fsq-v0","classes":[]})" << '\n';
  EXPECT_TRUE(thrown_message_contains([&] { load_dataset(dir); }, "fsq-v0"));
  fs::remove_all(dir);
}

TEST(Storage, TruncatedBlobNamesSequence) {
  const Dataset ds = generate_synthetic(small_spec());
  const auto dir = scratch("truncated");
  save_dataset(ds, dir);
  const auto blob = dir / "blobs" / "5.f32";
  fs::resize_file(blob, fs::file_size(blob) - 4);
  EXPECT_TRUE(thrown_message_contains([&] { load_dataset(dir); }, ds.sequences[5].id));
  fs::remove_all(dir);
}

TEST(Storage, UnknownCueIsLayoutError) {
  const auto dir = scratch("cue");
  fs::create_directories(dir / "blobs");
  std::ofstream(dir / "manifest")
      << R"({"format":"fsq-v1","classes":[{"id":0,"name":"a","split":"base"}]})" << '\n'
      << R"({"id":"s","label":0,"frames":1,"layout":[{"kind":"gaze","dim":1}],"blob":"blobs/0.f32"})"
      << '\n';
  std::ofstream(dir / "blobs" / "0.f32", std::ios::binary).write("\0\0\0\0", 4);
  EXPECT_THROW(load_dataset(dir), LayoutError);
  fs::remove_all(dir);
}

TEST(Storage, UnknownLabelIsRejected) {
  Dataset ds;
  ds.sequences = {ramp(2, 2)};
  EXPECT_THROW(ds.validate(), DataError);
}

TEST(Episodes, CountsLabelsAndDisjointness) {
  const Dataset ds = generate_synthetic(small_spec());
  std::mt19937_64 rng(5);
  const EpisodeSpec spec{3, 2, 4};
  const Episode ep = sample_episode(ds, spec, rng);
  ASSERT_EQ(ep.classes.size(), 3u);
  EXPECT_EQ(std::set<int>(ep.classes.begin(), ep.classes.end()).size(), 3u);
  EXPECT_EQ(ep.support.size(), 6u);
  EXPECT_EQ(ep.query.size(), 12u);
  std::set<std::string> ids;
  for (const auto* part : {&ep.support, &ep.query})
    for (const auto& s : *part) {
      EXPECT_TRUE(ids.insert(s.id).second) << s.id;
      ASSERT_GE(s.label, 0);
      ASSERT_LT(s.label, 3);
      EXPECT_EQ(ds.sequences[0].layout, s.layout);
      EXPECT_TRUE(s.id.rfind(ds.class_info(ep.classes[s.label]).name, 0) == 0);
    }
  std::vector<int> per(3, 0);
  for (const auto& s : ep.support) ++per[s.label];
  EXPECT_EQ(per, (std::vector<int>{2, 2, 2}));
}

TEST(Episodes, DeterministicPerRngState) {
  const Dataset ds = generate_synthetic(small_spec());
  std::mt19937_64 a(9), b(9);
  const auto x = sample_episode(ds, {5, 1, 2}, a);
  const auto y = sample_episode(ds, {5, 1, 2}, b);
  EXPECT_EQ(x.classes, y.classes);
  for (std::size_t i = 0; i < x.query.size(); ++i) EXPECT_EQ(x.query[i].id, y.query[i].id);
}

TEST(Episodes, InsufficientClassIsNamed) {
  Dataset ds = generate_synthetic(small_spec());
  ds.sequences.erase(std::remove_if(ds.sequences.begin(), ds.sequences.end(),
                                    [](const FeatureSequence& s) {
                                      return s.label == 2 && s.id.back() > '2';
                                    }),
                     ds.sequences.end());
  std::mt19937_64 rng(1);
  EXPECT_TRUE(thrown_message_contains([&] { sample_episode(ds, {3, 2, 2}, rng); }, "class 2"));
  EXPECT_THROW(sample_episode(ds.subset(Split::novel), {4, 1, 1}, rng), DataError);
}

}  // namespace
}  // namespace fsq::data
