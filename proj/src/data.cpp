// SPDX-License-Identifier: Apache-2.0
#include "fsq/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "fsq/error.hpp"
#include "fsq/little_endian.hpp"
#include "json.hpp"

namespace fsq::data {

using nlohmann::json;

const char* split_name(Split s) { return s == Split::base ? "base" : "novel"; }

Split parse_split(std::string_view name) {
  if (name == "base") return Split::base;
  if (name == "novel") return Split::novel;
  throw DataError("unknown split '" + std::string(name) + "'");
}

Layout Dataset::layout() const { return sequences.empty() ? Layout{} : sequences.front().layout; }

void Dataset::validate() const {
  std::set<int> ids;
  for (const auto& c : classes)
    if (!ids.insert(c.id).second) throw DataError("duplicate class id " + std::to_string(c.id));
  std::set<std::string> names;
  const Layout shared = layout();
  for (const auto& s : sequences) {
    if (!names.insert(s.id).second) throw DataError("duplicate sequence id '" + s.id + "'");
    if (!ids.count(s.label))
      throw DataError("sequence '" + s.id + "' has unknown label " + std::to_string(s.label));
    if (s.layout != shared)
      throw LayoutError("sequence '" + s.id + "' has layout " + layout_string(s.layout) +
                        ", expected " + layout_string(shared));
    if (s.frames() == 0) throw DataError("sequence '" + s.id + "' has no frames");
    s.validate();
  }
}

const ClassInfo& Dataset::class_info(int id) const {
  for (const auto& c : classes)
    if (c.id == id) return c;
  throw DataError("unknown class id " + std::to_string(id));
}

Dataset Dataset::subset(Split split) const {
  Dataset out;
  std::set<int> keep;
  for (const auto& c : classes)
    if (c.split == split) {
      out.classes.push_back(c);
      keep.insert(c.id);
    }
  for (const auto& s : sequences)
    if (keep.count(s.label)) out.sequences.push_back(s);
  return out;
}

bool bitwise_equal(const Dataset& a, const Dataset& b) {
  if (a.classes != b.classes || a.sequences.size() != b.sequences.size()) return false;
  for (std::size_t i = 0; i < a.sequences.size(); ++i) {
    const auto& x = a.sequences[i];
    const auto& y = b.sequences[i];
    if (x.id != y.id || x.label != y.label || x.layout != y.layout ||
        !bitwise_equal(x.data, y.data))
      return false;
  }
  return true;
}

Layout default_layout(std::size_t dim) {
  constexpr CueKind kinds[] = {CueKind::hand, CueKind::obj, CueKind::flow, CueKind::grasp};
  Layout layout;
  for (std::size_t i = 0; i < 4; ++i) {
    const std::size_t d = dim / 4 + (i < dim % 4 ? 1 : 0);
    if (d > 0) layout.push_back({kinds[i], d});
  }
  return layout;
}

void SyntheticSpec::validate() const {
  if (base_classes + novel_classes == 0) throw ConfigError("synthetic data needs classes");
  if (samples_per_class == 0) throw ConfigError("samples_per_class must be positive");
  if (dim == 0) throw ConfigError("dim must be positive");
  if (min_frames == 0 || min_frames > max_frames)
    throw ConfigError("need 0 < min_frames <= max_frames");
  if (knots < 2) throw ConfigError("need at least 2 knots");
  if (!(warp_scale >= 0.0 && warp_scale < 1.0)) throw ConfigError("warp_scale must be in [0, 1)");
  if (!(prototype_scale > 0.0) || !(noise_scale >= 0.0))
    throw ConfigError("scales must be positive");
}

namespace {

// Catmull-Rom through the knots, u in [0, 1]; end knots are duplicated.
double catmull_rom(const std::vector<double>& k, double u) {
  const std::size_t n = k.size();
  const double x = u * static_cast<double>(n - 1);
  const std::size_t i = std::min(static_cast<std::size_t>(x), n - 2);
  const double t = x - static_cast<double>(i);
  const double p0 = k[i == 0 ? 0 : i - 1], p1 = k[i], p2 = k[i + 1];
  const double p3 = k[std::min(i + 2, n - 1)];
  const double t2 = t * t, t3 = t2 * t;
  return 0.5 * (2.0 * p1 + (p2 - p0) * t + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * t2 +
                (3.0 * p1 - p0 - 3.0 * p2 + p3) * t3);
}

std::string class_name(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "class%03zu", i);
  return buf;
}

}  // namespace

Dataset generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  std::uniform_int_distribution<std::size_t> length(spec.min_frames, spec.max_frames);

  Dataset ds;
  const Layout layout = default_layout(spec.dim);
  const std::size_t n_classes = spec.base_classes + spec.novel_classes;
  // Mean-reverting walk keeps every knot at the same marginal scale.
  constexpr double rho = 0.6;
  const double innovation = std::sqrt(1.0 - rho * rho);
  for (std::size_t c = 0; c < n_classes; ++c) {
    ds.classes.push_back({static_cast<int>(c), class_name(c),
                          c < spec.base_classes ? Split::base : Split::novel});
    std::vector<std::vector<double>> knots(spec.dim, std::vector<double>(spec.knots));
    for (auto& coord : knots) {
      coord[0] = normal(rng);
      for (std::size_t j = 1; j < spec.knots; ++j)
        coord[j] = rho * coord[j - 1] + innovation * normal(rng);
      for (auto& v : coord) v *= spec.prototype_scale;
    }
    for (std::size_t s = 0; s < spec.samples_per_class; ++s) {
      const std::size_t T = length(rng);
      const double bend = spec.warp_scale * unit(rng);
      std::vector<double> values(T * spec.dim);
      for (std::size_t t = 0; t < T; ++t) {
        const double u0 = T == 1 ? 0.5 : static_cast<double>(t) / static_cast<double>(T - 1);
        // Monotone because |bend| < 1.
        const double u = std::clamp(u0 + bend * std::sin(M_PI * u0) / M_PI, 0.0, 1.0);
        for (std::size_t d = 0; d < spec.dim; ++d) {
          const double v = catmull_rom(knots[d], u) + spec.noise_scale * normal(rng);
          values[t * spec.dim + d] = static_cast<double>(static_cast<float>(v));
        }
      }
      ds.sequences.push_back({class_name(c) + "_" + std::to_string(s), static_cast<int>(c),
                              layout, Tensor::matrix(T, spec.dim, std::move(values))});
    }
  }
  return ds;
}

std::vector<FeatureSequence> split_segments(const FeatureSequence& seq, std::size_t max_frames) {
  if (max_frames == 0) throw ContractError("max_frames must be positive");
  const std::size_t T = seq.frames();
  if (T <= max_frames) return {seq};
  const std::size_t N = seq.dim();
  std::vector<FeatureSequence> out;
  for (std::size_t start = 0, k = 0; start < T; start += max_frames, ++k) {
    const std::size_t len = std::min(max_frames, T - start);
    std::vector<double> v(seq.data.ptr() + start * N, seq.data.ptr() + (start + len) * N);
    out.push_back({seq.id + "#" + std::to_string(k), seq.label, seq.layout,
                   Tensor::matrix(len, N, std::move(v))});
  }
  return out;
}

BatchPlan bucket_batches(const Dataset& dataset, std::size_t batch_size, std::uint64_t seed,
                         std::size_t max_segment_frames) {
  if (batch_size == 0) throw ContractError("batch_size must be positive");
  std::map<std::size_t, std::vector<std::size_t>> buckets;
  for (std::size_t i = 0; i < dataset.sequences.size(); ++i) {
    const auto& s = dataset.sequences[i];
    if (s.frames() > max_segment_frames)
      throw DataError("sequence '" + s.id + "' has " + std::to_string(s.frames()) +
                      " frames, more than " + std::to_string(max_segment_frames));
    buckets[s.frames()].push_back(i);
  }
  std::mt19937_64 rng(seed);
  BatchPlan plan;
  plan.max_segment_frames = max_segment_frames;
  for (auto& [len, members] : buckets) {
    std::shuffle(members.begin(), members.end(), rng);
    for (std::size_t i = 0; i < members.size(); i += batch_size)
      plan.batches.emplace_back(members.begin() + static_cast<std::ptrdiff_t>(i),
                                members.begin() + static_cast<std::ptrdiff_t>(
                                                      std::min(i + batch_size, members.size())));
  }
  return plan;
}

namespace {

json layout_json(const Layout& layout) {
  json out = json::array();
  for (const auto& b : layout) out.push_back({{"kind", cue_name(b.kind)}, {"dim", b.dim}});
  return out;
}

Layout layout_from(const json& j) {
  Layout layout;
  for (const auto& b : j) layout.push_back({parse_cue(b.at("kind").get<std::string>()),
                                            b.at("dim").get<std::size_t>()});
  return layout;
}

std::string blob_name(std::size_t index) { return "blobs/" + std::to_string(index) + ".f32"; }

}  // namespace

void save_dataset(const Dataset& dataset, const std::filesystem::path& dir) {
  dataset.validate();
  std::filesystem::create_directories(dir / "blobs");
  std::ofstream manifest(dir / "manifest", std::ios::binary);
  if (!manifest) throw DataError("cannot write " + (dir / "manifest").string());
  json classes = json::array();
  for (const auto& c : dataset.classes)
    classes.push_back({{"id", c.id}, {"name", c.name}, {"split", split_name(c.split)}});
  manifest << json{{"format", kFormatVersion}, {"classes", classes}}.dump() << '\n';
  for (std::size_t i = 0; i < dataset.sequences.size(); ++i) {
    const auto& s = dataset.sequences[i];
    const std::string blob = blob_name(i);
    manifest << json{{"id", s.id},         {"label", s.label},  {"frames", s.frames()},
                     {"layout", layout_json(s.layout)}, {"blob", blob}}
                    .dump()
             << '\n';
    std::vector<float> values(s.data.size());
    for (std::size_t k = 0; k < values.size(); ++k) values[k] = static_cast<float>(s.data[k]);
    std::ofstream out(dir / blob, std::ios::binary);
    write_le_f32(out, values);
    if (!out) throw DataError("cannot write blob for sequence '" + s.id + "'");
  }
  if (!manifest) throw DataError("cannot write " + (dir / "manifest").string());
}

Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream manifest(dir / "manifest", std::ios::binary);
  if (!manifest) throw DataError("cannot open " + (dir / "manifest").string());
  std::string line;
  if (!std::getline(manifest, line)) throw DataError("empty manifest");
  Dataset ds;
  try {
    const json header = json::parse(line);
    const auto format = header.at("format").get<std::string>();
    if (format != kFormatVersion)
      throw DataError("unsupported dataset format '" + format + "', expected '" +
                      kFormatVersion + "'");
    for (const auto& c : header.at("classes"))
      ds.classes.push_back({c.at("id").get<int>(), c.at("name").get<std::string>(),
                            parse_split(c.at("split").get<std::string>())});
  } catch (const json::exception& e) {
    throw DataError(std::string("bad manifest header: ") + e.what());
  }
  std::size_t line_no = 1;
  while (std::getline(manifest, line)) {
    ++line_no;
    if (line.empty()) continue;
    FeatureSequence s;
    std::string blob;
    std::size_t frames = 0;
    try {
      const json rec = json::parse(line);
      s.id = rec.at("id").get<std::string>();
      s.label = rec.at("label").get<int>();
      frames = rec.at("frames").get<std::size_t>();
      s.layout = layout_from(rec.at("layout"));
      blob = rec.at("blob").get<std::string>();
    } catch (const json::exception& e) {
      throw DataError("bad manifest line " + std::to_string(line_no) + ": " + e.what());
    }
    const std::size_t n = frames * layout_dim(s.layout);
    const auto path = dir / blob;
    std::error_code ec;
    const auto bytes = std::filesystem::file_size(path, ec);
    if (ec) throw DataError("sequence '" + s.id + "': missing blob " + path.string());
    if (bytes != n * sizeof(float))
      throw DataError("sequence '" + s.id + "': blob has " + std::to_string(bytes) +
                      " bytes, expected " + std::to_string(n * sizeof(float)));
    std::vector<float> raw(n);
    std::ifstream in(path, std::ios::binary);
    if (!read_le_f32(in, raw)) throw DataError("sequence '" + s.id + "': short blob read");
    s.data = Tensor::matrix(frames, layout_dim(s.layout), std::vector<double>(raw.begin(), raw.end()));
    ds.sequences.push_back(std::move(s));
  }
  ds.validate();
  return ds;
}

void EpisodeSpec::validate() const {
  if (n_way < 2 || k_shot < 1 || q_query < 1)
    throw ConfigError("episodes need n_way >= 2, k_shot >= 1 and q_query >= 1");
}

std::vector<std::pair<int, std::vector<std::size_t>>> by_label(const Dataset& dataset) {
  std::map<int, std::vector<std::size_t>> groups;
  for (const auto& c : dataset.classes) groups[c.id];
  for (std::size_t i = 0; i < dataset.sequences.size(); ++i)
    groups[dataset.sequences[i].label].push_back(i);
  return {groups.begin(), groups.end()};
}

Episode sample_episode(const Dataset& dataset, const EpisodeSpec& spec, std::mt19937_64& rng) {
  spec.validate();
  const auto groups = by_label(dataset);
  const std::size_t need = spec.k_shot + spec.q_query;
  for (const auto& [label, members] : groups)
    if (members.size() < need)
      throw DataError("class " + std::to_string(label) + " has " +
                      std::to_string(members.size()) + " sequences, an episode needs " +
                      std::to_string(need));
  if (groups.size() < spec.n_way)
    throw DataError("dataset has " + std::to_string(groups.size()) + " classes, episode needs " +
                    std::to_string(spec.n_way));

  std::vector<std::size_t> order(groups.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);
  Episode ep;
  for (std::size_t w = 0; w < spec.n_way; ++w) {
    const auto& [label, members] = groups[order[w]];
    ep.classes.push_back(label);
    std::vector<std::size_t> picks = members;
    std::shuffle(picks.begin(), picks.end(), rng);
    for (std::size_t i = 0; i < need; ++i) {
      FeatureSequence s = dataset.sequences[picks[i]];
      s.label = static_cast<int>(w);
      (i < spec.k_shot ? ep.support : ep.query).push_back(std::move(s));
    }
  }
  return ep;
}

}  // namespace fsq::data
