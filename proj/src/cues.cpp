// SPDX-License-Identifier: Apache-2.0
#include "fsq/cues.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "fsq/error.hpp"
#include "fsq/little_endian.hpp"
#include "json.hpp"

namespace fsq::cues {

using nlohmann::json;

const char* side_name(Side s) { return s == Side::L ? "L" : "R"; }

const Hand* DetectionFrame::find(Side side) const {
  for (const auto& h : hands)
    if (h.side == side) return &h;
  return nullptr;
}

void DetectionFrame::validate() const {
  const std::string where = "detections at t=" + std::to_string(t) + ": ";
  if (!(frame_w > 0) || !(frame_h > 0)) throw DataError(where + "frame size must be positive");
  bool seen[2] = {false, false};
  for (const auto& h : hands) {
    auto& s = seen[h.side == Side::L ? 0 : 1];
    if (s) throw DataError(where + "two detections for side " + side_name(h.side));
    s = true;
    if (!(h.score >= 0.0 && h.score <= 1.0))
      throw DataError(where + "score " + std::to_string(h.score) + " outside [0, 1]");
    if (!h.box.valid()) throw DataError(where + "degenerate box for side " + side_name(h.side));
  }
}

Box expand_box(const Box& b, double s, double frame_w, double frame_h) {
  if (!b.valid()) throw ContractError("expand_box: degenerate input box");
  if (!(s > 0.0)) throw ContractError("expand_box: scale must be positive");
  // Edges move by half the growth, which keeps s = 1 exact.
  const double dx = 0.5 * (s - 1.0) * b.width(), dy = 0.5 * (s - 1.0) * b.height();
  const Box out{std::clamp(b.x1 - dx, 0.0, frame_w), std::clamp(b.y1 - dy, 0.0, frame_h),
                std::clamp(b.x2 + dx, 0.0, frame_w), std::clamp(b.y2 + dy, 0.0, frame_h)};
  if (!out.valid()) throw OffFrameError("hand box lies outside the frame");
  return out;
}

std::optional<Box> track_hand(std::span<const Sighting> history, std::size_t t,
                              std::size_t max_gap) {
  if (history.empty()) return std::nullopt;
  const Sighting& last = history.back();
  if (last.t >= t) throw ContractError("track_hand: history must precede the tracked frame");
  if (t - last.t > max_gap) return std::nullopt;
  if (history.size() == 1) return last.box;
  const Sighting& prev = history[history.size() - 2];
  const double span = static_cast<double>(last.t - prev.t);
  const double ahead = static_cast<double>(t - last.t);
  const double dx = (last.box.cx() - prev.box.cx()) / span * ahead;
  const double dy = (last.box.cy() - prev.box.cy()) / span * ahead;
  return Box{last.box.x1 + dx, last.box.y1 + dy, last.box.x2 + dx, last.box.y2 + dy};
}

Cell cell_at(double x, double y, const GridSpec& grid, double frame_w, double frame_h) {
  auto index = [](double v, double extent, std::size_t n) {
    const double f = std::floor(v / extent * static_cast<double>(n));
    return static_cast<std::size_t>(std::clamp(f, 0.0, static_cast<double>(n - 1)));
  };
  return {index(y, frame_h, grid.rows), index(x, frame_w, grid.cols)};
}

std::vector<Cell> activate_cells(const Box& b, const GridSpec& grid, double frame_w,
                                 double frame_h) {
  if (grid.rows == 0 || grid.cols == 0) throw ContractError("activate_cells: empty grid");
  const Cell c = cell_at(b.cx(), b.cy(), grid, frame_w, frame_h);
  std::vector<Cell> out{c};
  if (c.row > 0) out.push_back({c.row - 1, c.col});
  if (c.row + 1 < grid.rows) out.push_back({c.row + 1, c.col});
  if (c.col > 0) out.push_back({c.row, c.col - 1});
  if (c.col + 1 < grid.cols) out.push_back({c.row, c.col + 1});
  return out;
}

std::vector<double> fuse_cells(std::span<const std::vector<double>> cells) {
  if (cells.empty()) throw ContractError("fuse_cells: no cells");
  std::vector<double> out = cells.front();
  for (const auto& c : cells.subspan(1)) {
    if (c.size() != out.size())
      throw ContractError("fuse_cells: cell vectors of length " + std::to_string(out.size()) +
                          " and " + std::to_string(c.size()));
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(out[i], c[i]);
  }
  return out;
}

std::vector<double> trajectory_feature(std::span<const FrameHands> frames, std::size_t t,
                                       std::size_t W) {
  if (W == 0) throw ContractError("trajectory window must be positive");
  if (t >= frames.size()) throw ContractError("trajectory_feature: frame out of range");
  std::vector<double> out(8 * W, 0.0);
  for (std::size_t w = 0; w < W; ++w) {
    const std::size_t back = W - 1 - w;
    if (back > t) continue;
    const FrameHands& f = frames[t - back];
    const std::optional<Box>* sides[] = {&f.left, &f.right};
    for (std::size_t s = 0; s < 2; ++s) {
      if (!*sides[s]) continue;
      const Box& b = **sides[s];
      double* dst = out.data() + 8 * w + 4 * s;
      dst[0] = std::clamp(b.x1 / f.frame_w, 0.0, 1.0);
      dst[1] = std::clamp(b.y1 / f.frame_h, 0.0, 1.0);
      dst[2] = std::clamp(b.x2 / f.frame_w, 0.0, 1.0);
      dst[3] = std::clamp(b.y2 / f.frame_h, 0.0, 1.0);
    }
  }
  return out;
}

std::string hand_tag(Side side) { return std::string("hand") + side_name(side); }

std::string cell_tag(const Cell& c) {
  return "cell(" + std::to_string(c.row) + "," + std::to_string(c.col) + ")";
}

void CueConfig::validate() const {
  if (!(s_hand > 0.0)) throw ConfigError("s_hand must be positive");
  if (grid.rows == 0 || grid.cols == 0) throw ConfigError("grid must have rows and columns");
  if (traj_window == 0) throw ConfigError("traj_window must be positive");
  if (enabled.empty()) throw ConfigError("no cue blocks enabled");
  std::set<CueKind> seen;
  for (auto k : enabled)
    if (!seen.insert(k).second) throw ConfigError(std::string("cue ") + cue_name(k) + " enabled twice");
}

namespace {

bool per_hand(CueKind k) { return k == CueKind::hand || k == CueKind::flow || k == CueKind::grasp; }

bool enabled(const CueConfig& config, CueKind k) {
  return std::find(config.enabled.begin(), config.enabled.end(), k) != config.enabled.end();
}

const Provider& provider_for(const std::map<CueKind, Provider>& providers, CueKind k) {
  const auto it = providers.find(k);
  if (it == providers.end() || !it->second.lookup)
    throw ConfigError(std::string("no feature provider for cue ") + cue_name(k));
  if (it->second.dim == 0) throw LayoutError(std::string("cue ") + cue_name(k) + " has dim 0");
  return it->second;
}

std::vector<double> checked(const Provider& p, CueKind k, std::size_t frame, const Region& r) {
  auto v = p.lookup(frame, r);
  if (v.size() != p.dim)
    throw LayoutError(std::string("cue ") + cue_name(k) + " at frame " + std::to_string(frame) +
                      " region " + r.tag + ": expected " + std::to_string(p.dim) +
                      " values, got " + std::to_string(v.size()));
  return v;
}

}  // namespace

Layout cue_layout(const CueConfig& config, const std::map<CueKind, Provider>& providers) {
  config.validate();
  Layout layout;
  for (CueKind k : kAllCueKinds) {
    if (!enabled(config, k)) continue;
    if (k == CueKind::traj) {
      layout.push_back({k, 8 * config.traj_window});
      continue;
    }
    const std::size_t d = provider_for(providers, k).dim;
    layout.push_back({k, per_hand(k) ? 2 * d : d});
  }
  return layout;
}

std::vector<FrameHands> tracked_hands(std::span<const DetectionFrame> detections,
                                      std::size_t max_gap) {
  std::vector<FrameHands> out;
  std::vector<Sighting> seen[2];
  for (const auto& f : detections) {
    FrameHands fh{f.frame_w, f.frame_h, {}, {}};
    for (Side side : kSides) {
      auto& history = seen[side == Side::L ? 0 : 1];
      auto& slot = side == Side::L ? fh.left : fh.right;
      if (const Hand* h = f.find(side)) {
        slot = h->box;
        history.push_back({f.t, h->box});
      } else {
        slot = track_hand(history, f.t, max_gap);
      }
    }
    out.push_back(fh);
  }
  return out;
}

FeatureSequence assemble_sequence(std::span<const DetectionFrame> detections,
                                  const std::map<CueKind, Provider>& providers,
                                  const CueConfig& config) {
  if (detections.empty()) throw DataError("assemble_sequence: no detection frames");
  for (std::size_t i = 0; i < detections.size(); ++i) {
    detections[i].validate();
    if (i > 0 && detections[i].t <= detections[i - 1].t)
      throw DataError("detections are not in increasing frame order at t=" +
                      std::to_string(detections[i].t));
  }
  const Layout layout = cue_layout(config, providers);
  const std::size_t N = layout_dim(layout);
  const auto hands = tracked_hands(detections, config.max_gap);

  std::vector<double> data;
  data.reserve(detections.size() * N);
  for (std::size_t i = 0; i < detections.size(); ++i) {
    const auto& f = detections[i];
    const FrameHands& fh = hands[i];
    const std::optional<Box>* boxes[] = {&fh.left, &fh.right};
    // Hand-context regions; a box pushed off-frame by the tracker counts as missing.
    std::optional<Box> context[2];
    for (std::size_t s = 0; s < 2; ++s) {
      if (!*boxes[s]) continue;
      try {
        context[s] = expand_box(**boxes[s], config.s_hand, f.frame_w, f.frame_h);
      } catch (const OffFrameError&) {
      }
    }
    for (const auto& block : layout) {
      const CueKind k = block.kind;
      if (k == CueKind::traj) {
        const auto traj = trajectory_feature(hands, i, config.traj_window);
        data.insert(data.end(), traj.begin(), traj.end());
        continue;
      }
      const Provider& p = provider_for(providers, k);
      if (per_hand(k)) {
        for (std::size_t s = 0; s < 2; ++s) {
          if (!context[s]) {
            data.insert(data.end(), p.dim, 0.0);
            continue;
          }
          const auto v = checked(p, k, f.t, {hand_tag(kSides[s]), *context[s]});
          data.insert(data.end(), v.begin(), v.end());
        }
        continue;
      }
      // Object cells around both hands, each cell pooled once.
      std::set<Cell> cells;
      for (std::size_t s = 0; s < 2; ++s) {
        if (!context[s]) continue;
        for (const Cell& c : activate_cells(**boxes[s], config.grid, f.frame_w, f.frame_h))
          cells.insert(c);
      }
      if (cells.empty()) {
        data.insert(data.end(), p.dim, 0.0);
        continue;
      }
      const double cw = f.frame_w / static_cast<double>(config.grid.cols);
      const double ch = f.frame_h / static_cast<double>(config.grid.rows);
      std::vector<std::vector<double>> pooled;
      for (const Cell& c : cells) {
        const Box area{static_cast<double>(c.col) * cw, static_cast<double>(c.row) * ch,
                       static_cast<double>(c.col + 1) * cw, static_cast<double>(c.row + 1) * ch};
        pooled.push_back(checked(p, k, f.t, {cell_tag(c), area}));
      }
      const auto fused = fuse_cells(pooled);
      data.insert(data.end(), fused.begin(), fused.end());
    }
  }
  FeatureSequence seq;
  seq.id = "t" + std::to_string(detections.front().t);
  seq.layout = layout;
  seq.data = Tensor::matrix(detections.size(), N, std::move(data));
  return seq;
}

// ---------------------------------------------------------------------------

namespace {

Side parse_side(const std::string& s, std::size_t line) {
  if (s == "L") return Side::L;
  if (s == "R") return Side::R;
  throw DataError("detections line " + std::to_string(line) + ": unknown side '" + s + "'");
}

}  // namespace

std::vector<DetectionFrame> read_detections(std::istream& in) {
  std::vector<DetectionFrame> out;
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json j = json::parse(text);
      DetectionFrame f;
      f.t = j.at("t").get<std::size_t>();
      f.frame_w = j.at("frame_w").get<double>();
      f.frame_h = j.at("frame_h").get<double>();
      for (const auto& h : j.value("hands", json::array())) {
        const auto box = h.at("box").get<std::vector<double>>();
        if (box.size() != 4)
          throw DataError("detections line " + std::to_string(line) + ": box needs 4 values");
        f.hands.push_back({parse_side(h.at("side").get<std::string>(), line),
                           {box[0], box[1], box[2], box[3]},
                           h.value("score", 1.0)});
      }
      f.validate();
      if (!out.empty() && f.t <= out.back().t)
        throw DataError("detections line " + std::to_string(line) + ": frame " +
                        std::to_string(f.t) + " is not after " + std::to_string(out.back().t));
      out.push_back(std::move(f));
    } catch (const json::exception& e) {
      throw DataError("detections line " + std::to_string(line) + ": " + e.what());
    }
  }
  return out;
}

std::vector<DetectionFrame> load_detections(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open detections " + path.string());
  return read_detections(in);
}

void write_detections(std::ostream& out, std::span<const DetectionFrame> detections) {
  for (const auto& f : detections) {
    json hands = json::array();
    for (const auto& h : f.hands)
      hands.push_back({{"side", side_name(h.side)},
                       {"box", {h.box.x1, h.box.y1, h.box.x2, h.box.y2}},
                       {"score", h.score}});
    out << json{{"t", f.t}, {"frame_w", f.frame_w}, {"frame_h", f.frame_h}, {"hands", hands}}.dump()
        << '\n';
  }
}

// ---------------------------------------------------------------------------

void FeatureStore::put(CueKind kind, std::size_t frame, const std::string& tag,
                       std::vector<double> values) {
  auto& k = kinds_[kind];
  if (k.rows.empty() && k.dim == 0) k.dim = values.size();
  if (values.size() != k.dim)
    throw LayoutError(std::string("feature store: cue ") + cue_name(kind) + " has dim " +
                      std::to_string(k.dim) + ", got " + std::to_string(values.size()));
  k.rows[{frame, tag}] = std::move(values);
}

std::size_t FeatureStore::dim(CueKind kind) const {
  const auto it = kinds_.find(kind);
  if (it == kinds_.end())
    throw DataError(std::string("feature store has no cue ") + cue_name(kind));
  return it->second.dim;
}

const std::vector<double>& FeatureStore::get(CueKind kind, std::size_t frame,
                                             const std::string& tag) const {
  const auto it = kinds_.find(kind);
  if (it == kinds_.end())
    throw DataError(std::string("feature store has no cue ") + cue_name(kind));
  const auto row = it->second.rows.find({frame, tag});
  if (row == it->second.rows.end())
    throw DataError(std::string("feature store: no ") + cue_name(kind) + " features for frame " +
                    std::to_string(frame) + " region " + tag);
  return row->second;
}

Provider FeatureStore::provider(CueKind kind) const {
  return {dim(kind), [this, kind](std::size_t frame, const Region& r) {
            return get(kind, frame, r.tag);
          }};
}

std::map<CueKind, Provider> FeatureStore::providers() const {
  std::map<CueKind, Provider> out;
  for (const auto& [kind, k] : kinds_) out.emplace(kind, provider(kind));
  return out;
}

namespace {
constexpr const char* kStoreFormat = "fsq-cues-v1";
}

void FeatureStore::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  json manifest{{"format", kStoreFormat}, {"cues", json::array()}};
  for (const auto& [kind, k] : kinds_) {
    const std::string blob = std::string(cue_name(kind)) + ".f64";
    json keys = json::array();
    std::ofstream out(dir / blob, std::ios::binary);
    for (const auto& [key, values] : k.rows) {
      keys.push_back({key.first, key.second});
      write_le_f64(out, values);
    }
    if (!out) throw DataError("cannot write " + (dir / blob).string());
    manifest["cues"].push_back({{"kind", cue_name(kind)}, {"dim", k.dim}, {"blob", blob}, {"rows", keys}});
  }
  std::ofstream(dir / "manifest") << manifest.dump() << '\n';
}

FeatureStore FeatureStore::load(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest");
  if (!in) throw DataError("cannot open feature store manifest in " + dir.string());
  FeatureStore store;
  try {
    const json manifest = json::parse(in);
    const auto format = manifest.at("format").get<std::string>();
    if (format != kStoreFormat)
      throw DataError("feature store format '" + format + "', expected '" + kStoreFormat + "'");
    for (const auto& c : manifest.at("cues")) {
      const CueKind kind = parse_cue(c.at("kind").get<std::string>());
      const auto dim = c.at("dim").get<std::size_t>();
      const auto blob = c.at("blob").get<std::string>();
      std::ifstream data(dir / blob, std::ios::binary);
      if (!data) throw DataError("cannot open feature blob " + blob);
      auto& k = store.kinds_[kind];
      k.dim = dim;
      for (const auto& key : c.at("rows")) {
        std::vector<double> values(dim);
        if (!read_le_f64(data, values))
          throw DataError("feature blob " + blob + " is shorter than its manifest");
        k.rows[{key.at(0).get<std::size_t>(), key.at(1).get<std::string>()}] = std::move(values);
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError("feature store manifest: " + std::string(e.what()));
  }
  return store;
}

}  // namespace fsq::cues
