// SPDX-License-Identifier: Apache-2.0
#include "fsq/harness.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "fsq/error.hpp"
#include "json.hpp"

namespace fsq::harness {

using nlohmann::json;

namespace {

constexpr Strategy kStrategyOrder[] = {Strategy::knn, Strategy::ft_logits, Strategy::ft_full,
                                       Strategy::maml, Strategy::a_maml};

}  // namespace

const char* strategy_name(Strategy s) {
  switch (s) {
    case Strategy::knn: return "knn";
    case Strategy::ft_logits: return "ft_logits";
    case Strategy::ft_full: return "ft_full";
    case Strategy::maml: return "maml";
    case Strategy::a_maml: return "a_maml";
  }
  return "?";
}

Strategy parse_strategy(std::string_view name) {
  for (Strategy s : kStrategyOrder)
    if (name == strategy_name(s)) return s;
  throw ConfigError("unknown strategy '" + std::string(name) +
                    "' (expected knn, ft_logits, ft_full, maml or a_maml)");
}

// ---------------------------------------------------------------------------
// Config

namespace {

// Strict reader over one JSON object: every key must be consumed.
class Fields {
 public:
  Fields(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + " must be an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    const json& v = j_.at(key);
    const std::string name = where(key);
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(name + " must be true or false");
      out = v.get<bool>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_unsigned()) throw ConfigError(name + " must be a non-negative integer");
      out = v.get<T>();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError(name + " must be a number");
      out = v.get<T>();
    } else {
      if (!v.is_string()) throw ConfigError(name + " must be a string");
      out = T(v.get<std::string>());
    }
  }

  template <typename F>
  void get_with(const char* key, F&& parse) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      parse(j_.at(key));
    } catch (const ConfigError& e) {
      throw ConfigError(where(key) + ": " + e.what());
    } catch (const LayoutError& e) {
      throw ConfigError(where(key) + ": " + e.what());
    }
  }

  std::optional<Fields> child(const char* key) {
    seen_.insert(key);
    if (!j_.contains(key)) return std::nullopt;
    return Fields(j_.at(key), path_.empty() ? key : path_ + "." + key);
  }

  void finish() const {
    for (const auto& [key, value] : j_.items())
      if (!seen_.count(key)) throw ConfigError("unknown field " + where(key));
  }

 private:
  std::string where(const std::string& key = "") const {
    if (key.empty()) return path_.empty() ? "config" : "'" + path_ + "'";
    return "'" + (path_.empty() ? key : path_ + "." + key) + "'";
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

std::string string_of(const json& v) {
  if (!v.is_string()) throw ConfigError("must be a string");
  return v.get<std::string>();
}

void read_adam(Fields& f, transfer::AdamConfig& a) {
  f.get("lr", a.lr);
  f.get("beta1", a.beta1);
  f.get("beta2", a.beta2);
  f.get("eps", a.eps);
}

}  // namespace

ExperimentConfig parse_config(std::string_view json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  ExperimentConfig c;
  Fields root(j, "");
  root.get("seed", c.seed);
  root.get_with("strategy", [&](const json& v) { c.strategy = parse_strategy(string_of(v)); });
  root.get("output", c.output);
  root.get("dataset", c.dataset);
  root.get_with("features", [&](const json& v) {
    if (!v.is_array()) throw ConfigError("must be a list of cue names");
    c.features.clear();
    for (const auto& k : v) c.features.push_back(parse_cue(string_of(k)));
  });
  if (auto m = root.child("model")) {
    m->get("embed_dim", c.model.embed_dim);
    m->get("gru_hidden", c.model.gru_hidden);
    m->get("attention_hidden", c.model.attention_hidden);
    m->get("attention_heads", c.model.attention_heads);
    m->get("head_hidden", c.model.head_hidden);
    m->finish();
  }
  if (auto s = root.child("synthetic")) {
    auto& y = c.synthetic;
    s->get("base_classes", y.base_classes);
    s->get("novel_classes", y.novel_classes);
    s->get("samples_per_class", y.samples_per_class);
    s->get("dim", y.dim);
    s->get("min_frames", y.min_frames);
    s->get("max_frames", y.max_frames);
    s->get("prototype_scale", y.prototype_scale);
    s->get("noise_scale", y.noise_scale);
    s->get("warp_scale", y.warp_scale);
    s->get("knots", y.knots);
    s->get("seed", y.seed);
    s->finish();
  }
  if (auto b = root.child("base_training")) {
    b->get("epochs", c.base_training.epochs);
    b->get("batch_size", c.base_training.batch_size);
    read_adam(*b, c.base_training.adam);
    b->finish();
  }
  if (auto e = root.child("evaluation")) {
    e->get_with("mode", [&](const json& v) {
      const auto s = string_of(v);
      if (s == "protocol") c.evaluation = EvalMode::protocol;
      else if (s == "episodes") c.evaluation = EvalMode::episodes;
      else throw ConfigError("unknown mode '" + s + "' (expected protocol or episodes)");
    });
    e->get("tasks", c.eval_tasks);
    e->finish();
  }
  if (auto e = root.child("episode")) {
    e->get("n_way", c.episode.n_way);
    e->get("k_shot", c.episode.k_shot);
    e->get("q_query", c.episode.q_query);
    e->finish();
  }
  if (auto k = root.child("knn")) {
    k->get("L", c.knn.L);
    k->get("K", c.knn.K);
    k->get("repeats", c.knn.repeats);
    k->get_with("metric", [&](const json& v) { c.knn.metric = transfer::parse_metric(string_of(v)); });
    k->finish();
  }
  if (auto f = root.child("fine_tune")) {
    f->get("L", c.fine_tune.L);
    f->get("repeats", c.fine_tune.repeats);
    f->get("steps", c.fine_tune.fine_tune.steps);
    read_adam(*f, c.fine_tune.fine_tune.adam);
    f->finish();
  }
  if (auto m = root.child("meta")) {
    m->get("meta_batch", c.meta.meta_batch);
    m->get("inner_steps", c.meta.inner_steps);
    m->get("inner_lr", c.meta.inner_lr);
    m->get("outer_lr", c.meta.outer_lr);
    m->get("meta_steps", c.meta.meta_steps);
    m->get("second_order", c.meta.second_order);
    m->get("from_base", c.meta_from_base);
    m->finish();
  }
  root.finish();
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::stringstream text;
  text << in.rdbuf();
  return parse_config(text.str());
}

std::string dump_config(const ExperimentConfig& c) {
  json features = json::array();
  for (auto k : c.features) features.push_back(cue_name(k));
  const auto& y = c.synthetic;
  json j = {
      {"seed", c.seed},
      {"strategy", strategy_name(c.strategy)},
      {"output", c.output.string()},
      {"dataset", c.dataset.string()},
      {"features", features},
      {"model",
       {{"embed_dim", c.model.embed_dim},
        {"gru_hidden", c.model.gru_hidden},
        {"attention_hidden", c.model.attention_hidden},
        {"attention_heads", c.model.attention_heads},
        {"head_hidden", c.model.head_hidden}}},
      {"synthetic",
       {{"base_classes", y.base_classes},
        {"novel_classes", y.novel_classes},
        {"samples_per_class", y.samples_per_class},
        {"dim", y.dim},
        {"min_frames", y.min_frames},
        {"max_frames", y.max_frames},
        {"prototype_scale", y.prototype_scale},
        {"noise_scale", y.noise_scale},
        {"warp_scale", y.warp_scale},
        {"knots", y.knots},
        {"seed", y.seed}}},
      {"base_training",
       {{"epochs", c.base_training.epochs},
        {"batch_size", c.base_training.batch_size},
        {"lr", c.base_training.adam.lr},
        {"beta1", c.base_training.adam.beta1},
        {"beta2", c.base_training.adam.beta2},
        {"eps", c.base_training.adam.eps}}},
      {"evaluation",
       {{"mode", c.evaluation == EvalMode::protocol ? "protocol" : "episodes"},
        {"tasks", c.eval_tasks}}},
      {"episode",
       {{"n_way", c.episode.n_way}, {"k_shot", c.episode.k_shot}, {"q_query", c.episode.q_query}}},
      {"knn",
       {{"L", c.knn.L},
        {"K", c.knn.K},
        {"repeats", c.knn.repeats},
        {"metric", transfer::metric_name(c.knn.metric)}}},
      {"fine_tune",
       {{"L", c.fine_tune.L},
        {"repeats", c.fine_tune.repeats},
        {"steps", c.fine_tune.fine_tune.steps},
        {"lr", c.fine_tune.fine_tune.adam.lr},
        {"beta1", c.fine_tune.fine_tune.adam.beta1},
        {"beta2", c.fine_tune.fine_tune.adam.beta2},
        {"eps", c.fine_tune.fine_tune.adam.eps}}},
      {"meta",
       {{"meta_batch", c.meta.meta_batch},
        {"inner_steps", c.meta.inner_steps},
        {"inner_lr", c.meta.inner_lr},
        {"outer_lr", c.meta.outer_lr},
        {"meta_steps", c.meta.meta_steps},
        {"second_order", c.meta.second_order},
        {"from_base", c.meta_from_base}}},
  };
  return j.dump(2);
}

void ExperimentConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw ConfigError("'" + field + "' " + why);
  };
  if (features.empty()) fail("features", "must list at least one cue");
  std::set<CueKind> seen;
  for (auto k : features)
    if (!seen.insert(k).second) fail("features", std::string("lists ") + cue_name(k) + " twice");
  model::ModelConfig probe = model;
  probe.input_dim = 1;
  probe.classes = 1;
  try {
    probe.validate();
  } catch (const ConfigError& e) {
    fail("model", e.what());
  }
  if (dataset.empty()) {
    try {
      synthetic.validate();
    } catch (const ConfigError& e) {
      fail("synthetic", e.what());
    }
  }
  try {
    episode.validate();
  } catch (const ConfigError& e) {
    fail("episode", e.what());
  }
  try {
    meta.validate();
  } catch (const ConfigError& e) {
    fail("meta", e.what());
  }
  if (base_training.epochs == 0) fail("base_training.epochs", "must be positive");
  if (base_training.batch_size == 0) fail("base_training.batch_size", "must be positive");
  if (eval_tasks == 0) fail("evaluation.tasks", "must be positive");
  if (knn.K == 0) fail("knn.K", "must be positive");
  if (knn.L == 0) fail("knn.L", "must be positive");
  if (fine_tune.L == 0) fail("fine_tune.L", "must be positive");
  const bool meta_strategy = strategy == Strategy::maml || strategy == Strategy::a_maml;
  if (meta_strategy && evaluation == EvalMode::protocol)
    fail("evaluation.mode", "must be episodes for meta-learning strategies");
}

std::string ExperimentConfig::feature_set() const {
  std::string out;
  for (auto k : features) out += (out.empty() ? "" : "+") + std::string(cue_name(k));
  return out;
}

// ---------------------------------------------------------------------------
// CSV and report

std::string csv_line(const ResultRow& r) {
  char buf[512];
  std::snprintf(buf, sizeof buf, "%s,%s,%zu,%zu,%zu,%zu,%zu,%.6f,%.6f,%llu", r.strategy.c_str(),
                r.feature_set.c_str(), r.n_way, r.k_shot, r.L, r.K, r.repeats, r.mean_acc,
                r.std_acc, static_cast<unsigned long long>(r.seed));
  return buf;
}

void write_csv(std::ostream& out, const std::vector<ResultRow>& rows) {
  out << kCsvHeader << '\n';
  for (const auto& r : rows) out << csv_line(r) << '\n';
}

namespace {

std::vector<std::string> split_commas(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::uint64_t to_uint(const std::string& s, const std::string& where) {
  std::size_t used = 0;
  unsigned long long v = 0;
  try {
    v = std::stoull(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (s.empty() || used != s.size() || s[0] == '-')
    throw DataError(where + ": '" + s + "' is not a non-negative integer");
  return v;
}

double to_double(const std::string& s, const std::string& where) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size() || !std::isfinite(v))
    throw DataError(where + ": '" + s + "' is not a number");
  return v;
}

}  // namespace

std::vector<ResultRow> read_csv(std::istream& in, const std::string& source) {
  std::string line;
  if (!std::getline(in, line)) throw DataError(source + ": empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kCsvHeader)
    throw DataError(source + ": columns '" + line + "' differ from '" + kCsvHeader + "'");
  std::vector<ResultRow> rows;
  std::size_t n = 1;
  while (std::getline(in, line)) {
    ++n;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::string where = source + ":" + std::to_string(n);
    const auto f = split_commas(line);
    if (f.size() != 10)
      throw DataError(where + ": expected 10 fields, found " + std::to_string(f.size()));
    ResultRow r;
    r.strategy = f[0];
    parse_strategy(r.strategy);
    r.feature_set = f[1];
    r.n_way = to_uint(f[2], where);
    r.k_shot = to_uint(f[3], where);
    r.L = to_uint(f[4], where);
    r.K = to_uint(f[5], where);
    r.repeats = to_uint(f[6], where);
    r.mean_acc = to_double(f[7], where);
    r.std_acc = to_double(f[8], where);
    r.seed = to_uint(f[9], where);
    if (r.mean_acc < 0.0 || r.mean_acc > 1.0 || r.std_acc < 0.0)
      throw DataError(where + ": accuracy out of range");
    rows.push_back(std::move(r));
  }
  return rows;
}

std::vector<ResultRow> load_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  return read_csv(in, path.string());
}

Report make_report(const std::vector<ResultRow>& rows) {
  if (rows.empty()) throw DataError("report needs at least one result row");
  struct Cell {
    std::vector<double> means;
    double single_std = 0.0;
    const ResultRow* first = nullptr;
  };
  std::map<std::string, std::map<Strategy, Cell>> table;
  std::set<Strategy> used;
  for (const auto& r : rows) {
    const Strategy s = parse_strategy(r.strategy);
    auto& cell = table[r.feature_set][s];
    if (cell.first && (cell.first->n_way != r.n_way || cell.first->k_shot != r.k_shot ||
                       cell.first->L != r.L || cell.first->K != r.K ||
                       cell.first->repeats != r.repeats))
      throw DataError("rows for " + r.strategy + " / " + r.feature_set +
                      " disagree on n_way, k_shot, L, K or repeats");
    if (!cell.first) cell.first = &r;
    cell.means.push_back(r.mean_acc);
    cell.single_std = r.std_acc;
    used.insert(s);
  }
  std::vector<Strategy> cols;
  for (Strategy s : kStrategyOrder)
    if (used.count(s)) cols.push_back(s);

  auto stats = [](const Cell& c) {
    const double n = static_cast<double>(c.means.size());
    double mean = 0.0;
    for (double m : c.means) mean += m;
    mean /= n;
    if (c.means.size() == 1) return std::pair{mean, c.single_std};
    double var = 0.0;
    for (double m : c.means) var += (m - mean) * (m - mean);
    return std::pair{mean, std::sqrt(var / n)};
  };

  std::vector<std::vector<std::string>> text_rows;
  std::vector<std::string> header = {"feature_set"};
  for (Strategy s : cols) header.push_back(strategy_name(s));
  text_rows.push_back(header);
  std::ostringstream csv;
  csv << "feature_set,strategy,runs,mean_acc,std_acc,best\n";
  for (const auto& [features, cells] : table) {
    double best = -1.0;
    for (const auto& [s, c] : cells) best = std::max(best, stats(c).first);
    std::vector<std::string> line = {features};
    for (Strategy s : cols) {
      const auto it = cells.find(s);
      if (it == cells.end()) {
        line.push_back("-");
        continue;
      }
      const auto [mean, sd] = stats(it->second);
      const bool top = mean == best;
      char buf[96];
      std::snprintf(buf, sizeof buf, "%.4f±%.4f%s", mean, sd, top ? "*" : "");
      std::string cell = buf;
      if (it->second.means.size() > 1) cell += " (n=" + std::to_string(it->second.means.size()) + ")";
      line.push_back(cell);
      std::snprintf(buf, sizeof buf, "%.6f,%.6f", mean, sd);
      csv << features << ',' << strategy_name(s) << ',' << it->second.means.size() << ',' << buf
          << ',' << (top ? 1 : 0) << '\n';
    }
    text_rows.push_back(line);
  }
  // Column widths in code points; "±" is two bytes.
  auto width = [](const std::string& s) {
    std::size_t w = 0;
    for (unsigned char ch : s) w += (ch & 0xC0) != 0x80;
    return w;
  };
  std::vector<std::size_t> widths(header.size(), 0);
  for (const auto& r : text_rows)
    for (std::size_t i = 0; i < r.size(); ++i) widths[i] = std::max(widths[i], width(r[i]));
  std::ostringstream text;
  for (const auto& r : text_rows) {
    for (std::size_t i = 0; i < r.size(); ++i) {
      text << r[i];
      if (i + 1 < r.size()) text << std::string(widths[i] - width(r[i]) + 2, ' ');
    }
    text << '\n';
  }
  return {text.str(), csv.str()};
}

// ---------------------------------------------------------------------------
// Pipeline

data::Dataset select_features(const data::Dataset& dataset, const std::vector<CueKind>& kinds) {
  const Layout layout = dataset.layout();
  if (dataset.sequences.empty()) return dataset;
  std::vector<std::pair<std::size_t, std::size_t>> spans;
  Layout kept;
  for (CueKind k : kinds) {
    std::size_t offset = 0;
    bool found = false;
    for (const auto& b : layout) {
      if (b.kind == k) {
        spans.emplace_back(offset, b.dim);
        found = true;
      }
      offset += b.dim;
    }
    if (!found)
      throw LayoutError(std::string("dataset has no ") + cue_name(k) + " block (layout " +
                        layout_string(layout) + ")");
  }
  // Keep dataset order regardless of the order the cues were listed in.
  std::vector<std::size_t> order(spans.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return spans[a].first < spans[b].first; });
  std::size_t width = 0;
  for (auto i : order) {
    kept.push_back({kinds[i], spans[i].second});
    width += spans[i].second;
  }
  if (kept == layout) return dataset;
  data::Dataset out{dataset.classes, {}};
  for (const auto& s : dataset.sequences) {
    std::vector<double> v;
    v.reserve(s.frames() * width);
    for (std::size_t t = 0; t < s.frames(); ++t)
      for (auto i : order)
        for (std::size_t d = 0; d < spans[i].second; ++d) v.push_back(s.data.at(t, spans[i].first + d));
    out.sequences.push_back({s.id, s.label, kept, Tensor::matrix(s.frames(), width, std::move(v))});
  }
  return out;
}

data::Dataset load_dataset(const ExperimentConfig& config) {
  data::Dataset ds = config.dataset.empty() ? data::generate_synthetic(config.synthetic)
                                            : data::load_dataset(config.dataset);
  ds.validate();
  return select_features(ds, config.features);
}

model::ModelConfig model_config(const ExperimentConfig& config, std::size_t input_dim,
                                std::size_t classes) {
  model::ModelConfig m = config.model;
  m.input_dim = input_dim;
  m.classes = classes;
  m.validate();
  return m;
}

namespace {

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

ResultRow row_for(const ExperimentConfig& c, const transfer::Summary& s) {
  ResultRow r;
  r.strategy = strategy_name(c.strategy);
  r.feature_set = c.feature_set();
  r.mean_acc = s.mean;
  r.std_acc = s.std;
  r.seed = c.seed;
  return r;
}

void episode_shape(const ExperimentConfig& c, ResultRow& r) {
  r.n_way = c.episode.n_way;
  r.k_shot = c.episode.k_shot;
  r.L = c.episode.k_shot;
  r.repeats = c.eval_tasks;
}

// Fixed per-run seed for fresh output layers; distinct from the data and
// training streams.
std::uint64_t output_seed(const ExperimentConfig& c) { return c.seed ^ 0x6f7574707574ull; }

}  // namespace

model::Params train_base(const ExperimentConfig& config, const data::Dataset& dataset) {
  const auto base = dataset.subset(data::Split::base);
  const auto start = std::chrono::steady_clock::now();
  model::Params p = model::init_params(
      model_config(config, layout_dim(dataset.layout()), base.classes.size()), config.seed);
  transfer::train_classifier(p, base, config.base_training, config.seed,
                             [](std::size_t epoch, double loss) {
                               spdlog::debug("base epoch {} loss {:.6f}", epoch, loss);
                             });
  spdlog::info("base training: {} classes, {} epochs, {:.1f}s", base.classes.size(),
               config.base_training.epochs, seconds_since(start));
  return p;
}

ResultRow eval_knn(const ExperimentConfig& config, const model::Params& base,
                   const data::Dataset& dataset) {
  const auto novel = dataset.subset(data::Split::novel);
  const auto start = std::chrono::steady_clock::now();
  ResultRow r;
  if (config.evaluation == EvalMode::protocol) {
    r = row_for(config, transfer::run_knn_protocol(base, novel, config.knn, config.seed));
    r.n_way = novel.classes.size();
    r.k_shot = r.L = config.knn.L;
    r.repeats = config.knn.repeats;
  } else {
    const std::size_t K = config.knn.K;
    const auto metric = config.knn.metric;
    const auto s = transfer::evaluate_episodes(
        base, novel, config.episode, config.eval_tasks, config.seed,
        [&](const model::Params& p, const data::Episode& e) {
          const auto sp = model::pointers(e.support);
          const auto qp = model::pointers(e.query);
          const Tensor support = model::features(p, sp);
          const Tensor query = model::features(p, qp);
          const auto labels = model::labels_of(sp);
          const std::size_t k = std::min(K, labels.size());
          std::size_t correct = 0;
          for (std::size_t i = 0; i < qp.size(); ++i) {
            const std::span<const double> row(query.ptr() + i * query.cols(), query.cols());
            correct += transfer::knn_classify(row, support, labels, k, metric) == qp[i]->label;
          }
          return static_cast<double>(correct) / static_cast<double>(qp.size());
        });
    r = row_for(config, s);
    episode_shape(config, r);
  }
  r.K = config.knn.K;
  r.wall_time = seconds_since(start);
  return r;
}

ResultRow eval_fine_tune(const ExperimentConfig& config, const model::Params& base,
                         const data::Dataset& dataset) {
  const auto novel = dataset.subset(data::Split::novel);
  const auto start = std::chrono::steady_clock::now();
  auto protocol = config.fine_tune;
  protocol.fine_tune.mode = config.strategy == Strategy::ft_full ? transfer::FineTuneMode::full
                                                                 : transfer::FineTuneMode::logits_only;
  ResultRow r;
  if (config.evaluation == EvalMode::protocol) {
    r = row_for(config, transfer::run_finetune_protocol(base, novel, protocol, config.seed));
    r.n_way = novel.classes.size();
    r.k_shot = r.L = protocol.L;
    r.repeats = protocol.repeats;
  } else {
    const model::Params start_params =
        model::with_new_output(base, config.episode.n_way, output_seed(config));
    const auto s = transfer::evaluate_episodes(
        start_params, novel, config.episode, config.eval_tasks, config.seed,
        [&](const model::Params& p, const data::Episode& e) {
          const auto tuned = transfer::fine_tune(p, e.support, protocol.fine_tune);
          const auto qp = model::pointers(e.query);
          return transfer::accuracy(model::logits(tuned.params, qp), model::labels_of(qp));
        });
    r = row_for(config, s);
    episode_shape(config, r);
  }
  r.wall_time = seconds_since(start);
  return r;
}

namespace {

transfer::MetaConfig meta_config(const ExperimentConfig& config) {
  transfer::MetaConfig m = config.meta;
  m.partition = config.strategy == Strategy::maml ? transfer::AdaptPartition::all_parameters
                                                  : transfer::AdaptPartition::attention_and_head;
  return m;
}

}  // namespace

model::Params meta_train(const ExperimentConfig& config, const std::optional<model::Params>& start,
                         const data::Dataset& dataset) {
  const auto base = dataset.subset(data::Split::base);
  const std::size_t n = config.episode.n_way;
  const model::Params init =
      start ? model::with_new_output(*start, n, output_seed(config))
            : model::init_params(model_config(config, layout_dim(dataset.layout()), n), config.seed);
  const auto t0 = std::chrono::steady_clock::now();
  const std::size_t every = std::max<std::size_t>(1, config.meta.meta_steps / 20);
  auto result = transfer::meta_train(
      init, base, config.episode, meta_config(config), config.seed,
      [&](std::size_t step, double loss) {
        if ((step + 1) % every == 0)
          spdlog::info("meta step {}/{} loss {:.4f} ({:.0f}s)", step + 1, config.meta.meta_steps,
                       loss, seconds_since(t0));
        spdlog::debug("meta step {} loss {:.6f}", step, loss);
      });
  return std::move(result.params);
}

ResultRow meta_eval(const ExperimentConfig& config, const model::Params& params,
                    const data::Dataset& dataset) {
  const auto novel = dataset.subset(data::Split::novel);
  const auto start = std::chrono::steady_clock::now();
  ResultRow r = row_for(config, transfer::meta_eval(params, novel, config.episode,
                                                    meta_config(config), config.eval_tasks,
                                                    config.seed));
  episode_shape(config, r);
  r.wall_time = seconds_since(start);
  return r;
}

ResultRow run(const ExperimentConfig& config) {
  config.validate();
  std::filesystem::create_directories(config.output);
  std::ofstream(config.output / "config.json") << dump_config(config) << '\n';
  const auto dataset = load_dataset(config);
  spdlog::info("{} on {} ({} sequences, N={})", strategy_name(config.strategy),
               config.feature_set(), dataset.sequences.size(), layout_dim(dataset.layout()));
  const bool meta = config.strategy == Strategy::maml || config.strategy == Strategy::a_maml;
  std::optional<model::Params> base;
  if (!meta || config.meta_from_base) {
    base = train_base(config, dataset);
    model::save_checkpoint(*base, config.output / "base.ckpt");
  }
  ResultRow row;
  if (config.strategy == Strategy::knn) {
    row = eval_knn(config, *base, dataset);
  } else if (!meta) {
    row = eval_fine_tune(config, *base, dataset);
  } else {
    const auto trained = meta_train(config, base, dataset);
    model::save_checkpoint(trained, config.output / "meta.ckpt");
    row = meta_eval(config, trained, dataset);
  }
  std::ofstream out(config.output / "results.csv", std::ios::binary);
  write_csv(out, {row});
  if (!out) throw DataError("cannot write " + (config.output / "results.csv").string());
  spdlog::info("{} {}: {:.4f} ± {:.4f} ({:.1f}s)", row.strategy, row.feature_set, row.mean_acc,
               row.std_acc, row.wall_time);
  return row;
}

void init_logging() {
  const char* env = std::getenv("FSQ_LOG");
  const std::string level = env ? env : "info";
  if (level == "error") spdlog::set_level(spdlog::level::err);
  else if (level == "debug") spdlog::set_level(spdlog::level::debug);
  else spdlog::set_level(spdlog::level::info);
  spdlog::set_pattern("[%H:%M:%S] [%^%l%$] %v");
  if (level != "error" && level != "info" && level != "debug")
    spdlog::warn("FSQ_LOG='{}' not recognised; using info", level);
}

}  // namespace fsq::harness
