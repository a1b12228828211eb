// SPDX-License-Identifier: Apache-2.0
#include "fsq/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <random>

#include "json.hpp"

#include "fsq/error.hpp"
#include "fsq/kernels.hpp"
#include "fsq/little_endian.hpp"

namespace fsq::model {
namespace {

using ad::Var;

constexpr const char* kGruFields[] = {"W_z", "W_r", "W_h", "U_z", "U_r", "U_h", "b_z", "b_r", "b_h"};

Partition partition_of(std::string_view name) {
  return parse_partition(name.substr(0, name.find('.')));
}

}  // namespace

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* field) {
    if (v == 0) throw ConfigError(std::string("model.") + field + " must be positive");
  };
  positive(input_dim, "input_dim");
  positive(classes, "classes");
  positive(embed_dim, "embed_dim");
  positive(gru_hidden, "gru_hidden");
  positive(attention_hidden, "attention_hidden");
  positive(attention_heads, "attention_heads");
  positive(head_hidden, "head_hidden");
}

const char* partition_name(Partition p) {
  switch (p) {
    case Partition::embedding: return "embedding";
    case Partition::gru_forward: return "gru_forward";
    case Partition::gru_backward: return "gru_backward";
    case Partition::attention: return "attention";
    case Partition::head: return "head";
  }
  return "?";
}

Partition parse_partition(std::string_view name) {
  for (Partition p : kAllPartitions)
    if (name == partition_name(p)) return p;
  throw ConfigError("unknown parameter partition '" + std::string(name) + "'");
}

std::vector<std::string> param_names() {
  std::vector<std::string> names = {"embedding.W", "embedding.b", "embedding.ln_scale",
                                    "embedding.ln_shift"};
  for (const char* dir : {"gru_forward", "gru_backward"})
    for (const char* f : kGruFields) names.push_back(std::string(dir) + "." + f);
  for (const char* n : {"attention.W_s1", "attention.W_s2", "head.W1", "head.b1", "head.W2",
                        "head.b2"})
    names.emplace_back(n);
  return names;
}

std::vector<Shape> param_shapes(const ModelConfig& c) {
  const std::size_t E = c.embed_dim, H = c.gru_hidden;
  std::vector<Shape> shapes = {{c.input_dim, E}, {1, E}, {1, E}, {1, E}};
  for (int dir = 0; dir < 2; ++dir) {
    for (int i = 0; i < 3; ++i) shapes.push_back({E, H});
    for (int i = 0; i < 3; ++i) shapes.push_back({H, H});
    for (int i = 0; i < 3; ++i) shapes.push_back({1, H});
  }
  shapes.push_back({c.attention_hidden, c.state_dim()});
  shapes.push_back({c.attention_heads, c.attention_hidden});
  shapes.push_back({c.feature_dim(), c.head_hidden});
  shapes.push_back({1, c.head_hidden});
  shapes.push_back({c.head_hidden, c.classes});
  shapes.push_back({1, c.classes});
  return shapes;
}

Params::Params(ModelConfig config, std::vector<Parameter> entries)
    : config_(config), entries_(std::move(entries)) {
  config_.validate();
  const auto names = param_names();
  const auto shapes = param_shapes(config_);
  if (entries_.size() != names.size())
    throw ShapeError("expected " + std::to_string(names.size()) + " parameters, got " +
                     std::to_string(entries_.size()));
  for (std::size_t i = 0; i < names.size(); ++i) {
    auto& e = entries_[i];
    if (e.name != names[i])
      throw ShapeError("parameter " + std::to_string(i) + " should be " + names[i] + ", got " +
                       e.name);
    e.partition = partition_of(e.name);
    if (e.value.shape() != shapes[i])
      throw ShapeError(e.name + " should have shape " + shape_string(shapes[i]) + ", got " +
                       shape_string(e.value.shape()));
  }
}

std::size_t Params::index(std::string_view name) const {
  for (std::size_t i = 0; i < entries_.size(); ++i)
    if (entries_[i].name == name) return i;
  throw ContractError("no parameter named '" + std::string(name) + "'");
}

void Params::set(std::size_t i, Tensor value) {
  if (value.shape() != entries_.at(i).value.shape())
    throw ShapeError(entries_[i].name + ": cannot replace " +
                     shape_string(entries_[i].value.shape()) + " with " +
                     shape_string(value.shape()));
  entries_[i].value = std::move(value);
}

std::size_t Params::scalar_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.value.size();
  return n;
}

bool Params::all_finite() const {
  return std::all_of(entries_.begin(), entries_.end(),
                     [](const Parameter& e) { return e.value.all_finite(); });
}

bool bitwise_equal(const Params& a, const Params& b) {
  if (!(a.config() == b.config()) || a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (!fsq::bitwise_equal(a.value(i), b.value(i))) return false;
  return true;
}

bool partition_bitwise_equal(const Params& a, const Params& b, Partition p) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i].partition == p && !fsq::bitwise_equal(a.value(i), b.value(i))) return false;
  return true;
}

namespace {

Tensor glorot(const Shape& shape, std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(shape[0] + shape[1]));
  std::uniform_real_distribution<double> u(-limit, limit);
  std::vector<double> v(shape_size(shape));
  for (auto& x : v) x = u(rng);
  return Tensor(shape, std::move(v));
}

Tensor init_entry(const std::string& name, const Shape& shape, std::mt19937_64& rng) {
  const std::string field = name.substr(name.find('.') + 1);
  if (field == "ln_scale") return Tensor::filled(shape, 1.0);
  if (field == "ln_shift" || field[0] == 'b') return Tensor::zeros(shape);
  return glorot(shape, rng);
}

}  // namespace

Params init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  const auto names = param_names();
  const auto shapes = param_shapes(config);
  std::vector<Parameter> entries;
  for (std::size_t i = 0; i < names.size(); ++i)
    entries.push_back({names[i], partition_of(names[i]), init_entry(names[i], shapes[i], rng)});
  return Params(config, std::move(entries));
}

Params with_new_output(const Params& params, std::size_t classes, std::uint64_t seed) {
  ModelConfig config = params.config();
  config.classes = classes;
  std::mt19937_64 rng(seed);
  std::vector<Parameter> entries(params.entries().begin(), params.entries().end());
  auto& W2 = entries[params.index("head.W2")];
  auto& b2 = entries[params.index("head.b2")];
  W2.value = glorot({config.head_hidden, classes}, rng);
  b2.value = Tensor::zeros({1, classes});
  return Params(config, std::move(entries));
}

void save_checkpoint(const Params& params, const std::filesystem::path& path) {
  const auto& c = params.config();
  nlohmann::json header = {
      {"format", "fsq-ckpt-v1"},
      {"config",
       {{"input_dim", c.input_dim},
        {"classes", c.classes},
        {"embed_dim", c.embed_dim},
        {"gru_hidden", c.gru_hidden},
        {"attention_hidden", c.attention_hidden},
        {"attention_heads", c.attention_heads},
        {"head_hidden", c.head_hidden}}},
      {"params", nlohmann::json::array()}};
  for (const auto& e : params.entries())
    header["params"].push_back(
        {{"name", e.name}, {"partition", partition_name(e.partition)}, {"shape", e.value.shape()}});

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write checkpoint " + path.string());
  out << header.dump() << '\n';
  for (const auto& e : params.entries()) write_le_f64(out, e.value.data());
  if (!out) throw DataError("failed writing checkpoint " + path.string());
}

Params load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  std::string line;
  std::getline(in, line);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("checkpoint " + path.string() + ": bad header: " + e.what());
  }
  if (header.value("format", "") != "fsq-ckpt-v1")
    throw DataError("checkpoint " + path.string() + ": unsupported format");
  ModelConfig c;
  try {
    const auto& jc = header.at("config");
    c.input_dim = jc.at("input_dim");
    c.classes = jc.at("classes");
    c.embed_dim = jc.at("embed_dim");
    c.gru_hidden = jc.at("gru_hidden");
    c.attention_hidden = jc.at("attention_hidden");
    c.attention_heads = jc.at("attention_heads");
    c.head_hidden = jc.at("head_hidden");
  } catch (const nlohmann::json::exception& e) {
    throw DataError("checkpoint " + path.string() + ": " + e.what());
  }
  std::vector<Parameter> entries;
  for (const auto& jp : header.at("params")) {
    const std::string name = jp.at("name");
    const Shape shape = jp.at("shape").get<Shape>();
    std::vector<double> values(shape_size(shape));
    if (!read_le_f64(in, values))
      throw DataError("checkpoint " + path.string() + ": truncated payload for " + name);
    entries.push_back({name, partition_of(name), Tensor(shape, std::move(values))});
  }
  if (in.peek() != std::char_traits<char>::eof())
    throw DataError("checkpoint " + path.string() + ": trailing bytes");
  return Params(c, std::move(entries));
}

bool all_trainable(Partition) { return true; }

std::vector<Var> bind(ad::Tape& tape, const Params& params, const Trainable& trainable) {
  std::vector<Var> vars;
  vars.reserve(params.size());
  for (const auto& e : params.entries())
    vars.push_back(trainable(e.partition) ? tape.variable(e.value) : tape.constant(e.value));
  return vars;
}

Weights Weights::from(const ModelConfig& config, std::span<const Var> v) {
  if (v.size() != 28) throw ContractError("Weights::from expects 28 leaves");
  Weights w;
  w.config = config;
  w.embed_W = v[0];
  w.embed_b = v[1];
  w.ln_scale = v[2];
  w.ln_shift = v[3];
  auto gru = [&](std::size_t o) {
    return GruWeights{v[o], v[o + 1], v[o + 2], v[o + 3], v[o + 4],
                      v[o + 5], v[o + 6], v[o + 7], v[o + 8]};
  };
  w.forward = gru(4);
  w.backward = gru(13);
  w.W_s1 = v[22];
  w.W_s2 = v[23];
  w.W1 = v[24];
  w.b1 = v[25];
  w.W2 = v[26];
  w.b2 = v[27];
  return w;
}

Var embed(const Weights& w, const Var& x) {
  if (x.shape().size() != 2 || x.shape()[1] != w.config.input_dim)
    throw ShapeError("embed: expected rows x " + std::to_string(w.config.input_dim) + " input, got " +
                     shape_string(x.shape()));
  return ad::layer_norm(ad::add(ad::matmul(x, w.embed_W), w.embed_b), w.ln_scale, w.ln_shift);
}

namespace {

// One direction over all frames; returns the per-frame states in frame order.
std::vector<Var> gru_direction(const GruWeights& g, std::span<const Var> steps,
                               std::size_t hidden, bool reverse) {
  const std::vector<Var> w_in = {g.W_z, g.W_r, g.W_h};
  const std::vector<Var> b_in = {g.b_z, g.b_r, g.b_h};
  const std::vector<Var> u_zr = {g.U_z, g.U_r};
  const Var W = ad::concat_cols(w_in);
  const Var b = ad::concat_cols(b_in);
  const Var U_zr = ad::concat_cols(u_zr);

  const std::size_t frames = steps.size();
  std::vector<Var> states(frames);
  Var h;
  for (std::size_t step = 0; step < frames; ++step) {
    const std::size_t t = reverse ? frames - 1 - step : step;
    const Var xp = ad::add(ad::matmul(steps[t], W), b);
    const Var x_zr = ad::slice_cols(xp, 0, 2 * hidden);
    const Var x_h = ad::slice_cols(xp, 2 * hidden, hidden);
    if (step == 0) {
      // Zero initial state: the recurrent terms vanish.
      const Var z = ad::sigmoid(ad::slice_cols(x_zr, 0, hidden));
      h = ad::mul(z, ad::tanh(x_h));
    } else {
      const Var zr = ad::sigmoid(ad::add(x_zr, ad::matmul(h, U_zr)));
      const Var z = ad::slice_cols(zr, 0, hidden);
      const Var r = ad::slice_cols(zr, hidden, hidden);
      const Var c = ad::tanh(ad::add(x_h, ad::matmul(ad::mul(r, h), g.U_h)));
      h = ad::add(h, ad::mul(z, ad::sub(c, h)));
    }
    states[t] = h;
  }
  return states;
}

}  // namespace

Var bigru(const Weights& w, std::span<const Var> steps) {
  if (steps.empty()) throw ShapeError("bigru: no frames");
  const std::size_t batch = steps[0].shape().empty() ? 0 : steps[0].shape()[0];
  for (const auto& x : steps)
    if (x.shape().size() != 2 || x.shape()[0] != batch || batch == 0 ||
        x.shape()[1] != w.config.embed_dim)
      throw ShapeError("bigru: expected " + std::to_string(batch) + " x " +
                       std::to_string(w.config.embed_dim) + " frames, got " +
                       shape_string(x.shape()));
  const std::size_t H = w.config.gru_hidden;
  const auto fwd = gru_direction(w.forward, steps, H, false);
  const auto bwd = gru_direction(w.backward, steps, H, true);
  std::vector<Var> rows(steps.size());
  for (std::size_t t = 0; t < steps.size(); ++t) {
    const Var pair[] = {fwd[t], bwd[t]};
    rows[t] = ad::concat_cols(pair);
  }
  return ad::concat_rows(rows);
}

Var bigru(const Weights& w, const Var& embedded, std::size_t frames, std::size_t batch) {
  if (frames == 0 || batch == 0 || embedded.shape().size() != 2 ||
      embedded.shape()[0] != frames * batch || embedded.shape()[1] != w.config.embed_dim)
    throw ShapeError("bigru: expected " + std::to_string(frames * batch) + " x " +
                     std::to_string(w.config.embed_dim) + " input, got " +
                     shape_string(embedded.shape()));
  std::vector<Var> steps(frames);
  for (std::size_t t = 0; t < frames; ++t)
    steps[t] = frames == 1 ? embedded : ad::slice_rows(embedded, t * batch, batch);
  return bigru(w, steps);
}

Attention attend(const Weights& w, const Var& states, std::size_t frames, std::size_t batch) {
  const std::size_t D = w.config.state_dim(), heads = w.config.attention_heads;
  if (states.shape().size() != 2 || states.shape()[0] != frames * batch || states.shape()[1] != D)
    throw ShapeError("attend: expected " + std::to_string(frames * batch) + " x " +
                     std::to_string(D) + " states, got " + shape_string(states.shape()));
  const Var hidden = ad::tanh(ad::matmul(states, w.W_s1, false, true));
  const Var scores = ad::matmul(hidden, w.W_s2, false, true);  // (frames*batch) x heads
  const Var A = ad::softmax_rows(ad::transpose(ad::reshape(scores, {frames, batch * heads})));

  // Sequence-major copy of the states so that each sequence is one block.
  Var blocks = states;
  if (batch > 1 && frames > 1) {
    std::vector<std::size_t> idx(frames * batch);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t t = 0; t < frames; ++t) idx[b * frames + t] = t * batch + b;
    blocks = ad::gather_rows(states, std::move(idx));
  }
  const Var E = ad::batched_matmul(A, blocks, batch);  // (batch*heads) x D
  return {A, ad::reshape(E, {batch, heads * D})};
}

Var classify(const Weights& w, const Var& features) {
  if (features.shape().size() != 2 || features.shape()[1] != w.config.feature_dim())
    throw ShapeError("classify: expected rows x " + std::to_string(w.config.feature_dim()) +
                     " features, got " + shape_string(features.shape()));
  const Var h = ad::tanh(ad::add(ad::matmul(features, w.W1), w.b1));
  return ad::add(ad::matmul(h, w.W2), w.b2);
}

std::vector<StateBatch> encode_states(const Weights& w, ad::Tape& tape,
                                      std::span<const FeatureSequence* const> seqs) {
  if (seqs.empty()) throw ContractError("encode_states: no sequences");
  std::map<std::size_t, std::vector<std::size_t>> by_length;
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    const auto& s = *seqs[i];
    if (s.data.rank() != 2 || s.dim() != w.config.input_dim)
      throw LayoutError("sequence '" + s.id + "' has " + std::to_string(s.dim()) +
                        " features per frame, model expects " +
                        std::to_string(w.config.input_dim));
    by_length[s.frames()].push_back(i);
  }

  std::vector<StateBatch> groups;
  for (auto& [frames, members] : by_length) {
    const std::size_t batch = members.size();
    const std::size_t N = w.config.input_dim;
    // Frames are embedded one time step at a time so the recurrence reads
    // its inputs without slicing a shared matrix.
    std::vector<Var> steps(frames);
    for (std::size_t t = 0; t < frames; ++t) {
      std::vector<double> x(batch * N);
      for (std::size_t b = 0; b < batch; ++b)
        std::copy_n(seqs[members[b]]->data.ptr() + t * N, N,
                    x.begin() + static_cast<std::ptrdiff_t>(b * N));
      steps[t] = embed(w, tape.constant(Tensor({batch, N}, std::move(x))));
    }
    groups.push_back({bigru(w, steps), frames, members});
  }
  return groups;
}

Var pool(const Weights& w, std::span<const StateBatch> groups, std::size_t count) {
  std::vector<Var> parts;
  std::vector<std::size_t> order(count);
  std::size_t row = 0;
  for (const auto& g : groups) {
    parts.push_back(attend(w, g.states, g.frames, g.members.size()).E);
    for (std::size_t m : g.members) order.at(m) = row++;
  }
  if (row != count) throw ContractError("pool: groups do not cover every sequence");
  if (parts.size() == 1) {
    bool identity = true;
    for (std::size_t i = 0; i < count; ++i) identity = identity && order[i] == i;
    if (identity) return parts[0];
  }
  return ad::gather_rows(ad::concat_rows(parts), std::move(order));
}

Var logits(const Weights& w, ad::Tape& tape, std::span<const FeatureSequence* const> seqs) {
  const auto groups = encode_states(w, tape, seqs);
  return classify(w, pool(w, groups, seqs.size()));
}

std::vector<int> labels_of(std::span<const FeatureSequence* const> seqs) {
  std::vector<int> labels;
  labels.reserve(seqs.size());
  for (const auto* s : seqs) labels.push_back(s->label);
  return labels;
}

std::vector<const FeatureSequence*> pointers(std::span<const FeatureSequence> seqs) {
  std::vector<const FeatureSequence*> out;
  out.reserve(seqs.size());
  for (const auto& s : seqs) out.push_back(&s);
  return out;
}

Tensor forward(const Params& params, const FeatureSequence& seq) {
  const FeatureSequence* one[] = {&seq};
  return logits(params, one);
}

Tensor features(const Params& params, std::span<const FeatureSequence* const> seqs) {
  ad::Tape tape;
  ad::NoGradGuard guard(tape);
  const Weights w = Weights::from(params.config(), bind(tape, params));
  return pool(w, encode_states(w, tape, seqs), seqs.size()).value();
}

Tensor logits(const Params& params, std::span<const FeatureSequence* const> seqs) {
  ad::Tape tape;
  ad::NoGradGuard guard(tape);
  const Weights w = Weights::from(params.config(), bind(tape, params));
  return logits(w, tape, seqs).value();
}

double loss(const Tensor& logits, int label) {
  if (logits.rank() != 2 || logits.rows() != 1)
    throw ShapeError("loss expects a single row of logits, got " + shape_string(logits.shape()));
  if (label < 0 || static_cast<std::size_t>(label) >= logits.cols())
    throw ContractError("loss: label " + std::to_string(label) + " out of range");
  const auto z = logits.data();
  const double m = *std::max_element(z.begin(), z.end());
  double s = 0.0;
  for (double v : z) s += std::exp(v - m);
  return -(z[static_cast<std::size_t>(label)] - m - std::log(s));
}

std::vector<int> argmax_rows(const Tensor& logits) {
  std::vector<int> out(logits.rows());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < logits.cols(); ++c)
      if (logits.at(r, c) > logits.at(r, best)) best = c;
    out[r] = static_cast<int>(best);
  }
  return out;
}

}  // namespace fsq::model
