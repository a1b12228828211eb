// SPDX-License-Identifier: Apache-2.0
#include "fsq/transfer.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <limits>
#include <map>
#include <numeric>
#include <random>

#include "fsq/error.hpp"

namespace fsq::transfer {

using model::Params;
using model::Partition;

namespace {

std::mt19937_64 stream(std::initializer_list<std::uint64_t> parts) {
  std::vector<std::uint32_t> words;
  for (auto p : parts) {
    words.push_back(static_cast<std::uint32_t>(p));
    words.push_back(static_cast<std::uint32_t>(p >> 32));
  }
  std::seed_seq seq(words.begin(), words.end());
  return std::mt19937_64(seq);
}

// Runs body(i) for i in [0, n) across OpenMP threads and rethrows the
// lowest-index exception afterwards.
template <typename F>
void parallel_for(std::size_t n, F&& body) {
  std::vector<std::exception_ptr> errors(n);
  const auto count = static_cast<std::ptrdiff_t>(n);
#pragma omp parallel for schedule(dynamic, 1)
  for (std::ptrdiff_t i = 0; i < count; ++i) {
    try {
      body(static_cast<std::size_t>(i));
    } catch (...) {
      errors[static_cast<std::size_t>(i)] = std::current_exception();
    }
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

struct AtomicCounters {
  std::atomic<std::size_t> knn_repeats{0}, finetune_repeats{0}, finetune_updates{0},
      meta_steps{0};
};

AtomicCounters& atomic_counters() {
  static AtomicCounters c;
  return c;
}

}  // namespace

// ---------------------------------------------------------------------------

void Adam::step(Params& params, std::span<const Tensor> grads) {
  if (grads.size() != params.size())
    throw ContractError("Adam: " + std::to_string(grads.size()) + " gradients for " +
                        std::to_string(params.size()) + " parameters");
  if (m_.empty()) {
    m_.resize(params.size());
    v_.resize(params.size());
  }
  ++t_;
  const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Tensor& g = grads[i];
    const Tensor& p = params.value(i);
    if (g.rank() == 0 && p.rank() != 0) continue;
    if (!g.same_shape(p))
      throw ShapeError("Adam: gradient for " + params[i].name + " has shape " +
                       shape_string(g.shape()));
    auto& m = m_[i];
    auto& v = v_[i];
    if (m.empty()) {
      m.assign(p.size(), 0.0);
      v.assign(p.size(), 0.0);
    }
    std::vector<double> out = p.to_vector();
    for (std::size_t k = 0; k < out.size(); ++k) {
      m[k] = config_.beta1 * m[k] + (1.0 - config_.beta1) * g[k];
      v[k] = config_.beta2 * v[k] + (1.0 - config_.beta2) * g[k] * g[k];
      out[k] -= config_.lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + config_.eps);
    }
    params.set(i, Tensor(p.shape(), std::move(out)));
  }
}

// ---------------------------------------------------------------------------

const char* metric_name(Metric m) { return m == Metric::euclidean ? "euclidean" : "cosine"; }

Metric parse_metric(std::string_view name) {
  if (name == "euclidean") return Metric::euclidean;
  if (name == "cosine") return Metric::cosine;
  throw ConfigError("unknown metric '" + std::string(name) + "'");
}

int knn_classify(std::span<const double> query, const Tensor& support,
                 std::span<const int> labels, std::size_t K, Metric metric) {
  const std::size_t n = labels.size();
  if (n == 0) throw ContractError("knn_classify: empty support set");
  if (support.rank() != 2 || support.rows() != n)
    throw ShapeError("knn_classify: support is " + shape_string(support.shape()) + " for " +
                     std::to_string(n) + " labels");
  if (query.size() != support.cols())
    throw ShapeError("knn_classify: query has " + std::to_string(query.size()) +
                     " features, support has " + std::to_string(support.cols()));
  if (K == 0 || K > n)
    throw ContractError("knn_classify: K=" + std::to_string(K) + " with " + std::to_string(n) +
                        " support items");
  const std::size_t d = query.size();
  double qq = 0.0;
  for (double v : query) qq += v * v;

  std::vector<std::pair<double, int>> dist(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double* p = support.ptr() + i * d;
    double s = 0.0;
    if (metric == Metric::euclidean) {
      for (std::size_t j = 0; j < d; ++j) s += (query[j] - p[j]) * (query[j] - p[j]);
      s = std::sqrt(s);
    } else {
      double dot = 0.0, pp = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        dot += query[j] * p[j];
        pp += p[j] * p[j];
      }
      s = (qq == 0.0 || pp == 0.0) ? 1.0 : 1.0 - dot / std::sqrt(qq * pp);
    }
    dist[i] = {s, labels[i]};
  }
  std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(K), dist.end());

  std::map<int, std::pair<std::size_t, double>> votes;
  for (std::size_t i = 0; i < K; ++i) {
    auto& [count, total] = votes[dist[i].second];
    ++count;
    total += dist[i].first;
  }
  int best = votes.begin()->first;
  auto best_vote = votes.begin()->second;
  for (const auto& [label, vote] : votes) {
    if (vote.first > best_vote.first ||
        (vote.first == best_vote.first && vote.second < best_vote.second)) {
      best = label;
      best_vote = vote;
    }
  }
  return best;
}

Summary summarize(std::vector<double> accuracies) {
  Summary s;
  s.accuracies = std::move(accuracies);
  if (s.accuracies.empty()) return s;
  const double n = static_cast<double>(s.accuracies.size());
  s.mean = std::accumulate(s.accuracies.begin(), s.accuracies.end(), 0.0) / n;
  double var = 0.0;
  for (double a : s.accuracies) var += (a - s.mean) * (a - s.mean);
  s.std = std::sqrt(var / n);
  return s;
}

Counters counters() {
  const auto& c = atomic_counters();
  return {c.knn_repeats.load(), c.finetune_repeats.load(), c.finetune_updates.load(),
          c.meta_steps.load()};
}

void reset_counters() {
  auto& c = atomic_counters();
  c.knn_repeats = 0;
  c.finetune_repeats = 0;
  c.finetune_updates = 0;
  c.meta_steps = 0;
}

namespace {

// Class groups of a test split after checking each has at least L items.
std::vector<std::pair<int, std::vector<std::size_t>>> protocol_groups(const Dataset& test,
                                                                      std::size_t L) {
  if (L == 0) throw ConfigError("L must be positive");
  auto groups = data::by_label(test);
  std::string short_classes;
  for (const auto& [label, members] : groups)
    if (members.size() < L)
      short_classes += (short_classes.empty() ? "" : ", ") + std::to_string(label) + " (" +
                       std::to_string(members.size()) + ")";
  if (!short_classes.empty())
    throw DataError("classes with fewer than L=" + std::to_string(L) +
                    " samples: " + short_classes);
  if (groups.size() < 2) throw DataError("protocol needs at least two test classes");
  return groups;
}

struct Draw {
  std::vector<std::size_t> support, query;
  std::vector<int> support_labels, query_labels;
};

// L items per class for support, the rest as queries; labels are class
// positions in `groups`.
Draw draw(const std::vector<std::pair<int, std::vector<std::size_t>>>& groups, std::size_t L,
          std::mt19937_64& rng) {
  Draw out;
  for (std::size_t c = 0; c < groups.size(); ++c) {
    auto members = groups[c].second;
    std::shuffle(members.begin(), members.end(), rng);
    for (std::size_t i = 0; i < members.size(); ++i) {
      (i < L ? out.support : out.query).push_back(members[i]);
      (i < L ? out.support_labels : out.query_labels).push_back(static_cast<int>(c));
    }
  }
  if (out.query.empty()) throw DataError("protocol draw left no query items");
  return out;
}

Tensor gather(const Tensor& rows, std::span<const std::size_t> idx) {
  const std::size_t d = rows.cols();
  std::vector<double> v(idx.size() * d);
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy_n(rows.ptr() + idx[i] * d, d, v.begin() + static_cast<std::ptrdiff_t>(i * d));
  return Tensor::matrix(idx.size(), d, std::move(v));
}

}  // namespace

Summary run_knn_protocol(const Params& params, const Dataset& test, const KnnProtocol& protocol,
                         std::uint64_t seed) {
  const auto groups = protocol_groups(test, protocol.L);
  if (protocol.K == 0 || protocol.K > protocol.L * groups.size())
    throw ConfigError("K must be in [1, L * classes]");
  const auto seqs = model::pointers(test.sequences);
  const Tensor feats = model::features(params, seqs);
  std::vector<double> acc;
  for (std::size_t r = 0; r < protocol.repeats; ++r) {
    auto rng = stream({seed, r});
    const Draw d = draw(groups, protocol.L, rng);
    const Tensor support = gather(feats, d.support);
    std::size_t correct = 0;
    for (std::size_t q = 0; q < d.query.size(); ++q) {
      const std::span<const double> row(feats.ptr() + d.query[q] * feats.cols(), feats.cols());
      correct += knn_classify(row, support, d.support_labels, protocol.K, protocol.metric) ==
                 d.query_labels[q];
    }
    acc.push_back(static_cast<double>(correct) / static_cast<double>(d.query.size()));
    ++atomic_counters().knn_repeats;
  }
  return summarize(std::move(acc));
}

// ---------------------------------------------------------------------------

const char* finetune_mode_name(FineTuneMode m) {
  return m == FineTuneMode::logits_only ? "logits_only" : "full";
}

FineTuneMode parse_finetune_mode(std::string_view name) {
  if (name == "logits_only") return FineTuneMode::logits_only;
  if (name == "full") return FineTuneMode::full;
  throw ConfigError("unknown fine-tune mode '" + std::string(name) + "'");
}

double accuracy(const Tensor& logits, std::span<const int> labels) {
  if (labels.empty()) throw ContractError("accuracy of an empty set");
  const auto pred = model::argmax_rows(logits);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) correct += pred[i] == labels[i];
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

namespace {

void check_finite(double loss, const std::string& what) {
  if (!std::isfinite(loss)) throw DivergenceError(what + " became " + std::to_string(loss));
}

}  // namespace

FineTuneResult fine_tune(const Params& params, std::span<const FeatureSequence> support,
                         const FineTuneConfig& config) {
  if (support.empty()) throw ContractError("fine_tune: empty support set");
  const auto seqs = model::pointers(support);
  const auto labels = model::labels_of(seqs);
  const auto& mc = params.config();
  FineTuneResult out{params, 0, 0.0};
  Adam adam(config.adam);
  const bool logits_only = config.mode == FineTuneMode::logits_only;
  const Tensor feats = logits_only ? model::features(params, seqs) : Tensor();
  const std::size_t first_head = params.index("head.W1");

  for (std::size_t step = 0; step < config.steps; ++step) {
    ad::Tape tape;
    std::vector<Tensor> grads(params.size());
    ad::Var loss;
    if (logits_only) {
      model::Weights w;
      w.config = mc;
      w.W1 = tape.variable(out.params.value(first_head));
      w.b1 = tape.variable(out.params.value(first_head + 1));
      w.W2 = tape.variable(out.params.value(first_head + 2));
      w.b2 = tape.variable(out.params.value(first_head + 3));
      loss = ad::cross_entropy(model::classify(w, tape.constant(feats)), labels);
      check_finite(loss.value().item(), "fine-tune loss at step " + std::to_string(step));
      const ad::Var wrt[] = {w.W1, w.b1, w.W2, w.b2};
      const auto g = tape.gradients(loss, wrt);
      for (std::size_t k = 0; k < 4; ++k) grads[first_head + k] = g[k].value();
    } else {
      const auto leaves = model::bind(tape, out.params);
      const auto w = model::Weights::from(mc, leaves);
      loss = ad::cross_entropy(model::logits(w, tape, seqs), labels);
      check_finite(loss.value().item(), "fine-tune loss at step " + std::to_string(step));
      const auto g = tape.gradients(loss, leaves);
      for (std::size_t k = 0; k < g.size(); ++k) grads[k] = g[k].value();
    }
    out.final_loss = loss.value().item();
    adam.step(out.params, grads);
    ++out.updates;
    ++atomic_counters().finetune_updates;
  }
  return out;
}

Summary run_finetune_protocol(const Params& params, const Dataset& test,
                              const FineTuneProtocol& protocol, std::uint64_t seed) {
  const auto groups = protocol_groups(test, protocol.L);
  std::vector<double> acc;
  for (std::size_t r = 0; r < protocol.repeats; ++r) {
    auto rng = stream({seed, r});
    const Draw d = draw(groups, protocol.L, rng);
    auto pick = [&](const std::vector<std::size_t>& idx, const std::vector<int>& labels) {
      std::vector<FeatureSequence> out;
      for (std::size_t i = 0; i < idx.size(); ++i) {
        out.push_back(test.sequences[idx[i]]);
        out.back().label = labels[i];
      }
      return out;
    };
    const auto support = pick(d.support, d.support_labels);
    const auto query = pick(d.query, d.query_labels);
    const Params start = model::with_new_output(params, groups.size(), rng());
    const auto tuned = fine_tune(start, support, protocol.fine_tune);
    const auto qp = model::pointers(query);
    acc.push_back(accuracy(model::logits(tuned.params, qp), d.query_labels));
    ++atomic_counters().finetune_repeats;
  }
  return summarize(std::move(acc));
}

// ---------------------------------------------------------------------------

const char* adapt_partition_name(AdaptPartition p) {
  return p == AdaptPartition::attention_and_head ? "attention_and_head" : "all_parameters";
}

AdaptPartition parse_adapt_partition(std::string_view name) {
  if (name == "attention_and_head") return AdaptPartition::attention_and_head;
  if (name == "all_parameters") return AdaptPartition::all_parameters;
  throw ConfigError("unknown adapt partition '" + std::string(name) + "'");
}

bool adapts(AdaptPartition scope, Partition p) {
  return scope == AdaptPartition::all_parameters || p == Partition::attention ||
         p == Partition::head;
}

void MetaConfig::validate() const {
  if (meta_batch == 0) throw ConfigError("meta_batch must be positive");
  if (!(inner_lr >= 0.0) || !std::isfinite(inner_lr))
    throw ConfigError("inner_lr must be finite and non-negative");
  if (!(outer_lr > 0.0) || !std::isfinite(outer_lr))
    throw ConfigError("outer_lr must be finite and positive");
}

namespace {

const std::vector<Partition>& partition_table() {
  static const std::vector<Partition> table = [] {
    std::vector<Partition> out;
    for (const auto& name : model::param_names())
      out.push_back(model::parse_partition(name.substr(0, name.find('.'))));
    return out;
  }();
  return table;
}

}  // namespace

std::vector<ad::Var> inner_adapt(const model::ModelConfig& config, std::span<const ad::Var> leaves,
                                 std::span<const FeatureSequence* const> support,
                                 AdaptPartition partition, std::size_t steps, double lr,
                                 bool create_graph) {
  const auto& table = partition_table();
  if (leaves.size() != table.size())
    throw ContractError("inner_adapt: expected " + std::to_string(table.size()) + " leaves");
  if (support.empty()) throw ContractError("inner_adapt: empty support set");
  std::vector<ad::Var> cur(leaves.begin(), leaves.end());
  if (steps == 0) return cur;
  auto& tape = cur.front().tape();
  const auto labels = model::labels_of(support);
  std::vector<std::size_t> adapted;
  for (std::size_t i = 0; i < table.size(); ++i)
    if (adapts(partition, table[i])) adapted.push_back(i);

  // With the encoder frozen the support states never change.
  const bool encoder_frozen = partition == AdaptPartition::attention_and_head;
  std::vector<model::StateBatch> frozen_states;
  if (encoder_frozen)
    frozen_states = model::encode_states(model::Weights::from(config, cur), tape, support);

  for (std::size_t step = 0; step < steps; ++step) {
    const auto w = model::Weights::from(config, cur);
    const auto states = encoder_frozen ? frozen_states : model::encode_states(w, tape, support);
    const auto loss =
        ad::cross_entropy(model::classify(w, model::pool(w, states, support.size())), labels);
    check_finite(loss.value().item(), "inner-loop loss at step " + std::to_string(step));
    std::vector<ad::Var> wrt;
    for (auto i : adapted) wrt.push_back(cur[i]);
    const auto grads = tape.gradients(loss, wrt, {create_graph});
    for (std::size_t k = 0; k < adapted.size(); ++k)
      cur[adapted[k]] = ad::sub(cur[adapted[k]], ad::scale(grads[k], lr));
  }
  return cur;
}

Params inner_adapt(const Params& params, std::span<const FeatureSequence> support,
                   AdaptPartition partition, std::size_t steps, double lr) {
  ad::Tape tape;
  const auto leaves = model::bind(tape, params, [&](Partition p) { return adapts(partition, p); });
  const auto seqs = model::pointers(support);
  const auto out = inner_adapt(params.config(), leaves, seqs, partition, steps, lr, false);
  Params adapted = params;
  for (std::size_t i = 0; i < params.size(); ++i)
    if (adapts(partition, params[i].partition)) adapted.set(i, out[i].value());
  return adapted;
}

namespace {

struct TaskResult {
  double loss = 0.0;
  std::vector<Tensor> grads;
};

TaskResult task_meta_loss(const Params& params, const Episode& task, const MetaConfig& config,
                          bool want_grads) {
  if (params.config().classes != task.classes.size())
    throw ContractError("model has " + std::to_string(params.config().classes) +
                        " outputs for a " + std::to_string(task.classes.size()) + "-way task");
  ad::Tape tape;
  const auto leaves = model::bind(tape, params);
  const auto support = model::pointers(task.support);
  const auto query = model::pointers(task.query);
  const auto adapted = inner_adapt(params.config(), leaves, support, config.partition,
                                   config.inner_steps, config.inner_lr,
                                   want_grads && config.second_order);
  const auto w = model::Weights::from(params.config(), adapted);
  const auto loss = ad::cross_entropy(model::logits(w, tape, query), model::labels_of(query));
  TaskResult out{loss.value().item(), {}};
  if (want_grads && std::isfinite(out.loss)) {
    const auto g = tape.gradients(loss, leaves);
    for (const auto& v : g) out.grads.push_back(v.value());
  }
  return out;
}

std::vector<TaskResult> run_tasks(const Params& params, std::span<const Episode> tasks,
                                  const MetaConfig& config, bool want_grads) {
  config.validate();
  if (tasks.empty()) throw ContractError("meta-batch has no tasks");
  std::vector<TaskResult> results(tasks.size());
  parallel_for(tasks.size(), [&](std::size_t t) {
    results[t] = task_meta_loss(params, tasks[t], config, want_grads);
  });
  std::string bad;
  for (std::size_t t = 0; t < results.size(); ++t)
    if (!std::isfinite(results[t].loss))
      bad += " task " + std::to_string(t) + " query loss " + std::to_string(results[t].loss) + ";";
  if (!bad.empty()) throw DivergenceError("non-finite meta-loss:" + bad);
  return results;
}

}  // namespace

MetaGradient meta_gradient(const Params& params, std::span<const Episode> tasks,
                           const MetaConfig& config) {
  const auto results = run_tasks(params, tasks, config, true);
  const double n = static_cast<double>(tasks.size());
  MetaGradient out;
  std::vector<std::vector<double>> sum(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) sum[i].assign(params.value(i).size(), 0.0);
  double total = 0.0;
  for (const auto& r : results) {
    total += r.loss;
    out.task_losses.push_back(r.loss);
    for (std::size_t i = 0; i < params.size(); ++i)
      for (std::size_t k = 0; k < sum[i].size(); ++k) sum[i][k] += r.grads[i][k];
  }
  out.loss = total / n;
  for (std::size_t i = 0; i < params.size(); ++i) {
    for (double& v : sum[i]) v /= n;
    out.grads.emplace_back(params.value(i).shape(), std::move(sum[i]));
  }
  return out;
}

double meta_loss(const Params& params, std::span<const Episode> tasks, const MetaConfig& config) {
  const auto results = run_tasks(params, tasks, config, false);
  double total = 0.0;
  for (const auto& r : results) total += r.loss;
  return total / static_cast<double>(tasks.size());
}

double meta_step(Params& params, std::span<const Episode> tasks, const MetaConfig& config,
                 Adam& optimizer) {
  const auto g = meta_gradient(params, tasks, config);
  optimizer.step(params, g.grads);
  ++atomic_counters().meta_steps;
  return g.loss;
}

Episode sample_task(const Dataset& dataset, const EpisodeSpec& spec, std::uint64_t seed,
                    std::uint64_t step, std::uint64_t task) {
  auto rng = stream({seed, step, task});
  return data::sample_episode(dataset, spec, rng);
}

MetaTrainResult meta_train(const Params& params, const Dataset& dataset, const EpisodeSpec& spec,
                           const MetaConfig& config, std::uint64_t seed,
                           const Progress& progress) {
  config.validate();
  spec.validate();
  if (params.config().classes != spec.n_way)
    throw ContractError("meta_train: model has " + std::to_string(params.config().classes) +
                        " outputs, episodes are " + std::to_string(spec.n_way) + "-way");
  sample_task(dataset, spec, seed, 0, 0);
  MetaTrainResult out{params, {}};
  Adam adam(AdamConfig{config.outer_lr});
  for (std::size_t step = 0; step < config.meta_steps; ++step) {
    std::vector<Episode> tasks(config.meta_batch);
    for (std::size_t t = 0; t < tasks.size(); ++t) tasks[t] = sample_task(dataset, spec, seed, step, t);
    out.losses.push_back(meta_step(out.params, tasks, config, adam));
    if (progress) progress(step, out.losses.back());
  }
  return out;
}

Summary evaluate_episodes(const Params& params, const Dataset& dataset, const EpisodeSpec& spec,
                          std::size_t n_tasks, std::uint64_t seed, const EpisodeScore& score) {
  spec.validate();
  // Evaluation streams are disjoint from every training step index.
  constexpr std::uint64_t kEvalStream = ~std::uint64_t{0};
  std::vector<double> acc(n_tasks);
  parallel_for(n_tasks, [&](std::size_t t) {
    acc[t] = score(params, sample_task(dataset, spec, seed, kEvalStream, t));
  });
  return summarize(std::move(acc));
}

double adapted_accuracy(const Params& params, const Episode& episode, const MetaConfig& config) {
  if (params.config().classes != episode.classes.size())
    throw ContractError("model has " + std::to_string(params.config().classes) +
                        " outputs for a " + std::to_string(episode.classes.size()) +
                        "-way episode");
  const Params adapted = inner_adapt(params, episode.support, config.partition,
                                     config.inner_steps, config.inner_lr);
  const auto query = model::pointers(episode.query);
  return accuracy(model::logits(adapted, query), model::labels_of(query));
}

Summary meta_eval(const Params& params, const Dataset& dataset, const EpisodeSpec& spec,
                  const MetaConfig& config, std::size_t n_tasks, std::uint64_t seed) {
  config.validate();
  return evaluate_episodes(params, dataset, spec, n_tasks, seed,
                           [&](const Params& p, const Episode& e) {
                             return adapted_accuracy(p, e, config);
                           });
}

// ---------------------------------------------------------------------------

std::vector<double> train_classifier(Params& params, const Dataset& dataset,
                                     const TrainConfig& config, std::uint64_t seed,
                                     const Progress& progress) {
  if (params.config().classes != dataset.classes.size())
    throw ContractError("model has " + std::to_string(params.config().classes) +
                        " outputs for " + std::to_string(dataset.classes.size()) + " classes");
  if (dataset.sequences.empty()) throw DataError("training set is empty");
  std::map<int, int> index;
  for (const auto& c : dataset.classes) index.emplace(c.id, static_cast<int>(index.size()));
  Adam adam(config.adam);
  std::vector<double> curve;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    auto rng = stream({seed, epoch});
    auto plan = data::bucket_batches(dataset, config.batch_size, rng(),
                                     std::numeric_limits<std::size_t>::max());
    std::shuffle(plan.batches.begin(), plan.batches.end(), rng);
    double total = 0.0;
    for (const auto& batch : plan.batches) {
      std::vector<const FeatureSequence*> seqs;
      std::vector<int> labels;
      for (auto i : batch) {
        seqs.push_back(&dataset.sequences[i]);
        labels.push_back(index.at(dataset.sequences[i].label));
      }
      ad::Tape tape;
      const auto leaves = model::bind(tape, params);
      const auto w = model::Weights::from(params.config(), leaves);
      const auto loss = ad::cross_entropy(model::logits(w, tape, seqs), labels);
      check_finite(loss.value().item(), "training loss in epoch " + std::to_string(epoch));
      const auto g = tape.gradients(loss, leaves);
      std::vector<Tensor> grads;
      for (const auto& v : g) grads.push_back(v.value());
      adam.step(params, grads);
      total += loss.value().item() * static_cast<double>(batch.size());
    }
    curve.push_back(total / static_cast<double>(dataset.sequences.size()));
    if (progress) progress(epoch, curve.back());
  }
  return curve;
}

}  // namespace fsq::transfer
