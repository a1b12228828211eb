// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include "fsq/autodiff.hpp"
#include "fsq/data.hpp"
#include "fsq/model.hpp"

namespace fsq::transfer {

using data::Dataset;
using data::Episode;
using data::EpisodeSpec;

// ---------------------------------------------------------------------------
// Optimizer

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam moments for a full parameter set; entries that never receive a
/// gradient are left alone.
class Adam {
 public:
  explicit Adam(AdamConfig config = {}) : config_(config) {}
  /// grads[i] may be an empty (rank-0 default) tensor to skip entry i.
  void step(model::Params& params, std::span<const Tensor> grads);
  std::size_t steps() const { return t_; }

 private:
  AdamConfig config_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Nearest neighbours

enum class Metric { euclidean, cosine };
const char* metric_name(Metric m);
Metric parse_metric(std::string_view name);

/// Majority label among the K nearest support rows. Ties between labels go
/// to the smallest summed distance, then the lowest label. Among equidistant
/// points the lower label is nearer, so the result does not depend on the
/// order of the support rows.
int knn_classify(std::span<const double> query, const Tensor& support,
                 std::span<const int> labels, std::size_t K, Metric metric = Metric::euclidean);

struct Summary {
  double mean = 0.0;
  double std = 0.0;
  std::vector<double> accuracies;
};
Summary summarize(std::vector<double> accuracies);

/// Counts of protocol work, for checking protocol conformance.
struct Counters {
  std::size_t knn_repeats = 0;
  std::size_t finetune_repeats = 0;
  std::size_t finetune_updates = 0;
  std::size_t meta_steps = 0;
};
Counters counters();
void reset_counters();

struct KnnProtocol {
  std::size_t L = 5;
  std::size_t K = 5;
  std::size_t repeats = 50;
  Metric metric = Metric::euclidean;
};

/// Per repeat: L support items per class, every other item classified by
/// knn on attention features. Returns the accuracy of each repeat.
Summary run_knn_protocol(const model::Params& params, const Dataset& test,
                         const KnnProtocol& protocol, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Fine-tuning

enum class FineTuneMode { logits_only, full };
const char* finetune_mode_name(FineTuneMode m);
FineTuneMode parse_finetune_mode(std::string_view name);

struct FineTuneConfig {
  FineTuneMode mode = FineTuneMode::logits_only;
  std::size_t steps = 10000;
  AdamConfig adam{1e-4};
};

struct FineTuneResult {
  model::Params params;
  std::size_t updates = 0;
  double final_loss = 0.0;
};

/// Full-batch cross-entropy descent on `support`. logits_only trains the
/// head partition and leaves every other tensor untouched.
FineTuneResult fine_tune(const model::Params& params, std::span<const FeatureSequence> support,
                         const FineTuneConfig& config);

struct FineTuneProtocol {
  std::size_t L = 5;
  std::size_t repeats = 15;
  FineTuneConfig fine_tune;
};

/// Like the knn protocol; a fresh output layer sized to the test classes is
/// fitted in each repeat and held-out items are scored by argmax.
Summary run_finetune_protocol(const model::Params& params, const Dataset& test,
                              const FineTuneProtocol& protocol, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Meta-learning

enum class AdaptPartition { attention_and_head, all_parameters };
const char* adapt_partition_name(AdaptPartition p);
AdaptPartition parse_adapt_partition(std::string_view name);
bool adapts(AdaptPartition scope, model::Partition p);

struct MetaConfig {
  std::size_t meta_batch = 10;
  std::size_t inner_steps = 5;
  double inner_lr = 0.001;
  double outer_lr = 0.001;
  std::size_t meta_steps = 2000;
  bool second_order = true;
  AdaptPartition partition = AdaptPartition::attention_and_head;
  void validate() const;
};

/// `steps` plain gradient steps on the support cross-entropy, applied to the
/// partition's leaves only. With `create_graph` the returned leaves stay
/// differentiable functions of `leaves`; otherwise each step's gradient is a
/// constant. Frozen entries are returned unchanged.
std::vector<ad::Var> inner_adapt(const model::ModelConfig& config, std::span<const ad::Var> leaves,
                                 std::span<const FeatureSequence* const> support,
                                 AdaptPartition partition, std::size_t steps, double lr,
                                 bool create_graph);

/// Value-level adaptation.
model::Params inner_adapt(const model::Params& params, std::span<const FeatureSequence> support,
                          AdaptPartition partition, std::size_t steps, double lr);

struct MetaGradient {
  /// Mean over tasks of the query loss at the adapted parameters.
  double loss = 0.0;
  std::vector<double> task_losses;
  /// d loss / d params, storage order.
  std::vector<Tensor> grads;
};

/// Tasks run concurrently; their gradients are summed in task order.
MetaGradient meta_gradient(const model::Params& params, std::span<const Episode> tasks,
                           const MetaConfig& config);

/// Scalar meta-loss of the complete procedure, without gradients.
double meta_loss(const model::Params& params, std::span<const Episode> tasks,
                 const MetaConfig& config);

/// One Adam update of `params` from the meta-gradient; returns the meta-loss.
double meta_step(model::Params& params, std::span<const Episode> tasks, const MetaConfig& config,
                 Adam& optimizer);

/// Episode `task` of meta step `step`, sampled from its own RNG stream.
Episode sample_task(const Dataset& dataset, const EpisodeSpec& spec, std::uint64_t seed,
                    std::uint64_t step, std::uint64_t task);

struct MetaTrainResult {
  model::Params params;
  std::vector<double> losses;
};

using Progress = std::function<void(std::size_t step, double loss)>;

MetaTrainResult meta_train(const model::Params& params, const Dataset& dataset,
                           const EpisodeSpec& spec, const MetaConfig& config, std::uint64_t seed,
                           const Progress& progress = {});

/// Query accuracy of each of `n_tasks` episodes under `score`, which gets
/// the model and one episode. Episodes are drawn from per-task RNG streams
/// and scored concurrently.
using EpisodeScore = std::function<double(const model::Params&, const Episode&)>;
Summary evaluate_episodes(const model::Params& params, const Dataset& dataset,
                          const EpisodeSpec& spec, std::size_t n_tasks, std::uint64_t seed,
                          const EpisodeScore& score);

/// inner_adapt on the support set, then argmax accuracy on the query set.
double adapted_accuracy(const model::Params& params, const Episode& episode,
                        const MetaConfig& config);

Summary meta_eval(const model::Params& params, const Dataset& dataset, const EpisodeSpec& spec,
                  const MetaConfig& config, std::size_t n_tasks, std::uint64_t seed);

/// Share of rows whose argmax equals the label.
double accuracy(const Tensor& logits, std::span<const int> labels);

// ---------------------------------------------------------------------------
// Base training

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 16;
  AdamConfig adam{1e-3};
};

/// Supervised cross-entropy training over same-length batches. Labels must
/// be in [0, classes). Returns the mean loss of each epoch.
std::vector<double> train_classifier(model::Params& params, const Dataset& dataset,
                                     const TrainConfig& config, std::uint64_t seed,
                                     const Progress& progress = {});

}  // namespace fsq::transfer
