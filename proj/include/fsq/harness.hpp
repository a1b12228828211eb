// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "fsq/data.hpp"
#include "fsq/model.hpp"
#include "fsq/transfer.hpp"

namespace fsq::harness {

enum class Strategy { knn, ft_logits, ft_full, maml, a_maml };
const char* strategy_name(Strategy s);
Strategy parse_strategy(std::string_view name);

/// `protocol` uses the whole novel split with L support items per class;
/// `episodes` scores n-way k-shot episodes drawn from it.
enum class EvalMode { protocol, episodes };

struct ExperimentConfig {
  std::uint64_t seed = 1;
  Strategy strategy = Strategy::a_maml;
  model::ModelConfig model;
  /// Cue blocks kept from the dataset, in dataset order.
  std::vector<CueKind> features = {CueKind::hand, CueKind::obj, CueKind::flow, CueKind::grasp};

  /// Saved dataset directory; empty means generate from `synthetic`.
  std::filesystem::path dataset;
  data::SyntheticSpec synthetic;

  transfer::TrainConfig base_training;
  EvalMode evaluation = EvalMode::episodes;
  data::EpisodeSpec episode;
  std::size_t eval_tasks = 100;
  transfer::KnnProtocol knn;
  transfer::FineTuneProtocol fine_tune;
  transfer::MetaConfig meta;
  /// Meta-learning starts from the base-trained encoder (true) or from a
  /// fresh initialization.
  bool meta_from_base = true;

  std::filesystem::path output = "results";

  /// Throws ConfigError naming the offending field.
  void validate() const;
  std::string feature_set() const;
};

/// Unknown keys and type mismatches are errors that name the field.
ExperimentConfig parse_config(std::string_view json_text);
ExperimentConfig load_config(const std::filesystem::path& path);
std::string dump_config(const ExperimentConfig& config);

struct ResultRow {
  std::string strategy;
  std::string feature_set;
  std::size_t n_way = 0, k_shot = 0, L = 0, K = 0, repeats = 0;
  double mean_acc = 0.0, std_acc = 0.0;
  std::uint64_t seed = 0;
  /// Logged only; never written to CSV so output stays byte-reproducible.
  double wall_time = 0.0;
};

inline constexpr const char* kCsvHeader =
    "strategy,feature_set,n_way,k_shot,L,K,repeats,mean_acc,std_acc,seed";
std::string csv_line(const ResultRow& row);
void write_csv(std::ostream& out, const std::vector<ResultRow>& rows);
/// Throws DataError on a wrong header or malformed row.
std::vector<ResultRow> read_csv(std::istream& in, const std::string& source = "csv");
std::vector<ResultRow> load_csv(const std::filesystem::path& path);

struct Report {
  std::string text;
  std::string csv;
};

/// Feature sets as rows, strategies as columns (knn, ft, maml, a_maml order);
/// cells pooled over seeds as mean±std of the per-run means, best per row
/// marked with '*'.
Report make_report(const std::vector<ResultRow>& rows);

/// Loads or generates the dataset and keeps the configured cue blocks.
data::Dataset load_dataset(const ExperimentConfig& config);
/// Copy with only the listed cue blocks; throws LayoutError when one is
/// missing from the dataset.
data::Dataset select_features(const data::Dataset& dataset, const std::vector<CueKind>& kinds);

/// Model config with input width and class count taken from the data.
model::ModelConfig model_config(const ExperimentConfig& config, std::size_t input_dim,
                                std::size_t classes);

/// Supervised training on the base split.
model::Params train_base(const ExperimentConfig& config, const data::Dataset& dataset);

ResultRow eval_knn(const ExperimentConfig& config, const model::Params& base,
                   const data::Dataset& dataset);
ResultRow eval_fine_tune(const ExperimentConfig& config, const model::Params& base,
                         const data::Dataset& dataset);
/// Meta-trains on the base split from `start` (or a fresh init).
model::Params meta_train(const ExperimentConfig& config, const std::optional<model::Params>& start,
                         const data::Dataset& dataset);
ResultRow meta_eval(const ExperimentConfig& config, const model::Params& params,
                    const data::Dataset& dataset);

/// Whole pipeline for the configured strategy. Writes results.csv and the
/// checkpoints into config.output.
ResultRow run(const ExperimentConfig& config);

/// Reads FSQ_LOG (error, info, debug) and configures the global logger.
void init_logging();

}  // namespace fsq::harness
