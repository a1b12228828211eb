// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fsq/autodiff.hpp"
#include "fsq/sequence.hpp"
#include "fsq/tensor.hpp"

/// Temporal classifier: per-frame embedding with layer normalization, a
/// bidirectional GRU, multi-head self-attention pooling over time and a
/// two-layer head.
///
/// Batches are time-major: row t * B + b of every per-frame matrix holds
/// frame t of sequence b. All sequences in a batch share one length.
namespace fsq::model {

struct ModelConfig {
  std::size_t input_dim = 16;
  std::size_t classes = 5;
  std::size_t embed_dim = 256;
  std::size_t gru_hidden = 128;
  std::size_t attention_hidden = 100;
  std::size_t attention_heads = 3;
  std::size_t head_hidden = 256;

  std::size_t state_dim() const { return 2 * gru_hidden; }
  /// Width of the flattened attention output fed to the head (and to KNN).
  std::size_t feature_dim() const { return attention_heads * state_dim(); }
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

enum class Partition { embedding, gru_forward, gru_backward, attention, head };

inline constexpr Partition kAllPartitions[] = {Partition::embedding, Partition::gru_forward,
                                               Partition::gru_backward, Partition::attention,
                                               Partition::head};

const char* partition_name(Partition p);
Partition parse_partition(std::string_view name);

struct Parameter {
  std::string name;  // "<partition>.<field>"
  Partition partition;
  Tensor value;
};

/// Named parameter store in a fixed canonical order (see `param_names`).
class Params {
 public:
  Params() = default;
  /// Checks names, order and shapes against `config`.
  Params(ModelConfig config, std::vector<Parameter> entries);

  const ModelConfig& config() const { return config_; }
  std::size_t size() const { return entries_.size(); }
  std::span<const Parameter> entries() const { return entries_; }
  const Parameter& operator[](std::size_t i) const { return entries_[i]; }
  const Tensor& value(std::size_t i) const { return entries_[i].value; }

  std::size_t index(std::string_view name) const;
  const Tensor& get(std::string_view name) const { return entries_[index(name)].value; }
  /// Replaces one tensor; the shape must not change.
  void set(std::size_t i, Tensor value);

  std::size_t scalar_count() const;
  bool all_finite() const;

 private:
  ModelConfig config_;
  std::vector<Parameter> entries_;
};

/// Canonical parameter names for a configuration, in storage order.
std::vector<std::string> param_names();
std::vector<Shape> param_shapes(const ModelConfig& config);

bool bitwise_equal(const Params& a, const Params& b);
bool partition_bitwise_equal(const Params& a, const Params& b, Partition p);

/// Glorot-uniform weights, zero biases and shifts, unit layer-norm scale.
Params init_params(const ModelConfig& config, std::uint64_t seed);

/// Copy with a freshly initialized output layer for `classes` outputs.
Params with_new_output(const Params& params, std::size_t classes, std::uint64_t seed);

// Checkpoint: one JSON header line, then little-endian f64 payloads in
// parameter order.
void save_checkpoint(const Params& params, const std::filesystem::path& path);
Params load_checkpoint(const std::filesystem::path& path);

using Trainable = std::function<bool(Partition)>;
bool all_trainable(Partition);

/// Leaves for every parameter: variables where `trainable` holds, constants
/// elsewhere. Returned in storage order.
std::vector<ad::Var> bind(ad::Tape& tape, const Params& params,
                          const Trainable& trainable = all_trainable);

struct GruWeights {
  ad::Var W_z, W_r, W_h, U_z, U_r, U_h, b_z, b_r, b_h;
};

/// Tape view of a parameter set, by role.
struct Weights {
  ModelConfig config;
  ad::Var embed_W, embed_b, ln_scale, ln_shift;
  GruWeights forward, backward;
  ad::Var W_s1, W_s2;
  ad::Var W1, b1, W2, b2;

  /// `vars` in storage order, as returned by `bind`.
  static Weights from(const ModelConfig& config, std::span<const ad::Var> vars);
};

/// rows x N -> rows x embed_dim.
ad::Var embed(const Weights& w, const ad::Var& x);

/// (frames * batch) x embed_dim -> (frames * batch) x 2H; each row is the
/// forward state followed by the backward state at that frame.
ad::Var bigru(const Weights& w, const ad::Var& embedded, std::size_t frames, std::size_t batch);
/// Same, from one batch x embed_dim input per frame.
ad::Var bigru(const Weights& w, std::span<const ad::Var> steps);

struct Attention {
  /// (batch * heads) x frames; row b * heads + j is head j of sequence b.
  ad::Var A;
  /// batch x (heads * 2H); heads concatenated in order.
  ad::Var E;
};

Attention attend(const Weights& w, const ad::Var& states, std::size_t frames, std::size_t batch);

/// batch x feature_dim -> batch x classes.
ad::Var classify(const Weights& w, const ad::Var& features);

/// GRU states of a group of equal-length sequences.
struct StateBatch {
  ad::Var states;
  std::size_t frames = 0;
  /// Positions of the group's sequences in the caller's list.
  std::vector<std::size_t> members;
};

/// Groups `seqs` by length and runs embedding and BiGRU once per group.
std::vector<StateBatch> encode_states(const Weights& w, ad::Tape& tape,
                                      std::span<const FeatureSequence* const> seqs);

/// Attention features for every sequence, rows in the caller's order.
ad::Var pool(const Weights& w, std::span<const StateBatch> groups, std::size_t count);

/// logits for `seqs`, rows in order.
ad::Var logits(const Weights& w, ad::Tape& tape, std::span<const FeatureSequence* const> seqs);

std::vector<int> labels_of(std::span<const FeatureSequence* const> seqs);
std::vector<const FeatureSequence*> pointers(std::span<const FeatureSequence> seqs);

// Evaluation without gradients.
Tensor forward(const Params& params, const FeatureSequence& seq);
Tensor features(const Params& params, std::span<const FeatureSequence* const> seqs);
Tensor logits(const Params& params, std::span<const FeatureSequence* const> seqs);
/// -log softmax(logits)[label] of a single row.
double loss(const Tensor& logits, int label);
std::vector<int> argmax_rows(const Tensor& logits);

}  // namespace fsq::model
