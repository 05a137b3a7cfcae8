#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "grab/cama.hpp"
#include "grab/datagen.hpp"
#include "grab/packing.hpp"

namespace grab {

enum class TrainMode : std::uint8_t { kSts = 0, kJoint = 1 };
enum class DenseOptimizer : std::uint8_t { kAdam = 0, kSgd = 1 };

std::string_view to_string(TrainMode m);
TrainMode parse_train_mode(std::string_view s);

struct TrainConfig {
  double lr_dense = 1e-3;
  double lr_sparse = 0.05;
  DenseOptimizer optimizer_dense = DenseOptimizer::kAdam;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  int token_budget = 48;
  int exposures_per_batch = 16;
  // Stage I steps per Stage II step.
  int stage1_per_stage2 = 1;
  int epochs = 1;
  // 0 = no limit; otherwise training stops after this many optimizer steps.
  std::int64_t max_steps = 0;
  std::uint64_t seed = 1;
  TrainMode mode = TrainMode::kSts;
  // Share of users held out for evaluation, chosen by user-id hash.
  double eval_fraction = 0.2;
  int eval_token_budget = 4096;

  // kConfig naming the offending "train.<field>".
  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

template <typename T>
struct AdamState {
  std::vector<num::Mat<T>> m, v;
  std::int64_t t = 0;
  bool operator==(const AdamState&) const = default;
};

template <typename T>
void dense_update(std::span<num::Parameter<T>* const> params, AdamState<T>& state,
                  const TrainConfig& cfg);

struct SkewReport {
  std::size_t n_tokens = 0;
  std::size_t n_users = 0;
  // Largest per-user share of tokens.
  double concentration = 0.0;
  // (sum n_u)^2 / sum n_u^2.
  double effective_users = 0.0;
  // Occurrences of each embedding row in the batch.
  std::map<SparseId, int> row_multiplicity;
  int max_row_multiplicity = 0;
  double mean_row_multiplicity = 0.0;
};

// One entry per token naming its user. Empty input is a contract error.
SkewReport measure_skew(std::span<const std::uint64_t> token_users);
SkewReport measure_skew(const PackedBatch& batch, TokenMode mode = TokenMode::kHet);

// A candidate seen as an independent exposure: instance index and token index
// within the instance, whose tokens are kept sorted by timestamp.
struct ExposureRef {
  int instance = 0;
  int token = 0;
};

std::vector<ExposureRef> list_exposures(std::span<const Instance> instances);

// f_sp loss on a set of exposures: BCE of f_sp([mean over the Partial views
// of earlier history || Full view of the candidate]). An exposure without
// history pools to the zero vector.
template <typename T>
num::Var sparse_phase_loss(num::Tape<T>& tape, ModelParams<T>& params,
                           std::span<const Instance> instances,
                           std::span<const ExposureRef> exposures, EmbeddingRows<T>& rows);

template <typename T>
struct TrainState {
  ModelParams<T> params;
  AdamState<T> dense_opt;
  AdamState<T> sparse_head_opt;
  int epoch = 0;
  std::int64_t step = 0;
};

// Dense step on a packed batch. The table must be frozen (kContract).
template <typename T>
double stage1_step(TrainState<T>& st, const PackedBatch& batch, const TrainConfig& cfg);

// Sparse step: table rows and f_sp. Dense parameters must be frozen.
template <typename T>
double stage2_step(TrainState<T>& st, std::span<const Instance> instances,
                   std::span<const ExposureRef> exposures, const TrainConfig& cfg);

// Dense and sparse updates from the packed-sequence loss; nothing frozen.
template <typename T>
double joint_step(TrainState<T>& st, const PackedBatch& batch, const TrainConfig& cfg);

struct TraceRow {
  std::int64_t step = 0;
  int epoch = 0;
  // "I", "II", "joint" or "eval".
  std::string phase;
  double loss = 0.0;
  std::optional<double> auc;
  double concentration = 0.0;
  double effective_users = 0.0;
  bool operator==(const TraceRow&) const = default;
};

void write_trace_header(std::ostream& out);
void write_trace_row(std::ostream& out, const TraceRow& row);

struct DataSplit {
  std::vector<Instance> train, eval;
};

// Deterministic user-level holdout by hash of the user id.
DataSplit split_users(std::vector<Instance> instances, double eval_fraction);

template <typename T>
struct TrainResult {
  TrainState<T> state;
  std::vector<TraceRow> trace;
  std::vector<double> eval_auc;
};

// Runs epochs state.epoch .. cfg.epochs - 1 (or until max_steps). Batch
// order and exposure sampling derive from (seed, epoch), so resuming from a
// checkpoint written at an epoch boundary reproduces the uninterrupted run.
template <typename T>
TrainResult<T> train(const DataSplit& data, TrainState<T> state, const TrainConfig& cfg,
                     const std::function<void(const TraceRow&)>& on_row = {});

template <typename T>
TrainResult<T> train(std::span<const Event> log, const ModelConfig& model_cfg,
                     const TrainConfig& cfg, const std::function<void(const TraceRow&)>& on_row = {});

// Scores and labels of every candidate of the given instances.
template <typename T>
void score_instances(ModelParams<T>& params, std::span<const Instance> instances, int token_budget,
                     std::vector<double>& scores, std::vector<int>& labels);

// Versioned binary container: model config, every named dense and f_sp
// block, optimizer state, counters and the embedded sparse table.
template <typename T>
void save_checkpoint(const std::filesystem::path& path, const TrainState<T>& st);
template <typename T>
void save_checkpoint(std::ostream& out, const TrainState<T>& st);
template <typename T>
TrainState<T> load_checkpoint(const std::filesystem::path& path);
template <typename T>
TrainState<T> load_checkpoint(std::istream& in);
// Loads into the layout implied by expected; a block whose shape differs
// fails with an error naming the block.
template <typename T>
TrainState<T> load_checkpoint(const std::filesystem::path& path, const ModelConfig& expected);

// Precision stored in a checkpoint header.
num::Precision checkpoint_precision(const std::filesystem::path& path);

}  // namespace grab
