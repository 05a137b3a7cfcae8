#pragma once

#include <cstdint>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "grab/cama.hpp"
#include "grab/datagen.hpp"
#include "grab/sts.hpp"

namespace grab {

// Mann-Whitney AUC with average ranks for ties. Needs at least one positive
// and one negative (kUndefinedMetric otherwise).
double auc(std::span<const double> scores, std::span<const int> labels);

// Spearman rank correlation with average ranks; empty or constant input is
// kUndefinedMetric.
double spearman(std::span<const double> x, std::span<const double> y);

// Attention mass of candidate (Full) queries on history (Partial) keys,
// averaged over layers, heads and channels. Each share vector sums to 1.
struct AttentionReport {
  std::vector<double> pos_share;
  std::vector<double> time_share;
  std::vector<double> action_share;
  // Click share of attention mass vs click share of the visible keys.
  double clicked_mass_share = 0.0;
  double clicked_key_share = 0.0;
  double total_mass = 0.0;
  std::size_t n_pairs = 0;
};

AttentionReport attention_report(std::span<const CapturedAttention> captured,
                                 const BucketConfig& buckets);

template <typename T>
AttentionReport attention_report(ModelParams<T>& params, std::span<const PackedBatch> batches);

enum class Variant : std::uint8_t {
  kFull,
  kPartialOnly,
  kFullOnly,
  kNoRelPos,
  kNoRelTime,
  kNoRelAction,
  kSingleChannel,
  kNoTargetMix,
  kNoSts,
};

std::string_view to_string(Variant v);
Variant parse_variant(std::string_view s);
std::vector<Variant> all_variants();

// Toggles exactly the mechanism the variant removes.
void apply_variant(Variant v, ModelConfig& model, TrainConfig& train);

struct AblationSpec {
  std::vector<Variant> variants;
  std::vector<std::uint64_t> seeds;
  GenConfig gen;
  ModelConfig model;
  TrainConfig train;
  int threads = 1;
};

struct AblationRow {
  Variant variant;
  std::uint64_t seed = 0;
  double auc = 0.0;
  double mean_concentration = 0.0;
  bool operator==(const AblationRow&) const = default;
};

struct AblationResult {
  std::vector<AblationRow> rows;
  // Attention report of the `full` variant for each seed, when it ran.
  std::vector<AttentionReport> full_attention;
};

// Trains every (variant, seed) on one generated log. The model and train
// seeds of a job are both set to its seed.
AblationResult run_ablation(const AblationSpec& spec);
AblationResult run_ablation(const AblationSpec& spec, std::span<const Event> log);

void write_ablation_csv(std::ostream& out, std::span<const AblationRow> rows);

double median(std::vector<double> v);

struct ScaleConfig {
  int n_layer = 2;
  int n_head = 2;
  int d_model = 64;
  bool operator==(const ScaleConfig&) const = default;
};

struct ScalingSpec {
  std::vector<ScaleConfig> grid;
  std::vector<std::uint64_t> seeds;
  GenConfig gen;
  ModelConfig model;
  TrainConfig train;
  // Upper edges of the history-length buckets; the last bucket is open.
  std::vector<int> length_edges{8, 16, 32};
  int threads = 1;
};

struct ScalingRow {
  ScaleConfig config;
  std::uint64_t seed = 0;
  // "all" or "<lo>-<hi>" history length bucket.
  std::string bucket;
  std::size_t n = 0;
  std::optional<double> auc;
};

std::vector<ScalingRow> run_scaling(const ScalingSpec& spec);
std::vector<ScalingRow> run_scaling(const ScalingSpec& spec, std::span<const Event> log);

void write_scaling_csv(std::ostream& out, std::span<const ScalingRow> rows);

}  // namespace grab
