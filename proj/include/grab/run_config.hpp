#pragma once

#include <filesystem>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "grab/cama.hpp"
#include "grab/datagen.hpp"
#include "grab/evalr.hpp"
#include "grab/sts.hpp"

namespace grab {

struct BenchConfig {
  int l_max = 256;
  int n_instances = 64;
  // "fixed" (every instance l_max long), "uniform" in [min_len, l_max] or
  // "heavy" (Pareto-like, clipped to [min_len, l_max]).
  std::string lengths = "heavy";
  int min_len = 4;
  // Dense RAB kernel comparison.
  int rab_len = 512;
  int rab_d_head = 32;
  int rab_n_head = 1;
  int repeats = 3;
  std::uint64_t seed = 1;
};

// Flat key=value configuration. Keys carry a dotted section prefix (gen.,
// model., train., ablation., scale., bench.); '#' starts a comment.
struct RunConfig {
  GenConfig gen;
  ModelConfig model;
  TrainConfig train;
  std::vector<Variant> variants = all_variants();
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  std::vector<ScaleConfig> grid{{2, 2, 64}, {4, 2, 64}};
  std::vector<std::uint64_t> scale_seeds{1, 2, 3, 4, 5};
  std::vector<int> length_edges{8, 16, 32};
  BenchConfig bench;
  // Keys present in the parsed text.
  std::set<std::string> given;

  AblationSpec ablation_spec(int threads) const;
  ScalingSpec scaling_spec(int threads) const;
};

// Unknown keys, malformed values and duplicate keys are kConfig errors that
// cite the line number and key. Every section is validated afterwards.
RunConfig parse_run_config(std::string_view text);
RunConfig load_run_config(const std::filesystem::path& path);
// Every key with its current value, one per line, parseable back.
std::string format_run_config(const RunConfig& cfg);
std::vector<std::string> run_config_keys();

}  // namespace grab
