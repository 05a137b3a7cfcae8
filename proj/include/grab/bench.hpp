#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include "grab/cama.hpp"
#include "grab/packing.hpp"
#include "grab/run_config.hpp"

namespace grab {

// Per-user instances for throughput runs: len - 1 Partial tokens then one
// Full candidate, lengths drawn from cfg.lengths.
std::vector<Instance> bench_instances(const BenchConfig& cfg, std::uint32_t table_rows);
std::vector<int> bench_lengths(const BenchConfig& cfg);

struct BenchRow {
  std::string kernel;
  std::string variant;
  std::size_t real_tokens = 0;
  std::size_t slots = 0;
  // Best of cfg.repeats.
  double seconds = 0;
  double tokens_per_sec = 0;
  std::size_t peak_words = 0;
};

struct BenchResult {
  std::vector<BenchRow> rows;
  // Padded slots over packed real tokens.
  double waste_ratio = 0;
  // Packed tokens/sec over padded tokens/sec, both counting real tokens.
  double packed_speedup = 0;
  // L * (n_pos + n_act + n_time) * n_head, the score-table footprint.
  std::size_t fast_table_words = 0;
  // L^2 * d_head, one head's relative tensor.
  std::size_t naive_tensor_words = 0;
};

// Packed vs padded forward of one model, then the dense naive vs fast RAB
// kernels at cfg.rab_len. Counted quantities are deterministic; timings are not.
BenchResult run_bench(const BenchConfig& cfg, const ModelConfig& model);

void write_bench_csv(const BenchResult& r, const std::filesystem::path& path);

}  // namespace grab
