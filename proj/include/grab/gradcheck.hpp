#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "grab/cama.hpp"
#include "grab/datagen.hpp"
#include "grab/numcore.hpp"

namespace grab {

struct ModelGradCheckConfig {
  ModelConfig model = tiny_model();
  GenConfig gen = tiny_log();
  double h = 1e-5;
  // 0 = probe every entry.
  std::size_t max_entries_per_param = 0;
  // Zero-initialised blocks (codebooks, gates, biases) are drawn from
  // U(-perturb, perturb) first so the check is not taken at a symmetric point.
  double perturb = 0.1;

  // n_layer=2, n_head=2, d_model=8, two channels, double precision.
  static ModelConfig tiny_model();
  // Two users with at most 16 tokens each, two channels.
  static GenConfig tiny_log();
};

struct GradCheckGroup {
  // embeddings.packed, embeddings.sparse_phase, tokenizer, attention,
  // codebooks, layernorm, ffn, mixers, head, sparse_head.
  std::string group;
  num::GradCheckReport report;
};

// Central-difference check of the packed loss over every dense block and the
// touched embedding rows, and of the sparse-phase loss over its embedding
// rows and f_sp.
std::vector<GradCheckGroup> model_grad_check(const ModelGradCheckConfig& cfg);

}  // namespace grab
