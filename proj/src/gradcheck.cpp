#include "grab/gradcheck.hpp"

#include <limits>
#include <map>

#include "grab/error.hpp"
#include "grab/rng.hpp"
#include "grab/sts.hpp"

namespace grab {

ModelConfig ModelGradCheckConfig::tiny_model() {
  ModelConfig m;
  m.n_layer = 2;
  m.n_head = 2;
  m.d_model = 8;
  m.n_channels = 2;
  m.d_emb = 4;
  m.table_rows = 64;
  m.window = {8, std::nullopt};
  m.buckets = {9, kNumActions, 12};
  m.precision = num::Precision::kDouble;
  m.sparse_hidden = 6;
  return m;
}

GenConfig ModelGradCheckConfig::tiny_log() {
  GenConfig g;
  g.n_users = 2;
  g.events_per_user_range = {5, 12};
  g.n_candidates_per_user = 3;
  g.base_click_rate = 0.4;
  g.recency_boost = 1.0;
  g.action_affinity_boost = 1.0;
  g.n_channels = 2;
  g.channel_half_lives = {600.0, 7200.0};
  g.session_length_mean = 3.0;
  g.seed = 11;
  return g;
}

namespace {

std::string group_of(const std::string& name) {
  if (name.rfind("tok.", 0) == 0) return "tokenizer";
  if (name.rfind("mix.", 0) == 0) return "mixers";
  if (name.rfind("head.", 0) == 0) return "head";
  const auto dot = name.rfind('.');
  const std::string leaf = dot == std::string::npos ? name : name.substr(dot + 1);
  if (leaf == "b_pos" || leaf == "b_act" || leaf == "b_time") return "codebooks";
  if (leaf == "wq" || leaf == "wk" || leaf == "wv" || leaf == "wo") return "attention";
  if (leaf.rfind("ln", 0) == 0) return "layernorm";
  return "ffn";
}

bool all_zero(const num::Mat<double>& m) { return (m.array() == 0.0).all(); }

}  // namespace

std::vector<GradCheckGroup> model_grad_check(const ModelGradCheckConfig& cfg) {
  ModelConfig mc = cfg.model;
  mc.precision = num::Precision::kDouble;
  mc.validate();
  const auto log = generate_log(cfg.gen);
  const auto instances = instances_from_log(log, FeatureSchema::standard(), mc.table_rows);
  for (const auto& inst : instances)
    require(inst.tokens.size() <= 16, ErrorKind::kConfig, "grad check instances are limited to 16 tokens");
  const PackedBatch batch = pack(instances);
  require(!batch.candidate_positions.empty(), ErrorKind::kConfig, "grad check log has no candidates");

  auto params = ModelParams<double>::init(mc);
  Rng rng(derive_seed({mc.seed, 0x62AD}));
  for (auto* p : params.dense_parameters())
    if (all_zero(p->value))
      for (Eigen::Index i = 0; i < p->value.size(); ++i)
        p->value.data()[i] = rng.uniform(-cfg.perturb, cfg.perturb);
  for (auto* p : params.sparse_head.parameters())
    if (all_zero(p->value))
      for (Eigen::Index i = 0; i < p->value.size(); ++i)
        p->value.data()[i] = rng.uniform(-cfg.perturb, cfg.perturb);

  const std::size_t cap =
      cfg.max_entries_per_param ? cfg.max_entries_per_param : std::numeric_limits<std::size_t>::max();
  std::vector<GradCheckGroup> out;

  EmbeddingRows<double> packed_rows;
  {
    num::Tape<double> warm;
    (void)packed_loss(warm, params, batch, {&packed_rows, nullptr});
  }
  auto packed_fn = [&](num::Tape<double>& t) {
    return packed_loss(t, params, batch, {&packed_rows, nullptr});
  };
  std::map<std::string, std::vector<num::Parameter<double>*>> groups;
  for (auto* p : params.dense_parameters()) groups[group_of(p->name)].push_back(p);
  groups["embeddings.packed"].push_back(&packed_rows.rows);
  for (auto& [name, ps] : groups)
    out.push_back({name, num::grad_check(packed_fn, ps, cfg.h, cap)});

  const auto exposures = list_exposures(instances);
  EmbeddingRows<double> sparse_rows;
  {
    num::Tape<double> warm;
    (void)sparse_phase_loss(warm, params, instances, exposures, sparse_rows);
  }
  auto sparse_fn = [&](num::Tape<double>& t) {
    return sparse_phase_loss(t, params, instances, exposures, sparse_rows);
  };
  std::vector<num::Parameter<double>*> emb{&sparse_rows.rows};
  out.push_back({"embeddings.sparse_phase", num::grad_check(sparse_fn, emb, cfg.h, cap)});
  out.push_back({"sparse_head", num::grad_check(sparse_fn, params.sparse_head.parameters(), cfg.h, cap)});
  return out;
}

}  // namespace grab
