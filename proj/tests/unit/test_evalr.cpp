#include "doctest.h"

#include <cmath>
#include <numeric>
#include <sstream>

#include "../common/fixtures.hpp"
#include "../common/oracles.hpp"
#include "grab/error.hpp"
#include "grab/evalr.hpp"

using namespace grab;

namespace {

GenConfig toy_log() {
  GenConfig g;
  g.n_users = 40;
  g.events_per_user_range = {4, 12};
  g.n_candidates_per_user = 3;
  g.base_click_rate = 0.3;
  g.recency_boost = 1.0;
  g.n_channels = 2;
  g.seed = 3;
  return g;
}

ModelConfig toy_model() {
  ModelConfig m;
  m.n_layer = 1;
  m.n_head = 2;
  m.d_model = 8;
  m.n_channels = 2;
  m.d_emb = 4;
  m.table_rows = 256;
  m.sparse_hidden = 8;
  return m;
}

TrainConfig toy_train() {
  TrainConfig t;
  t.token_budget = 32;
  t.exposures_per_batch = 8;
  t.epochs = 1;
  t.eval_token_budget = 256;
  return t;
}

}  // namespace

TEST_CASE("auc examples") {
  CHECK(auc(std::vector<double>{0.9, 0.1}, std::vector<int>{1, 0}) == 1.0);
  CHECK(auc(std::vector<double>{0.1, 0.9}, std::vector<int>{1, 0}) == 0.0);
  CHECK(auc(std::vector<double>{0.3, 0.3, 0.3, 0.3}, std::vector<int>{1, 0, 1, 0}) == 0.5);
  try {
    (void)auc(std::vector<double>{0.2, 0.4}, std::vector<int>{1, 1});
    FAIL("expected an undefined metric");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kUndefinedMetric);
  }
}

TEST_CASE("auc equals the pairwise count and ignores monotone transforms") {
  Rng rng(1);
  for (int trial = 0; trial < 300; ++trial) {
    const int n = 2 + static_cast<int>(rng.below(199));
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (int i = 0; i < n; ++i) {
      s[i] = static_cast<double>(rng.below(1 + rng.below(40))) / 7.0;
      y[i] = rng.bernoulli(0.35);
    }
    y[0] = 1;
    y[1] = 0;
    const double a = auc(s, y);
    CHECK(a == oracle::pairwise_auc(s, y));
    std::vector<double> t(n);
    for (int i = 0; i < n; ++i) t[i] = std::exp(3 * s[i]) - 5;
    CHECK(auc(t, y) == a);
  }
}

TEST_CASE("spearman") {
  const std::vector<double> x{1, 2, 3, 4, 5};
  CHECK(spearman(x, std::vector<double>{2, 4, 6, 8, 100}) == doctest::Approx(1.0));
  CHECK(spearman(x, std::vector<double>{5, 4, 3, 2, 1}) == doctest::Approx(-1.0));
  // Ties take average ranks: ranks (1.5, 1.5, 3) vs (1, 2, 3).
  CHECK(spearman(std::vector<double>{1, 2, 3}, std::vector<double>{7, 7, 9}) ==
        doctest::Approx(1.5 / std::sqrt(2.0 * 1.5)));
  CHECK_THROWS_AS(spearman(x, std::vector<double>(5, 1.0)), Error);
  CHECK_THROWS_AS(spearman(std::vector<double>{}, std::vector<double>{}), Error);
}

TEST_CASE("attention shares are normalized") {
  auto p = ModelParams<double>::init(toy_model());
  Rng rng(2);
  const auto inst = fixture::random_instances(rng, {5, 12, 3, 256, 2});
  const std::vector<PackedBatch> b{pack(inst)};
  const auto r = attention_report(p, std::span<const PackedBatch>(b));
  for (const auto* v : {&r.pos_share, &r.time_share, &r.action_share})
    CHECK(std::abs(std::accumulate(v->begin(), v->end(), 0.0) - 1.0) <= 1e-6);
  CHECK(r.n_pairs > 0);
}

TEST_CASE("a single visible key takes the full share") {
  auto cfg = toy_model();
  cfg.n_channels = 1;
  auto p = ModelParams<double>::init(cfg);
  Instance one;
  TokenRecord h;
  h.user = 1;
  h.ts = 10;
  h.action = Action::kClick;
  h.ids_partial = {{2, 5}, {3, 6}, {4, 7}};
  h.ids_full = {{0, 1}, {1, 2}, {2, 5}, {3, 6}, {4, 7}};
  TokenRecord c = h;
  c.ts = 20;
  c.kind = TokenView::kFull;
  c.label = 1;
  c.action = Action::kExposure;
  one.tokens = {h, c};
  const std::vector<Instance> v{one};
  const std::vector<PackedBatch> b{pack(v)};
  const auto r = attention_report(p, std::span<const PackedBatch>(b));
  CHECK(r.pos_share[0] == doctest::Approx(1.0));
  CHECK(r.action_share[static_cast<int>(Action::kClick)] == doctest::Approx(1.0));
  CHECK(r.clicked_key_share == 1.0);
}

TEST_CASE("an untrained model spreads attention evenly") {
  auto cfg = toy_model();
  cfg.n_channels = 1;
  cfg.window = {std::nullopt, std::nullopt};
  auto p = ModelParams<double>::init(cfg);
  // Every user: six history events then one candidate, so each candidate
  // sees one key in each of the position buckets 0..5.
  Rng rng(3);
  std::vector<Instance> inst;
  const auto schema = FeatureSchema::standard();
  for (int u = 0; u < 200; ++u) {
    Instance in;
    for (int i = 0; i < 7; ++i) {
      TokenRecord t;
      t.user = u;
      t.ts = 100 * i;
      t.kind = i < 6 ? TokenView::kPartial : TokenView::kFull;
      if (i == 6) t.label = 0;
      t.ids_partial = fixture::random_ids(rng, schema, TokenView::kPartial, 256);
      t.ids_full = fixture::random_ids(rng, schema, TokenView::kFull, 256);
      t.action = i < 6 ? static_cast<Action>(rng.below(kNumActions)) : Action::kExposure;
      in.tokens.push_back(t);
    }
    inst.push_back(in);
  }
  const std::vector<PackedBatch> b{pack(inst)};
  const auto r = attention_report(p, std::span<const PackedBatch>(b));
  for (int k = 0; k < 6; ++k) {
    CHECK(r.pos_share[k] >= 0.5 / 6);
    CHECK(r.pos_share[k] <= 2.0 / 6);
  }
  for (std::size_t k = 6; k < r.pos_share.size(); ++k) CHECK(r.pos_share[k] == 0.0);
}

TEST_CASE("variants toggle one mechanism each") {
  for (Variant v : all_variants()) {
    ModelConfig m = toy_model(), base = toy_model();
    TrainConfig t = toy_train(), tbase = toy_train();
    apply_variant(v, m, t);
    const int diffs = (m.token_mode != base.token_mode) + (m.rel_pos != base.rel_pos) +
                      (m.rel_time != base.rel_time) + (m.rel_action != base.rel_action) +
                      (m.n_channels != base.n_channels) + (m.target_mix != base.target_mix) +
                      (t.mode != tbase.mode);
    CHECK(diffs == (v == Variant::kFull ? 0 : 1));
    CHECK(parse_variant(to_string(v)) == v);
  }
  CHECK_THROWS_AS(parse_variant("no_such"), Error);
}

TEST_CASE("ablation table has one row per job and is reproducible") {
  AblationSpec spec;
  spec.variants = {Variant::kFull, Variant::kNoRelTime};
  spec.seeds = {1, 2};
  spec.gen = toy_log();
  spec.model = toy_model();
  spec.train = toy_train();
  const auto a = run_ablation(spec);
  CHECK(a.rows.size() == 4);
  CHECK(a.full_attention.size() == 2);
  spec.threads = 2;
  const auto b = run_ablation(spec);
  CHECK(a.rows == b.rows);
  std::ostringstream ca, cb;
  write_ablation_csv(ca, a.rows);
  write_ablation_csv(cb, b.rows);
  CHECK(ca.str() == cb.str());
  CHECK(ca.str().rfind("variant,seed,auc,mean_concentration\n", 0) == 0);
}

TEST_CASE("scaling rows partition the eval candidates by history length") {
  ScalingSpec spec;
  spec.grid = {{1, 2, 8}};
  spec.seeds = {4, 5};
  spec.gen = toy_log();
  spec.model = toy_model();
  spec.train = toy_train();
  spec.length_edges = {4, 8};
  const auto rows = run_scaling(spec);
  for (std::uint64_t seed : spec.seeds) {
    std::size_t all = 0, parts = 0, n_all = 0;
    for (const auto& r : rows) {
      if (r.seed != seed) continue;
      if (r.bucket == "all") {
        all = r.n;
        ++n_all;
      } else {
        parts += r.n;
      }
    }
    CHECK(n_all == 1);
    CHECK(all > 0);
    CHECK(parts == all);
  }
  std::ostringstream out;
  write_scaling_csv(out, rows);
  CHECK(out.str().rfind("n_layer,n_head,d_model,seed,bucket,n,auc\n", 0) == 0);
}

TEST_CASE("median") {
  CHECK(median({3, 1, 2}) == 2);
  CHECK(median({4, 1, 2, 3}) == 2.5);
  CHECK_THROWS_AS(median({}), Error);
}
