#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <set>
#include <sstream>

#include "../common/fixtures.hpp"
#include "../common/oracles.hpp"
#include "grab/error.hpp"
#include "grab/sts.hpp"

using namespace grab;

namespace {

ModelConfig tiny_model() {
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

GenConfig tiny_log() {
  GenConfig g;
  g.n_users = 40;
  g.events_per_user_range = {4, 10};
  g.n_candidates_per_user = 3;
  g.base_click_rate = 0.3;
  g.recency_boost = 1.0;
  g.n_channels = 2;
  g.seed = 5;
  return g;
}

TrainConfig tiny_train() {
  TrainConfig t;
  t.token_budget = 32;
  t.exposures_per_batch = 8;
  t.epochs = 2;
  t.eval_token_budget = 256;
  return t;
}

std::vector<Instance> tiny_instances() {
  return instances_from_log(generate_log(tiny_log()), FeatureSchema::standard(), tiny_model().table_rows);
}

TrainState<float> fresh_state() {
  TrainState<float> st;
  st.params = ModelParams<float>::init(tiny_model());
  return st;
}

}  // namespace

TEST_CASE("stage I with zero learning rate changes nothing") {
  auto st = fresh_state();
  const auto inst = tiny_instances();
  const auto batch = pack_batches(inst, 32).front();
  TrainConfig cfg = tiny_train();
  cfg.lr_dense = 0;
  st.params.table.freeze();
  const auto dense = st.params.dense_checksum();
  const auto table = st.params.table.checksum();
  (void)stage1_step(st, batch, cfg);
  CHECK(st.params.dense_checksum() == dense);
  CHECK(st.params.table.checksum() == table);

  cfg.lr_dense = 0.01;
  (void)stage1_step(st, batch, cfg);
  CHECK(st.params.dense_checksum() != dense);
  CHECK(st.params.table.checksum() == table);

  st.params.table.unfreeze();
  CHECK_THROWS_AS(stage1_step(st, batch, cfg), Error);
}

TEST_CASE("stage I reports ln 2 on one candidate at score one half") {
  auto st = fresh_state();
  st.params.head.w.value.setZero();
  st.params.head.b.value.setZero();
  auto inst = tiny_instances();
  Instance one;
  for (const auto& t : inst[0].tokens) {
    one.tokens.push_back(t);
    if (t.kind == TokenView::kFull) break;
  }
  one.tokens.back().label = 1;
  const std::vector<Instance> v{one};
  st.params.table.freeze();
  CHECK(stage1_step(st, pack(v), tiny_train()) == doctest::Approx(std::log(2.0)).epsilon(1e-6));
}

TEST_CASE("stage II updates only the rows of its exposures") {
  auto st = fresh_state();
  const auto inst = tiny_instances();
  auto ex = list_exposures(inst);
  ex.resize(4);
  TrainConfig cfg = tiny_train();
  st.params.dense_frozen = true;
  const auto dense = st.params.dense_checksum();
  const auto before = st.params.table;

  cfg.lr_sparse = 0;
  (void)stage2_step(st, inst, ex, cfg);
  CHECK(st.params.table == before);

  cfg.lr_sparse = 0.5;
  (void)stage2_step(st, inst, ex, cfg);
  CHECK(st.params.dense_checksum() == dense);
  num::Tape<float> tape;
  EmbeddingRows<float> rows;
  (void)sparse_phase_loss(tape, st.params, inst, ex, rows);
  const std::set<SparseId> touched(rows.ids.begin(), rows.ids.end());
  int changed = 0;
  for (int s = 0; s < before.slots(); ++s)
    for (std::uint32_t r = 0; r < before.rows(); ++r) {
      const SparseId id{s, r};
      const auto a = before.row(id), b = st.params.table.row(id);
      const bool same = std::equal(a.begin(), a.end(), b.begin());
      if (!touched.count(id)) CHECK(same);
      changed += !same;
    }
  CHECK(changed > 0);

  st.params.dense_frozen = false;
  CHECK_THROWS_AS(stage2_step(st, inst, ex, cfg), Error);
}

TEST_CASE("an exposure without history pools to zero") {
  auto st = fresh_state();
  auto inst = tiny_instances();
  Instance bare;
  for (const auto& t : inst[0].tokens)
    if (t.kind == TokenView::kFull) bare.tokens.push_back(t);
  const std::vector<Instance> v{bare};
  const std::vector<ExposureRef> ex{{0, 0}};
  st.params.dense_frozen = true;
  const double loss = stage2_step(st, v, ex, tiny_train());
  CHECK(std::isfinite(loss));
}

TEST_CASE("sts training alternates phases one to one") {
  const auto log = generate_log(tiny_log());
  const auto res = train<float>(log, tiny_model(), tiny_train());
  std::vector<std::string> phases;
  for (const auto& r : res.trace)
    if (r.phase != "eval") phases.push_back(r.phase);
  REQUIRE(phases.size() >= 4);
  for (std::size_t i = 0; i < phases.size(); ++i) CHECK(phases[i] == (i % 2 == 0 ? "I" : "II"));
  CHECK(res.eval_auc.size() == 2);

  TrainConfig two = tiny_train();
  two.stage1_per_stage2 = 2;
  const auto r2 = train<float>(log, tiny_model(), two);
  std::string seq;
  for (const auto& r : r2.trace)
    if (r.phase != "eval") seq += r.phase == "I" ? 'a' : 'b';
  CHECK(seq.substr(0, 6) == "aabaab");

  TrainConfig joint = tiny_train();
  joint.mode = TrainMode::kJoint;
  for (const auto& r : train<float>(log, tiny_model(), joint).trace)
    CHECK((r.phase == "joint" || r.phase == "eval"));
}

TEST_CASE("zero epochs leave the initialization") {
  TrainConfig cfg = tiny_train();
  cfg.epochs = 0;
  const auto res = train<float>(generate_log(tiny_log()), tiny_model(), cfg);
  const auto init = ModelParams<float>::init(tiny_model());
  CHECK(res.state.params.dense_checksum() == init.dense_checksum());
  CHECK(res.state.params.table == init.table);
  CHECK(res.trace.empty());
}

TEST_CASE("training is deterministic and resumes at epoch boundaries") {
  const auto log = generate_log(tiny_log());
  TrainConfig cfg = tiny_train();
  cfg.epochs = 3;
  const auto full = train<float>(log, tiny_model(), cfg);
  const auto again = train<float>(log, tiny_model(), cfg);
  CHECK(full.trace == again.trace);
  CHECK(full.state.params.dense_checksum() == again.state.params.dense_checksum());

  TrainConfig first = cfg;
  first.epochs = 1;
  const auto part = train<float>(log, tiny_model(), first);
  std::stringstream ss;
  save_checkpoint(ss, part.state);
  auto resumed_state = load_checkpoint<float>(ss);
  CHECK(resumed_state.epoch == 1);
  auto data = split_users(instances_from_log(log, FeatureSchema::standard(), tiny_model().table_rows), cfg.eval_fraction);
  const auto rest = train<float>(data, std::move(resumed_state), cfg);
  auto trace = part.trace;
  trace.insert(trace.end(), rest.trace.begin(), rest.trace.end());
  CHECK(trace == full.trace);
  CHECK(rest.state.params.dense_checksum() == full.state.params.dense_checksum());
  CHECK(rest.state.params.table == full.state.params.table);
}

TEST_CASE("checkpoints reserialize byte for byte and validate shapes") {
  const auto res = train<float>(generate_log(tiny_log()), tiny_model(), tiny_train());
  std::stringstream a;
  save_checkpoint(a, res.state);
  const std::string bytes = a.str();
  std::stringstream in(bytes);
  const auto back = load_checkpoint<float>(in);
  std::stringstream b;
  save_checkpoint(b, back);
  CHECK(b.str() == bytes);
  CHECK(back.params.cfg == res.state.params.cfg);
  CHECK(back.dense_opt == res.state.dense_opt);

  const auto dir = std::filesystem::temp_directory_path() / "grab_unit_ckpt";
  std::filesystem::create_directories(dir);
  const auto path = dir / "tiny.ckpt";
  save_checkpoint(path, res.state);
  ModelConfig wrong = tiny_model();
  wrong.d_model = 12;
  try {
    (void)load_checkpoint<float>(path, wrong);
    FAIL("expected a shape error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kShape);
    CHECK(std::string(e.what()).find("block '") != std::string::npos);
  }
  CHECK_THROWS_AS(load_checkpoint<double>(path), Error);
  std::string corrupt = bytes;
  corrupt[1] ^= 0x20;
  std::stringstream bad(corrupt);
  CHECK_THROWS_AS(load_checkpoint<float>(bad), Error);
  std::filesystem::remove_all(dir);
}

TEST_CASE("skew metrics") {
  const std::vector<std::uint64_t> one(7, 3);
  auto r = measure_skew(one);
  CHECK(r.concentration == 1.0);
  CHECK(r.effective_users == 1.0);
  const std::vector<std::uint64_t> two{1, 2, 1, 2};
  r = measure_skew(two);
  CHECK(r.concentration == 0.5);
  CHECK(r.effective_users == 2.0);
  Rng rng(9);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<std::uint64_t> u(1 + rng.below(60));
    for (auto& x : u) x = rng.below(1 + rng.below(12));
    const auto s = measure_skew(u);
    CHECK(s.effective_users == oracle::effective_users(u));
    CHECK(s.concentration == oracle::concentration(u));
  }
  CHECK_THROWS_AS(measure_skew(std::vector<std::uint64_t>{}), Error);

  // A repeated user row is counted once per occurrence.
  const auto inst = tiny_instances();
  const std::vector<Instance> v{inst[0]};
  const auto b = pack(v);
  const auto sk = measure_skew(b);
  int fulls = 0;
  for (const auto& t : b.tokens) fulls += t.kind == TokenView::kFull;
  CHECK(sk.row_multiplicity.at(b.tokens.back().ids_full.front()) >= fulls);
}

TEST_CASE("user holdout is deterministic and disjoint") {
  const auto inst = tiny_instances();
  const auto a = split_users(inst, 0.2), b = split_users(inst, 0.2);
  CHECK(a.eval.size() == b.eval.size());
  CHECK(a.train.size() + a.eval.size() == inst.size());
  std::set<std::uint64_t> tr;
  for (const auto& i : a.train) tr.insert(i.tokens.front().user);
  for (const auto& i : a.eval) CHECK_FALSE(tr.count(i.tokens.front().user));
  CHECK(split_users(inst, 0.0).eval.empty());
}
