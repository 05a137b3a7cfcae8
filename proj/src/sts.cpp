#include "grab/sts.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

#include "grab/error.hpp"
#include "grab/evalr.hpp"
#include "grab/hash.hpp"
#include "grab/rng.hpp"

namespace grab {

using num::Mat;
using num::Parameter;
using num::Var;

std::string_view to_string(TrainMode m) { return m == TrainMode::kSts ? "sts" : "joint"; }

TrainMode parse_train_mode(std::string_view s) {
  if (s == "sts") return TrainMode::kSts;
  if (s == "joint") return TrainMode::kJoint;
  fail(ErrorKind::kConfig, "unknown train mode '" + std::string(s) + "'");
}

void TrainConfig::validate() const {
  auto bad = [](const std::string& f, const std::string& why) {
    fail(ErrorKind::kConfig, "train." + f + ": " + why);
  };
  if (!(lr_dense >= 0.0)) bad("lr_dense", "must be >= 0");
  if (!(lr_sparse >= 0.0)) bad("lr_sparse", "must be >= 0");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0)) bad("adam_beta1", "must be in [0, 1)");
  if (!(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) bad("adam_beta2", "must be in [0, 1)");
  if (!(adam_eps > 0.0)) bad("adam_eps", "must be > 0");
  if (token_budget < 1) bad("token_budget", "must be >= 1");
  if (exposures_per_batch < 1) bad("exposures_per_batch", "must be >= 1");
  if (stage1_per_stage2 < 1) bad("stage1_per_stage2", "must be >= 1");
  if (epochs < 0) bad("epochs", "must be >= 0");
  if (max_steps < 0) bad("max_steps", "must be >= 0");
  if (!(eval_fraction >= 0.0 && eval_fraction < 1.0)) bad("eval_fraction", "must be in [0, 1)");
  if (eval_token_budget < 1) bad("eval_token_budget", "must be >= 1");
}

template <typename T>
void dense_update(std::span<Parameter<T>* const> params, AdamState<T>& state,
                  const TrainConfig& cfg) {
  const T lr = static_cast<T>(cfg.lr_dense);
  if (cfg.optimizer_dense == DenseOptimizer::kSgd) {
    for (auto* p : params) {
      p->value -= lr * p->grad;
      p->zero_grad();
    }
    return;
  }
  if (state.m.size() != params.size()) {
    state.m.clear();
    state.v.clear();
    for (auto* p : params) {
      state.m.push_back(Mat<T>::Zero(p->value.rows(), p->value.cols()));
      state.v.push_back(Mat<T>::Zero(p->value.rows(), p->value.cols()));
    }
  }
  ++state.t;
  const T b1 = static_cast<T>(cfg.adam_beta1), b2 = static_cast<T>(cfg.adam_beta2);
  const T eps = static_cast<T>(cfg.adam_eps);
  const T c1 = T(1) - static_cast<T>(std::pow(cfg.adam_beta1, static_cast<double>(state.t)));
  const T c2 = T(1) - static_cast<T>(std::pow(cfg.adam_beta2, static_cast<double>(state.t)));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto* p = params[i];
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.rows() != p->value.rows() || m.cols() != p->value.cols())
      fail(ErrorKind::kShape, "dense_update: optimizer state shape differs for " + p->name);
    m = b1 * m + (T(1) - b1) * p->grad;
    v = b2 * v + (T(1) - b2) * p->grad.cwiseProduct(p->grad);
    for (Eigen::Index k = 0; k < p->value.size(); ++k) {
      const T mh = m.data()[k] / c1;
      const T vh = v.data()[k] / c2;
      p->value.data()[k] -= lr * mh / (std::sqrt(vh) + eps);
    }
    p->zero_grad();
  }
}

SkewReport measure_skew(std::span<const std::uint64_t> token_users) {
  if (token_users.empty()) fail(ErrorKind::kContract, "measure_skew: empty batch");
  std::map<std::uint64_t, std::size_t> counts;
  for (auto u : token_users) ++counts[u];
  SkewReport r;
  r.n_tokens = token_users.size();
  r.n_users = counts.size();
  std::size_t mx = 0;
  double sq = 0.0;
  for (const auto& [u, n] : counts) {
    mx = std::max(mx, n);
    sq += static_cast<double>(n) * static_cast<double>(n);
  }
  const double total = static_cast<double>(r.n_tokens);
  r.concentration = static_cast<double>(mx) / total;
  r.effective_users = total * total / sq;
  return r;
}

SkewReport measure_skew(const PackedBatch& batch, TokenMode mode) {
  std::vector<std::uint64_t> users;
  users.reserve(batch.length());
  for (int p = 0; p < batch.length(); ++p) users.push_back(batch.seg_user[batch.layout.seg[p]]);
  SkewReport r = measure_skew(users);
  for (const auto& t : batch.tokens) {
    const auto& ids = token_view(mode, t.kind) == TokenView::kPartial ? t.ids_partial : t.ids_full;
    for (const auto& id : ids) ++r.row_multiplicity[id];
  }
  double total = 0.0;
  for (const auto& [id, n] : r.row_multiplicity) {
    r.max_row_multiplicity = std::max(r.max_row_multiplicity, n);
    total += n;
  }
  if (!r.row_multiplicity.empty())
    r.mean_row_multiplicity = total / static_cast<double>(r.row_multiplicity.size());
  return r;
}

std::vector<ExposureRef> list_exposures(std::span<const Instance> instances) {
  std::vector<ExposureRef> out;
  for (std::size_t i = 0; i < instances.size(); ++i)
    for (std::size_t k = 0; k < instances[i].tokens.size(); ++k)
      if (instances[i].tokens[k].kind == TokenView::kFull)
        out.push_back({static_cast<int>(i), static_cast<int>(k)});
  return out;
}

template <typename T>
Var sparse_phase_loss(num::Tape<T>& tape, ModelParams<T>& params,
                      std::span<const Instance> instances, std::span<const ExposureRef> exposures,
                      EmbeddingRows<T>& rows) {
  using namespace num;
  if (exposures.empty()) fail(ErrorKind::kContract, "sparse_phase_loss: empty exposure batch");
  const FeatureSchema schema = FeatureSchema::standard();
  const int kp = schema.arity(TokenView::kPartial);
  const int kf = schema.arity(TokenView::kFull);
  const int d = params.table.dim();
  const bool collect = rows.ids.empty();
  auto row_of = [&](const SparseId& id) {
    if (collect) return rows.add(id);
    auto it = rows.index.find(id);
    if (it == rows.index.end())
      fail(ErrorKind::kContract, "sparse_phase_loss: embedding block lacks a row of the batch");
    return it->second;
  };
  std::vector<int> hist_idx, cand_idx, offsets{0};
  std::vector<T> labels;
  for (const auto& e : exposures) {
    if (e.instance < 0 || static_cast<std::size_t>(e.instance) >= instances.size())
      fail(ErrorKind::kIndex, "sparse_phase_loss: exposure instance out of range");
    const auto& toks = instances[e.instance].tokens;
    if (e.token < 0 || static_cast<std::size_t>(e.token) >= toks.size())
      fail(ErrorKind::kIndex, "sparse_phase_loss: exposure token out of range");
    const TokenRecord& cand = toks[e.token];
    if (cand.kind != TokenView::kFull || !cand.label)
      fail(ErrorKind::kContract, "sparse_phase_loss: exposure is not a labelled candidate");
    for (int j = 0; j < e.token; ++j) {
      if (toks[j].kind != TokenView::kPartial) continue;
      for (const auto& id : toks[j].ids_partial) hist_idx.push_back(row_of(id));
    }
    offsets.push_back(static_cast<int>(hist_idx.size()) / kp);
    for (const auto& id : cand.ids_full) cand_idx.push_back(row_of(id));
    labels.push_back(static_cast<T>(*cand.label));
  }
  if (collect) rows.load(params.table);
  Var R = tape.param(rows.rows);
  const auto B = static_cast<Eigen::Index>(exposures.size());
  Var pooled;
  if (hist_idx.empty()) {
    pooled = tape.constant(Mat<T>::Zero(B, kp * d));
  } else {
    Var hist = gather_concat(tape, R, std::span<const int>(hist_idx), kp);
    pooled = segment_mean(tape, hist, std::span<const int>(offsets));
  }
  Var cand = gather_concat(tape, R, std::span<const int>(cand_idx), kf);
  const Var parts[] = {pooled, cand};
  Var s = concat_cols<T>(tape, parts);
  auto& sp = params.sparse_head;
  Var h = relu(tape, add_row(tape, matmul(tape, s, tape.param(sp.w1)), tape.param(sp.b1)));
  Var z = add_row(tape, matmul(tape, h, tape.param(sp.w2)), tape.param(sp.b2));
  return bce_with_logits(tape, z, std::span<const T>(labels));
}

template <typename T>
double stage1_step(TrainState<T>& st, const PackedBatch& batch, const TrainConfig& cfg) {
  auto& P = st.params;
  if (!P.table.frozen()) fail(ErrorKind::kContract, "stage1_step: sparse table must be frozen");
  if (P.dense_frozen) fail(ErrorKind::kContract, "stage1_step: dense parameters are frozen");
  num::Tape<T> tape;
  Var loss = packed_loss(tape, P, batch);
  tape.backward(loss);
  const auto dense = P.dense_parameters();
  dense_update<T>(dense, st.dense_opt, cfg);
  ++st.step;
  return static_cast<double>(tape.value(loss)(0, 0));
}

template <typename T>
double stage2_step(TrainState<T>& st, std::span<const Instance> instances,
                   std::span<const ExposureRef> exposures, const TrainConfig& cfg) {
  auto& P = st.params;
  if (!P.dense_frozen) fail(ErrorKind::kContract, "stage2_step: dense parameters must be frozen");
  num::Tape<T> tape;
  EmbeddingRows<T> rows;
  Var loss = sparse_phase_loss(tape, P, instances, exposures, rows);
  tape.backward(loss);
  const auto grads = rows.row_grads();
  P.table.apply_sparse_grads(grads, static_cast<T>(cfg.lr_sparse));
  const auto head = P.sparse_head.parameters();
  dense_update<T>(head, st.sparse_head_opt, cfg);
  ++st.step;
  return static_cast<double>(tape.value(loss)(0, 0));
}

template <typename T>
double joint_step(TrainState<T>& st, const PackedBatch& batch, const TrainConfig& cfg) {
  auto& P = st.params;
  if (P.table.frozen() || P.dense_frozen)
    fail(ErrorKind::kContract, "joint_step: joint training needs every block unfrozen");
  num::Tape<T> tape;
  EmbeddingRows<T> rows;
  ForwardOptions<T> opt;
  opt.embeddings = &rows;
  Var loss = packed_loss(tape, P, batch, opt);
  tape.backward(loss);
  const auto dense = P.dense_parameters();
  dense_update<T>(dense, st.dense_opt, cfg);
  const auto grads = rows.row_grads();
  P.table.apply_sparse_grads(grads, static_cast<T>(cfg.lr_sparse));
  ++st.step;
  return static_cast<double>(tape.value(loss)(0, 0));
}

void write_trace_header(std::ostream& out) {
  out << "step,epoch,phase,loss,auc,concentration,effective_users\n";
}

void write_trace_row(std::ostream& out, const TraceRow& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%lld,%d,%s,%.9g,", static_cast<long long>(r.step), r.epoch,
                r.phase.c_str(), r.loss);
  out << buf;
  if (r.auc) {
    std::snprintf(buf, sizeof buf, "%.9g", *r.auc);
    out << buf;
  }
  std::snprintf(buf, sizeof buf, ",%.9g,%.9g\n", r.concentration, r.effective_users);
  out << buf;
}

DataSplit split_users(std::vector<Instance> instances, double eval_fraction) {
  DataSplit out;
  const auto cut = static_cast<std::uint64_t>(std::llround(eval_fraction * 10000.0));
  for (auto& inst : instances) {
    if (inst.tokens.empty()) continue;
    std::stable_sort(inst.tokens.begin(), inst.tokens.end(),
                     [](const TokenRecord& a, const TokenRecord& b) { return a.ts < b.ts; });
    const std::uint64_t h = fnv1a64("holdout:" + std::to_string(inst.tokens.front().user));
    (h % 10000 < cut ? out.eval : out.train).push_back(std::move(inst));
  }
  return out;
}

template <typename T>
void score_instances(ModelParams<T>& params, std::span<const Instance> instances, int token_budget,
                     std::vector<double>& scores, std::vector<int>& labels) {
  for (const auto& b : pack_batches(instances, token_budget)) {
    const auto s = forward(params, b);
    scores.insert(scores.end(), s.begin(), s.end());
    labels.insert(labels.end(), b.labels.begin(), b.labels.end());
  }
}

namespace {

template <typename T>
void shuffle(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.below(i)]);
}

double mean_logloss(const std::vector<double>& s, const std::vector<int>& y) {
  if (s.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const double p = std::clamp(s[i], 1e-12, 1.0 - 1e-12);
    total -= y[i] ? std::log(p) : std::log1p(-p);
  }
  return total / static_cast<double>(s.size());
}

}  // namespace

template <typename T>
TrainResult<T> train(const DataSplit& data, TrainState<T> state, const TrainConfig& cfg,
                     const std::function<void(const TraceRow&)>& on_row) {
  cfg.validate();
  TrainResult<T> res{std::move(state), {}, {}};
  TrainState<T>& st = res.state;
  ModelParams<T>& P = st.params;
  const auto exposures = list_exposures(data.train);
  auto emit = [&](TraceRow r) {
    if (on_row) on_row(r);
    res.trace.push_back(std::move(r));
  };
  auto limit_hit = [&] { return cfg.max_steps > 0 && st.step >= cfg.max_steps; };

  for (int epoch = st.epoch; epoch < cfg.epochs; ++epoch) {
    Rng rng(derive_seed({cfg.seed, 0x5EED, static_cast<std::uint64_t>(epoch)}));
    std::vector<int> order(data.train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    shuffle(order, rng);
    std::vector<Instance> shuffled;
    shuffled.reserve(order.size());
    for (int i : order) shuffled.push_back(data.train[i]);
    const auto batches = pack_batches(shuffled, cfg.token_budget);
    std::vector<ExposureRef> pool = exposures;
    shuffle(pool, rng);
    std::size_t cursor = 0;
    int since_stage2 = 0;

    for (const auto& batch : batches) {
      if (limit_hit()) break;
      if (batch.candidate_positions.empty()) continue;
      const SkewReport skew = measure_skew(batch, P.cfg.token_mode);
      if (cfg.mode == TrainMode::kJoint) {
        P.table.unfreeze();
        P.dense_frozen = false;
        const double loss = joint_step(st, batch, cfg);
        emit({st.step, epoch, "joint", loss, std::nullopt, skew.concentration,
              skew.effective_users});
        continue;
      }
      P.table.freeze();
      P.dense_frozen = false;
      const double loss = stage1_step(st, batch, cfg);
      emit({st.step, epoch, "I", loss, std::nullopt, skew.concentration, skew.effective_users});
      if (++since_stage2 < cfg.stage1_per_stage2 || pool.empty() || limit_hit()) continue;
      since_stage2 = 0;
      std::vector<ExposureRef> picked;
      std::vector<std::uint64_t> users;
      for (int k = 0; k < cfg.exposures_per_batch; ++k) {
        if (cursor == pool.size()) {
          shuffle(pool, rng);
          cursor = 0;
        }
        picked.push_back(pool[cursor++]);
        users.push_back(data.train[picked.back().instance].tokens.front().user);
      }
      P.dense_frozen = true;
      P.table.unfreeze();
      const double loss2 = stage2_step(st, data.train, picked, cfg);
      P.dense_frozen = false;
      const SkewReport s2 = measure_skew(users);
      emit({st.step, epoch, "II", loss2, std::nullopt, s2.concentration, s2.effective_users});
    }
    P.table.unfreeze();
    P.dense_frozen = false;

    std::vector<double> scores;
    std::vector<int> labels;
    score_instances(P, data.eval, cfg.eval_token_budget, scores, labels);
    std::optional<double> a;
    const bool both = std::find(labels.begin(), labels.end(), 0) != labels.end() &&
                      std::find(labels.begin(), labels.end(), 1) != labels.end();
    if (both) a = auc(scores, labels);
    res.eval_auc.push_back(a.value_or(std::numeric_limits<double>::quiet_NaN()));
    emit({st.step, epoch, "eval", mean_logloss(scores, labels), a, 0.0, 0.0});
    st.epoch = epoch + 1;
    if (limit_hit()) break;
  }
  P.table.unfreeze();
  P.dense_frozen = false;
  return res;
}

template <typename T>
TrainResult<T> train(std::span<const Event> log, const ModelConfig& model_cfg,
                     const TrainConfig& cfg, const std::function<void(const TraceRow&)>& on_row) {
  cfg.validate();
  auto instances = instances_from_log(log, FeatureSchema::standard(), model_cfg.table_rows);
  const DataSplit data = split_users(std::move(instances), cfg.eval_fraction);
  TrainState<T> st;
  st.params = ModelParams<T>::init(model_cfg);
  return train<T>(data, std::move(st), cfg, on_row);
}

#define GRAB_INSTANTIATE(T)                                                                       \
  template void dense_update<T>(std::span<Parameter<T>* const>, AdamState<T>&,                    \
                                const TrainConfig&);                                              \
  template Var sparse_phase_loss<T>(num::Tape<T>&, ModelParams<T>&, std::span<const Instance>,    \
                                    std::span<const ExposureRef>, EmbeddingRows<T>&);             \
  template double stage1_step<T>(TrainState<T>&, const PackedBatch&, const TrainConfig&);         \
  template double stage2_step<T>(TrainState<T>&, std::span<const Instance>,                       \
                                 std::span<const ExposureRef>, const TrainConfig&);               \
  template double joint_step<T>(TrainState<T>&, const PackedBatch&, const TrainConfig&);          \
  template void score_instances<T>(ModelParams<T>&, std::span<const Instance>, int,               \
                                   std::vector<double>&, std::vector<int>&);                      \
  template TrainResult<T> train<T>(const DataSplit&, TrainState<T>, const TrainConfig&,           \
                                   const std::function<void(const TraceRow&)>&);                  \
  template TrainResult<T> train<T>(std::span<const Event>, const ModelConfig&, const TrainConfig&, \
                                   const std::function<void(const TraceRow&)>&);

GRAB_INSTANTIATE(float)
GRAB_INSTANTIATE(double)

#undef GRAB_INSTANTIATE

}  // namespace grab
