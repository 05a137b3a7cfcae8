#include "grab/evalr.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "grab/error.hpp"
#include "grab/parallel.hpp"

namespace grab {

namespace {

// 1-based average ranks.
std::vector<double> average_ranks(std::span<const double> x) {
  std::vector<std::size_t> idx(x.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && x[idx[j + 1]] == x[idx[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
    i = j + 1;
  }
  return r;
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

}  // namespace

double auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) fail(ErrorKind::kShape, "auc: scores/labels size mismatch");
  double n_pos = 0, n_neg = 0;
  for (int y : labels) {
    if (y == 1) ++n_pos;
    else if (y == 0) ++n_neg;
    else fail(ErrorKind::kContract, "auc: label not in {0, 1}");
  }
  if (n_pos == 0 || n_neg == 0)
    fail(ErrorKind::kUndefinedMetric, "auc: needs at least one positive and one negative label");
  const auto r = average_ranks(scores);
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < r.size(); ++i)
    if (labels[i] == 1) rank_sum += r[i];
  return (rank_sum - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg);
}

double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2)
    fail(ErrorKind::kUndefinedMetric, "spearman: needs two equally sized samples of length >= 2");
  const auto rx = average_ranks(x);
  const auto ry = average_ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0 || syy == 0) fail(ErrorKind::kUndefinedMetric, "spearman: constant sample");
  return sxy / std::sqrt(sxx * syy);
}

AttentionReport attention_report(std::span<const CapturedAttention> captured,
                                 const BucketConfig& buckets) {
  AttentionReport r;
  r.pos_share.assign(buckets.n_pos, 0.0);
  r.time_share.assign(buckets.n_time, 0.0);
  r.action_share.assign(buckets.n_act, 0.0);
  std::size_t clicked_pairs = 0;
  for (const auto& cap : captured) {
    const auto& vis = cap.pattern.vis;
    const int H = cap.probs.n_head;
    if (cap.probs.p.size() != vis.nnz() * static_cast<std::size_t>(H))
      fail(ErrorKind::kShape, "attention_report: probabilities do not match the pattern");
    for (int q = 0; q < vis.n; ++q) {
      if (cap.kind[q] != TokenView::kFull) continue;
      for (int e = vis.row_ptr[q]; e < vis.row_ptr[q + 1]; ++e) {
        if (cap.kind[vis.col[e]] != TokenView::kPartial) continue;
        double m = 0.0;
        for (int h = 0; h < H; ++h) m += cap.probs.p[e * H + h];
        m /= H;
        r.pos_share[cap.pattern.pos[e]] += m;
        r.time_share[cap.pattern.time[e]] += m;
        r.action_share[cap.pattern.act[e]] += m;
        r.total_mass += m;
        ++r.n_pairs;
        if (cap.pattern.act[e] == static_cast<int>(Action::kClick)) ++clicked_pairs;
      }
    }
  }
  if (r.total_mass > 0) {
    for (auto* v : {&r.pos_share, &r.time_share, &r.action_share})
      for (double& s : *v) s /= r.total_mass;
  }
  r.clicked_mass_share = r.action_share[static_cast<int>(Action::kClick)];
  if (r.n_pairs > 0)
    r.clicked_key_share = static_cast<double>(clicked_pairs) / static_cast<double>(r.n_pairs);
  return r;
}

template <typename T>
AttentionReport attention_report(ModelParams<T>& params, std::span<const PackedBatch> batches) {
  std::vector<CapturedAttention> all;
  for (const auto& b : batches) {
    std::vector<CapturedAttention> cap;
    forward(params, b, &cap);
    for (auto& c : cap) all.push_back(std::move(c));
  }
  return attention_report(all, params.cfg.buckets);
}

std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::kFull: return "full";
    case Variant::kPartialOnly: return "partial_only";
    case Variant::kFullOnly: return "full_only";
    case Variant::kNoRelPos: return "no_rel_pos";
    case Variant::kNoRelTime: return "no_rel_time";
    case Variant::kNoRelAction: return "no_rel_action";
    case Variant::kSingleChannel: return "single_channel";
    case Variant::kNoTargetMix: return "no_target_mix";
    case Variant::kNoSts: return "no_sts";
  }
  return "full";
}

std::vector<Variant> all_variants() {
  return {Variant::kFull,        Variant::kPartialOnly,   Variant::kFullOnly,
          Variant::kNoRelPos,    Variant::kNoRelTime,     Variant::kNoRelAction,
          Variant::kSingleChannel, Variant::kNoTargetMix, Variant::kNoSts};
}

Variant parse_variant(std::string_view s) {
  for (Variant v : all_variants())
    if (to_string(v) == s) return v;
  fail(ErrorKind::kConfig, "unknown ablation variant '" + std::string(s) + "'");
}

void apply_variant(Variant v, ModelConfig& model, TrainConfig& train) {
  switch (v) {
    case Variant::kFull: break;
    case Variant::kPartialOnly: model.token_mode = TokenMode::kPartialOnly; break;
    case Variant::kFullOnly: model.token_mode = TokenMode::kFullOnly; break;
    case Variant::kNoRelPos: model.rel_pos = false; break;
    case Variant::kNoRelTime: model.rel_time = false; break;
    case Variant::kNoRelAction: model.rel_action = false; break;
    case Variant::kSingleChannel: model.n_channels = 1; break;
    case Variant::kNoTargetMix: model.target_mix = false; break;
    case Variant::kNoSts: train.mode = TrainMode::kJoint; break;
  }
}

double median(std::vector<double> v) {
  if (v.empty()) fail(ErrorKind::kUndefinedMetric, "median of an empty sample");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

namespace {

struct AblationJob {
  AblationRow row;
  std::optional<AttentionReport> attention;
};

template <typename T>
AblationJob run_job(const DataSplit& data, ModelConfig model, TrainConfig train, Variant v,
                    std::uint64_t seed) {
  model.seed = seed;
  train.seed = seed;
  apply_variant(v, model, train);
  TrainState<T> st;
  st.params = ModelParams<T>::init(model);
  auto res = grab::train<T>(data, std::move(st), train);
  AblationJob job;
  job.row.variant = v;
  job.row.seed = seed;
  job.row.auc = res.eval_auc.empty() ? std::numeric_limits<double>::quiet_NaN() : res.eval_auc.back();
  double conc = 0.0;
  std::size_t n = 0;
  for (const auto& r : res.trace)
    if (r.phase == "I" || r.phase == "joint") {
      conc += r.concentration;
      ++n;
    }
  job.row.mean_concentration = n ? conc / static_cast<double>(n) : 0.0;
  if (v == Variant::kFull) {
    const auto batches = pack_batches(data.eval, train.eval_token_budget);
    job.attention = attention_report(res.state.params, std::span<const PackedBatch>(batches));
  }
  return job;
}

DataSplit split_log(std::span<const Event> log, const ModelConfig& model, const TrainConfig& train) {
  auto instances = instances_from_log(log, FeatureSchema::standard(), model.table_rows);
  return split_users(std::move(instances), train.eval_fraction);
}

}  // namespace

AblationResult run_ablation(const AblationSpec& spec, std::span<const Event> log) {
  spec.model.validate();
  spec.train.validate();
  if (spec.variants.empty() || spec.seeds.empty())
    fail(ErrorKind::kConfig, "ablation: needs at least one variant and one seed");
  const DataSplit data = split_log(log, spec.model, spec.train);
  std::vector<std::pair<Variant, std::uint64_t>> jobs;
  for (Variant v : spec.variants)
    for (std::uint64_t s : spec.seeds) jobs.emplace_back(v, s);
  std::vector<AblationJob> out(jobs.size());
  parallel_for(jobs.size(), spec.threads, [&](std::size_t i) {
    const auto [v, s] = jobs[i];
    out[i] = spec.model.precision == num::Precision::kDouble
                 ? run_job<double>(data, spec.model, spec.train, v, s)
                 : run_job<float>(data, spec.model, spec.train, v, s);
  });
  AblationResult res;
  for (auto& j : out) {
    res.rows.push_back(j.row);
    if (j.attention) res.full_attention.push_back(std::move(*j.attention));
  }
  return res;
}

AblationResult run_ablation(const AblationSpec& spec) {
  const auto log = generate_log(spec.gen, spec.threads);
  return run_ablation(spec, log);
}

void write_ablation_csv(std::ostream& out, std::span<const AblationRow> rows) {
  out << "variant,seed,auc,mean_concentration\n";
  for (const auto& r : rows)
    out << to_string(r.variant) << ',' << r.seed << ',' << fmt(r.auc) << ','
        << fmt(r.mean_concentration) << '\n';
}

namespace {

std::string bucket_name(const std::vector<int>& edges, int len) {
  int lo = 0;
  for (int e : edges) {
    if (len <= e) return std::to_string(lo) + "-" + std::to_string(e);
    lo = e + 1;
  }
  return std::to_string(lo) + "+";
}

std::vector<std::string> bucket_names(const std::vector<int>& edges) {
  std::vector<std::string> names;
  int lo = 0;
  for (int e : edges) {
    names.push_back(std::to_string(lo) + "-" + std::to_string(e));
    lo = e + 1;
  }
  names.push_back(std::to_string(lo) + "+");
  return names;
}

template <typename T>
std::vector<ScalingRow> run_scale_job(const DataSplit& data, const ScalingSpec& spec,
                                      const ScaleConfig& sc, std::uint64_t seed) {
  ModelConfig model = spec.model;
  TrainConfig train = spec.train;
  model.n_layer = sc.n_layer;
  model.n_head = sc.n_head;
  model.d_model = sc.d_model;
  model.seed = seed;
  train.seed = seed;
  TrainState<T> st;
  st.params = ModelParams<T>::init(model);
  auto res = grab::train<T>(data, std::move(st), train);
  std::map<std::string, std::pair<std::vector<double>, std::vector<int>>> by_bucket;
  std::vector<double> all_s;
  std::vector<int> all_y;
  for (const auto& b : pack_batches(data.eval, train.eval_token_budget)) {
    const auto s = forward(res.state.params, b);
    for (std::size_t k = 0; k < s.size(); ++k) {
      const int len = b.layout.tindex[b.candidate_positions[k]];
      auto& slot = by_bucket[bucket_name(spec.length_edges, len)];
      slot.first.push_back(s[k]);
      slot.second.push_back(b.labels[k]);
      all_s.push_back(s[k]);
      all_y.push_back(b.labels[k]);
    }
  }
  auto safe_auc = [](const std::vector<double>& s, const std::vector<int>& y) -> std::optional<double> {
    const bool pos = std::find(y.begin(), y.end(), 1) != y.end();
    const bool neg = std::find(y.begin(), y.end(), 0) != y.end();
    if (!pos || !neg) return std::nullopt;
    return auc(s, y);
  };
  std::vector<ScalingRow> rows;
  rows.push_back({sc, seed, "all", all_s.size(), safe_auc(all_s, all_y)});
  for (const auto& n : bucket_names(spec.length_edges)) {
    auto it = by_bucket.find(n);
    if (it == by_bucket.end()) {
      rows.push_back({sc, seed, n, 0, std::nullopt});
      continue;
    }
    rows.push_back({sc, seed, n, it->second.first.size(), safe_auc(it->second.first, it->second.second)});
  }
  return rows;
}

}  // namespace

std::vector<ScalingRow> run_scaling(const ScalingSpec& spec, std::span<const Event> log) {
  spec.train.validate();
  if (spec.grid.empty() || spec.seeds.empty())
    fail(ErrorKind::kConfig, "scale: needs at least one grid point and one seed");
  for (std::size_t i = 1; i < spec.length_edges.size(); ++i)
    if (spec.length_edges[i] <= spec.length_edges[i - 1])
      fail(ErrorKind::kConfig, "scale.length_edges: must be strictly increasing");
  for (const auto& sc : spec.grid) {
    ModelConfig m = spec.model;
    m.n_layer = sc.n_layer;
    m.n_head = sc.n_head;
    m.d_model = sc.d_model;
    m.validate();
  }
  const DataSplit data = split_log(log, spec.model, spec.train);
  std::vector<std::pair<ScaleConfig, std::uint64_t>> jobs;
  for (const auto& sc : spec.grid)
    for (std::uint64_t s : spec.seeds) jobs.emplace_back(sc, s);
  std::vector<std::vector<ScalingRow>> out(jobs.size());
  parallel_for(jobs.size(), spec.threads, [&](std::size_t i) {
    out[i] = spec.model.precision == num::Precision::kDouble
                 ? run_scale_job<double>(data, spec, jobs[i].first, jobs[i].second)
                 : run_scale_job<float>(data, spec, jobs[i].first, jobs[i].second);
  });
  std::vector<ScalingRow> rows;
  for (auto& v : out) rows.insert(rows.end(), v.begin(), v.end());
  return rows;
}

std::vector<ScalingRow> run_scaling(const ScalingSpec& spec) {
  const auto log = generate_log(spec.gen, spec.threads);
  return run_scaling(spec, log);
}

void write_scaling_csv(std::ostream& out, std::span<const ScalingRow> rows) {
  out << "n_layer,n_head,d_model,seed,bucket,n,auc\n";
  for (const auto& r : rows) {
    out << r.config.n_layer << ',' << r.config.n_head << ',' << r.config.d_model << ',' << r.seed
        << ',' << r.bucket << ',' << r.n << ',';
    if (r.auc) out << fmt(*r.auc);
    out << '\n';
  }
}

template AttentionReport attention_report<float>(ModelParams<float>&, std::span<const PackedBatch>);
template AttentionReport attention_report<double>(ModelParams<double>&, std::span<const PackedBatch>);

}  // namespace grab
