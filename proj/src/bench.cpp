#include "grab/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>

#include "grab/alloc_counter.hpp"
#include "grab/error.hpp"
#include "grab/rab.hpp"
#include "grab/rng.hpp"

namespace grab {

namespace {

template <typename F>
double best_seconds(int repeats, F&& f) {
  double best = std::numeric_limits<double>::infinity();
  for (int r = 0; r < repeats; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    f();
    const auto t1 = std::chrono::steady_clock::now();
    best = std::min(best, std::chrono::duration<double>(t1 - t0).count());
  }
  return best;
}

template <typename T>
void forward_rows(const BenchConfig& cfg, const ModelConfig& model, BenchResult& out) {
  auto params = ModelParams<T>::init(model);
  const auto instances = bench_instances(cfg, model.table_rows);
  const PackedBatch packed = pack(instances);
  const PaddedBatch padded = pad_baseline(instances, cfg.l_max);
  const std::size_t real = static_cast<std::size_t>(packed.length());

  BenchRow p{"forward", "packed", real, real};
  {
    AllocScope scope;
    p.seconds = best_seconds(cfg.repeats, [&] { (void)forward(params, packed); });
    p.peak_words = scope.peak_words();
  }
  BenchRow d{"forward", "padded", padded.real_tokens(), padded.slots()};
  {
    AllocScope scope;
    d.seconds = best_seconds(cfg.repeats, [&] { (void)score_padded(params, padded, RabPath::kFast); });
    d.peak_words = scope.peak_words();
  }
  p.tokens_per_sec = static_cast<double>(real) / p.seconds;
  d.tokens_per_sec = static_cast<double>(d.real_tokens) / d.seconds;
  out.waste_ratio = static_cast<double>(d.slots) / static_cast<double>(real);
  out.packed_speedup = p.tokens_per_sec / d.tokens_per_sec;
  out.rows.push_back(p);
  out.rows.push_back(d);
}

}  // namespace

std::vector<int> bench_lengths(const BenchConfig& cfg) {
  Rng rng(derive_seed({cfg.seed, 0xBE4C}));
  std::vector<int> out(static_cast<std::size_t>(cfg.n_instances));
  for (auto& len : out) {
    if (cfg.lengths == "fixed") {
      len = cfg.l_max;
    } else if (cfg.lengths == "uniform") {
      len = cfg.min_len + static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.l_max - cfg.min_len + 1)));
    } else {
      // Pareto with tail index 1.2.
      double u = rng.uniform();
      while (u <= 0.0) u = rng.uniform();
      const double x = cfg.min_len * std::pow(u, -1.0 / 1.2);
      len = static_cast<int>(std::min<double>(cfg.l_max, std::floor(x)));
    }
  }
  return out;
}

std::vector<Instance> bench_instances(const BenchConfig& cfg, std::uint32_t table_rows) {
  const auto schema = FeatureSchema::standard();
  const auto lengths = bench_lengths(cfg);
  Rng rng(derive_seed({cfg.seed, 0xE7E5}));
  std::vector<Event> events;
  for (std::size_t u = 0; u < lengths.size(); ++u) {
    std::int64_t ts = static_cast<std::int64_t>(rng.below(86400));
    for (int i = 0; i < lengths[u]; ++i) {
      Event e;
      e.user_id = u;
      ts += 1 + static_cast<std::int64_t>(rng.geometric(1.0 / 120.0));
      e.ts = ts;
      e.is_candidate = i + 1 == lengths[u];
      e.action = e.is_candidate ? Action::kExposure : static_cast<Action>(rng.below(kNumActions));
      e.fields[field::kUserId] = std::to_string(u);
      e.fields[field::kUserGroup] = std::to_string(u % 16);
      e.fields[field::kCategory] = std::to_string(rng.below(32));
      e.fields[field::kItemId] = std::to_string(rng.below(2048));
      e.fields[field::kHour] = std::to_string((ts / 3600) % 24);
      if (e.is_candidate) e.label = static_cast<int>(rng.below(2));
      events.push_back(std::move(e));
    }
  }
  return instances_from_log(events, schema, table_rows);
}

BenchResult run_bench(const BenchConfig& cfg, const ModelConfig& model) {
  model.validate();
  require(model.n_channels == 1, ErrorKind::kConfig, "model.n_channels: bench uses one channel");
  BenchResult out;
  if (model.precision == num::Precision::kSingle) forward_rows<float>(cfg, model, out);
  else forward_rows<double>(cfg, model, out);

  const int L = cfg.rab_len;
  const int dh = cfg.rab_d_head;
  const int nh = cfg.rab_n_head;
  const BucketConfig& bc = model.buckets;
  Rng rng(derive_seed({cfg.seed, 0x4AB}));
  auto fill = [&](int r, int c) {
    num::Mat<double> m(r, c);
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) m(i, j) = rng.uniform(-1.0, 1.0);
    return m;
  };
  Layout layout;
  std::vector<Action> actions;
  std::int64_t ts = 0;
  for (int i = 0; i < L; ++i) {
    layout.seg.push_back(0);
    layout.local.push_back(i + 1);
    layout.kind.push_back(TokenView::kPartial);
    ts += static_cast<std::int64_t>(rng.below(600));
    layout.ts.push_back(ts);
    actions.push_back(static_cast<Action>(rng.below(kNumActions)));
  }
  layout.assign_tindex();
  const num::MaskMat mask = build_causal_mask(layout.seg, layout.local).allow;
  const PairBuckets buckets = compute_pair_buckets(layout, actions, mask, bc);
  const num::Mat<double> q = fill(L, nh * dh);
  const num::Mat<double> k = fill(L, nh * dh);
  std::vector<HeadCodebooks<double>> cb;
  for (int h = 0; h < nh; ++h) cb.push_back({fill(bc.n_pos, dh), fill(bc.n_act, dh), fill(bc.n_time, dh)});
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  for (RabPath path : {RabPath::kNaive, RabPath::kFast}) {
    BenchRow r{"rab", std::string(to_string(path)), static_cast<std::size_t>(L), static_cast<std::size_t>(L)};
    AllocScope scope;
    r.seconds = best_seconds(cfg.repeats, [&] {
      if (path == RabPath::kNaive) (void)rab_logits_naive(q, k, buckets, cb, mask, scale);
      else (void)rab_logits_fast(q, k, buckets, cb, mask, scale);
    });
    r.peak_words = scope.peak_words();
    r.tokens_per_sec = L / r.seconds;
    out.rows.push_back(r);
  }
  out.fast_table_words = static_cast<std::size_t>(L) * (bc.n_pos + bc.n_act + bc.n_time) * nh;
  out.naive_tensor_words = static_cast<std::size_t>(L) * L * dh;
  return out;
}

void write_bench_csv(const BenchResult& r, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::kIo, "cannot write " + path.string());
  out << "kernel,variant,real_tokens,slots,seconds,tokens_per_sec,peak_words\n";
  out.precision(9);
  for (const auto& row : r.rows)
    out << row.kernel << ',' << row.variant << ',' << row.real_tokens << ',' << row.slots << ','
        << row.seconds << ',' << row.tokens_per_sec << ',' << row.peak_words << '\n';
  if (!out) fail(ErrorKind::kIo, "write failed: " + path.string());
}

}  // namespace grab
