#pragma once

// Random inputs shared by unit and acceptance tests.

#include <cstdint>
#include <vector>

#include "grab/cama.hpp"
#include "grab/packing.hpp"
#include "grab/rab.hpp"
#include "grab/rng.hpp"
#include "grab/sparse.hpp"

namespace fixture {

template <typename T>
grab::num::Mat<T> random_mat(grab::Rng& rng, int r, int c, double a = 1.0) {
  grab::num::Mat<T> m(r, c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) m(i, j) = static_cast<T>(rng.uniform(-a, a));
  return m;
}

inline std::vector<grab::SparseId> random_ids(grab::Rng& rng, const grab::FeatureSchema& schema,
                                              grab::TokenView view, std::uint32_t rows) {
  std::vector<grab::SparseId> ids;
  for (int slot : schema.view_slots(view)) ids.push_back({slot, static_cast<std::uint32_t>(rng.below(rows))});
  return ids;
}

// Re-draws the feature rows, action and channel of a token, keeping its
// position (user, ts, kind, label).
inline void scramble(grab::Rng& rng, grab::TokenRecord& t, std::uint32_t rows, int n_channels) {
  const auto schema = grab::FeatureSchema::standard();
  t.ids_partial = random_ids(rng, schema, grab::TokenView::kPartial, rows);
  t.ids_full = random_ids(rng, schema, grab::TokenView::kFull, rows);
  if (t.kind == grab::TokenView::kPartial) t.action = static_cast<grab::Action>(rng.below(grab::kNumActions));
  t.channel = static_cast<int>(rng.below(static_cast<std::uint64_t>(n_channels)));
}

struct InstanceShape {
  int n_users = 3;
  int max_history = 12;
  int max_candidates = 3;
  std::uint32_t table_rows = 64;
  int n_channels = 1;
};

// Per-user instances: history then candidates, timestamps strictly
// increasing so instance order equals packed order.
inline std::vector<grab::Instance> random_instances(grab::Rng& rng, const InstanceShape& s,
                                                    std::uint64_t first_user = 0) {
  std::vector<grab::Instance> out;
  for (int u = 0; u < s.n_users; ++u) {
    grab::Instance inst;
    const int nh = static_cast<int>(rng.below(static_cast<std::uint64_t>(s.max_history + 1)));
    const int nc = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(s.max_candidates)));
    std::int64_t ts = static_cast<std::int64_t>(rng.below(1000));
    for (int i = 0; i < nh + nc; ++i) {
      grab::TokenRecord t;
      t.user = first_user + static_cast<std::uint64_t>(u);
      ts += 1 + static_cast<std::int64_t>(rng.below(900));
      t.ts = ts;
      t.kind = i < nh ? grab::TokenView::kPartial : grab::TokenView::kFull;
      if (t.kind == grab::TokenView::kFull) t.label = static_cast<int>(rng.below(2));
      scramble(rng, t, s.table_rows, s.n_channels);
      inst.tokens.push_back(std::move(t));
    }
    out.push_back(std::move(inst));
  }
  return out;
}

// A layout with random kinds, contiguous users, per-token actions and the
// model mask, for kernel-level RAB tests.
struct RabCase {
  grab::Layout layout;
  std::vector<grab::Action> actions;
  grab::num::MaskMat mask;
  grab::PairBuckets buckets;
};

inline RabCase random_rab_case(grab::Rng& rng, int L, const grab::BucketConfig& bc, const grab::WindowSpec& w) {
  RabCase c;
  int seg = 0, local = 0;
  std::int64_t ts = 0;
  for (int p = 0; p < L; ++p) {
    if (p > 0 && rng.bernoulli(0.08)) {
      ++seg;
      local = 0;
      ts = static_cast<std::int64_t>(rng.below(100));
    }
    c.layout.seg.push_back(seg);
    c.layout.local.push_back(++local);
    c.layout.kind.push_back(rng.bernoulli(0.25) ? grab::TokenView::kFull : grab::TokenView::kPartial);
    ts += static_cast<std::int64_t>(rng.below(3000));
    c.layout.ts.push_back(ts);
    c.actions.push_back(static_cast<grab::Action>(rng.below(grab::kNumActions)));
  }
  c.layout.assign_tindex();
  c.mask = grab::build_model_mask(c.layout, w).allow;
  c.buckets = grab::compute_pair_buckets(c.layout, c.actions, c.mask, bc);
  return c;
}

}  // namespace fixture
