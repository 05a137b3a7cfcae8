#include "grab/packing.hpp"

#include <algorithm>
#include <map>
#include <numeric>
#include <unordered_map>

#include "grab/error.hpp"

namespace grab {

void Layout::assign_tindex() {
  tindex.assign(seg.size(), 0);
  int count = 0;
  for (std::size_t p = 0; p < seg.size(); ++p) {
    if (p == 0 || seg[p] != seg[p - 1]) count = 0;
    if (kind[p] == TokenView::kPartial) ++count;
    tindex[p] = count;
  }
}

PackedBatch pack(std::span<const Instance> instances) {
  std::vector<std::uint64_t> order;
  std::unordered_map<std::uint64_t, std::vector<const TokenRecord*>> by_user;
  for (const auto& inst : instances) {
    if (inst.tokens.empty()) continue;
    const std::uint64_t user = inst.tokens.front().user;
    for (const auto& t : inst.tokens)
      if (t.user != user)
        fail(ErrorKind::kContract, "pack: instance mixes users " + std::to_string(user) + " and " +
                                       std::to_string(t.user) + " in one segment");
    auto [it, inserted] = by_user.try_emplace(user);
    if (inserted) order.push_back(user);
    for (const auto& t : inst.tokens) it->second.push_back(&t);
  }

  PackedBatch b;
  for (std::size_t s = 0; s < order.size(); ++s) {
    auto& toks = by_user[order[s]];
    std::stable_sort(toks.begin(), toks.end(),
                     [](const TokenRecord* a, const TokenRecord* c) { return a->ts < c->ts; });
    b.seg_user.push_back(order[s]);
    int local = 0;
    for (const TokenRecord* t : toks) {
      const int p = b.length();
      b.layout.seg.push_back(static_cast<int>(s));
      b.layout.local.push_back(++local);
      b.layout.kind.push_back(t->kind);
      b.layout.ts.push_back(t->ts);
      b.tokens.push_back(*t);
      if (t->kind == TokenView::kFull) {
        if (!t->label)
          fail(ErrorKind::kContract, "pack: candidate token of user " + std::to_string(t->user) +
                                         " has no label");
        b.candidate_positions.push_back(p);
        b.labels.push_back(*t->label);
      }
    }
  }
  b.layout.assign_tindex();
  return b;
}

std::vector<PackedBatch> pack_batches(std::span<const Instance> instances, int token_budget) {
  if (token_budget < 1) fail(ErrorKind::kConfig, "pack_batches: token_budget must be >= 1");
  // Group instances per user first so a segment is never split.
  std::vector<std::uint64_t> order;
  std::unordered_map<std::uint64_t, std::vector<Instance>> by_user;
  std::unordered_map<std::uint64_t, std::size_t> user_tokens;
  for (const auto& inst : instances) {
    if (inst.tokens.empty()) continue;
    const std::uint64_t u = inst.tokens.front().user;
    auto [it, inserted] = by_user.try_emplace(u);
    if (inserted) order.push_back(u);
    it->second.push_back(inst);
    user_tokens[u] += inst.tokens.size();
  }
  std::vector<PackedBatch> out;
  std::vector<Instance> current;
  std::size_t current_tokens = 0;
  for (std::uint64_t u : order) {
    const std::size_t n = user_tokens[u];
    if (!current.empty() && current_tokens + n > static_cast<std::size_t>(token_budget)) {
      out.push_back(pack(current));
      current.clear();
      current_tokens = 0;
    }
    for (auto& inst : by_user[u]) current.push_back(std::move(inst));
    current_tokens += n;
  }
  if (!current.empty()) out.push_back(pack(current));
  return out;
}

void WindowSpec::validate() const {
  if (length && *length < 1) fail(ErrorKind::kConfig, "window length L_w must be >= 1");
  if (time && *time < 0) fail(ErrorKind::kConfig, "time window T_w must be >= 0");
}

namespace {

AttentionMask materialize(int n, std::function<bool(int, int)> pred) {
  AttentionMask m;
  m.allow.resize(n, n);
  for (int p = 0; p < n; ++p)
    for (int q = 0; q < n; ++q) m.allow(p, q) = pred(p, q);
  m.predicate = std::move(pred);
  return m;
}

template <typename A, typename B>
void check_len(const A& a, const B& b, const char* op) {
  if (a.size() != b.size()) fail(ErrorKind::kShape, std::string(op) + ": length mismatch");
}

bool window_ok(int p, int q, const std::vector<int>& seg, const std::vector<int>& local,
               const std::vector<int>& tindex, const std::vector<std::int64_t>& ts,
               const WindowSpec& w) {
  if (seg[p] != seg[q] || local[q] > local[p]) return false;
  if (w.length && tindex[p] - tindex[q] > *w.length) return false;
  if (w.time && ts[p] - ts[q] > *w.time) return false;
  return true;
}

bool het_ok(int p, int q, const std::vector<TokenView>& kind, const std::vector<int>& tindex,
            const std::vector<int>& seg) {
  if (seg[p] != seg[q]) return false;
  if (kind[q] == TokenView::kPartial) return tindex[q] <= tindex[p];
  return kind[p] == TokenView::kFull && p == q;
}

}  // namespace

AttentionMask build_causal_mask(std::span<const int> seg, std::span<const int> local) {
  check_len(seg, local, "build_causal_mask");
  auto s = std::make_shared<std::vector<int>>(seg.begin(), seg.end());
  auto l = std::make_shared<std::vector<int>>(local.begin(), local.end());
  return materialize(static_cast<int>(seg.size()), [s, l](int p, int q) {
    return (*s)[p] == (*s)[q] && (*l)[q] <= (*l)[p];
  });
}

AttentionMask build_het_mask(std::span<const TokenView> kind, std::span<const int> tindex,
                             std::span<const int> seg) {
  check_len(kind, tindex, "build_het_mask");
  check_len(kind, seg, "build_het_mask");
  auto k = std::make_shared<std::vector<TokenView>>(kind.begin(), kind.end());
  auto t = std::make_shared<std::vector<int>>(tindex.begin(), tindex.end());
  auto s = std::make_shared<std::vector<int>>(seg.begin(), seg.end());
  return materialize(static_cast<int>(kind.size()),
                     [k, t, s](int p, int q) { return het_ok(p, q, *k, *t, *s); });
}

AttentionMask build_window_mask(std::span<const int> seg, std::span<const int> local,
                                std::span<const int> tindex, std::span<const std::int64_t> ts,
                                const WindowSpec& window) {
  window.validate();
  check_len(seg, local, "build_window_mask");
  check_len(seg, tindex, "build_window_mask");
  check_len(seg, ts, "build_window_mask");
  auto s = std::make_shared<std::vector<int>>(seg.begin(), seg.end());
  auto l = std::make_shared<std::vector<int>>(local.begin(), local.end());
  auto t = std::make_shared<std::vector<int>>(tindex.begin(), tindex.end());
  auto x = std::make_shared<std::vector<std::int64_t>>(ts.begin(), ts.end());
  return materialize(static_cast<int>(seg.size()), [s, l, t, x, window](int p, int q) {
    return window_ok(p, q, *s, *l, *t, *x, window);
  });
}

AttentionMask build_window_mask(std::span<const int> seg, std::span<const int> local,
                                std::span<const std::int64_t> ts, const WindowSpec& window) {
  return build_window_mask(seg, local, local, ts, window);
}

AttentionMask all_visible(int n) {
  return materialize(n, [](int, int) { return true; });
}

AttentionMask compose_masks(std::span<const AttentionMask> masks) {
  if (masks.empty()) fail(ErrorKind::kShape, "compose_masks: no masks");
  const int n = masks[0].size();
  for (const auto& m : masks)
    if (m.size() != n) fail(ErrorKind::kShape, "compose_masks: shape mismatch");
  AttentionMask out;
  out.allow = masks[0].allow;
  for (std::size_t i = 1; i < masks.size(); ++i) out.allow = out.allow.array() && masks[i].allow.array();
  std::vector<std::function<bool(int, int)>> preds;
  for (const auto& m : masks) preds.push_back(m.predicate);
  out.predicate = [preds](int p, int q) {
    for (const auto& f : preds)
      if (!f(p, q)) return false;
    return true;
  };
  return out;
}

AttentionMask build_model_mask(const Layout& layout, const WindowSpec& window) {
  const AttentionMask parts[] = {
      build_causal_mask(layout.seg, layout.local),
      build_het_mask(layout.kind, layout.tindex, layout.seg),
      build_window_mask(layout.seg, layout.local, layout.tindex, layout.ts, window),
  };
  return compose_masks(parts);
}

VisibilityPattern pattern_from_mask(const AttentionMask& mask) {
  VisibilityPattern pat;
  pat.n = mask.size();
  for (int p = 0; p < pat.n; ++p) {
    for (int q = 0; q < pat.n; ++q)
      if (mask.allow(p, q)) pat.col.push_back(q);
    pat.row_ptr.push_back(static_cast<int>(pat.col.size()));
  }
  return pat;
}

VisibilityPattern build_model_pattern(const Layout& layout, const WindowSpec& window) {
  window.validate();
  VisibilityPattern pat;
  pat.n = layout.size();
  int start = 0;
  for (int p = 0; p < pat.n; ++p) {
    if (p > 0 && layout.seg[p] != layout.seg[p - 1]) start = p;
    for (int q = start; q <= p; ++q) {
      if (layout.seg[q] != layout.seg[p]) continue;
      if (window_ok(p, q, layout.seg, layout.local, layout.tindex, layout.ts, window) &&
          het_ok(p, q, layout.kind, layout.tindex, layout.seg))
        pat.col.push_back(q);
    }
    pat.row_ptr.push_back(static_cast<int>(pat.col.size()));
  }
  return pat;
}

std::size_t PaddedBatch::real_tokens() const {
  std::size_t n = 0;
  for (const auto& r : rows) n += static_cast<std::size_t>(r.length());
  return n;
}

double PaddedBatch::waste_fraction() const {
  if (slots() == 0) return 0.0;
  return 1.0 - static_cast<double>(real_tokens()) / static_cast<double>(slots());
}

num::MaskMat PaddedBatch::row_mask(std::size_t r, const WindowSpec& window) const {
  const AttentionMask m = build_model_mask(rows.at(r).layout, window);
  num::MaskMat out = num::MaskMat::Constant(l_max, l_max, false);
  out.topLeftCorner(m.size(), m.size()) = m.allow;
  return out;
}

PaddedBatch pad_baseline(std::span<const Instance> instances, int l_max) {
  if (l_max < 1) fail(ErrorKind::kConfig, "pad_baseline: L_max must be >= 1");
  PaddedBatch b;
  b.l_max = l_max;
  for (std::size_t i = 0; i < instances.size(); ++i) {
    if (static_cast<int>(instances[i].tokens.size()) > l_max)
      fail(ErrorKind::kContract, "pad_baseline: instance " + std::to_string(i) + " has " +
                                     std::to_string(instances[i].tokens.size()) +
                                     " tokens, longer than L_max " + std::to_string(l_max));
    b.rows.push_back(pack(instances.subspan(i, 1)));
  }
  return b;
}

std::vector<Instance> instances_from_log(std::span<const Event> events, const FeatureSchema& schema,
                                         std::uint32_t table_rows) {
  std::vector<std::uint64_t> order;
  std::unordered_map<std::uint64_t, Instance> by_user;
  for (const auto& e : events) {
    auto [it, inserted] = by_user.try_emplace(e.user_id);
    if (inserted) order.push_back(e.user_id);
    TokenRecord t;
    t.user = e.user_id;
    t.ts = e.ts;
    t.action = e.action;
    t.channel = e.channel;
    t.kind = e.is_candidate ? TokenView::kFull : TokenView::kPartial;
    t.ids_partial = expand_event(e, schema, TokenView::kPartial, table_rows);
    t.ids_full = expand_event(e, schema, TokenView::kFull, table_rows);
    t.label = e.label;
    it->second.tokens.push_back(std::move(t));
  }
  std::vector<Instance> out;
  out.reserve(order.size());
  for (std::uint64_t u : order) out.push_back(std::move(by_user[u]));
  return out;
}

}  // namespace grab
