#pragma once

// Brute-force reference implementations used as test oracles. Each one is
// written directly from the defining formula, sharing no code with src/.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string_view>
#include <vector>

#include "grab/packing.hpp"
#include "grab/rng.hpp"

namespace oracle {

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

struct RandomLayout {
  std::vector<int> seg, local, tindex;
  std::vector<grab::TokenView> kind;
  std::vector<std::int64_t> ts;
};

// Contiguous segments of random length, random Partial/Full kinds and
// non-decreasing timestamps within each segment.
inline RandomLayout random_layout(grab::Rng& rng, int L) {
  RandomLayout r;
  int s = 0;
  while (static_cast<int>(r.seg.size()) < L) {
    const int len = std::min<int>(L - static_cast<int>(r.seg.size()), 1 + static_cast<int>(rng.below(24)));
    std::int64_t t = static_cast<std::int64_t>(rng.below(1000));
    int partials = 0;
    for (int i = 0; i < len; ++i) {
      r.seg.push_back(s);
      r.local.push_back(i + 1);
      const bool full = rng.bernoulli(0.3);
      r.kind.push_back(full ? grab::TokenView::kFull : grab::TokenView::kPartial);
      if (!full) ++partials;
      r.tindex.push_back(partials);
      if (rng.bernoulli(0.7)) t += static_cast<std::int64_t>(rng.below(5000));
      r.ts.push_back(t);
    }
    ++s;
  }
  return r;
}

inline grab::Layout to_layout(const RandomLayout& r) {
  grab::Layout l;
  l.seg = r.seg;
  l.local = r.local;
  l.kind = r.kind;
  l.tindex = r.tindex;
  l.ts = r.ts;
  return l;
}

inline bool causal(const RandomLayout& r, int p, int q) {
  return r.seg[p] == r.seg[q] && r.local[q] <= r.local[p];
}

// Partial queries see earlier-or-equal Partial keys; Full queries see
// earlier-or-equal Partial keys and themselves; never across users.
inline bool het(const RandomLayout& r, int p, int q) {
  if (r.seg[p] != r.seg[q]) return false;
  const bool pf = r.kind[p] == grab::TokenView::kFull;
  const bool qf = r.kind[q] == grab::TokenView::kFull;
  if (qf) return pf && p == q;
  return r.tindex[q] <= r.tindex[p];
}

inline bool window(const RandomLayout& r, int p, int q, std::optional<int> lw, std::optional<std::int64_t> tw) {
  if (!causal(r, p, q)) return false;
  if (lw && r.tindex[p] - r.tindex[q] > *lw) return false;
  if (tw && r.ts[p] - r.ts[q] > *tw) return false;
  return true;
}

// Exact pairwise AUC with half credit for ties, as a rational count.
inline double pairwise_auc(const std::vector<double>& s, const std::vector<int>& y) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (y[i] == 1 && y[j] == 0) {
        den += 1.0;
        num += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
      }
  return num / den;
}

inline double effective_users(const std::vector<std::uint64_t>& users) {
  std::map<std::uint64_t, double> n;
  for (auto u : users) n[u] += 1.0;
  double s = 0.0, s2 = 0.0;
  for (const auto& [u, c] : n) {
    s += c;
    s2 += c * c;
  }
  return s * s / s2;
}

inline double concentration(const std::vector<std::uint64_t>& users) {
  std::map<std::uint64_t, double> n;
  for (auto u : users) n[u] += 1.0;
  double mx = 0.0;
  for (const auto& [u, c] : n) mx = std::max(mx, c);
  return mx / static_cast<double>(users.size());
}

inline double relu(double x) { return x > 0 ? x : 0; }
inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace oracle
