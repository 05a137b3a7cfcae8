#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "grab/datagen.hpp"
#include "grab/numcore.hpp"
#include "grab/sparse.hpp"

namespace grab {

// One token before packing: an event with both of its feature views
// expanded. kind decides its mask role (Partial = history, Full = candidate).
struct TokenRecord {
  std::uint64_t user = 0;
  std::int64_t ts = 0;
  Action action = Action::kExposure;
  int channel = 0;
  TokenView kind = TokenView::kPartial;
  std::vector<SparseId> ids_partial;
  std::vector<SparseId> ids_full;
  std::optional<int> label;
};

// History subsequence plus candidate tokens of a single user.
struct Instance {
  std::vector<TokenRecord> tokens;
};

// Per-position structure of a packed stream. seg is the 0-based segment
// (user) index, local is 1-based within the segment, tindex counts Partial
// tokens: a Partial token's tindex includes itself, a Full token's counts
// the Partial tokens before it.
struct Layout {
  std::vector<int> seg;
  std::vector<int> local;
  std::vector<TokenView> kind;
  std::vector<int> tindex;
  std::vector<std::int64_t> ts;

  int size() const { return static_cast<int>(seg.size()); }
  // Recomputes tindex from kind within each segment.
  void assign_tindex();
};

struct PackedBatch {
  Layout layout;
  std::vector<std::uint64_t> seg_user;
  std::vector<TokenRecord> tokens;
  std::vector<int> candidate_positions;
  std::vector<int> labels;

  int length() const { return layout.size(); }
};

// One contiguous segment per user in order of first appearance; tokens are
// stably sorted by timestamp within a segment. An instance mixing users is a
// construction error (kContract).
PackedBatch pack(std::span<const Instance> instances);

// Greedy token-budget batching that never splits a user segment; a user
// larger than the budget gets a batch of its own.
std::vector<PackedBatch> pack_batches(std::span<const Instance> instances, int token_budget);

// Boolean visibility with the generating predicate kept for oracle checks.
struct AttentionMask {
  num::MaskMat allow;
  std::function<bool(int, int)> predicate;

  int size() const { return static_cast<int>(allow.rows()); }
  bool operator()(int p, int q) const { return allow(p, q); }
};

struct WindowSpec {
  // Maximum tindex distance; nullopt = unbounded. Must be >= 1.
  std::optional<int> length;
  // Maximum timestamp gap in seconds; nullopt = unbounded. Must be >= 0.
  std::optional<std::int64_t> time;

  void validate() const;
  bool operator==(const WindowSpec&) const = default;
};

// Same segment and q not after p.
AttentionMask build_causal_mask(std::span<const int> seg, std::span<const int> local);
// Heterogeneous visibility conjoined with user isolation: Partial sees
// earlier-or-equal Partial; Full sees earlier-or-equal Partial and itself.
AttentionMask build_het_mask(std::span<const TokenView> kind, std::span<const int> tindex,
                             std::span<const int> seg);
// Causal within segment, tindex distance <= length, ts gap <= time.
AttentionMask build_window_mask(std::span<const int> seg, std::span<const int> local,
                                std::span<const int> tindex, std::span<const std::int64_t> ts,
                                const WindowSpec& window);
// tindex = local, for homogeneous streams.
AttentionMask build_window_mask(std::span<const int> seg, std::span<const int> local,
                                std::span<const std::int64_t> ts, const WindowSpec& window);
AttentionMask all_visible(int n);
// Elementwise conjunction; predicates compose the same way.
AttentionMask compose_masks(std::span<const AttentionMask> masks);

// The conjunction used by the model: causal, heterogeneous and windowed.
AttentionMask build_model_mask(const Layout& layout, const WindowSpec& window);

// Row-compressed visibility: keys of query p are col[row_ptr[p] .. row_ptr[p+1]).
struct VisibilityPattern {
  int n = 0;
  std::vector<int> row_ptr{0};
  std::vector<int> col;

  std::size_t nnz() const { return col.size(); }
  bool operator==(const VisibilityPattern&) const = default;
};

VisibilityPattern pattern_from_mask(const AttentionMask& mask);
// Same visibility as build_model_mask, built segment by segment without an
// L x L matrix.
VisibilityPattern build_model_pattern(const Layout& layout, const WindowSpec& window);

// Padding baseline: every instance on its own row of width L_max.
struct PaddedBatch {
  int l_max = 0;
  std::vector<PackedBatch> rows;

  std::size_t slots() const { return rows.size() * static_cast<std::size_t>(l_max); }
  std::size_t real_tokens() const;
  double waste_fraction() const;
  // L_max x L_max model mask of one row; padding rows and columns are false.
  num::MaskMat row_mask(std::size_t r, const WindowSpec& window) const;
};

// Throws kContract when an instance is longer than l_max (never truncates).
PaddedBatch pad_baseline(std::span<const Instance> instances, int l_max);

// Builds one instance per user from a log: history events become Partial
// tokens and candidates Full tokens.
std::vector<Instance> instances_from_log(std::span<const Event> events, const FeatureSchema& schema,
                                         std::uint32_t table_rows);

}  // namespace grab
