#pragma once

#include <cstdint>
#include <vector>

#include "grab/datagen.hpp"
#include "grab/numcore.hpp"
#include "grab/packing.hpp"

namespace grab {

struct BucketConfig {
  int n_pos = 33;
  int n_act = kNumActions;
  int n_time = 26;

  bool operator==(const BucketConfig&) const = default;
};

// min(dl, n_pos - 1); dl < 0 is a contract error.
int bucketize_pos(std::int64_t dl, int n_pos);
// min(floor(log2(dts + 1)), n_time - 1); dts < 0 is a contract error.
int bucketize_time(std::int64_t dts, int n_time);
int bucketize_action(Action a);

using IndexMat = Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Bucket indices of every visible (query, key) pair; invisible pairs hold -1.
struct PairBuckets {
  IndexMat pos, act, time;
};

// Relative position is the tindex distance, relative time the timestamp gap
// and the action that of the key. Full keys always contribute Exposure so a
// candidate's outcome can never leak through the action codebook.
PairBuckets compute_pair_buckets(const Layout& layout, std::span<const Action> actions,
                                 const num::MaskMat& mask, const BucketConfig& cfg);

// One head's codebooks, rows are d_head wide.
template <typename T>
struct HeadCodebooks {
  num::Mat<T> pos, act, time;
};

// logits[i][j] = scale * q_i^T (k_j + B_pos[p_ij] + B_act[a_ij] + B_time[t_ij])
// over visible pairs, masked_logit<T>() elsewhere. The naive path
// materializes the L x L x d_head relative tensor; the fast path computes
// per-query score tables s = q B^T and gathers from them.
template <typename T>
num::Mat<T> rab_logits_naive(const num::Mat<T>& q, const num::Mat<T>& k, const PairBuckets& b,
                             const HeadCodebooks<T>& cb, const num::MaskMat& mask, T scale = T(1));
template <typename T>
num::Mat<T> rab_logits_fast(const num::Mat<T>& q, const num::Mat<T>& k, const PairBuckets& b,
                            const HeadCodebooks<T>& cb, const num::MaskMat& mask, T scale = T(1));

// Multi-head forms: q and k are L x (n_head * d_head), head h owns columns
// [h * d_head, (h + 1) * d_head). Scratch goes through TrackedVector so the
// allocation counter sees the working set.
template <typename T>
std::vector<num::Mat<T>> rab_logits_naive(const num::Mat<T>& q, const num::Mat<T>& k,
                                          const PairBuckets& b,
                                          const std::vector<HeadCodebooks<T>>& cb,
                                          const num::MaskMat& mask, T scale);
template <typename T>
std::vector<num::Mat<T>> rab_logits_fast(const num::Mat<T>& q, const num::Mat<T>& k,
                                         const PairBuckets& b,
                                         const std::vector<HeadCodebooks<T>>& cb,
                                         const num::MaskMat& mask, T scale);

enum class RabPath : std::uint8_t { kNaive = 0, kFast = 1 };

// Sparse visibility with per-pair buckets, aligned with pattern.col.
struct RabPattern {
  VisibilityPattern vis;
  std::vector<int> pos, act, time;
};

RabPattern build_rab_pattern(const Layout& layout, std::span<const Action> actions,
                             const WindowSpec& window, const BucketConfig& cfg);

// Attention probabilities of one call, nnz x n_head, for analysis.
struct AttentionProbs {
  int n_head = 0;
  std::vector<double> p;
};

// Fused multi-head attention with relative bias on a sparse pattern:
// softmax over visible keys of the RAB logits, times V. Codebook vars are
// N x (n_head * d_head); pass an invalid Var to drop a bias term. Rows with
// no visible key output zeros.
template <typename T>
num::Var rab_attention(num::Tape<T>& tape, num::Var q, num::Var k, num::Var v, num::Var b_pos,
                       num::Var b_act, num::Var b_time, const RabPattern& pat, int n_head,
                       RabPath path, AttentionProbs* capture = nullptr);

}  // namespace grab
