#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "grab/numcore.hpp"
#include "grab/packing.hpp"
#include "grab/rab.hpp"
#include "grab/sparse.hpp"
#include "grab/tokenizer.hpp"

namespace grab {

// Which feature view each token carries. kHet gives history the Partial view
// and candidates the Full view; the other two force one view everywhere
// while keeping the heterogeneous mask.
enum class TokenMode : std::uint8_t { kHet = 0, kPartialOnly = 1, kFullOnly = 2 };

std::string_view to_string(TokenMode m);
TokenMode parse_token_mode(std::string_view s);
std::string_view to_string(RabPath p);
RabPath parse_rab_path(std::string_view s);

struct ModelConfig {
  int n_layer = 1;
  int n_head = 2;
  int d_model = 16;
  int n_channels = 1;
  WindowSpec window{32, std::nullopt};
  BucketConfig buckets;
  // 0 selects 4 * d_model.
  int d_ffn = 0;
  num::Precision precision = num::Precision::kSingle;
  RabPath rab_path = RabPath::kFast;
  int d_emb = 8;
  std::uint32_t table_rows = 4096;
  SparseOptimizer sparse_optimizer = SparseOptimizer::kSgd;
  bool rel_pos = true;
  bool rel_time = true;
  bool rel_action = true;
  bool target_mix = true;
  TokenMode token_mode = TokenMode::kHet;
  int sparse_hidden = 32;
  std::uint64_t seed = 1;

  int d_head() const { return d_model / n_head; }
  int ffn_width() const { return d_ffn > 0 ? d_ffn : 4 * d_model; }
  // kConfig naming the offending "model.<field>".
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

template <typename T>
struct LayerParams {
  num::Parameter<T> ln1_g, ln1_b, wq, wk, wv, wo;
  // Relative bias codebooks, N x d_model: head h owns columns
  // [h * d_head, (h + 1) * d_head).
  num::Parameter<T> b_pos, b_act, b_time;
  num::Parameter<T> ln2_g, ln2_b, w1, b1, w2, b2;
  std::vector<num::Parameter<T>*> parameters();
  HeadCodebooks<T> head_codebooks(int h, int d_head) const;
};

template <typename T>
struct ChannelStack {
  std::vector<LayerParams<T>> layers;
  num::Parameter<T> lnf_g, lnf_b;
};

// Gate for one (destination channel, layer): 2 d_model -> d_model.
template <typename T>
struct MixerParams {
  num::Parameter<T> w, b;
};

template <typename T>
struct HeadParams {
  num::Parameter<T> w, b;
};

// f_sp of the sparse phase: [mean history partial view || candidate full view]
// -> relu hidden -> logit.
template <typename T>
struct SparsePhaseHead {
  num::Parameter<T> w1, b1, w2, b2;
  std::vector<num::Parameter<T>*> parameters();
};

template <typename T>
struct ModelParams {
  ModelConfig cfg;
  TokenizerParams<T> tok_partial, tok_full;
  std::vector<ChannelStack<T>> channels;
  // mixers[c][l]
  std::vector<std::vector<MixerParams<T>>> mixers;
  HeadParams<T> head;
  SparsePhaseHead<T> sparse_head;
  EmbeddingTable<T> table;
  bool dense_frozen = false;

  // Xavier-uniform attention, FFN, tokenizer and head weights; zero
  // codebooks, gates and biases; unit layernorm gains.
  static ModelParams init(const ModelConfig& cfg);
  // Sequence-model blocks: tokenizers, stacks, codebooks, mixers, head.
  std::vector<num::Parameter<T>*> dense_parameters();
  std::vector<const num::Parameter<T>*> dense_parameters() const;
  std::uint64_t dense_checksum() const;
  std::uint64_t sparse_head_checksum() const;
};

// Distinct embedding rows touched by a batch, as one trainable block.
template <typename T>
struct EmbeddingRows {
  std::vector<SparseId> ids;
  std::map<SparseId, int> index;
  num::Parameter<T> rows;

  int add(SparseId id);
  // Copies the current table values of every collected id into rows.
  void load(const EmbeddingTable<T>& table);
  std::vector<RowGrad<T>> row_grads() const;
};

// Tokens of one channel stream: channel c keeps its own Partial tokens and
// every Full token. With one channel the stream is the whole batch.
struct ChannelStream {
  std::vector<int> src;
  Layout layout;
  std::vector<Action> actions;
  // Stream positions of the Full tokens, in candidate order.
  std::vector<int> full;
};

std::vector<ChannelStream> channel_streams(const PackedBatch& batch, int n_channels);

// Feature view a token is embedded with under the given mode.
TokenView token_view(TokenMode mode, TokenView kind);

struct CapturedAttention {
  int channel = 0;
  int layer = 0;
  RabPattern pattern;
  std::vector<TokenView> kind;
  AttentionProbs probs;
};

template <typename T>
struct ForwardOptions {
  // Non-null: embeddings enter the tape through this block so their
  // gradients are available after backward.
  EmbeddingRows<T>* embeddings = nullptr;
  std::vector<CapturedAttention>* capture = nullptr;
};

// Candidate logits, n_candidates x 1, in batch.candidate_positions order.
template <typename T>
num::Var forward_logits(num::Tape<T>& tape, ModelParams<T>& params, const PackedBatch& batch,
                        const ForwardOptions<T>& opt = {});

// Mean BCE over candidates of the batch.
template <typename T>
num::Var packed_loss(num::Tape<T>& tape, ModelParams<T>& params, const PackedBatch& batch,
                     const ForwardOptions<T>& opt = {});

// Candidate scores sigmoid(w^T Z + b).
template <typename T>
std::vector<T> forward(ModelParams<T>& params, const PackedBatch& batch,
                       std::vector<CapturedAttention>* capture = nullptr);

// Tape-free dense evaluation of every padded row: each channel stream is
// padded to l_max, attention runs on full L_max x L_max masked logits from
// rab_logits_naive / rab_logits_fast. Scores are concatenated row by row.
template <typename T>
std::vector<T> score_padded(const ModelParams<T>& params, const PaddedBatch& padded, RabPath path);

// Mixing at one candidate: h~_c = h_c + sum_{i != c} sigmoid(W_c [h_c; h_i] + b_c) * h_i.
// h holds one row per channel; mixers holds one gate per destination channel.
template <typename T>
num::Mat<T> target_mix(const num::Mat<T>& h, const std::vector<const MixerParams<T>*>& mixers);

// Taped form over n candidate rows per channel.
template <typename T>
std::vector<num::Var> target_mix(num::Tape<T>& tape, const std::vector<num::Var>& h,
                                 const std::vector<num::Var>& w, const std::vector<num::Var>& b);

// Per-layer hidden states of one channel (entry 0 is the input, entry l+1
// the output of layer l), before the final layernorm. Tape-free dense path.
template <typename T>
std::vector<num::Mat<T>> channel_forward(const ChannelStack<T>& stack, const num::Mat<T>& x,
                                         const num::MaskMat& mask, const PairBuckets& buckets,
                                         const ModelConfig& cfg, RabPath path);

template <typename T>
T bce_loss(std::span<const T> scores, std::span<const int> labels);

}  // namespace grab
