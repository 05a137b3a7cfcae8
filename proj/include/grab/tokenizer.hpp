#pragma once

#include <span>
#include <string>
#include <vector>

#include "grab/datagen.hpp"
#include "grab/numcore.hpp"
#include "grab/rng.hpp"
#include "grab/sparse.hpp"

namespace grab {

// GateMLP: out = (W2 relu(W1 v + b1) + b2) * sigmoid(Wg v + bg), where v is
// the concatenation of the event's field embeddings. Weights are stored
// (in x out) so batched evaluation is V * W.
template <typename T>
struct TokenizerParams {
  num::Parameter<T> w1, b1, w2, b2, wg, bg;

  int in_dim() const { return static_cast<int>(w1.value.rows()); }
  int hidden() const { return static_cast<int>(w1.value.cols()); }
  int d_model() const { return static_cast<int>(w2.value.cols()); }

  // Xavier-uniform weights, zero biases; hidden width 2 * d_model.
  static TokenizerParams init(const std::string& prefix, int in_dim, int d_model, Rng& rng);
  static TokenizerParams zeros(const std::string& prefix, int in_dim, int d_model);

  std::vector<num::Parameter<T>*> parameters();
};

// Single-event evaluation from field vectors.
template <typename T>
std::vector<T> fuse(std::span<const std::vector<T>> field_vectors, const TokenizerParams<T>& p);

// Batched: v is n x in_dim, result n x d_model.
template <typename T>
num::Var fuse(num::Tape<T>& tape, num::Var v, TokenizerParams<T>& p);

struct TokenMeta {
  std::uint64_t user = 0;
  // Filled in by packing; -1 until then.
  int tindex = -1;
  std::int64_t ts = 0;
  Action action = Action::kExposure;
  int channel = 0;

  bool operator==(const TokenMeta&) const = default;
};

template <typename T>
struct EventToken {
  std::vector<T> vec;
  TokenView kind = TokenView::kPartial;
  TokenMeta meta;
};

// expand -> lookup -> fuse with the parameters of the requested view.
template <typename T>
EventToken<T> tokenize_event(const Event& e, TokenView view, const FeatureSchema& schema,
                             const EmbeddingTable<T>& table, const TokenizerParams<T>& params);

}  // namespace grab
