#include "grab/tokenizer.hpp"

#include <cmath>

#include "grab/error.hpp"
#include "grab/init.hpp"

namespace grab {

template <typename T>
TokenizerParams<T> TokenizerParams<T>::init(const std::string& prefix, int in_dim, int d_model,
                                            Rng& rng) {
  const int hidden = 2 * d_model;
  TokenizerParams p;
  p.w1 = {prefix + ".w1", xavier_uniform<T>(in_dim, hidden, rng)};
  p.b1 = {prefix + ".b1", grab::zeros<T>(1, hidden)};
  p.w2 = {prefix + ".w2", xavier_uniform<T>(hidden, d_model, rng)};
  p.b2 = {prefix + ".b2", grab::zeros<T>(1, d_model)};
  p.wg = {prefix + ".wg", xavier_uniform<T>(in_dim, d_model, rng)};
  p.bg = {prefix + ".bg", grab::zeros<T>(1, d_model)};
  return p;
}

template <typename T>
TokenizerParams<T> TokenizerParams<T>::zeros(const std::string& prefix, int in_dim, int d_model) {
  const int hidden = 2 * d_model;
  TokenizerParams p;
  p.w1 = {prefix + ".w1", grab::zeros<T>(in_dim, hidden)};
  p.b1 = {prefix + ".b1", grab::zeros<T>(1, hidden)};
  p.w2 = {prefix + ".w2", grab::zeros<T>(hidden, d_model)};
  p.b2 = {prefix + ".b2", grab::zeros<T>(1, d_model)};
  p.wg = {prefix + ".wg", grab::zeros<T>(in_dim, d_model)};
  p.bg = {prefix + ".bg", grab::zeros<T>(1, d_model)};
  return p;
}

template <typename T>
std::vector<num::Parameter<T>*> TokenizerParams<T>::parameters() {
  return {&w1, &b1, &w2, &b2, &wg, &bg};
}

template <typename T>
std::vector<T> fuse(std::span<const std::vector<T>> field_vectors, const TokenizerParams<T>& p) {
  num::Mat<T> v(1, p.in_dim());
  Eigen::Index off = 0;
  for (const auto& f : field_vectors) {
    if (off + static_cast<Eigen::Index>(f.size()) > v.cols())
      fail(ErrorKind::kShape, "fuse: field vectors exceed tokenizer input width");
    for (std::size_t k = 0; k < f.size(); ++k) v(0, off + static_cast<Eigen::Index>(k)) = f[k];
    off += static_cast<Eigen::Index>(f.size());
  }
  if (off != v.cols())
    fail(ErrorKind::kShape, "fuse: concatenated width " + std::to_string(off) + " != " +
                                std::to_string(v.cols()));
  const num::Mat<T> h = ((v * p.w1.value + p.b1.value).array().max(T(0))).matrix();
  const num::Mat<T> u = h * p.w2.value + p.b2.value;
  const num::Mat<T> g =
      (T(1) / (T(1) + (-(v * p.wg.value + p.bg.value).array()).exp())).matrix();
  const num::Mat<T> out = u.cwiseProduct(g);
  return std::vector<T>(out.data(), out.data() + out.size());
}

template <typename T>
num::Var fuse(num::Tape<T>& tape, num::Var v, TokenizerParams<T>& p) {
  if (tape.value(v).cols() != p.in_dim())
    fail(ErrorKind::kShape, "fuse: input width " + std::to_string(tape.value(v).cols()) +
                                " != tokenizer arity width " + std::to_string(p.in_dim()));
  using namespace num;
  Var h = relu(tape, add_row(tape, matmul(tape, v, tape.param(p.w1)), tape.param(p.b1)));
  Var u = add_row(tape, matmul(tape, h, tape.param(p.w2)), tape.param(p.b2));
  Var g = sigmoid(tape, add_row(tape, matmul(tape, v, tape.param(p.wg)), tape.param(p.bg)));
  return mul(tape, u, g);
}

template <typename T>
EventToken<T> tokenize_event(const Event& e, TokenView view, const FeatureSchema& schema,
                             const EmbeddingTable<T>& table, const TokenizerParams<T>& params) {
  const auto ids = expand_event(e, schema, view, table.rows());
  const auto vecs = table.lookup(ids);
  EventToken<T> tok;
  tok.vec = fuse<T>(vecs, params);
  tok.kind = view;
  tok.meta = {e.user_id, -1, e.ts, e.action, e.channel};
  return tok;
}

#define GRAB_INSTANTIATE(T)                                                                \
  template struct TokenizerParams<T>;                                                      \
  template std::vector<T> fuse<T>(std::span<const std::vector<T>>, const TokenizerParams<T>&); \
  template num::Var fuse<T>(num::Tape<T>&, num::Var, TokenizerParams<T>&);                 \
  template EventToken<T> tokenize_event<T>(const Event&, TokenView, const FeatureSchema&,   \
                                           const EmbeddingTable<T>&, const TokenizerParams<T>&);

GRAB_INSTANTIATE(float)
GRAB_INSTANTIATE(double)

#undef GRAB_INSTANTIATE

}  // namespace grab
