#include "grab/cama.hpp"

#include <cmath>

#include "grab/error.hpp"
#include "grab/hash.hpp"
#include "grab/init.hpp"
#include "grab/rng.hpp"

namespace grab {

using num::Mat;
using num::Parameter;
using num::Var;

std::string_view to_string(TokenMode m) {
  switch (m) {
    case TokenMode::kHet: return "het";
    case TokenMode::kPartialOnly: return "partial_only";
    case TokenMode::kFullOnly: return "full_only";
  }
  return "het";
}

TokenMode parse_token_mode(std::string_view s) {
  if (s == "het") return TokenMode::kHet;
  if (s == "partial_only") return TokenMode::kPartialOnly;
  if (s == "full_only") return TokenMode::kFullOnly;
  fail(ErrorKind::kConfig, "unknown token mode '" + std::string(s) + "'");
}

std::string_view to_string(RabPath p) { return p == RabPath::kNaive ? "naive" : "fast"; }

RabPath parse_rab_path(std::string_view s) {
  if (s == "naive") return RabPath::kNaive;
  if (s == "fast") return RabPath::kFast;
  fail(ErrorKind::kConfig, "unknown rab path '" + std::string(s) + "'");
}

void ModelConfig::validate() const {
  auto bad = [](const std::string& f, const std::string& why) {
    fail(ErrorKind::kConfig, "model." + f + ": " + why);
  };
  if (n_layer < 0) bad("n_layer", "must be >= 0");
  if (n_head < 1) bad("n_head", "must be >= 1");
  if (d_model < 1) bad("d_model", "must be >= 1");
  if (d_model % n_head != 0) bad("d_model", "must be divisible by n_head");
  if (n_channels < 1) bad("n_channels", "must be >= 1");
  if (window.length && *window.length < 1) bad("window_length", "must be >= 1");
  if (window.time && *window.time < 0) bad("window_time", "must be >= 0");
  if (buckets.n_pos < 1) bad("n_pos", "must be >= 1");
  if (buckets.n_act < kNumActions) bad("n_act", "must cover all " + std::to_string(kNumActions) + " actions");
  if (buckets.n_time < 1) bad("n_time", "must be >= 1");
  if (d_ffn < 0) bad("d_ffn", "must be >= 0");
  if (d_emb < 1) bad("d_emb", "must be >= 1");
  if (table_rows < 1) bad("table_rows", "must be >= 1");
  if (sparse_hidden < 1) bad("sparse_hidden", "must be >= 1");
}

template <typename T>
std::vector<Parameter<T>*> LayerParams<T>::parameters() {
  return {&ln1_g, &ln1_b, &wq, &wk, &wv, &wo, &b_pos, &b_act, &b_time,
          &ln2_g, &ln2_b, &w1, &b1, &w2, &b2};
}

template <typename T>
HeadCodebooks<T> LayerParams<T>::head_codebooks(int h, int d_head) const {
  return {b_pos.value.middleCols(h * d_head, d_head), b_act.value.middleCols(h * d_head, d_head),
          b_time.value.middleCols(h * d_head, d_head)};
}

template <typename T>
std::vector<Parameter<T>*> SparsePhaseHead<T>::parameters() {
  return {&w1, &b1, &w2, &b2};
}

template <typename T>
ModelParams<T> ModelParams<T>::init(const ModelConfig& cfg) {
  cfg.validate();
  const FeatureSchema schema = FeatureSchema::standard();
  const int d = cfg.d_model;
  Rng rng(derive_seed({cfg.seed, 0xCA4A}));
  ModelParams p;
  p.cfg = cfg;
  p.tok_partial =
      TokenizerParams<T>::init("tok.partial", schema.arity(TokenView::kPartial) * cfg.d_emb, d, rng);
  p.tok_full =
      TokenizerParams<T>::init("tok.full", schema.arity(TokenView::kFull) * cfg.d_emb, d, rng);
  for (int c = 0; c < cfg.n_channels; ++c) {
    ChannelStack<T> st;
    const std::string pc = "ch" + std::to_string(c);
    for (int l = 0; l < cfg.n_layer; ++l) {
      const std::string pl = pc + ".l" + std::to_string(l) + ".";
      LayerParams<T> lp;
      lp.ln1_g = {pl + "ln1_g", ones<T>(1, d)};
      lp.ln1_b = {pl + "ln1_b", zeros<T>(1, d)};
      lp.wq = {pl + "wq", xavier_uniform<T>(d, d, rng)};
      lp.wk = {pl + "wk", xavier_uniform<T>(d, d, rng)};
      lp.wv = {pl + "wv", xavier_uniform<T>(d, d, rng)};
      lp.wo = {pl + "wo", xavier_uniform<T>(d, d, rng)};
      lp.b_pos = {pl + "b_pos", zeros<T>(cfg.buckets.n_pos, d)};
      lp.b_act = {pl + "b_act", zeros<T>(cfg.buckets.n_act, d)};
      lp.b_time = {pl + "b_time", zeros<T>(cfg.buckets.n_time, d)};
      lp.ln2_g = {pl + "ln2_g", ones<T>(1, d)};
      lp.ln2_b = {pl + "ln2_b", zeros<T>(1, d)};
      lp.w1 = {pl + "w1", xavier_uniform<T>(d, cfg.ffn_width(), rng)};
      lp.b1 = {pl + "b1", zeros<T>(1, cfg.ffn_width())};
      lp.w2 = {pl + "w2", xavier_uniform<T>(cfg.ffn_width(), d, rng)};
      lp.b2 = {pl + "b2", zeros<T>(1, d)};
      st.layers.push_back(std::move(lp));
    }
    st.lnf_g = {pc + ".lnf_g", ones<T>(1, d)};
    st.lnf_b = {pc + ".lnf_b", zeros<T>(1, d)};
    p.channels.push_back(std::move(st));
  }
  p.mixers.resize(cfg.n_channels);
  for (int c = 0; c < cfg.n_channels; ++c)
    for (int l = 0; l < cfg.n_layer; ++l) {
      const std::string pm = "mix.c" + std::to_string(c) + ".l" + std::to_string(l) + ".";
      p.mixers[c].push_back({{pm + "w", zeros<T>(2 * d, d)}, {pm + "b", zeros<T>(1, d)}});
    }
  p.head.w = {"head.w", xavier_uniform<T>(cfg.n_channels * d, 1, rng)};
  p.head.b = {"head.b", zeros<T>(1, 1)};
  const int sp_in = (schema.arity(TokenView::kPartial) + schema.arity(TokenView::kFull)) * cfg.d_emb;
  p.sparse_head.w1 = {"sp.w1", xavier_uniform<T>(sp_in, cfg.sparse_hidden, rng)};
  p.sparse_head.b1 = {"sp.b1", zeros<T>(1, cfg.sparse_hidden)};
  p.sparse_head.w2 = {"sp.w2", xavier_uniform<T>(cfg.sparse_hidden, 1, rng)};
  p.sparse_head.b2 = {"sp.b2", zeros<T>(1, 1)};
  p.table = EmbeddingTable<T>(static_cast<int>(schema.fields.size()), cfg.table_rows, cfg.d_emb,
                              derive_seed({cfg.seed, 0x7AB1E}), cfg.sparse_optimizer);
  return p;
}

template <typename T>
std::vector<Parameter<T>*> ModelParams<T>::dense_parameters() {
  std::vector<Parameter<T>*> out = tok_partial.parameters();
  for (auto* q : tok_full.parameters()) out.push_back(q);
  for (auto& st : channels) {
    for (auto& lp : st.layers)
      for (auto* q : lp.parameters()) out.push_back(q);
    out.push_back(&st.lnf_g);
    out.push_back(&st.lnf_b);
  }
  for (auto& row : mixers)
    for (auto& m : row) {
      out.push_back(&m.w);
      out.push_back(&m.b);
    }
  out.push_back(&head.w);
  out.push_back(&head.b);
  return out;
}

template <typename T>
std::vector<const Parameter<T>*> ModelParams<T>::dense_parameters() const {
  auto mut = const_cast<ModelParams*>(this)->dense_parameters();
  return {mut.begin(), mut.end()};
}

namespace {

template <typename T>
std::uint64_t checksum_blocks(const std::vector<const Parameter<T>*>& blocks) {
  std::uint64_t h = fnv1a64("");
  for (const auto* p : blocks)
    h = fnv1a64_bytes(std::as_bytes(std::span<const T>(p->value.data(), p->value.size())), h);
  return h;
}

}  // namespace

template <typename T>
std::uint64_t ModelParams<T>::dense_checksum() const {
  return checksum_blocks<T>(dense_parameters());
}

template <typename T>
std::uint64_t ModelParams<T>::sparse_head_checksum() const {
  auto mut = const_cast<SparsePhaseHead<T>&>(sparse_head).parameters();
  return checksum_blocks<T>({mut.begin(), mut.end()});
}

template <typename T>
int EmbeddingRows<T>::add(SparseId id) {
  auto [it, inserted] = index.try_emplace(id, static_cast<int>(ids.size()));
  if (inserted) ids.push_back(id);
  return it->second;
}

template <typename T>
void EmbeddingRows<T>::load(const EmbeddingTable<T>& table) {
  Mat<T> m(static_cast<Eigen::Index>(ids.size()), table.dim());
  for (std::size_t r = 0; r < ids.size(); ++r) {
    const auto row = table.row(ids[r]);
    std::copy(row.begin(), row.end(), m.data() + r * table.dim());
  }
  rows = Parameter<T>("emb.rows", std::move(m));
}

template <typename T>
std::vector<RowGrad<T>> EmbeddingRows<T>::row_grads() const {
  std::vector<RowGrad<T>> out;
  out.reserve(ids.size());
  for (std::size_t r = 0; r < ids.size(); ++r) {
    const T* g = rows.grad.data() + r * rows.grad.cols();
    out.push_back({ids[r], std::vector<T>(g, g + rows.grad.cols())});
  }
  return out;
}

TokenView token_view(TokenMode mode, TokenView kind) {
  switch (mode) {
    case TokenMode::kHet: return kind;
    case TokenMode::kPartialOnly: return TokenView::kPartial;
    case TokenMode::kFullOnly: return TokenView::kFull;
  }
  return kind;
}

std::vector<ChannelStream> channel_streams(const PackedBatch& batch, int n_channels) {
  if (n_channels < 1) fail(ErrorKind::kConfig, "channel_streams: n_channels must be >= 1");
  if (n_channels > 1)
    for (const auto& t : batch.tokens)
      if (t.kind == TokenView::kPartial && (t.channel < 0 || t.channel >= n_channels))
        fail(ErrorKind::kContract, "channel_streams: token channel " + std::to_string(t.channel) +
                                       " outside [0, " + std::to_string(n_channels) + ")");
  std::vector<ChannelStream> out(n_channels);
  for (int c = 0; c < n_channels; ++c) {
    ChannelStream& s = out[c];
    int local = 0;
    for (int p = 0; p < batch.length(); ++p) {
      const TokenRecord& t = batch.tokens[p];
      if (t.kind == TokenView::kPartial && n_channels > 1 && t.channel != c) continue;
      if (!s.src.empty() && batch.layout.seg[s.src.back()] != batch.layout.seg[p]) local = 0;
      if (t.kind == TokenView::kFull) s.full.push_back(static_cast<int>(s.src.size()));
      s.src.push_back(p);
      s.layout.seg.push_back(batch.layout.seg[p]);
      s.layout.local.push_back(++local);
      s.layout.kind.push_back(t.kind);
      s.layout.ts.push_back(t.ts);
      s.actions.push_back(t.action);
    }
    s.layout.assign_tindex();
  }
  return out;
}

namespace {

const std::vector<SparseId>& view_ids(const TokenRecord& t, TokenView v) {
  return v == TokenView::kPartial ? t.ids_partial : t.ids_full;
}

template <typename T>
Var layer_forward(num::Tape<T>& tape, LayerParams<T>& lp, Var h, const RabPattern& pat,
                  const ModelConfig& cfg, AttentionProbs* capture) {
  using namespace num;
  Var a = layernorm(tape, h, tape.param(lp.ln1_g), tape.param(lp.ln1_b));
  Var q = matmul(tape, a, tape.param(lp.wq));
  Var k = matmul(tape, a, tape.param(lp.wk));
  Var v = matmul(tape, a, tape.param(lp.wv));
  Var bp = cfg.rel_pos ? tape.param(lp.b_pos) : Var{};
  Var ba = cfg.rel_action ? tape.param(lp.b_act) : Var{};
  Var bt = cfg.rel_time ? tape.param(lp.b_time) : Var{};
  Var att = rab_attention(tape, q, k, v, bp, ba, bt, pat, cfg.n_head, cfg.rab_path, capture);
  h = add(tape, h, matmul(tape, att, tape.param(lp.wo)));
  Var f = layernorm(tape, h, tape.param(lp.ln2_g), tape.param(lp.ln2_b));
  f = relu(tape, add_row(tape, matmul(tape, f, tape.param(lp.w1)), tape.param(lp.b1)));
  f = add_row(tape, matmul(tape, f, tape.param(lp.w2)), tape.param(lp.b2));
  return add(tape, h, f);
}

}  // namespace

template <typename T>
std::vector<Var> target_mix(num::Tape<T>& tape, const std::vector<Var>& h,
                            const std::vector<Var>& w, const std::vector<Var>& b) {
  using namespace num;
  const std::size_t C = h.size();
  if (w.size() != C || b.size() != C)
    fail(ErrorKind::kShape, "target_mix: " + std::to_string(C) + " channels but " +
                                std::to_string(w.size()) + " gates");
  std::vector<Var> out;
  for (std::size_t c = 0; c < C; ++c) {
    Var acc = h[c];
    for (std::size_t i = 0; i < C; ++i) {
      if (i == c) continue;
      const Var pair[] = {h[c], h[i]};
      Var gate = sigmoid(tape, add_row(tape, matmul(tape, concat_cols<T>(tape, pair), w[c]), b[c]));
      acc = add(tape, acc, mul(tape, gate, h[i]));
    }
    out.push_back(acc);
  }
  return out;
}

template <typename T>
Mat<T> target_mix(const Mat<T>& h, const std::vector<const MixerParams<T>*>& mixers) {
  const Eigen::Index C = h.rows();
  if (static_cast<Eigen::Index>(mixers.size()) != C)
    fail(ErrorKind::kShape, "target_mix: " + std::to_string(C) + " channels but " +
                                std::to_string(mixers.size()) + " gates");
  const Eigen::Index d = h.cols();
  Mat<T> out = h;
  for (Eigen::Index c = 0; c < C; ++c) {
    const Mat<T>& W = mixers[c]->w.value;
    if (W.rows() != 2 * d || W.cols() != d) fail(ErrorKind::kShape, "target_mix: gate shape");
    for (Eigen::Index i = 0; i < C; ++i) {
      if (i == c) continue;
      Mat<T> z = h.row(c) * W.topRows(d) + h.row(i) * W.bottomRows(d) + mixers[c]->b.value;
      for (Eigen::Index j = 0; j < d; ++j)
        out(c, j) += h(i, j) / (T(1) + std::exp(-z(0, j)));
    }
  }
  return out;
}

template <typename T>
Var forward_logits(num::Tape<T>& tape, ModelParams<T>& params, const PackedBatch& batch,
                   const ForwardOptions<T>& opt) {
  using namespace num;
  const ModelConfig& cfg = params.cfg;
  const int L = batch.length();
  const int C = cfg.n_channels;

  // Embedding rows: collected once, then reused as given (grad checks
  // perturb them in place).
  EmbeddingRows<T> local_rows;
  EmbeddingRows<T>& emb = opt.embeddings ? *opt.embeddings : local_rows;
  const bool collect = emb.ids.empty();
  std::vector<int> pos_by_view[2];
  std::vector<int> idx_by_view[2];
  for (int p = 0; p < L; ++p) {
    const TokenRecord& t = batch.tokens[p];
    const TokenView v = token_view(cfg.token_mode, t.kind);
    pos_by_view[static_cast<int>(v)].push_back(p);
    for (const SparseId& id : view_ids(t, v)) {
      int r;
      if (collect) {
        r = emb.add(id);
      } else {
        auto it = emb.index.find(id);
        if (it == emb.index.end())
          fail(ErrorKind::kContract, "forward: embedding block lacks a row used by the batch");
        r = it->second;
      }
      idx_by_view[static_cast<int>(v)].push_back(r);
    }
  }
  if (collect) emb.load(params.table);
  Var rows = opt.embeddings ? tape.param(emb.rows) : tape.constant(emb.rows.value);

  const FeatureSchema schema = FeatureSchema::standard();
  Var x = tape.constant(Mat<T>::Zero(L, cfg.d_model));
  for (int v = 0; v < 2; ++v) {
    if (pos_by_view[v].empty()) continue;
    const TokenView view = static_cast<TokenView>(v);
    Var in = gather_concat(tape, rows, std::span<const int>(idx_by_view[v]), schema.arity(view));
    Var tok = fuse(tape, in, view == TokenView::kPartial ? params.tok_partial : params.tok_full);
    x = index_add(tape, x, std::span<const int>(pos_by_view[v]), tok);
  }

  const auto streams = channel_streams(batch, C);
  std::vector<RabPattern> pats;
  std::vector<Var> h;
  for (const auto& s : streams) {
    pats.push_back(build_rab_pattern(s.layout, s.actions, cfg.window, cfg.buckets));
    h.push_back(gather_rows(tape, x, std::span<const int>(s.src)));
  }
  const bool mix = C > 1 && cfg.target_mix && !batch.candidate_positions.empty();
  for (int l = 0; l < cfg.n_layer; ++l) {
    if (mix) {
      std::vector<Var> f, w, b;
      for (int c = 0; c < C; ++c) {
        f.push_back(gather_rows(tape, h[c], std::span<const int>(streams[c].full)));
        w.push_back(tape.param(params.mixers[c][l].w));
        b.push_back(tape.param(params.mixers[c][l].b));
      }
      const auto mixed = target_mix(tape, f, w, b);
      for (int c = 0; c < C; ++c)
        h[c] = replace_rows(tape, h[c], std::span<const int>(streams[c].full), mixed[c]);
    }
    for (int c = 0; c < C; ++c) {
      AttentionProbs* cap = nullptr;
      if (opt.capture) {
        opt.capture->push_back({c, l, pats[c], streams[c].layout.kind, {}});
        cap = &opt.capture->back().probs;
      }
      h[c] = layer_forward(tape, params.channels[c].layers[l], h[c], pats[c], cfg, cap);
    }
  }
  std::vector<Var> z;
  for (int c = 0; c < C; ++c) {
    Var hc = layernorm(tape, h[c], tape.param(params.channels[c].lnf_g),
                       tape.param(params.channels[c].lnf_b));
    z.push_back(gather_rows(tape, hc, std::span<const int>(streams[c].full)));
  }
  Var zc = C == 1 ? z[0] : concat_cols<T>(tape, z);
  return add_row(tape, matmul(tape, zc, tape.param(params.head.w)), tape.param(params.head.b));
}

template <typename T>
Var packed_loss(num::Tape<T>& tape, ModelParams<T>& params, const PackedBatch& batch,
                const ForwardOptions<T>& opt) {
  if (batch.candidate_positions.empty())
    fail(ErrorKind::kContract, "packed_loss: batch has no candidate tokens");
  Var logits = forward_logits(tape, params, batch, opt);
  std::vector<T> y(batch.labels.begin(), batch.labels.end());
  return num::bce_with_logits(tape, logits, std::span<const T>(y));
}

template <typename T>
std::vector<T> forward(ModelParams<T>& params, const PackedBatch& batch,
                       std::vector<CapturedAttention>* capture) {
  if (batch.candidate_positions.empty()) return {};
  num::Tape<T> tape;
  ForwardOptions<T> opt;
  opt.capture = capture;
  Var logits = forward_logits(tape, params, batch, opt);
  const Mat<T>& z = tape.value(logits);
  std::vector<T> out(z.rows());
  for (Eigen::Index i = 0; i < z.rows(); ++i) out[i] = T(1) / (T(1) + std::exp(-z(i, 0)));
  return out;
}

namespace {

template <typename T>
Mat<T> add_row_dense(Mat<T> m, const Mat<T>& row) {
  m.rowwise() += row.row(0);
  return m;
}

template <typename T>
std::vector<HeadCodebooks<T>> active_codebooks(const LayerParams<T>& lp, const ModelConfig& cfg) {
  std::vector<HeadCodebooks<T>> out;
  for (int h = 0; h < cfg.n_head; ++h) {
    HeadCodebooks<T> cb = lp.head_codebooks(h, cfg.d_head());
    if (!cfg.rel_pos) cb.pos.setZero();
    if (!cfg.rel_action) cb.act.setZero();
    if (!cfg.rel_time) cb.time.setZero();
    out.push_back(std::move(cb));
  }
  return out;
}

template <typename T>
Mat<T> dense_layer(const LayerParams<T>& lp, const Mat<T>& h, const num::MaskMat& mask,
                   const PairBuckets& buckets, const ModelConfig& cfg, RabPath path) {
  const int dh = cfg.d_head();
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  const Mat<T> a = num::layernorm_rows<T>(h, lp.ln1_g.value, lp.ln1_b.value);
  const Mat<T> q = num::matmul_rows<T>(a, lp.wq.value);
  const Mat<T> k = num::matmul_rows<T>(a, lp.wk.value);
  const Mat<T> v = num::matmul_rows<T>(a, lp.wv.value);
  const auto cbs = active_codebooks(lp, cfg);
  const auto logits = path == RabPath::kNaive ? rab_logits_naive<T>(q, k, buckets, cbs, mask, scale)
                                              : rab_logits_fast<T>(q, k, buckets, cbs, mask, scale);
  Mat<T> ctx(h.rows(), h.cols());
  for (int hd = 0; hd < cfg.n_head; ++hd)
    ctx.middleCols(hd * dh, dh) =
        num::masked_softmax_rows<T>(logits[hd], mask) * v.middleCols(hd * dh, dh);
  Mat<T> out = h + num::matmul_rows<T>(ctx, lp.wo.value);
  Mat<T> f = num::layernorm_rows<T>(out, lp.ln2_g.value, lp.ln2_b.value);
  f = add_row_dense<T>(num::matmul_rows<T>(f, lp.w1.value), lp.b1.value).cwiseMax(T(0));
  out += add_row_dense<T>(num::matmul_rows<T>(f, lp.w2.value), lp.b2.value);
  return out;
}

template <typename T>
Mat<T> dense_tokens(const ModelParams<T>& params, const PackedBatch& row,
                    const ChannelStream& s, int l_max) {
  const ModelConfig& cfg = params.cfg;
  Mat<T> x = Mat<T>::Zero(l_max, cfg.d_model);
  for (std::size_t i = 0; i < s.src.size(); ++i) {
    const TokenRecord& t = row.tokens[s.src[i]];
    const TokenView v = token_view(cfg.token_mode, t.kind);
    const auto& ids = view_ids(t, v);
    const TokenizerParams<T>& tp = v == TokenView::kPartial ? params.tok_partial : params.tok_full;
    Mat<T> in(1, static_cast<Eigen::Index>(ids.size()) * cfg.d_emb);
    for (std::size_t f = 0; f < ids.size(); ++f) {
      const auto r = params.table.row(ids[f]);
      std::copy(r.begin(), r.end(), in.data() + f * cfg.d_emb);
    }
    const Mat<T> hid = add_row_dense<T>(num::matmul_rows<T>(in, tp.w1.value), tp.b1.value).cwiseMax(T(0));
    const Mat<T> u = add_row_dense<T>(num::matmul_rows<T>(hid, tp.w2.value), tp.b2.value);
    const Mat<T> g = add_row_dense<T>(num::matmul_rows<T>(in, tp.wg.value), tp.bg.value);
    for (int j = 0; j < cfg.d_model; ++j)
      x(static_cast<Eigen::Index>(i), j) = u(0, j) / (T(1) + std::exp(-g(0, j)));
  }
  return x;
}

}  // namespace

template <typename T>
std::vector<Mat<T>> channel_forward(const ChannelStack<T>& stack, const Mat<T>& x,
                                    const num::MaskMat& mask, const PairBuckets& buckets,
                                    const ModelConfig& cfg, RabPath path) {
  std::vector<Mat<T>> out{x};
  for (const auto& lp : stack.layers) out.push_back(dense_layer(lp, out.back(), mask, buckets, cfg, path));
  return out;
}

template <typename T>
std::vector<T> score_padded(const ModelParams<T>& params, const PaddedBatch& padded, RabPath path) {
  const ModelConfig& cfg = params.cfg;
  const int C = cfg.n_channels;
  const int lm = padded.l_max;
  std::vector<T> scores;
  for (std::size_t r = 0; r < padded.rows.size(); ++r) {
    const PackedBatch& row = padded.rows[r];
    if (row.candidate_positions.empty()) continue;
    const auto streams = channel_streams(row, C);
    std::vector<Mat<T>> h;
    std::vector<num::MaskMat> masks;
    std::vector<PairBuckets> buckets;
    for (const auto& s : streams) {
      const int m = s.layout.size();
      if (m > lm) fail(ErrorKind::kContract, "score_padded: channel stream longer than l_max");
      const AttentionMask sub = build_model_mask(s.layout, cfg.window);
      num::MaskMat mk = num::MaskMat::Constant(lm, lm, false);
      mk.topLeftCorner(m, m) = sub.allow;
      const PairBuckets pb = compute_pair_buckets(s.layout, s.actions, sub.allow, cfg.buckets);
      PairBuckets b;
      b.pos = IndexMat::Constant(lm, lm, -1);
      b.act = IndexMat::Constant(lm, lm, -1);
      b.time = IndexMat::Constant(lm, lm, -1);
      b.pos.topLeftCorner(m, m) = pb.pos;
      b.act.topLeftCorner(m, m) = pb.act;
      b.time.topLeftCorner(m, m) = pb.time;
      h.push_back(dense_tokens(params, row, s, lm));
      masks.push_back(std::move(mk));
      buckets.push_back(std::move(b));
    }
    const std::size_t n_cand = streams[0].full.size();
    for (int l = 0; l < cfg.n_layer; ++l) {
      if (C > 1 && cfg.target_mix) {
        std::vector<const MixerParams<T>*> mx;
        for (int c = 0; c < C; ++c) mx.push_back(&params.mixers[c][l]);
        for (std::size_t k = 0; k < n_cand; ++k) {
          Mat<T> at(C, cfg.d_model);
          for (int c = 0; c < C; ++c) at.row(c) = h[c].row(streams[c].full[k]);
          const Mat<T> mixed = target_mix<T>(at, mx);
          for (int c = 0; c < C; ++c) h[c].row(streams[c].full[k]) = mixed.row(c);
        }
      }
      for (int c = 0; c < C; ++c)
        h[c] = dense_layer(params.channels[c].layers[l], h[c], masks[c], buckets[c], cfg, path);
    }
    std::vector<Mat<T>> fin;
    for (int c = 0; c < C; ++c)
      fin.push_back(num::layernorm_rows<T>(h[c], params.channels[c].lnf_g.value,
                                           params.channels[c].lnf_b.value));
    for (std::size_t k = 0; k < n_cand; ++k) {
      T z = params.head.b.value(0, 0);
      for (int c = 0; c < C; ++c)
        for (int j = 0; j < cfg.d_model; ++j)
          z += fin[c](streams[c].full[k], j) * params.head.w.value(c * cfg.d_model + j, 0);
      scores.push_back(T(1) / (T(1) + std::exp(-z)));
    }
  }
  return scores;
}

template <typename T>
T bce_loss(std::span<const T> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) fail(ErrorKind::kShape, "bce_loss: size mismatch");
  std::vector<T> logits(scores.size()), y(labels.size());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!(scores[i] > T(0) && scores[i] < T(1)))
      fail(ErrorKind::kContract, "bce_loss: score outside (0, 1)");
    logits[i] = std::log(scores[i]) - std::log1p(-scores[i]);
    if (labels[i] != 0 && labels[i] != 1) fail(ErrorKind::kContract, "bce_loss: label not in {0, 1}");
    y[i] = static_cast<T>(labels[i]);
  }
  return num::bce_with_logits<T>(std::span<const T>(logits), std::span<const T>(y));
}

#define GRAB_INSTANTIATE(T)                                                                      \
  template struct LayerParams<T>;                                                                \
  template struct SparsePhaseHead<T>;                                                            \
  template struct ModelParams<T>;                                                                \
  template struct EmbeddingRows<T>;                                                              \
  template std::vector<Var> target_mix<T>(num::Tape<T>&, const std::vector<Var>&,                \
                                          const std::vector<Var>&, const std::vector<Var>&);     \
  template Mat<T> target_mix<T>(const Mat<T>&, const std::vector<const MixerParams<T>*>&);       \
  template Var forward_logits<T>(num::Tape<T>&, ModelParams<T>&, const PackedBatch&,             \
                                 const ForwardOptions<T>&);                                      \
  template Var packed_loss<T>(num::Tape<T>&, ModelParams<T>&, const PackedBatch&,                \
                              const ForwardOptions<T>&);                                         \
  template std::vector<T> forward<T>(ModelParams<T>&, const PackedBatch&,                        \
                                     std::vector<CapturedAttention>*);                           \
  template std::vector<T> score_padded<T>(const ModelParams<T>&, const PaddedBatch&, RabPath);   \
  template std::vector<Mat<T>> channel_forward<T>(const ChannelStack<T>&, const Mat<T>&,         \
                                                  const num::MaskMat&, const PairBuckets&,       \
                                                  const ModelConfig&, RabPath);                  \
  template T bce_loss<T>(std::span<const T>, std::span<const int>);

GRAB_INSTANTIATE(float)
GRAB_INSTANTIATE(double)

#undef GRAB_INSTANTIATE

}  // namespace grab
