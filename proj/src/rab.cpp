#include "grab/rab.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>
#include <memory>

#include "grab/alloc_counter.hpp"
#include "grab/error.hpp"

namespace grab {

int bucketize_pos(std::int64_t dl, int n_pos) {
  if (dl < 0) fail(ErrorKind::kContract, "bucketize_pos: negative distance " + std::to_string(dl));
  return static_cast<int>(std::min<std::int64_t>(dl, n_pos - 1));
}

int bucketize_time(std::int64_t dts, int n_time) {
  if (dts < 0) fail(ErrorKind::kContract, "bucketize_time: negative gap " + std::to_string(dts));
  // floor(log2(dts + 1)) is the index of the highest set bit of dts + 1.
  const auto b = std::bit_width(static_cast<std::uint64_t>(dts) + 1) - 1;
  return static_cast<int>(std::min<std::int64_t>(static_cast<std::int64_t>(b), n_time - 1));
}

int bucketize_action(Action a) { return static_cast<int>(a); }

namespace {

Action key_action(const Layout& layout, std::span<const Action> actions, int q) {
  return layout.kind[q] == TokenView::kFull ? Action::kExposure : actions[q];
}

void check_head_inputs(Eigen::Index lq, Eigen::Index lk, const PairBuckets& b,
                       const num::MaskMat& mask) {
  if (mask.rows() != lq || mask.cols() != lk || b.pos.rows() != lq || b.pos.cols() != lk ||
      b.act.rows() != lq || b.act.cols() != lk || b.time.rows() != lq || b.time.cols() != lk)
    fail(ErrorKind::kShape, "rab_logits: bucket/mask shape does not match L x L");
}

template <typename T>
void check_codebooks(const HeadCodebooks<T>& cb, Eigen::Index dh) {
  if (cb.pos.cols() != dh || cb.act.cols() != dh || cb.time.cols() != dh)
    fail(ErrorKind::kShape, "rab_logits: codebook width != d_head");
}

template <typename T>
void check_bucket_range(const PairBuckets& b, const HeadCodebooks<T>& cb, int i, int j) {
  if (b.pos(i, j) < 0 || b.pos(i, j) >= cb.pos.rows() || b.act(i, j) < 0 ||
      b.act(i, j) >= cb.act.rows() || b.time(i, j) < 0 || b.time(i, j) >= cb.time.rows())
    fail(ErrorKind::kIndex, "rab_logits: bucket index out of codebook range");
}

// Core naive kernel on raw column offsets; rel is caller-provided scratch of
// L * L * dh words.
template <typename T>
void naive_head(const num::Mat<T>& q, const num::Mat<T>& k, Eigen::Index off, Eigen::Index dh,
                const PairBuckets& b, const HeadCodebooks<T>& cb, const num::MaskMat& mask, T scale,
                T* rel, num::Mat<T>& out) {
  const Eigen::Index L = q.rows();
  const Eigen::Index Lk = k.rows();
  for (Eigen::Index i = 0; i < L; ++i)
    for (Eigen::Index j = 0; j < Lk; ++j) {
      T* r = rel + (i * Lk + j) * dh;
      if (!mask(i, j)) {
        std::fill(r, r + dh, T(0));
        continue;
      }
      check_bucket_range(b, cb, static_cast<int>(i), static_cast<int>(j));
      for (Eigen::Index d = 0; d < dh; ++d)
        r[d] = cb.pos(b.pos(i, j), d) + cb.act(b.act(i, j), d) + cb.time(b.time(i, j), d);
    }
  for (Eigen::Index i = 0; i < L; ++i)
    for (Eigen::Index j = 0; j < Lk; ++j) {
      if (!mask(i, j)) {
        out(i, j) = num::masked_logit<T>();
        continue;
      }
      const T* r = rel + (i * Lk + j) * dh;
      T acc = 0;
      for (Eigen::Index d = 0; d < dh; ++d) acc += q(i, off + d) * (k(j, off + d) + r[d]);
      out(i, j) = scale * acc;
    }
}

// tables holds L x (n_pos + n_act + n_time) scores for this head.
template <typename T>
void fast_head(const num::Mat<T>& q, const num::Mat<T>& k, Eigen::Index off, Eigen::Index dh,
               const PairBuckets& b, const HeadCodebooks<T>& cb, const num::MaskMat& mask, T scale,
               T* tables, num::Mat<T>& out) {
  const Eigen::Index L = q.rows();
  const Eigen::Index Lk = k.rows();
  const Eigen::Index np = cb.pos.rows(), na = cb.act.rows(), nt = cb.time.rows();
  const Eigen::Index width = np + na + nt;
  for (Eigen::Index i = 0; i < L; ++i) {
    T* s = tables + i * width;
    auto score = [&](const num::Mat<T>& book, Eigen::Index n, T* dst) {
      for (Eigen::Index r = 0; r < n; ++r) {
        T acc = 0;
        for (Eigen::Index d = 0; d < dh; ++d) acc += q(i, off + d) * book(r, d);
        dst[r] = acc;
      }
    };
    score(cb.pos, np, s);
    score(cb.act, na, s + np);
    score(cb.time, nt, s + np + na);
  }
  for (Eigen::Index i = 0; i < L; ++i) {
    const T* s = tables + i * width;
    for (Eigen::Index j = 0; j < Lk; ++j) {
      if (!mask(i, j)) {
        out(i, j) = num::masked_logit<T>();
        continue;
      }
      check_bucket_range(b, cb, static_cast<int>(i), static_cast<int>(j));
      T acc = 0;
      for (Eigen::Index d = 0; d < dh; ++d) acc += q(i, off + d) * k(j, off + d);
      out(i, j) = scale * (acc + s[b.pos(i, j)] + s[np + b.act(i, j)] + s[np + na + b.time(i, j)]);
    }
  }
}

}  // namespace

PairBuckets compute_pair_buckets(const Layout& layout, std::span<const Action> actions,
                                 const num::MaskMat& mask, const BucketConfig& cfg) {
  const int n = layout.size();
  if (mask.rows() != n || mask.cols() != n || static_cast<int>(actions.size()) != n)
    fail(ErrorKind::kShape, "compute_pair_buckets: layout/mask/actions size mismatch");
  PairBuckets b;
  b.pos = IndexMat::Constant(n, n, -1);
  b.act = IndexMat::Constant(n, n, -1);
  b.time = IndexMat::Constant(n, n, -1);
  for (int p = 0; p < n; ++p)
    for (int q = 0; q < n; ++q) {
      if (!mask(p, q)) continue;
      b.pos(p, q) = bucketize_pos(layout.tindex[p] - layout.tindex[q], cfg.n_pos);
      b.time(p, q) = bucketize_time(layout.ts[p] - layout.ts[q], cfg.n_time);
      b.act(p, q) = bucketize_action(key_action(layout, actions, q));
    }
  return b;
}

template <typename T>
num::Mat<T> rab_logits_naive(const num::Mat<T>& q, const num::Mat<T>& k, const PairBuckets& b,
                             const HeadCodebooks<T>& cb, const num::MaskMat& mask, T scale) {
  if (q.cols() != k.cols()) fail(ErrorKind::kShape, "rab_logits_naive: q/k width mismatch");
  check_head_inputs(q.rows(), k.rows(), b, mask);
  check_codebooks(cb, q.cols());
  num::Mat<T> out(q.rows(), k.rows());
  TrackedVector<T> rel(static_cast<std::size_t>(q.rows() * k.rows() * q.cols()));
  naive_head(q, k, 0, q.cols(), b, cb, mask, scale, rel.data(), out);
  return out;
}

template <typename T>
num::Mat<T> rab_logits_fast(const num::Mat<T>& q, const num::Mat<T>& k, const PairBuckets& b,
                            const HeadCodebooks<T>& cb, const num::MaskMat& mask, T scale) {
  if (q.cols() != k.cols()) fail(ErrorKind::kShape, "rab_logits_fast: q/k width mismatch");
  check_head_inputs(q.rows(), k.rows(), b, mask);
  check_codebooks(cb, q.cols());
  num::Mat<T> out(q.rows(), k.rows());
  TrackedVector<T> tables(
      static_cast<std::size_t>(q.rows() * (cb.pos.rows() + cb.act.rows() + cb.time.rows())));
  fast_head(q, k, 0, q.cols(), b, cb, mask, scale, tables.data(), out);
  return out;
}

template <typename T>
std::vector<num::Mat<T>> rab_logits_naive(const num::Mat<T>& q, const num::Mat<T>& k,
                                          const PairBuckets& b,
                                          const std::vector<HeadCodebooks<T>>& cb,
                                          const num::MaskMat& mask, T scale) {
  const Eigen::Index n_head = static_cast<Eigen::Index>(cb.size());
  if (n_head == 0 || q.cols() != k.cols() || q.cols() % n_head != 0)
    fail(ErrorKind::kShape, "rab_logits_naive: width not divisible by head count");
  check_head_inputs(q.rows(), k.rows(), b, mask);
  const Eigen::Index dh = q.cols() / n_head;
  std::vector<num::Mat<T>> out;
  for (Eigen::Index h = 0; h < n_head; ++h) {
    check_codebooks(cb[h], dh);
    num::Mat<T> o(q.rows(), k.rows());
    TrackedVector<T> rel(static_cast<std::size_t>(q.rows() * k.rows() * dh));
    naive_head(q, k, h * dh, dh, b, cb[h], mask, scale, rel.data(), o);
    out.push_back(std::move(o));
  }
  return out;
}

template <typename T>
std::vector<num::Mat<T>> rab_logits_fast(const num::Mat<T>& q, const num::Mat<T>& k,
                                         const PairBuckets& b,
                                         const std::vector<HeadCodebooks<T>>& cb,
                                         const num::MaskMat& mask, T scale) {
  const Eigen::Index n_head = static_cast<Eigen::Index>(cb.size());
  if (n_head == 0 || q.cols() != k.cols() || q.cols() % n_head != 0)
    fail(ErrorKind::kShape, "rab_logits_fast: width not divisible by head count");
  check_head_inputs(q.rows(), k.rows(), b, mask);
  const Eigen::Index dh = q.cols() / n_head;
  Eigen::Index width = 0;
  for (const auto& c : cb) {
    check_codebooks(c, dh);
    width = std::max(width, c.pos.rows() + c.act.rows() + c.time.rows());
  }
  // All heads' score tables live at once: L x (N_pos + N_act + N_time) x n_head.
  TrackedVector<T> tables(static_cast<std::size_t>(q.rows() * width * n_head));
  std::vector<num::Mat<T>> out;
  for (Eigen::Index h = 0; h < n_head; ++h) {
    num::Mat<T> o(q.rows(), k.rows());
    fast_head(q, k, h * dh, dh, b, cb[h], mask, scale, tables.data() + h * q.rows() * width, o);
    out.push_back(std::move(o));
  }
  return out;
}

RabPattern build_rab_pattern(const Layout& layout, std::span<const Action> actions,
                             const WindowSpec& window, const BucketConfig& cfg) {
  if (static_cast<int>(actions.size()) != layout.size())
    fail(ErrorKind::kShape, "build_rab_pattern: actions size mismatch");
  RabPattern pat;
  pat.vis = build_model_pattern(layout, window);
  const std::size_t nnz = pat.vis.nnz();
  pat.pos.resize(nnz);
  pat.act.resize(nnz);
  pat.time.resize(nnz);
  for (int p = 0; p < pat.vis.n; ++p)
    for (int e = pat.vis.row_ptr[p]; e < pat.vis.row_ptr[p + 1]; ++e) {
      const int q = pat.vis.col[e];
      pat.pos[e] = bucketize_pos(layout.tindex[p] - layout.tindex[q], cfg.n_pos);
      pat.time[e] = bucketize_time(layout.ts[p] - layout.ts[q], cfg.n_time);
      pat.act[e] = bucketize_action(key_action(layout, actions, q));
    }
  return pat;
}

template <typename T>
num::Var rab_attention(num::Tape<T>& tape, num::Var q, num::Var k, num::Var v, num::Var b_pos,
                       num::Var b_act, num::Var b_time, const RabPattern& pat, int n_head,
                       RabPath path, AttentionProbs* capture) {
  using num::Mat;
  const Mat<T>& Q = tape.value(q);
  const Mat<T>& K = tape.value(k);
  const Mat<T>& V = tape.value(v);
  const Eigen::Index L = Q.rows();
  const Eigen::Index D = Q.cols();
  if (K.rows() != L || V.rows() != L || K.cols() != D || V.cols() != D || pat.vis.n != L)
    fail(ErrorKind::kShape, "rab_attention: Q/K/V/pattern shape mismatch");
  if (n_head <= 0 || D % n_head != 0)
    fail(ErrorKind::kShape, "rab_attention: width not divisible by n_head");
  const Eigen::Index dh = D / n_head;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));

  struct Book {
    num::Var var;
    const std::vector<int>* idx;
  };
  // Owned copy: the backward closure outlives the caller's pattern.
  auto pp = std::make_shared<const RabPattern>(pat);
  std::vector<Book> books;
  for (auto [var, idx] : {std::pair{b_pos, &pp->pos}, std::pair{b_act, &pp->act},
                          std::pair{b_time, &pp->time}}) {
    if (!var.valid()) continue;
    const Mat<T>& B = tape.value(var);
    if (B.cols() != D) fail(ErrorKind::kShape, "rab_attention: codebook width != d_model");
    for (int b : *idx)
      if (b < 0 || b >= B.rows()) fail(ErrorKind::kIndex, "rab_attention: bucket out of range");
    books.push_back({var, idx});
  }

  const std::size_t nnz = pat.vis.nnz();
  auto probs = std::make_shared<std::vector<T>>(nnz * n_head);
  Mat<T> out = Mat<T>::Zero(L, D);
  std::vector<T> logit;
  // Per head and per book: score tables L x N (fast path only).
  std::vector<Mat<T>> tables;
  if (path == RabPath::kFast)
    for (Eigen::Index h = 0; h < n_head; ++h)
      for (const auto& bk : books)
        tables.push_back(num::matmul_rows<T>(Q.middleCols(h * dh, dh),
                                             tape.value(bk.var).middleCols(h * dh, dh).transpose()));

  for (Eigen::Index h = 0; h < n_head; ++h) {
    const Eigen::Index off = h * dh;
    for (Eigen::Index i = 0; i < L; ++i) {
      const int e0 = pat.vis.row_ptr[i], e1 = pat.vis.row_ptr[i + 1];
      if (e0 == e1) continue;
      logit.resize(e1 - e0);
      const T* qi = Q.data() + i * D + off;
      T mx = -std::numeric_limits<T>::infinity();
      for (int e = e0; e < e1; ++e) {
        const int j = pat.vis.col[e];
        const T* kj = K.data() + j * D + off;
        T acc = 0;
        if (path == RabPath::kFast) {
          for (Eigen::Index d = 0; d < dh; ++d) acc += qi[d] * kj[d];
          for (std::size_t b = 0; b < books.size(); ++b)
            acc += tables[h * books.size() + b](i, (*books[b].idx)[e]);
        } else {
          for (Eigen::Index d = 0; d < dh; ++d) {
            T kd = kj[d];
            for (const auto& bk : books) kd += tape.value(bk.var)((*bk.idx)[e], off + d);
            acc += qi[d] * kd;
          }
        }
        logit[e - e0] = scale * acc;
        mx = std::max(mx, logit[e - e0]);
      }
      T z = 0;
      for (int e = e0; e < e1; ++e) {
        const T w = std::exp(logit[e - e0] - mx);
        (*probs)[e * n_head + h] = w;
        z += w;
      }
      T* oi = out.data() + i * D + off;
      for (int e = e0; e < e1; ++e) {
        const T w = (*probs)[e * n_head + h] / z;
        (*probs)[e * n_head + h] = w;
        const T* vj = V.data() + pat.vis.col[e] * D + off;
        for (Eigen::Index d = 0; d < dh; ++d) oi[d] += w * vj[d];
      }
    }
  }
  if (capture) {
    capture->n_head = n_head;
    capture->p.assign(probs->begin(), probs->end());
  }

  const bool rg = tape.requires_grad(q) || tape.requires_grad(k) || tape.requires_grad(v) ||
                  std::any_of(books.begin(), books.end(),
                              [&](const Book& b) { return tape.requires_grad(b.var); });
  return tape.push(std::move(out), rg,
                   [q, k, v, books, probs, pp, n_head, dh, scale, path](num::Tape<T>& tp) {
    const Mat<T>& Q = tp.value(q);
    const Mat<T>& K = tp.value(k);
    const Mat<T>& V = tp.value(v);
    const Mat<T>& dO = tp.self_grad();
    const Eigen::Index L = Q.rows();
    const Eigen::Index D = Q.cols();
    Mat<T> dQ = Mat<T>::Zero(L, D), dK = Mat<T>::Zero(L, D), dV = Mat<T>::Zero(L, D);
    std::vector<Mat<T>> dbook;
    for (const auto& bk : books) dbook.push_back(Mat<T>::Zero(tp.value(bk.var).rows(), D));
    std::vector<T> dlogit;
    for (Eigen::Index h = 0; h < n_head; ++h) {
      const Eigen::Index off = h * dh;
      // Gradient w.r.t. the per-head score tables (fast path).
      std::vector<Mat<T>> dtab;
      if (path == RabPath::kFast)
        for (std::size_t b = 0; b < books.size(); ++b)
          dtab.push_back(Mat<T>::Zero(L, tp.value(books[b].var).rows()));
      for (Eigen::Index i = 0; i < L; ++i) {
        const int e0 = pp->vis.row_ptr[i], e1 = pp->vis.row_ptr[i + 1];
        if (e0 == e1) continue;
        const T* doi = dO.data() + i * D + off;
        dlogit.resize(e1 - e0);
        T sdot = 0;
        for (int e = e0; e < e1; ++e) {
          const T* vj = V.data() + pp->vis.col[e] * D + off;
          T dp = 0;
          for (Eigen::Index d = 0; d < dh; ++d) dp += doi[d] * vj[d];
          dlogit[e - e0] = dp;
          sdot += (*probs)[e * n_head + h] * dp;
        }
        const T* qi = Q.data() + i * D + off;
        T* dqi = dQ.data() + i * D + off;
        for (int e = e0; e < e1; ++e) {
          const int j = pp->vis.col[e];
          const T pr = (*probs)[e * n_head + h];
          const T g = scale * pr * (dlogit[e - e0] - sdot);
          const T* kj = K.data() + j * D + off;
          T* dkj = dK.data() + j * D + off;
          T* dvj = dV.data() + j * D + off;
          for (Eigen::Index d = 0; d < dh; ++d) {
            dqi[d] += g * kj[d];
            dkj[d] += g * qi[d];
            dvj[d] += pr * doi[d];
          }
          if (path == RabPath::kFast) {
            for (std::size_t b = 0; b < books.size(); ++b) dtab[b](i, (*books[b].idx)[e]) += g;
          } else {
            for (std::size_t b = 0; b < books.size(); ++b) {
              const int r = (*books[b].idx)[e];
              const Mat<T>& B = tp.value(books[b].var);
              T* dbr = dbook[b].data() + r * D + off;
              for (Eigen::Index d = 0; d < dh; ++d) {
                dqi[d] += g * B(r, off + d);
                dbr[d] += g * qi[d];
              }
            }
          }
        }
      }
      if (path == RabPath::kFast)
        for (std::size_t b = 0; b < books.size(); ++b) {
          const Mat<T>& B = tp.value(books[b].var);
          dQ.middleCols(off, dh).noalias() += dtab[b] * B.middleCols(off, dh);
          dbook[b].middleCols(off, dh).noalias() += dtab[b].transpose() * Q.middleCols(off, dh);
        }
    }
    if (tp.requires_grad(q)) tp.grad_mut(q) += dQ;
    if (tp.requires_grad(k)) tp.grad_mut(k) += dK;
    if (tp.requires_grad(v)) tp.grad_mut(v) += dV;
    for (std::size_t b = 0; b < books.size(); ++b)
      if (tp.requires_grad(books[b].var)) tp.grad_mut(books[b].var) += dbook[b];
  });
}

#define GRAB_INSTANTIATE(T)                                                                     \
  template num::Mat<T> rab_logits_naive<T>(const num::Mat<T>&, const num::Mat<T>&,              \
                                           const PairBuckets&, const HeadCodebooks<T>&,         \
                                           const num::MaskMat&, T);                             \
  template num::Mat<T> rab_logits_fast<T>(const num::Mat<T>&, const num::Mat<T>&,               \
                                          const PairBuckets&, const HeadCodebooks<T>&,          \
                                          const num::MaskMat&, T);                              \
  template std::vector<num::Mat<T>> rab_logits_naive<T>(                                         \
      const num::Mat<T>&, const num::Mat<T>&, const PairBuckets&,                                \
      const std::vector<HeadCodebooks<T>>&, const num::MaskMat&, T);                             \
  template std::vector<num::Mat<T>> rab_logits_fast<T>(                                          \
      const num::Mat<T>&, const num::Mat<T>&, const PairBuckets&,                                \
      const std::vector<HeadCodebooks<T>>&, const num::MaskMat&, T);                             \
  template num::Var rab_attention<T>(num::Tape<T>&, num::Var, num::Var, num::Var, num::Var,     \
                                     num::Var, num::Var, const RabPattern&, int, RabPath,       \
                                     AttentionProbs*);

GRAB_INSTANTIATE(float)
GRAB_INSTANTIATE(double)

#undef GRAB_INSTANTIATE

}  // namespace grab
