#include "doctest.h"

#include <cmath>
#include <set>

#include "../common/fixtures.hpp"
#include "grab/alloc_counter.hpp"
#include "grab/error.hpp"
#include "grab/rab.hpp"

using namespace grab;
using num::Mat;

namespace {

// w_ij = scale * sum_d q[i][d] * (k[j][d] + pos[p_ij][d] + act[a_ij][d] + time[t_ij][d])
Mat<double> triple_loop(const Mat<double>& q, const Mat<double>& k, const PairBuckets& b,
                        const HeadCodebooks<double>& cb, const num::MaskMat& m, double scale) {
  Mat<double> out(q.rows(), k.rows());
  for (int i = 0; i < q.rows(); ++i)
    for (int j = 0; j < k.rows(); ++j) {
      if (!m(i, j)) {
        out(i, j) = num::masked_logit<double>();
        continue;
      }
      double s = 0;
      for (int d = 0; d < q.cols(); ++d)
        s += q(i, d) * (k(j, d) + cb.pos(b.pos(i, j), d) + cb.act(b.act(i, j), d) + cb.time(b.time(i, j), d));
      out(i, j) = scale * s;
    }
  return out;
}

HeadCodebooks<double> random_books(Rng& rng, const BucketConfig& bc, int dh) {
  return {fixture::random_mat<double>(rng, bc.n_pos, dh), fixture::random_mat<double>(rng, bc.n_act, dh),
          fixture::random_mat<double>(rng, bc.n_time, dh)};
}

double max_visible_diff(const Mat<double>& a, const Mat<double>& b, const num::MaskMat& m) {
  double d = 0;
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j)
      if (m(i, j)) d = std::max(d, std::abs(a(i, j) - b(i, j)));
  return d;
}

}  // namespace

TEST_CASE("bucketizers") {
  CHECK(bucketize_time(0, 26) == 0);
  CHECK(bucketize_time(7, 26) == 3);
  CHECK(bucketize_time(1000, 26) == 9);
  CHECK(bucketize_time(1000, 5) == 4);
  CHECK(bucketize_pos(5, 4) == 3);
  CHECK(bucketize_pos(2, 4) == 2);
  std::set<int> acts;
  for (Action a : {Action::kExposure, Action::kClick, Action::kLike, Action::kSkip}) acts.insert(bucketize_action(a));
  CHECK(acts.size() == 4);
  CHECK_THROWS_AS(bucketize_pos(-1, 4), Error);
  CHECK_THROWS_AS(bucketize_time(-3, 4), Error);
}

TEST_CASE("Full keys contribute the Exposure action") {
  Rng rng(1);
  const BucketConfig bc{8, kNumActions, 10};
  auto c = fixture::random_rab_case(rng, 40, bc, WindowSpec{});
  for (int i = 0; i < 40; ++i)
    for (int j = 0; j < 40; ++j)
      if (c.mask(i, j) && c.layout.kind[j] == TokenView::kFull)
        CHECK(c.buckets.act(i, j) == bucketize_action(Action::kExposure));
}

TEST_CASE("naive and fast logits match a triple-loop oracle") {
  Rng rng(2);
  const BucketConfig bc{9, kNumActions, 12};
  for (int trial = 0; trial < 20; ++trial) {
    const int L = 1 + static_cast<int>(rng.below(64)), dh = 1 + static_cast<int>(rng.below(8));
    const auto c = fixture::random_rab_case(rng, L, bc, WindowSpec{4, 5000});
    const auto q = fixture::random_mat<double>(rng, L, dh), k = fixture::random_mat<double>(rng, L, dh);
    const auto cb = random_books(rng, bc, dh);
    const double scale = 1.0 / std::sqrt(dh);
    const auto ref = triple_loop(q, k, c.buckets, cb, c.mask, scale);
    const auto naive = rab_logits_naive(q, k, c.buckets, cb, c.mask, scale);
    const auto fast = rab_logits_fast(q, k, c.buckets, cb, c.mask, scale);
    CHECK(max_visible_diff(ref, naive, c.mask) <= 1e-12);
    CHECK(max_visible_diff(naive, fast, c.mask) <= 1e-10);
    for (int i = 0; i < L; ++i)
      for (int j = 0; j < L; ++j)
        if (!c.mask(i, j)) CHECK((naive(i, j) == num::masked_logit<double>() && fast(i, j) == num::masked_logit<double>()));
  }
}

TEST_CASE("single precision fast path stays within 1e-5 of naive") {
  Rng rng(3);
  const BucketConfig bc;
  const int L = 48, dh = 8;
  const auto c = fixture::random_rab_case(rng, L, bc, WindowSpec{});
  const auto q = fixture::random_mat<float>(rng, L, dh), k = fixture::random_mat<float>(rng, L, dh);
  HeadCodebooks<float> cb{fixture::random_mat<float>(rng, bc.n_pos, dh), fixture::random_mat<float>(rng, bc.n_act, dh),
                          fixture::random_mat<float>(rng, bc.n_time, dh)};
  const auto a = rab_logits_naive(q, k, c.buckets, cb, c.mask, 0.5f);
  const auto b = rab_logits_fast(q, k, c.buckets, cb, c.mask, 0.5f);
  CHECK(max_visible_diff(a.cast<double>(), b.cast<double>(), c.mask) <= 1e-5);
}

TEST_CASE("zero queries give zero logits and zero codebooks give plain attention") {
  Rng rng(4);
  const BucketConfig bc{6, kNumActions, 8};
  const int L = 20, dh = 4;
  const auto c = fixture::random_rab_case(rng, L, bc, WindowSpec{});
  const auto k = fixture::random_mat<double>(rng, L, dh);
  const auto cb = random_books(rng, bc, dh);
  const auto z = rab_logits_fast(Mat<double>::Zero(L, dh).eval(), k, c.buckets, cb, c.mask, 1.0);
  for (int i = 0; i < L; ++i)
    for (int j = 0; j < L; ++j)
      if (c.mask(i, j)) CHECK(z(i, j) == 0.0);

  const auto q = fixture::random_mat<double>(rng, L, dh);
  HeadCodebooks<double> zero{Mat<double>::Zero(bc.n_pos, dh), Mat<double>::Zero(bc.n_act, dh),
                             Mat<double>::Zero(bc.n_time, dh)};
  Mat<double> plain(L, L);
  for (int i = 0; i < L; ++i)
    for (int j = 0; j < L; ++j) {
      double d = 0;
      for (int x = 0; x < dh; ++x) d += q(i, x) * k(j, x);
      plain(i, j) = 0.5 * d;
    }
  for (auto path : {0, 1}) {
    const auto l = path ? rab_logits_fast(q, k, c.buckets, zero, c.mask, 0.5) : rab_logits_naive(q, k, c.buckets, zero, c.mask, 0.5);
    CHECK(max_visible_diff(l, plain, c.mask) == 0.0);
  }
}

TEST_CASE("self-only visibility adds the zero-distance bias rows") {
  Rng rng(5);
  const BucketConfig bc{5, kNumActions, 6};
  Layout lay;
  lay.seg = {0};
  lay.local = {1};
  lay.kind = {TokenView::kPartial};
  lay.ts = {100};
  lay.assign_tindex();
  num::MaskMat m(1, 1);
  m(0, 0) = true;
  const std::vector<Action> acts{Action::kLike};
  const auto b = compute_pair_buckets(lay, acts, m, bc);
  const auto q = fixture::random_mat<double>(rng, 1, 3), k = fixture::random_mat<double>(rng, 1, 3);
  const auto cb = random_books(rng, bc, 3);
  const double expect =
      (q.row(0).dot(k.row(0) + cb.pos.row(0) + cb.act.row(bucketize_action(Action::kLike)) + cb.time.row(0)));
  CHECK(rab_logits_naive(q, k, b, cb, m, 1.0)(0, 0) == doctest::Approx(expect).epsilon(1e-14));
}

TEST_CASE("fast path scratch is bounded by the score tables") {
  Rng rng(6);
  const BucketConfig bc;
  const int L = 256, dh = 16, nh = 2;
  const auto c = fixture::random_rab_case(rng, L, bc, WindowSpec{});
  const auto q = fixture::random_mat<double>(rng, L, nh * dh), k = fixture::random_mat<double>(rng, L, nh * dh);
  std::vector<HeadCodebooks<double>> cb{random_books(rng, bc, dh), random_books(rng, bc, dh)};
  std::size_t naive_peak, fast_peak;
  {
    AllocScope s;
    (void)rab_logits_naive(q, k, c.buckets, cb, c.mask, 1.0);
    naive_peak = s.peak_words();
  }
  {
    AllocScope s;
    (void)rab_logits_fast(q, k, c.buckets, cb, c.mask, 1.0);
    fast_peak = s.peak_words();
  }
  CHECK(naive_peak >= static_cast<std::size_t>(L) * L * dh);
  CHECK(fast_peak <= static_cast<std::size_t>(L) * (bc.n_pos + bc.n_act + bc.n_time) * nh + 4 * L * nh * dh);
}

TEST_CASE("taped attention agrees across paths and differentiates") {
  Rng rng(7);
  const BucketConfig bc{6, kNumActions, 7};
  const int L = 14, nh = 2, dh = 3;
  const auto c = fixture::random_rab_case(rng, L, bc, WindowSpec{3, std::nullopt});
  const auto pat = build_rab_pattern(c.layout, c.actions, WindowSpec{3, std::nullopt}, bc);
  num::Parameter<double> q("q", fixture::random_mat<double>(rng, L, nh * dh)), k("k", fixture::random_mat<double>(rng, L, nh * dh)),
      v("v", fixture::random_mat<double>(rng, L, nh * dh)), bp("bp", fixture::random_mat<double>(rng, bc.n_pos, nh * dh)),
      ba("ba", fixture::random_mat<double>(rng, bc.n_act, nh * dh)), bt("bt", fixture::random_mat<double>(rng, bc.n_time, nh * dh));
  const auto w = fixture::random_mat<double>(rng, L, nh * dh);
  auto f = [&](num::Tape<double>& t, RabPath path) {
    const auto y = rab_attention(t, t.param(q), t.param(k), t.param(v), t.param(bp), t.param(ba), t.param(bt), pat, nh, path);
    return num::sum(t, num::mul(t, y, t.constant(w)));
  };
  num::Tape<double> t1, t2;
  CHECK(std::abs(t1.value(f(t1, RabPath::kNaive))(0, 0) - t2.value(f(t2, RabPath::kFast))(0, 0)) <= 1e-12);
  num::Parameter<double>* ps[] = {&q, &k, &v, &bp, &ba, &bt};
  CHECK(num::grad_check([&](num::Tape<double>& t) { return f(t, RabPath::kFast); }, ps).max_rel_err <= 1e-6);
}
