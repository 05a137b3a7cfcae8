#include "grab/numcore.hpp"

#include <algorithm>
#include <cmath>

#include "grab/error.hpp"

namespace grab::num {

namespace {

std::string shape_str(Eigen::Index r, Eigen::Index c) {
  return "(" + std::to_string(r) + "x" + std::to_string(c) + ")";
}

template <typename T>
void check_same_shape(const Mat<T>& a, const Mat<T>& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    fail(ErrorKind::kShape, std::string(op) + ": shape mismatch " + shape_str(a.rows(), a.cols()) +
                                " vs " + shape_str(b.rows(), b.cols()));
}

}  // namespace

template <typename T>
Var Tape<T>::push(Mat<T> value, bool requires_grad, Backward back) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  if (requires_grad) n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

template <typename T>
Var Tape<T>::param(Parameter<T>& p) {
  Var v = push(p.value, true, nullptr);
  nodes_[v.id].param = &p;
  return v;
}

template <typename T>
const Mat<T>& Tape<T>::grad(Var v) const {
  const Node& n = nodes_[v.id];
  if (n.grad.size() != n.value.size()) {
    // Untouched: materialize zeros lazily through a mutable alias.
    auto& self = const_cast<Node&>(n);
    self.grad = Mat<T>::Zero(n.value.rows(), n.value.cols());
  }
  return n.grad;
}

template <typename T>
Mat<T>& Tape<T>::grad_mut(Var v) {
  Node& n = nodes_[v.id];
  if (n.grad.rows() != n.value.rows() || n.grad.cols() != n.value.cols())
    n.grad = Mat<T>::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

template <typename T>
void Tape<T>::backward(Var loss) {
  if (!loss.valid() || loss.id >= static_cast<int>(nodes_.size()))
    fail(ErrorKind::kContract, "backward: invalid loss handle");
  const Mat<T>& lv = nodes_[loss.id].value;
  if (lv.rows() != 1 || lv.cols() != 1)
    fail(ErrorKind::kContract, "backward: loss must be scalar, got " + shape_str(lv.rows(), lv.cols()));
  for (auto& n : nodes_)
    if (n.requires_grad) n.grad = Mat<T>::Zero(n.value.rows(), n.value.cols());
  if (!nodes_[loss.id].requires_grad) return;
  nodes_[loss.id].grad(0, 0) = T(1);
  for (int i = loss.id; i >= 0; --i) {
    Node& n = nodes_[i];
    if (!n.requires_grad || !n.back) continue;
    current_ = i;
    n.back(*this);
  }
  current_ = -1;
  for (auto& n : nodes_)
    if (n.param) n.param->grad += n.grad;
}

template <typename T>
Mat<T> matmul_rows(const Mat<T>& a, const Mat<T>& b) {
  if (a.cols() != b.rows())
    fail(ErrorKind::kShape, "matmul: " + shape_str(a.rows(), a.cols()) + " * " +
                                shape_str(b.rows(), b.cols()));
  Mat<T> c = Mat<T>::Zero(a.rows(), b.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index k = 0; k < a.cols(); ++k) c.row(i) += a(i, k) * b.row(k);
  return c;
}

template <typename T>
Var matmul(Tape<T>& t, Var a, Var b) {
  const auto& A = t.value(a);
  const auto& B = t.value(b);
  if (A.cols() != B.rows())
    fail(ErrorKind::kShape, "matmul: " + shape_str(A.rows(), A.cols()) + " * " +
                                shape_str(B.rows(), B.cols()));
  Mat<T> C = matmul_rows<T>(A, B);
  const bool rg = t.requires_grad(a) || t.requires_grad(b);
  return t.push(std::move(C), rg, [a, b](Tape<T>& tp) {
    const auto& dC = tp.self_grad();
    if (tp.requires_grad(a)) tp.grad_mut(a).noalias() += dC * tp.value(b).transpose();
    if (tp.requires_grad(b)) tp.grad_mut(b).noalias() += tp.value(a).transpose() * dC;
  });
}

template <typename T>
Var matmul_nt(Tape<T>& t, Var a, Var b) {
  const auto& A = t.value(a);
  const auto& B = t.value(b);
  if (A.cols() != B.cols())
    fail(ErrorKind::kShape, "matmul_nt: " + shape_str(A.rows(), A.cols()) + " * " +
                                shape_str(B.rows(), B.cols()) + "^T");
  Mat<T> C = matmul_rows<T>(A, B.transpose());
  const bool rg = t.requires_grad(a) || t.requires_grad(b);
  return t.push(std::move(C), rg, [a, b](Tape<T>& tp) {
    const auto& dC = tp.self_grad();
    if (tp.requires_grad(a)) tp.grad_mut(a).noalias() += dC * tp.value(b);
    if (tp.requires_grad(b)) tp.grad_mut(b).noalias() += dC.transpose() * tp.value(a);
  });
}

template <typename T>
Var add(Tape<T>& t, Var a, Var b) {
  check_same_shape(t.value(a), t.value(b), "add");
  Mat<T> C = t.value(a) + t.value(b);
  const bool rg = t.requires_grad(a) || t.requires_grad(b);
  return t.push(std::move(C), rg, [a, b](Tape<T>& tp) {
    const auto& dC = tp.self_grad();
    if (tp.requires_grad(a)) tp.grad_mut(a) += dC;
    if (tp.requires_grad(b)) tp.grad_mut(b) += dC;
  });
}

template <typename T>
Var add_row(Tape<T>& t, Var a, Var row) {
  const auto& A = t.value(a);
  const auto& R = t.value(row);
  if (R.rows() != 1 || R.cols() != A.cols())
    fail(ErrorKind::kShape, "add_row: row " + shape_str(R.rows(), R.cols()) + " for matrix " +
                                shape_str(A.rows(), A.cols()));
  Mat<T> C = A.rowwise() + R.row(0);
  const bool rg = t.requires_grad(a) || t.requires_grad(row);
  return t.push(std::move(C), rg, [a, row](Tape<T>& tp) {
    const auto& dC = tp.self_grad();
    if (tp.requires_grad(a)) tp.grad_mut(a) += dC;
    if (tp.requires_grad(row)) tp.grad_mut(row) += dC.colwise().sum();
  });
}

template <typename T>
Var mul(Tape<T>& t, Var a, Var b) {
  check_same_shape(t.value(a), t.value(b), "mul");
  Mat<T> C = t.value(a).cwiseProduct(t.value(b));
  const bool rg = t.requires_grad(a) || t.requires_grad(b);
  return t.push(std::move(C), rg, [a, b](Tape<T>& tp) {
    const auto& dC = tp.self_grad();
    if (tp.requires_grad(a)) tp.grad_mut(a) += dC.cwiseProduct(tp.value(b));
    if (tp.requires_grad(b)) tp.grad_mut(b) += dC.cwiseProduct(tp.value(a));
  });
}

template <typename T>
Var scale(Tape<T>& t, Var a, T s) {
  Mat<T> C = t.value(a) * s;
  return t.push(std::move(C), t.requires_grad(a),
                [a, s](Tape<T>& tp) { tp.grad_mut(a) += tp.self_grad() * s; });
}

template <typename T>
Var relu(Tape<T>& t, Var a) {
  Mat<T> C = t.value(a).cwiseMax(T(0));
  return t.push(std::move(C), t.requires_grad(a), [a](Tape<T>& tp) {
    const auto& A = tp.value(a);
    tp.grad_mut(a) += (A.array() > T(0)).select(tp.self_grad(), T(0)).matrix();
  });
}

template <typename T>
Var sigmoid(Tape<T>& t, Var a) {
  Mat<T> C = (T(1) / (T(1) + (-t.value(a).array()).exp())).matrix();
  return t.push(std::move(C), t.requires_grad(a), [a](Tape<T>& tp) {
    const auto Y = tp.value(tp.self()).array();
    tp.grad_mut(a) += (tp.self_grad().array() * Y * (T(1) - Y)).matrix();
  });
}

template <typename T>
Var concat_cols(Tape<T>& t, std::span<const Var> parts) {
  if (parts.empty()) fail(ErrorKind::kShape, "concat_cols: no inputs");
  const Eigen::Index rows = t.value(parts[0]).rows();
  Eigen::Index cols = 0;
  bool rg = false;
  for (Var p : parts) {
    if (t.value(p).rows() != rows) fail(ErrorKind::kShape, "concat_cols: row count mismatch");
    cols += t.value(p).cols();
    rg = rg || t.requires_grad(p);
  }
  Mat<T> C(rows, cols);
  Eigen::Index off = 0;
  for (Var p : parts) {
    const auto& P = t.value(p);
    C.middleCols(off, P.cols()) = P;
    off += P.cols();
  }
  std::vector<Var> ps(parts.begin(), parts.end());
  return t.push(std::move(C), rg, [ps](Tape<T>& tp) {
    const auto& dC = tp.self_grad();
    Eigen::Index o = 0;
    for (Var p : ps) {
      const Eigen::Index w = tp.value(p).cols();
      if (tp.requires_grad(p)) tp.grad_mut(p) += dC.middleCols(o, w);
      o += w;
    }
  });
}

template <typename T>
Var concat_rows(Tape<T>& t, std::span<const Var> parts) {
  if (parts.empty()) fail(ErrorKind::kShape, "concat_rows: no inputs");
  const Eigen::Index cols = t.value(parts[0]).cols();
  Eigen::Index rows = 0;
  bool rg = false;
  for (Var p : parts) {
    if (t.value(p).cols() != cols) fail(ErrorKind::kShape, "concat_rows: column count mismatch");
    rows += t.value(p).rows();
    rg = rg || t.requires_grad(p);
  }
  Mat<T> C(rows, cols);
  Eigen::Index off = 0;
  for (Var p : parts) {
    const auto& P = t.value(p);
    C.middleRows(off, P.rows()) = P;
    off += P.rows();
  }
  std::vector<Var> ps(parts.begin(), parts.end());
  return t.push(std::move(C), rg, [ps](Tape<T>& tp) {
    const auto& dC = tp.self_grad();
    Eigen::Index o = 0;
    for (Var p : ps) {
      const Eigen::Index h = tp.value(p).rows();
      if (tp.requires_grad(p)) tp.grad_mut(p) += dC.middleRows(o, h);
      o += h;
    }
  });
}

template <typename T>
Mat<T> layernorm_rows(const Mat<T>& x, const Mat<T>& gamma, const Mat<T>& beta, T eps) {
  if (gamma.rows() != 1 || beta.rows() != 1 || gamma.cols() != x.cols() || beta.cols() != x.cols())
    fail(ErrorKind::kShape, "layernorm: gamma/beta must be 1 x " + std::to_string(x.cols()));
  Mat<T> y(x.rows(), x.cols());
  const T n = static_cast<T>(x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    T mu = 0, var = 0;
    for (Eigen::Index j = 0; j < x.cols(); ++j) mu += x(i, j);
    mu /= n;
    for (Eigen::Index j = 0; j < x.cols(); ++j) var += (x(i, j) - mu) * (x(i, j) - mu);
    var /= n;
    const T rstd = T(1) / std::sqrt(var + eps);
    y.row(i) = ((x.row(i).array() - mu) * rstd * gamma.row(0).array() + beta.row(0).array()).matrix();
  }
  return y;
}

template <typename T>
Var layernorm(Tape<T>& t, Var x, Var gamma, Var beta, T eps) {
  const auto& X = t.value(x);
  Mat<T> Y = layernorm_rows<T>(X, t.value(gamma), t.value(beta), eps);
  const bool rg = t.requires_grad(x) || t.requires_grad(gamma) || t.requires_grad(beta);
  return t.push(std::move(Y), rg, [x, gamma, beta, eps](Tape<T>& tp) {
    const auto& X = tp.value(x);
    const auto& G = tp.value(gamma);
    const auto& dY = tp.self_grad();
    const T n = static_cast<T>(X.cols());
    Mat<T> dG = Mat<T>::Zero(1, X.cols());
    for (Eigen::Index i = 0; i < X.rows(); ++i) {
      const T mu = X.row(i).sum() / n;
      const T var = (X.row(i).array() - mu).square().sum() / n;
      const T rstd = T(1) / std::sqrt(var + eps);
      const auto xhat = ((X.row(i).array() - mu) * rstd).eval();
      dG.row(0).array() += dY.row(i).array() * xhat;
      if (tp.requires_grad(x)) {
        const auto dxhat = (dY.row(i).array() * G.row(0).array()).eval();
        const T m1 = dxhat.sum() / n;
        const T m2 = (dxhat * xhat).sum() / n;
        tp.grad_mut(x).row(i).array() += rstd * (dxhat - m1 - xhat * m2);
      }
    }
    if (tp.requires_grad(gamma)) tp.grad_mut(gamma) += dG;
    if (tp.requires_grad(beta)) tp.grad_mut(beta) += dY.colwise().sum();
  });
}

// Max-subtraction runs over visible entries only; an all-masked row is zero.
template <typename T>
Mat<T> masked_softmax_rows(const Mat<T>& logits, const MaskMat& mask) {
  if (logits.rows() != mask.rows() || logits.cols() != mask.cols())
    fail(ErrorKind::kShape, "masked_softmax: mask shape " + shape_str(mask.rows(), mask.cols()) +
                                " vs logits " + shape_str(logits.rows(), logits.cols()));
  Mat<T> y = Mat<T>::Zero(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    T mx = -std::numeric_limits<T>::infinity();
    bool any = false;
    for (Eigen::Index j = 0; j < logits.cols(); ++j)
      if (mask(i, j)) {
        mx = std::max(mx, logits(i, j));
        any = true;
      }
    if (!any) continue;
    T z = 0;
    for (Eigen::Index j = 0; j < logits.cols(); ++j)
      if (mask(i, j)) {
        y(i, j) = std::exp(logits(i, j) - mx);
        z += y(i, j);
      }
    y.row(i) /= z;
  }
  return y;
}

template <typename T>
Var masked_softmax(Tape<T>& t, Var logits, const MaskMat& mask) {
  Mat<T> Y = masked_softmax_rows<T>(t.value(logits), mask);
  return t.push(std::move(Y), t.requires_grad(logits), [logits](Tape<T>& tp) {
    const auto& Y = tp.value(tp.self());
    const auto& dY = tp.self_grad();
    auto& dX = tp.grad_mut(logits);
    for (Eigen::Index i = 0; i < Y.rows(); ++i) {
      const T dot = Y.row(i).dot(dY.row(i));
      dX.row(i).array() += Y.row(i).array() * (dY.row(i).array() - dot);
    }
  });
}

template <typename T>
Mat<T> gather_rows(const Mat<T>& table, std::span<const int> idx) {
  Mat<T> out(static_cast<Eigen::Index>(idx.size()), table.cols());
  for (std::size_t k = 0; k < idx.size(); ++k) {
    if (idx[k] < 0 || idx[k] >= table.rows())
      fail(ErrorKind::kIndex, "gather_rows: index " + std::to_string(idx[k]) + " out of range");
    out.row(static_cast<Eigen::Index>(k)) = table.row(idx[k]);
  }
  return out;
}

template <typename T>
void index_add(Mat<T>& acc, std::span<const int> idx, const Mat<T>& rows) {
  if (rows.rows() != static_cast<Eigen::Index>(idx.size()) || rows.cols() != acc.cols())
    fail(ErrorKind::kShape, "index_add: rows " + shape_str(rows.rows(), rows.cols()) + " for " +
                                std::to_string(idx.size()) + " indices into " +
                                shape_str(acc.rows(), acc.cols()));
  for (std::size_t k = 0; k < idx.size(); ++k) {
    if (idx[k] < 0 || idx[k] >= acc.rows())
      fail(ErrorKind::kIndex, "index_add: index " + std::to_string(idx[k]) + " out of range");
    acc.row(idx[k]) += rows.row(static_cast<Eigen::Index>(k));
  }
}

template <typename T>
Var gather_rows(Tape<T>& t, Var table, std::span<const int> idx) {
  Mat<T> out = gather_rows<T>(t.value(table), idx);
  std::vector<int> ix(idx.begin(), idx.end());
  return t.push(std::move(out), t.requires_grad(table), [table, ix](Tape<T>& tp) {
    index_add<T>(tp.grad_mut(table), ix, tp.self_grad());
  });
}

template <typename T>
Var index_add(Tape<T>& t, Var acc, std::span<const int> idx, Var rows) {
  Mat<T> out = t.value(acc);
  index_add<T>(out, idx, t.value(rows));
  std::vector<int> ix(idx.begin(), idx.end());
  const bool rg = t.requires_grad(acc) || t.requires_grad(rows);
  return t.push(std::move(out), rg, [acc, rows, ix](Tape<T>& tp) {
    const auto& dOut = tp.self_grad();
    if (tp.requires_grad(acc)) tp.grad_mut(acc) += dOut;
    if (tp.requires_grad(rows)) tp.grad_mut(rows) += gather_rows<T>(dOut, ix);
  });
}

template <typename T>
Var replace_rows(Tape<T>& t, Var h, std::span<const int> idx, Var r) {
  const auto& H = t.value(h);
  const auto& R = t.value(r);
  if (R.rows() != static_cast<Eigen::Index>(idx.size()) || R.cols() != H.cols())
    fail(ErrorKind::kShape, "replace_rows: replacement shape mismatch");
  Mat<T> out = H;
  for (std::size_t k = 0; k < idx.size(); ++k) {
    if (idx[k] < 0 || idx[k] >= H.rows()) fail(ErrorKind::kIndex, "replace_rows: index out of range");
    out.row(idx[k]) = R.row(static_cast<Eigen::Index>(k));
  }
  std::vector<int> ix(idx.begin(), idx.end());
  const bool rg = t.requires_grad(h) || t.requires_grad(r);
  return t.push(std::move(out), rg, [h, r, ix](Tape<T>& tp) {
    const auto& dOut = tp.self_grad();
    if (tp.requires_grad(h)) {
      Mat<T> d = dOut;
      for (int i : ix) d.row(i).setZero();
      tp.grad_mut(h) += d;
    }
    if (tp.requires_grad(r)) tp.grad_mut(r) += gather_rows<T>(dOut, ix);
  });
}

template <typename T>
Var gather_concat(Tape<T>& t, Var table, std::span<const int> idx, int k) {
  const auto& Tb = t.value(table);
  if (k <= 0 || idx.size() % static_cast<std::size_t>(k) != 0)
    fail(ErrorKind::kShape, "gather_concat: index count not a multiple of arity");
  const Eigen::Index n = static_cast<Eigen::Index>(idx.size()) / k;
  const Eigen::Index w = Tb.cols();
  Mat<T> out(n, k * w);
  for (Eigen::Index i = 0; i < n; ++i)
    for (int j = 0; j < k; ++j) {
      const int r = idx[i * k + j];
      if (r < 0 || r >= Tb.rows()) fail(ErrorKind::kIndex, "gather_concat: index out of range");
      out.block(i, j * w, 1, w) = Tb.row(r);
    }
  std::vector<int> ix(idx.begin(), idx.end());
  return t.push(std::move(out), t.requires_grad(table), [table, ix, k, n, w](Tape<T>& tp) {
    const auto& dOut = tp.self_grad();
    auto& dT = tp.grad_mut(table);
    for (Eigen::Index i = 0; i < n; ++i)
      for (int j = 0; j < k; ++j) dT.row(ix[i * k + j]) += dOut.block(i, j * w, 1, w);
  });
}

template <typename T>
Var mean_rows(Tape<T>& t, Var a) {
  const auto& A = t.value(a);
  if (A.rows() == 0) fail(ErrorKind::kShape, "mean_rows: empty input");
  Mat<T> out = A.colwise().mean();
  return t.push(std::move(out), t.requires_grad(a), [a](Tape<T>& tp) {
    const auto n = tp.value(a).rows();
    tp.grad_mut(a).rowwise() += tp.self_grad().row(0) / static_cast<T>(n);
  });
}

template <typename T>
Var segment_mean(Tape<T>& t, Var a, std::span<const int> offsets) {
  const auto& A = t.value(a);
  if (offsets.empty() || offsets.front() != 0 || offsets.back() != A.rows())
    fail(ErrorKind::kShape, "segment_mean: offsets must run from 0 to the row count");
  const auto n_seg = static_cast<Eigen::Index>(offsets.size()) - 1;
  Mat<T> out = Mat<T>::Zero(n_seg, A.cols());
  for (Eigen::Index s = 0; s < n_seg; ++s) {
    const int b = offsets[s], e = offsets[s + 1];
    if (e < b) fail(ErrorKind::kShape, "segment_mean: offsets must be non-decreasing");
    if (e == b) continue;
    out.row(s) = A.middleRows(b, e - b).colwise().sum() / static_cast<T>(e - b);
  }
  std::vector<int> off(offsets.begin(), offsets.end());
  return t.push(std::move(out), t.requires_grad(a), [a, off = std::move(off)](Tape<T>& tp) {
    auto& g = tp.grad_mut(a);
    const auto& up = tp.self_grad();
    for (std::size_t s = 0; s + 1 < off.size(); ++s) {
      const int b = off[s], e = off[s + 1];
      for (int r = b; r < e; ++r) g.row(r) += up.row(s) / static_cast<T>(e - b);
    }
  });
}

template <typename T>
Var sum(Tape<T>& t, Var a) {
  Mat<T> out(1, 1);
  out(0, 0) = t.value(a).sum();
  return t.push(std::move(out), t.requires_grad(a),
                [a](Tape<T>& tp) { tp.grad_mut(a).array() += tp.self_grad()(0, 0); });
}

template <typename T>
T bce_with_logits(std::span<const T> logits, std::span<const T> labels) {
  if (logits.size() != labels.size() || logits.empty())
    fail(ErrorKind::kShape, "bce_with_logits: need equally sized, non-empty inputs");
  T total = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const T z = logits[i];
    const T y = labels[i];
    if (y != T(0) && y != T(1)) fail(ErrorKind::kContract, "bce: label outside {0,1}");
    total += std::max(z, T(0)) - z * y + std::log1p(std::exp(-std::abs(z)));
  }
  return total / static_cast<T>(logits.size());
}

template <typename T>
Var bce_with_logits(Tape<T>& t, Var logits, std::span<const T> labels) {
  const auto& Z = t.value(logits);
  if (Z.cols() != 1 || Z.rows() != static_cast<Eigen::Index>(labels.size()))
    fail(ErrorKind::kShape, "bce_with_logits: logits must be n x 1 matching labels");
  Mat<T> out(1, 1);
  out(0, 0) = bce_with_logits<T>(std::span<const T>(Z.data(), labels.size()), labels);
  std::vector<T> y(labels.begin(), labels.end());
  return t.push(std::move(out), t.requires_grad(logits), [logits, y](Tape<T>& tp) {
    const auto& Z = tp.value(logits);
    const T g = tp.self_grad()(0, 0) / static_cast<T>(y.size());
    auto& dZ = tp.grad_mut(logits);
    for (std::size_t i = 0; i < y.size(); ++i) {
      const T z = Z(static_cast<Eigen::Index>(i), 0);
      const T s = z >= 0 ? T(1) / (T(1) + std::exp(-z)) : std::exp(z) / (T(1) + std::exp(z));
      dZ(static_cast<Eigen::Index>(i), 0) += g * (s - y[i]);
    }
  });
}

GradCheckReport grad_check(const std::function<Var(Tape<double>&)>& f,
                           std::span<Parameter<double>* const> params, double h,
                           std::size_t max_entries_per_param) {
  for (auto* p : params) p->zero_grad();
  {
    Tape<double> tape;
    Var loss = f(tape);
    tape.backward(loss);
  }
  auto eval = [&]() {
    Tape<double> tape;
    Var loss = f(tape);
    const auto& v = tape.value(loss);
    if (v.rows() != 1 || v.cols() != 1) fail(ErrorKind::kContract, "grad_check: loss must be scalar");
    return v(0, 0);
  };
  GradCheckReport rep;
  for (auto* p : params) {
    const Eigen::Index n = p->value.size();
    const std::size_t probes = std::min<std::size_t>(static_cast<std::size_t>(n), max_entries_per_param);
    if (probes == 0) continue;
    const double stride = static_cast<double>(n) / static_cast<double>(probes);
    for (std::size_t k = 0; k < probes; ++k) {
      const Eigen::Index idx = static_cast<Eigen::Index>(std::floor(k * stride));
      double* x = p->value.data() + idx;
      const double saved = *x;
      *x = saved + h;
      const double fp = eval();
      *x = saved - h;
      const double fm = eval();
      *x = saved;
      const double numeric = (fp - fm) / (2.0 * h);
      const double analytic = p->grad.data()[idx];
      const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
      const double rel = std::abs(analytic - numeric) / denom;
      ++rep.n_checked;
      if (rel > rep.max_rel_err || rep.worst_index < 0) {
        rep.max_rel_err = rel;
        rep.worst_param = p->name;
        rep.worst_index = idx;
        rep.worst_analytic = analytic;
        rep.worst_numeric = numeric;
      }
    }
  }
  return rep;
}

#define GRAB_INSTANTIATE(T)                                                                  \
  template class Tape<T>;                                                                    \
  template Mat<T> matmul_rows<T>(const Mat<T>&, const Mat<T>&);                                \
  template Var matmul<T>(Tape<T>&, Var, Var);                                                \
  template Var matmul_nt<T>(Tape<T>&, Var, Var);                                             \
  template Var add<T>(Tape<T>&, Var, Var);                                                   \
  template Var add_row<T>(Tape<T>&, Var, Var);                                               \
  template Var mul<T>(Tape<T>&, Var, Var);                                                   \
  template Var scale<T>(Tape<T>&, Var, T);                                                   \
  template Var relu<T>(Tape<T>&, Var);                                                       \
  template Var sigmoid<T>(Tape<T>&, Var);                                                    \
  template Var concat_cols<T>(Tape<T>&, std::span<const Var>);                               \
  template Var concat_rows<T>(Tape<T>&, std::span<const Var>);                               \
  template Var layernorm<T>(Tape<T>&, Var, Var, Var, T);                                     \
  template Var masked_softmax<T>(Tape<T>&, Var, const MaskMat&);                             \
  template Var gather_rows<T>(Tape<T>&, Var, std::span<const int>);                          \
  template Var index_add<T>(Tape<T>&, Var, std::span<const int>, Var);                       \
  template Var replace_rows<T>(Tape<T>&, Var, std::span<const int>, Var);                    \
  template Var gather_concat<T>(Tape<T>&, Var, std::span<const int>, int);                   \
  template Var mean_rows<T>(Tape<T>&, Var);                                                  \
  template Var segment_mean<T>(Tape<T>&, Var, std::span<const int>);                         \
  template Var sum<T>(Tape<T>&, Var);                                                        \
  template Var bce_with_logits<T>(Tape<T>&, Var, std::span<const T>);                        \
  template Mat<T> masked_softmax_rows<T>(const Mat<T>&, const MaskMat&);                     \
  template Mat<T> layernorm_rows<T>(const Mat<T>&, const Mat<T>&, const Mat<T>&, T);         \
  template Mat<T> gather_rows<T>(const Mat<T>&, std::span<const int>);                       \
  template void index_add<T>(Mat<T>&, std::span<const int>, const Mat<T>&);                  \
  template T bce_with_logits<T>(std::span<const T>, std::span<const T>);

GRAB_INSTANTIATE(float)
GRAB_INSTANTIATE(double)

#undef GRAB_INSTANTIATE

}  // namespace grab::num
