#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace grab::num {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MaskMat = Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class Precision : std::uint8_t { kSingle = 0, kDouble = 1 };

template <typename T>
constexpr Precision precision_of() {
  return sizeof(T) == sizeof(float) ? Precision::kSingle : Precision::kDouble;
}

// Additive stand-in for -inf on masked logits.
template <typename T>
constexpr T masked_logit() {
  if constexpr (sizeof(T) == sizeof(float)) return T(-1e9);
  else return T(-1e30);
}

// Trainable dense block. `grad` accumulates across backward passes until
// zero_grad().
template <typename T>
struct Parameter {
  std::string name;
  Mat<T> value;
  Mat<T> grad;

  Parameter() = default;
  Parameter(std::string n, Mat<T> v) : name(std::move(n)), value(std::move(v)) {
    grad = Mat<T>::Zero(value.rows(), value.cols());
  }
  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
  bool operator==(const Parameter& o) const {
    return name == o.name && value.rows() == o.value.rows() && value.cols() == o.value.cols() &&
           value == o.value;
  }
};

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// Records one forward pass. Nodes are appended in evaluation order, which is
// a topological order; backward walks it in reverse exactly once.
template <typename T>
class Tape {
 public:
  using Backward = std::function<void(Tape&)>;

  Var constant(Mat<T> v) { return push(std::move(v), false, nullptr); }
  // Gradient-carrying input; read its gradient with grad() after backward.
  Var leaf(Mat<T> v) { return push(std::move(v), true, nullptr); }
  // Gradient is added into p.grad by backward().
  Var param(Parameter<T>& p);

  const Mat<T>& value(Var v) const { return nodes_[v.id].value; }
  // Zero matrix for nodes the loss does not depend on.
  const Mat<T>& grad(Var v) const;
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  // loss must be 1 x 1; throws kContract otherwise.
  void backward(Var loss);

  // Op-author interface.
  Var push(Mat<T> value, bool requires_grad, Backward back);
  Mat<T>& grad_mut(Var v);
  Var self() const { return Var{current_}; }
  const Mat<T>& self_grad() const { return nodes_[current_].grad; }

 private:
  struct Node {
    Mat<T> value;
    Mat<T> grad;
    bool requires_grad = false;
    Backward back;
    Parameter<T>* param = nullptr;
  };
  std::vector<Node> nodes_;
  int current_ = -1;
};

// Shape-checked ops. Each records its local backward on the tape.
template <typename T> Var matmul(Tape<T>& t, Var a, Var b);
// a * b^T
template <typename T> Var matmul_nt(Tape<T>& t, Var a, Var b);
template <typename T> Var add(Tape<T>& t, Var a, Var b);
// Adds a 1 x n row to every row of a.
template <typename T> Var add_row(Tape<T>& t, Var a, Var row);
template <typename T> Var mul(Tape<T>& t, Var a, Var b);
template <typename T> Var scale(Tape<T>& t, Var a, T s);
template <typename T> Var relu(Tape<T>& t, Var a);
template <typename T> Var sigmoid(Tape<T>& t, Var a);
template <typename T> Var concat_cols(Tape<T>& t, std::span<const Var> parts);
template <typename T> Var concat_rows(Tape<T>& t, std::span<const Var> parts);
// Row-wise layer normalization; gamma and beta are 1 x n.
template <typename T> Var layernorm(Tape<T>& t, Var x, Var gamma, Var beta, T eps = T(1e-5));
template <typename T> Var masked_softmax(Tape<T>& t, Var logits, const MaskMat& mask);
template <typename T> Var gather_rows(Tape<T>& t, Var table, std::span<const int> idx);
// acc' = acc with rows[k] added into row idx[k].
template <typename T> Var index_add(Tape<T>& t, Var acc, std::span<const int> idx, Var rows);
// h with row idx[k] replaced by r.row(k); idx must be distinct.
template <typename T> Var replace_rows(Tape<T>& t, Var h, std::span<const int> idx, Var r);
// n x (k*w) matrix whose row i concatenates table rows idx[i*k .. i*k+k).
template <typename T> Var gather_concat(Tape<T>& t, Var table, std::span<const int> idx, int k);
// Mean over rows of a (n x w) -> 1 x w, or zeros when n == 0 handled by caller.
template <typename T> Var mean_rows(Tape<T>& t, Var a);
// Row s is the mean of rows [offsets[s], offsets[s+1]) of a; an empty
// segment yields a zero row.
template <typename T> Var segment_mean(Tape<T>& t, Var a, std::span<const int> offsets);
template <typename T> Var sum(Tape<T>& t, Var a);
// Mean binary cross-entropy of sigmoid(logits) against labels, in the
// log-sum-exp stable form. logits is n x 1.
template <typename T> Var bce_with_logits(Tape<T>& t, Var logits, std::span<const T> labels);

// Tape-free kernels shared with inference paths.
// A * B where row i of the result depends only on row i of A: a fixed
// sequential order over the inner dimension, whatever the row count.
template <typename T> Mat<T> matmul_rows(const Mat<T>& a, const Mat<T>& b);
template <typename T> Mat<T> masked_softmax_rows(const Mat<T>& logits, const MaskMat& mask);
template <typename T>
Mat<T> layernorm_rows(const Mat<T>& x, const Mat<T>& gamma, const Mat<T>& beta, T eps = T(1e-5));
template <typename T> Mat<T> gather_rows(const Mat<T>& table, std::span<const int> idx);
template <typename T> void index_add(Mat<T>& acc, std::span<const int> idx, const Mat<T>& rows);
template <typename T> T bce_with_logits(std::span<const T> logits, std::span<const T> labels);

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  Eigen::Index worst_index = -1;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t n_checked = 0;
};

// Compares backward() gradients of f against central differences
// (f(x+h) - f(x-h)) / 2h entry by entry. The relative error denominator is
// max(|analytic|, |numeric|, 1e-8). At most max_entries_per_param entries of
// each parameter are probed, evenly strided.
GradCheckReport grad_check(const std::function<Var(Tape<double>&)>& f,
                           std::span<Parameter<double>* const> params, double h = 1e-5,
                           std::size_t max_entries_per_param = std::numeric_limits<std::size_t>::max());

}  // namespace grab::num
