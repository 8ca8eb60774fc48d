#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <utility>
#include <vector>

#include "preroute/nn/tensor.hpp"

namespace preroute::nn {

using Index = std::int32_t;

/// Reverse-mode recording of one forward pass. Values live on the tape;
/// gradients are allocated on demand during backward() and released once a
/// node has propagated them.
template <class T>
class Tape {
 public:
  struct Var {
    Index id = -1;
    bool valid() const { return id >= 0; }
  };
  using Backward = std::function<void(Tape&)>;

  Var constant(Mat<T> value);
  /// Leaf bound to a parameter; gradients accumulate into p.grad when the
  /// parameter is trainable.
  Var param(Parameter<T>& p);
  Var push(Mat<T> value, bool needs_grad, Backward back);

  const Mat<T>& value(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].value; }
  bool needs_grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].needs_grad; }
  /// Gradient buffer of v, zero-initialised on first access.
  Mat<T>& grad(Var v);

  /// Seeds d(loss)/d(loss) = 1; `loss` must be 1x1.
  void backward(Var loss);

  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

 private:
  struct Node {
    Mat<T> value;
    Mat<T> grad;
    bool needs_grad = false;
    Backward back;
    Parameter<T>* param = nullptr;
  };
  std::vector<Node> nodes_;
};

template <class T>
using Var = typename Tape<T>::Var;

// Dense algebra.
template <class T> Var<T> matmul(Tape<T>& t, Var<T> a, Var<T> b);
template <class T> Var<T> add(Tape<T>& t, Var<T> a, Var<T> b);
template <class T> Var<T> sub(Tape<T>& t, Var<T> a, Var<T> b);
template <class T> Var<T> mul(Tape<T>& t, Var<T> a, Var<T> b);
template <class T> Var<T> scale(Tape<T>& t, Var<T> x, T s);
/// x [m,n] + b [1,n] broadcast over rows.
template <class T> Var<T> add_bias(Tape<T>& t, Var<T> x, Var<T> b);
template <class T> Var<T> leaky_relu(Tape<T>& t, Var<T> x, T slope);
template <class T> Var<T> exp(Tape<T>& t, Var<T> x);
template <class T> Var<T> sum_all(Tape<T>& t, Var<T> x);
template <class T> Var<T> mean_all(Tape<T>& t, Var<T> x);
/// Column-wise mean over rows: [m,n] -> [1,n].
template <class T> Var<T> mean_rows(Tape<T>& t, Var<T> x);

// Shape manipulation.
template <class T> Var<T> concat_cols(Tape<T>& t, std::span<const Var<T>> parts);
template <class T> Var<T> concat_rows(Tape<T>& t, std::span<const Var<T>> parts);
template <class T> Var<T> slice_cols(Tape<T>& t, Var<T> x, Index begin, Index count);
template <class T> Var<T> gather_rows(Tape<T>& t, Var<T> x, std::span<const Index> rows);
/// Row r of the result is row where[r].second of parts[where[r].first].
template <class T>
Var<T> gather_rows_multi(Tape<T>& t, std::span<const Var<T>> parts, std::span<const std::pair<Index, Index>> where);
/// Copy of x with the listed rows replaced by constants (no gradient flows
/// to the replaced rows).
template <class T> Var<T> override_rows(Tape<T>& t, Var<T> x, std::span<const Index> rows, const Mat<T>& values);

// Segment reductions: row e of x belongs to segment seg[e]; empty segments
// yield zero rows. max/min route the gradient to the first row attaining
// the extremum.
template <class T> Var<T> segment_sum(Tape<T>& t, Var<T> x, std::span<const Index> seg, Index segments);
template <class T> Var<T> segment_mean(Tape<T>& t, Var<T> x, std::span<const Index> seg, Index segments);
template <class T> Var<T> segment_max(Tape<T>& t, Var<T> x, std::span<const Index> seg, Index segments);
template <class T> Var<T> segment_min(Tape<T>& t, Var<T> x, std::span<const Index> seg, Index segments);

// Normalisation and attention.
template <class T> Var<T> layer_norm(Tape<T>& t, Var<T> x, Var<T> gain, Var<T> bias, T eps = T(1e-5));
/// Joint key: row r * rows(k2) + c equals k1[r] (elementwise *) k2[c].
template <class T> Var<T> joint_key(Tape<T>& t, Var<T> k1, Var<T> k2);

/// Keys and values are stacked blocks; query row i attends to the rows
/// [offsets[block[i]], offsets[block[i] + 1]) of keys/values. Columns are
/// split into `heads` equal slices; scores are scaled by 1/sqrt(key width
/// per head).
struct AttentionLayout {
  std::vector<Index> offsets;  // blocks + 1 entries
  std::vector<Index> block;    // per query row
  Index heads = 1;
};
template <class T> Var<T> block_attention(Tape<T>& t, Var<T> q, Var<T> k, Var<T> v, const AttentionLayout& layout);
/// Softmax weights of block_attention, row-major [query][head][key in block].
template <class T>
std::vector<std::vector<T>> attention_weights(const Mat<T>& q, const Mat<T>& k, const AttentionLayout& layout);

// Losses (1x1 results).
/// Mean of (pred - target)^2 over all entries.
template <class T> Var<T> mse(Tape<T>& t, Var<T> pred, const Mat<T>& target);
/// Same, restricted to the listed rows; zero for an empty selection.
template <class T> Var<T> mse_rows(Tape<T>& t, Var<T> pred, const Mat<T>& target, std::span<const Index> rows);
/// (1/n) sum_i 1/2 sum_d (mu^2 + exp(logvar) - 1 - logvar).
template <class T> Var<T> kl_normal(Tape<T>& t, Var<T> mu, Var<T> logvar);

}  // namespace preroute::nn
