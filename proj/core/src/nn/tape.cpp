#include "preroute/nn/tape.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "preroute/error.hpp"

namespace preroute::nn {

// ---------------------------------------------------------------------------
// ParamStore

template <class T>
Parameter<T>& ParamStore<T>::add(const std::string& path, Eigen::Index rows, Eigen::Index cols) {
  auto [it, inserted] = params_.try_emplace(path);
  if (!inserted) throw InvalidArgument("parameter '" + path + "' declared twice");
  it->second.value = Mat<T>::Zero(rows, cols);
  it->second.grad = Mat<T>::Zero(rows, cols);
  return it->second;
}

template <class T>
Parameter<T>& ParamStore<T>::at(const std::string& path) {
  auto it = params_.find(path);
  if (it == params_.end()) throw InvalidArgument("unknown parameter '" + path + "'");
  return it->second;
}

template <class T>
const Parameter<T>& ParamStore<T>::at(const std::string& path) const {
  auto it = params_.find(path);
  if (it == params_.end()) throw InvalidArgument("unknown parameter '" + path + "'");
  return it->second;
}

template <class T>
void ParamStore<T>::zero_grad() {
  for (auto& [_, p] : params_) p.grad.setZero();
}

template <class T>
void ParamStore<T>::set_trainable(const std::string& prefix, bool trainable) {
  for (auto& [path, p] : params_)
    if (path.compare(0, prefix.size(), prefix) == 0) p.trainable = trainable;
}

template <class T>
std::size_t ParamStore<T>::num_scalars() const {
  std::size_t n = 0;
  for (const auto& [_, p] : params_) n += static_cast<std::size_t>(p.value.size());
  return n;
}

template class ParamStore<float>;
template class ParamStore<double>;

// ---------------------------------------------------------------------------
// Tape

template <class T>
typename Tape<T>::Var Tape<T>::constant(Mat<T> value) {
  nodes_.push_back(Node{std::move(value), {}, false, {}, nullptr});
  return Var{static_cast<Index>(nodes_.size() - 1)};
}

template <class T>
typename Tape<T>::Var Tape<T>::param(Parameter<T>& p) {
  nodes_.push_back(Node{p.value, {}, p.trainable, {}, p.trainable ? &p : nullptr});
  return Var{static_cast<Index>(nodes_.size() - 1)};
}

template <class T>
typename Tape<T>::Var Tape<T>::push(Mat<T> value, bool needs_grad, Backward back) {
  nodes_.push_back(Node{std::move(value), {}, needs_grad, needs_grad ? std::move(back) : Backward{}, nullptr});
  return Var{static_cast<Index>(nodes_.size() - 1)};
}

template <class T>
Mat<T>& Tape<T>::grad(Var v) {
  auto& n = nodes_[static_cast<std::size_t>(v.id)];
  if (n.grad.size() == 0 && n.value.size() != 0) n.grad = Mat<T>::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

template <class T>
void Tape<T>::backward(Var loss) {
  if (value(loss).size() != 1) throw InvalidArgument("backward: loss must be a 1x1 tensor");
  if (!needs_grad(loss)) return;
  grad(loss)(0, 0) += T(1);
  for (Index i = loss.id; i >= 0; --i) {
    auto& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.needs_grad || n.grad.size() == 0) continue;
    if (n.back) n.back(*this);
    if (n.param) n.param->grad += n.grad;
    // Every consumer of node i has a larger id and is done.
    n.grad = Mat<T>();
  }
}

template class Tape<float>;
template class Tape<double>;

// ---------------------------------------------------------------------------
// Ops

namespace {

[[noreturn]] void shape_error(const char* op, Eigen::Index r1, Eigen::Index c1, Eigen::Index r2, Eigen::Index c2) {
  throw InvalidArgument(std::string(op) + ": shape mismatch [" + std::to_string(r1) + "," + std::to_string(c1) + "] vs [" +
                        std::to_string(r2) + "," + std::to_string(c2) + "]");
}

template <class T>
bool any_grad(const Tape<T>& t, std::initializer_list<Var<T>> vs) {
  for (auto v : vs)
    if (t.needs_grad(v)) return true;
  return false;
}

}  // namespace

template <class T>
Var<T> matmul(Tape<T>& t, Var<T> a, Var<T> b) {
  const auto &A = t.value(a), &B = t.value(b);
  if (A.cols() != B.rows()) shape_error("matmul", A.rows(), A.cols(), B.rows(), B.cols());
  Mat<T> out(A.rows(), B.cols());
  out.noalias() = A * B;
  const Var<T> o{static_cast<Index>(t.size())};
  return t.push(std::move(out), any_grad(t, {a, b}), [a, b, o](Tape<T>& t) {
    const auto& G = t.grad(o);
    if (t.needs_grad(a)) t.grad(a).noalias() += G * t.value(b).transpose();
    if (t.needs_grad(b)) t.grad(b).noalias() += t.value(a).transpose() * G;
  });
}

template <class T>
Var<T> add(Tape<T>& t, Var<T> a, Var<T> b) {
  const auto &A = t.value(a), &B = t.value(b);
  if (A.rows() != B.rows() || A.cols() != B.cols()) shape_error("add", A.rows(), A.cols(), B.rows(), B.cols());
  const Var<T> o{static_cast<Index>(t.size())};
  return t.push(A + B, any_grad(t, {a, b}), [a, b, o](Tape<T>& t) {
    if (t.needs_grad(a)) t.grad(a) += t.grad(o);
    if (t.needs_grad(b)) t.grad(b) += t.grad(o);
  });
}

template <class T>
Var<T> sub(Tape<T>& t, Var<T> a, Var<T> b) {
  const auto &A = t.value(a), &B = t.value(b);
  if (A.rows() != B.rows() || A.cols() != B.cols()) shape_error("sub", A.rows(), A.cols(), B.rows(), B.cols());
  const Var<T> o{static_cast<Index>(t.size())};
  return t.push(A - B, any_grad(t, {a, b}), [a, b, o](Tape<T>& t) {
    if (t.needs_grad(a)) t.grad(a) += t.grad(o);
    if (t.needs_grad(b)) t.grad(b) -= t.grad(o);
  });
}

template <class T>
Var<T> mul(Tape<T>& t, Var<T> a, Var<T> b) {
  const auto &A = t.value(a), &B = t.value(b);
  if (A.rows() != B.rows() || A.cols() != B.cols()) shape_error("mul", A.rows(), A.cols(), B.rows(), B.cols());
  const Var<T> o{static_cast<Index>(t.size())};
  return t.push(A.cwiseProduct(B), any_grad(t, {a, b}), [a, b, o](Tape<T>& t) {
    if (t.needs_grad(a)) t.grad(a) += t.grad(o).cwiseProduct(t.value(b));
    if (t.needs_grad(b)) t.grad(b) += t.grad(o).cwiseProduct(t.value(a));
  });
}

template <class T>
Var<T> scale(Tape<T>& t, Var<T> x, T s) {
  const Var<T> o{static_cast<Index>(t.size())};
  return t.push(t.value(x) * s, t.needs_grad(x), [x, s, o](Tape<T>& t) { t.grad(x) += t.grad(o) * s; });
}

template <class T>
Var<T> add_bias(Tape<T>& t, Var<T> x, Var<T> b) {
  const auto &X = t.value(x), &B = t.value(b);
  if (B.rows() != 1 || B.cols() != X.cols()) shape_error("add_bias", X.rows(), X.cols(), B.rows(), B.cols());
  Mat<T> out = X;
  out.rowwise() += B.row(0);
  const Var<T> o{static_cast<Index>(t.size())};
  return t.push(std::move(out), any_grad(t, {x, b}), [x, b, o](Tape<T>& t) {
    const auto& G = t.grad(o);
    if (t.needs_grad(x)) t.grad(x) += G;
    if (t.needs_grad(b)) t.grad(b) += G.colwise().sum();
  });
}

template <class T>
Var<T> leaky_relu(Tape<T>& t, Var<T> x, T slope) {
  const auto X = t.value(x).array();
  Mat<T> out = (X > T(0)).select(X, slope * X).matrix();
  const Var<T> o{static_cast<Index>(t.size())};
  return t.push(std::move(out), t.needs_grad(x), [x, slope, o](Tape<T>& t) {
    const auto X = t.value(x).array();
    const auto G = t.grad(o).array();
    t.grad(x).array() += (X > T(0)).select(G, slope * G);
  });
}

template <class T>
Var<T> exp(Tape<T>& t, Var<T> x) {
  const Var<T> o{static_cast<Index>(t.size())};
  return t.push(t.value(x).array().exp().matrix(), t.needs_grad(x),
                [x, o](Tape<T>& t) { t.grad(x) += t.grad(o).cwiseProduct(t.value(o)); });
}

template <class T>
Var<T> sum_all(Tape<T>& t, Var<T> x) {
  Mat<T> out(1, 1);
  out(0, 0) = t.value(x).sum();
  const Var<T> o{static_cast<Index>(t.size())};
  return t.push(std::move(out), t.needs_grad(x), [x, o](Tape<T>& t) { t.grad(x).array() += t.grad(o)(0, 0); });
}

template <class T>
Var<T> mean_all(Tape<T>& t, Var<T> x) {
  const auto n = t.value(x).size();
  if (n == 0) throw InvalidArgument("mean_all: empty tensor");
  Mat<T> out(1, 1);
  out(0, 0) = t.value(x).sum() / static_cast<T>(n);
  const Var<T> o{static_cast<Index>(t.size())};
  return t.push(std::move(out), t.needs_grad(x),
                [x, o, n](Tape<T>& t) { t.grad(x).array() += t.grad(o)(0, 0) / static_cast<T>(n); });
}

template <class T>
Var<T> mean_rows(Tape<T>& t, Var<T> x) {
  const auto m = t.value(x).rows();
  if (m == 0) throw InvalidArgument("mean_rows: no rows");
  Mat<T> out = t.value(x).colwise().sum() / static_cast<T>(m);
  const Var<T> o{static_cast<Index>(t.size())};
  return t.push(std::move(out), t.needs_grad(x), [x, o, m](Tape<T>& t) {
    t.grad(x).rowwise() += t.grad(o).row(0) / static_cast<T>(m);
  });
}

template <class T>
Var<T> concat_cols(Tape<T>& t, std::span<const Var<T>> parts) {
  if (parts.empty()) throw InvalidArgument("concat_cols: no inputs");
  const auto rows = t.value(parts[0]).rows();
  Eigen::Index cols = 0;
  bool ng = false;
  for (auto p : parts) {
    if (t.value(p).rows() != rows) shape_error("concat_cols", rows, 0, t.value(p).rows(), t.value(p).cols());
    cols += t.value(p).cols();
    ng = ng || t.needs_grad(p);
  }
  Mat<T> out(rows, cols);
  Eigen::Index c = 0;
  for (auto p : parts) {
    const auto& P = t.value(p);
    out.middleCols(c, P.cols()) = P;
    c += P.cols();
  }
  const Var<T> o{static_cast<Index>(t.size())};
  std::vector<Var<T>> ps(parts.begin(), parts.end());
  return t.push(std::move(out), ng, [ps = std::move(ps), o](Tape<T>& t) {
    Eigen::Index c = 0;
    for (auto p : ps) {
      const auto w = t.value(p).cols();
      if (t.needs_grad(p)) t.grad(p) += t.grad(o).middleCols(c, w);
      c += w;
    }
  });
}

template <class T>
Var<T> concat_rows(Tape<T>& t, std::span<const Var<T>> parts) {
  if (parts.empty()) throw InvalidArgument("concat_rows: no inputs");
  const auto cols = t.value(parts[0]).cols();
  Eigen::Index rows = 0;
  bool ng = false;
  for (auto p : parts) {
    if (t.value(p).cols() != cols) shape_error("concat_rows", 0, cols, t.value(p).rows(), t.value(p).cols());
    rows += t.value(p).rows();
    ng = ng || t.needs_grad(p);
  }
  Mat<T> out(rows, cols);
  Eigen::Index r = 0;
  for (auto p : parts) {
    const auto& P = t.value(p);
    out.middleRows(r, P.rows()) = P;
    r += P.rows();
  }
  const Var<T> o{static_cast<Index>(t.size())};
  std::vector<Var<T>> ps(parts.begin(), parts.end());
  return t.push(std::move(out), ng, [ps = std::move(ps), o](Tape<T>& t) {
    Eigen::Index r = 0;
    for (auto p : ps) {
      const auto h = t.value(p).rows();
      if (t.needs_grad(p)) t.grad(p) += t.grad(o).middleRows(r, h);
      r += h;
    }
  });
}

template <class T>
Var<T> slice_cols(Tape<T>& t, Var<T> x, Index begin, Index count) {
  const auto& X = t.value(x);
  if (begin < 0 || count < 0 || begin + count > X.cols()) shape_error("slice_cols", X.rows(), X.cols(), begin, count);
  const Var<T> o{static_cast<Index>(t.size())};
  return t.push(X.middleCols(begin, count), t.needs_grad(x),
                [x, o, begin, count](Tape<T>& t) { t.grad(x).middleCols(begin, count) += t.grad(o); });
}

template <class T>
Var<T> gather_rows(Tape<T>& t, Var<T> x, std::span<const Index> rows) {
  const auto& X = t.value(x);
  Mat<T> out(static_cast<Eigen::Index>(rows.size()), X.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] < 0 || rows[r] >= X.rows()) shape_error("gather_rows", X.rows(), X.cols(), rows[r], 0);
    out.row(static_cast<Eigen::Index>(r)) = X.row(rows[r]);
  }
  const Var<T> o{static_cast<Index>(t.size())};
  std::vector<Index> idx(rows.begin(), rows.end());
  return t.push(std::move(out), t.needs_grad(x), [x, o, idx = std::move(idx)](Tape<T>& t) {
    const auto& G = t.grad(o);
    auto& GX = t.grad(x);
    for (std::size_t r = 0; r < idx.size(); ++r) GX.row(idx[r]) += G.row(static_cast<Eigen::Index>(r));
  });
}

template <class T>
Var<T> gather_rows_multi(Tape<T>& t, std::span<const Var<T>> parts, std::span<const std::pair<Index, Index>> where) {
  if (parts.empty()) throw InvalidArgument("gather_rows_multi: no inputs");
  const auto cols = t.value(parts[0]).cols();
  bool ng = false;
  for (auto p : parts) {
    if (t.value(p).cols() != cols) shape_error("gather_rows_multi", 0, cols, t.value(p).rows(), t.value(p).cols());
    ng = ng || t.needs_grad(p);
  }
  Mat<T> out(static_cast<Eigen::Index>(where.size()), cols);
  for (std::size_t r = 0; r < where.size(); ++r) {
    const auto [p, row] = where[r];
    if (p < 0 || static_cast<std::size_t>(p) >= parts.size() || row < 0 || row >= t.value(parts[static_cast<std::size_t>(p)]).rows())
      shape_error("gather_rows_multi", p, row, 0, 0);
    out.row(static_cast<Eigen::Index>(r)) = t.value(parts[static_cast<std::size_t>(p)]).row(row);
  }
  const Var<T> o{static_cast<Index>(t.size())};
  std::vector<Var<T>> ps(parts.begin(), parts.end());
  std::vector<std::pair<Index, Index>> w(where.begin(), where.end());
  return t.push(std::move(out), ng, [ps = std::move(ps), w = std::move(w), o](Tape<T>& t) {
    const Mat<T> G = t.grad(o);
    for (std::size_t r = 0; r < w.size(); ++r) {
      const auto p = ps[static_cast<std::size_t>(w[r].first)];
      if (t.needs_grad(p)) t.grad(p).row(w[r].second) += G.row(static_cast<Eigen::Index>(r));
    }
  });
}

template <class T>
Var<T> override_rows(Tape<T>& t, Var<T> x, std::span<const Index> rows, const Mat<T>& values) {
  const auto& X = t.value(x);
  if (values.rows() != static_cast<Eigen::Index>(rows.size()) || values.cols() != X.cols())
    shape_error("override_rows", static_cast<Eigen::Index>(rows.size()), X.cols(), values.rows(), values.cols());
  Mat<T> out = X;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] < 0 || rows[r] >= X.rows()) shape_error("override_rows", X.rows(), X.cols(), rows[r], 0);
    out.row(rows[r]) = values.row(static_cast<Eigen::Index>(r));
  }
  const Var<T> o{static_cast<Index>(t.size())};
  std::vector<Index> idx(rows.begin(), rows.end());
  return t.push(std::move(out), t.needs_grad(x), [x, o, idx = std::move(idx)](Tape<T>& t) {
    Mat<T> G = t.grad(o);
    for (auto r : idx) G.row(r).setZero();
    t.grad(x) += G;
  });
}

namespace {

void check_segments(std::span<const Index> seg, Eigen::Index rows, Index segments, const char* op) {
  if (static_cast<Eigen::Index>(seg.size()) != rows) shape_error(op, rows, 0, static_cast<Eigen::Index>(seg.size()), 0);
  for (auto s : seg)
    if (s < 0 || s >= segments) throw InvalidArgument(std::string(op) + ": segment id " + std::to_string(s) + " out of range");
}

template <class T>
Var<T> segment_extreme(Tape<T>& t, Var<T> x, std::span<const Index> seg, Index segments, bool take_max, const char* op) {
  const auto& X = t.value(x);
  check_segments(seg, X.rows(), segments, op);
  const auto d = X.cols();
  Mat<T> out = Mat<T>::Zero(segments, d);
  std::vector<Index> arg(static_cast<std::size_t>(segments) * static_cast<std::size_t>(d), -1);
  for (std::size_t e = 0; e < seg.size(); ++e) {
    const auto base = static_cast<std::size_t>(seg[e]) * static_cast<std::size_t>(d);
    const T* xv = X.data() + static_cast<std::size_t>(e) * static_cast<std::size_t>(d);
    T* ov = out.data() + base;
    Index* av = arg.data() + base;
    for (Eigen::Index c = 0; c < d; ++c) {
      if (av[c] < 0 || (take_max ? xv[c] > ov[c] : xv[c] < ov[c])) {
        av[c] = static_cast<Index>(e);
        ov[c] = xv[c];
      }
    }
  }
  const Var<T> o{static_cast<Index>(t.size())};
  return t.push(std::move(out), t.needs_grad(x), [x, o, d, arg = std::move(arg)](Tape<T>& t) {
    const auto& G = t.grad(o);
    auto& GX = t.grad(x);
    const auto w = static_cast<std::size_t>(d);
    for (std::size_t i = 0; i < arg.size(); ++i)
      if (arg[i] >= 0) GX.data()[static_cast<std::size_t>(arg[i]) * w + i % w] += G.data()[i];
  });
}

}  // namespace

template <class T>
Var<T> segment_sum(Tape<T>& t, Var<T> x, std::span<const Index> seg, Index segments) {
  const auto& X = t.value(x);
  check_segments(seg, X.rows(), segments, "segment_sum");
  Mat<T> out = Mat<T>::Zero(segments, X.cols());
  for (std::size_t e = 0; e < seg.size(); ++e) out.row(seg[e]) += X.row(static_cast<Eigen::Index>(e));
  const Var<T> o{static_cast<Index>(t.size())};
  std::vector<Index> s(seg.begin(), seg.end());
  return t.push(std::move(out), t.needs_grad(x), [x, o, s = std::move(s)](Tape<T>& t) {
    const auto& G = t.grad(o);
    auto& GX = t.grad(x);
    for (std::size_t e = 0; e < s.size(); ++e) GX.row(static_cast<Eigen::Index>(e)) += G.row(s[e]);
  });
}

template <class T>
Var<T> segment_mean(Tape<T>& t, Var<T> x, std::span<const Index> seg, Index segments) {
  const auto& X = t.value(x);
  check_segments(seg, X.rows(), segments, "segment_mean");
  std::vector<T> inv(static_cast<std::size_t>(segments), T(0));
  for (auto s : seg) inv[static_cast<std::size_t>(s)] += T(1);
  for (auto& v : inv) v = v > T(0) ? T(1) / v : T(0);
  Mat<T> out = Mat<T>::Zero(segments, X.cols());
  for (std::size_t e = 0; e < seg.size(); ++e) out.row(seg[e]) += X.row(static_cast<Eigen::Index>(e));
  for (Index s = 0; s < segments; ++s) out.row(s) *= inv[static_cast<std::size_t>(s)];
  const Var<T> o{static_cast<Index>(t.size())};
  std::vector<Index> s(seg.begin(), seg.end());
  return t.push(std::move(out), t.needs_grad(x), [x, o, s = std::move(s), inv = std::move(inv)](Tape<T>& t) {
    const auto& G = t.grad(o);
    auto& GX = t.grad(x);
    for (std::size_t e = 0; e < s.size(); ++e)
      GX.row(static_cast<Eigen::Index>(e)) += G.row(s[e]) * inv[static_cast<std::size_t>(s[e])];
  });
}

template <class T>
Var<T> segment_max(Tape<T>& t, Var<T> x, std::span<const Index> seg, Index segments) {
  return segment_extreme(t, x, seg, segments, true, "segment_max");
}

template <class T>
Var<T> segment_min(Tape<T>& t, Var<T> x, std::span<const Index> seg, Index segments) {
  return segment_extreme(t, x, seg, segments, false, "segment_min");
}

template <class T>
Var<T> layer_norm(Tape<T>& t, Var<T> x, Var<T> gain, Var<T> bias, T eps) {
  const auto &X = t.value(x), &Gn = t.value(gain), &B = t.value(bias);
  const auto m = X.rows(), d = X.cols();
  if (d < 1) throw InvalidArgument("layer_norm: zero feature width");
  if (Gn.rows() != 1 || Gn.cols() != d) shape_error("layer_norm", m, d, Gn.rows(), Gn.cols());
  if (B.rows() != 1 || B.cols() != d) shape_error("layer_norm", m, d, B.rows(), B.cols());
  Mat<T> xhat(m, d);
  std::vector<T> rstd(static_cast<std::size_t>(m));
  for (Eigen::Index i = 0; i < m; ++i) {
    const T mean = X.row(i).mean();
    const T var = (X.row(i).array() - mean).square().mean();
    const T r = T(1) / std::sqrt(var + eps);
    rstd[static_cast<std::size_t>(i)] = r;
    xhat.row(i) = (X.row(i).array() - mean) * r;
  }
  Mat<T> out = xhat.array().rowwise() * Gn.row(0).array();
  out.rowwise() += B.row(0);
  const Var<T> o{static_cast<Index>(t.size())};
  return t.push(std::move(out), any_grad(t, {x, gain, bias}),
                [x, gain, bias, o, xhat = std::move(xhat), rstd = std::move(rstd)](Tape<T>& t) {
                  const auto& G = t.grad(o);
                  if (t.needs_grad(bias)) t.grad(bias) += G.colwise().sum();
                  if (t.needs_grad(gain)) t.grad(gain) += G.cwiseProduct(xhat).colwise().sum();
                  if (!t.needs_grad(x)) return;
                  const auto& Gn = t.value(gain);
                  auto& GX = t.grad(x);
                  const auto d = static_cast<T>(xhat.cols());
                  for (Eigen::Index i = 0; i < xhat.rows(); ++i) {
                    const auto gh = (G.row(i).array() * Gn.row(0).array()).eval();
                    const T m1 = gh.sum() / d;
                    const T m2 = (gh * xhat.row(i).array()).sum() / d;
                    GX.row(i).array() += rstd[static_cast<std::size_t>(i)] * (gh - m1 - xhat.row(i).array() * m2);
                  }
                });
}

template <class T>
Var<T> joint_key(Tape<T>& t, Var<T> k1, Var<T> k2) {
  const auto &A = t.value(k1), &B = t.value(k2);
  if (A.cols() != B.cols()) shape_error("joint_key", A.rows(), A.cols(), B.rows(), B.cols());
  const auto n1 = A.rows(), n2 = B.rows();
  Mat<T> out(n1 * n2, A.cols());
  for (Eigen::Index r = 0; r < n1; ++r)
    for (Eigen::Index c = 0; c < n2; ++c) out.row(r * n2 + c) = A.row(r).cwiseProduct(B.row(c));
  const Var<T> o{static_cast<Index>(t.size())};
  return t.push(std::move(out), any_grad(t, {k1, k2}), [k1, k2, o](Tape<T>& t) {
    const auto &A = t.value(k1), &B = t.value(k2);
    const auto& G = t.grad(o);
    const auto n1 = A.rows(), n2 = B.rows();
    const bool ga = t.needs_grad(k1), gb = t.needs_grad(k2);
    for (Eigen::Index r = 0; r < n1; ++r)
      for (Eigen::Index c = 0; c < n2; ++c) {
        if (ga) t.grad(k1).row(r) += G.row(r * n2 + c).cwiseProduct(B.row(c));
        if (gb) t.grad(k2).row(c) += G.row(r * n2 + c).cwiseProduct(A.row(r));
      }
  });
}

namespace {

void check_layout(const AttentionLayout& layout, Eigen::Index queries, Eigen::Index keys, Eigen::Index qcols, Eigen::Index kcols,
                  Eigen::Index vrows, Eigen::Index vcols) {
  if (layout.heads < 1) throw InvalidArgument("block_attention: heads must be >= 1");
  if (qcols != kcols) shape_error("block_attention", queries, qcols, keys, kcols);
  if (vrows != keys) shape_error("block_attention", keys, kcols, vrows, vcols);
  if (qcols % layout.heads != 0 || vcols % layout.heads != 0)
    throw InvalidArgument("block_attention: widths not divisible by head count");
  if (static_cast<Eigen::Index>(layout.block.size()) != queries) shape_error("block_attention", queries, 0, static_cast<Eigen::Index>(layout.block.size()), 0);
  if (layout.offsets.empty() || layout.offsets.front() != 0 || layout.offsets.back() != keys)
    throw InvalidArgument("block_attention: offsets must start at 0 and end at the key count");
  for (std::size_t b = 1; b < layout.offsets.size(); ++b)
    if (layout.offsets[b] <= layout.offsets[b - 1]) throw InvalidArgument("block_attention: empty key block " + std::to_string(b - 1));
  for (auto b : layout.block)
    if (b < 0 || static_cast<std::size_t>(b) + 1 >= layout.offsets.size())
      throw InvalidArgument("block_attention: block id " + std::to_string(b) + " out of range");
}

// probs[i][h * nb + j], nb = size of query i's block.
template <class T>
std::vector<std::vector<T>> softmax_scores(const Mat<T>& Q, const Mat<T>& K, const AttentionLayout& layout) {
  const Index H = layout.heads;
  const auto dk = Q.cols() / H;
  const T inv = T(1) / std::sqrt(static_cast<T>(dk));
  std::vector<std::vector<T>> probs(static_cast<std::size_t>(Q.rows()));
  for (Eigen::Index i = 0; i < Q.rows(); ++i) {
    const auto b = static_cast<std::size_t>(layout.block[static_cast<std::size_t>(i)]);
    const Index k0 = layout.offsets[b], nb = layout.offsets[b + 1] - k0;
    auto& p = probs[static_cast<std::size_t>(i)];
    p.resize(static_cast<std::size_t>(H) * static_cast<std::size_t>(nb));
    for (Index h = 0; h < H; ++h) {
      T mx = -std::numeric_limits<T>::infinity();
      for (Index j = 0; j < nb; ++j) {
        const T s = Q.row(i).segment(h * dk, dk).dot(K.row(k0 + j).segment(h * dk, dk)) * inv;
        p[static_cast<std::size_t>(h * nb + j)] = s;
        mx = std::max(mx, s);
      }
      T z = 0;
      for (Index j = 0; j < nb; ++j) {
        auto& v = p[static_cast<std::size_t>(h * nb + j)];
        v = std::exp(v - mx);
        z += v;
      }
      for (Index j = 0; j < nb; ++j) p[static_cast<std::size_t>(h * nb + j)] /= z;
    }
  }
  return probs;
}

}  // namespace

template <class T>
std::vector<std::vector<T>> attention_weights(const Mat<T>& q, const Mat<T>& k, const AttentionLayout& layout) {
  check_layout(layout, q.rows(), k.rows(), q.cols(), k.cols(), k.rows(), k.cols());
  return softmax_scores(q, k, layout);
}

template <class T>
Var<T> block_attention(Tape<T>& t, Var<T> q, Var<T> k, Var<T> v, const AttentionLayout& layout) {
  const auto &Q = t.value(q), &K = t.value(k), &V = t.value(v);
  check_layout(layout, Q.rows(), K.rows(), Q.cols(), K.cols(), V.rows(), V.cols());
  const Index H = layout.heads;
  const auto dv = V.cols() / H;
  auto probs = softmax_scores(Q, K, layout);
  Mat<T> out = Mat<T>::Zero(Q.rows(), V.cols());
  for (Eigen::Index i = 0; i < Q.rows(); ++i) {
    const auto b = static_cast<std::size_t>(layout.block[static_cast<std::size_t>(i)]);
    const Index k0 = layout.offsets[b], nb = layout.offsets[b + 1] - k0;
    const auto& p = probs[static_cast<std::size_t>(i)];
    for (Index h = 0; h < H; ++h)
      for (Index j = 0; j < nb; ++j) out.row(i).segment(h * dv, dv) += p[static_cast<std::size_t>(h * nb + j)] * V.row(k0 + j).segment(h * dv, dv);
  }
  const Var<T> o{static_cast<Index>(t.size())};
  return t.push(std::move(out), any_grad(t, {q, k, v}), [q, k, v, o, layout, probs = std::move(probs)](Tape<T>& t) {
    const auto &Q = t.value(q), &K = t.value(k), &V = t.value(v);
    const auto& G = t.grad(o);
    const Index H = layout.heads;
    const auto dk = Q.cols() / H, dv = V.cols() / H;
    const T inv = T(1) / std::sqrt(static_cast<T>(dk));
    const bool gq = t.needs_grad(q), gk = t.needs_grad(k), gv = t.needs_grad(v);
    Mat<T>* GQ = gq ? &t.grad(q) : nullptr;
    Mat<T>* GK = gk ? &t.grad(k) : nullptr;
    Mat<T>* GV = gv ? &t.grad(v) : nullptr;
    std::vector<T> ds;
    for (Eigen::Index i = 0; i < Q.rows(); ++i) {
      const auto b = static_cast<std::size_t>(layout.block[static_cast<std::size_t>(i)]);
      const Index k0 = layout.offsets[b], nb = layout.offsets[b + 1] - k0;
      const auto& p = probs[static_cast<std::size_t>(i)];
      ds.assign(static_cast<std::size_t>(nb), T(0));
      for (Index h = 0; h < H; ++h) {
        const auto g = G.row(i).segment(h * dv, dv);
        T dot = 0;
        for (Index j = 0; j < nb; ++j) {
          const T pj = p[static_cast<std::size_t>(h * nb + j)];
          const T dp = g.dot(V.row(k0 + j).segment(h * dv, dv));
          ds[static_cast<std::size_t>(j)] = dp;
          dot += pj * dp;
          if (gv) GV->row(k0 + j).segment(h * dv, dv) += pj * g;
        }
        for (Index j = 0; j < nb; ++j) {
          const T pj = p[static_cast<std::size_t>(h * nb + j)];
          const T s = pj * (ds[static_cast<std::size_t>(j)] - dot) * inv;
          if (gq) GQ->row(i).segment(h * dk, dk) += s * K.row(k0 + j).segment(h * dk, dk);
          if (gk) GK->row(k0 + j).segment(h * dk, dk) += s * Q.row(i).segment(h * dk, dk);
        }
      }
    }
  });
}

template <class T>
Var<T> mse(Tape<T>& t, Var<T> pred, const Mat<T>& target) {
  const auto& P = t.value(pred);
  if (P.rows() != target.rows() || P.cols() != target.cols()) shape_error("mse", P.rows(), P.cols(), target.rows(), target.cols());
  if (P.size() == 0) throw InvalidArgument("mse: empty tensor");
  Mat<T> diff = P - target;
  Mat<T> out(1, 1);
  out(0, 0) = diff.squaredNorm() / static_cast<T>(P.size());
  const Var<T> o{static_cast<Index>(t.size())};
  return t.push(std::move(out), t.needs_grad(pred), [pred, o, diff = std::move(diff)](Tape<T>& t) {
    t.grad(pred) += diff * (T(2) * t.grad(o)(0, 0) / static_cast<T>(diff.size()));
  });
}

template <class T>
Var<T> mse_rows(Tape<T>& t, Var<T> pred, const Mat<T>& target, std::span<const Index> rows) {
  const auto& P = t.value(pred);
  if (P.rows() != target.rows() || P.cols() != target.cols()) shape_error("mse_rows", P.rows(), P.cols(), target.rows(), target.cols());
  Mat<T> out = Mat<T>::Zero(1, 1);
  if (rows.empty() || P.cols() == 0) return t.constant(std::move(out));
  Mat<T> diff(static_cast<Eigen::Index>(rows.size()), P.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto r = rows[i];
    if (r < 0 || r >= P.rows()) shape_error("mse_rows", P.rows(), P.cols(), r, 0);
    diff.row(static_cast<Eigen::Index>(i)) = P.row(r) - target.row(r);
  }
  out(0, 0) = diff.squaredNorm() / static_cast<T>(diff.size());
  const Var<T> o{static_cast<Index>(t.size())};
  std::vector<Index> idx(rows.begin(), rows.end());
  return t.push(std::move(out), t.needs_grad(pred), [pred, o, idx = std::move(idx), diff = std::move(diff)](Tape<T>& t) {
    const T s = T(2) * t.grad(o)(0, 0) / static_cast<T>(diff.size());
    auto& GP = t.grad(pred);
    for (std::size_t i = 0; i < idx.size(); ++i) GP.row(idx[i]) += s * diff.row(static_cast<Eigen::Index>(i));
  });
}

template <class T>
Var<T> kl_normal(Tape<T>& t, Var<T> mu, Var<T> logvar) {
  const auto &M = t.value(mu), &L = t.value(logvar);
  if (M.rows() != L.rows() || M.cols() != L.cols()) shape_error("kl_normal", M.rows(), M.cols(), L.rows(), L.cols());
  if (M.rows() == 0) throw InvalidArgument("kl_normal: no rows");
  const T n = static_cast<T>(M.rows());
  Mat<T> out(1, 1);
  out(0, 0) = T(0.5) * (M.array().square() + L.array().exp() - T(1) - L.array()).sum() / n;
  const Var<T> o{static_cast<Index>(t.size())};
  return t.push(std::move(out), any_grad(t, {mu, logvar}), [mu, logvar, o, n](Tape<T>& t) {
    const T g = t.grad(o)(0, 0) / n;
    if (t.needs_grad(mu)) t.grad(mu) += t.value(mu) * g;
    if (t.needs_grad(logvar)) t.grad(logvar).array() += T(0.5) * g * (t.value(logvar).array().exp() - T(1));
  });
}

#define PREROUTE_NN_INSTANTIATE(T)                                                                                        \
  template Var<T> matmul(Tape<T>&, Var<T>, Var<T>);                                                                       \
  template Var<T> add(Tape<T>&, Var<T>, Var<T>);                                                                          \
  template Var<T> sub(Tape<T>&, Var<T>, Var<T>);                                                                          \
  template Var<T> mul(Tape<T>&, Var<T>, Var<T>);                                                                          \
  template Var<T> scale(Tape<T>&, Var<T>, T);                                                                             \
  template Var<T> add_bias(Tape<T>&, Var<T>, Var<T>);                                                                     \
  template Var<T> leaky_relu(Tape<T>&, Var<T>, T);                                                                        \
  template Var<T> exp(Tape<T>&, Var<T>);                                                                                  \
  template Var<T> sum_all(Tape<T>&, Var<T>);                                                                              \
  template Var<T> mean_all(Tape<T>&, Var<T>);                                                                             \
  template Var<T> mean_rows(Tape<T>&, Var<T>);                                                                            \
  template Var<T> concat_cols(Tape<T>&, std::span<const Var<T>>);                                                         \
  template Var<T> concat_rows(Tape<T>&, std::span<const Var<T>>);                                                         \
  template Var<T> slice_cols(Tape<T>&, Var<T>, Index, Index);                                                             \
  template Var<T> gather_rows(Tape<T>&, Var<T>, std::span<const Index>);                                                  \
  template Var<T> gather_rows_multi(Tape<T>&, std::span<const Var<T>>, std::span<const std::pair<Index, Index>>);         \
  template Var<T> override_rows(Tape<T>&, Var<T>, std::span<const Index>, const Mat<T>&);                                 \
  template Var<T> segment_sum(Tape<T>&, Var<T>, std::span<const Index>, Index);                                           \
  template Var<T> segment_mean(Tape<T>&, Var<T>, std::span<const Index>, Index);                                          \
  template Var<T> segment_max(Tape<T>&, Var<T>, std::span<const Index>, Index);                                           \
  template Var<T> segment_min(Tape<T>&, Var<T>, std::span<const Index>, Index);                                           \
  template Var<T> layer_norm(Tape<T>&, Var<T>, Var<T>, Var<T>, T);                                                        \
  template Var<T> joint_key(Tape<T>&, Var<T>, Var<T>);                                                                    \
  template Var<T> block_attention(Tape<T>&, Var<T>, Var<T>, Var<T>, const AttentionLayout&);                              \
  template std::vector<std::vector<T>> attention_weights(const Mat<T>&, const Mat<T>&, const AttentionLayout&);           \
  template Var<T> mse(Tape<T>&, Var<T>, const Mat<T>&);                                                                   \
  template Var<T> mse_rows(Tape<T>&, Var<T>, const Mat<T>&, std::span<const Index>);                                      \
  template Var<T> kl_normal(Tape<T>&, Var<T>, Var<T>);

PREROUTE_NN_INSTANTIATE(float)
PREROUTE_NN_INSTANTIATE(double)

#undef PREROUTE_NN_INSTANTIATE

}  // namespace preroute::nn
