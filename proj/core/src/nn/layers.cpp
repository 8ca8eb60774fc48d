#include "preroute/nn/layers.hpp"

#include <array>
#include <cmath>

#include "preroute/error.hpp"

namespace preroute::nn {

template <class T>
Var<T> Ctx<T>::p(const std::string& path) {
  auto it = bound_.find(path);
  if (it != bound_.end()) return it->second;
  const auto v = tape_.param(params_.at(path));
  bound_.emplace(path, v);
  return v;
}

template <class T>
void declare_affine(ParamStore<T>& ps, Rng& rng, const std::string& prefix, int in, int out) {
  auto& w = ps.add(prefix + ".w", in, out);
  const double a = std::sqrt(6.0 / static_cast<double>(in + out));
  for (Eigen::Index i = 0; i < w.value.size(); ++i) w.value.data()[i] = static_cast<T>(rng.uniform(-a, a));
  ps.add(prefix + ".b", 1, out);
}

template <class T>
void declare_mlp(ParamStore<T>& ps, Rng& rng, const std::string& prefix, int in, int hidden, int out, int depth) {
  if (depth < 1) throw InvalidArgument("mlp '" + prefix + "': depth must be >= 1");
  for (int l = 0; l < depth; ++l)
    declare_affine(ps, rng, prefix + "." + std::to_string(l), l == 0 ? in : hidden, l == depth - 1 ? out : hidden);
}

template <class T>
void declare_layer_norm(ParamStore<T>& ps, const std::string& prefix, int width) {
  ps.add(prefix + ".gain", 1, width).value.setOnes();
  ps.add(prefix + ".bias", 1, width);
}

template <class T>
Var<T> affine(Ctx<T>& c, const std::string& prefix, Var<T> x) {
  auto& t = c.tape();
  return add_bias(t, matmul(t, x, c.p(prefix + ".w")), c.p(prefix + ".b"));
}

template <class T>
Var<T> mlp(Ctx<T>& c, const std::string& prefix, Var<T> x, int depth, T slope) {
  for (int l = 0; l < depth; ++l) {
    x = affine(c, prefix + "." + std::to_string(l), x);
    if (l + 1 < depth) x = leaky_relu(c.tape(), x, slope);
  }
  return x;
}

template <class T>
void declare_ae_layer(ParamStore<T>& ps, Rng& rng, const std::string& prefix, int width, int edge_dim, int depth) {
  declare_mlp(ps, rng, prefix + ".msg", 2 * width + edge_dim, width, width, depth);
  declare_mlp(ps, rng, prefix + ".upd", 5 * width, width, width, depth);
  ps.at(prefix + ".upd." + std::to_string(depth - 1) + ".w").value.setZero();
}

template <class T>
Var<T> ae_layer(Ctx<T>& c, const std::string& prefix, Var<T> f, const Edges<T>& edges, int depth, T slope) {
  auto& t = c.tape();
  const auto n = static_cast<Index>(t.value(f).rows());
  const auto fs = gather_rows(t, f, std::span<const Index>(edges.src));
  const auto fd = gather_rows(t, f, std::span<const Index>(edges.dst));
  const std::array<Var<T>, 3> in{fs, fd, t.constant(edges.feat)};
  const auto m = add(t, mlp(c, prefix + ".msg", concat_cols<T>(t, in), depth, slope), fs);
  const std::span<const Index> seg(edges.dst);
  const std::array<Var<T>, 5> agg{f, segment_mean(t, m, seg, n), segment_max(t, m, seg, n), segment_min(t, m, seg, n),
                                  segment_sum(t, m, seg, n)};
  return add(t, mlp(c, prefix + ".upd", concat_cols<T>(t, agg), depth, slope), f);
}

template <class T>
void declare_rll_gcn(ParamStore<T>& ps, Rng& rng, const std::string& prefix, int width, int edge_dim, int depth) {
  for (const char* kind : {"net", "net_inv"}) {
    declare_mlp(ps, rng, prefix + "." + kind + ".msg", 2 * width + edge_dim, width, width, depth);
    declare_mlp(ps, rng, prefix + "." + kind + ".upd", 3 * width, width, width, depth);
    ps.at(prefix + "." + kind + ".upd." + std::to_string(depth - 1) + ".w").value.setZero();
  }
}

template <class T>
Var<T> rll_gcn(Ctx<T>& c, const std::string& prefix, Var<T> f, const Edges<T>& net, const Edges<T>& net_inv, int depth, T slope) {
  auto& t = c.tape();
  const auto n = static_cast<Index>(t.value(f).rows());
  Var<T> out = f;
  for (int k = 0; k < 2; ++k) {
    const auto& edges = k == 0 ? net : net_inv;
    const std::string kp = prefix + (k == 0 ? ".net" : ".net_inv");
    const auto fs = gather_rows(t, f, std::span<const Index>(edges.src));
    const auto fd = gather_rows(t, f, std::span<const Index>(edges.dst));
    const std::array<Var<T>, 3> in{fs, fd, t.constant(edges.feat)};
    const auto m = add(t, mlp(c, kp + ".msg", concat_cols<T>(t, in), depth, slope), fs);
    const std::span<const Index> seg(edges.dst);
    const std::array<Var<T>, 3> agg{f, segment_mean(t, m, seg, n), segment_max(t, m, seg, n)};
    out = add(t, out, mlp(c, kp + ".upd", concat_cols<T>(t, agg), depth, slope));
  }
  return out;
}

template <class T>
void declare_mja(ParamStore<T>& ps, Rng& rng, const std::string& prefix, int d_q, int heads, int d_k, int d_v) {
  auto glorot = [&](const std::string& path, int in, int out) {
    auto& w = ps.add(path, in, out);
    const double a = std::sqrt(6.0 / static_cast<double>(in + out));
    for (Eigen::Index i = 0; i < w.value.size(); ++i) w.value.data()[i] = static_cast<T>(rng.uniform(-a, a));
  };
  glorot(prefix + ".w_q", d_q, heads * d_k);
  glorot(prefix + ".w_k", heads * d_k, heads * d_k);
  glorot(prefix + ".w_v", heads * d_v, heads * d_v);
  declare_affine(ps, rng, prefix + ".out", heads * d_v, d_q);
}

template <class T>
Var<T> mja_blocks(Ctx<T>& c, const std::string& prefix, Var<T> q, Var<T> keys, Var<T> values, const AttentionLayout& layout) {
  auto& t = c.tape();
  const auto qp = matmul(t, q, c.p(prefix + ".w_q"));
  const auto kp = matmul(t, keys, c.p(prefix + ".w_k"));
  const auto vp = matmul(t, values, c.p(prefix + ".w_v"));
  return affine(c, prefix + ".out", block_attention(t, qp, kp, vp, layout));
}

template <class T>
Var<T> mja(Ctx<T>& c, const std::string& prefix, Var<T> q, Var<T> k1, Var<T> k2, Var<T> v, int heads) {
  auto& t = c.tape();
  const auto keys = joint_key(t, k1, k2);
  const auto n = static_cast<Index>(t.value(keys).rows());
  AttentionLayout layout;
  layout.offsets = {0, n};
  layout.block.assign(static_cast<std::size_t>(t.value(q).rows()), 0);
  layout.heads = heads;
  return mja_blocks(c, prefix, q, keys, v, layout);
}

#define PREROUTE_LAYERS_INSTANTIATE(T)                                                                               \
  template class Ctx<T>;                                                                                             \
  template void declare_affine(ParamStore<T>&, Rng&, const std::string&, int, int);                                  \
  template void declare_mlp(ParamStore<T>&, Rng&, const std::string&, int, int, int, int);                           \
  template void declare_layer_norm(ParamStore<T>&, const std::string&, int);                                         \
  template Var<T> affine(Ctx<T>&, const std::string&, Var<T>);                                                       \
  template Var<T> mlp(Ctx<T>&, const std::string&, Var<T>, int, T);                                                  \
  template void declare_ae_layer(ParamStore<T>&, Rng&, const std::string&, int, int, int);                           \
  template Var<T> ae_layer(Ctx<T>&, const std::string&, Var<T>, const Edges<T>&, int, T);                            \
  template void declare_rll_gcn(ParamStore<T>&, Rng&, const std::string&, int, int, int);                            \
  template Var<T> rll_gcn(Ctx<T>&, const std::string&, Var<T>, const Edges<T>&, const Edges<T>&, int, T);            \
  template void declare_mja(ParamStore<T>&, Rng&, const std::string&, int, int, int, int);                           \
  template Var<T> mja_blocks(Ctx<T>&, const std::string&, Var<T>, Var<T>, Var<T>, const AttentionLayout&);           \
  template Var<T> mja(Ctx<T>&, const std::string&, Var<T>, Var<T>, Var<T>, Var<T>, int);

PREROUTE_LAYERS_INSTANTIATE(float)
PREROUTE_LAYERS_INSTANTIATE(double)

#undef PREROUTE_LAYERS_INSTANTIATE

}  // namespace preroute::nn
