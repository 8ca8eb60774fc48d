#pragma once

#include <string>
#include <unordered_map>

#include "preroute/nn/tape.hpp"
#include "preroute/rng.hpp"

namespace preroute::nn {

/// One forward pass: a tape plus the parameter leaves bound so far, so
/// that every parameter enters the tape once per pass.
template <class T>
class Ctx {
 public:
  Ctx(Tape<T>& tape, ParamStore<T>& params) : tape_(tape), params_(params) {}

  Tape<T>& tape() { return tape_; }
  ParamStore<T>& params() { return params_; }
  Var<T> p(const std::string& path);

 private:
  Tape<T>& tape_;
  ParamStore<T>& params_;
  std::unordered_map<std::string, Var<T>> bound_;
};

/// Glorot-uniform weight [in, out] at `prefix.w`, zero bias [1, out] at `prefix.b`.
template <class T> void declare_affine(ParamStore<T>& ps, Rng& rng, const std::string& prefix, int in, int out);
/// `depth` affine layers in -> hidden -> ... -> out at `prefix.<i>`.
template <class T>
void declare_mlp(ParamStore<T>& ps, Rng& rng, const std::string& prefix, int in, int hidden, int out, int depth);
/// Unit gain and zero bias at `prefix.gain` / `prefix.bias`.
template <class T> void declare_layer_norm(ParamStore<T>& ps, const std::string& prefix, int width);

template <class T> Var<T> affine(Ctx<T>& c, const std::string& prefix, Var<T> x);
/// Affine layers separated by leaky ReLU; no activation after the last.
template <class T> Var<T> mlp(Ctx<T>& c, const std::string& prefix, Var<T> x, int depth, T slope);

/// Edge list of one kind: edge e runs src[e] -> dst[e] with features
/// feat.row(e).
template <class T>
struct Edges {
  std::vector<Index> src, dst;
  Mat<T> feat;
  std::size_t size() const { return src.size(); }
};

/// Auto-encoder message passing:
///   m_ji = MLP_msg(f_j || f_i || e_ji) + f_j
///   f_i' = MLP_upd(f_i || mean || max || min || sum) + f_i
/// The last layer of MLP_upd starts at zero, so a fresh layer is the identity.
template <class T> void declare_ae_layer(ParamStore<T>& ps, Rng& rng, const std::string& prefix, int width, int edge_dim, int depth);
template <class T>
Var<T> ae_layer(Ctx<T>& c, const std::string& prefix, Var<T> f, const Edges<T>& edges, int depth, T slope);

/// Residual local learning over net and net_inv edges with separate
/// parameters per kind:
///   m_ji = MLP_msg,k(f_j || f_i || e_ji) + f_j
///   f_i' = f_i + sum_k MLP_upd,k(f_i || mean_k || max_k)
/// Same zero start for the last layer of each MLP_upd,k.
template <class T> void declare_rll_gcn(ParamStore<T>& ps, Rng& rng, const std::string& prefix, int width, int edge_dim, int depth);
template <class T>
Var<T> rll_gcn(Ctx<T>& c, const std::string& prefix, Var<T> f, const Edges<T>& net, const Edges<T>& net_inv, int depth, T slope);

/// Multi-head joint attention parameters: W_Q [d_q, H*d_k], W_K [H*d_k, H*d_k],
/// W_V [H*d_v, H*d_v], W_O [H*d_v, d_q] with bias.
template <class T> void declare_mja(ParamStore<T>& ps, Rng& rng, const std::string& prefix, int d_q, int heads, int d_k, int d_v);
/// O = softmax(Q W_Q (K W_K)^T / sqrt(d_k)) (V W_V) per head, heads
/// concatenated and projected by W_O. K is the joint key of k1 and k2;
/// v has one row per joint key.
template <class T>
Var<T> mja(Ctx<T>& c, const std::string& prefix, Var<T> q, Var<T> k1, Var<T> k2, Var<T> v, int heads);
/// Same with stacked key/value blocks already joined (see block_attention).
template <class T>
Var<T> mja_blocks(Ctx<T>& c, const std::string& prefix, Var<T> q, Var<T> keys, Var<T> values, const AttentionLayout& layout);

}  // namespace preroute::nn
