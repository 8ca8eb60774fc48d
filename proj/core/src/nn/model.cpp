#include "preroute/nn/model.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <deque>

#include "preroute/error.hpp"

namespace preroute::nn {

const char* to_string(EncoderMode m) {
  switch (m) {
    case EncoderMode::Frozen: return "frozen";
    case EncoderMode::Finetune: return "finetune";
    case EncoderMode::None: return "none";
  }
  return "?";
}

EncoderMode encoder_mode_from_string(std::string_view s) {
  if (s == "frozen") return EncoderMode::Frozen;
  if (s == "finetune") return EncoderMode::Finetune;
  if (s == "none") return EncoderMode::None;
  throw InvalidArgument("unknown encoder mode '" + std::string(s) + "' (expected frozen, finetune or none)");
}

namespace {

template <class T>
void declare_uniform(ParamStore<T>& ps, Rng& rng, const std::string& path, int rows, int cols) {
  auto& w = ps.add(path, rows, cols);
  const double a = std::sqrt(6.0 / static_cast<double>(rows + cols));
  for (Eigen::Index i = 0; i < w.value.size(); ++i) w.value.data()[i] = static_cast<T>(rng.uniform(-a, a));
}

template <class V>
std::span<const V> as_span(const std::vector<V>& v) {
  return {v.data(), v.size()};
}

template <class T>
Var<T> cat(Tape<T>& t, std::initializer_list<Var<T>> parts) {
  const std::vector<Var<T>> v(parts);
  return concat_cols<T>(t, as_span(v));
}

std::span<const Index> sp(const std::vector<Index>& v) { return {v.data(), v.size()}; }

}  // namespace

template <class T>
void declare_encoder(ParamStore<T>& ps, const Hyper& h, std::uint64_t seed) {
  Rng rng(Rng::derive(seed, 1));
  declare_affine(ps, rng, "encoder.lift", h.node_dim, h.ae_hidden);
  for (int l = 0; l < h.ae_enc_layers; ++l)
    declare_ae_layer(ps, rng, "encoder.layer." + std::to_string(l), h.ae_hidden, h.ae_edge_dim(), h.mlp_depth);
  declare_affine(ps, rng, "encoder.mu", h.ae_hidden, h.latent_dim);
  declare_affine(ps, rng, "encoder.logvar", h.ae_hidden, h.latent_dim);
}

template <class T>
void declare_decoder(ParamStore<T>& ps, const Hyper& h, std::uint64_t seed) {
  Rng rng(Rng::derive(seed, 2));
  declare_affine(ps, rng, "decoder.lift", h.latent_dim, h.ae_hidden);
  for (int l = 0; l < h.ae_dec_layers; ++l)
    declare_ae_layer(ps, rng, "decoder.layer." + std::to_string(l), h.ae_hidden, h.ae_edge_dim(), h.mlp_depth);
  declare_affine(ps, rng, "decoder.out", h.ae_hidden, h.node_dim);
}

template <class T>
void declare_gnn(ParamStore<T>& ps, const Hyper& h, std::uint64_t seed) {
  Rng rng(Rng::derive(seed, 3));
  const int H = h.hidden, d = h.mlp_depth;
  const int kw = h.heads * h.d_k, vw = h.heads * h.d_v;
  declare_affine(ps, rng, "gnn.lift", h.input_dim(), H);
  for (int l = 0; l < h.gcn_layers; ++l) declare_rll_gcn(ps, rng, "gnn.gcn." + std::to_string(l), H, h.edge_dim, d);
  declare_affine(ps, rng, "gnn.at_init", H, H);
  declare_mlp(ps, rng, "gnn.at.q", 3 * H, H, H, d);
  declare_mja(ps, rng, "gnn.mja", H, h.heads, h.d_k, h.d_v);
  declare_affine(ps, rng, "gnn.mja.row_lift", 1, kw);
  declare_affine(ps, rng, "gnn.mja.col_lift", 1, kw);
  declare_affine(ps, rng, "gnn.mja.val_lift", 2, vw);
  declare_uniform(ps, rng, "gnn.mja.net_k1", 2, kw);
  declare_uniform(ps, rng, "gnn.mja.net_k2", 2, kw);
  declare_uniform(ps, rng, "gnn.mja.net_v", 4, vw);
  declare_layer_norm(ps, "gnn.at.ln", H);
  declare_mlp(ps, rng, "gnn.at.msg", 4 * H, H, H, d);
  declare_mlp(ps, rng, "gnn.at.upd", 3 * H, H, H, d);
  declare_mlp(ps, rng, "gnn.head.as", 2 * H, H, 8, d);
  declare_mlp(ps, rng, "gnn.head.cd", 4 * H, H, 4, d);
  declare_mlp(ps, rng, "gnn.head.nd", 4 * H + h.edge_dim, H, 4, d);
}

namespace {

// Builds a view over the nodes `keep` (ascending ids of `g`), computing
// arrival times for levels [first, last].
template <class T>
GraphView<T> build_view(const CircuitGraph& g, const std::vector<std::int32_t>& level, std::int32_t max_level,
                        const std::vector<NodeId>& keep, std::int32_t first, std::int32_t last,
                        const std::vector<NodeId>* node_parent, const std::vector<EdgeId>* edge_parent, const Hyper& h,
                        bool timing_blocks = true) {
  if (static_cast<int>(g.feature_dim()) != h.node_dim)
    throw InvalidArgument("graph '" + g.name() + "' has " + std::to_string(g.feature_dim()) + " node features, model expects " +
                          std::to_string(h.node_dim));
  GraphView<T> v;
  v.n = static_cast<Index>(keep.size());
  v.max_level = max_level;
  v.first_level = first;
  v.last_level = last;
  v.luts = g.luts();
  std::vector<Index> vid(g.num_nodes(), -1);
  v.x.resize(v.n, h.node_dim);
  v.level_enc.resize(v.n, h.level_dim());
  const double L = std::max<double>(1.0, max_level);
  for (Index i = 0; i < v.n; ++i) {
    const NodeId u = keep[static_cast<std::size_t>(i)];
    vid[static_cast<std::size_t>(u)] = i;
    v.node_ref.push_back(node_parent ? (*node_parent)[static_cast<std::size_t>(u)] : u);
    const auto lv = level[static_cast<std::size_t>(u)];
    v.level.push_back(lv);
    const auto& f = g.node(u).features;
    for (int c = 0; c < h.node_dim; ++c) v.x(i, c) = static_cast<T>(f[static_cast<std::size_t>(c)]);
    const auto enc = level_encoding(static_cast<double>(lv), h.n_freq, L);
    for (int c = 0; c < h.level_dim(); ++c) v.level_enc(i, c) = static_cast<T>(enc[static_cast<std::size_t>(c)]);
  }

  std::vector<std::array<T, 3>> net_f, inv_f;
  std::vector<std::array<T, 6>> ae_f;
  std::vector<EdgeId> timing;  // local edge ids of timing edges inside the view
  for (std::size_t e = 0; e < g.num_edges(); ++e) {
    const auto& r = g.edge(static_cast<EdgeId>(e));
    const Index s = vid[static_cast<std::size_t>(r.src)], d = vid[static_cast<std::size_t>(r.dst)];
    if (s < 0 || d < 0) continue;
    const EdgeId ref = edge_parent ? (*edge_parent)[e] : static_cast<EdgeId>(e);
    std::array<T, 3> geo{};
    if (r.kind != EdgeKind::Cell)
      for (int c = 0; c < 3; ++c) geo[static_cast<std::size_t>(c)] = static_cast<T>(r.features[static_cast<std::size_t>(c)]);
    ae_f.push_back({geo[0], geo[1], geo[2], T(r.kind == EdgeKind::Cell), T(r.kind == EdgeKind::Net), T(r.kind == EdgeKind::NetInv)});
    v.ae.src.push_back(s);
    v.ae.dst.push_back(d);
    switch (r.kind) {
      case EdgeKind::Net:
        v.net.src.push_back(s);
        v.net.dst.push_back(d);
        net_f.push_back(geo);
        v.net_ref.push_back(ref);
        timing.push_back(static_cast<EdgeId>(e));
        break;
      case EdgeKind::NetInv:
        v.net_inv.src.push_back(s);
        v.net_inv.dst.push_back(d);
        inv_f.push_back(geo);
        break;
      case EdgeKind::Cell:
        v.cell.src.push_back(s);
        v.cell.dst.push_back(d);
        v.cell_lut.push_back(r.lut);
        v.cell_ref.push_back(ref);
        timing.push_back(static_cast<EdgeId>(e));
        break;
    }
  }
  auto fill = [](Mat<T>& m, const auto& rows, int w) {
    m.resize(static_cast<Eigen::Index>(rows.size()), w);
    for (std::size_t r = 0; r < rows.size(); ++r)
      for (int c = 0; c < w; ++c) m(static_cast<Eigen::Index>(r), c) = rows[r][static_cast<std::size_t>(c)];
  };
  fill(v.net.feat, net_f, 3);
  fill(v.net_inv.feat, inv_f, 3);
  fill(v.ae.feat, ae_f, 6);
  v.cell.feat.resize(static_cast<Eigen::Index>(v.cell.size()), 0);

  for (Index i = 0; i < v.n; ++i) {
    const auto lv = v.level[static_cast<std::size_t>(i)];
    if (lv < first) v.given.push_back(i);
    else if (lv <= last) v.out_nodes.push_back(i);
  }
  auto is_out = [&](Index i) {
    const auto lv = v.level[static_cast<std::size_t>(i)];
    return lv >= first && lv <= last;
  };
  for (std::size_t e = 0; e < v.cell.size(); ++e)
    if (is_out(v.cell.dst[e])) v.out_cell.push_back(static_cast<Index>(e));
  for (std::size_t e = 0; e < v.net.size(); ++e)
    if (is_out(v.net.dst[e])) v.out_net.push_back(static_cast<Index>(e));

  if (timing_blocks && last >= first) {
    v.blocks.resize(static_cast<std::size_t>(last - first + 1));
    std::vector<Index> pos(static_cast<std::size_t>(v.n), -1);
    for (const Index i : v.out_nodes) {
      auto& b = v.blocks[static_cast<std::size_t>(v.level[static_cast<std::size_t>(i)] - first)];
      pos[static_cast<std::size_t>(i)] = static_cast<Index>(b.nodes.size());
      b.nodes.push_back(i);
    }
    std::vector<std::uint8_t> has_pred(static_cast<std::size_t>(v.n), 0);
    const auto lut_count = static_cast<Index>(v.luts.size());
    for (const EdgeId e : timing) {
      const auto& r = g.edge(e);
      const Index s = vid[static_cast<std::size_t>(r.src)], d = vid[static_cast<std::size_t>(r.dst)];
      if (!is_out(d)) continue;
      auto& b = v.blocks[static_cast<std::size_t>(v.level[static_cast<std::size_t>(d)] - first)];
      b.src.push_back(s);
      b.dst_local.push_back(pos[static_cast<std::size_t>(d)]);
      b.block.push_back(r.kind == EdgeKind::Cell ? r.lut : lut_count);
      has_pred[static_cast<std::size_t>(d)] = 1;
    }
    for (const Index i : v.out_nodes) {
      const bool root = v.level[static_cast<std::size_t>(i)] == 0;
      if (root == static_cast<bool>(has_pred[static_cast<std::size_t>(i)]))
        throw InvalidArgument("view of '" + g.name() + "': node " + std::to_string(v.node_ref[static_cast<std::size_t>(i)]) +
                              (root ? " at level 0 has a timing predecessor" : " is missing its timing predecessors"));
    }
  }
  return v;
}

}  // namespace

template <class T>
GraphView<T> make_view(const CircuitGraph& graph, const LevelSchedule& schedule, const Hyper& h) {
  std::vector<NodeId> keep(graph.num_nodes());
  for (std::size_t i = 0; i < keep.size(); ++i) keep[i] = static_cast<NodeId>(i);
  return build_view<T>(graph, schedule.node_level, schedule.max_level(), keep, 0, schedule.max_level(), nullptr, nullptr, h);
}

template <class T>
GraphView<T> make_view(const SubGraph& sub, const Hyper& h) {
  const auto& g = sub.graph;
  const auto n = g.num_nodes();
  // Nodes within gcn_layers undirected net hops of the core, plus the
  // core's timing predecessors.
  std::vector<int> dist(n, -1);
  std::deque<NodeId> queue;
  for (std::size_t i = 0; i < n; ++i)
    if (sub.core_mask[i]) {
      dist[i] = 0;
      queue.push_back(static_cast<NodeId>(i));
    }
  while (!queue.empty()) {
    const NodeId u = queue.front();
    queue.pop_front();
    const int du = dist[static_cast<std::size_t>(u)];
    if (du >= h.gcn_layers) continue;
    auto visit = [&](NodeId w) {
      if (dist[static_cast<std::size_t>(w)] >= 0) return;
      dist[static_cast<std::size_t>(w)] = du + 1;
      queue.push_back(w);
    };
    for (const EdgeId e : g.in_edges(u))
      if (g.edge(e).kind != EdgeKind::Cell) visit(g.edge(e).src);
    for (const EdgeId e : g.out_edges(u))
      if (g.edge(e).kind != EdgeKind::Cell) visit(g.edge(e).dst);
  }
  std::vector<std::uint8_t> mark(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    if (dist[i] >= 0) mark[i] = 1;
    if (!sub.core_mask[i]) continue;
    for (const EdgeId e : g.in_edges(static_cast<NodeId>(i)))
      if (CircuitGraph::is_timing_edge(g.edge(e).kind)) mark[static_cast<std::size_t>(g.edge(e).src)] = 1;
  }
  std::vector<NodeId> keep;
  for (std::size_t i = 0; i < n; ++i)
    if (mark[i]) keep.push_back(static_cast<NodeId>(i));
  return build_view<T>(g, sub.parent_level, sub.parent_max_level, keep, sub.core_levels.first, sub.core_levels.last,
                       &sub.local_to_parent, &sub.edge_to_parent, h);
}

template <class T>
GraphView<T> make_ae_view(const SubGraph& sub, const Hyper& h) {
  const auto& g = sub.graph;
  const auto n = g.num_nodes();
  const int hops = h.ae_enc_layers + h.ae_dec_layers;
  std::vector<int> dist(n, -1);
  std::deque<NodeId> queue;
  for (std::size_t i = 0; i < n; ++i)
    if (sub.core_mask[i]) {
      dist[i] = 0;
      queue.push_back(static_cast<NodeId>(i));
    }
  while (!queue.empty()) {
    const NodeId u = queue.front();
    queue.pop_front();
    const int du = dist[static_cast<std::size_t>(u)];
    if (du >= hops) continue;
    auto visit = [&](NodeId w) {
      if (dist[static_cast<std::size_t>(w)] >= 0) return;
      dist[static_cast<std::size_t>(w)] = du + 1;
      queue.push_back(w);
    };
    for (const EdgeId e : g.in_edges(u)) visit(g.edge(e).src);
    for (const EdgeId e : g.out_edges(u)) visit(g.edge(e).dst);
  }
  std::vector<NodeId> keep;
  for (std::size_t i = 0; i < n; ++i)
    if (dist[i] >= 0) keep.push_back(static_cast<NodeId>(i));
  return build_view<T>(g, sub.parent_level, sub.parent_max_level, keep, sub.core_levels.first, sub.core_levels.last,
                       &sub.local_to_parent, &sub.edge_to_parent, h, false);
}

template <class T>
EncoderOut<T> encode(Ctx<T>& c, const Hyper& h, const GraphView<T>& v, Rng* noise) {
  auto& t = c.tape();
  const T slope = static_cast<T>(h.leaky_slope);
  auto f = affine(c, "encoder.lift", t.constant(v.x));
  for (int l = 0; l < h.ae_enc_layers; ++l) f = ae_layer(c, "encoder.layer." + std::to_string(l), f, v.ae, h.mlp_depth, slope);
  EncoderOut<T> out;
  out.mu = affine(c, "encoder.mu", f);
  out.logvar = affine(c, "encoder.logvar", f);
  if (noise) {
    Mat<T> eps(v.n, h.latent_dim);
    for (Eigen::Index i = 0; i < eps.size(); ++i) eps.data()[i] = static_cast<T>(noise->normal());
    const auto sd = exp(t, scale(t, out.logvar, T(0.5)));
    out.z = add(t, out.mu, mul(t, sd, t.constant(std::move(eps))));
  } else {
    out.z = out.mu;
  }
  out.graph = mean_rows(t, out.z);
  return out;
}

template <class T>
Var<T> decode(Ctx<T>& c, const Hyper& h, const GraphView<T>& v, Var<T> z) {
  const T slope = static_cast<T>(h.leaky_slope);
  auto f = affine(c, "decoder.lift", z);
  for (int l = 0; l < h.ae_dec_layers; ++l) f = ae_layer(c, "decoder.layer." + std::to_string(l), f, v.ae, h.mlp_depth, slope);
  return affine(c, "decoder.out", f);
}

template <class T>
AtResult<T> at_propagation(Ctx<T>& c, const Hyper& h, const GraphView<T>& v, Var<T> f, const Carry<T>* carry) {
  auto& t = c.tape();
  const T slope = static_cast<T>(h.leaky_slope);
  const int d = h.mlp_depth;
  AtResult<T> r;
  r.where.assign(static_cast<std::size_t>(v.n), {-1, -1});
  if (!v.given.empty()) {
    if (!carry) throw InvalidArgument("view has nodes below its first level but no carry was supplied");
    Mat<T> at(static_cast<Eigen::Index>(v.given.size()), carry->at.cols());
    for (std::size_t i = 0; i < v.given.size(); ++i) {
      at.row(static_cast<Eigen::Index>(i)) = carry->at.row(v.node_ref[static_cast<std::size_t>(v.given[i])]);
      r.where[static_cast<std::size_t>(v.given[i])] = {0, static_cast<Index>(i)};
    }
    r.parts.push_back(t.constant(std::move(at)));
  }

  // Key/value blocks: one per lut, then the net block.
  Var<T> keys, vals;
  AttentionLayout layout;
  layout.heads = h.heads;
  const bool any_edges = std::any_of(v.blocks.begin(), v.blocks.end(), [](const auto& b) { return !b.src.empty(); });
  if (any_edges) {
    std::vector<Var<T>> kp, vp;
    layout.offsets.push_back(0);
    for (const auto& lut : v.luts) {
      const auto R = static_cast<Eigen::Index>(lut.rows()), C = static_cast<Eigen::Index>(lut.cols());
      Mat<T> ra(R, 1), ca(C, 1), dv(R * C, 2);
      for (Eigen::Index i = 0; i < R; ++i) ra(i, 0) = static_cast<T>(lut.row_axis[static_cast<std::size_t>(i)]);
      for (Eigen::Index i = 0; i < C; ++i) ca(i, 0) = static_cast<T>(lut.col_axis[static_cast<std::size_t>(i)]);
      for (Eigen::Index i = 0; i < R * C; ++i) {
        dv(i, 0) = static_cast<T>(lut.delay[static_cast<std::size_t>(i)]);
        dv(i, 1) = static_cast<T>(lut.slew[static_cast<std::size_t>(i)]);
      }
      kp.push_back(joint_key(t, affine(c, "gnn.mja.row_lift", t.constant(std::move(ra))),
                             affine(c, "gnn.mja.col_lift", t.constant(std::move(ca)))));
      vp.push_back(affine(c, "gnn.mja.val_lift", t.constant(std::move(dv))));
      layout.offsets.push_back(layout.offsets.back() + static_cast<Index>(R * C));
    }
    kp.push_back(joint_key(t, c.p("gnn.mja.net_k1"), c.p("gnn.mja.net_k2")));
    vp.push_back(c.p("gnn.mja.net_v"));
    layout.offsets.push_back(layout.offsets.back() + 4);
    keys = concat_rows<T>(t, as_span(kp));
    vals = concat_rows<T>(t, as_span(vp));
  }

  for (const auto& b : v.blocks) {
    if (b.nodes.empty()) continue;
    const auto fi_nodes = gather_rows(t, f, sp(b.nodes));
    Var<T> at;
    if (b.src.empty()) {
      at = affine(c, "gnn.at_init", fi_nodes);
    } else {
      std::vector<Index> dst(b.dst_local.size());
      std::vector<std::pair<Index, Index>> src_where(b.src.size());
      for (std::size_t e = 0; e < b.src.size(); ++e) {
        dst[e] = b.nodes[static_cast<std::size_t>(b.dst_local[e])];
        src_where[e] = r.where[static_cast<std::size_t>(b.src[e])];
        if (src_where[e].first < 0) throw InvalidArgument("arrival time of a predecessor is not available");
      }
      const auto fi = gather_rows(t, f, sp(dst));
      const auto fj = gather_rows(t, f, sp(b.src));
      const auto atj = gather_rows_multi<T>(t, as_span(r.parts), std::span<const std::pair<Index, Index>>(src_where));
      const auto q = add(t, mlp(c, "gnn.at.q", cat<T>(t, {fi, fj, atj}), d, slope), atj);
      layout.block = b.block;
      const auto o = mja_blocks(c, "gnn.mja", q, keys, vals, layout);
      const auto y = layer_norm(t, add(t, o, q), c.p("gnn.at.ln.gain"), c.p("gnn.at.ln.bias"));
      const auto m = add(t, mlp(c, "gnn.at.msg", cat<T>(t, {fi, fj, atj, y}), d, slope), atj);
      const auto seg = sp(b.dst_local);
      const auto k = static_cast<Index>(b.nodes.size());
      at = mlp(c, "gnn.at.upd", cat<T>(t, {segment_mean(t, m, seg, k), segment_max(t, m, seg, k), fi_nodes}), d, slope);
    }
    const auto part = static_cast<Index>(r.parts.size());
    r.parts.push_back(at);
    for (std::size_t i = 0; i < b.nodes.size(); ++i) r.where[static_cast<std::size_t>(b.nodes[i])] = {part, static_cast<Index>(i)};
  }
  return r;
}

template <class T>
GnnOut<T> forward(Ctx<T>& c, const Hyper& h, const GraphView<T>& v, Var<T> latent, Var<T> graph_emb, const Carry<T>* carry) {
  auto& t = c.tape();
  const T slope = static_cast<T>(h.leaky_slope);
  const int d = h.mlp_depth;
  std::vector<Var<T>> in{t.constant(v.x)};
  if (h.use_encoder) {
    in.push_back(latent);
    const std::vector<Index> zeros(static_cast<std::size_t>(v.n), 0);
    in.push_back(gather_rows(t, graph_emb, sp(zeros)));
  }
  in.push_back(t.constant(v.level_enc));
  auto f = affine(c, "gnn.lift", concat_cols<T>(t, as_span(in)));
  for (int l = 0; l < h.gcn_layers; ++l) f = rll_gcn(c, "gnn.gcn." + std::to_string(l), f, v.net, v.net_inv, d, slope);
  if (!v.given.empty()) {
    if (!carry) throw InvalidArgument("view has nodes below its first level but no carry was supplied");
    Mat<T> vals(static_cast<Eigen::Index>(v.given.size()), carry->f.cols());
    for (std::size_t i = 0; i < v.given.size(); ++i) vals.row(static_cast<Eigen::Index>(i)) = carry->f.row(v.node_ref[static_cast<std::size_t>(v.given[i])]);
    f = override_rows(t, f, sp(v.given), vals);
  }

  GnnOut<T> out;
  out.f = f;
  const auto atr = at_propagation(c, h, v, f, carry);
  auto at_of = [&](const std::vector<Index>& nodes) {
    std::vector<std::pair<Index, Index>> w(nodes.size());
    for (std::size_t i = 0; i < nodes.size(); ++i) w[i] = atr.where[static_cast<std::size_t>(nodes[i])];
    return gather_rows_multi<T>(t, as_span(atr.parts), std::span<const std::pair<Index, Index>>(w));
  };
  if (v.out_nodes.empty()) return out;
  out.at = at_of(v.out_nodes);
  out.f_out = gather_rows(t, f, sp(v.out_nodes));
  out.as = mlp(c, "gnn.head.as", cat<T>(t, {out.at, out.f_out}), d, slope);

  auto pick = [](const std::vector<Index>& ids, const std::vector<Index>& of) {
    std::vector<Index> r(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) r[i] = of[static_cast<std::size_t>(ids[i])];
    return r;
  };
  if (!v.out_cell.empty()) {
    const auto s = pick(v.out_cell, v.cell.src), dd = pick(v.out_cell, v.cell.dst);
    out.cd = mlp(c, "gnn.head.cd", cat<T>(t, {gather_rows(t, f, sp(s)), gather_rows(t, f, sp(dd)), at_of(s), at_of(dd)}), d, slope);
  }
  if (!v.out_net.empty()) {
    const auto s = pick(v.out_net, v.net.src), dd = pick(v.out_net, v.net.dst);
    Mat<T> e(static_cast<Eigen::Index>(v.out_net.size()), v.net.feat.cols());
    for (std::size_t i = 0; i < v.out_net.size(); ++i) e.row(static_cast<Eigen::Index>(i)) = v.net.feat.row(v.out_net[i]);
    out.nd = mlp(c, "gnn.head.nd",
                 cat<T>(t, {gather_rows(t, f, sp(s)), gather_rows(t, f, sp(dd)), at_of(s), at_of(dd), t.constant(std::move(e))}), d,
                 slope);
  }
  return out;
}

template <class T>
Mat<T> rows_for(const Mat<T>& parent, const std::vector<NodeId>& refs) {
  Mat<T> out(static_cast<Eigen::Index>(refs.size()), parent.cols());
  for (std::size_t i = 0; i < refs.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = parent.row(refs[i]);
  return out;
}

template <class T>
std::pair<Mat<T>, Mat<T>> encoder_latents(ParamStore<T>& ps, const Hyper& h, const CircuitGraph& graph, const LevelSchedule& schedule) {
  const auto v = make_view<T>(graph, schedule, h);
  const T slope = static_cast<T>(h.leaky_slope);
  Mat<T> f;
  {
    Tape<T> t;
    Ctx<T> c(t, ps);
    f = t.value(affine(c, "encoder.lift", t.constant(v.x)));
  }
  for (int l = 0; l < h.ae_enc_layers; ++l) {
    Tape<T> t;
    Ctx<T> c(t, ps);
    f = t.value(ae_layer(c, "encoder.layer." + std::to_string(l), t.constant(std::move(f)), v.ae, h.mlp_depth, slope));
  }
  Tape<T> t;
  Ctx<T> c(t, ps);
  Mat<T> mu = t.value(affine(c, "encoder.mu", t.constant(std::move(f))));
  Mat<T> g = mu.colwise().mean();
  return {std::move(mu), std::move(g)};
}

template <class T>
Predictions predict_partitioned(ParamStore<T>& ps, const Hyper& h, const CircuitGraph& graph, const LevelSchedule& schedule,
                                const std::vector<SubGraph>& parts) {
  const auto n = static_cast<Eigen::Index>(graph.num_nodes());
  Mat<T> mu, g;
  if (h.use_encoder) std::tie(mu, g) = encoder_latents(ps, h, graph, schedule);
  Carry<T> carry{Mat<T>::Zero(n, h.hidden), Mat<T>::Zero(n, h.hidden)};
  Predictions p;
  p.as = Mat<double>::Zero(n, 8);
  p.edge_delay = Mat<double>::Zero(static_cast<Eigen::Index>(graph.num_edges()), 4);
  p.hidden_at = Mat<double>::Zero(n, h.hidden);
  std::vector<std::uint8_t> done(static_cast<std::size_t>(n), 0);
  for (const auto& sub : parts) {
    if (sub.graph.num_nodes() > 0 && sub.local_to_parent.back() >= n)
      throw InvalidArgument("sub-graph does not belong to graph '" + graph.name() + "'");
    const auto v = make_view<T>(sub, h);
    Tape<T> t;
    Ctx<T> c(t, ps);
    Var<T> latent, emb;
    if (h.use_encoder) {
      latent = t.constant(rows_for(mu, v.node_ref));
      emb = t.constant(g);
    }
    const auto out = forward(c, h, v, latent, emb, &carry);
    if (v.out_nodes.empty()) continue;
    const auto& f = t.value(out.f_out);
    const auto& at = t.value(out.at);
    const auto& as = t.value(out.as);
    for (std::size_t i = 0; i < v.out_nodes.size(); ++i) {
      const auto r = static_cast<Eigen::Index>(i);
      const NodeId u = v.node_ref[static_cast<std::size_t>(v.out_nodes[i])];
      if (done[static_cast<std::size_t>(u)]) throw InvalidArgument("node " + std::to_string(u) + " predicted twice");
      done[static_cast<std::size_t>(u)] = 1;
      carry.f.row(u) = f.row(r);
      carry.at.row(u) = at.row(r);
      p.as.row(u) = as.row(r).template cast<double>();
      p.hidden_at.row(u) = at.row(r).template cast<double>();
    }
    if (out.cd.valid()) {
      const auto& cd = t.value(out.cd);
      for (std::size_t i = 0; i < v.out_cell.size(); ++i)
        p.edge_delay.row(v.cell_ref[static_cast<std::size_t>(v.out_cell[i])]) = cd.row(static_cast<Eigen::Index>(i)).template cast<double>();
    }
    if (out.nd.valid()) {
      const auto& nd = t.value(out.nd);
      for (std::size_t i = 0; i < v.out_net.size(); ++i)
        p.edge_delay.row(v.net_ref[static_cast<std::size_t>(v.out_net[i])]) = nd.row(static_cast<Eigen::Index>(i)).template cast<double>();
    }
  }
  for (Eigen::Index u = 0; u < n; ++u)
    if (!done[static_cast<std::size_t>(u)]) throw InvalidArgument("node " + std::to_string(u) + " not covered by any sub-graph");
  return p;
}

template <class T>
Predictions predict(ParamStore<T>& ps, const Hyper& h, const CircuitGraph& graph, const LevelSchedule& schedule, std::size_t max_size) {
  PartitionOptions opts;
  opts.max_size = max_size;
  opts.pad_levels = h.gcn_layers;
  opts.split_oversized = true;
  return predict_partitioned(ps, h, graph, schedule, partition(graph, schedule, opts));
}

#define PREROUTE_MODEL_INSTANTIATE(T)                                                                                     \
  template void declare_encoder(ParamStore<T>&, const Hyper&, std::uint64_t);                                             \
  template void declare_decoder(ParamStore<T>&, const Hyper&, std::uint64_t);                                             \
  template void declare_gnn(ParamStore<T>&, const Hyper&, std::uint64_t);                                                 \
  template GraphView<T> make_view(const CircuitGraph&, const LevelSchedule&, const Hyper&);                               \
  template GraphView<T> make_view(const SubGraph&, const Hyper&);                                                         \
  template GraphView<T> make_ae_view(const SubGraph&, const Hyper&);                                                      \
  template EncoderOut<T> encode(Ctx<T>&, const Hyper&, const GraphView<T>&, Rng*);                                        \
  template Var<T> decode(Ctx<T>&, const Hyper&, const GraphView<T>&, Var<T>);                                             \
  template AtResult<T> at_propagation(Ctx<T>&, const Hyper&, const GraphView<T>&, Var<T>, const Carry<T>*);               \
  template GnnOut<T> forward(Ctx<T>&, const Hyper&, const GraphView<T>&, Var<T>, Var<T>, const Carry<T>*);                \
  template Mat<T> rows_for(const Mat<T>&, const std::vector<NodeId>&);                                                    \
  template std::pair<Mat<T>, Mat<T>> encoder_latents(ParamStore<T>&, const Hyper&, const CircuitGraph&, const LevelSchedule&); \
  template Predictions predict_partitioned(ParamStore<T>&, const Hyper&, const CircuitGraph&, const LevelSchedule&,       \
                                           const std::vector<SubGraph>&);                                                 \
  template Predictions predict(ParamStore<T>&, const Hyper&, const CircuitGraph&, const LevelSchedule&, std::size_t);

PREROUTE_MODEL_INSTANTIATE(float)
PREROUTE_MODEL_INSTANTIATE(double)

#undef PREROUTE_MODEL_INSTANTIATE

}  // namespace preroute::nn
