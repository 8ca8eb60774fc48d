#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "preroute/graph.hpp"
#include "preroute/levels.hpp"
#include "preroute/nn/layers.hpp"
#include "preroute/partition.hpp"

namespace preroute::nn {

struct Hyper {
  int node_dim = 8;
  int edge_dim = 3;
  int hidden = 64;
  int gcn_layers = 4;
  int mlp_depth = 2;
  double leaky_slope = 0.2;
  int ae_hidden = 32;
  int ae_enc_layers = 4;
  int ae_dec_layers = 4;
  int latent_dim = 4;
  int heads = 4;
  int d_k = 16;
  int d_v = 16;
  int n_freq = kDefaultLevelFrequencies;
  bool use_encoder = true;

  int ae_edge_dim() const { return edge_dim + 3; }
  int level_dim() const { return 2 * n_freq + 1; }
  int input_dim() const { return node_dim + (use_encoder ? 2 * latent_dim : 0) + level_dim(); }
  friend bool operator==(const Hyper&, const Hyper&) = default;
};

enum class EncoderMode { Frozen, Finetune, None };
const char* to_string(EncoderMode m);
EncoderMode encoder_mode_from_string(std::string_view s);

/// Declares (and initialises from `seed`) the parameters of the selected
/// components under "encoder.", "decoder." and "gnn.".
template <class T>
void declare_encoder(ParamStore<T>& ps, const Hyper& h, std::uint64_t seed);
template <class T>
void declare_decoder(ParamStore<T>& ps, const Hyper& h, std::uint64_t seed);
template <class T>
void declare_gnn(ParamStore<T>& ps, const Hyper& h, std::uint64_t seed);

/// Precision-specific tensors and index lists of one graph, or of the part
/// of a sub-graph a forward pass actually touches. Arrival times are
/// computed for levels [first_level, last_level]; nodes below first_level
/// are `given`, i.e. their GCN features and AT come from a carry.
template <class T>
struct GraphView {
  struct LevelBlock {
    std::vector<Index> nodes;      // view ids at this level
    std::vector<Index> src;        // per incoming timing edge
    std::vector<Index> dst_local;  // position of the destination in `nodes`
    std::vector<Index> block;      // lut index, or luts.size() for net edges
  };

  Index n = 0;
  std::vector<NodeId> node_ref;  // parent node id
  std::vector<std::int32_t> level;
  std::int32_t max_level = 0;
  Mat<T> x;
  Mat<T> level_enc;
  Edges<T> net, net_inv, ae;
  Edges<T> cell;  // no features
  std::vector<Index> cell_lut;
  std::vector<EdgeId> cell_ref, net_ref;  // parent edge ids
  std::vector<Lut> luts;

  std::int32_t first_level = 0, last_level = -1;
  std::vector<Index> given;
  std::vector<Index> out_nodes;
  std::vector<Index> out_cell, out_net;  // edges whose destination is an output node
  std::vector<LevelBlock> blocks;        // first_level .. last_level
};

/// Whole-graph view.
template <class T>
GraphView<T> make_view(const CircuitGraph& graph, const LevelSchedule& schedule, const Hyper& h);
/// View of one partition piece: the core plus whatever the GCN stack and
/// the core's timing fan-in reach.
template <class T>
GraphView<T> make_view(const SubGraph& sub, const Hyper& h);
/// Auto-encoder view of one piece: the core plus every node within
/// ae_enc_layers + ae_dec_layers hops over all edge kinds. out_nodes are
/// the core nodes; no timing blocks.
template <class T>
GraphView<T> make_ae_view(const SubGraph& sub, const Hyper& h);

template <class T>
struct EncoderOut {
  Var<T> mu, logvar, z, graph;  // graph embedding [1, latent]
};
/// Stochastic z = mu + exp(logvar / 2) * eps when `noise` is given, z = mu otherwise.
template <class T>
EncoderOut<T> encode(Ctx<T>& c, const Hyper& h, const GraphView<T>& v, Rng* noise);
template <class T>
Var<T> decode(Ctx<T>& c, const Hyper& h, const GraphView<T>& v, Var<T> z);

/// Per-parent-node GCN features and hidden arrival times of nodes already
/// evaluated.
template <class T>
struct Carry {
  Mat<T> f, at;
};

template <class T>
struct GnnOut {
  Var<T> f;       // [n, hidden], all view nodes
  Var<T> at;      // [out_nodes, hidden]
  Var<T> as;      // [out_nodes, 8] = AT || slew
  Var<T> cd;      // [out_cell, 4]
  Var<T> nd;      // [out_net, 4]
  Var<T> f_out;   // [out_nodes, hidden]
};

/// Hidden arrival times of the levels a view computes. `where[i]` locates
/// view node i as (part, row); given nodes live in part 0 when present.
template <class T>
struct AtResult {
  std::vector<Var<T>> parts;
  std::vector<std::pair<Index, Index>> where;
};
/// Level-ordered propagation over node features f [n, hidden]: level-0
/// nodes get an affine of f; every other node aggregates attention-refined
/// messages from its timing predecessors, all of which are final by then.
template <class T>
AtResult<T> at_propagation(Ctx<T>& c, const Hyper& h, const GraphView<T>& v, Var<T> f, const Carry<T>* carry);

/// Full forward pass. `latent` holds per-view-node latents and `graph_emb`
/// the [1, latent] embedding; both are ignored when !h.use_encoder.
template <class T>
GnnOut<T> forward(Ctx<T>& c, const Hyper& h, const GraphView<T>& v, Var<T> latent, Var<T> graph_emb, const Carry<T>* carry);

/// Plain predictions for one parent graph.
struct Predictions {
  Mat<double> as;          // [nodes, 8]
  Mat<double> edge_delay;  // [edges, 4], zero rows for net_inv edges
  Mat<double> hidden_at;   // [nodes, hidden]
};

/// Encoder mean for every node plus graph embedding, evaluated one layer
/// at a time to bound memory.
template <class T>
std::pair<Mat<T>, Mat<T>> encoder_latents(ParamStore<T>& ps, const Hyper& h, const CircuitGraph& graph, const LevelSchedule& schedule);

/// Inference piece by piece in level order, carrying GCN features and
/// arrival times of finished pieces forward. Pieces must come from
/// partition() of this graph.
template <class T>
Predictions predict_partitioned(ParamStore<T>& ps, const Hyper& h, const CircuitGraph& graph, const LevelSchedule& schedule,
                                const std::vector<SubGraph>& parts);
/// Partitions with `max_size` (k = gcn_layers, oversized levels split) and
/// runs predict_partitioned().
template <class T>
Predictions predict(ParamStore<T>& ps, const Hyper& h, const CircuitGraph& graph, const LevelSchedule& schedule,
                    std::size_t max_size = 4096);

/// Rows of `parent` selected by a view's node_ref.
template <class T>
Mat<T> rows_for(const Mat<T>& parent, const std::vector<NodeId>& refs);

}  // namespace preroute::nn
