#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace preroute {

using NodeId = std::int32_t;
using EdgeId = std::int32_t;

enum class EdgeKind : std::uint8_t { Cell, Net, NetInv };

std::string_view to_string(EdgeKind kind);
EdgeKind edge_kind_from_string(std::string_view s);

/// Timing sense of a cell arc. Only positive-unate arcs are propagated by the
/// timer; the others round-trip through the circuit format.
enum class Unateness : std::uint8_t { Positive, Negative, Non };

std::string_view to_string(Unateness u);
Unateness unateness_from_string(std::string_view s);

/// Column layout of the node feature vector in generated circuits.
namespace feat {
inline constexpr std::size_t kIsPrimaryInput = 0;
inline constexpr std::size_t kIsPrimaryOutput = 1;
inline constexpr std::size_t kIsFanin = 2;
inline constexpr std::size_t kIsFanout = 3;
inline constexpr std::size_t kX = 4;
inline constexpr std::size_t kY = 5;
inline constexpr std::size_t kCapacitance = 6;
inline constexpr std::size_t kNormalizedDepth = 7;
inline constexpr std::size_t kCount = 8;

/// Net / net_inv edges carry [dx, dy, manhattan length].
inline constexpr std::size_t kEdgeDx = 0;
inline constexpr std::size_t kEdgeDy = 1;
inline constexpr std::size_t kEdgeLength = 2;
inline constexpr std::size_t kEdgeCount = 3;
}  // namespace feat

std::vector<std::string> default_feature_schema();

struct NodeRecord {
  NodeId id = 0;
  bool is_primary_input = false;
  bool is_primary_output = false;
  bool is_fanin = false;
  bool is_fanout = false;
  std::vector<double> features;

  friend bool operator==(const NodeRecord&, const NodeRecord&) = default;
};

struct EdgeRecord {
  NodeId src = 0;
  NodeId dst = 0;
  EdgeKind kind = EdgeKind::Net;
  std::vector<double> features;
  /// Index into CircuitGraph::luts(); -1 unless kind == Cell.
  std::int32_t lut = -1;
  Unateness unate = Unateness::Positive;

  friend bool operator==(const EdgeRecord&, const EdgeRecord&) = default;
};

/// Two-dimensional NLDM table: rows index input slew, columns index load.
struct Lut {
  std::string id;
  std::vector<double> row_axis;
  std::vector<double> col_axis;
  std::vector<double> delay;  // row-major rows x cols
  std::vector<double> slew;   // row-major rows x cols

  std::size_t rows() const { return row_axis.size(); }
  std::size_t cols() const { return col_axis.size(); }
  double delay_at(std::size_t r, std::size_t c) const { return delay[r * cols() + c]; }
  double slew_at(std::size_t r, std::size_t c) const { return slew[r * cols() + c]; }

  friend bool operator==(const Lut&, const Lut&) = default;
};

/// Heterogeneous pin-level circuit DAG. Immutable once constructed; the
/// adjacency indices are built by the constructor. Construction does not
/// validate, see validate() and parse_circuit().
class CircuitGraph {
 public:
  CircuitGraph() = default;
  CircuitGraph(std::string name, std::vector<std::string> feature_schema, std::vector<NodeRecord> nodes,
               std::vector<EdgeRecord> edges, std::vector<Lut> luts);

  const std::string& name() const { return name_; }
  const std::vector<std::string>& feature_schema() const { return feature_schema_; }
  std::size_t feature_dim() const { return feature_schema_.size(); }

  std::size_t num_nodes() const { return nodes_.size(); }
  std::size_t num_edges() const { return edges_.size(); }
  std::size_t count_edges(EdgeKind kind) const;

  const NodeRecord& node(NodeId id) const { return nodes_[static_cast<std::size_t>(id)]; }
  const EdgeRecord& edge(EdgeId id) const { return edges_[static_cast<std::size_t>(id)]; }
  const std::vector<NodeRecord>& nodes() const { return nodes_; }
  const std::vector<EdgeRecord>& edges() const { return edges_; }
  const std::vector<Lut>& luts() const { return luts_; }
  /// Index of the lut with this id, or -1.
  std::int32_t find_lut(std::string_view id) const;

  /// Incoming / outgoing edge ids of a node, all kinds, in edge-id order.
  std::span<const EdgeId> in_edges(NodeId id) const;
  std::span<const EdgeId> out_edges(NodeId id) const;

  /// True for edges that carry timing (cell and net); net_inv edges do not.
  static bool is_timing_edge(EdgeKind k) { return k != EdgeKind::NetInv; }

  friend bool operator==(const CircuitGraph& a, const CircuitGraph& b);

 private:
  void build_index();

  std::string name_;
  std::vector<std::string> feature_schema_;
  std::vector<NodeRecord> nodes_;
  std::vector<EdgeRecord> edges_;
  std::vector<Lut> luts_;
  std::unordered_map<std::string, std::int32_t> lut_index_;

  // CSR adjacency.
  std::vector<std::int64_t> in_offsets_, out_offsets_;
  std::vector<EdgeId> in_list_, out_list_;
};

/// One invariant violation found by validate().
struct Violation {
  std::string invariant;  // short tag: "cycle", "net_inv_mirror", "lut", ...
  std::string message;    // names the offending element
};

/// Checks every structural invariant. Empty result iff the graph is well formed.
std::vector<Violation> validate(const CircuitGraph& graph);

/// Circuit document I/O (JSON, see docs/format.md). parse_circuit() rejects any
/// document whose graph fails validate(); it never repairs.
CircuitGraph parse_circuit(std::string_view text);
std::string serialize_circuit(const CircuitGraph& graph);

CircuitGraph load_circuit(const std::string& path);
void save_circuit(const CircuitGraph& graph, const std::string& path);

}  // namespace preroute
