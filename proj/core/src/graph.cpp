#include "preroute/graph.hpp"

#include <algorithm>
#include <map>
#include <sstream>
#include <utility>

#include <json.hpp>

#include "preroute/error.hpp"
#include "preroute/io.hpp"

namespace preroute {

using json = nlohmann::ordered_json;

std::string_view to_string(EdgeKind kind) {
  switch (kind) {
    case EdgeKind::Cell: return "cell";
    case EdgeKind::Net: return "net";
    case EdgeKind::NetInv: return "net_inv";
  }
  return "?";
}

EdgeKind edge_kind_from_string(std::string_view s) {
  if (s == "cell") return EdgeKind::Cell;
  if (s == "net") return EdgeKind::Net;
  if (s == "net_inv") return EdgeKind::NetInv;
  throw FormatError("unknown edge kind '" + std::string(s) + "'");
}

std::string_view to_string(Unateness u) {
  switch (u) {
    case Unateness::Positive: return "positive";
    case Unateness::Negative: return "negative";
    case Unateness::Non: return "non";
  }
  return "?";
}

Unateness unateness_from_string(std::string_view s) {
  if (s == "positive") return Unateness::Positive;
  if (s == "negative") return Unateness::Negative;
  if (s == "non") return Unateness::Non;
  throw FormatError("unknown unateness '" + std::string(s) + "'");
}

std::vector<std::string> default_feature_schema() {
  return {"is_primary_input", "is_primary_output", "is_fanin", "is_fanout",
          "x",                "y",                 "capacitance", "normalized_depth"};
}

CircuitGraph::CircuitGraph(std::string name, std::vector<std::string> feature_schema, std::vector<NodeRecord> nodes,
                           std::vector<EdgeRecord> edges, std::vector<Lut> luts)
    : name_(std::move(name)),
      feature_schema_(std::move(feature_schema)),
      nodes_(std::move(nodes)),
      edges_(std::move(edges)),
      luts_(std::move(luts)) {
  build_index();
}

void CircuitGraph::build_index() {
  lut_index_.clear();
  for (std::size_t i = 0; i < luts_.size(); ++i) lut_index_.emplace(luts_[i].id, static_cast<std::int32_t>(i));

  const std::size_t n = nodes_.size();
  in_offsets_.assign(n + 1, 0);
  out_offsets_.assign(n + 1, 0);
  auto in_range = [n](NodeId v) { return v >= 0 && static_cast<std::size_t>(v) < n; };
  for (const auto& e : edges_) {
    if (in_range(e.dst)) ++in_offsets_[static_cast<std::size_t>(e.dst) + 1];
    if (in_range(e.src)) ++out_offsets_[static_cast<std::size_t>(e.src) + 1];
  }
  for (std::size_t i = 0; i < n; ++i) {
    in_offsets_[i + 1] += in_offsets_[i];
    out_offsets_[i + 1] += out_offsets_[i];
  }
  in_list_.assign(static_cast<std::size_t>(in_offsets_[n]), 0);
  out_list_.assign(static_cast<std::size_t>(out_offsets_[n]), 0);
  std::vector<std::int64_t> in_fill(in_offsets_.begin(), in_offsets_.end() - 1);
  std::vector<std::int64_t> out_fill(out_offsets_.begin(), out_offsets_.end() - 1);
  for (std::size_t i = 0; i < edges_.size(); ++i) {
    const auto& e = edges_[i];
    if (in_range(e.dst)) in_list_[static_cast<std::size_t>(in_fill[static_cast<std::size_t>(e.dst)]++)] = static_cast<EdgeId>(i);
    if (in_range(e.src)) out_list_[static_cast<std::size_t>(out_fill[static_cast<std::size_t>(e.src)]++)] = static_cast<EdgeId>(i);
  }
}

std::size_t CircuitGraph::count_edges(EdgeKind kind) const {
  return static_cast<std::size_t>(std::count_if(edges_.begin(), edges_.end(), [kind](const EdgeRecord& e) { return e.kind == kind; }));
}

std::int32_t CircuitGraph::find_lut(std::string_view id) const {
  auto it = lut_index_.find(std::string(id));
  return it == lut_index_.end() ? -1 : it->second;
}

std::span<const EdgeId> CircuitGraph::in_edges(NodeId id) const {
  const auto i = static_cast<std::size_t>(id);
  return {in_list_.data() + in_offsets_[i], static_cast<std::size_t>(in_offsets_[i + 1] - in_offsets_[i])};
}

std::span<const EdgeId> CircuitGraph::out_edges(NodeId id) const {
  const auto i = static_cast<std::size_t>(id);
  return {out_list_.data() + out_offsets_[i], static_cast<std::size_t>(out_offsets_[i + 1] - out_offsets_[i])};
}

bool operator==(const CircuitGraph& a, const CircuitGraph& b) {
  return a.name_ == b.name_ && a.feature_schema_ == b.feature_schema_ && a.nodes_ == b.nodes_ && a.edges_ == b.edges_ &&
         a.luts_ == b.luts_;
}

// ---------------------------------------------------------------------------
// Validation

namespace {

std::string edge_str(const EdgeRecord& e) {
  std::ostringstream ss;
  ss << "(" << e.src << "," << e.dst << ")";
  return ss.str();
}

void check_luts(const CircuitGraph& g, std::vector<Violation>& out) {
  for (const auto& lut : g.luts()) {
    auto strictly_ascending = [](const std::vector<double>& v) {
      for (std::size_t i = 1; i < v.size(); ++i)
        if (!(v[i] > v[i - 1])) return false;
      return true;
    };
    if (lut.row_axis.empty() || lut.col_axis.empty())
      out.push_back({"lut", "lut '" + lut.id + "' has an empty axis"});
    if (!strictly_ascending(lut.row_axis) || !strictly_ascending(lut.col_axis))
      out.push_back({"lut", "lut '" + lut.id + "' axes are not strictly ascending"});
    const std::size_t cells = lut.rows() * lut.cols();
    if (lut.delay.size() != cells || lut.slew.size() != cells) {
      out.push_back({"lut", "lut '" + lut.id + "' table dimensions do not match its axes"});
      continue;
    }
    if (std::any_of(lut.slew.begin(), lut.slew.end(), [](double s) { return !(s > 0.0); }))
      out.push_back({"lut", "lut '" + lut.id + "' has a non-positive slew value"});
  }
}

// Kahn's algorithm over cell+net edges; on failure a concrete cycle is
// extracted from the residual graph so the report can name its edges.
void check_acyclic(const CircuitGraph& g, std::vector<Violation>& out) {
  const std::size_t n = g.num_nodes();
  std::vector<std::int32_t> indeg(n, 0);
  for (const auto& e : g.edges())
    if (CircuitGraph::is_timing_edge(e.kind)) ++indeg[static_cast<std::size_t>(e.dst)];
  std::vector<NodeId> stack;
  for (std::size_t v = 0; v < n; ++v)
    if (indeg[v] == 0) stack.push_back(static_cast<NodeId>(v));
  std::size_t seen = 0;
  while (!stack.empty()) {
    NodeId v = stack.back();
    stack.pop_back();
    ++seen;
    for (EdgeId eid : g.out_edges(v)) {
      const auto& e = g.edge(eid);
      if (!CircuitGraph::is_timing_edge(e.kind)) continue;
      if (--indeg[static_cast<std::size_t>(e.dst)] == 0) stack.push_back(e.dst);
    }
  }
  if (seen == n) return;

  // Every residual node has a residual predecessor; walk backwards until a
  // node repeats.
  NodeId start = 0;
  for (std::size_t v = 0; v < n; ++v)
    if (indeg[v] > 0) {
      start = static_cast<NodeId>(v);
      break;
    }
  std::vector<std::int64_t> pos(n, -1);
  std::vector<EdgeId> walk;
  NodeId cur = start;
  while (pos[static_cast<std::size_t>(cur)] < 0) {
    pos[static_cast<std::size_t>(cur)] = static_cast<std::int64_t>(walk.size());
    EdgeId chosen = -1;
    for (EdgeId eid : g.in_edges(cur)) {
      const auto& e = g.edge(eid);
      if (CircuitGraph::is_timing_edge(e.kind) && indeg[static_cast<std::size_t>(e.src)] > 0) {
        chosen = eid;
        break;
      }
    }
    walk.push_back(chosen);
    cur = g.edge(chosen).src;
  }
  std::vector<EdgeId> cycle(walk.begin() + pos[static_cast<std::size_t>(cur)], walk.end());
  std::reverse(cycle.begin(), cycle.end());
  std::ostringstream ss;
  ss << "cycle over cell/net edges:";
  for (EdgeId eid : cycle) ss << " " << edge_str(g.edge(eid));
  out.push_back({"cycle", ss.str()});
}

void check_mirrors(const CircuitGraph& g, std::vector<Violation>& out) {
  std::map<std::pair<NodeId, NodeId>, int> net_count, inv_count;
  for (const auto& e : g.edges()) {
    if (e.kind == EdgeKind::Net) ++net_count[{e.src, e.dst}];
    if (e.kind == EdgeKind::NetInv) ++inv_count[{e.src, e.dst}];
  }
  for (const auto& [key, count] : net_count) {
    const auto [u, v] = key;
    auto it = inv_count.find({v, u});
    const int mirrors = it == inv_count.end() ? 0 : it->second;
    std::ostringstream ss;
    if (mirrors == 0) {
      ss << "missing net_inv mirror for edge (" << u << "," << v << ")";
      out.push_back({"net_inv_mirror", ss.str()});
    } else if (count != 1 || mirrors != 1) {
      ss << "net edge (" << u << "," << v << ") appears " << count << " times with " << mirrors << " net_inv mirrors";
      out.push_back({"net_inv_mirror", ss.str()});
    }
  }
  for (const auto& [key, count] : inv_count) {
    const auto [v, u] = key;
    if (!net_count.contains({u, v})) {
      std::ostringstream ss;
      ss << "net_inv edge (" << v << "," << u << ") has no net edge (" << u << "," << v << ")";
      out.push_back({"net_inv_mirror", ss.str()});
    }
  }
}

}  // namespace

std::vector<Violation> validate(const CircuitGraph& g) {
  std::vector<Violation> out;
  const std::size_t n = g.num_nodes();
  const std::size_t f = g.feature_dim();

  for (std::size_t i = 0; i < n; ++i) {
    const auto& nd = g.nodes()[i];
    const std::string who = "node " + std::to_string(i);
    if (nd.id != static_cast<NodeId>(i)) out.push_back({"node_id", who + " has id " + std::to_string(nd.id) + "; ids must be dense 0..n-1"});
    if (nd.features.size() != f)
      out.push_back({"feature_dim", who + " has " + std::to_string(nd.features.size()) + " features, expected " + std::to_string(f)});
    if (nd.is_fanin && nd.is_fanout) out.push_back({"pin_role", who + " is both fan-in and fan-out"});
  }

  bool endpoints_ok = true;
  for (std::size_t i = 0; i < g.num_edges(); ++i) {
    const auto& e = g.edges()[i];
    const std::string who = "edge " + std::to_string(i) + " " + edge_str(e);
    if (e.src < 0 || e.dst < 0 || static_cast<std::size_t>(e.src) >= n || static_cast<std::size_t>(e.dst) >= n) {
      out.push_back({"edge_endpoint", who + " references a node outside 0.." + std::to_string(n == 0 ? 0 : n - 1)});
      endpoints_ok = false;
      continue;
    }
    if (e.src == e.dst) out.push_back({"cycle", who + " is a self loop"});
    const auto& s = g.node(e.src);
    const auto& d = g.node(e.dst);
    switch (e.kind) {
      case EdgeKind::Cell:
        if (e.lut < 0 || static_cast<std::size_t>(e.lut) >= g.luts().size())
          out.push_back({"lut_ref", who + " is a cell edge without a valid lut_id"});
        if (!s.is_fanin || !d.is_fanout) out.push_back({"pin_role", who + " cell edge must go fan-in -> fan-out"});
        if (!e.features.empty()) out.push_back({"edge_features", who + " cell edge carries geometric features"});
        break;
      case EdgeKind::Net:
      case EdgeKind::NetInv:
        if (e.lut >= 0) out.push_back({"lut_ref", who + " net edge carries a lut_id"});
        if (e.features.size() != feat::kEdgeCount)
          out.push_back({"edge_features", who + " net edge needs " + std::to_string(feat::kEdgeCount) + " features"});
        break;
    }
    if (CircuitGraph::is_timing_edge(e.kind)) {
      if (d.is_primary_input) out.push_back({"primary_input", who + " enters primary input " + std::to_string(e.dst)});
      if (s.is_primary_output) out.push_back({"primary_output", who + " leaves primary output " + std::to_string(e.src)});
    }
  }

  check_luts(g, out);
  if (endpoints_ok) {
    for (std::size_t i = 0; i < n; ++i) {
      bool has_cell = false;
      for (EdgeId eid : g.in_edges(static_cast<NodeId>(i))) has_cell |= g.edge(eid).kind == EdgeKind::Cell;
      for (EdgeId eid : g.out_edges(static_cast<NodeId>(i))) has_cell |= g.edge(eid).kind == EdgeKind::Cell;
      const auto& nd = g.nodes()[i];
      if (has_cell && nd.is_fanin == nd.is_fanout)
        out.push_back({"pin_role", "node " + std::to_string(i) + " is cell-connected but not exactly one of fan-in/fan-out"});
    }
    check_mirrors(g, out);
    check_acyclic(g, out);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Document I/O

namespace {

constexpr const char* kCircuitFormat = "preroute-circuit";
constexpr int kCircuitVersion = 1;

const json& require(const json& obj, const char* key, const std::string& who) {
  if (!obj.is_object() || !obj.contains(key)) throw FormatError(who + ": missing field '" + key + "'");
  return obj.at(key);
}

std::vector<double> real_vector(const json& arr, const std::string& who) {
  if (!arr.is_array()) throw FormatError(who + ": expected an array of reals");
  std::vector<double> out;
  out.reserve(arr.size());
  for (const auto& x : arr) {
    if (!x.is_number()) throw FormatError(who + ": non-numeric entry");
    out.push_back(x.get<double>());
  }
  return out;
}

std::vector<double> real_matrix(const json& arr, std::size_t rows, std::size_t cols, const std::string& who) {
  if (!arr.is_array() || arr.size() != rows) throw FormatError(who + ": expected " + std::to_string(rows) + " rows");
  std::vector<double> out;
  out.reserve(rows * cols);
  for (const auto& row : arr) {
    auto r = real_vector(row, who);
    if (r.size() != cols) throw FormatError(who + ": expected " + std::to_string(cols) + " columns");
    out.insert(out.end(), r.begin(), r.end());
  }
  return out;
}

json matrix_json(const std::vector<double>& data, std::size_t rows, std::size_t cols) {
  json m = json::array();
  for (std::size_t r = 0; r < rows; ++r) m.push_back(std::vector<double>(data.begin() + static_cast<std::ptrdiff_t>(r * cols),
                                                                         data.begin() + static_cast<std::ptrdiff_t>((r + 1) * cols)));
  return m;
}

}  // namespace

CircuitGraph parse_circuit(std::string_view text) {
  json doc;
  try {
    doc = json::parse(text.begin(), text.end());
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("malformed circuit document: ") + e.what());
  }
  if (!doc.is_object()) throw FormatError("malformed circuit document: top level is not an object");
  if (doc.contains("format") && doc["format"] != kCircuitFormat)
    throw FormatError("not a circuit document (format '" + doc["format"].dump() + "')");
  if (doc.contains("version") && doc["version"] != kCircuitVersion)
    throw FormatError("unsupported circuit document version " + doc["version"].dump());

  try {
    const std::string name = require(doc, "name", "circuit").get<std::string>();
    std::vector<std::string> schema;
    for (const auto& s : require(doc, "feature_schema", "circuit")) schema.push_back(s.get<std::string>());

    std::vector<Lut> luts;
    const auto& luts_json = require(doc, "luts", "circuit");
    if (!luts_json.is_object()) throw FormatError("circuit: 'luts' must be a map id -> table");
    for (const auto& [id, t] : luts_json.items()) {
      const std::string who = "lut '" + id + "'";
      Lut lut;
      lut.id = id;
      lut.row_axis = real_vector(require(t, "rows", who), who + " rows");
      lut.col_axis = real_vector(require(t, "cols", who), who + " cols");
      lut.delay = real_matrix(require(t, "delay", who), lut.rows(), lut.cols(), who + " delay");
      lut.slew = real_matrix(require(t, "slew", who), lut.rows(), lut.cols(), who + " slew");
      luts.push_back(std::move(lut));
    }
    std::unordered_map<std::string, std::int32_t> lut_ids;
    for (std::size_t i = 0; i < luts.size(); ++i) lut_ids.emplace(luts[i].id, static_cast<std::int32_t>(i));

    std::vector<NodeRecord> nodes;
    const auto& nodes_json = require(doc, "nodes", "circuit");
    if (!nodes_json.is_array()) throw FormatError("circuit: 'nodes' must be an array");
    nodes.reserve(nodes_json.size());
    for (std::size_t i = 0; i < nodes_json.size(); ++i) {
      const auto& nj = nodes_json[i];
      const std::string who = "node " + std::to_string(i);
      NodeRecord nd;
      nd.id = require(nj, "id", who).get<NodeId>();
      nd.is_primary_input = require(nj, "is_primary_input", who).get<bool>();
      nd.is_primary_output = require(nj, "is_primary_output", who).get<bool>();
      nd.is_fanin = require(nj, "is_fanin", who).get<bool>();
      nd.is_fanout = require(nj, "is_fanout", who).get<bool>();
      nd.features = real_vector(require(nj, "features", who), who + " features");
      nodes.push_back(std::move(nd));
    }

    std::vector<EdgeRecord> edges;
    const auto& edges_json = require(doc, "edges", "circuit");
    if (!edges_json.is_array()) throw FormatError("circuit: 'edges' must be an array");
    edges.reserve(edges_json.size());
    for (std::size_t i = 0; i < edges_json.size(); ++i) {
      const auto& ej = edges_json[i];
      const std::string who = "edge " + std::to_string(i);
      EdgeRecord e;
      e.src = require(ej, "src", who).get<NodeId>();
      e.dst = require(ej, "dst", who).get<NodeId>();
      e.kind = edge_kind_from_string(require(ej, "kind", who).get<std::string>());
      if (ej.contains("features")) e.features = real_vector(ej["features"], who + " features");
      if (ej.contains("lut_id")) {
        const auto id = ej["lut_id"].get<std::string>();
        auto it = lut_ids.find(id);
        if (it == lut_ids.end()) throw FormatError(who + " (" + std::to_string(e.src) + "," + std::to_string(e.dst) + "): dangling lut_id '" + id + "'");
        e.lut = it->second;
      }
      if (ej.contains("unate")) e.unate = unateness_from_string(ej["unate"].get<std::string>());
      edges.push_back(std::move(e));
    }

    CircuitGraph g(name, std::move(schema), std::move(nodes), std::move(edges), std::move(luts));
    auto violations = validate(g);
    if (!violations.empty()) throw FormatError(violations.front().message);
    return g;
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed circuit document: ") + e.what());
  }
}

std::string serialize_circuit(const CircuitGraph& g) {
  json doc;
  doc["format"] = kCircuitFormat;
  doc["version"] = kCircuitVersion;
  doc["name"] = g.name();
  doc["feature_schema"] = g.feature_schema();
  json nodes = json::array();
  for (const auto& nd : g.nodes()) {
    json nj;
    nj["id"] = nd.id;
    nj["is_primary_input"] = nd.is_primary_input;
    nj["is_primary_output"] = nd.is_primary_output;
    nj["is_fanin"] = nd.is_fanin;
    nj["is_fanout"] = nd.is_fanout;
    nj["features"] = nd.features;
    nodes.push_back(std::move(nj));
  }
  doc["nodes"] = std::move(nodes);
  json edges = json::array();
  for (const auto& e : g.edges()) {
    json ej;
    ej["src"] = e.src;
    ej["dst"] = e.dst;
    ej["kind"] = to_string(e.kind);
    if (!e.features.empty()) ej["features"] = e.features;
    if (e.lut >= 0) ej["lut_id"] = g.luts()[static_cast<std::size_t>(e.lut)].id;
    if (e.kind == EdgeKind::Cell && e.unate != Unateness::Positive) ej["unate"] = to_string(e.unate);
    edges.push_back(std::move(ej));
  }
  doc["edges"] = std::move(edges);
  json luts = json::object();
  for (const auto& lut : g.luts()) {
    json t;
    t["rows"] = lut.row_axis;
    t["cols"] = lut.col_axis;
    t["delay"] = matrix_json(lut.delay, lut.rows(), lut.cols());
    t["slew"] = matrix_json(lut.slew, lut.rows(), lut.cols());
    luts[lut.id] = std::move(t);
  }
  doc["luts"] = std::move(luts);
  return doc.dump() + "\n";
}

CircuitGraph load_circuit(const std::string& path) {
  try {
    return parse_circuit(read_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path + ": " + e.what());
  }
}

void save_circuit(const CircuitGraph& graph, const std::string& path) { write_file_atomic(path, serialize_circuit(graph)); }

}  // namespace preroute
