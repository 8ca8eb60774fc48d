#include "preroute/partition.hpp"

#include <algorithm>
#include <filesystem>

#include <json.hpp>

#include "preroute/io.hpp"

namespace preroute {

std::size_t SubGraph::num_core() const {
  return static_cast<std::size_t>(std::count(core_mask.begin(), core_mask.end(), std::uint8_t{1}));
}

namespace {

struct Piece {
  LevelRange core, before, after;
};

LevelRange clipped(std::int64_t first, std::int64_t last_exclusive, std::int64_t n) {
  first = std::max<std::int64_t>(0, first);
  last_exclusive = std::min(last_exclusive, n);
  return {static_cast<std::int32_t>(first), static_cast<std::int32_t>(last_exclusive - 1)};
}

std::vector<Piece> plan(const LevelSchedule& schedule, const PartitionOptions& opts) {
  const auto n = static_cast<std::int64_t>(schedule.num_levels());
  const std::int64_t k = opts.pad_levels;
  std::vector<Piece> pieces;
  auto emit = [&](std::int64_t j, std::int64_t i) {
    pieces.push_back({{static_cast<std::int32_t>(j), static_cast<std::int32_t>(i - 1)}, clipped(j - k, j, n), clipped(i, i + k, n)});
  };
  std::int64_t i = 0, j = 0;
  std::size_t size = 0;
  while (i < n) {
    const auto level_size = schedule.levels[static_cast<std::size_t>(i)].size();
    if (size + level_size < opts.max_size) {
      size += level_size;
      ++i;
    } else if (size == 0) {
      if (!opts.split_oversized)
        throw InvalidArgument("partition: level " + std::to_string(i) + " holds " + std::to_string(level_size) +
                              " nodes, not below max size " + std::to_string(opts.max_size) +
                              " (use split-oversized to emit it alone)");
      emit(i, i + 1);
      ++i;
      j = i;
    } else {
      emit(j, i);
      j = i;
      size = 0;
    }
  }
  if (size > 0) emit(j, n);
  return pieces;
}

}  // namespace

std::vector<SubGraph> partition(const CircuitGraph& graph, const LevelSchedule& schedule, const PartitionOptions& opts) {
  if (opts.max_size == 0) throw InvalidArgument("partition: max size must be positive");
  if (opts.pad_levels < 0) throw InvalidArgument("partition: padding levels must be >= 0");
  if (schedule.node_level.size() != graph.num_nodes()) throw InvalidArgument("partition: schedule does not match graph");

  const auto pieces = plan(schedule, opts);
  const std::size_t n = graph.num_nodes();
  std::vector<NodeId> local_of(n, -1);
  std::vector<std::int32_t> visited(n, -1);
  std::vector<SubGraph> out;
  out.reserve(pieces.size());

  for (std::size_t p = 0; p < pieces.size(); ++p) {
    const auto& piece = pieces[p];
    const auto stamp = static_cast<std::int32_t>(p);
    // Lowest level holding a k-hop timing predecessor of a core node.
    std::int32_t lo = piece.before.empty() ? piece.core.first : piece.before.first;
    std::vector<NodeId> frontier;
    for (std::int32_t l = piece.core.first; l <= piece.core.last; ++l)
      for (NodeId v : schedule.levels[static_cast<std::size_t>(l)]) {
        frontier.push_back(v);
        visited[static_cast<std::size_t>(v)] = stamp;
      }
    for (int hop = 0; hop < opts.pad_levels && !frontier.empty(); ++hop) {
      std::vector<NodeId> next;
      for (NodeId v : frontier)
        for (EdgeId e : graph.in_edges(v)) {
          const auto& er = graph.edge(e);
          const auto u = static_cast<std::size_t>(er.src);
          if (!CircuitGraph::is_timing_edge(er.kind) || visited[u] == stamp) continue;
          visited[u] = stamp;
          next.push_back(er.src);
          lo = std::min(lo, schedule.node_level[u]);
        }
      frontier = std::move(next);
    }
    const LevelRange before{lo, piece.core.first - 1};
    const std::int32_t hi = piece.after.empty() ? piece.core.last : piece.after.last;
    std::vector<NodeId> selected;
    for (std::int32_t l = lo; l <= hi; ++l)
      for (NodeId v : schedule.levels[static_cast<std::size_t>(l)]) selected.push_back(v);
    std::sort(selected.begin(), selected.end());

    SubGraph sg;
    sg.parent = graph.name();
    sg.core_levels = piece.core;
    sg.pad_before = before;
    sg.pad_after = piece.after;
    sg.local_to_parent = selected;
    std::vector<NodeRecord> nodes;
    nodes.reserve(selected.size());
    for (std::size_t li = 0; li < selected.size(); ++li) {
      const NodeId v = selected[li];
      local_of[static_cast<std::size_t>(v)] = static_cast<NodeId>(li);
      NodeRecord rec = graph.node(v);
      rec.id = static_cast<NodeId>(li);
      nodes.push_back(std::move(rec));
      const auto level = schedule.node_level[static_cast<std::size_t>(v)];
      sg.parent_level.push_back(level);
      sg.core_mask.push_back(piece.core.contains(level) ? 1 : 0);
    }
    std::vector<EdgeId> edge_ids;
    for (NodeId v : selected)
      for (EdgeId e : graph.out_edges(v))
        if (local_of[static_cast<std::size_t>(graph.edge(e).dst)] >= 0) edge_ids.push_back(e);
    std::sort(edge_ids.begin(), edge_ids.end());
    std::vector<EdgeRecord> edges;
    edges.reserve(edge_ids.size());
    sg.edge_to_parent = edge_ids;
    sg.parent_max_level = schedule.max_level();
    for (EdgeId e : edge_ids) {
      EdgeRecord rec = graph.edge(e);
      rec.src = local_of[static_cast<std::size_t>(rec.src)];
      rec.dst = local_of[static_cast<std::size_t>(rec.dst)];
      edges.push_back(std::move(rec));
    }
    for (NodeId v : selected) local_of[static_cast<std::size_t>(v)] = -1;

    sg.graph = CircuitGraph(graph.name() + "#" + std::to_string(p), graph.feature_schema(), std::move(nodes), std::move(edges),
                            graph.luts());
    out.push_back(std::move(sg));
  }
  return out;
}

std::vector<std::pair<std::int32_t, NodeId>> core_owners(const std::vector<SubGraph>& parts, std::size_t parent_nodes) {
  std::vector<std::pair<std::int32_t, NodeId>> owner(parent_nodes, {-1, -1});
  for (std::size_t s = 0; s < parts.size(); ++s) {
    const auto& sg = parts[s];
    for (std::size_t li = 0; li < sg.local_to_parent.size(); ++li) {
      if (!sg.core_mask[li]) continue;
      const auto v = static_cast<std::size_t>(sg.local_to_parent[li]);
      if (v >= parent_nodes) throw InvalidArgument("reassemble: sub-graph " + std::to_string(s) + " maps to node " + std::to_string(v) + " outside the parent");
      if (owner[v].first >= 0)
        throw InvalidArgument("reassemble: node " + std::to_string(v) + " is core in sub-graphs " + std::to_string(owner[v].first) +
                              " and " + std::to_string(s));
      owner[v] = {static_cast<std::int32_t>(s), static_cast<NodeId>(li)};
    }
  }
  for (std::size_t v = 0; v < parent_nodes; ++v)
    if (owner[v].first < 0) throw InvalidArgument("reassemble: node " + std::to_string(v) + " is not core in any sub-graph");
  return owner;
}

namespace {

using json = nlohmann::ordered_json;

json range_json(const LevelRange& r) { return json::array({r.first, r.last}); }
LevelRange range_from(const json& j) { return {j.at(0).get<std::int32_t>(), j.at(1).get<std::int32_t>()}; }

}  // namespace

void write_partition(const std::vector<SubGraph>& parts, const PartitionOptions& opts, const std::string& directory) {
  namespace fs = std::filesystem;
  fs::create_directories(directory);
  json doc;
  doc["format"] = "preroute-partition";
  doc["version"] = 1;
  doc["parent"] = parts.empty() ? std::string() : parts.front().parent;
  doc["max_size"] = opts.max_size;
  doc["pad_levels"] = opts.pad_levels;
  const bool whole = parts.size() == 1 && parts.front().pad_before.empty() && parts.front().pad_after.empty();
  doc["unpartitioned"] = whole;
  doc["parent_max_level"] = parts.empty() ? 0 : parts.front().parent_max_level;
  json list = json::array();
  for (std::size_t s = 0; s < parts.size(); ++s) {
    const auto& sg = parts[s];
    const std::string file = "part" + std::to_string(s) + ".circuit.json";
    save_circuit(sg.graph, (fs::path(directory) / file).string());
    list.push_back({{"file", file},
                    {"core_levels", range_json(sg.core_levels)},
                    {"pad_before", range_json(sg.pad_before)},
                    {"pad_after", range_json(sg.pad_after)},
                    {"local_to_parent", sg.local_to_parent},
                    {"edge_to_parent", sg.edge_to_parent},
                    {"parent_level", sg.parent_level},
                    {"core_mask", sg.core_mask}});
  }
  doc["subgraphs"] = std::move(list);
  write_file_atomic((fs::path(directory) / "manifest.json").string(), doc.dump() + "\n");
}

std::vector<SubGraph> load_partition(const std::string& directory) {
  namespace fs = std::filesystem;
  const auto path = (fs::path(directory) / "manifest.json").string();
  try {
    const auto doc = json::parse(read_file(path));
    if (doc.value("format", std::string()) != "preroute-partition") throw FormatError(path + ": not a partition manifest");
    std::vector<SubGraph> parts;
    for (const auto& e : doc.at("subgraphs")) {
      SubGraph sg;
      sg.parent = doc.at("parent").get<std::string>();
      sg.graph = load_circuit((fs::path(directory) / e.at("file").get<std::string>()).string());
      sg.core_levels = range_from(e.at("core_levels"));
      sg.pad_before = range_from(e.at("pad_before"));
      sg.pad_after = range_from(e.at("pad_after"));
      sg.local_to_parent = e.at("local_to_parent").get<std::vector<NodeId>>();
      sg.edge_to_parent = e.at("edge_to_parent").get<std::vector<EdgeId>>();
      sg.parent_level = e.at("parent_level").get<std::vector<std::int32_t>>();
      sg.parent_max_level = doc.at("parent_max_level").get<std::int32_t>();
      sg.core_mask = e.at("core_mask").get<std::vector<std::uint8_t>>();
      const auto n = sg.graph.num_nodes();
      if (sg.local_to_parent.size() != n || sg.parent_level.size() != n || sg.core_mask.size() != n ||
          sg.edge_to_parent.size() != sg.graph.num_edges())
        throw FormatError(path + ": sub-graph " + e.at("file").get<std::string>() + " has mismatched per-node arrays");
      parts.push_back(std::move(sg));
    }
    return parts;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": malformed partition manifest: " + e.what());
  }
}

}  // namespace preroute
