#include "preroute/levels.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "preroute/error.hpp"

namespace preroute {

LevelSchedule topo_levels(const CircuitGraph& graph) {
  const std::size_t n = graph.num_nodes();
  std::vector<std::int32_t> indeg(n, 0);
  for (const auto& e : graph.edges())
    if (CircuitGraph::is_timing_edge(e.kind)) ++indeg[static_cast<std::size_t>(e.dst)];

  LevelSchedule sched;
  sched.node_level.assign(n, 0);
  std::vector<NodeId> frontier;
  for (std::size_t v = 0; v < n; ++v)
    if (indeg[v] == 0) frontier.push_back(static_cast<NodeId>(v));

  // Wave-front Kahn: a node is released exactly when its deepest
  // predecessor's wave is processed, so its wave index is its level.
  std::size_t placed = 0;
  while (!frontier.empty()) {
    std::sort(frontier.begin(), frontier.end());
    const auto level = static_cast<std::int32_t>(sched.levels.size());
    std::vector<NodeId> next;
    for (NodeId v : frontier) {
      sched.node_level[static_cast<std::size_t>(v)] = level;
      for (EdgeId eid : graph.out_edges(v)) {
        const auto& e = graph.edge(eid);
        if (!CircuitGraph::is_timing_edge(e.kind)) continue;
        if (--indeg[static_cast<std::size_t>(e.dst)] == 0) next.push_back(e.dst);
      }
    }
    placed += frontier.size();
    sched.levels.push_back(std::move(frontier));
    frontier = std::move(next);
  }
  if (placed != n)
    throw FormatError("cycle detected over cell/net edges in '" + graph.name() + "' (" + std::to_string(n - placed) +
                      " nodes unreachable by levelization)");
  return sched;
}

std::vector<double> level_encoding(double x, int frequencies, double max_level) {
  if (!(max_level > 0.0)) throw InvalidArgument("level_encoding: max level must be positive");
  if (frequencies < 1) throw InvalidArgument("level_encoding: frequency count must be >= 1");
  if (x < 0.0 || x > max_level)
    throw InvalidArgument("level_encoding: level " + std::to_string(x) + " outside [0, " + std::to_string(max_level) + "]");
  std::vector<double> out;
  out.reserve(2 * static_cast<std::size_t>(frequencies) + 1);
  out.push_back(x);
  double scale = 1.0;
  for (int f = 0; f < frequencies; ++f) {
    const double angle = scale * std::numbers::pi * x / max_level;
    out.push_back(std::sin(angle));
    out.push_back(std::cos(angle));
    scale *= 2.0;
  }
  return out;
}

}  // namespace preroute
