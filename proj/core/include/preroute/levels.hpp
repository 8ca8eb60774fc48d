#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "preroute/graph.hpp"

namespace preroute {

/// Topological levelization over cell and net edges (net_inv ignored).
/// Level 0 holds nodes without timing predecessors; every other node sits one
/// above its deepest predecessor.
struct LevelSchedule {
  std::vector<std::vector<NodeId>> levels;  // ascending node ids within a level
  std::vector<std::int32_t> node_level;

  std::int32_t max_level() const { return levels.empty() ? 0 : static_cast<std::int32_t>(levels.size()) - 1; }
  std::size_t num_levels() const { return levels.size(); }
};

/// Throws FormatError if the cell+net subgraph has a cycle.
LevelSchedule topo_levels(const CircuitGraph& graph);

/// Multi-frequency level encoding of length 2 * frequencies + 1:
/// [x, sin(2^0 pi x / L), cos(2^0 pi x / L), ..., sin(2^(N-1) pi x / L), cos(...)].
/// Requires 0 <= x <= max_level, max_level >= 1, frequencies >= 1.
std::vector<double> level_encoding(double x, int frequencies, double max_level);

inline constexpr int kDefaultLevelFrequencies = 8;

}  // namespace preroute
