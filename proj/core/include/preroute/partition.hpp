#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "preroute/error.hpp"
#include "preroute/graph.hpp"
#include "preroute/levels.hpp"

namespace preroute {

/// Inclusive range of parent level indices; empty when first > last.
struct LevelRange {
  std::int32_t first = 0;
  std::int32_t last = -1;

  bool empty() const { return first > last; }
  std::int32_t size() const { return empty() ? 0 : last - first + 1; }
  bool contains(std::int32_t l) const { return l >= first && l <= last; }
  friend bool operator==(const LevelRange&, const LevelRange&) = default;
};

/// One piece of an order-preserving partition. Local node ids follow
/// ascending parent ids.
struct SubGraph {
  std::string parent;
  CircuitGraph graph;
  LevelRange core_levels;
  /// Starts k levels below the core, or lower when a core node has a
  /// timing predecessor within k hops further down.
  LevelRange pad_before;
  LevelRange pad_after;
  std::vector<std::uint8_t> core_mask;
  std::vector<NodeId> local_to_parent;
  std::vector<EdgeId> edge_to_parent;
  /// Level of each local node in the parent schedule.
  std::vector<std::int32_t> parent_level;
  std::int32_t parent_max_level = 0;

  std::size_t num_core() const;
};

struct PartitionOptions {
  std::size_t max_size = 8192;  // m
  int pad_levels = 4;            // k
  /// Emit a level of size >= m on its own instead of failing.
  bool split_oversized = false;
};

/// Greedy accumulation of consecutive levels while core size + next level
/// < m, each piece padded with up to k levels on either side. A graph with
/// fewer than m nodes comes back as one unpadded piece.
std::vector<SubGraph> partition(const CircuitGraph& graph, const LevelSchedule& schedule, const PartitionOptions& opts);

/// For each parent node, the (sub-graph index, local id) that owns it as a
/// core node. Throws InvalidArgument on a node covered zero or several times.
std::vector<std::pair<std::int32_t, NodeId>> core_owners(const std::vector<SubGraph>& parts, std::size_t parent_nodes);

/// Collects per-parent-node values from per-sub-graph predictions, keeping
/// core nodes only.
template <class Row>
std::vector<Row> reassemble(const std::vector<SubGraph>& parts, const std::vector<std::vector<Row>>& predictions,
                            std::size_t parent_nodes) {
  if (predictions.size() != parts.size())
    throw InvalidArgument("reassemble: " + std::to_string(predictions.size()) + " predictions for " +
                          std::to_string(parts.size()) + " sub-graphs");
  for (std::size_t s = 0; s < parts.size(); ++s)
    if (predictions[s].size() != parts[s].local_to_parent.size())
      throw InvalidArgument("reassemble: sub-graph " + std::to_string(s) + " has " + std::to_string(predictions[s].size()) +
                            " rows, expected " + std::to_string(parts[s].local_to_parent.size()));
  const auto owners = core_owners(parts, parent_nodes);
  std::vector<Row> out;
  out.reserve(parent_nodes);
  for (const auto& [s, local] : owners) out.push_back(predictions[static_cast<std::size_t>(s)][static_cast<std::size_t>(local)]);
  return out;
}

/// Writes one circuit document per piece plus manifest.json.
void write_partition(const std::vector<SubGraph>& parts, const PartitionOptions& opts, const std::string& directory);
std::vector<SubGraph> load_partition(const std::string& directory);

}  // namespace preroute
