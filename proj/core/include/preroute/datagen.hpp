#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "preroute/graph.hpp"
#include "preroute/sta.hpp"

namespace preroute::datagen {

struct GenConfig {
  std::uint64_t seed = 1;
  std::int64_t n_nodes = 1000;
  int fanin_max = 2;
  /// Scales the number of logic stages, stages ~ depth_bias * cells^0.4.
  double depth_bias = 1.0;
  int lut_rows = 5;
  int lut_cols = 5;
  double placement_width = 1.0;
  double placement_height = 1.0;
  /// Time added over the critical endpoint AT when assigning endpoint RAT.
  double rat_margin = -0.5;
  int library_size = 24;
  /// Probability that a cell input is driven from the immediately preceding stage.
  double local_drive = 0.75;
  double wire_cap_per_length = 2.0;
};

/// Timing conditions used when labelling generated circuits.
struct LabelConfig {
  sta::NetDelayModel net;
  sta::PinTiming primary_input{{0.0, 0.0, 0.0, 0.0}, {0.05, 0.06, 0.08, 0.09}};
};

/// Random placed circuit: cells of 1..fanin_max inputs and one output, a
/// random library of monotone luts, net / net_inv pairs with geometric
/// features. Identical configs give bitwise-identical graphs. Throws
/// InvalidArgument for infeasible configs.
CircuitGraph gen_circuit(const GenConfig& cfg, const std::string& name = "circuit");

/// Golden labels for one circuit (calls the STA oracle).
sta::TimingAnnotation label_circuit(const CircuitGraph& graph, const LabelConfig& labels, double rat_margin);

/// Labels for several circuits; shares the convention of label_circuit().
std::vector<sta::TimingAnnotation> label_corpus(const std::vector<CircuitGraph>& circuits, const LabelConfig& labels,
                                                double rat_margin);

struct CorpusConfig {
  std::uint64_t seed = 2024;
  int n_train = 14;
  int n_test = 7;
  std::int64_t min_nodes = 1000;
  std::int64_t max_nodes = 50000;
  GenConfig gen;  // seed and n_nodes are overridden per circuit
  LabelConfig labels;
};

CorpusConfig corpus_config_from_json(std::string_view text);
std::string corpus_config_to_json(const CorpusConfig& cfg);

/// Per-circuit generator config: node count log-uniform in
/// [min_nodes, max_nodes], seed derived from (corpus seed, index).
GenConfig circuit_config(const CorpusConfig& cfg, int index);

struct CorpusEntry {
  std::string name;
  std::string split;  // "train" | "test"
  std::string circuit_path;
  std::string labels_path;
  std::size_t num_nodes = 0;
};

struct CorpusManifest {
  std::string directory;
  CorpusConfig config;
  std::vector<CorpusEntry> entries;

  std::vector<CorpusEntry> split(std::string_view which) const;
};

/// Generates, labels and writes a corpus: one circuit and one label document
/// per circuit plus manifest.json recording split assignment.
CorpusManifest write_corpus(const CorpusConfig& cfg, const std::string& directory);
CorpusManifest load_corpus(const std::string& directory);

}  // namespace preroute::datagen
