#pragma once

#include <array>
#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "preroute/graph.hpp"
#include "preroute/levels.hpp"

namespace preroute::sta {

enum class Mode : std::uint8_t { Early, Late };
enum class Transition : std::uint8_t { Rise, Fall };

struct Corner {
  Mode mode;
  Transition transition;
};

/// Channel order used by every 4-vector: [E/R, E/F, L/R, L/F].
inline constexpr std::array<Corner, 4> kCorners{{{Mode::Early, Transition::Rise},
                                                 {Mode::Early, Transition::Fall},
                                                 {Mode::Late, Transition::Rise},
                                                 {Mode::Late, Transition::Fall}}};
inline constexpr std::array<const char*, 4> kCornerNames{"ER", "EF", "LR", "LF"};
inline constexpr std::size_t kNumCorners = 4;

constexpr bool is_early(std::size_t channel) { return channel < 2; }

using Quad = std::array<double, kNumCorners>;

enum class LutTable : std::uint8_t { Delay, Slew };

/// Bilinear interpolation on the bracketing grid cell. Queries outside the
/// axis range are clamped to the border.
double lut_lookup(const Lut& lut, LutTable table, double input_slew, double load);

/// Deterministic net surrogate: delay = scale[c] * (alpha * length + beta),
/// slew_out = slew_in + gamma * length. Cell delays are scaled by the same
/// per-corner factor; cell output slews come straight from the lut.
struct NetDelayModel {
  double alpha = 1.0;
  double beta = 0.005;
  double gamma = 0.5;
  Quad corner_scale{0.90, 0.94, 1.10, 1.06};
};

struct PinTiming {
  Quad at{};
  Quad slew{};
};

/// Boundary conditions at primary inputs, keyed by node id.
using Boundary = std::map<NodeId, PinTiming>;

struct TimingAnnotation {
  std::vector<Quad> at;
  std::vector<Quad> slew;
  std::vector<Quad> rat;
  std::vector<Quad> slack;
  /// Indexed by edge id: net delay for net edges, cell delay for cell
  /// edges, zero for net_inv edges.
  std::vector<Quad> edge_delay;
};

/// Forward arrival-time / slew propagation in ascending level order.
/// Late channels take the max over incoming arcs, early channels the min;
/// the slew follows the arc that realised the extremum, ties broken by the
/// smallest predecessor id. Nodes of one level are independent, so
/// `threads > 1` evaluates them concurrently with bitwise-identical results.
/// Fills at, slew and edge_delay.
TimingAnnotation propagate_forward(const CircuitGraph& graph, const LevelSchedule& schedule, const Boundary& boundary,
                                   const NetDelayModel& model, unsigned threads = 1);

/// Nodes without outgoing cell/net edges.
std::vector<NodeId> endpoints(const CircuitGraph& graph);

/// Required arrival times, reverse level order. Late channels take the min
/// over successors of (rat - delay), early channels the max. Every endpoint
/// must appear in `endpoint_rat`; entries for non-endpoints are rejected.
std::vector<Quad> propagate_rat(const CircuitGraph& graph, const LevelSchedule& schedule,
                                const std::map<NodeId, Quad>& endpoint_rat, const std::vector<Quad>& edge_delay);

/// slack^E = AT^E - RAT^E, slack^L = RAT^L - AT^L, elementwise.
Quad slack(const Quad& at, const Quad& rat);
std::vector<Quad> slack(const std::vector<Quad>& at, const std::vector<Quad>& rat);

/// Endpoint RAT convention used for generated labels: late channels get the
/// worst (max) endpoint AT plus `margin`, early channels the best (min)
/// endpoint AT minus `margin`, identical for every endpoint.
std::map<NodeId, Quad> critical_endpoint_rat(const CircuitGraph& graph, const std::vector<Quad>& at, double margin);

/// Uniform boundary at every primary input.
Boundary uniform_boundary(const CircuitGraph& graph, const PinTiming& timing);

/// Full golden analysis: forward, endpoint RAT convention, backward, slack.
TimingAnnotation analyze(const CircuitGraph& graph, const LevelSchedule& schedule, const Boundary& boundary,
                         const NetDelayModel& model, double rat_margin, unsigned threads = 1);

/// Label document I/O (JSON, see docs/format.md).
std::string serialize_labels(const CircuitGraph& graph, const TimingAnnotation& labels);
TimingAnnotation parse_labels(const CircuitGraph& graph, std::string_view text);
TimingAnnotation load_labels(const CircuitGraph& graph, const std::string& path);
void save_labels(const CircuitGraph& graph, const TimingAnnotation& labels, const std::string& path);

}  // namespace preroute::sta
