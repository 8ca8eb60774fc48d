#include "preroute/sta.hpp"

#include <algorithm>
#include <limits>
#include <string>
#include <thread>

#include <json.hpp>

#include "preroute/error.hpp"
#include "preroute/io.hpp"

namespace preroute::sta {

namespace {

// Index i with axis[i] <= q <= axis[i+1] and the interpolation weight of
// axis[i+1]; q is clamped into the axis range first.
std::pair<std::size_t, double> bracket(const std::vector<double>& axis, double q) {
  if (axis.size() == 1) return {0, 0.0};
  q = std::clamp(q, axis.front(), axis.back());
  auto it = std::upper_bound(axis.begin(), axis.end(), q);
  std::size_t hi = static_cast<std::size_t>(it - axis.begin());
  if (hi >= axis.size()) hi = axis.size() - 1;
  if (hi == 0) hi = 1;
  const std::size_t lo = hi - 1;
  return {lo, (q - axis[lo]) / (axis[hi] - axis[lo])};
}

}  // namespace

double lut_lookup(const Lut& lut, LutTable table, double input_slew, double load) {
  const auto& values = table == LutTable::Delay ? lut.delay : lut.slew;
  const auto [r, wr] = bracket(lut.row_axis, input_slew);
  const auto [c, wc] = bracket(lut.col_axis, load);
  const std::size_t cols = lut.cols();
  const std::size_t r1 = lut.rows() > 1 ? r + 1 : r;
  const std::size_t c1 = cols > 1 ? c + 1 : c;
  const double v00 = values[r * cols + c];
  const double v01 = values[r * cols + c1];
  const double v10 = values[r1 * cols + c];
  const double v11 = values[r1 * cols + c1];
  return (1.0 - wr) * ((1.0 - wc) * v00 + wc * v01) + wr * ((1.0 - wc) * v10 + wc * v11);
}

namespace {

void forward_node(const CircuitGraph& g, NodeId v, const Boundary& boundary, const NetDelayModel& model,
                  TimingAnnotation& ann) {
  const auto vi = static_cast<std::size_t>(v);
  const auto& node = g.node(v);
  if (node.is_primary_input) {
    auto it = boundary.find(v);
    if (it == boundary.end()) throw InvalidArgument("no boundary timing for primary input " + std::to_string(v));
    ann.at[vi] = it->second.at;
    ann.slew[vi] = it->second.slew;
    return;
  }

  bool any = false;
  Quad best_at{}, best_slew{};
  std::array<NodeId, kNumCorners> best_src{};
  for (EdgeId eid : g.in_edges(v)) {
    const auto& e = g.edge(eid);
    if (!CircuitGraph::is_timing_edge(e.kind)) continue;
    const auto si = static_cast<std::size_t>(e.src);
    Quad delay{}, out_slew{};
    if (e.kind == EdgeKind::Net) {
      const double len = e.features[feat::kEdgeLength];
      for (std::size_t c = 0; c < kNumCorners; ++c) {
        delay[c] = model.corner_scale[c] * (model.alpha * len + model.beta);
        out_slew[c] = ann.slew[si][c] + model.gamma * len;
      }
    } else {
      if (e.unate != Unateness::Positive)
        throw InvalidArgument("cell arc (" + std::to_string(e.src) + "," + std::to_string(e.dst) +
                              ") is not positive-unate; only positive-unate arcs are supported");
      const auto& lut = g.luts()[static_cast<std::size_t>(e.lut)];
      const double load = node.features[feat::kCapacitance];
      for (std::size_t c = 0; c < kNumCorners; ++c) {
        delay[c] = model.corner_scale[c] * lut_lookup(lut, LutTable::Delay, ann.slew[si][c], load);
        out_slew[c] = lut_lookup(lut, LutTable::Slew, ann.slew[si][c], load);
      }
    }
    ann.edge_delay[static_cast<std::size_t>(eid)] = delay;
    for (std::size_t c = 0; c < kNumCorners; ++c) {
      const double cand = ann.at[si][c] + delay[c];
      bool take = !any;
      if (any) {
        const bool better = is_early(c) ? cand < best_at[c] : cand > best_at[c];
        take = better || (cand == best_at[c] && e.src < best_src[c]);
      }
      if (take) {
        best_at[c] = cand;
        best_slew[c] = out_slew[c];
        best_src[c] = e.src;
      }
    }
    any = true;
  }
  if (!any) throw InvalidArgument("node " + std::to_string(v) + " is not a primary input and has no incoming timing arc");
  ann.at[vi] = best_at;
  ann.slew[vi] = best_slew;
}

}  // namespace

TimingAnnotation propagate_forward(const CircuitGraph& g, const LevelSchedule& schedule, const Boundary& boundary,
                                   const NetDelayModel& model, unsigned threads) {
  TimingAnnotation ann;
  ann.at.assign(g.num_nodes(), Quad{});
  ann.slew.assign(g.num_nodes(), Quad{});
  ann.edge_delay.assign(g.num_edges(), Quad{});
  threads = std::max(1u, threads);

  for (const auto& level : schedule.levels) {
    if (threads == 1 || level.size() < 2 * threads) {
      for (NodeId v : level) forward_node(g, v, boundary, model, ann);
      continue;
    }
    // Each node writes only its own slots and those of its incoming edges.
    std::vector<std::jthread> pool;
    std::vector<std::exception_ptr> errors(threads);
    const std::size_t chunk = (level.size() + threads - 1) / threads;
    for (unsigned t = 0; t < threads; ++t) {
      pool.emplace_back([&, t] {
        try {
          const std::size_t lo = t * chunk;
          const std::size_t hi = std::min(level.size(), lo + chunk);
          for (std::size_t i = lo; i < hi; ++i) forward_node(g, level[i], boundary, model, ann);
        } catch (...) {
          errors[t] = std::current_exception();
        }
      });
    }
    pool.clear();
    for (auto& err : errors)
      if (err) std::rethrow_exception(err);
  }
  return ann;
}

std::vector<NodeId> endpoints(const CircuitGraph& g) {
  std::vector<NodeId> out;
  for (std::size_t v = 0; v < g.num_nodes(); ++v) {
    bool has_out = false;
    for (EdgeId eid : g.out_edges(static_cast<NodeId>(v))) has_out |= CircuitGraph::is_timing_edge(g.edge(eid).kind);
    if (!has_out) out.push_back(static_cast<NodeId>(v));
  }
  return out;
}

std::vector<Quad> propagate_rat(const CircuitGraph& g, const LevelSchedule& schedule,
                                const std::map<NodeId, Quad>& endpoint_rat, const std::vector<Quad>& edge_delay) {
  if (edge_delay.size() != g.num_edges()) throw InvalidArgument("propagate_rat: edge delays do not cover the graph");
  std::vector<Quad> rat(g.num_nodes(), Quad{});
  std::vector<bool> is_endpoint(g.num_nodes(), false);
  for (NodeId v : endpoints(g)) {
    auto it = endpoint_rat.find(v);
    if (it == endpoint_rat.end()) throw InvalidArgument("endpoint " + std::to_string(v) + " has no RAT assignment");
    rat[static_cast<std::size_t>(v)] = it->second;
    is_endpoint[static_cast<std::size_t>(v)] = true;
  }
  for (const auto& [v, q] : endpoint_rat)
    if (v < 0 || static_cast<std::size_t>(v) >= g.num_nodes() || !is_endpoint[static_cast<std::size_t>(v)])
      throw InvalidArgument("RAT given for node " + std::to_string(v) + ", which is not an endpoint");

  for (auto lit = schedule.levels.rbegin(); lit != schedule.levels.rend(); ++lit) {
    for (NodeId v : *lit) {
      const auto vi = static_cast<std::size_t>(v);
      if (is_endpoint[vi]) continue;
      Quad best{};
      bool any = false;
      for (EdgeId eid : g.out_edges(v)) {
        const auto& e = g.edge(eid);
        if (!CircuitGraph::is_timing_edge(e.kind)) continue;
        const auto& d = edge_delay[static_cast<std::size_t>(eid)];
        const auto& r = rat[static_cast<std::size_t>(e.dst)];
        for (std::size_t c = 0; c < kNumCorners; ++c) {
          const double cand = r[c] - d[c];
          if (!any || (is_early(c) ? cand > best[c] : cand < best[c])) best[c] = cand;
        }
        any = true;
      }
      rat[vi] = best;
    }
  }
  return rat;
}

Quad slack(const Quad& at, const Quad& rat) {
  Quad s{};
  for (std::size_t c = 0; c < kNumCorners; ++c) s[c] = is_early(c) ? at[c] - rat[c] : rat[c] - at[c];
  return s;
}

std::vector<Quad> slack(const std::vector<Quad>& at, const std::vector<Quad>& rat) {
  if (at.size() != rat.size()) throw InvalidArgument("slack: at/rat size mismatch");
  std::vector<Quad> out(at.size());
  for (std::size_t i = 0; i < at.size(); ++i) out[i] = slack(at[i], rat[i]);
  return out;
}

std::map<NodeId, Quad> critical_endpoint_rat(const CircuitGraph& g, const std::vector<Quad>& at, double margin) {
  const auto ends = endpoints(g);
  Quad worst{};
  for (std::size_t c = 0; c < kNumCorners; ++c)
    worst[c] = is_early(c) ? std::numeric_limits<double>::infinity() : -std::numeric_limits<double>::infinity();
  for (NodeId v : ends)
    for (std::size_t c = 0; c < kNumCorners; ++c) {
      const double a = at[static_cast<std::size_t>(v)][c];
      worst[c] = is_early(c) ? std::min(worst[c], a) : std::max(worst[c], a);
    }
  Quad rat{};
  for (std::size_t c = 0; c < kNumCorners; ++c) rat[c] = is_early(c) ? worst[c] - margin : worst[c] + margin;
  std::map<NodeId, Quad> out;
  for (NodeId v : ends) out.emplace(v, rat);
  return out;
}

Boundary uniform_boundary(const CircuitGraph& g, const PinTiming& timing) {
  Boundary b;
  for (const auto& nd : g.nodes())
    if (nd.is_primary_input) b.emplace(nd.id, timing);
  return b;
}

TimingAnnotation analyze(const CircuitGraph& g, const LevelSchedule& schedule, const Boundary& boundary,
                         const NetDelayModel& model, double rat_margin, unsigned threads) {
  auto ann = propagate_forward(g, schedule, boundary, model, threads);
  ann.rat = propagate_rat(g, schedule, critical_endpoint_rat(g, ann.at, rat_margin), ann.edge_delay);
  ann.slack = slack(ann.at, ann.rat);
  return ann;
}

// ---------------------------------------------------------------------------
// Label documents

namespace {

using json = nlohmann::ordered_json;

json quads_json(const std::vector<Quad>& v) {
  json arr = json::array();
  for (const auto& q : v) arr.push_back(q);
  return arr;
}

std::vector<Quad> quads_from(const json& arr, std::size_t expected, const std::string& what) {
  if (!arr.is_array() || arr.size() != expected)
    throw FormatError("labels: '" + what + "' must have " + std::to_string(expected) + " entries");
  std::vector<Quad> out(expected);
  for (std::size_t i = 0; i < expected; ++i) {
    const auto& q = arr[i];
    if (!q.is_array() || q.size() != kNumCorners) throw FormatError("labels: " + what + "[" + std::to_string(i) + "] is not a 4-vector");
    for (std::size_t c = 0; c < kNumCorners; ++c) out[i][c] = q[c].get<double>();
  }
  return out;
}

json edge_table(const CircuitGraph& g, const TimingAnnotation& ann, EdgeKind kind) {
  json ids = json::array();
  json values = json::array();
  for (std::size_t e = 0; e < g.num_edges(); ++e)
    if (g.edges()[e].kind == kind) {
      ids.push_back(e);
      values.push_back(ann.edge_delay[e]);
    }
  json t;
  t["edges"] = std::move(ids);
  t["delay"] = std::move(values);
  return t;
}

void read_edge_table(const CircuitGraph& g, const json& t, EdgeKind kind, TimingAnnotation& ann, const std::string& what) {
  const auto& ids = t.at("edges");
  const auto values = quads_from(t.at("delay"), ids.size(), what);
  if (ids.size() != g.count_edges(kind)) throw FormatError("labels: '" + what + "' does not cover every " + std::string(to_string(kind)) + " edge");
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto e = ids[i].get<std::size_t>();
    if (e >= g.num_edges() || g.edges()[e].kind != kind)
      throw FormatError("labels: '" + what + "' references edge " + std::to_string(e) + " of the wrong kind");
    ann.edge_delay[e] = values[i];
  }
}

}  // namespace

std::string serialize_labels(const CircuitGraph& g, const TimingAnnotation& ann) {
  json doc;
  doc["format"] = "preroute-labels";
  doc["version"] = 1;
  doc["circuit"] = g.name();
  doc["corners"] = kCornerNames;
  doc["at"] = quads_json(ann.at);
  doc["slew"] = quads_json(ann.slew);
  doc["rat"] = quads_json(ann.rat);
  doc["slack"] = quads_json(ann.slack);
  doc["net_delay"] = edge_table(g, ann, EdgeKind::Net);
  doc["cell_delay"] = edge_table(g, ann, EdgeKind::Cell);
  return doc.dump() + "\n";
}

TimingAnnotation parse_labels(const CircuitGraph& g, std::string_view text) {
  json doc;
  try {
    doc = json::parse(text.begin(), text.end());
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("malformed label document: ") + e.what());
  }
  try {
    if (doc.value("format", std::string()) != "preroute-labels") throw FormatError("not a label document");
    if (doc.at("circuit").get<std::string>() != g.name())
      throw FormatError("labels belong to circuit '" + doc.at("circuit").get<std::string>() + "', not '" + g.name() + "'");
    TimingAnnotation ann;
    const std::size_t n = g.num_nodes();
    ann.at = quads_from(doc.at("at"), n, "at");
    ann.slew = quads_from(doc.at("slew"), n, "slew");
    ann.rat = quads_from(doc.at("rat"), n, "rat");
    ann.slack = quads_from(doc.at("slack"), n, "slack");
    ann.edge_delay.assign(g.num_edges(), Quad{});
    read_edge_table(g, doc.at("net_delay"), EdgeKind::Net, ann, "net_delay");
    read_edge_table(g, doc.at("cell_delay"), EdgeKind::Cell, ann, "cell_delay");
    return ann;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed label document: ") + e.what());
  }
}

TimingAnnotation load_labels(const CircuitGraph& g, const std::string& path) {
  try {
    return parse_labels(g, read_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path + ": " + e.what());
  }
}

void save_labels(const CircuitGraph& g, const TimingAnnotation& labels, const std::string& path) {
  write_file_atomic(path, serialize_labels(g, labels));
}

}  // namespace preroute::sta
