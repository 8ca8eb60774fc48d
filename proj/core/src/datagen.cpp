#include "preroute/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

#include <json.hpp>

#include "preroute/error.hpp"
#include "preroute/io.hpp"
#include "preroute/levels.hpp"
#include "preroute/rng.hpp"

namespace preroute::datagen {

namespace {

struct CellType {
  int inputs = 1;
  double pin_cap = 1.0;
  Lut lut;
};

std::vector<double> geometric_axis(double lo, double hi, int n) {
  std::vector<double> axis(static_cast<std::size_t>(n));
  if (n == 1) {
    axis[0] = std::sqrt(lo * hi);
    return axis;
  }
  for (int i = 0; i < n; ++i) axis[static_cast<std::size_t>(i)] = lo * std::pow(hi / lo, static_cast<double>(i) / (n - 1));
  return axis;
}

CellType make_cell_type(Rng& rng, int index, const GenConfig& cfg) {
  CellType t;
  t.inputs = 1 + index % cfg.fanin_max;
  t.pin_cap = rng.uniform(0.5, 2.0);
  t.lut.id = "cell" + std::to_string(index) + "_in" + std::to_string(t.inputs);
  t.lut.row_axis = geometric_axis(0.02, 2.0, cfg.lut_rows);
  t.lut.col_axis = geometric_axis(0.2, 20.0, cfg.lut_cols);
  // Monotone in both axes: every coefficient is positive.
  const double d0 = rng.uniform(0.02, 0.08), ds = rng.uniform(0.10, 0.30), dl = rng.uniform(0.02, 0.06),
               dx = rng.uniform(0.0, 0.02);
  const double s0 = rng.uniform(0.02, 0.05), ss = rng.uniform(0.05, 0.15), sl = rng.uniform(0.03, 0.08);
  for (double slew : t.lut.row_axis)
    for (double load : t.lut.col_axis) {
      t.lut.delay.push_back(d0 + ds * slew + dl * std::pow(load, 0.8) + dx * slew * load);
      t.lut.slew.push_back(s0 + ss * slew + sl * std::pow(load, 0.9));
    }
  return t;
}

void check_config(const GenConfig& cfg) {
  if (cfg.n_nodes < 3) throw InvalidArgument("gen: n_nodes must be >= 3 (got " + std::to_string(cfg.n_nodes) + ")");
  if (cfg.fanin_max < 1) throw InvalidArgument("gen: fanin_max must be >= 1");
  if (!(cfg.depth_bias > 0.0)) throw InvalidArgument("gen: depth_bias must be positive");
  if (cfg.lut_rows < 1 || cfg.lut_cols < 1) throw InvalidArgument("gen: lut grid must be at least 1x1");
  if (!(cfg.placement_width > 0.0) || !(cfg.placement_height > 0.0)) throw InvalidArgument("gen: placement extent must be positive");
  if (cfg.library_size < 1) throw InvalidArgument("gen: library_size must be >= 1");
  if (cfg.local_drive < 0.0 || cfg.local_drive > 1.0) throw InvalidArgument("gen: local_drive must lie in [0, 1]");
  if (cfg.wire_cap_per_length < 0.0) throw InvalidArgument("gen: wire_cap_per_length must be >= 0");
}

struct Pin {
  bool pi = false, po = false, fanin = false, fanout = false;
  double x = 0.0, y = 0.0, cap = 0.0;
};

}  // namespace

CircuitGraph gen_circuit(const GenConfig& cfg, const std::string& name) {
  check_config(cfg);
  Rng rng(cfg.seed);
  const double W = cfg.placement_width, H = cfg.placement_height;

  std::vector<CellType> library;
  for (int t = 0; t < cfg.library_size; ++t) library.push_back(make_cell_type(rng, t, cfg));

  const double avg_inputs = 0.5 * (1.0 + cfg.fanin_max);
  const auto cells = std::max<std::int64_t>(1, std::llround(static_cast<double>(cfg.n_nodes) / (avg_inputs + 1.0 + 0.1)));
  const auto stages = std::clamp<std::int64_t>(std::llround(cfg.depth_bias * std::pow(static_cast<double>(cells), 0.4)), 1, cells);
  const auto width = std::max<std::int64_t>(1, cells / stages);

  std::vector<Pin> pins;
  std::vector<std::int64_t> fanout_count;  // per pin, sinks driven
  std::vector<std::vector<std::int64_t>> drivers_by_stage(static_cast<std::size_t>(stages) + 1);
  struct Net {
    std::int64_t driver, sink;
  };
  std::vector<Net> nets;
  struct CellArc {
    std::int64_t fanin, fanout;
    int type;
  };
  std::vector<CellArc> arcs;

  auto add_pin = [&](const Pin& p) {
    pins.push_back(p);
    fanout_count.push_back(0);
    return static_cast<std::int64_t>(pins.size()) - 1;
  };

  const auto n_pi = std::max<std::int64_t>(2, std::llround(0.6 * static_cast<double>(width)) + 1);
  for (std::int64_t i = 0; i < n_pi; ++i) {
    Pin p;
    p.pi = true;
    p.fanout = true;
    p.x = 0.0;
    p.y = rng.uniform(0.0, H);
    drivers_by_stage[0].push_back(add_pin(p));
  }

  for (std::int64_t s = 1; s <= stages; ++s) {
    const std::int64_t lo = (s - 1) * cells / stages, hi = s * cells / stages;
    std::vector<std::int64_t> unused;
    for (auto d : drivers_by_stage[static_cast<std::size_t>(s - 1)])
      if (fanout_count[static_cast<std::size_t>(d)] == 0) unused.push_back(d);
    for (std::size_t i = unused.size(); i > 1; --i) std::swap(unused[i - 1], unused[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);

    for (std::int64_t c = lo; c < hi; ++c) {
      const int type = static_cast<int>(rng.uniform_int(0, cfg.library_size - 1));
      const auto& ct = library[static_cast<std::size_t>(type)];
      std::vector<std::int64_t> drivers;
      for (int k = 0; k < ct.inputs; ++k) {
        std::int64_t d = -1;
        for (int attempt = 0; attempt < 8 && (d < 0 || std::find(drivers.begin(), drivers.end(), d) != drivers.end()); ++attempt) {
          if (s == 1 || rng.bernoulli(cfg.local_drive)) {
            const auto& prev = drivers_by_stage[static_cast<std::size_t>(s - 1)];
            if (!unused.empty() && attempt == 0) {
              d = unused.back();
              unused.pop_back();
            } else {
              d = prev[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(prev.size()) - 1))];
            }
          } else {
            const auto st = rng.uniform_int(0, s - 2);
            const auto& pool = drivers_by_stage[static_cast<std::size_t>(st)];
            d = pool[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(pool.size()) - 1))];
          }
        }
        if (std::find(drivers.begin(), drivers.end(), d) == drivers.end()) drivers.push_back(d);
      }

      double y = 0.0;
      for (auto d : drivers) y += pins[static_cast<std::size_t>(d)].y;
      y = std::clamp(y / static_cast<double>(drivers.size()) + 0.08 * H * rng.normal(), 0.0, H);
      const double x = std::clamp(static_cast<double>(s) / static_cast<double>(stages + 1) * W +
                                      0.3 * W / static_cast<double>(stages + 1) * rng.normal(),
                                  0.0, W);
      Pin out;
      out.fanout = true;
      out.x = std::min(W, x + 0.003 * W);
      out.y = y;
      std::vector<std::int64_t> ins;
      for (auto d : drivers) {
        Pin in;
        in.fanin = true;
        in.x = std::clamp(x + rng.uniform(-0.002, 0.002) * W, 0.0, W);
        in.y = std::clamp(y + rng.uniform(-0.002, 0.002) * H, 0.0, H);
        in.cap = ct.pin_cap;
        const auto id = add_pin(in);
        nets.push_back({d, id});
        ++fanout_count[static_cast<std::size_t>(d)];
        ins.push_back(id);
      }
      const auto out_id = add_pin(out);
      for (auto in : ins) arcs.push_back({in, out_id, type});
      drivers_by_stage[static_cast<std::size_t>(s)].push_back(out_id);
    }
  }

  // Cell outputs left without sinks become primary outputs.
  const std::size_t before_po = pins.size();
  for (std::size_t d = 0; d < before_po; ++d) {
    const auto& p = pins[d];
    if (p.pi || !p.fanout || fanout_count[d] != 0) continue;
    Pin po;
    po.po = true;
    po.x = std::clamp(p.x + rng.uniform(0.005, 0.03) * W, 0.0, W);
    po.y = std::clamp(p.y + 0.01 * H * rng.normal(), 0.0, H);
    po.cap = rng.uniform(0.5, 1.5);
    const auto id = add_pin(po);
    nets.push_back({static_cast<std::int64_t>(d), id});
    ++fanout_count[d];
  }

  // Drop unused primary inputs and assign dense ids.
  std::vector<NodeId> remap(pins.size(), -1);
  NodeId next = 0;
  for (std::size_t i = 0; i < pins.size(); ++i)
    if (!(pins[i].pi && fanout_count[i] == 0)) remap[i] = next++;

  // Loads: sink pin caps plus wire capacitance.
  std::vector<double> load(pins.size(), 0.0);
  for (const auto& net : nets) {
    const auto& a = pins[static_cast<std::size_t>(net.driver)];
    const auto& b = pins[static_cast<std::size_t>(net.sink)];
    const double len = std::abs(b.x - a.x) + std::abs(b.y - a.y);
    load[static_cast<std::size_t>(net.driver)] += b.cap + cfg.wire_cap_per_length * len;
  }

  std::vector<NodeRecord> nodes(static_cast<std::size_t>(next));
  for (std::size_t i = 0; i < pins.size(); ++i) {
    if (remap[i] < 0) continue;
    const auto& p = pins[i];
    auto& nd = nodes[static_cast<std::size_t>(remap[i])];
    nd.id = remap[i];
    nd.is_primary_input = p.pi;
    nd.is_primary_output = p.po;
    nd.is_fanin = p.fanin;
    nd.is_fanout = p.fanout;
    const double cap = p.fanout ? load[i] : p.cap;
    nd.features = {p.pi ? 1.0 : 0.0, p.po ? 1.0 : 0.0, p.fanin ? 1.0 : 0.0, p.fanout ? 1.0 : 0.0, p.x, p.y, cap, 0.0};
  }

  std::vector<EdgeRecord> edges;
  edges.reserve(2 * nets.size() + arcs.size());
  for (const auto& net : nets) {
    const auto& a = pins[static_cast<std::size_t>(net.driver)];
    const auto& b = pins[static_cast<std::size_t>(net.sink)];
    const double dx = b.x - a.x, dy = b.y - a.y, len = std::abs(dx) + std::abs(dy);
    const NodeId u = remap[static_cast<std::size_t>(net.driver)], v = remap[static_cast<std::size_t>(net.sink)];
    edges.push_back({u, v, EdgeKind::Net, {dx, dy, len}, -1, Unateness::Positive});
    edges.push_back({v, u, EdgeKind::NetInv, {-dx, -dy, len}, -1, Unateness::Positive});
  }
  for (const auto& arc : arcs)
    edges.push_back({remap[static_cast<std::size_t>(arc.fanin)], remap[static_cast<std::size_t>(arc.fanout)], EdgeKind::Cell, {},
                     arc.type, Unateness::Positive});

  std::vector<Lut> luts;
  for (auto& ct : library) luts.push_back(std::move(ct.lut));

  CircuitGraph draft(name, default_feature_schema(), nodes, edges, luts);
  const auto sched = topo_levels(draft);
  const double max_level = std::max(1, sched.max_level());
  for (auto& nd : nodes) nd.features[feat::kNormalizedDepth] = sched.node_level[static_cast<std::size_t>(nd.id)] / max_level;
  return CircuitGraph(name, default_feature_schema(), std::move(nodes), std::move(edges), std::move(luts));
}

sta::TimingAnnotation label_circuit(const CircuitGraph& graph, const LabelConfig& labels, double rat_margin) {
  const auto sched = topo_levels(graph);
  return sta::analyze(graph, sched, sta::uniform_boundary(graph, labels.primary_input), labels.net, rat_margin);
}

std::vector<sta::TimingAnnotation> label_corpus(const std::vector<CircuitGraph>& circuits, const LabelConfig& labels,
                                                double rat_margin) {
  std::vector<sta::TimingAnnotation> out;
  out.reserve(circuits.size());
  for (const auto& g : circuits) out.push_back(label_circuit(g, labels, rat_margin));
  return out;
}

// ---------------------------------------------------------------------------
// Corpus configuration and manifest

namespace {

using json = nlohmann::ordered_json;

json to_json(const GenConfig& g) {
  return json{{"fanin_max", g.fanin_max},
              {"depth_bias", g.depth_bias},
              {"lut_rows", g.lut_rows},
              {"lut_cols", g.lut_cols},
              {"placement_width", g.placement_width},
              {"placement_height", g.placement_height},
              {"rat_margin", g.rat_margin},
              {"library_size", g.library_size},
              {"local_drive", g.local_drive},
              {"wire_cap_per_length", g.wire_cap_per_length}};
}

void from_json(const json& j, GenConfig& g) {
  g.fanin_max = j.value("fanin_max", g.fanin_max);
  g.depth_bias = j.value("depth_bias", g.depth_bias);
  g.lut_rows = j.value("lut_rows", g.lut_rows);
  g.lut_cols = j.value("lut_cols", g.lut_cols);
  g.placement_width = j.value("placement_width", g.placement_width);
  g.placement_height = j.value("placement_height", g.placement_height);
  g.rat_margin = j.value("rat_margin", g.rat_margin);
  g.library_size = j.value("library_size", g.library_size);
  g.local_drive = j.value("local_drive", g.local_drive);
  g.wire_cap_per_length = j.value("wire_cap_per_length", g.wire_cap_per_length);
}

json to_json(const LabelConfig& l) {
  return json{{"alpha", l.net.alpha},
              {"beta", l.net.beta},
              {"gamma", l.net.gamma},
              {"corner_scale", l.net.corner_scale},
              {"pi_at", l.primary_input.at},
              {"pi_slew", l.primary_input.slew}};
}

void from_json(const json& j, LabelConfig& l) {
  l.net.alpha = j.value("alpha", l.net.alpha);
  l.net.beta = j.value("beta", l.net.beta);
  l.net.gamma = j.value("gamma", l.net.gamma);
  if (j.contains("corner_scale")) l.net.corner_scale = j["corner_scale"].get<sta::Quad>();
  if (j.contains("pi_at")) l.primary_input.at = j["pi_at"].get<sta::Quad>();
  if (j.contains("pi_slew")) l.primary_input.slew = j["pi_slew"].get<sta::Quad>();
}

json to_json(const CorpusConfig& c) {
  return json{{"seed", c.seed},         {"n_train", c.n_train},    {"n_test", c.n_test}, {"min_nodes", c.min_nodes},
              {"max_nodes", c.max_nodes}, {"gen", to_json(c.gen)}, {"labels", to_json(c.labels)}};
}

CorpusConfig corpus_from_json(const json& j) {
  CorpusConfig c;
  c.seed = j.value("seed", c.seed);
  c.n_train = j.value("n_train", c.n_train);
  c.n_test = j.value("n_test", c.n_test);
  c.min_nodes = j.value("min_nodes", c.min_nodes);
  c.max_nodes = j.value("max_nodes", c.max_nodes);
  if (j.contains("gen")) from_json(j["gen"], c.gen);
  if (j.contains("labels")) from_json(j["labels"], c.labels);
  if (c.n_train < 0 || c.n_test < 0 || c.n_train + c.n_test == 0) throw InvalidArgument("corpus: need at least one circuit");
  if (c.min_nodes < 3 || c.max_nodes < c.min_nodes) throw InvalidArgument("corpus: require 3 <= min_nodes <= max_nodes");
  return c;
}

}  // namespace

CorpusConfig corpus_config_from_json(std::string_view text) {
  try {
    return corpus_from_json(json::parse(text.begin(), text.end()));
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed corpus config: ") + e.what());
  }
}

std::string corpus_config_to_json(const CorpusConfig& cfg) { return to_json(cfg).dump(2) + "\n"; }

GenConfig circuit_config(const CorpusConfig& cfg, int index) {
  GenConfig g = cfg.gen;
  g.seed = Rng::derive(cfg.seed, static_cast<std::uint64_t>(index));
  Rng size_rng(Rng::derive(cfg.seed ^ 0x5EEDull, static_cast<std::uint64_t>(index)));
  const double lo = std::log(static_cast<double>(cfg.min_nodes)), hi = std::log(static_cast<double>(cfg.max_nodes));
  g.n_nodes = std::llround(std::exp(size_rng.uniform(lo, hi)));
  return g;
}

std::vector<CorpusEntry> CorpusManifest::split(std::string_view which) const {
  std::vector<CorpusEntry> out;
  for (const auto& e : entries)
    if (e.split == which) out.push_back(e);
  return out;
}

CorpusManifest write_corpus(const CorpusConfig& cfg, const std::string& directory) {
  namespace fs = std::filesystem;
  fs::create_directories(directory);
  CorpusManifest m;
  m.directory = directory;
  m.config = cfg;
  const int total = cfg.n_train + cfg.n_test;
  for (int i = 0; i < total; ++i) {
    const auto gcfg = circuit_config(cfg, i);
    CorpusEntry entry;
    entry.name = "c" + std::to_string(i);
    entry.split = i < cfg.n_train ? "train" : "test";
    entry.circuit_path = entry.name + ".circuit.json";
    entry.labels_path = entry.name + ".labels.json";
    const auto graph = gen_circuit(gcfg, entry.name);
    const auto labels = label_circuit(graph, cfg.labels, gcfg.rat_margin);
    save_circuit(graph, (fs::path(directory) / entry.circuit_path).string());
    sta::save_labels(graph, labels, (fs::path(directory) / entry.labels_path).string());
    entry.num_nodes = graph.num_nodes();
    m.entries.push_back(entry);
  }
  json doc;
  doc["format"] = "preroute-corpus";
  doc["version"] = 1;
  doc["config"] = to_json(cfg);
  json entries = json::array();
  for (const auto& e : m.entries)
    entries.push_back({{"name", e.name}, {"split", e.split}, {"circuit", e.circuit_path}, {"labels", e.labels_path}, {"nodes", e.num_nodes}});
  doc["circuits"] = std::move(entries);
  write_file_atomic((fs::path(directory) / "manifest.json").string(), doc.dump(2) + "\n");
  return m;
}

CorpusManifest load_corpus(const std::string& directory) {
  namespace fs = std::filesystem;
  const auto path = (fs::path(directory) / "manifest.json").string();
  try {
    const auto doc = json::parse(read_file(path));
    if (doc.value("format", std::string()) != "preroute-corpus") throw FormatError(path + ": not a corpus manifest");
    CorpusManifest m;
    m.directory = directory;
    m.config = corpus_from_json(doc.at("config"));
    for (const auto& e : doc.at("circuits")) {
      CorpusEntry entry;
      entry.name = e.at("name").get<std::string>();
      entry.split = e.at("split").get<std::string>();
      entry.circuit_path = e.at("circuit").get<std::string>();
      entry.labels_path = e.at("labels").get<std::string>();
      entry.num_nodes = e.value("nodes", std::size_t{0});
      m.entries.push_back(entry);
    }
    return m;
  } catch (const json::exception& e) {
    throw FormatError(path + ": malformed corpus manifest: " + e.what());
  }
}

}  // namespace preroute::datagen
