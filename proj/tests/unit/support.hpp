#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "preroute/datagen.hpp"
#include "preroute/graph.hpp"
#include "preroute/nn/layers.hpp"
#include "preroute/rng.hpp"

namespace preroute::testing {

/// Small hand-built circuits. Nodes carry default-schema features.
struct Builder {
  std::vector<NodeRecord> nodes;
  std::vector<EdgeRecord> edges;
  std::vector<Lut> luts;

  NodeId node(bool pi = false, bool po = false, bool fanin = false, bool fanout = false) {
    NodeRecord r;
    r.id = static_cast<NodeId>(nodes.size());
    r.is_primary_input = pi;
    r.is_primary_output = po;
    r.is_fanin = fanin;
    r.is_fanout = fanout;
    r.features.assign(feat::kCount, 0.0);
    r.features[feat::kIsPrimaryInput] = pi;
    r.features[feat::kIsPrimaryOutput] = po;
    r.features[feat::kIsFanin] = fanin;
    r.features[feat::kIsFanout] = fanout;
    r.features[feat::kX] = 0.1 * static_cast<double>(r.id % 7);
    r.features[feat::kY] = 0.05 * static_cast<double>(r.id % 5);
    r.features[feat::kCapacitance] = 0.01 * static_cast<double>(1 + r.id % 3);
    nodes.push_back(r);
    return r.id;
  }

  /// Net edge plus its net_inv mirror.
  void net(NodeId a, NodeId b, double length) {
    edges.push_back({a, b, EdgeKind::Net, {length, 0.0, length}, -1, Unateness::Positive});
    edges.push_back({b, a, EdgeKind::NetInv, {-length, 0.0, length}, -1, Unateness::Positive});
  }

  void cell(NodeId a, NodeId b, std::int32_t lut) { edges.push_back({a, b, EdgeKind::Cell, {}, lut, Unateness::Positive}); }

  /// Lut whose delay is `delay` everywhere and slew 0.1.
  std::int32_t constant_lut(double delay) {
    Lut l;
    l.id = "c" + std::to_string(luts.size());
    l.row_axis = {0.0, 1.0};
    l.col_axis = {0.0, 1.0};
    l.delay.assign(4, delay);
    l.slew.assign(4, 0.1);
    luts.push_back(l);
    return static_cast<std::int32_t>(luts.size() - 1);
  }

  CircuitGraph build(const std::string& name = "t") const {
    return CircuitGraph(name, default_feature_schema(), nodes, edges, luts);
  }
};

/// PI -net-> a -cell-> b.
inline CircuitGraph chain3() {
  Builder b;
  const auto pi = b.node(true);
  const auto a = b.node(false, false, true);
  const auto o = b.node(false, true, false, true);
  b.net(pi, a, 1.0);
  b.cell(a, o, b.constant_lut(2.0));
  return b.build("chain3");
}

/// Net-only graph with the given level sizes. Every node above level 0
/// has one predecessor on the level below and, with `skip`, a second one
/// further down half of the time.
inline CircuitGraph layered(const std::vector<int>& sizes, std::uint64_t seed, bool skip = true) {
  Builder b;
  Rng rng(seed);
  std::vector<std::vector<NodeId>> levels;
  for (std::size_t l = 0; l < sizes.size(); ++l) {
    levels.emplace_back();
    for (int i = 0; i < sizes[l]; ++i) levels.back().push_back(b.node(l == 0));
  }
  for (std::size_t l = 1; l < sizes.size(); ++l)
    for (NodeId v : levels[l]) {
      const auto& below = levels[l - 1];
      const NodeId u = below[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(below.size()) - 1))];
      b.net(u, v, rng.uniform(0.01, 0.2));
      if (skip && rng.bernoulli(0.5)) {
        const auto& lower = levels[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(l) - 1))];
        const NodeId w = lower[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(lower.size()) - 1))];
        if (w != u) b.net(w, v, rng.uniform(0.01, 0.2));
      }
    }
  return b.build("layered");
}

/// Generated placed circuit of roughly `n` nodes.
inline CircuitGraph generated(std::uint64_t seed, std::int64_t n) {
  datagen::GenConfig cfg;
  cfg.seed = seed;
  cfg.n_nodes = n;
  return datagen::gen_circuit(cfg, "g" + std::to_string(seed));
}

inline double rel_err(const std::vector<double>& a, const std::vector<double>& b) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double scale = std::max(std::sqrt(na), std::sqrt(nb));
  return scale == 0.0 ? 0.0 : std::sqrt(diff) / scale;
}

using LossFn = std::function<nn::Var<double>(nn::Ctx<double>&)>;

inline double eval_loss(nn::ParamStore<double>& ps, const LossFn& fn) {
  nn::Tape<double> t;
  nn::Ctx<double> c(t, ps);
  return t.value(fn(c))(0, 0);
}

/// Backprop and central-difference gradients of the checked entries of one
/// tensor. `max_entries` > 0 checks that many random entries per tensor.
struct GradientSample {
  std::string path;
  std::vector<double> analytic, numeric;
};

inline std::vector<GradientSample> sample_gradients(nn::ParamStore<double>& ps, const LossFn& fn, double h, int max_entries,
                                                    std::uint64_t seed) {
  ps.zero_grad();
  {
    nn::Tape<double> t;
    nn::Ctx<double> c(t, ps);
    t.backward(fn(c));
  }
  Rng rng(seed);
  std::vector<GradientSample> out;
  for (auto& [path, p] : ps.items()) {
    if (!p.trainable) continue;
    const auto size = p.value.size();
    std::vector<Eigen::Index> idx;
    if (max_entries <= 0 || size <= max_entries) {
      for (Eigen::Index i = 0; i < size; ++i) idx.push_back(i);
    } else {
      for (int k = 0; k < max_entries; ++k) idx.push_back(rng.uniform_int(0, size - 1));
    }
    GradientSample s{path, {}, {}};
    for (auto i : idx) {
      double& w = p.value.data()[i];
      const double w0 = w;
      w = w0 + h;
      const double up = eval_loss(ps, fn);
      w = w0 - h;
      const double down = eval_loss(ps, fn);
      w = w0;
      s.numeric.push_back((up - down) / (2 * h));
      s.analytic.push_back(p.grad.size() ? p.grad.data()[i] : 0.0);
    }
    out.push_back(std::move(s));
  }
  return out;
}

/// Worst relative error (norm over the checked entries of one tensor)
/// between backprop and central differences, over every parameter.
inline double gradient_error(nn::ParamStore<double>& ps, const LossFn& fn, double h = 1e-5, int max_entries = 0,
                             std::uint64_t seed = 3, std::string* worst_path = nullptr) {
  double worst = 0.0;
  for (const auto& s : sample_gradients(ps, fn, h, max_entries, seed)) {
    const double e = rel_err(s.analytic, s.numeric);
    if (e > worst) {
      worst = e;
      if (worst_path) *worst_path = s.path;
    }
  }
  return worst;
}

/// Relative error of the gradient vector made of every checked entry.
inline double pooled_gradient_error(nn::ParamStore<double>& ps, const LossFn& fn, double h, int max_entries, std::uint64_t seed) {
  std::vector<double> a, n;
  for (const auto& s : sample_gradients(ps, fn, h, max_entries, seed)) {
    a.insert(a.end(), s.analytic.begin(), s.analytic.end());
    n.insert(n.end(), s.numeric.begin(), s.numeric.end());
  }
  return rel_err(a, n);
}

inline nn::Mat<double> random_mat(Rng& rng, Eigen::Index r, Eigen::Index c, double scale = 1.0) {
  nn::Mat<double> m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

/// Fills every parameter with N(0, scale^2).
template <class T>
void randomize(nn::ParamStore<T>& ps, std::uint64_t seed, double scale = 0.3) {
  Rng rng(seed);
  for (auto& [path, p] : ps.items())
    for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = static_cast<T>(scale * rng.normal());
}

}  // namespace preroute::testing
