#include "preroute/training.hpp"

#include <chrono>
#include <cmath>

#include <json.hpp>

#include "preroute/error.hpp"
#include "preroute/nn/checkpoint.hpp"
#include "preroute/partition.hpp"

namespace preroute::train {

using nn::Ctx;
using nn::GraphView;
using nn::Index;
using nn::Tape;

namespace {

using json = nlohmann::ordered_json;

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

template <class T>
bool finite(const Mat<T>& m) {
  return m.allFinite();
}

std::vector<SubGraph> pieces(const Sample& s, const TrainConfig& cfg, std::size_t max_size) {
  PartitionOptions opts;
  opts.max_size = max_size;
  opts.pad_levels = cfg.pad_levels;
  opts.split_oversized = true;
  return partition(s.graph, s.schedule, opts);
}

}  // namespace

void validate(const TrainConfig& c) {
  auto bad = [](const std::string& what) { throw InvalidArgument("train config: " + what); };
  if (!(c.lr > 0.0)) bad("lr must be positive");
  if (!(c.beta1 >= 0.0 && c.beta1 < 1.0) || !(c.beta2 >= 0.0 && c.beta2 < 1.0)) bad("betas must lie in [0, 1)");
  if (!(c.adam_eps > 0.0)) bad("adam_eps must be positive");
  if (c.epochs < 1 || c.pretrain_epochs < 1) bad("epochs must be >= 1");
  if (c.lambda_kl < 0.0 || c.lambda_cd < 0.0 || c.lambda_nd < 0.0) bad("loss weights must be non-negative");
  if (c.max_size < 1 || c.pretrain_max_size < 1) bad("partition sizes must be >= 1");
  if (c.pad_levels < 0) bad("pad_levels must be >= 0");
}

std::string train_config_to_json(const TrainConfig& c) {
  const json doc{{"lr", c.lr},
                 {"beta1", c.beta1},
                 {"beta2", c.beta2},
                 {"adam_eps", c.adam_eps},
                 {"pretrain_epochs", c.pretrain_epochs},
                 {"epochs", c.epochs},
                 {"lambda_kl", c.lambda_kl},
                 {"lambda_cd", c.lambda_cd},
                 {"lambda_nd", c.lambda_nd},
                 {"encoder_mode", nn::to_string(c.encoder_mode)},
                 {"seed", c.seed},
                 {"max_size", c.max_size},
                 {"pad_levels", c.pad_levels},
                 {"pretrain_max_size", c.pretrain_max_size},
                 {"hyper", json::parse(nn::hyper_to_json(c.hyper))}};
  return doc.dump(2) + "\n";
}

TrainConfig train_config_from_json(std::string_view text) {
  TrainConfig c;
  try {
    const auto j = json::parse(text.begin(), text.end());
    if (!j.is_object()) throw FormatError("train config must be an object");
    for (const auto& [key, value] : j.items()) {
      if (key == "lr") c.lr = value.get<double>();
      else if (key == "beta1") c.beta1 = value.get<double>();
      else if (key == "beta2") c.beta2 = value.get<double>();
      else if (key == "adam_eps") c.adam_eps = value.get<double>();
      else if (key == "pretrain_epochs") c.pretrain_epochs = value.get<int>();
      else if (key == "epochs") c.epochs = value.get<int>();
      else if (key == "lambda_kl") c.lambda_kl = value.get<double>();
      else if (key == "lambda_cd") c.lambda_cd = value.get<double>();
      else if (key == "lambda_nd") c.lambda_nd = value.get<double>();
      else if (key == "encoder_mode") c.encoder_mode = nn::encoder_mode_from_string(value.get<std::string>());
      else if (key == "seed") c.seed = value.get<std::uint64_t>();
      else if (key == "max_size") c.max_size = value.get<std::size_t>();
      else if (key == "pad_levels") c.pad_levels = value.get<int>();
      else if (key == "pretrain_max_size") c.pretrain_max_size = value.get<std::size_t>();
      else if (key == "hyper") c.hyper = nn::hyper_from_json(value.dump());
      else throw FormatError("train config: unknown key '" + key + "'");
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed train config: ") + e.what());
  }
  validate(c);
  return c;
}

template <class T>
void adam_step(ParamStore<T>& ps, AdamState<T>& state, const TrainConfig& cfg) {
  for (const auto& [path, p] : ps.items())
    if (p.trainable && !finite(p.grad)) throw DivergenceError("non-finite gradient in parameter '" + path + "'");
  ++state.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
  const T step = static_cast<T>(cfg.lr / c1), inv_c2 = static_cast<T>(1.0 / c2), eps = static_cast<T>(cfg.adam_eps);
  for (auto& [path, p] : ps.items()) {
    if (!p.trainable) continue;
    auto [it, fresh] = state.moments.try_emplace(path);
    auto& [m, v] = it->second;
    if (fresh) {
      m = Mat<T>::Zero(p.value.rows(), p.value.cols());
      v = Mat<T>::Zero(p.value.rows(), p.value.cols());
    }
    m = b1 * m + (T(1) - b1) * p.grad;
    v = b2 * v + (T(1) - b2) * p.grad.cwiseAbs2();
    p.value.array() -= step * m.array() / ((v.array() * inv_c2).sqrt() + eps);
  }
  ps.zero_grad();
}

template <class T>
Var<T> loss_ae(Tape<T>& t, Var<T> recon, const Mat<T>& x, Var<T> mu, Var<T> logvar, double lambda_kl) {
  const auto rec = nn::mse(t, recon, x);
  if (lambda_kl == 0.0) return rec;
  return nn::add(t, rec, nn::scale(t, nn::kl_normal(t, mu, logvar), static_cast<T>(lambda_kl)));
}

template <class T>
GnnTargets<T> make_targets(const GraphView<T>& v, const sta::TimingAnnotation& labels) {
  GnnTargets<T> g;
  g.as.resize(static_cast<Eigen::Index>(v.out_nodes.size()), 8);
  for (std::size_t i = 0; i < v.out_nodes.size(); ++i) {
    const auto u = static_cast<std::size_t>(v.node_ref[static_cast<std::size_t>(v.out_nodes[i])]);
    if (u >= labels.at.size()) throw InvalidArgument("labels are missing node " + std::to_string(u));
    for (std::size_t c = 0; c < 4; ++c) {
      g.as(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = static_cast<T>(labels.at[u][c]);
      g.as(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(4 + c)) = static_cast<T>(labels.slew[u][c]);
    }
  }
  auto edges = [&](const std::vector<Index>& out, const std::vector<EdgeId>& ref, Mat<T>& m) {
    m.resize(static_cast<Eigen::Index>(out.size()), 4);
    for (std::size_t i = 0; i < out.size(); ++i) {
      const auto e = static_cast<std::size_t>(ref[static_cast<std::size_t>(out[i])]);
      if (e >= labels.edge_delay.size()) throw InvalidArgument("labels are missing edge " + std::to_string(e));
      for (std::size_t c = 0; c < 4; ++c)
        m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = static_cast<T>(labels.edge_delay[e][c]);
    }
  };
  edges(v.out_cell, v.cell_ref, g.cd);
  edges(v.out_net, v.net_ref, g.nd);
  return g;
}

template <class T>
Var<T> loss_gnn(Tape<T>& t, const nn::GnnOut<T>& out, const GnnTargets<T>& targets, double lambda_cd, double lambda_nd) {
  if (!out.as.valid()) return t.constant(Mat<T>::Zero(1, 1));
  auto loss = nn::mse(t, out.as, targets.as);
  if (out.cd.valid() && lambda_cd != 0.0)
    loss = nn::add(t, loss, nn::scale(t, nn::mse(t, out.cd, targets.cd), static_cast<T>(lambda_cd)));
  if (out.nd.valid() && lambda_nd != 0.0)
    loss = nn::add(t, loss, nn::scale(t, nn::mse(t, out.nd, targets.nd), static_cast<T>(lambda_nd)));
  return loss;
}

Sample make_sample(std::string name, std::string split, CircuitGraph graph, sta::TimingAnnotation labels) {
  Sample s{std::move(name), std::move(split), std::move(graph), {}, std::move(labels)};
  s.schedule = topo_levels(s.graph);
  return s;
}

std::vector<Sample> load_samples(const datagen::CorpusManifest& corpus, std::string_view split) {
  std::vector<Sample> out;
  for (const auto& e : corpus.entries) {
    if (split != "all" && e.split != split) continue;
    auto g = load_circuit(corpus.directory + "/" + e.circuit_path);
    auto labels = sta::load_labels(g, corpus.directory + "/" + e.labels_path);
    out.push_back(make_sample(e.name, e.split, std::move(g), std::move(labels)));
  }
  return out;
}

nn::Hyper model_hyper(const TrainConfig& cfg) {
  nn::Hyper h = cfg.hyper;
  h.use_encoder = cfg.encoder_mode != nn::EncoderMode::None;
  return h;
}

template <class T>
TrainResult<T> pretrain(const std::vector<Sample>& samples, const TrainConfig& cfg, const Logger& log) {
  validate(cfg);
  if (samples.empty()) throw InvalidArgument("pretrain: no circuits");
  const auto& h = cfg.hyper;
  TrainResult<T> r;
  nn::declare_encoder(r.params, h, cfg.seed);
  nn::declare_decoder(r.params, h, cfg.seed);

  struct Piece {
    GraphView<T> view;
    std::vector<Index> core;
  };
  std::vector<Piece> data;
  for (const auto& s : samples)
    for (const auto& sub : pieces(s, cfg, cfg.pretrain_max_size)) {
      auto v = nn::make_ae_view<T>(sub, h);
      auto core = v.out_nodes;
      data.push_back({std::move(v), std::move(core)});
    }

  AdamState<T> adam;
  Rng noise(Rng::derive(cfg.seed, 11));
  for (int epoch = 0; epoch < cfg.pretrain_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    double total = 0.0, rec = 0.0, kl = 0.0;
    for (const auto& p : data) {
      Tape<T> t;
      Ctx<T> c(t, r.params);
      const auto enc = nn::encode(c, h, p.view, &noise);
      const auto recon = nn::decode(c, h, p.view, enc.z);
      const std::span<const Index> core(p.core);
      Mat<T> x(static_cast<Eigen::Index>(p.core.size()), p.view.x.cols());
      for (std::size_t i = 0; i < p.core.size(); ++i) x.row(static_cast<Eigen::Index>(i)) = p.view.x.row(p.core[i]);
      const auto recon_core = nn::gather_rows(t, recon, core);
      const auto mu = nn::gather_rows(t, enc.mu, core), lv = nn::gather_rows(t, enc.logvar, core);
      const auto loss = loss_ae(t, recon_core, x, mu, lv, cfg.lambda_kl);
      const double value = static_cast<double>(t.value(loss)(0, 0));
      if (!std::isfinite(value)) throw DivergenceError("pretrain: non-finite loss in epoch " + std::to_string(epoch));
      total += value;
      rec += static_cast<double>(t.value(nn::mse(t, recon_core, x))(0, 0));
      kl += static_cast<double>(t.value(nn::kl_normal(t, mu, lv))(0, 0));
      t.backward(loss);
      try {
        adam_step(r.params, adam, cfg);
      } catch (const DivergenceError& e) {
        throw DivergenceError("pretrain epoch " + std::to_string(epoch) + ": " + e.what());
      }
    }
    const double n = static_cast<double>(data.size());
    EpochLog e{epoch, total / n, {{"recon", rec / n}, {"kl", kl / n}}, seconds_since(t0)};
    if (log) log(e);
    r.log.push_back(std::move(e));
  }
  return r;
}

template <class T>
void drop_decoder(ParamStore<T>& ps) {
  auto& items = ps.items();
  for (auto it = items.begin(); it != items.end();) {
    if (it->first.rfind("decoder.", 0) == 0) it = items.erase(it);
    else ++it;
  }
}

template <class T>
double reconstruction_mse(ParamStore<T>& ps, const nn::Hyper& h, const CircuitGraph& graph) {
  const auto schedule = topo_levels(graph);
  const auto v = nn::make_view<T>(graph, schedule, h);
  const T slope = static_cast<T>(h.leaky_slope);
  Mat<T> z = nn::encoder_latents(ps, h, graph, schedule).first;
  Mat<T> f;
  {
    Tape<T> t;
    Ctx<T> c(t, ps);
    f = t.value(nn::affine(c, "decoder.lift", t.constant(std::move(z))));
  }
  for (int l = 0; l < h.ae_dec_layers; ++l) {
    Tape<T> t;
    Ctx<T> c(t, ps);
    f = t.value(nn::ae_layer(c, "decoder.layer." + std::to_string(l), t.constant(std::move(f)), v.ae, h.mlp_depth, slope));
  }
  Tape<T> t;
  Ctx<T> c(t, ps);
  const Mat<T> x = t.value(nn::affine(c, "decoder.out", t.constant(std::move(f))));
  return (x.template cast<double>() - v.x.template cast<double>()).squaredNorm() / static_cast<double>(x.size());
}

template <class T>
TrainResult<T> train(const std::vector<Sample>& samples, const ParamStore<T>* encoder, const TrainConfig& cfg,
                     const EpochHook<T>& hook) {
  validate(cfg);
  if (samples.empty()) throw InvalidArgument("train: no circuits");
  const auto mode = cfg.encoder_mode;
  const auto h = model_hyper(cfg);
  TrainResult<T> r;
  if (mode != nn::EncoderMode::None) {
    if (!encoder) throw InvalidArgument("train: encoder mode '" + std::string(nn::to_string(mode)) + "' needs a pre-trained encoder");
    for (const auto& [path, p] : encoder->items()) {
      if (path.rfind("encoder.", 0) != 0) continue;
      r.params.add(path, p.value.rows(), p.value.cols()).value = p.value;
    }
    nn::ParamStore<T> expect;
    nn::declare_encoder(expect, h, 0);
    for (const auto& [path, p] : expect.items()) {
      if (!r.params.contains(path)) throw InvalidArgument("train: encoder lacks parameter '" + path + "'");
      const auto& got = r.params.at(path).value;
      if (got.rows() != p.value.rows() || got.cols() != p.value.cols())
        throw InvalidArgument("train: encoder parameter '" + path + "' has the wrong shape");
    }
    r.params.set_trainable("encoder.", mode == nn::EncoderMode::Finetune);
  }
  nn::declare_gnn(r.params, h, cfg.seed);

  struct Piece {
    GraphView<T> view;
    GnnTargets<T> targets;
  };
  struct Circuit {
    std::vector<Piece> pieces;
    Mat<T> mu, g;
  };
  std::vector<Circuit> data;
  for (const auto& s : samples) {
    Circuit c;
    for (const auto& sub : pieces(s, cfg, cfg.max_size)) {
      auto v = nn::make_view<T>(sub, h);
      auto tg = make_targets(v, s.labels);
      c.pieces.push_back({std::move(v), std::move(tg)});
    }
    if (mode == nn::EncoderMode::Frozen) std::tie(c.mu, c.g) = nn::encoder_latents(r.params, h, s.graph, s.schedule);
    data.push_back(std::move(c));
  }

  AdamState<T> adam;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    double total = 0.0, l_as = 0.0, l_cd = 0.0, l_nd = 0.0;
    std::size_t steps = 0;
    for (std::size_t ci = 0; ci < data.size(); ++ci) {
      const auto n = static_cast<Eigen::Index>(samples[ci].graph.num_nodes());
      nn::Carry<T> carry{Mat<T>::Zero(n, h.hidden), Mat<T>::Zero(n, h.hidden)};
      for (const auto& p : data[ci].pieces) {
        const auto& v = p.view;
        if (v.out_nodes.empty()) continue;
        Tape<T> t;
        Ctx<T> c(t, r.params);
        Var<T> latent, emb;
        if (mode == nn::EncoderMode::Frozen) {
          latent = t.constant(nn::rows_for(data[ci].mu, v.node_ref));
          emb = t.constant(data[ci].g);
        } else if (mode == nn::EncoderMode::Finetune) {
          const auto enc = nn::encode(c, h, v, nullptr);
          latent = enc.mu;
          emb = enc.graph;
        }
        const auto out = nn::forward(c, h, v, latent, emb, &carry);
        const auto loss = loss_gnn(t, out, p.targets, cfg.lambda_cd, cfg.lambda_nd);
        const double value = static_cast<double>(t.value(loss)(0, 0));
        if (!std::isfinite(value))
          throw DivergenceError("train: non-finite loss in epoch " + std::to_string(epoch) + " on '" + samples[ci].name + "'");
        total += value;
        l_as += static_cast<double>(t.value(nn::mse(t, out.as, p.targets.as))(0, 0));
        if (out.cd.valid()) l_cd += static_cast<double>(t.value(nn::mse(t, out.cd, p.targets.cd))(0, 0));
        if (out.nd.valid()) l_nd += static_cast<double>(t.value(nn::mse(t, out.nd, p.targets.nd))(0, 0));
        ++steps;
        const auto& f = t.value(out.f_out);
        const auto& at = t.value(out.at);
        for (std::size_t i = 0; i < v.out_nodes.size(); ++i) {
          const NodeId u = v.node_ref[static_cast<std::size_t>(v.out_nodes[i])];
          carry.f.row(u) = f.row(static_cast<Eigen::Index>(i));
          carry.at.row(u) = at.row(static_cast<Eigen::Index>(i));
        }
        t.backward(loss);
        try {
          adam_step(r.params, adam, cfg);
        } catch (const DivergenceError& e) {
          throw DivergenceError("train epoch " + std::to_string(epoch) + ": " + e.what());
        }
      }
    }
    const double k = static_cast<double>(std::max<std::size_t>(steps, 1));
    EpochLog e{epoch, total / k, {{"as", l_as / k}, {"cd", l_cd / k}, {"nd", l_nd / k}}, seconds_since(t0)};
    if (hook) hook(e, r.params);
    r.log.push_back(std::move(e));
  }
  return r;
}

template <class T>
metrics::CircuitReport evaluate(ParamStore<T>& ps, const nn::Hyper& h, const Sample& sample, std::size_t max_size) {
  const auto p = nn::predict(ps, h, sample.graph, sample.schedule, max_size);
  auto rep = metrics::evaluate_circuit(sample.name, sample.graph, sample.schedule, sample.labels, p.as, p.edge_delay);
  rep.split = sample.split;
  return rep;
}

#define PREROUTE_TRAIN_INSTANTIATE(T)                                                                                  \
  template void adam_step(ParamStore<T>&, AdamState<T>&, const TrainConfig&);                                          \
  template Var<T> loss_ae(Tape<T>&, Var<T>, const Mat<T>&, Var<T>, Var<T>, double);                                    \
  template GnnTargets<T> make_targets(const GraphView<T>&, const sta::TimingAnnotation&);                              \
  template Var<T> loss_gnn(Tape<T>&, const nn::GnnOut<T>&, const GnnTargets<T>&, double, double);                      \
  template TrainResult<T> pretrain<T>(const std::vector<Sample>&, const TrainConfig&, const Logger&);                  \
  template void drop_decoder(ParamStore<T>&);                                                                          \
  template double reconstruction_mse(ParamStore<T>&, const nn::Hyper&, const CircuitGraph&);                           \
  template TrainResult<T> train(const std::vector<Sample>&, const ParamStore<T>*, const TrainConfig&, const EpochHook<T>&); \
  template metrics::CircuitReport evaluate(ParamStore<T>&, const nn::Hyper&, const Sample&, std::size_t);

PREROUTE_TRAIN_INSTANTIATE(float)
PREROUTE_TRAIN_INSTANTIATE(double)

#undef PREROUTE_TRAIN_INSTANTIATE

}  // namespace preroute::train
