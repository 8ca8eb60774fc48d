#include <doctest.h>

#include <algorithm>
#include <filesystem>

#include "preroute/datagen.hpp"
#include "preroute/error.hpp"
#include "preroute/nn/checkpoint.hpp"
#include "preroute/nn/model.hpp"
#include "preroute/training.hpp"
#include "support.hpp"

using namespace preroute;
using namespace preroute::nn;
using testing::random_mat;

namespace {

Hyper small_hyper(bool encoder = true) {
  Hyper h;
  h.hidden = 8;
  h.gcn_layers = 2;
  h.ae_hidden = 6;
  h.ae_enc_layers = 2;
  h.ae_dec_layers = 2;
  h.latent_dim = 3;
  h.heads = 2;
  h.d_k = 3;
  h.d_v = 2;
  h.n_freq = 3;
  h.use_encoder = encoder;
  return h;
}

ParamStore<double> model_params(const Hyper& h, std::uint64_t seed, double scale = 0.3) {
  ParamStore<double> ps;
  if (h.use_encoder) {
    declare_encoder(ps, h, seed);
    declare_decoder(ps, h, seed);
  }
  declare_gnn(ps, h, seed);
  // Random values everywhere so that the zero-started update layers take part.
  testing::randomize(ps, seed + 1, scale);
  return ps;
}

/// Hidden AT of every view node.
Mat<double> at_by_node(ParamStore<double>& ps, const Hyper& h, const GraphView<double>& v, const Mat<double>& f) {
  Tape<double> t;
  Ctx<double> c(t, ps);
  const auto r = at_propagation(c, h, v, t.constant(f), static_cast<const Carry<double>*>(nullptr));
  return t.value(gather_rows_multi<double>(t, r.parts, r.where));
}

}  // namespace

TEST_CASE("forward output shapes") {
  const auto g = testing::generated(3, 120);
  const auto s = topo_levels(g);
  for (bool enc : {true, false}) {
    CAPTURE(enc);
    const auto h = small_hyper(enc);
    auto ps = model_params(h, 1);
    const auto v = make_view<double>(g, s, h);
    Tape<double> t;
    Ctx<double> c(t, ps);
    Var<double> latent, emb;
    if (enc) {
      const auto e = encode(c, h, v, nullptr);
      CHECK(t.value(e.mu).rows() == v.n);
      CHECK(t.value(e.mu).cols() == h.latent_dim);
      CHECK(t.value(e.graph).rows() == 1);
      CHECK(t.value(decode(c, h, v, e.z)).cols() == h.node_dim);
      latent = e.mu;
      emb = e.graph;
    }
    const auto out = forward(c, h, v, latent, emb, static_cast<const Carry<double>*>(nullptr));
    std::size_t cells = 0, nets = 0;
    for (const auto& e : g.edges()) {
      cells += e.kind == EdgeKind::Cell;
      nets += e.kind == EdgeKind::Net;
    }
    CHECK(t.value(out.as).rows() == static_cast<Eigen::Index>(g.num_nodes()));
    CHECK(t.value(out.as).cols() == 8);
    CHECK(t.value(out.cd).rows() == static_cast<Eigen::Index>(cells));
    CHECK(t.value(out.cd).cols() == 4);
    CHECK(t.value(out.nd).rows() == static_cast<Eigen::Index>(nets));
    CHECK(t.value(out.nd).cols() == 4);
    CHECK(t.value(out.f).cols() == h.hidden);
  }
}

TEST_CASE("dropping the encoder shrinks the input by two latent blocks") {
  const auto with = small_hyper(true), without = small_hyper(false);
  CHECK(with.input_dim() - without.input_dim() == 2 * with.latent_dim);
  CHECK(without.input_dim() == without.node_dim + 2 * without.n_freq + 1);
  ParamStore<double> a, b;
  declare_gnn(a, with, 1);
  declare_gnn(b, without, 1);
  CHECK(a.at("gnn.lift.w").value.rows() == with.input_dim());
  CHECK(b.at("gnn.lift.w").value.rows() == without.input_dim());
  for (const auto& [path, p] : b.items()) CHECK(path.rfind("gnn.", 0) == 0);
}

TEST_CASE("encoder pooling and KL") {
  const auto g = testing::generated(4, 80);
  const auto h = small_hyper();
  auto ps = model_params(h, 2);
  ps.at("encoder.mu.w").value.setZero();
  ps.at("encoder.mu.b").value << 0.5, -1.0, 2.0;
  ps.at("encoder.logvar.w").value.setZero();
  ps.at("encoder.logvar.b").value.setZero();
  const auto v = make_view<double>(g, topo_levels(g), h);
  Tape<double> t;
  Ctx<double> c(t, ps);
  const auto e = encode(c, h, v, nullptr);
  const Mat<double> graph = t.value(e.graph);
  CHECK(graph(0, 0) == 0.5);
  CHECK(graph(0, 1) == -1.0);
  CHECK(graph(0, 2) == 2.0);
  ps.at("encoder.mu.b").value.setZero();
  Tape<double> t2;
  Ctx<double> c2(t2, ps);
  const auto e2 = encode(c2, h, v, nullptr);
  CHECK(t2.value(kl_normal(t2, e2.mu, e2.logvar))(0, 0) == 0.0);
}

TEST_CASE("auto-encoder loss gradient") {
  const auto g = testing::generated(5, 40);
  const auto h = small_hyper();
  auto ps = model_params(h, 3);
  const auto v = make_view<double>(g, topo_levels(g), h);
  const testing::LossFn fn = [&](Ctx<double>& c) {
    Rng noise(11);  // same draw on every evaluation
    const auto e = encode(c, h, v, &noise);
    return train::loss_ae(c.tape(), decode(c, h, v, e.z), v.x, e.mu, e.logvar, 0.1);
  };
  std::string worst;
  const double err = testing::gradient_error(ps, fn, 1e-5, 6, 7, &worst);
  CAPTURE(worst);
  CHECK(err < 1e-4);
}

TEST_CASE("end-to-end gradient on a 50-node circuit") {
  const auto g = testing::generated(6, 50);
  const auto s = topo_levels(g);
  const auto labels = datagen::label_circuit(g, datagen::LabelConfig{}, -0.5);
  const auto h = small_hyper();
  auto ps = model_params(h, 4);
  const auto v = make_view<double>(g, s, h);
  const auto targets = train::make_targets(v, labels);
  const testing::LossFn fn = [&](Ctx<double>& c) {
    const auto e = encode(c, h, v, nullptr);
    const auto out = forward(c, h, v, e.mu, e.graph, static_cast<const Carry<double>*>(nullptr));
    return train::loss_gnn(c.tape(), out, targets, 1.0, 1.0);
  };
  // Pooled over five random entries of every tensor: some entries have
  // gradients near the round-off floor of the loss.
  CHECK(testing::pooled_gradient_error(ps, fn, 1e-5, 5, 9) < 1e-3);
}

TEST_CASE("arrival propagation") {
  const auto g = testing::generated(7, 200);
  const auto s = topo_levels(g);
  const auto h = small_hyper(false);
  auto ps = model_params(h, 5);
  const auto v = make_view<double>(g, s, h);
  Rng rng(12);
  const auto f = random_mat(rng, v.n, h.hidden);
  const auto base = at_by_node(ps, h, v, f);
  REQUIRE(s.num_levels() >= 4);

  SUBCASE("a node depends only on strictly earlier levels") {
    for (std::int32_t lvl = 1; lvl < static_cast<std::int32_t>(s.num_levels()); lvl += 2) {
      const NodeId victim = s.levels[static_cast<std::size_t>(lvl)].front();
      auto g2 = f;
      g2.row(victim).array() += 1.0;
      const auto moved = at_by_node(ps, h, v, g2);
      CAPTURE(lvl);
      CHECK(moved.row(victim) != base.row(victim));
      for (Index u = 0; u < v.n; ++u)
        if (u != victim && s.node_level[static_cast<std::size_t>(u)] <= lvl) CHECK(moved.row(u) == base.row(u));
    }
  }
  SUBCASE("level-0 arrival is an affine of the node's own features") {
    const auto& w = ps.at("gnn.at_init.w").value;
    const auto& b = ps.at("gnn.at_init.b").value;
    for (NodeId u : s.levels[0]) CHECK((base.row(u) - (f.row(u) * w + b)).cwiseAbs().maxCoeff() < 1e-12);
    auto g2 = f;
    for (Index u = 0; u < v.n; ++u)
      if (s.node_level[static_cast<std::size_t>(u)] > 0) g2.row(u).setConstant(3.0);
    const auto moved = at_by_node(ps, h, v, g2);
    for (NodeId u : s.levels[0]) CHECK(moved.row(u) == base.row(u));
  }
  SUBCASE("intra-level order does not matter") {
    auto w = v;
    for (auto& b : w.blocks) {
      const auto k = static_cast<Index>(b.nodes.size());
      std::reverse(b.nodes.begin(), b.nodes.end());
      for (auto& d : b.dst_local) d = k - 1 - d;
    }
    CHECK((at_by_node(ps, h, w, f) - base).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("partitioned inference equals the whole-graph pass") {
  const auto g = testing::generated(8, 700);
  const auto s = topo_levels(g);
  for (bool enc : {true, false}) {
    CAPTURE(enc);
    const auto h = small_hyper(enc);
    auto ps = model_params(h, 6, 0.2);
    const auto whole = predict(ps, h, g, s, g.num_nodes() + 1);
    for (std::size_t m : {40u, 150u}) {
      CAPTURE(m);
      const auto parts = partition(g, s, PartitionOptions{m, h.gcn_layers, true});
      CHECK(parts.size() > 1);
      const auto pieces = predict_partitioned(ps, h, g, s, parts);
      CHECK((pieces.as - whole.as).cwiseAbs().maxCoeff() < 1e-6);
      CHECK((pieces.edge_delay - whole.edge_delay).cwiseAbs().maxCoeff() < 1e-6);
      CHECK((pieces.hidden_at - whole.hidden_at).cwiseAbs().maxCoeff() < 1e-6);
    }
  }
}

TEST_CASE("single precision tracks double precision") {
  const auto g = testing::generated(9, 300);
  const auto s = topo_levels(g);
  const auto h = small_hyper();
  auto pd = model_params(h, 7, 0.2);
  ParamStore<float> pf;
  for (const auto& [path, p] : pd.items()) pf.add(path, p.value.rows(), p.value.cols()).value = p.value.cast<float>();
  const auto a = predict(pd, h, g, s);
  const auto b = predict(pf, h, g, s);
  CHECK((a.as - b.as).cwiseAbs().maxCoeff() < 1e-3 * std::max(1.0, a.as.cwiseAbs().maxCoeff()));
}

TEST_CASE("checkpoint round trip") {
  const auto h = small_hyper();
  Checkpoint<double> ck{"model", h, EncoderMode::Finetune, model_params(h, 8)};
  ck.params.at("gnn.lift.b").value(0, 0) = 0.1 + 0.2;  // not a short decimal
  const auto text = serialize_checkpoint(ck);
  const auto back = parse_checkpoint<double>(text);
  CHECK(back.kind == "model");
  CHECK(back.hyper == h);
  CHECK(back.encoder_mode == EncoderMode::Finetune);
  REQUIRE(back.params.items().size() == ck.params.items().size());
  for (const auto& [path, p] : ck.params.items()) {
    CAPTURE(path);
    CHECK(back.params.at(path).value == p.value);
  }
  CHECK(serialize_checkpoint(back) == text);
  CHECK(hyper_from_json(hyper_to_json(h)) == h);

  const auto file = (std::filesystem::temp_directory_path() / "preroute_ckpt_test.json").string();
  save_checkpoint(ck, file);
  CHECK(serialize_checkpoint(load_checkpoint<double>(file)) == text);
  std::filesystem::remove(file);

  SUBCASE("malformed documents") {
    auto bad = [&](const std::string& from, const std::string& to) {
      auto s = text;
      const auto at = s.find(from);
      REQUIRE(at != std::string::npos);
      return s.replace(at, from.size(), to);
    };
    CHECK_THROWS_AS(parse_checkpoint<double>(bad("\"version\":1", "\"version\":7")), FormatError);
    CHECK_THROWS_AS(parse_checkpoint<double>(bad("\"shape\":[1,8]", "\"shape\":[1,9]")), FormatError);
    CHECK_THROWS_AS(parse_checkpoint<double>("{}"), FormatError);
    CHECK_THROWS_AS(parse_checkpoint<double>("not json"), FormatError);
  }
}
