#include <doctest.h>

#include <cmath>

#include "preroute/datagen.hpp"
#include "preroute/error.hpp"
#include "preroute/nn/checkpoint.hpp"
#include "preroute/training.hpp"
#include "support.hpp"

using namespace preroute;
using namespace preroute::train;
using nn::Ctx;
using nn::Tape;
using testing::random_mat;

namespace {

nn::Hyper tiny_hyper() {
  nn::Hyper h;
  h.hidden = 8;
  h.gcn_layers = 2;
  h.ae_hidden = 8;
  h.ae_enc_layers = 2;
  h.ae_dec_layers = 2;
  h.latent_dim = 3;
  h.heads = 2;
  h.d_k = 3;
  h.d_v = 3;
  h.n_freq = 3;
  return h;
}

TrainConfig tiny_config() {
  TrainConfig cfg;
  cfg.hyper = tiny_hyper();
  cfg.lr = 3e-3;
  cfg.pretrain_epochs = 3;
  cfg.epochs = 3;
  cfg.seed = 5;
  cfg.max_size = 64;
  cfg.pad_levels = 2;
  cfg.pretrain_max_size = 100;
  return cfg;
}

std::vector<Sample> samples(std::uint64_t seed, int count, std::int64_t nodes) {
  std::vector<Sample> out;
  for (int i = 0; i < count; ++i) {
    auto g = testing::generated(seed + static_cast<std::uint64_t>(i), nodes);
    auto labels = datagen::label_circuit(g, datagen::LabelConfig{}, -0.5);
    out.push_back(make_sample("c" + std::to_string(i), "train", std::move(g), std::move(labels)));
  }
  return out;
}

double mean_abs(const nn::Mat<double>& m) { return m.cwiseAbs().mean(); }

}  // namespace

TEST_CASE("auto-encoder loss") {
  Rng rng(1);
  const auto x = random_mat(rng, 5, 3), recon = random_mat(rng, 5, 3);
  const auto mu = random_mat(rng, 5, 2), lv = random_mat(rng, 5, 2, 0.5);
  Tape<double> t;
  auto value = [&](const nn::Mat<double>& r, const nn::Mat<double>& m, const nn::Mat<double>& l, double lambda) {
    return t.value(loss_ae(t, t.constant(r), x, t.constant(m), t.constant(l), lambda))(0, 0);
  };
  CHECK(value(x, nn::Mat<double>::Zero(5, 2), nn::Mat<double>::Zero(5, 2), 0.7) == 0.0);

  double mse = 0.0, kl = 0.0;
  for (int i = 0; i < 5; ++i) {
    for (int j = 0; j < 3; ++j) mse += (recon(i, j) - x(i, j)) * (recon(i, j) - x(i, j));
    for (int j = 0; j < 2; ++j) kl += 0.5 * (mu(i, j) * mu(i, j) + std::exp(lv(i, j)) - 1.0 - lv(i, j));
  }
  mse /= 15.0;
  kl /= 5.0;
  CHECK(std::abs(value(recon, mu, lv, 0.0) - mse) < 1e-12);
  CHECK(std::abs(value(recon, mu, lv, 0.3) - (mse + 0.3 * kl)) < 1e-12);
}

TEST_CASE("timing loss") {
  Rng rng(2);
  GnnTargets<double> y{random_mat(rng, 6, 8), random_mat(rng, 4, 4), random_mat(rng, 5, 4)};
  const auto pas = random_mat(rng, 6, 8), pcd = random_mat(rng, 4, 4), pnd = random_mat(rng, 5, 4);
  Tape<double> t;
  auto value = [&](const nn::Mat<double>& a, const nn::Mat<double>& c, const nn::Mat<double>& d, double lc, double ln) {
    nn::GnnOut<double> out;
    out.as = t.constant(a);
    out.cd = t.constant(c);
    out.nd = t.constant(d);
    return t.value(loss_gnn(t, out, y, lc, ln))(0, 0);
  };
  auto scalar_mse = [](const nn::Mat<double>& p, const nn::Mat<double>& q) {
    double s = 0.0;
    for (Eigen::Index i = 0; i < p.rows(); ++i)
      for (Eigen::Index j = 0; j < p.cols(); ++j) s += (p(i, j) - q(i, j)) * (p(i, j) - q(i, j));
    return s / static_cast<double>(p.size());
  };
  CHECK(value(y.as, y.cd, y.nd, 1.0, 1.0) == 0.0);
  CHECK(std::abs(value(pas, pcd, pnd, 0.0, 0.0) - scalar_mse(pas, y.as)) < 1e-12);
  const double expect = scalar_mse(pas, y.as) + 0.5 * scalar_mse(pcd, y.cd) + 2.0 * scalar_mse(pnd, y.nd);
  CHECK(std::abs(value(pas, pcd, pnd, 0.5, 2.0) - expect) < 1e-12);
}

TEST_CASE("adam") {
  TrainConfig cfg;
  cfg.lr = 0.01;
  nn::ParamStore<double> ps;
  ps.add("w", 1, 5).value.setOnes();
  AdamState<double> state;

  SUBCASE("first step moves every entry by about lr") {
    ps.at("w").grad = (nn::Mat<double>(1, 5) << 3.0, -0.2, 1e-3, 50.0, -7.0).finished();
    adam_step(ps, state, cfg);
    const auto& w = ps.at("w").value;
    for (Eigen::Index i = 0; i < 5; ++i) CHECK(std::abs(std::abs(w(0, i) - 1.0) - cfg.lr) < cfg.lr * 1e-4);
    CHECK(w(0, 0) < 1.0);
    CHECK(w(0, 1) > 1.0);
    CHECK(ps.at("w").grad.isZero());
  }
  SUBCASE("zero gradient leaves parameters unchanged") {
    ps.at("w").grad.setZero();
    adam_step(ps, state, cfg);
    CHECK(ps.at("w").value.isOnes());
  }
  SUBCASE("minimising the squared norm decreases monotonically") {
    cfg.lr = 5e-3;
    double prev = 1.0;
    for (int step = 0; step < 100; ++step) {
      ps.at("w").grad = 2.0 * ps.at("w").value;
      adam_step(ps, state, cfg);
      const double now = ps.at("w").value(0, 0);
      CHECK(now < prev);
      CHECK(now > 0.0);
      prev = now;
    }
    CHECK(state.step == 100);
  }
  SUBCASE("non-finite gradients name the parameter and update nothing") {
    ps.add("v", 1, 1).value.setOnes();
    ps.at("v").grad = nn::Mat<double>::Ones(1, 1);
    ps.at("w").grad = nn::Mat<double>::Constant(1, 5, std::nan(""));
    CHECK_THROWS_WITH_AS(adam_step(ps, state, cfg), doctest::Contains("'w'"), DivergenceError);
    CHECK(ps.at("v").value(0, 0) == 1.0);
  }
  SUBCASE("frozen parameters stay put") {
    ps.at("w").grad.setOnes();
    ps.at("w").trainable = false;
    adam_step(ps, state, cfg);
    CHECK(ps.at("w").value.isOnes());
  }
}

TEST_CASE("train config") {
  TrainConfig c;
  c.lr = 1e-3;
  c.encoder_mode = nn::EncoderMode::None;
  c.hyper.hidden = 32;
  c.pretrain_max_size = 500;
  const auto back = train_config_from_json(train_config_to_json(c));
  CHECK(train_config_to_json(back) == train_config_to_json(c));
  CHECK(train_config_from_json(R"({"epochs": 7})").epochs == 7);
  CHECK_THROWS_WITH_AS(train_config_from_json(R"({"epoch": 7})"), doctest::Contains("epoch"), FormatError);
  CHECK_THROWS_AS(train_config_from_json(R"({"lr": -1})"), InvalidArgument);
  CHECK_THROWS_AS(train_config_from_json(R"({"encoder_mode": "sometimes"})"), InvalidArgument);
  CHECK_THROWS_AS(train_config_from_json("[]"), FormatError);
  CHECK(model_hyper(back).use_encoder == false);
}

TEST_CASE("padding labels do not reach the loss") {
  const auto s = samples(30, 1, 400)[0];
  auto cfg = tiny_config();
  const auto parts = partition(s.graph, s.schedule, PartitionOptions{64, cfg.hyper.gcn_layers, true});
  REQUIRE(parts.size() > 2);
  const auto& piece = parts[parts.size() / 2];
  auto garbage = s.labels;
  std::size_t padded = 0;
  for (std::size_t i = 0; i < piece.local_to_parent.size(); ++i) {
    if (piece.core_mask[i]) continue;
    const auto u = static_cast<std::size_t>(piece.local_to_parent[i]);
    garbage.at[u] = {1e6, -1e6, 1e6, -1e6};
    garbage.slew[u] = {9, 9, 9, 9};
    for (EdgeId e : s.graph.in_edges(piece.local_to_parent[i])) garbage.edge_delay[static_cast<std::size_t>(e)] = {7, 7, 7, 7};
    ++padded;
  }
  REQUIRE(padded > 0);

  const auto h = model_hyper(cfg);
  nn::ParamStore<double> ps;
  nn::declare_encoder(ps, h, 1);
  nn::declare_gnn(ps, h, 1);
  testing::randomize(ps, 2, 0.3);
  const auto view = nn::make_view<double>(piece, h);
  const auto [mu, g] = nn::encoder_latents(ps, h, s.graph, s.schedule);
  nn::Carry<double> carry{nn::Mat<double>::Zero(static_cast<Eigen::Index>(s.graph.num_nodes()), h.hidden),
                          nn::Mat<double>::Zero(static_cast<Eigen::Index>(s.graph.num_nodes()), h.hidden)};
  auto run = [&](const sta::TimingAnnotation& labels) {
    ps.zero_grad();
    const auto targets = make_targets(view, labels);
    Tape<double> t;
    Ctx<double> c(t, ps);
    const auto out = nn::forward(c, h, view, t.constant(nn::rows_for(mu, view.node_ref)), t.constant(g), &carry);
    const auto loss = loss_gnn(t, out, targets, 1.0, 1.0);
    t.backward(loss);
    std::vector<nn::Mat<double>> grads;
    for (const auto& [path, p] : ps.items()) grads.push_back(p.grad);
    return std::pair{t.value(loss)(0, 0), grads};
  };
  const auto clean = run(s.labels);
  const auto dirty = run(garbage);
  CHECK(clean.first == dirty.first);
  CHECK(clean.second == dirty.second);
}

TEST_CASE("pre-training") {
  const auto data = samples(40, 3, 150);
  const auto held_out = testing::generated(99, 150);
  auto cfg = tiny_config();

  SUBCASE("same seed, same bytes") {
    const auto a = pretrain<double>(data, cfg);
    const auto b = pretrain<double>(data, cfg);
    nn::Checkpoint<double> ca{"encoder", cfg.hyper, cfg.encoder_mode, a.params}, cb{"encoder", cfg.hyper, cfg.encoder_mode, b.params};
    CHECK(nn::serialize_checkpoint(ca) == nn::serialize_checkpoint(cb));
    REQUIRE(a.log.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) CHECK(a.log[i].loss == b.log[i].loss);
    auto dropped = a.params;
    drop_decoder(dropped);
    for (const auto& [path, p] : dropped.items()) CHECK(path.rfind("decoder.", 0) != 0);
    CHECK(dropped.contains("encoder.mu.w"));
  }
  SUBCASE("reconstruction of a held-out circuit at least halves") {
    nn::ParamStore<double> fresh;
    nn::declare_encoder(fresh, cfg.hyper, cfg.seed);
    nn::declare_decoder(fresh, cfg.hyper, cfg.seed);
    const double before = reconstruction_mse(fresh, cfg.hyper, held_out);
    cfg.pretrain_epochs = 40;
    auto r = pretrain<double>(data, cfg);
    const double after = reconstruction_mse(r.params, cfg.hyper, held_out);
    CAPTURE(before);
    CAPTURE(after);
    CHECK(after <= 0.5 * before);
  }
  SUBCASE("a large KL weight pulls the latents to zero") {
    cfg.pretrain_epochs = 20;
    cfg.lambda_kl = 0.0;
    auto loose = pretrain<double>(data, cfg);
    cfg.lambda_kl = 10.0;
    auto tight = pretrain<double>(data, cfg);
    const auto s = topo_levels(held_out);
    const double a = mean_abs(nn::encoder_latents(loose.params, cfg.hyper, held_out, s).first);
    const double b = mean_abs(nn::encoder_latents(tight.params, cfg.hyper, held_out, s).first);
    CAPTURE(a);
    CAPTURE(b);
    CHECK(b < a);
  }
}

TEST_CASE("stage-2 training") {
  const auto data = samples(50, 2, 200);
  auto cfg = tiny_config();
  auto enc = pretrain<double>(data, cfg).params;
  drop_decoder(enc);

  SUBCASE("a frozen encoder is left untouched") {
    const auto r = train<double>(data, &enc, cfg);
    for (const auto& [path, p] : enc.items()) {
      CAPTURE(path);
      CHECK(r.params.at(path).value == p.value);
    }
    CHECK(r.log.size() == 3);
  }
  SUBCASE("fine-tuning moves it") {
    cfg.encoder_mode = nn::EncoderMode::Finetune;
    const auto r = train<double>(data, &enc, cfg);
    bool moved = false;
    for (const auto& [path, p] : enc.items()) moved = moved || r.params.at(path).value != p.value;
    CHECK(moved);
  }
  SUBCASE("no encoder") {
    cfg.encoder_mode = nn::EncoderMode::None;
    const auto r = train<double>(data, nullptr, cfg);
    for (const auto& [path, p] : r.params.items()) CHECK(path.rfind("gnn.", 0) == 0);
    cfg.encoder_mode = nn::EncoderMode::Frozen;
    CHECK_THROWS_AS(train<double>(data, nullptr, cfg), InvalidArgument);
  }
  SUBCASE("same seed, same bytes, and the hook sees every epoch") {
    int calls = 0;
    const auto a = train<double>(data, &enc, cfg, [&](const EpochLog& e, nn::ParamStore<double>&) { CHECK(e.epoch == calls++); });
    const auto b = train<double>(data, &enc, cfg);
    CHECK(calls == 3);
    const auto h = model_hyper(cfg);
    CHECK(nn::serialize_checkpoint(nn::Checkpoint<double>{"model", h, cfg.encoder_mode, a.params}) ==
          nn::serialize_checkpoint(nn::Checkpoint<double>{"model", h, cfg.encoder_mode, b.params}));
  }
  SUBCASE("the loss goes down") {
    cfg.epochs = 15;
    const auto r = train<double>(data, &enc, cfg);
    CHECK(r.log.back().loss < r.log.front().loss);
  }
}
