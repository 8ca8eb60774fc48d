#include <benchmark/benchmark.h>

#include "preroute/datagen.hpp"
#include "preroute/levels.hpp"
#include "preroute/nn/model.hpp"
#include "preroute/partition.hpp"
#include "preroute/sta.hpp"
#include "preroute/training.hpp"

using namespace preroute;

namespace {

CircuitGraph circuit(std::int64_t n) {
  datagen::GenConfig cfg;
  cfg.seed = 11;
  cfg.n_nodes = n;
  return datagen::gen_circuit(cfg, "bench");
}

void BM_Levelize(benchmark::State& state) {
  const auto g = circuit(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(topo_levels(g));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(g.num_nodes()));
}
BENCHMARK(BM_Levelize)->Arg(1000)->Arg(10000)->Arg(50000);

void BM_Timer(benchmark::State& state) {
  const auto g = circuit(state.range(0));
  const auto s = topo_levels(g);
  const datagen::LabelConfig labels;
  const auto boundary = sta::uniform_boundary(g, labels.primary_input);
  for (auto _ : state) benchmark::DoNotOptimize(sta::analyze(g, s, boundary, labels.net, -0.5));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(g.num_nodes()));
}
BENCHMARK(BM_Timer)->Arg(1000)->Arg(10000)->Arg(50000);

void BM_Partition(benchmark::State& state) {
  const auto g = circuit(20000);
  const auto s = topo_levels(g);
  const PartitionOptions opt{static_cast<std::size_t>(state.range(0)), 4, true};
  for (auto _ : state) benchmark::DoNotOptimize(partition(g, s, opt));
}
BENCHMARK(BM_Partition)->Arg(256)->Arg(4096);

void BM_Predict(benchmark::State& state) {
  const auto g = circuit(state.range(0));
  const auto s = topo_levels(g);
  nn::Hyper h;
  nn::ParamStore<float> ps;
  nn::declare_encoder(ps, h, 1);
  nn::declare_gnn(ps, h, 1);
  for (auto _ : state) benchmark::DoNotOptimize(nn::predict(ps, h, g, s));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(g.num_nodes()));
}
BENCHMARK(BM_Predict)->Arg(1000)->Arg(5000)->Unit(benchmark::kMillisecond);

void BM_TrainEpoch(benchmark::State& state) {
  auto g = circuit(2000);
  auto labels = datagen::label_circuit(g, datagen::LabelConfig{}, -0.5);
  std::vector<train::Sample> samples{train::make_sample("bench", "train", std::move(g), std::move(labels))};
  train::TrainConfig cfg;
  cfg.epochs = 1;
  cfg.encoder_mode = nn::EncoderMode::None;
  for (auto _ : state) benchmark::DoNotOptimize(train::train<float>(samples, nullptr, cfg));
}
BENCHMARK(BM_TrainEpoch)->Unit(benchmark::kMillisecond);

}  // namespace
BENCHMARK_MAIN();
