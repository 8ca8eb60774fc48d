#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "preroute/datagen.hpp"
#include "preroute/metrics.hpp"
#include "preroute/nn/model.hpp"

namespace preroute::train {

using nn::Mat;
using nn::ParamStore;
using nn::Var;

struct TrainConfig {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int pretrain_epochs = 2000;
  int epochs = 2000;
  double lambda_kl = 1e-3;
  double lambda_cd = 1.0;
  double lambda_nd = 1.0;
  nn::EncoderMode encoder_mode = nn::EncoderMode::Frozen;
  std::uint64_t seed = 1;
  std::size_t max_size = 8192;  // partition m
  int pad_levels = 4;           // partition k
  /// Circuits up to this size are pre-trained whole, larger ones in pieces.
  std::size_t pretrain_max_size = 65536;
  nn::Hyper hyper;
};

/// Unknown keys are rejected; missing keys keep their defaults.
TrainConfig train_config_from_json(std::string_view text);
std::string train_config_to_json(const TrainConfig& cfg);
/// Throws InvalidArgument naming the first offending field.
void validate(const TrainConfig& cfg);

template <class T>
struct AdamState {
  std::map<std::string, std::pair<Mat<T>, Mat<T>>> moments;
  std::int64_t step = 0;
};

/// One bias-corrected Adam update of every trainable parameter from its
/// accumulated gradient, then zeroes all gradients. Throws DivergenceError
/// naming the parameter when a gradient is not finite; nothing is updated
/// in that case.
template <class T>
void adam_step(ParamStore<T>& ps, AdamState<T>& state, const TrainConfig& cfg);

/// MSE(recon, x) + lambda_kl * KL(N(mu, exp(logvar)) || N(0, I)), both
/// averaged over nodes.
template <class T>
Var<T> loss_ae(nn::Tape<T>& t, Var<T> recon, const Mat<T>& x, Var<T> mu, Var<T> logvar, double lambda_kl);

/// Targets of the output rows of one view: AS = AT || slew per node,
/// CD / ND per cell / net edge.
template <class T>
struct GnnTargets {
  Mat<T> as, cd, nd;
};
template <class T>
GnnTargets<T> make_targets(const nn::GraphView<T>& v, const sta::TimingAnnotation& labels);

/// MSE(AS) + lambda_cd * MSE(CD) + lambda_nd * MSE(ND); absent edge terms
/// contribute zero.
template <class T>
Var<T> loss_gnn(nn::Tape<T>& t, const nn::GnnOut<T>& out, const GnnTargets<T>& targets, double lambda_cd, double lambda_nd);

/// A labelled circuit with its schedule.
struct Sample {
  std::string name;
  std::string split;
  CircuitGraph graph;
  LevelSchedule schedule;
  sta::TimingAnnotation labels;
};
Sample make_sample(std::string name, std::string split, CircuitGraph graph, sta::TimingAnnotation labels);
/// Loads every circuit of `split` ("train", "test" or "all").
std::vector<Sample> load_samples(const datagen::CorpusManifest& corpus, std::string_view split);

struct EpochLog {
  int epoch = 0;
  double loss = 0.0;  // mean over optimizer steps
  std::vector<std::pair<std::string, double>> terms;
  double seconds = 0.0;
};
using Logger = std::function<void(const EpochLog&)>;
/// Called after every stage-2 epoch with the current parameters.
template <class T>
using EpochHook = std::function<void(const EpochLog&, ParamStore<T>&)>;

template <class T>
struct TrainResult {
  ParamStore<T> params;
  std::vector<EpochLog> log;
};

/// Stage 1: auto-encoder reconstruction of node features, one optimizer
/// step per partition piece with the loss restricted to core nodes. The
/// result holds encoder and decoder; see drop_decoder().
template <class T>
TrainResult<T> pretrain(const std::vector<Sample>& samples, const TrainConfig& cfg, const Logger& log = {});

template <class T>
void drop_decoder(ParamStore<T>& ps);

/// Mean squared reconstruction error of a whole circuit with z = mu.
template <class T>
double reconstruction_mse(ParamStore<T>& ps, const nn::Hyper& h, const CircuitGraph& graph);

/// Stage 2. `encoder` is required unless cfg.encoder_mode is None; its
/// parameters are copied into the result and stay fixed in Frozen mode.
/// Pieces are visited in level order with GCN features and arrival times
/// of earlier pieces carried forward as constants.
template <class T>
TrainResult<T> train(const std::vector<Sample>& samples, const ParamStore<T>* encoder, const TrainConfig& cfg,
                     const EpochHook<T>& hook = {});

/// Hyperparameters the stage-2 model of `cfg` runs with.
nn::Hyper model_hyper(const TrainConfig& cfg);

template <class T>
metrics::CircuitReport evaluate(ParamStore<T>& ps, const nn::Hyper& h, const Sample& sample, std::size_t max_size);

}  // namespace preroute::train
