#include "cli.hpp"

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <memory>
#include <optional>

#include <CLI11.hpp>
#include <json.hpp>
#include <spdlog/sinks/stdout_sinks.h>
#include <spdlog/spdlog.h>

#include "preroute/datagen.hpp"
#include "preroute/error.hpp"
#include "preroute/io.hpp"
#include "preroute/levels.hpp"
#include "preroute/metrics.hpp"
#include "preroute/nn/checkpoint.hpp"
#include "preroute/partition.hpp"
#include "preroute/sta.hpp"
#include "preroute/training.hpp"

#ifndef PREROUTE_VERSION
#define PREROUTE_VERSION "0.0.0"
#endif

namespace preroute::cli {

namespace {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

struct Global {
  std::optional<std::uint64_t> seed;
  unsigned threads = 1;
  std::string precision = "f32";
  std::string log_level = "info";
  std::string config;
};

std::uint64_t resolve_seed(const Global& g, std::uint64_t fallback) {
  if (g.seed) return *g.seed;
  if (const char* env = std::getenv("PREROUTE_SEED"); env && *env) {
    char* end = nullptr;
    const auto v = std::strtoull(env, &end, 10);
    if (*end != '\0') throw InvalidArgument(std::string("PREROUTE_SEED is not an unsigned integer: '") + env + "'");
    return v;
  }
  return fallback;
}

// Config files override flags, which override defaults.
json overlay(json base, const std::string& config_path) {
  if (config_path.empty()) return base;
  const auto text = read_file(config_path);
  try {
    base.merge_patch(json::parse(text));
  } catch (const json::exception& e) {
    throw FormatError(config_path + ": " + e.what());
  }
  return base;
}

json parse_json(const std::string& text) { return json::parse(text); }

void log_resolved(const std::string& command, const Global& g, const json& resolved) {
  spdlog::info("preroute {} {}", version(), command);
  spdlog::info("global: {}", json{{"threads", g.threads}, {"precision", g.precision}, {"log_level", g.log_level},
                                   {"config", g.config}}
                                 .dump());
  spdlog::info("resolved: {}", resolved.dump());
}

std::string sibling(const std::string& path, const std::string& ext) {
  fs::path p(path);
  if (p.extension() == ".json") p.replace_extension(ext);
  else p += ext;
  return p.string();
}

void start_log(const std::string& path) {
  if (!path.empty()) write_file_atomic(path, "");
}

void append_epoch(const std::string& path, const std::string& stage, const train::EpochLog& e) {
  json terms = json::object();
  for (const auto& [k, v] : e.terms) terms[k] = v;
  spdlog::info("{} epoch {} loss {:.6g} ({:.2f}s)", stage, e.epoch, e.loss, e.seconds);
  if (!path.empty())
    append_line(path, json{{"stage", stage}, {"epoch", e.epoch}, {"loss", e.loss}, {"terms", terms}, {"seconds", e.seconds}}
                          .dump());
}

// ---------------------------------------------------------------------------
// gen / sta / level-stats / partition

struct GenArgs {
  std::string out;
  std::optional<int> n_train, n_test;
  std::optional<std::int64_t> min_nodes, max_nodes;
};

int cmd_gen(const Global& g, const GenArgs& a) {
  auto base = parse_json(datagen::corpus_config_to_json(datagen::CorpusConfig{}));
  base["seed"] = resolve_seed(g, base["seed"].get<std::uint64_t>());
  if (a.n_train) base["n_train"] = *a.n_train;
  if (a.n_test) base["n_test"] = *a.n_test;
  if (a.min_nodes) base["min_nodes"] = *a.min_nodes;
  if (a.max_nodes) base["max_nodes"] = *a.max_nodes;
  const auto resolved = overlay(base, g.config);
  log_resolved("gen", g, json{{"out", a.out}, {"corpus", resolved}});
  const auto cfg = datagen::corpus_config_from_json(resolved.dump());
  const auto man = datagen::write_corpus(cfg, a.out);
  for (const auto& e : man.entries) spdlog::info("{} {} nodes ({})", e.name, e.num_nodes, e.split);
  spdlog::info("wrote {} circuits to {}", man.entries.size(), a.out);
  return 0;
}

struct StaArgs {
  std::string circuit, out;
  double rat_margin = datagen::GenConfig{}.rat_margin;
};

int cmd_sta(const Global& g, const StaArgs& a) {
  auto base = parse_json(datagen::corpus_config_to_json(datagen::CorpusConfig{}));
  const auto corpus = overlay(base, g.config);
  const auto labels_cfg = datagen::corpus_config_from_json(corpus.dump()).labels;
  log_resolved("sta", g, json{{"circuit", a.circuit}, {"out", a.out}, {"rat_margin", a.rat_margin}, {"labels", corpus["labels"]}});
  const auto graph = load_circuit(a.circuit);
  const auto schedule = topo_levels(graph);
  const auto labels = sta::analyze(graph, schedule, sta::uniform_boundary(graph, labels_cfg.primary_input), labels_cfg.net,
                                   a.rat_margin, g.threads);
  sta::save_labels(graph, labels, a.out);
  double worst = 0.0;
  for (const auto& s : labels.slack)
    for (double v : s) worst = std::min(worst, v);
  spdlog::info("{}: {} nodes, {} levels, {} endpoints, worst slack {:.6g}", graph.name(), graph.num_nodes(),
               schedule.num_levels(), sta::endpoints(graph).size(), worst);
  return 0;
}

struct LevelStatsArgs {
  std::string circuit, out;
};

int cmd_level_stats(const Global& g, const LevelStatsArgs& a) {
  log_resolved("level-stats", g, json{{"circuit", a.circuit}, {"out", a.out}});
  const auto graph = load_circuit(a.circuit);
  const auto schedule = topo_levels(graph);
  json hist = json::array();
  std::size_t widest = 0;
  for (const auto& l : schedule.levels) {
    hist.push_back(l.size());
    widest = std::max(widest, l.size());
  }
  const json doc{{"circuit", graph.name()}, {"nodes", graph.num_nodes()},  {"edges", graph.num_edges()},
                 {"levels", schedule.num_levels()}, {"widest_level", widest}, {"histogram", hist}};
  if (a.out.empty()) std::cout << doc.dump(2) << "\n";
  else write_file_atomic(a.out, doc.dump(2) + "\n");
  return 0;
}

struct PartitionArgs {
  std::string circuit, out;
  std::size_t max_size = PartitionOptions{}.max_size;
  int pad = PartitionOptions{}.pad_levels;
  bool split_oversized = false;
};

int cmd_partition(const Global& g, const PartitionArgs& a) {
  log_resolved("partition", g,
               json{{"circuit", a.circuit}, {"out", a.out}, {"max_size", a.max_size}, {"pad", a.pad},
                    {"split_oversized", a.split_oversized}});
  const auto graph = load_circuit(a.circuit);
  const PartitionOptions opts{a.max_size, a.pad, a.split_oversized};
  const auto parts = partition(graph, topo_levels(graph), opts);
  write_partition(parts, opts, a.out);
  for (std::size_t i = 0; i < parts.size(); ++i)
    spdlog::info("piece {}: core levels [{}, {}], {} core / {} nodes", i, parts[i].core_levels.first,
                 parts[i].core_levels.last, parts[i].num_core(), parts[i].graph.num_nodes());
  spdlog::info("wrote {} sub-graph(s) to {}", parts.size(), a.out);
  return 0;
}

// ---------------------------------------------------------------------------
// pretrain / train

struct TrainArgs {
  std::string corpus, out, log, encoder;
  std::optional<int> epochs;
  std::optional<bool> freeze;
};

train::TrainConfig resolve_train(const Global& g, const TrainArgs& a, bool pretraining, json& resolved) {
  auto base = parse_json(train::train_config_to_json(train::TrainConfig{}));
  base["seed"] = resolve_seed(g, base["seed"].get<std::uint64_t>());
  if (a.epochs) base[pretraining ? "pretrain_epochs" : "epochs"] = *a.epochs;
  if (!pretraining) {
    if (a.encoder == "none") base["encoder_mode"] = "none";
    else if (a.freeze) base["encoder_mode"] = *a.freeze ? "frozen" : "finetune";
  }
  resolved = overlay(base, g.config);
  return train::train_config_from_json(resolved.dump());
}

std::string default_log(const TrainArgs& a) { return a.log.empty() ? sibling(a.out, ".log.jsonl") : a.log; }

template <class T>
int do_pretrain(const Global& g, const TrainArgs& a) {
  json resolved;
  const auto cfg = resolve_train(g, a, true, resolved);
  const auto log_path = default_log(a);
  log_resolved("pretrain", g, json{{"corpus", a.corpus}, {"out", a.out}, {"log", log_path}, {"train", resolved}});
  const auto corpus = datagen::load_corpus(a.corpus);
  const auto samples = train::load_samples(corpus, "train");
  start_log(log_path);
  auto result = train::pretrain<T>(samples, cfg, [&](const train::EpochLog& e) { append_epoch(log_path, "pretrain", e); });
  for (const auto& s : train::load_samples(corpus, "test"))
    spdlog::info("{}: held-out reconstruction mse {:.6g}", s.name, train::reconstruction_mse(result.params, cfg.hyper, s.graph));
  train::drop_decoder(result.params);
  nn::save_checkpoint(nn::Checkpoint<T>{"encoder", cfg.hyper, cfg.encoder_mode, std::move(result.params)}, a.out);
  spdlog::info("wrote encoder checkpoint {}", a.out);
  return 0;
}

template <class T>
int do_train(const Global& g, const TrainArgs& a) {
  json resolved;
  const auto cfg = resolve_train(g, a, false, resolved);
  const auto log_path = default_log(a);
  log_resolved("train", g,
               json{{"corpus", a.corpus}, {"encoder", a.encoder}, {"out", a.out}, {"log", log_path}, {"train", resolved}});
  std::optional<nn::Checkpoint<T>> enc;
  if (cfg.encoder_mode != nn::EncoderMode::None) {
    if (a.encoder.empty() || a.encoder == "none")
      throw InvalidArgument("encoder mode '" + std::string(nn::to_string(cfg.encoder_mode)) +
                            "' needs --encoder <checkpoint>");
    enc = nn::load_checkpoint<T>(a.encoder);
    if (enc->kind != "encoder") throw InvalidArgument(a.encoder + ": expected an encoder checkpoint, got '" + enc->kind + "'");
  }
  const auto samples = train::load_samples(datagen::load_corpus(a.corpus), "train");
  start_log(log_path);
  auto result = train::train<T>(samples, enc ? &enc->params : nullptr, cfg,
                                [&](const train::EpochLog& e, nn::ParamStore<T>&) { append_epoch(log_path, "train", e); });
  nn::save_checkpoint(nn::Checkpoint<T>{"model", train::model_hyper(cfg), cfg.encoder_mode, std::move(result.params)}, a.out);
  spdlog::info("wrote model checkpoint {}", a.out);
  return 0;
}

// ---------------------------------------------------------------------------
// eval / report

struct EvalArgs {
  std::string circuit, labels, corpus, split = "test", checkpoint, report, csv;
  std::size_t max_size = train::TrainConfig{}.max_size;
};

template <class T>
int do_eval(const Global& g, const EvalArgs& a) {
  const auto csv = a.csv.empty() ? sibling(a.report, ".csv") : a.csv;
  log_resolved("eval", g,
               json{{"checkpoint", a.checkpoint}, {"circuit", a.circuit}, {"labels", a.labels}, {"corpus", a.corpus},
                    {"split", a.split}, {"report", a.report}, {"csv", csv}, {"max_size", a.max_size}});
  if (a.corpus.empty() == a.circuit.empty()) throw InvalidArgument("eval: give either --circuit/--labels or --corpus");
  if (!a.circuit.empty() && a.labels.empty()) throw InvalidArgument("eval: --circuit needs --labels");
  auto ck = nn::load_checkpoint<T>(a.checkpoint);
  if (ck.kind != "model") throw InvalidArgument(a.checkpoint + ": expected a model checkpoint, got '" + ck.kind + "'");
  std::vector<train::Sample> samples;
  if (a.corpus.empty()) {
    auto graph = load_circuit(a.circuit);
    auto labels = sta::load_labels(graph, a.labels);
    auto name = graph.name();
    samples.push_back(train::make_sample(std::move(name), "eval", std::move(graph), std::move(labels)));
  } else {
    samples = train::load_samples(datagen::load_corpus(a.corpus), a.split);
  }
  metrics::EvalReport report;
  for (const auto& s : samples) {
    report.circuits.push_back(train::evaluate(ck.params, ck.hyper, s, a.max_size));
    const auto& slack = report.circuits.back().task("slack");
    spdlog::info("{}: slack r2_uf {} r2_f {}", s.name, slack.r2_uf ? std::to_string(*slack.r2_uf) : "missing",
                 slack.r2_f ? std::to_string(*slack.r2_f) : "missing");
  }
  metrics::summarize(report);
  write_file_atomic(a.report, metrics::report_to_json(report));
  write_file_atomic(csv, metrics::report_to_csv(report));
  spdlog::info("wrote {} and {}", a.report, csv);
  return 0;
}

struct ReportArgs {
  std::string report, out;
};

int cmd_report(const Global& g, const ReportArgs& a) {
  log_resolved("report", g, json{{"report", a.report}, {"out", a.out}});
  const auto report = metrics::report_from_json(read_file(a.report));
  const auto csv = metrics::level_curves_to_csv(report);
  if (a.out.empty()) std::cout << csv;
  else write_file_atomic(a.out, csv);
  for (const auto& c : report.circuits) spdlog::info("{}: level slope {:.6g}", c.name, c.level_slope);
  return 0;
}

void print_error(const std::exception& e) {
  std::string type = "Error";
  if (dynamic_cast<const FormatError*>(&e)) type = "FormatError";
  else if (dynamic_cast<const InvalidArgument*>(&e)) type = "InvalidArgument";
  else if (dynamic_cast<const DivergenceError*>(&e)) type = "DivergenceError";
  else if (!dynamic_cast<const Error*>(&e)) type = "InternalError";
  std::cerr << json{{"error", {{"type", type}, {"message", e.what()}}}}.dump() << "\n";
}

void setup_logging(const std::string& level) {
  auto logger = std::make_shared<spdlog::logger>("preroute", std::make_shared<spdlog::sinks::stderr_sink_mt>());
  logger->set_level(spdlog::level::from_str(level));
  logger->set_pattern("[%H:%M:%S.%e] [%l] %v");
  spdlog::set_default_logger(logger);
}

}  // namespace

std::string version() { return PREROUTE_VERSION; }

int run(const std::vector<std::string>& args) {
  CLI::App app{"preroute: pre-routing timing prediction toolkit", "preroute"};
  app.set_version_flag("--version", version());
  app.require_subcommand(1);
  app.fallthrough();

  Global g;
  app.add_option("--seed", g.seed, "Random seed (falls back to $PREROUTE_SEED, then the built-in default)");
  app.add_option("--threads", g.threads, "Worker threads for the timing engine")->check(CLI::Range(1u, 1024u));
  app.add_option("--precision", g.precision, "Model arithmetic")->check(CLI::IsMember({"f32", "f64"}));
  app.add_option("--log-level", g.log_level, "Log verbosity")
      ->check(CLI::IsMember({"trace", "debug", "info", "warn", "error", "off"}));
  app.add_option("--config", g.config, "JSON config file; its keys override flags")->check(CLI::ExistingFile);

  GenArgs gen;
  auto* c_gen = app.add_subcommand("gen", "Generate and label a synthetic corpus");
  c_gen->add_option("--out", gen.out, "Output directory")->required();
  c_gen->add_option("--n-train", gen.n_train, "Training circuits");
  c_gen->add_option("--n-test", gen.n_test, "Held-out circuits");
  c_gen->add_option("--min-nodes", gen.min_nodes, "Smallest circuit size");
  c_gen->add_option("--max-nodes", gen.max_nodes, "Largest circuit size");

  StaArgs sta_args;
  auto* c_sta = app.add_subcommand("sta", "Run the timing engine on a circuit and write labels");
  c_sta->add_option("--circuit", sta_args.circuit, "Circuit document")->required()->check(CLI::ExistingFile);
  c_sta->add_option("--out", sta_args.out, "Label document to write")->required();
  c_sta->add_option("--rat-margin", sta_args.rat_margin, "Endpoint RAT margin over the critical arrival time")->capture_default_str();

  LevelStatsArgs ls;
  auto* c_ls = app.add_subcommand("level-stats", "Print the level histogram of a circuit");
  c_ls->add_option("--circuit", ls.circuit, "Circuit document")->required()->check(CLI::ExistingFile);
  c_ls->add_option("--out", ls.out, "Write the histogram here instead of stdout");

  PartitionArgs pa;
  auto* c_part = app.add_subcommand("partition", "Split a circuit into level-ordered sub-graphs");
  c_part->add_option("--circuit", pa.circuit, "Circuit document")->required()->check(CLI::ExistingFile);
  c_part->add_option("--max-size", pa.max_size, "Core size bound m")->capture_default_str()->check(CLI::PositiveNumber);
  c_part->add_option("--pad", pa.pad, "Padding levels k")->capture_default_str()->check(CLI::NonNegativeNumber);
  c_part->add_flag("--split-oversized", pa.split_oversized, "Emit a level of size >= m on its own instead of failing");
  c_part->add_option("--out", pa.out, "Output directory")->required();

  TrainArgs pre;
  auto* c_pre = app.add_subcommand("pretrain", "Stage 1: pre-train the graph auto-encoder");
  c_pre->add_option("--corpus", pre.corpus, "Corpus directory")->required()->check(CLI::ExistingDirectory);
  c_pre->add_option("--out", pre.out, "Encoder checkpoint to write")->required();
  c_pre->add_option("--epochs", pre.epochs, "Pre-training epochs");
  c_pre->add_option("--log", pre.log, "Per-epoch log (JSON lines); default <out>.log.jsonl");

  TrainArgs tr;
  auto* c_train = app.add_subcommand("train", "Stage 2: train the timing model");
  c_train->add_option("--corpus", tr.corpus, "Corpus directory")->required()->check(CLI::ExistingDirectory);
  c_train->add_option("--out", tr.out, "Model checkpoint to write")->required();
  c_train->add_option("--encoder", tr.encoder, "Encoder checkpoint, or 'none' to train without one");
  c_train->add_flag("--freeze-encoder,!--finetune-encoder", tr.freeze,
                    "Keep encoder parameters fixed (default) or fine-tune them");
  c_train->add_option("--epochs", tr.epochs, "Training epochs");
  c_train->add_option("--log", tr.log, "Per-epoch log (JSON lines); default <out>.log.jsonl");

  EvalArgs ev;
  auto* c_eval = app.add_subcommand("eval", "Score a model checkpoint against golden labels");
  c_eval->add_option("--checkpoint", ev.checkpoint, "Model checkpoint")->required()->check(CLI::ExistingFile);
  c_eval->add_option("--circuit", ev.circuit, "Circuit document")->check(CLI::ExistingFile);
  c_eval->add_option("--labels", ev.labels, "Label document of --circuit")->check(CLI::ExistingFile);
  c_eval->add_option("--corpus", ev.corpus, "Evaluate every circuit of a corpus split instead")->check(CLI::ExistingDirectory);
  c_eval->add_option("--split", ev.split, "Corpus split")->capture_default_str()->check(CLI::IsMember({"train", "test", "all"}));
  c_eval->add_option("--report", ev.report, "Report document to write")->required();
  c_eval->add_option("--csv", ev.csv, "Flat table; default next to --report with a .csv extension");
  c_eval->add_option("--max-size", ev.max_size, "Partition core size bound")->capture_default_str()->check(CLI::PositiveNumber);

  ReportArgs rep;
  auto* c_rep = app.add_subcommand("report", "Render per-level MSE curves of an eval report as CSV");
  c_rep->add_option("--report", rep.report, "Report document")->required()->check(CLI::ExistingFile);
  c_rep->add_option("--out", rep.out, "CSV to write instead of stdout");

  std::vector<const char*> argv;
  for (const auto& s : args) argv.push_back(s.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help, --version
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  setup_logging(g.log_level);
  const bool f64 = g.precision == "f64";
  try {
    if (c_gen->parsed()) return cmd_gen(g, gen);
    if (c_sta->parsed()) return cmd_sta(g, sta_args);
    if (c_ls->parsed()) return cmd_level_stats(g, ls);
    if (c_part->parsed()) return cmd_partition(g, pa);
    if (c_pre->parsed()) return f64 ? do_pretrain<double>(g, pre) : do_pretrain<float>(g, pre);
    if (c_train->parsed()) return f64 ? do_train<double>(g, tr) : do_train<float>(g, tr);
    if (c_eval->parsed()) return f64 ? do_eval<double>(g, ev) : do_eval<float>(g, ev);
    if (c_rep->parsed()) return cmd_report(g, rep);
  } catch (const std::exception& e) {
    print_error(e);
    return 1;
  }
  std::cerr << app.help();
  return 2;
}

}  // namespace preroute::cli
