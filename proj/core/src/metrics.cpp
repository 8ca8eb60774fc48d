#include "preroute/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include <json.hpp>

#include "preroute/error.hpp"

namespace preroute::metrics {

namespace {

struct Moments {
  double mse = 0.0;
  double var = 0.0;
};

Moments moments(std::span<const double> y, std::span<const double> yhat) {
  if (y.size() != yhat.size())
    throw InvalidArgument("metrics: " + std::to_string(y.size()) + " targets vs " + std::to_string(yhat.size()) + " predictions");
  Moments m;
  if (y.empty()) return m;
  const double n = static_cast<double>(y.size());
  double mean = 0.0;
  for (const double v : y) mean += v;
  mean /= n;
  for (std::size_t i = 0; i < y.size(); ++i) {
    m.mse += (y[i] - yhat[i]) * (y[i] - yhat[i]);
    m.var += (y[i] - mean) * (y[i] - mean);
  }
  m.mse /= n;
  m.var /= n;
  return m;
}

void check_shapes(const Table& y, const Table& yhat) {
  if (y.rows() != yhat.rows() || y.cols() != yhat.cols())
    throw InvalidArgument("metrics: shape [" + std::to_string(y.rows()) + ", " + std::to_string(y.cols()) + "] vs [" +
                          std::to_string(yhat.rows()) + ", " + std::to_string(yhat.cols()) + "]");
}

std::span<const double> column(const Table& t, Eigen::Index c) {
  return {t.data() + c * t.rows(), static_cast<std::size_t>(t.rows())};
}

std::span<const double> all(const Table& t) { return {t.data(), static_cast<std::size_t>(t.size())}; }

}  // namespace

std::optional<double> r2(std::span<const double> y, std::span<const double> yhat) {
  const auto m = moments(y, yhat);
  if (y.size() < 2 || m.var == 0.0) return std::nullopt;
  return 1.0 - m.mse / m.var;
}

std::optional<double> r2_unflatten(const Table& y, const Table& yhat) {
  check_shapes(y, yhat);
  if (y.cols() == 0) return std::nullopt;
  double sum = 0.0;
  for (Eigen::Index c = 0; c < y.cols(); ++c) {
    const auto v = r2(column(y, c), column(yhat, c));
    if (!v) return std::nullopt;
    sum += *v;
  }
  return sum / static_cast<double>(y.cols());
}

std::optional<double> r2_flatten(const Table& y, const Table& yhat) {
  check_shapes(y, yhat);
  return r2(all(y), all(yhat));
}

std::optional<KRatio> k_ratio(const Table& y, const Table& yhat) {
  check_shapes(y, yhat);
  if (y.cols() == 0 || y.rows() < 2) return std::nullopt;
  KRatio k;
  for (Eigen::Index c = 0; c < y.cols(); ++c) {
    const auto m = moments(column(y, c), column(yhat, c));
    if (m.mse == 0.0 || m.var == 0.0) return std::nullopt;
    k.k_uf += m.var / m.mse;
  }
  k.k_uf /= static_cast<double>(y.cols());
  const auto m = moments(all(y), all(yhat));
  if (m.mse == 0.0 || m.var == 0.0) return std::nullopt;
  k.k_f = m.var / m.mse;
  return k;
}

std::vector<double> mse_by_level(const LevelSchedule& schedule, const Table& pred, const Table& truth) {
  check_shapes(truth, pred);
  std::vector<double> out(schedule.num_levels(), 0.0);
  for (std::size_t l = 0; l < schedule.num_levels(); ++l) {
    const auto& nodes = schedule.levels[l];
    if (nodes.empty()) continue;
    double s = 0.0;
    for (const NodeId u : nodes) {
      if (u < 0 || u >= truth.rows()) throw InvalidArgument("mse_by_level: node " + std::to_string(u) + " has no prediction");
      for (Eigen::Index c = 0; c < truth.cols(); ++c) s += (pred(u, c) - truth(u, c)) * (pred(u, c) - truth(u, c));
    }
    out[l] = s / static_cast<double>(nodes.size() * static_cast<std::size_t>(truth.cols()));
  }
  return out;
}

double slope(std::span<const double> values) {
  const std::size_t n = values.size();
  if (n < 2) return 0.0;
  const double xm = static_cast<double>(n - 1) / 2.0;
  double ym = 0.0;
  for (const double v : values) ym += v;
  ym /= static_cast<double>(n);
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = static_cast<double>(i) - xm;
    sxy += dx * (values[i] - ym);
    sxx += dx * dx;
  }
  return sxy / sxx;
}

TaskScore score_task(const std::string& task, const Table& y, const Table& yhat) {
  check_shapes(y, yhat);
  TaskScore s;
  s.task = task;
  s.rows = static_cast<std::size_t>(y.rows());
  s.r2_uf = r2_unflatten(y, yhat);
  s.r2_f = r2_flatten(y, yhat);
  s.k = k_ratio(y, yhat);
  s.mse = moments(all(y), all(yhat)).mse;
  for (Eigen::Index c = 0; c < y.cols(); ++c) {
    const auto m = moments(column(y, c), column(yhat, c));
    s.channel_r2.push_back(r2(column(y, c), column(yhat, c)));
    s.channel_k.push_back(m.mse > 0.0 && m.var > 0.0 ? std::optional<double>(m.var / m.mse) : std::nullopt);
  }
  return s;
}

const TaskScore& CircuitReport::task(const std::string& name_) const {
  for (const auto& t : tasks)
    if (t.task == name_) return t;
  throw InvalidArgument("report of '" + name + "' has no task '" + name_ + "'");
}

CircuitReport evaluate_circuit(const std::string& name, const CircuitGraph& graph, const LevelSchedule& schedule,
                               const sta::TimingAnnotation& labels, const Table& as_pred, const Table& edge_pred) {
  const auto n = static_cast<Eigen::Index>(graph.num_nodes());
  if (as_pred.rows() != n || as_pred.cols() != 8)
    throw InvalidArgument("evaluate '" + name + "': node predictions must be [" + std::to_string(n) + ", 8]");
  if (edge_pred.rows() != static_cast<Eigen::Index>(graph.num_edges()) || edge_pred.cols() != 4)
    throw InvalidArgument("evaluate '" + name + "': edge predictions must be [" + std::to_string(graph.num_edges()) + ", 4]");
  if (labels.at.size() != graph.num_nodes() || labels.rat.size() != graph.num_nodes() ||
      labels.edge_delay.size() != graph.num_edges())
    throw InvalidArgument("evaluate '" + name + "': labels do not match the circuit");

  Table at(n, 4), slew(n, 4), slack(n, 4), at_hat(n, 4), slew_hat(n, 4), slack_hat(n, 4);
  for (Eigen::Index u = 0; u < n; ++u) {
    const auto i = static_cast<std::size_t>(u);
    sta::Quad pa{};
    for (Eigen::Index c = 0; c < 4; ++c) {
      const auto ci = static_cast<std::size_t>(c);
      at(u, c) = labels.at[i][ci];
      slew(u, c) = labels.slew[i][ci];
      slack(u, c) = labels.slack[i][ci];
      at_hat(u, c) = as_pred(u, c);
      slew_hat(u, c) = as_pred(u, 4 + c);
      pa[ci] = as_pred(u, c);
    }
    const auto s = sta::slack(pa, labels.rat[i]);
    for (Eigen::Index c = 0; c < 4; ++c) slack_hat(u, c) = s[static_cast<std::size_t>(c)];
  }
  auto edges_of = [&](EdgeKind kind, Table& y, Table& yhat) {
    const auto m = static_cast<Eigen::Index>(graph.count_edges(kind));
    y.resize(m, 4);
    yhat.resize(m, 4);
    Eigen::Index r = 0;
    for (std::size_t e = 0; e < graph.num_edges(); ++e) {
      if (graph.edge(static_cast<EdgeId>(e)).kind != kind) continue;
      for (Eigen::Index c = 0; c < 4; ++c) {
        y(r, c) = labels.edge_delay[e][static_cast<std::size_t>(c)];
        yhat(r, c) = edge_pred(static_cast<Eigen::Index>(e), c);
      }
      ++r;
    }
  };
  Table nd, nd_hat, cd, cd_hat;
  edges_of(EdgeKind::Net, nd, nd_hat);
  edges_of(EdgeKind::Cell, cd, cd_hat);

  CircuitReport r;
  r.name = name;
  r.nodes = graph.num_nodes();
  r.tasks.push_back(score_task("slack", slack, slack_hat));
  r.tasks.push_back(score_task("at", at, at_hat));
  r.tasks.push_back(score_task("slew", slew, slew_hat));
  r.tasks.push_back(score_task("net_delay", nd, nd_hat));
  r.tasks.push_back(score_task("cell_delay", cd, cd_hat));
  r.mse_by_level = mse_by_level(schedule, at_hat, at);
  r.level_slope = slope(r.mse_by_level);
  return r;
}

void summarize(EvalReport& report) {
  report.splits.clear();
  std::vector<std::string> names;
  for (const auto& c : report.circuits)
    if (std::find(names.begin(), names.end(), c.split) == names.end()) names.push_back(c.split);
  for (const auto& split : names) {
    SplitSummary s;
    s.split = split;
    std::vector<std::string> tasks;
    for (const auto& c : report.circuits) {
      if (c.split != split) continue;
      ++s.circuits;
      for (const auto& t : c.tasks)
        if (std::find(tasks.begin(), tasks.end(), t.task) == tasks.end()) tasks.push_back(t.task);
    }
    for (const auto& task : tasks) {
      double uf = 0.0, f = 0.0;
      std::size_t nuf = 0, nf = 0;
      for (const auto& c : report.circuits) {
        if (c.split != split) continue;
        const auto& t = c.task(task);
        if (t.r2_uf) uf += *t.r2_uf, ++nuf;
        else ++s.missing;
        if (t.r2_f) f += *t.r2_f, ++nf;
        else ++s.missing;
      }
      s.mean_r2_uf.emplace_back(task, nuf ? std::optional<double>(uf / static_cast<double>(nuf)) : std::nullopt);
      s.mean_r2_f.emplace_back(task, nf ? std::optional<double>(f / static_cast<double>(nf)) : std::nullopt);
    }
    report.splits.push_back(std::move(s));
  }
}

namespace {

using json = nlohmann::ordered_json;

json opt(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }
std::optional<double> opt_from(const json& j) { return j.is_null() ? std::nullopt : std::optional<double>(j.get<double>()); }

std::string csv_opt(const std::optional<double>& v) {
  if (!v) return "";
  return json(*v).dump();
}

}  // namespace

std::string report_to_json(const EvalReport& report) {
  json circuits = json::array();
  for (const auto& c : report.circuits) {
    json tasks = json::object();
    for (const auto& t : c.tasks) {
      json ch_r2 = json::array(), ch_k = json::array();
      for (const auto& v : t.channel_r2) ch_r2.push_back(opt(v));
      for (const auto& v : t.channel_k) ch_k.push_back(opt(v));
      tasks[t.task] = json{{"rows", t.rows},
                           {"r2_uf", opt(t.r2_uf)},
                           {"r2_f", opt(t.r2_f)},
                           {"k_uf", t.k ? json(t.k->k_uf) : json(nullptr)},
                           {"k_f", t.k ? json(t.k->k_f) : json(nullptr)},
                           {"mse", t.mse},
                           {"channel_r2", std::move(ch_r2)},
                           {"channel_k", std::move(ch_k)}};
    }
    circuits.push_back(json{{"name", c.name},
                            {"split", c.split},
                            {"nodes", c.nodes},
                            {"tasks", std::move(tasks)},
                            {"mse_by_level", c.mse_by_level},
                            {"level_slope", c.level_slope}});
  }
  json splits = json::array();
  for (const auto& s : report.splits) {
    json uf = json::object(), f = json::object();
    for (const auto& [task, v] : s.mean_r2_uf) uf[task] = opt(v);
    for (const auto& [task, v] : s.mean_r2_f) f[task] = opt(v);
    splits.push_back(json{{"split", s.split}, {"circuits", s.circuits}, {"mean_r2_uf", uf}, {"mean_r2_f", f}, {"missing", s.missing}});
  }
  return json{{"format", "preroute-eval"}, {"version", 1}, {"circuits", circuits}, {"splits", splits}}.dump(2) + "\n";
}

EvalReport report_from_json(std::string_view text) {
  try {
    const auto doc = json::parse(text.begin(), text.end());
    if (doc.value("format", std::string()) != "preroute-eval") throw FormatError("not an evaluation report");
    EvalReport r;
    for (const auto& c : doc.at("circuits")) {
      CircuitReport cr;
      cr.name = c.at("name").get<std::string>();
      cr.split = c.at("split").get<std::string>();
      cr.nodes = c.at("nodes").get<std::size_t>();
      for (const auto& [task, t] : c.at("tasks").items()) {
        TaskScore s;
        s.task = task;
        s.rows = t.at("rows").get<std::size_t>();
        s.r2_uf = opt_from(t.at("r2_uf"));
        s.r2_f = opt_from(t.at("r2_f"));
        if (!t.at("k_uf").is_null() && !t.at("k_f").is_null()) s.k = KRatio{t.at("k_uf").get<double>(), t.at("k_f").get<double>()};
        s.mse = t.at("mse").get<double>();
        for (const auto& v : t.at("channel_r2")) s.channel_r2.push_back(opt_from(v));
        for (const auto& v : t.at("channel_k")) s.channel_k.push_back(opt_from(v));
        cr.tasks.push_back(std::move(s));
      }
      cr.mse_by_level = c.at("mse_by_level").get<std::vector<double>>();
      cr.level_slope = c.at("level_slope").get<double>();
      r.circuits.push_back(std::move(cr));
    }
    summarize(r);
    return r;
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed evaluation report: ") + e.what());
  }
}

std::string report_to_csv(const EvalReport& report) {
  std::ostringstream os;
  os << "circuit,split,nodes,task,rows,r2_uf,r2_f,k_uf,k_f,mse\n";
  for (const auto& c : report.circuits)
    for (const auto& t : c.tasks)
      os << c.name << ',' << c.split << ',' << c.nodes << ',' << t.task << ',' << t.rows << ',' << csv_opt(t.r2_uf) << ','
         << csv_opt(t.r2_f) << ',' << (t.k ? csv_opt(t.k->k_uf) : "") << ',' << (t.k ? csv_opt(t.k->k_f) : "") << ','
         << json(t.mse).dump() << '\n';
  return os.str();
}

std::string level_curves_to_csv(const EvalReport& report) {
  std::ostringstream os;
  os << "circuit,level,mse\n";
  for (const auto& c : report.circuits)
    for (std::size_t l = 0; l < c.mse_by_level.size(); ++l) os << c.name << ',' << l << ',' << json(c.mse_by_level[l]).dump() << '\n';
  return os.str();
}

}  // namespace preroute::metrics
