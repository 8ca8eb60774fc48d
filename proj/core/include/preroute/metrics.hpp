#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "preroute/graph.hpp"
#include "preroute/levels.hpp"
#include "preroute/sta.hpp"

namespace preroute::metrics {

/// Column-major [n, channels] table of values.
using Table = Eigen::MatrixXd;

/// 1 - MSE / VAR with population variance. Missing when n < 2 or VAR(y) = 0.
std::optional<double> r2(std::span<const double> y, std::span<const double> yhat);

/// Mean of the per-channel r2; missing when any channel is degenerate.
std::optional<double> r2_unflatten(const Table& y, const Table& yhat);
/// r2 of all channels concatenated into one vector.
std::optional<double> r2_flatten(const Table& y, const Table& yhat);

struct KRatio {
  double k_uf = 0.0;  // mean over channels of VAR / MSE
  double k_f = 0.0;   // VAR / MSE of the flattened data
};
/// Missing when any channel or the flattened data has zero MSE or zero variance.
std::optional<KRatio> k_ratio(const Table& y, const Table& yhat);

/// Mean squared error over all channels of the nodes of each level.
/// Levels without nodes get 0.
std::vector<double> mse_by_level(const LevelSchedule& schedule, const Table& pred, const Table& truth);

/// Least-squares slope of values[i] against i; 0 for fewer than two points.
double slope(std::span<const double> values);

/// Fit quality of one task (4 channels) on one circuit.
struct TaskScore {
  std::string task;
  std::size_t rows = 0;
  std::optional<double> r2_uf, r2_f;
  std::optional<KRatio> k;
  double mse = 0.0;
  std::vector<std::optional<double>> channel_r2;
  std::vector<std::optional<double>> channel_k;
};
TaskScore score_task(const std::string& task, const Table& y, const Table& yhat);

struct CircuitReport {
  std::string name;
  std::string split;
  std::size_t nodes = 0;
  std::vector<TaskScore> tasks;  // slack, at, slew, net_delay, cell_delay
  std::vector<double> mse_by_level;
  double level_slope = 0.0;

  const TaskScore& task(const std::string& name) const;
};

/// Scores predictions against golden labels. `as_pred` is [nodes, 8]
/// (AT || slew), `edge_pred` [edges, 4]. Slack is derived from predicted AT
/// and the label RAT.
CircuitReport evaluate_circuit(const std::string& name, const CircuitGraph& graph, const LevelSchedule& schedule,
                               const sta::TimingAnnotation& labels, const Table& as_pred, const Table& edge_pred);

struct SplitSummary {
  std::string split;
  std::size_t circuits = 0;
  /// Means over circuits where the value is present; missing entries are
  /// counted in `missing`.
  std::vector<std::pair<std::string, std::optional<double>>> mean_r2_uf, mean_r2_f;
  std::size_t missing = 0;
};

struct EvalReport {
  std::vector<CircuitReport> circuits;
  std::vector<SplitSummary> splits;
};

/// Fills `splits` from `circuits`.
void summarize(EvalReport& report);

std::string report_to_json(const EvalReport& report);
/// One row per (circuit, task).
std::string report_to_csv(const EvalReport& report);
/// Columns circuit, level, mse.
std::string level_curves_to_csv(const EvalReport& report);
EvalReport report_from_json(std::string_view text);

}  // namespace preroute::metrics
