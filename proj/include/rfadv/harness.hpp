#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "rfadv/evaluation.hpp"
#include "rfadv/simulation.hpp"
#include "rfadv/theory_solver.hpp"

namespace rfadv::harness {

enum ExitCode : int { kOk = 0, kUsage = 1, kPartialFailure = 2 };

/// Bad flags or configuration; maps to exit code 1.
class UsageError : public std::runtime_error {
 public:
  explicit UsageError(const std::string& what) : std::runtime_error(what) {}
};

std::string version_string();

/// 12 significant digits, "C" locale regardless of the global locale.
std::string format_number(double v);

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};
/// Comma-separated, LF line endings, header first.
void write_csv(std::ostream& os, const Table& t);
/// "-" writes to stdout.
void write_csv(const std::string& path, const Table& t);

/// Worker count: RFADV_THREADS when set and positive, otherwise the
/// hardware concurrency, never more than `tasks`.
int worker_count(std::size_t tasks);

/// Runs fn(i) for i in [0, count) on a pool of `threads` workers.
void parallel_for(std::size_t count, int threads, const std::function<void(std::size_t)>& fn);

/// "a:b:k" -> k points from a to b, log-spaced when `log_spacing` and both
/// ends are positive, otherwise linear.
std::vector<double> parse_grid(const std::string& text, bool log_spacing = true);

struct TrialResult {
  int trial = 0;
  std::string status;  // "ok" or "failed: ..."
  std::string train_status;
  int iterations = 0;
  double final_loss = 0.0;
  double ar_empirical = 0.0;
  double ar_se = 0.0;
  double std_empirical = 0.0;
  double ar_analytic = 0.0;
  double std_analytic = 0.0;
  bool outside_constraint_set = false;
};

struct SimulationSummary {
  ExperimentConfig config;
  std::vector<TrialResult> trials;
  int successes = 0;
  double ar_mean = 0.0;
  double ar_se = 0.0;  // across trials
  double std_mean = 0.0;
  double ar_analytic_mean = 0.0;
  double ar_analytic_se = 0.0;
  double std_analytic_mean = 0.0;
};

struct SimulationOptions {
  Oracle oracle = Oracle::closed_form;
  int n_test = 2000;
  int threads = 1;
};

/// Trains and evaluates cfg.trials independent models. Trial t draws W,
/// the training set and the test points from streams keyed by (seed, t).
SimulationSummary run_simulation(const ExperimentConfig& cfg, const SimulationOptions& opt);

struct ComparisonRow {
  double psi1 = 0.0, psi2 = 0.0, eps = 0.0, tau2 = 0.0;
  int d = 0, n = 0, N = 0;
  double ar_theory = 0.0;
  double ar_empirical_mean = 0.0;
  double ar_empirical_se = 0.0;
  double std_risk_theory = 0.0;
  double std_risk_empirical = 0.0;
  int trials = 0;
  std::string method;
  std::string status;  // "ok" or a failure description
};

struct RunManifest {
  std::string command;
  std::string version;
  std::uint64_t seed = 0;
  std::string config_snapshot;  // JSON text
  std::map<std::string, double> stage_seconds;
  std::vector<std::string> trial_status;
  int threads = 1;
};
void write_manifest(const std::filesystem::path& path, const RunManifest& m);

struct CompareConfig {
  int d = 100;
  int n = 300;
  double tau2 = 0.5;
  std::vector<int> N;
  std::vector<double> eps;
  OptimizerSettings optimizer;
  LossVariant loss_variant = LossVariant::exact_minimax;
  Oracle oracle = Oracle::closed_form;
  int n_test = 2000;
  int trials = 20;
  std::uint64_t seed = 0;
};
/// Throws UsageError on malformed TOML, unknown sections or keys, or
/// out-of-range values.
CompareConfig load_compare_config(const std::filesystem::path& path);

struct SweepConfig {
  SweepAxis axis = SweepAxis::psi1;
  bool ratio_axis = false;  // grid values are N/n ratios
  std::vector<double> grid;
  double psi1 = 1.0;
  std::vector<double> psi2{3.0};
  double eps = 0.1;
  double tau2 = 0.5;
  SolverSettings solver;
  bool warm_start = true;
};
SweepConfig load_sweep_config(const std::filesystem::path& path);

std::vector<ComparisonRow> run_compare(const CompareConfig& cfg, int threads, RunManifest* manifest);
Table comparison_table(std::vector<ComparisonRow> rows);
/// One theory prediction with the requested coordinates (eps unclamped).
struct TheoryRow {
  double psi1 = 0.0, psi2 = 0.0, eps = 0.0, tau2 = 0.0;
  std::optional<RiskPrediction> prediction;
  std::string error;
};
std::vector<TheoryRow> run_theory_grid(SweepAxis axis, const std::vector<double>& grid, double psi1,
                                       double psi2, double eps, double tau2,
                                       const SolverSettings& solver, bool warm_start);
Table theory_table(const std::vector<TheoryRow>& rows);

/// Entry point shared by the executable and the tests.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace rfadv::harness
