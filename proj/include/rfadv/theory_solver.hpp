#pragma once

#include <array>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace rfadv {

/// Asymptotic problem instance: N/d -> psi1, n/d -> psi2, adversary budget eps,
/// label-noise variance tau2, and the derived effective noise sigma2.
struct TheoryPoint {
  double psi1 = 1.0;
  double psi2 = 1.0;
  double eps = 1.0;
  double tau2 = 0.0;
  double sigma2 = 0.0;
};

/// Budgets below this are clamped; the indicator branch degenerates at eps = 0.
inline constexpr double kEpsFloor = 1e-7;

/// Validates the inputs, clamps eps to kEpsFloor and fills sigma2.
TheoryPoint make_theory_point(double psi1, double psi2, double eps, double tau2);

/// The five scalar variables of the saddle problem. (alpha, tau_g) are
/// minimized, (beta, gamma, tau_q) maximized.
struct SaddleVariables {
  double alpha = 1.0;
  double tau_g = 1.0;
  double beta = 1.0;
  double gamma = 1.0;
  double tau_q = 1.0;
};

struct ObjectiveEvaluation {
  double value = 0.0;
  /// dR / d(alpha, tau_g, beta, gamma, tau_q).
  std::array<double, 5> gradient{};
  double lambda = 0.0;  // maximizer of the F sup
  double nu = 0.0;      // nu* (0 when the indicator is off)
  bool indicator = false;
};

/// Raised when the objective leaves its domain (nonpositive alpha, NaN, ...).
class ObjectiveError : public std::runtime_error {
 public:
  explicit ObjectiveError(const std::string& what) : std::runtime_error(what) {}
};

/// R(alpha, tau_g, beta, gamma, tau_q) of the scalar convex-concave problem.
double objective_r(const SaddleVariables& v, const TheoryPoint& p);

/// Value plus the analytic gradient (envelope theorem through the F sup and
/// the nu* root).
ObjectiveEvaluation evaluate_objective(const SaddleVariables& v, const TheoryPoint& p);

struct SolverSettings {
  double tol = 1e-7;         // projected gradient norm at exit
  double inner_tol = 1e-11;  // inner (alpha, tau_g) stationarity
  int max_iters = 300;
  int inner_max_iters = 200;
  int starts = 3;
  double start_agreement = 1e-4;  // (alpha, tau_g/beta) discrepancy warning level
  double box_lower = 1e-6;
  double box_upper = 50.0;
};

struct SaddlePoint {
  double alpha = 0.0;
  double tau_g = 0.0;
  double beta = 0.0;
  double gamma = 0.0;
  double tau_q = 0.0;
  double lambda_star = 0.0;
  double nu_star = 0.0;
  double objective = 0.0;
  /// Projected gradient norm in solver coordinates (gamma measured in units of eps).
  double grad_norm = 0.0;
  bool converged = false;
  int iterations = 0;
  /// Largest (alpha, tau_g/beta) discrepancy between restarts.
  double start_spread = 0.0;
  std::vector<std::string> warnings;

  SaddleVariables variables() const { return {alpha, tau_g, beta, gamma, tau_q}; }
};

class ConvergenceError : public std::runtime_error {
 public:
  ConvergenceError(const std::string& what, SaddlePoint best)
      : std::runtime_error(what), best_(std::move(best)) {}
  const SaddlePoint& best() const { return best_; }

 private:
  SaddlePoint best_;
};

/// Solves max_{beta, gamma, tau_q} min_{alpha, tau_g} R from one start.
SaddlePoint solve_saddle_from(const TheoryPoint& p, const SaddleVariables& start,
                              const SolverSettings& cfg = {});

/// Multi-start solve (settings.starts deterministic interior starts, plus
/// `warm` when given). Throws ConvergenceError when no start converges.
SaddlePoint solve_saddle(const TheoryPoint& p, const SolverSettings& cfg = {},
                         std::optional<SaddleVariables> warm = std::nullopt);

struct RiskPrediction {
  TheoryPoint point;
  SaddlePoint saddle;
  double adversarial_risk = 0.0;
  double standard_component = 0.0;  // alpha*^2 + sigma^2
};

/// (alpha^2 + sigma^2)(1 + r^2 + 2 sqrt(2/pi) r) with r = beta nu / tau_g.
RiskPrediction risk_from_saddle(const TheoryPoint& p, const SaddlePoint& s);

RiskPrediction predict_adversarial_risk(const TheoryPoint& p, const SolverSettings& cfg = {},
                                        std::optional<SaddleVariables> warm = std::nullopt);

enum class SweepAxis { psi1, eps, tau2 };

struct SweepEntry {
  double value = 0.0;  // grid coordinate
  std::optional<RiskPrediction> prediction;
  std::string error;  // non-empty when the point failed
};

/// One prediction per grid value along `axis`, other coordinates from `base`.
/// Warm starts each point from the previous saddle when `warm_start` is set.
std::vector<SweepEntry> sweep_theory(SweepAxis axis, const std::vector<double>& grid,
                                     double psi1, double psi2, double eps, double tau2,
                                     const SolverSettings& cfg = {}, bool warm_start = true);

}  // namespace rfadv
