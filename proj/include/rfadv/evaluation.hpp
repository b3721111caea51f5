#pragma once

#include <cstdint>
#include <string>
#include <string_view>

#include "rfadv/simulation.hpp"

namespace rfadv {

enum class RiskMethod { analytic_ge, mc_closed_form, mc_pgd };
enum class Oracle { closed_form, pgd };

std::string to_string(RiskMethod m);
std::string to_string(Oracle o);
Oracle parse_oracle(std::string_view name);

struct RiskReport {
  double adversarial_risk = 0.0;
  double standard_risk = 0.0;
  RiskMethod method = RiskMethod::analytic_ge;
  int n_test = 0;
  double standard_error = 0.0;      // of adversarial_risk
  double standard_risk_se = 0.0;
  double m_theta = 0.0;
  double j_norm_theta = 0.0;  // 0 for Monte Carlo reports, which do not build J
  /// theta outside the set where the Gaussian-equivalence bound is proved.
  bool outside_constraint_set = false;
};

/// sqrt(tau2 + ||W^T theta / 2 - beta||^2 + (1/4 - 1/(2 pi)) ||theta||^2).
double m_statistic(const Vector& theta, const FeatureMap& map, const Vector& beta, double tau2);

/// Membership in {||theta||_inf <= c0 sqrt(log d / d), ||theta|| <= c0,
/// |1^T theta| <= c0 sqrt(d / log d)}, the set on which the Gaussian
/// equivalence of the adversarial risk is guaranteed. Requires d >= 2.
bool in_constraint_set(const Vector& theta, int d, double c0 = 10.0);

RiskReport analytic_adversarial_risk(const Vector& theta, const FeatureMap& map,
                                     const KernelJ& kernel, const Vector& beta, double tau2,
                                     double eps);

struct PgdSettings {
  int steps = 200;
  int restarts = 3;
};

/// Projected gradient ascent on delta -> (y - theta^T sigma(W (x + delta)))^2
/// over the eps-ball with step eps/20. Starts from 0, from +eps g/||g|| and
/// from a uniform point on the sphere; returns the best iterate seen.
Perturbation pgd_inner_max(const Vector& theta, const FeatureMap& map, const Vector& x, double y,
                           double eps, int steps, int restarts, RandomStream& rng);

/// Fresh test points drawn from substreams keyed by (seed, trial, point index).
/// Reports mean squared perturbed error and its standard error.
RiskReport mc_adversarial_risk(const Vector& theta, const FeatureMap& map, const Vector& beta,
                               double tau2, double eps, int n_test, std::uint64_t seed,
                               std::uint64_t trial, Oracle oracle, const PgdSettings& pgd = {});

}  // namespace rfadv
