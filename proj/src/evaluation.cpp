#include "rfadv/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "rfadv/special_math.hpp"

namespace rfadv {

namespace {

struct Welford {
  long count = 0;
  double mean = 0.0;
  double m2 = 0.0;
  void add(double v) {
    ++count;
    const double delta = v - mean;
    mean += delta / static_cast<double>(count);
    m2 += delta * (v - mean);
  }
  double standard_error() const {
    if (count < 2) return 0.0;
    return std::sqrt(m2 / static_cast<double>(count - 1) / static_cast<double>(count));
  }
};

double residual(const Vector& theta, const FeatureMap& map, const Vector& x, double y) {
  return y - theta.dot(features(map, x));
}

}  // namespace

std::string to_string(RiskMethod m) {
  switch (m) {
    case RiskMethod::analytic_ge: return "analytic_ge";
    case RiskMethod::mc_closed_form: return "mc_closed_form";
    case RiskMethod::mc_pgd: return "mc_pgd";
  }
  return "unknown";
}

std::string to_string(Oracle o) { return o == Oracle::pgd ? "pgd" : "closed_form"; }

Oracle parse_oracle(std::string_view name) {
  if (name == "closed_form") return Oracle::closed_form;
  if (name == "pgd") return Oracle::pgd;
  throw std::invalid_argument("unknown oracle: " + std::string(name));
}

double m_statistic(const Vector& theta, const FeatureMap& map, const Vector& beta, double tau2) {
  if (theta.size() != map.W.rows() || beta.size() != map.W.cols())
    throw std::invalid_argument("m_statistic: dimension mismatch");
  using A = special::ActivationDecomposition;
  const double mid = (0.5 * (map.W.transpose() * theta) - beta).squaredNorm();
  return std::sqrt(tau2 + mid + A::mu2 * A::mu2 * theta.squaredNorm());
}

bool in_constraint_set(const Vector& theta, int d, double c0) {
  if (d < 2) throw std::invalid_argument("in_constraint_set: d must be >= 2");
  const double ld = std::log(static_cast<double>(d));
  return theta.cwiseAbs().maxCoeff() <= c0 * std::sqrt(ld / d) && theta.norm() <= c0 &&
         std::abs(theta.sum()) <= c0 * std::sqrt(d / ld);
}

RiskReport analytic_adversarial_risk(const Vector& theta, const FeatureMap& map,
                                     const KernelJ& kernel, const Vector& beta, double tau2,
                                     double eps) {
  if (kernel.gram().rows() != map.W.rows())
    throw std::invalid_argument("analytic_adversarial_risk: kernel does not match the map");
  RiskReport rep;
  rep.method = RiskMethod::analytic_ge;
  rep.m_theta = m_statistic(theta, map, beta, tau2);
  rep.j_norm_theta = kernel.j_norm(theta);
  const double m2 = rep.m_theta * rep.m_theta;
  const double ej = eps * rep.j_norm_theta;
  rep.standard_risk = m2;
  rep.adversarial_risk = m2 + ej * ej + 2.0 * special::kSqrt2OverPi * rep.m_theta * ej;
  rep.outside_constraint_set = map.dim() >= 2 && !in_constraint_set(theta, map.dim());
  return rep;
}

Perturbation pgd_inner_max(const Vector& theta, const FeatureMap& map, const Vector& x, double y,
                           double eps, int steps, int restarts, RandomStream& rng) {
  if (!(eps > 0.0)) throw std::invalid_argument("pgd_inner_max: eps must be > 0");
  const Eigen::Index d = x.size();
  const double step = eps / 20.0;

  Perturbation best;
  best.delta = Vector::Zero(d);
  best.attained = std::abs(residual(theta, map, x, y));

  auto ascent_direction = [&](const Vector& delta, double& abs_r) {
    const Vector pre = map.W * (x + delta);
    const double r = y - theta.dot(pre.unaryExpr([](double v) { return shifted_relu(v); }));
    abs_r = std::abs(r);
    const Vector gate = (pre.array() > 0.0).cast<double>();
    // d/d delta of r^2 is -2 r W^T diag(gate) theta.
    return Vector(-r * (map.W.transpose() * gate.cwiseProduct(theta)));
  };

  for (int k = 0; k < restarts; ++k) {
    Vector delta = Vector::Zero(d);
    if (k == 1) {
      const Vector gate = ((map.W * x).array() > 0.0).cast<double>();
      const Vector g = map.W.transpose() * gate.cwiseProduct(theta);
      const double gn = g.norm();
      if (gn > 0.0) delta = (eps / gn) * g;
    } else if (k >= 2) {
      for (Eigen::Index j = 0; j < d; ++j) delta(j) = rng.normal();
      const double nn = delta.norm();
      if (nn > 0.0) delta *= eps / nn;
    }
    for (int s = 0; s <= steps; ++s) {
      double abs_r = 0.0;
      const Vector g = ascent_direction(delta, abs_r);
      if (abs_r > best.attained) {
        best.attained = abs_r;
        best.delta = delta;
      }
      if (s == steps) break;
      const double gn = g.norm();
      if (gn == 0.0) break;
      delta += (step / gn) * g;
      const double dn = delta.norm();
      if (dn > eps) delta *= eps / dn;
    }
  }
  return best;
}

RiskReport mc_adversarial_risk(const Vector& theta, const FeatureMap& map, const Vector& beta,
                               double tau2, double eps, int n_test, std::uint64_t seed,
                               std::uint64_t trial, Oracle oracle, const PgdSettings& pgd) {
  if (n_test < 1) throw std::invalid_argument("mc_adversarial_risk: n_test must be >= 1");
  if (!(eps >= 0.0)) throw std::invalid_argument("mc_adversarial_risk: eps must be >= 0");
  const int d = map.dim();
  const double tau = std::sqrt(tau2);
  Welford adv;
  Welford stdr;
  Vector x(d);
  for (int i = 0; i < n_test; ++i) {
    RandomStream rng(seed, trial, Purpose::test_x, static_cast<std::uint64_t>(i));
    rng.fill_normal({x.data(), static_cast<std::size_t>(d)});
    const double y = x.dot(beta) + tau * rng.normal();
    const double r = residual(theta, map, x, y);
    stdr.add(r * r);
    double a = std::abs(r);
    if (eps > 0.0) {
      a = oracle == Oracle::pgd ? pgd_inner_max(theta, map, x, y, eps, pgd.steps, pgd.restarts, rng).attained
                                : worst_case_perturbation(theta, map, x, y, eps).attained;
    }
    adv.add(a * a);
  }
  RiskReport rep;
  rep.method = oracle == Oracle::pgd ? RiskMethod::mc_pgd : RiskMethod::mc_closed_form;
  rep.n_test = n_test;
  rep.adversarial_risk = adv.mean;
  rep.standard_error = adv.standard_error();
  rep.standard_risk = stdr.mean;
  rep.standard_risk_se = stdr.standard_error();
  rep.m_theta = m_statistic(theta, map, beta, tau2);
  rep.outside_constraint_set = d >= 2 && !in_constraint_set(theta, d);
  return rep;
}

}  // namespace rfadv
