#include <doctest.h>

#include <array>
#include <cmath>
#include <random>
#include <vector>

#include "rfadv/special_math.hpp"
#include "rfadv/theory_solver.hpp"

using namespace rfadv;

namespace {

double coord(const SaddleVariables& v, int k) {
  const std::array<double, 5> a{v.alpha, v.tau_g, v.beta, v.gamma, v.tau_q};
  return a[static_cast<std::size_t>(k)];
}

SaddleVariables with(SaddleVariables v, int k, double x) {
  switch (k) {
    case 0: v.alpha = x; break;
    case 1: v.tau_g = x; break;
    case 2: v.beta = x; break;
    case 3: v.gamma = x; break;
    default: v.tau_q = x; break;
  }
  return v;
}

// Term-by-term sum with the indicator off (gamma = 0 gives a = 0).
double r_by_terms(const SaddleVariables& v, const TheoryPoint& p) {
  const double s2 = special::sigma_sq_effective(p.tau2, p.psi1);
  const double a = v.alpha, tg = v.tau_g, b = v.beta, tq = v.tau_q;
  return tq / (2 * a) * (p.tau2 + 1 - s2) - a * tq / 2 + b * tg / 2 * p.psi2 +
         b * (s2 + a * a) / (2 * (tg + b)) - a / tq * special::big_f(tq / a, b, p.psi1, v.gamma);
}

}  // namespace

TEST_CASE("objective_r double-entry value") {
  const TheoryPoint p = make_theory_point(1.0, 3.0, 0.1, 0.5);
  const SaddleVariables v{1.0, 1.0, 1.0, 0.0, 1.0};
  // 30-digit evaluation of the same expression.
  CHECK(objective_r(v, p) == doctest::Approx(0.98697655264215173405).epsilon(1e-10));
  CHECK(objective_r(v, p) == doctest::Approx(r_by_terms(v, p)).epsilon(1e-12));
}

TEST_CASE("objective_r indicator term when gamma is large") {
  const TheoryPoint p = make_theory_point(0.7, 3.0, 0.2, 0.5);
  const SaddleVariables v{0.8, 1.1, 0.9, 40.0, 1.3};
  const ObjectiveEvaluation e = evaluate_objective(v, p);
  REQUIRE(e.indicator);
  const double s2 = p.sigma2;
  const double a = v.gamma * (v.tau_g + v.beta) / (p.eps * v.beta * std::sqrt(v.alpha * v.alpha + s2));
  const double nu = special::nu_star({a, v.tau_g / v.beta});
  CHECK(e.nu == doctest::Approx(nu).epsilon(1e-10));
  const double extra = v.beta * v.beta * (v.alpha * v.alpha + s2) /
                       (2 * v.tau_g * (v.tau_g + v.beta)) * (std::erf(nu / std::sqrt(2.0)) - a * nu);
  CHECK(e.value == doctest::Approx(r_by_terms(v, p) + extra).epsilon(1e-10));
}

TEST_CASE("objective gradient matches central differences") {
  std::mt19937_64 gen(11);
  std::uniform_real_distribution<double> u(0.3, 2.0);
  std::uniform_real_distribution<double> ug(0.0, 1.5);
  const std::array<std::array<double, 4>, 4> points{{{0.5, 3.0, 0.1, 0.5},
                                                      {2.0, 3.0, 0.5, 0.0},
                                                      {4.5, 3.0, 1.0, 0.5},
                                                      {1.2, 2.0, 0.05, 5.0}}};
  int checked = 0;
  for (int k = 0; k < 20; ++k) {
    const auto& q = points[static_cast<std::size_t>(k) % points.size()];
    const TheoryPoint p = make_theory_point(q[0], q[1], q[2], q[3]);
    const SaddleVariables v{u(gen), u(gen), u(gen), ug(gen), u(gen)};
    const ObjectiveEvaluation e = evaluate_objective(v, p);
    for (int j = 0; j < 5; ++j) {
      const double x = coord(v, j);
      const double h = 1e-6 * (1.0 + std::abs(x));
      const double fd = (objective_r(with(v, j, x + h), p) - objective_r(with(v, j, x - h), p)) / (2 * h);
      const double g = e.gradient[static_cast<std::size_t>(j)];
      CHECK(std::abs(fd - g) <= 1e-5 * std::max(1.0, std::abs(g)));
      ++checked;
    }
  }
  CHECK(checked == 100);
}

TEST_CASE("saddle convexity probes") {
  for (double eps : {0.1, 1.0}) {
    const TheoryPoint p = make_theory_point(2.0, 3.0, eps, 0.5);
    const SaddlePoint s = solve_saddle(p);
    const SaddleVariables c = s.variables();
    std::mt19937_64 gen(5);
    std::normal_distribution<double> nd;
    for (int t = 0; t < 10; ++t) {
      const double da = nd(gen), dt = nd(gen);
      const double norm = std::hypot(da, dt);
      const double h = 1e-3;
      auto at = [&](double s_) {
        SaddleVariables v = c;
        v.alpha += s_ * da / norm;
        v.tau_g += s_ * dt / norm;
        return objective_r(v, p);
      };
      CHECK(at(h) - 2 * at(0.0) + at(-h) >= -1e-12);

      const double db = nd(gen), dg = nd(gen), dq = nd(gen);
      const double nn = std::sqrt(db * db + dg * dg + dq * dq);
      auto at2 = [&](double s_) {
        SaddleVariables v = c;
        v.beta += s_ * db / nn;
        v.gamma = std::max(0.0, v.gamma + s_ * dg / nn);
        v.tau_q += s_ * dq / nn;
        return objective_r(v, p);
      };
      if (c.gamma > 2 * h) CHECK(at2(h) - 2 * at2(0.0) + at2(-h) <= 1e-12);
    }
  }
}

TEST_CASE("restarts agree on the unique coordinates") {
  const TheoryPoint p = make_theory_point(1.5, 3.0, 0.5, 0.5);
  const SaddlePoint a = solve_saddle_from(p, {1.0, 1.0, 1.0, 0.5, 1.0});
  const SaddlePoint b = solve_saddle_from(p, {0.3, 2.5, 0.4, 2.0, 3.0});
  REQUIRE(a.converged);
  REQUIRE(b.converged);
  CHECK(a.grad_norm < 1e-7);
  CHECK(std::abs(a.alpha - b.alpha) < 1e-5);
  CHECK(std::abs(a.tau_g / a.beta - b.tau_g / b.beta) < 1e-5);
  CHECK(solve_saddle(p).start_spread < 1e-5);
}

TEST_CASE("risk composition identities") {
  const TheoryPoint p = make_theory_point(2.0, 3.0, 1.0, 0.5);
  const RiskPrediction r = predict_adversarial_risk(p);
  const double rr = r.saddle.beta * r.saddle.nu_star / r.saddle.tau_g;
  const double base = r.saddle.alpha * r.saddle.alpha + p.sigma2;
  CHECK(r.standard_component == doctest::Approx(base).epsilon(1e-14));
  CHECK(r.adversarial_risk - r.standard_component ==
        doctest::Approx(base * rr * (rr + 2 * std::sqrt(2 / special::kPi))).epsilon(1e-12));
  CHECK(r.adversarial_risk >= r.standard_component);

  SaddlePoint s = r.saddle;
  s.nu_star = 0.0;
  CHECK(risk_from_saddle(p, s).adversarial_risk == doctest::Approx(base).epsilon(1e-14));
}

TEST_CASE("zero-estimator limit") {
  for (double tau2 : {0.0, 0.5, 5.0}) {
    const RiskPrediction r = predict_adversarial_risk(make_theory_point(0.01, 3.0, 1.0, tau2));
    CHECK(std::abs(r.adversarial_risk - (1.0 + tau2)) < 0.05);
  }
}

TEST_CASE("eps below the floor is clamped") {
  CHECK(make_theory_point(1.0, 3.0, 0.0, 0.5).eps == kEpsFloor);
  CHECK_THROWS_AS(make_theory_point(-1.0, 3.0, 0.1, 0.5), DomainError);
  CHECK_THROWS_AS(make_theory_point(1.0, 3.0, 0.1, -0.5), DomainError);
}

TEST_CASE("sweep of one point equals a direct prediction") {
  const auto rows = sweep_theory(SweepAxis::psi1, {2.0}, 2.0, 3.0, 0.5, 0.5);
  REQUIRE(rows.size() == 1);
  REQUIRE(rows[0].prediction);
  CHECK(rows[0].prediction->adversarial_risk ==
        doctest::Approx(predict_adversarial_risk(make_theory_point(2.0, 3.0, 0.5, 0.5)).adversarial_risk)
            .epsilon(1e-9));
}

TEST_CASE("warm and cold sweeps agree") {
  std::vector<double> grid;
  for (int k = 0; k < 12; ++k) grid.push_back(0.3 * std::pow(10.0, k / 11.0 * 1.6));
  const auto warm = sweep_theory(SweepAxis::psi1, grid, 1.0, 3.0, 0.5, 0.5, {}, true);
  const auto cold = sweep_theory(SweepAxis::psi1, grid, 1.0, 3.0, 0.5, 0.5, {}, false);
  for (std::size_t i = 0; i < grid.size(); ++i) {
    REQUIRE(warm[i].prediction);
    REQUIRE(cold[i].prediction);
    CHECK(warm[i].prediction->adversarial_risk ==
          doctest::Approx(cold[i].prediction->adversarial_risk).epsilon(1e-4));
  }
}

TEST_CASE("sweep records failures and continues") {
  // psi1 = psi2 at the floor budget sits on the interpolation divergence.
  const auto rows = sweep_theory(SweepAxis::psi1, {1.0, 3.0, 6.0}, 1.0, 3.0, 1e-7, 0.5);
  REQUIRE(rows.size() == 3);
  CHECK(rows[0].prediction);
  CHECK_FALSE(rows[1].prediction);
  CHECK_FALSE(rows[1].error.empty());
  CHECK(rows[2].prediction);
}

TEST_CASE("risk is nondecreasing in tau2") {
  for (double psi1 : {0.5, 2.0, 6.0}) {
    const auto rows = sweep_theory(SweepAxis::tau2, {0.0, 0.5, 1.0, 5.0}, psi1, 3.0, 0.5, 0.0);
    for (std::size_t i = 1; i < rows.size(); ++i) {
      REQUIRE(rows[i].prediction);
      CHECK(rows[i].prediction->adversarial_risk >= rows[i - 1].prediction->adversarial_risk - 1e-9);
    }
  }
}

TEST_CASE("risk of the robust estimator is not monotone in eps") {
  // The estimator is retrained at each budget, so a larger eps can lower the
  // risk it attains. Finite-size simulations show the same drops.
  const auto at = [](double psi1, double eps) {
    return predict_adversarial_risk(make_theory_point(psi1, 3.0, eps, 0.5)).adversarial_risk;
  };
  // N/n = 0.5: at eps = 1 the estimator collapses to theta = 0 (up to the
  // 1e-6 floor on tau_g).
  CHECK(at(1.5, 1.0) == doctest::Approx(1.5).epsilon(1e-4));
  CHECK(at(1.5, 0.5) > at(1.5, 1.0) + 0.2);
  CHECK(at(1.5, 1e-7) > at(1.5, 0.1));
  // N/n = 1.5
  CHECK(at(4.5, 0.5) > at(4.5, 1.0) + 0.2);
  // N/n = 3: increasing over the same grid
  double prev = 0.0;
  for (double eps : {1e-7, 0.1, 0.5, 1.0}) {
    CHECK(at(9.0, eps) >= prev);
    prev = at(9.0, eps);
  }
}
