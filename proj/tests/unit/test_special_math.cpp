#include <doctest.h>

#include <Eigen/Dense>

#include <cmath>
#include <random>
#include <vector>

#include "rfadv/special_math.hpp"

using namespace rfadv;
using namespace rfadv::special;

namespace {

// Textbook quotient form, independent of the library's stable root.
double stieltjes_textbook(double z, double psi1) {
  const double b = 1.0 - psi1 - z;
  return (b - std::sqrt(b * b - 4.0 * psi1 * z)) / (-2.0 * psi1 * z);
}

double residual(double z, double psi1, double s) {
  return psi1 * z * s * s + (1.0 - psi1 - z) * s + 1.0;
}

double nu_residual_oracle(double nu, double a, double rho) {
  return a - nu / rho - nu * std::erf(nu / std::sqrt(2.0)) -
         std::sqrt(2.0 / kPi) * std::exp(-nu * nu / 2.0);
}

double bisect_nu(double a, double rho) {
  double lo = 0.0, hi = a * rho;
  while (hi - lo > 1e-13) {
    const double m = 0.5 * (lo + hi);
    (nu_residual_oracle(m, a, rho) > 0 ? lo : hi) = m;
  }
  return 0.5 * (lo + hi);
}

// f(v) + |x - v|^2 / (2 rho) with f from the envelope definition.
double envelope_objective(const std::vector<double>& x, const std::vector<double>& v, double rho,
                          double gamma, double eps) {
  const double n = static_cast<double>(x.size());
  double sq = 0.0, l1 = 0.0, dist = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sq += v[i] * v[i];
    l1 += std::abs(v[i]);
    dist += (x[i] - v[i]) * (x[i] - v[i]);
  }
  const double slack = std::max(n * gamma / eps - l1, 0.0);
  return 0.5 * sq - slack * slack / (2.0 * n) + dist / (2.0 * rho);
}

}  // namespace

TEST_CASE("stieltjes_mp reference values") {
  CHECK(stieltjes_mp(-1.0, 1.0) == doctest::Approx((1.0 - std::sqrt(5.0)) / 2.0).epsilon(1e-14));
  CHECK(std::abs(residual(-1.0, 1.0, stieltjes_mp(-1.0, 1.0))) < 1e-12);
  CHECK(stieltjes_mp(-0.5, 1e-8) == doctest::Approx(-2.0 / 3.0).epsilon(1e-7));
  // High-precision quotient form evaluated with mpmath.
  CHECK(stieltjes_mp(2.0 / kPi - 1.0, 2.0) == doctest::Approx(-1.690102686128849167).epsilon(1e-13));
}

TEST_CASE("stieltjes_mp agrees with the quotient form and is decreasing") {
  std::mt19937_64 gen(11);
  std::uniform_real_distribution<double> lz(-3.0, 1.0), lp(-3.0, 2.0);
  for (int i = 0; i < 500; ++i) {
    const double z = -std::pow(10.0, lz(gen));
    const double psi1 = std::pow(10.0, lp(gen));
    const double s = stieltjes_mp(z, psi1);
    CHECK(s < 0.0);
    // Rounding in s alone moves the residual by ulp(psi1 z s^2).
    CHECK(std::abs(residual(z, psi1, s)) < 1e-12 * std::max(1.0, std::abs(psi1 * z * s * s)));
    if (psi1 > 1e-2 && std::abs(z) > 1e-2)
      CHECK(s == doctest::Approx(stieltjes_textbook(z, psi1)).epsilon(1e-9));
    // dS/dz = -int rho(s) / (z - s)^2 < 0
    CHECK(stieltjes_mp(z * 0.9, psi1) < s);
    const double h = 1e-6 * std::abs(z);
    const double fd = (stieltjes_mp(z + h, psi1) - stieltjes_mp(z - h, psi1)) / (2 * h);
    CHECK(stieltjes_mp_derivative(z, psi1) == doctest::Approx(fd).epsilon(1e-5));
  }
}

TEST_CASE("stieltjes_mp domain errors") {
  CHECK_THROWS_AS(stieltjes_mp(0.0, 1.0), DomainError);
  CHECK_THROWS_AS(stieltjes_mp(0.5, 1.0), DomainError);
  CHECK_THROWS_AS(stieltjes_mp(-1.0, 0.0), DomainError);
}

TEST_CASE("sigma_sq_effective") {
  CHECK(sigma_sq_effective(0.5, 1e-8) == doctest::Approx(1.5).epsilon(1e-7));
  const double s01 = sigma_sq_effective(0.0, 1.0);
  CHECK(s01 >= 0.0);
  CHECK(s01 <= 1.0);
  CHECK(s01 == doctest::Approx(0.4479062053367585257).epsilon(1e-12));
  // Small-psi1 slope pi / (2 (pi - 1)) of 1 - sigma^2.
  const double small = 1.0 - sigma_sq_effective(0.0, 0.01);
  CHECK(std::abs(small - 0.01 * kPi / (2.0 * (kPi - 1.0))) < 5e-5);
  CHECK(sigma_sq_effective(0.5, 3.0) == doctest::Approx(0.64487377560766022728).epsilon(1e-12));
  CHECK_THROWS_AS(sigma_sq_effective(-0.1, 1.0), DomainError);
  CHECK_THROWS_AS(sigma_sq_effective(0.5, 0.0), DomainError);
}

TEST_CASE("big_f trivial cases and reference value") {
  CHECK(big_f(0.0, 0.0, 1.0, 0.0) == 0.0);
  CHECK(big_f(1.0, 1.0, 1.0, 100.0) == 0.0);
  // Dense grid on [0, 1 - 1e-6] at 1e-6 resolution refined by golden section (mpmath).
  const FSup f = big_f_sup(1.0, 1.0, 2.0, 0.5);
  CHECK(f.value == doctest::Approx(0.49899196545863399559).epsilon(1e-10));
  CHECK(f.lambda == doctest::Approx(0.721437324314878).epsilon(1e-6));
}

TEST_CASE("big_f matches a grid search and is nonincreasing in gamma") {
  std::mt19937_64 gen(5);
  std::uniform_real_distribution<double> u(0.05, 3.0);
  for (int i = 0; i < 40; ++i) {
    const double a = u(gen), b = u(gen), psi1 = u(gen), gamma = 0.3 * u(gen);
    double best = 0.0;
    for (int k = 0; k <= 20000; ++k) {
      const double lam = (1.0 - 1e-6) * k / 20000.0;
      best = std::max(best, big_f_objective(lam, a, b, psi1, gamma));
    }
    const double f = big_f(a, b, psi1, gamma);
    CHECK(f >= 0.0);
    CHECK(f >= best - 1e-12);
    CHECK(f - best < 1e-6 * (1.0 + best));
    CHECK(big_f(a, b, psi1, gamma * 1.5) <= f + 1e-14);
  }
}

TEST_CASE("big_f partial derivatives match finite differences") {
  const double a = 0.8, b = 1.3, psi1 = 2.5, gamma = 0.4, h = 1e-6;
  const FSup f = big_f_sup(a, b, psi1, gamma);
  CHECK(f.d_a == doctest::Approx((big_f(a + h, b, psi1, gamma) - big_f(a - h, b, psi1, gamma)) / (2 * h)).epsilon(1e-6));
  CHECK(f.d_b == doctest::Approx((big_f(a, b + h, psi1, gamma) - big_f(a, b - h, psi1, gamma)) / (2 * h)).epsilon(1e-6));
  CHECK(f.d_gamma == doctest::Approx((big_f(a, b, psi1, gamma + h) - big_f(a, b, psi1, gamma - h)) / (2 * h)).epsilon(1e-6));
}

TEST_CASE("nu_star") {
  CHECK(nu_star({std::sqrt(2.0 / kPi), 1.0}) == 0.0);
  const double root = nu_star({2.0, 1.0});
  CHECK(root == doctest::Approx(bisect_nu(2.0, 1.0)).epsilon(1e-10));
  CHECK(root == doctest::Approx(0.89947156125374354962).epsilon(1e-10));
  CHECK(std::abs(nu_star_residual(root, 2.0, 1.0)) < 1e-10);
  CHECK_THROWS_AS(nu_star({0.5, 1.0}), NoSolutionError);
}

TEST_CASE("nu_star residual is strictly decreasing and roots are accurate") {
  std::mt19937_64 gen(3);
  std::uniform_real_distribution<double> la(-0.09, 3.0), lr(-3.0, 3.0), un(0.0, 5.0);
  for (int i = 0; i < 300; ++i) {
    const double a = std::sqrt(2.0 / kPi) + std::pow(10.0, la(gen)) - 0.8;
    const double rho = std::pow(10.0, lr(gen));
    double n1 = un(gen), n2 = un(gen);
    if (n1 > n2) std::swap(n1, n2);
    if (n1 < n2) CHECK(nu_star_residual(n1, a, rho) > nu_star_residual(n2, a, rho));
    if (a <= std::sqrt(2.0 / kPi)) continue;
    const double r = nu_star({a, rho});
    CHECK(r >= 0.0);
    CHECK(std::abs(nu_star_residual(r, a, rho)) < 1e-10);
  }
}

TEST_CASE("big_g branches and continuity") {
  CHECK(big_g(1.0, 1.0, 0.1, 1.0) == 0.0);
  CHECK(big_g(1.0, 2.0, 0.0, 1.0) == 0.0);
  const double g = big_g(1.0, 1.0, 1.0, 0.5);
  CHECK(g == doctest::Approx(-1.7529212544445751597).epsilon(1e-10));
  CHECK(g <= 0.0);
  // gamma (rho + 1) decreasing to sqrt(2/pi) eps omega from above.
  const double edge = std::sqrt(2.0 / kPi) * 0.7 * 1.3 / 3.0;
  double prev = -1.0;
  for (double t : {1e-2, 1e-3, 1e-4, 1e-6}) {
    const double v = big_g(1.3, 2.0, edge * (1.0 + t), 0.7);
    CHECK(v <= 0.0);
    CHECK(std::abs(v) < std::abs(prev) + 1e-300);
    prev = v;
  }
  CHECK(std::abs(prev) < 1e-10);
}

TEST_CASE("big_g partial derivatives match finite differences") {
  const double om = 1.1, rho = 0.7, gamma = 0.9, eps = 0.6, h = 1e-6;
  const GValue g = big_g_full(om, rho, gamma, eps);
  REQUIRE(g.active);
  CHECK(g.d_omega == doctest::Approx((big_g(om + h, rho, gamma, eps) - big_g(om - h, rho, gamma, eps)) / (2 * h)).epsilon(1e-6));
  CHECK(g.d_rho == doctest::Approx((big_g(om, rho + h, gamma, eps) - big_g(om, rho - h, gamma, eps)) / (2 * h)).epsilon(1e-6));
  CHECK(g.d_gamma == doctest::Approx((big_g(om, rho, gamma + h, eps) - big_g(om, rho, gamma - h, eps)) / (2 * h)).epsilon(1e-6));
}

TEST_CASE("moreau envelope: trivial inputs and brute force in two dimensions") {
  const std::vector<double> zero(7, 0.0);
  CHECK(moreau_envelope_oracle(zero, 0.8, 0.0, 1.0) == doctest::Approx(0.0));

  const std::vector<double> x{0.9, -0.4};
  for (double gamma : {0.05, 0.3, 2.0}) {
    double best = 1e300;
    std::vector<double> v(2), bv(2);
    for (int i = -1500; i <= 1500; ++i)
      for (int j = -1500; j <= 1500; j += 3) {
        v = {i * 1e-3, j * 1e-3};
        const double f = envelope_objective(x, v, 0.6, gamma, 1.0);
        if (f < best) {
          best = f;
          bv = v;
        }
      }
    // local refinement around the grid minimizer
    for (double step = 1e-3; step > 1e-9; step *= 0.5)
      for (bool moved = true; moved;) {
        moved = false;
        for (int k = 0; k < 2; ++k)
          for (double s : {step, -step}) {
            std::vector<double> c = bv;
            c[k] += s;
            const double f = envelope_objective(x, c, 0.6, gamma, 1.0);
            if (f < best - 1e-15) {
              best = f;
              bv = c;
              moved = true;
            }
          }
      }
    CHECK(moreau_envelope_oracle(x, 0.6, gamma, 1.0) == doctest::Approx(best).epsilon(1e-6));
  }
}

TEST_CASE("moreau envelope: oracle matches the soft-threshold form on random inputs") {
  std::mt19937_64 gen(17);
  std::normal_distribution<double> nd;
  std::uniform_real_distribution<double> u(0.2, 2.0);
  for (int rep = 0; rep < 20; ++rep) {
    std::vector<double> x(50);
    for (double& v : x) v = nd(gen);
    const double rho = u(gen), gamma = 0.5 * u(gen), eps = u(gen);
    const double a = moreau_envelope_oracle(x, rho, gamma, eps);
    const double b = moreau_envelope_soft_threshold(x, rho, gamma, eps);
    CHECK(std::abs(a - b) < 1e-6 * std::max(1.0, std::abs(a)));
  }
}

TEST_CASE("moreau envelope: large-n limit and the quadratic branch") {
  std::mt19937_64 gen(23);
  std::normal_distribution<double> nd;
  auto draw = [&](std::size_t n) {
    std::vector<double> x(n);
    for (double& v : x) v = nd(gen);
    return x;
  };
  auto mean_sq = [](const std::vector<double>& x) {
    double sq = 0.0;
    for (double v : x) sq += v * v;
    return sq / static_cast<double>(x.size());
  };

  // At n = 2000 most of the gap to the omega = 1 limit is the spread of |x|^2 / n,
  // so compare against the limit at the realized scale.
  const std::vector<double> x = draw(2000);
  const double n = static_cast<double>(x.size());
  const double w2 = mean_sq(x);
  const double at_scale = w2 / (2.0 * 2.0) + big_g(std::sqrt(w2), 1.0, 0.8, 1.0);
  CHECK(std::abs(moreau_envelope_oracle(x, 1.0, 0.8, 1.0) / n - at_scale) < 0.02);

  const std::vector<double> big = draw(200000);
  const double limit = 1.0 / (2.0 * 2.0) + big_g(1.0, 1.0, 0.8, 1.0);
  CHECK(std::abs(moreau_envelope_oracle(big, 1.0, 0.8, 1.0) / 200000.0 - limit) < 0.005);

  // gamma (rho + 1) below sqrt(2/pi) eps omega: G vanishes and only the quadratic part remains.
  CHECK(moreau_envelope_oracle(x, 1.0, 0.1, 1.0) / n == doctest::Approx(w2 / 4.0).epsilon(1e-9));
  // Far above it the penalty dominates: G ~ -gamma^2 / (2 eps^2).
  CHECK(moreau_envelope_oracle(x, 1.0, 50.0, 1.0) / n ==
        doctest::Approx(w2 / 4.0 + big_g(std::sqrt(w2), 1.0, 50.0, 1.0)).epsilon(1e-3));
}

TEST_CASE("folded_normal_mean") {
  CHECK(folded_normal_mean(0.0) == 0.0);
  CHECK(folded_normal_mean(1.0) == doctest::Approx(0.7978845608028654).epsilon(1e-14));
  CHECK_THROWS_AS(folded_normal_mean(-1.0), DomainError);
  std::mt19937_64 gen(29);
  std::normal_distribution<double> nd(0.0, 2.5);
  double s = 0.0, s2 = 0.0;
  const int m = 1000000;
  for (int i = 0; i < m; ++i) {
    const double v = std::abs(nd(gen));
    s += v;
    s2 += v * v;
  }
  const double mean = s / m;
  const double se = std::sqrt((s2 / m - mean * mean) / m);
  CHECK(std::abs(mean - folded_normal_mean(2.5)) < 3.0 * se);
}

TEST_CASE("activation decomposition matches the second moment of the shifted ReLU") {
  using A = ActivationDecomposition;
  // E[(max(G,0) - c)^2] = 1/2 - 2 c E[G_+] + c^2 with E[G_+] = c = 1/sqrt(2 pi).
  const double c = kInvSqrt2Pi;
  const double second = 0.5 - 2.0 * c * c + c * c;
  CHECK(A::mu0 * A::mu0 + A::mu1 * A::mu1 + A::mu2 * A::mu2 == doctest::Approx(second).epsilon(1e-14));
}

TEST_CASE("stieltjes_mp matches the eigenvalue average of a sampled W W^T") {
  const int d = 2000, N = 4000;
  std::mt19937_64 gen(41);
  std::normal_distribution<double> nd;
  Eigen::MatrixXd W(N, d);
  for (int i = 0; i < N; ++i) {
    for (int j = 0; j < d; ++j) W(i, j) = nd(gen);
    W.row(i).normalize();
  }
  // The nonzero spectrum of W W^T equals that of W^T W; the rest is 0.
  const Eigen::MatrixXd small = W.transpose() * W;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(small, Eigen::EigenvaluesOnly);
  const double z = 2.0 / kPi - 1.0;
  double sum = (N - d) * (1.0 / z);
  for (int i = 0; i < d; ++i) sum += 1.0 / (z - es.eigenvalues()(i));
  CHECK(std::abs(sum / N - stieltjes_mp(z, 2.0)) < 0.02);
}
