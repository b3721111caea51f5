#include "rfadv/special_math.hpp"

#include <algorithm>
#include <limits>
#include <sstream>

namespace rfadv::special {

namespace {

std::string describe(const char* fn, const char* msg, double v) {
  std::ostringstream os;
  os << fn << ": " << msg << " (got " << v << ")";
  return os.str();
}

double soft_threshold(double x, double t) {
  if (x > t) return x - t;
  if (x < -t) return x + t;
  return 0.0;
}

}  // namespace

double stieltjes_mp(StieltjesQuery q) {
  if (!(q.z < 0.0) || !std::isfinite(q.z)) {
    throw DomainError(describe("stieltjes_mp", "z must be negative and finite", q.z));
  }
  if (!(q.psi1 > 0.0) || !std::isfinite(q.psi1)) {
    throw DomainError(describe("stieltjes_mp", "psi1 must be positive", q.psi1));
  }
  const double b = 1.0 - q.psi1 - q.z;
  double disc = b * b - 4.0 * q.psi1 * q.z;
  if (disc < 0.0) {
    if (disc < -1e-14) {
      throw DomainError(describe("stieltjes_mp", "negative discriminant", disc));
    }
    disc = 0.0;
  }
  // Both forms are the same root; pick the one without cancellation.
  // b + sqrt(disc) > 0 because disc > b^2 whenever psi1 z < 0.
  const double root = std::sqrt(disc);
  if (b >= 0.0) return -2.0 / (b + root);
  return (root - b) / (2.0 * q.psi1 * q.z);
}

double stieltjes_mp_derivative(double z, double psi1) {
  const double s = stieltjes_mp(z, psi1);
  return (s - psi1 * s * s) / (2.0 * psi1 * z * s + 1.0 - psi1 - z);
}

double sigma_sq_effective(double tau2, double psi1) {
  if (!(tau2 >= 0.0)) {
    throw DomainError(describe("sigma_sq_effective", "tau2 must be nonnegative", tau2));
  }
  const double s = stieltjes_mp(2.0 / kPi - 1.0, psi1);
  const double sigma2 = tau2 + 1.0 - psi1 * (1.0 + (1.0 - 2.0 / kPi) * s);
  if (sigma2 < tau2 - 1e-9 || sigma2 > tau2 + 1.0 + 1e-9) {
    throw DomainError(describe("sigma_sq_effective", "result outside [tau2, tau2+1]", sigma2));
  }
  return sigma2;
}

namespace {

// Objective and lambda-derivative with the complement s = 1 - lambda passed
// separately, so that lambda close to 1 keeps full relative precision.
double f_objective(double lambda, double s_comp, double a, double b, double psi1,
                   double gamma) {
  const double s = stieltjes_mp(2.0 * lambda / kPi - 1.0, psi1);
  const double a2 = a * a;
  const double b2 = b * b;
  const double c = a2 * (1.0 - 2.0 * lambda / kPi) + (2.0 / kPi) * s_comp * b2;
  return 0.5 * lambda * psi1 * (a2 + b2 + c * s) - lambda * gamma * gamma / (2.0 * s_comp);
}

double f_derivative(double lambda, double s_comp, double a, double b, double psi1,
                    double gamma) {
  const double z = 2.0 * lambda / kPi - 1.0;
  const double s = stieltjes_mp(z, psi1);
  const double ds = stieltjes_mp_derivative(z, psi1);
  const double a2 = a * a;
  const double b2 = b * b;
  const double c = a2 * (1.0 - 2.0 * lambda / kPi) + (2.0 / kPi) * s_comp * b2;
  const double dc = -(2.0 / kPi) * (a2 + b2);
  const double inner = a2 + b2 + c * s;
  const double d_inner = dc * s + c * ds * (2.0 / kPi);
  return 0.5 * psi1 * inner + 0.5 * lambda * psi1 * d_inner -
         gamma * gamma / (2.0 * s_comp * s_comp);
}

}  // namespace

double big_f_objective(double lambda, double a, double b, double psi1, double gamma) {
  return f_objective(lambda, 1.0 - lambda, a, b, psi1, gamma);
}

double big_f_objective_derivative(double lambda, double a, double b, double psi1,
                                  double gamma) {
  return f_derivative(lambda, 1.0 - lambda, a, b, psi1, gamma);
}

FSup big_f_sup(double a, double b, double psi1, double gamma) {
  if (!(psi1 > 0.0)) {
    throw DomainError(describe("big_f", "psi1 must be positive", psi1));
  }
  if (!(gamma >= 0.0)) {
    throw DomainError(describe("big_f", "gamma must be nonnegative", gamma));
  }
  constexpr double kCompMin = 1.0 - kLambdaMax;
  FSup out;
  if (f_derivative(0.0, 1.0, a, b, psi1, gamma) <= 0.0) return out;

  // Search over the complement s = 1 - lambda in [kCompMin, 1]; the derivative
  // in lambda changes sign once (quasi-concavity).
  double comp = kCompMin;
  if (f_derivative(1.0 - kCompMin, kCompMin, a, b, psi1, gamma) < 0.0) {
    double lo = kCompMin;  // derivative negative: maximizer at larger s
    double hi = 1.0;       // derivative positive
    for (int it = 0; it < 400; ++it) {
      if (hi - lo <= 4.0 * std::numeric_limits<double>::epsilon() * hi) break;
      const double mid = (hi > 4.0 * lo) ? std::sqrt(lo * hi) : 0.5 * (lo + hi);
      if (f_derivative(1.0 - mid, mid, a, b, psi1, gamma) > 0.0) {
        hi = mid;
      } else {
        lo = mid;
      }
    }
    comp = 0.5 * (lo + hi);
  }
  const double lambda = 1.0 - comp;
  out.lambda = lambda;
  out.lambda_complement = comp;

  const double s = stieltjes_mp(2.0 * lambda / kPi - 1.0, psi1);
  out.value = f_objective(lambda, comp, a, b, psi1, gamma);
  out.d_a = lambda * psi1 * a * (1.0 + (1.0 - 2.0 * lambda / kPi) * s);
  out.d_b = lambda * psi1 * b * (1.0 + (2.0 / kPi) * comp * s);
  out.d_gamma = -lambda * gamma / comp;
  return out;
}

double nu_star_residual(double nu, double a, double rho) {
  return a - nu / rho - nu * std::erf(nu / std::numbers::sqrt2) -
         kSqrt2OverPi * std::exp(-0.5 * nu * nu);
}

double nu_star(NuStarQuery q) {
  if (!(q.rho > 0.0) || !std::isfinite(q.rho)) {
    throw DomainError(describe("nu_star", "rho must be positive", q.rho));
  }
  const double r0 = q.a - kSqrt2OverPi;
  if (r0 < -1e-14) {
    throw NoSolutionError(describe("nu_star", "a <= sqrt(2/pi), no root", q.a));
  }
  if (r0 <= 0.0) return 0.0;

  // nu erf(nu/sqrt 2) + sqrt(2/pi) exp(-nu^2/2) = E|nu + Z| >= nu, so the
  // residual is negative beyond a rho / (1 + rho).
  double lo = 0.0;
  double hi = q.a * q.rho / (1.0 + q.rho);
  const double tol = 1e-8 * std::max(1.0, hi);
  for (int it = 0; it < 200 && hi - lo > tol; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (nu_star_residual(mid, q.a, q.rho) > 0.0) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  double nu = 0.5 * (lo + hi);
  for (int it = 0; it < 6; ++it) {
    const double r = nu_star_residual(nu, q.a, q.rho);
    if (std::abs(r) < 1e-15) break;
    const double dr = -1.0 / q.rho - std::erf(nu / std::numbers::sqrt2);
    nu = std::clamp(nu - r / dr, lo, hi);
  }
  return nu;
}

GValue big_g_full(double omega, double rho, double gamma, double eps) {
  if (!(rho > 0.0)) throw DomainError(describe("big_g", "rho must be positive", rho));
  if (!(gamma >= 0.0)) throw DomainError(describe("big_g", "gamma must be nonnegative", gamma));
  if (!(eps > 0.0)) throw DomainError(describe("big_g", "eps must be positive", eps));
  if (!(omega >= 0.0)) throw DomainError(describe("big_g", "omega must be nonnegative", omega));
  GValue out;
  if (omega == 0.0) return out;
  const double a = gamma * (rho + 1.0) / (eps * omega);
  if (!(a > kSqrt2OverPi + 1e-12)) return out;

  const double nu = nu_star({a, rho});
  const double coef = omega * omega / (2.0 * rho * (rho + 1.0));
  const double erf_term = std::erf(nu / std::numbers::sqrt2);
  const double h = erf_term - a * nu;
  out.active = true;
  out.nu = nu;
  out.value = coef * h;
  // On the root, dh/da = -2 nu and dh/drho (a fixed) = -nu^2 / rho^2.
  out.d_omega = 2.0 * coef / omega * erf_term;
  const double dcoef_drho = -coef * (2.0 * rho + 1.0) / (rho * (rho + 1.0));
  out.d_rho = dcoef_drho * h + coef * (-2.0 * nu * a / (rho + 1.0) - nu * nu / (rho * rho));
  out.d_gamma = -2.0 * coef * nu * (rho + 1.0) / (eps * omega);
  return out;
}

double moreau_envelope_oracle(std::span<const double> x, double rho, double gamma,
                              double eps) {
  if (!(rho > 0.0)) throw DomainError(describe("moreau_envelope_oracle", "rho must be positive", rho));
  if (!(eps > 0.0)) throw DomainError(describe("moreau_envelope_oracle", "eps must be positive", eps));
  const auto n = static_cast<double>(x.size());
  if (x.empty()) return 0.0;
  const double c = n * gamma / eps;

  // For fixed multiplier m the minimizer is v_i = ST(x_i, m rho) / (1 + rho).
  auto l1_of_v = [&](double m) {
    double s = 0.0;
    for (double xi : x) s += std::abs(soft_threshold(xi, m * rho));
    return s / (1.0 + rho);
  };
  // h'(m) = n m - c + |v(m)|_1 is strictly increasing, so the scalar problem is convex.
  auto dh = [&](double m) { return n * m - c + l1_of_v(m); };

  double m = 0.0;
  if (dh(0.0) < 0.0) {
    double lo = 0.0;
    double hi = c / n;
    for (int it = 0; it < 200 && hi - lo > 1e-16 * (1.0 + hi); ++it) {
      const double mid = 0.5 * (lo + hi);
      if (dh(mid) < 0.0) {
        lo = mid;
      } else {
        hi = mid;
      }
    }
    m = 0.5 * (lo + hi);
  }

  double total = 0.5 * n * m * m - m * c;
  for (double xi : x) {
    const double v = soft_threshold(xi, m * rho) / (1.0 + rho);
    total += 0.5 * v * v + (xi - v) * (xi - v) / (2.0 * rho) + m * std::abs(v);
  }
  return total;
}

double moreau_envelope_soft_threshold(std::span<const double> x, double rho,
                                      double gamma, double eps) {
  if (!(rho > 0.0)) throw DomainError(describe("moreau_envelope_soft_threshold", "rho must be positive", rho));
  if (!(eps > 0.0)) throw DomainError(describe("moreau_envelope_soft_threshold", "eps must be positive", eps));
  if (x.empty()) return 0.0;
  const auto n = static_cast<double>(x.size());
  const double c = n * gamma / eps;

  double sq = 0.0;
  for (double xi : x) sq += xi * xi;

  auto st_l1 = [&](double nu) {
    double s = 0.0;
    for (double xi : x) s += std::abs(soft_threshold(xi, nu));
    return s;
  };
  auto g_n = [&](double nu) {
    double resid = 0.0;
    for (double xi : x) {
      const double d = xi - soft_threshold(xi, nu);
      resid += d * d;
    }
    const double slack = std::max(c - st_l1(nu) / (1.0 + rho), 0.0);
    return resid / (2.0 * rho * (rho + 1.0)) - slack * slack / (2.0 * n);
  };
  // dG_n/dnu has the sign of nu/rho - (c - |ST|_1/(1+rho))_+ / n, increasing in nu.
  auto bracket = [&](double nu) {
    return nu / rho - std::max(c - st_l1(nu) / (1.0 + rho), 0.0) / n;
  };

  double nu = 0.0;
  if (bracket(0.0) < 0.0) {
    double lo = 0.0;
    double hi = rho * c / n;
    for (int it = 0; it < 200 && hi - lo > 1e-16 * (1.0 + hi); ++it) {
      const double mid = 0.5 * (lo + hi);
      if (bracket(mid) < 0.0) {
        lo = mid;
      } else {
        hi = mid;
      }
    }
    nu = 0.5 * (lo + hi);
  }
  return sq / (2.0 * (rho + 1.0)) + g_n(nu);
}

double folded_normal_mean(double m) {
  if (!(m >= 0.0)) {
    throw DomainError(describe("folded_normal_mean", "scale must be nonnegative", m));
  }
  return m * kSqrt2OverPi;
}

}  // namespace rfadv::special
