#pragma once

#include <cmath>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>

namespace rfadv {

/// Raised when an argument falls outside the domain of a scalar routine.
class DomainError : public std::domain_error {
 public:
  explicit DomainError(const std::string& what) : std::domain_error(what) {}
};

/// Raised by nu_star when the root equation has no nonnegative solution.
class NoSolutionError : public std::runtime_error {
 public:
  explicit NoSolutionError(const std::string& what)
      : std::runtime_error(what) {}
};

namespace special {

inline constexpr double kPi = std::numbers::pi;
/// sqrt(2/pi), the mean of |G| for a standard normal G.
inline constexpr double kSqrt2OverPi = 0.79788456080286535588;
inline constexpr double kInvSqrt2Pi = 0.39894228040143267794;

struct StieltjesQuery {
  double z;     // < 0
  double psi1;  // > 0
};

/// Hermite-type decomposition of the shifted ReLU max(x,0) - 1/sqrt(2 pi)
/// into constant, linear and orthogonal nonlinear parts.
struct ActivationDecomposition {
  static constexpr double mu0 = 0.0;
  static constexpr double mu1 = 0.5;
  /// sqrt(1/4 - 1/(2 pi))
  static constexpr double mu2 = 0.30140513749454345;
};

struct NuStarQuery {
  double a;    // gamma (rho + 1) / (eps omega)
  double rho;  // tau_g / beta
};

/// Stieltjes transform S(z; psi1) of the Marchenko-Pastur law of W W^T
/// (rows of W uniform on the unit sphere, N/d -> psi1), for z < 0.
///
/// Evaluated through the numerically stable root -2 / (b + sqrt(b^2 - 4 psi1 z))
/// with b = 1 - psi1 - z, which is algebraically identical to the textbook
/// quotient but free of cancellation when psi1 -> 0.
double stieltjes_mp(StieltjesQuery q);
inline double stieltjes_mp(double z, double psi1) {
  return stieltjes_mp(StieltjesQuery{z, psi1});
}

/// dS/dz, from implicit differentiation of psi1 z S^2 + (1 - psi1 - z) S + 1 = 0.
double stieltjes_mp_derivative(double z, double psi1);

/// Effective noise level sigma^2 = tau2 + 1 - psi1 (1 + (1 - 2/pi) S(2/pi - 1; psi1)).
double sigma_sq_effective(double tau2, double psi1);

/// Maximizer and partial derivatives of the inner sup defining F.
struct FSup {
  double value = 0.0;
  double lambda = 0.0;  // maximizing lambda-tilde in [0, 1 - 1e-9]
  double lambda_complement = 1.0;  // 1 - lambda, kept separately for precision
  double d_a = 0.0;
  double d_b = 0.0;
  double d_gamma = 0.0;
};

/// Upper end of the lambda-tilde search interval.
inline constexpr double kLambdaMax = 1.0 - 1e-9;

/// F(a, b, psi1, gamma) = sup over lambda in [0, 1) of
///   (lambda psi1 / 2) {a^2 + b^2 + (a^2 (1 - 2 lambda / pi) + (2/pi)(1 - lambda) b^2)
///                      S(2 lambda / pi - 1; psi1)} - lambda gamma^2 / (2 (1 - lambda)).
///
/// The objective is quasi-concave in lambda (it is concave in the original
/// lambda / (1 - lambda) parametrization), so the maximizer is located by
/// bisection on the sign of the analytic derivative, carried out on 1 - lambda
/// because the maximizer approaches 1 as gamma -> 0. Partials are taken by
/// the envelope theorem at the located maximizer.
FSup big_f_sup(double a, double b, double psi1, double gamma);
inline double big_f(double a, double b, double psi1, double gamma) {
  return big_f_sup(a, b, psi1, gamma).value;
}

/// Objective inside the sup of F, and its lambda-derivative. Exposed for tests.
double big_f_objective(double lambda, double a, double b, double psi1, double gamma);
double big_f_objective_derivative(double lambda, double a, double b, double psi1,
                                  double gamma);

/// Residual a - nu / rho - nu erf(nu / sqrt 2) - sqrt(2/pi) exp(-nu^2 / 2).
/// Strictly decreasing in nu >= 0.
double nu_star_residual(double nu, double a, double rho);

/// Unique nonnegative root of nu_star_residual. Throws NoSolutionError when
/// a <= sqrt(2/pi) (the residual is already nonpositive at 0), with the
/// boundary case a == sqrt(2/pi) returning 0.
double nu_star(NuStarQuery q);

struct GValue {
  double value = 0.0;
  double nu = 0.0;  // 0 on the first branch
  double d_omega = 0.0;
  double d_rho = 0.0;
  double d_gamma = 0.0;
  bool active = false;  // second branch taken
};

/// Large-n limit G(omega; rho, gamma) of the minimized soft-threshold part of
/// the Moreau envelope:
///   0                                             if gamma (rho+1) <= sqrt(2/pi) eps omega
///   omega^2 / (2 rho (rho+1)) (erf(nu*/sqrt 2) - a nu*)   otherwise,
/// with a = gamma (rho+1) / (eps omega). Partials use the root equation for nu*.
GValue big_g_full(double omega, double rho, double gamma, double eps);
inline double big_g(double omega, double rho, double gamma, double eps) {
  return big_g_full(omega, rho, gamma, eps).value;
}

/// Moreau envelope e_f(x; rho) of f(v) = |v|^2/2 - (n gamma / eps - |v|_1)_+^2 / (2n),
/// computed by direct minimization. The penalty is written as
/// min_{m >= 0} n m^2 / 2 - m (n gamma / eps - |v|_1), which makes the inner
/// problem in v separable; the remaining scalar m is searched numerically.
double moreau_envelope_oracle(std::span<const double> x, double rho, double gamma,
                              double eps);

/// Finite-n soft-threshold characterization of the same envelope:
/// |x|^2 / (2 (rho+1)) + min_{nu >= 0} G_n(x; rho, gamma, nu).
double moreau_envelope_soft_threshold(std::span<const double> x, double rho,
                                      double gamma, double eps);

/// E|Z| for Z ~ N(0, m^2), i.e. m sqrt(2/pi).
double folded_normal_mean(double m);

}  // namespace special
}  // namespace rfadv
