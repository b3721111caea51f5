#include "rfadv/theory_solver.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include <Eigen/Dense>

#include "rfadv/special_math.hpp"

namespace rfadv {

namespace sm = special;

TheoryPoint make_theory_point(double psi1, double psi2, double eps, double tau2) {
  if (!(psi1 > 0.0) || !std::isfinite(psi1)) throw DomainError("theory point: psi1 must be positive");
  if (!(psi2 > 0.0) || !std::isfinite(psi2)) throw DomainError("theory point: psi2 must be positive");
  if (!(eps >= 0.0) || !std::isfinite(eps)) throw DomainError("theory point: eps must be nonnegative");
  if (!(tau2 >= 0.0) || !std::isfinite(tau2)) throw DomainError("theory point: tau2 must be nonnegative");
  TheoryPoint p;
  p.psi1 = psi1;
  p.psi2 = psi2;
  p.eps = std::max(eps, kEpsFloor);
  p.tau2 = tau2;
  p.sigma2 = sm::sigma_sq_effective(tau2, psi1);
  return p;
}

ObjectiveEvaluation evaluate_objective(const SaddleVariables& v, const TheoryPoint& p) {
  const double alpha = v.alpha;
  const double tg = v.tau_g;
  const double beta = v.beta;
  const double gamma = v.gamma;
  const double tq = v.tau_q;
  if (!(alpha > 0.0) || !(tg > 0.0) || !(beta > 0.0) || !(tq > 0.0) || !(gamma >= 0.0)) {
    std::ostringstream os;
    os << "objective_r: point outside the feasible region (alpha=" << alpha << ", tau_g=" << tg
       << ", beta=" << beta << ", gamma=" << gamma << ", tau_q=" << tq << ")";
    throw ObjectiveError(os.str());
  }
  const double s2 = p.sigma2;
  const double signal = p.tau2 + 1.0 - s2;  // |Sigma^{1/2} theta_0|^2 in the limit
  const double omega2 = alpha * alpha + s2;
  const double omega = std::sqrt(omega2);
  const double rho = tg / beta;
  const double sum = tg + beta;

  const sm::FSup f = sm::big_f_sup(tq / alpha, beta, p.psi1, gamma);
  const sm::GValue g = sm::big_g_full(omega, rho, gamma, p.eps);

  ObjectiveEvaluation out;
  out.value = tq / (2.0 * alpha) * signal - alpha * tq / 2.0 + beta * tg * p.psi2 / 2.0 +
              beta * omega2 / (2.0 * sum) + g.value - alpha / tq * f.value;
  out.lambda = f.lambda;
  out.nu = g.nu;
  out.indicator = g.active;

  auto& grad = out.gradient;
  grad[0] = -tq * signal / (2.0 * alpha * alpha) - tq / 2.0 + beta * alpha / sum +
            g.d_omega * alpha / omega - f.value / tq + f.d_a / alpha;
  grad[1] = beta * p.psi2 / 2.0 - beta * omega2 / (2.0 * sum * sum) + g.d_rho / beta;
  grad[2] = tg * p.psi2 / 2.0 + omega2 * tg / (2.0 * sum * sum) - g.d_rho * tg / (beta * beta) -
            alpha / tq * f.d_b;
  grad[3] = g.d_gamma - alpha / tq * f.d_gamma;
  grad[4] = signal / (2.0 * alpha) - alpha / 2.0 + alpha * f.value / (tq * tq) - f.d_a / tq;

  if (!std::isfinite(out.value)) throw ObjectiveError("objective_r: non-finite value");
  for (double d : grad) {
    if (!std::isfinite(d)) throw ObjectiveError("objective_r: non-finite gradient");
  }
  return out;
}

double objective_r(const SaddleVariables& v, const TheoryPoint& p) {
  return evaluate_objective(v, p).value;
}

namespace {

// Solver coordinates: x = (alpha, tau_g, log beta, log gamma, log tau_q).
// The maximized block lives on a log scale because its size follows the
// regime: O(1) when N < n, shrinking like eps^2 when N > n.
using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec5 = Eigen::Matrix<double, 5, 1>;
using Mat5 = Eigen::Matrix<double, 5, 5>;

// gamma has no positive lower bound in the problem; this floor stands in for 0.
constexpr double kGammaFloor = 1e-12;
constexpr double kMaxLogStep = 2.0;

struct Box {
  Vec5 lo;
  Vec5 hi;
};

Box make_box(const TheoryPoint& p, const SolverSettings& cfg) {
  const double e2 = std::min(1.0, p.eps * p.eps);
  Box b;
  b.lo << cfg.box_lower, cfg.box_lower, std::log(cfg.box_lower * e2), std::log(kGammaFloor * e2),
      std::log(cfg.box_lower * e2);
  const double up = std::log(cfg.box_upper);
  b.hi << cfg.box_upper, cfg.box_upper, up, up, up;
  return b;
}

SaddleVariables to_vars(const Vec5& x) {
  return {x[0], x[1], std::exp(x[2]), std::exp(x[3]), std::exp(x[4])};
}

Vec5 to_coords(const SaddleVariables& v) {
  Vec5 x;
  x << v.alpha, v.tau_g, std::log(v.beta), std::log(std::max(v.gamma, 1e-300)), std::log(v.tau_q);
  return x;
}

struct Eval {
  double value = 0.0;
  Vec5 grad;    // in solver coordinates
  Vec5 metric;  // gradient of R / kappa in scale-free coordinates
  ObjectiveEvaluation raw;
};

class Problem {
 public:
  Problem(const TheoryPoint& p, const SolverSettings& cfg) : p_(p), box_(make_box(p, cfg)) {}

  const Box& box() const { return box_; }

  Eval eval(const Vec5& x) const {
    const SaddleVariables v = to_vars(x);
    Eval e;
    e.raw = evaluate_objective(v, p_);
    e.value = e.raw.value;
    const auto& g = e.raw.gradient;
    e.grad << g[0], g[1], v.beta * g[2], v.gamma * g[3], v.tau_q * g[4];
    // R scales like kappa = min(1, tau_q) together with (beta, tau_q); gamma
    // carries an extra factor eps when N < n.
    const double kappa = std::min(1.0, v.tau_q);
    const double eta = std::min(kappa, p_.eps);
    e.metric << g[0] / kappa, g[1] / kappa, g[2], g[3] * eta / kappa, g[4];
    return e;
  }

  // Jacobian of the solver-coordinate gradient by central differences of the
  // analytic gradient, one-sided at a bound.
  Mat5 hessian(const Vec5& x) const {
    Mat5 h;
    for (int j = 0; j < 5; ++j) {
      const double step = 1e-6 * (1.0 + std::abs(x[j]));
      Vec5 xp = x;
      Vec5 xm = x;
      xp[j] += step;
      xm[j] -= step;
      double denom = 2.0 * step;
      if (xm[j] < box_.lo[j]) {
        xm[j] = x[j];
        denom = step;
      }
      h.col(j) = (eval(xp).grad - eval(xm).grad) / denom;
    }
    return 0.5 * (h + h.transpose());
  }

 private:
  TheoryPoint p_;
  Box box_;
};

bool at_lower(const Box& b, const Vec5& x, int i) {
  return x[i] <= b.lo[i] + 1e-14 * (1.0 + std::abs(b.lo[i]));
}
bool at_upper(const Box& b, const Vec5& x, int i) {
  return x[i] >= b.hi[i] - 1e-14 * (1.0 + std::abs(b.hi[i]));
}

// Projected gradient: a coordinate pinned at a bound contributes nothing when
// the gradient pushes it further out. (alpha, tau_g) descend, the rest ascend.
Vec5 project(const Box& b, const Vec5& x, const Vec5& g) {
  Vec5 pg = g;
  for (int i = 0; i < 5; ++i) {
    const double outward = i < 2 ? g[i] : -g[i];  // > 0 pushes below lo
    if (at_lower(b, x, i) && outward > 0.0) pg[i] = 0.0;
    if (at_upper(b, x, i) && outward < 0.0) pg[i] = 0.0;
  }
  return pg;
}

double stationarity(const Box& b, const Vec5& x, const Eval& e) {
  return project(b, x, e.metric).norm();
}
double inner_stationarity(const Box& b, const Vec5& x, const Eval& e) {
  return project(b, x, e.metric).head<2>().norm();
}

Vec5 clamp(const Box& b, Vec5 x) {
  for (int i = 0; i < 5; ++i) x[i] = std::clamp(x[i], b.lo[i], b.hi[i]);
  return x;
}

// Smallest damping that makes `m + mu I` positive definite and `d` a
// descent direction for `g` (both relative to the scale of m).
template <int K>
Eigen::Matrix<double, K, 1> damped_newton(const Eigen::Matrix<double, K, K>& m,
                                          const Eigen::Matrix<double, K, 1>& g) {
  using Vec = Eigen::Matrix<double, K, 1>;
  using Mat = Eigen::Matrix<double, K, K>;
  const double scale = std::max(m.norm(), 1e-300);
  double mu = 0.0;
  for (int attempt = 0; attempt < 60; ++attempt) {
    Eigen::LLT<Mat> llt(m + mu * Mat::Identity());
    if (llt.info() == Eigen::Success) {
      Vec d = -llt.solve(g);
      if (g.dot(d) < 0.0 && d.allFinite()) return d;
    }
    mu = (mu == 0.0) ? 1e-10 * scale : mu * 10.0;
  }
  return -g;
}

struct InnerResult {
  Vec5 x;
  Eval e;
  bool ok = false;
};

// Projected Newton on the strictly convex (alpha, tau_g) block.
InnerResult minimize_inner(const Problem& prob, Vec5 x, const SolverSettings& cfg) {
  const Box& b = prob.box();
  x = clamp(b, x);
  Eval e = prob.eval(x);
  for (int it = 0; it < cfg.inner_max_iters; ++it) {
    if (inner_stationarity(b, x, e) < cfg.inner_tol) break;
    const Vec5 pg = project(b, x, e.grad);
    std::array<bool, 2> free{};
    for (int j = 0; j < 2; ++j) {
      free[j] = pg[j] != 0.0 || !(at_lower(b, x, j) || at_upper(b, x, j));
    }
    Vec2 g2 = e.grad.head<2>();
    Eigen::Matrix2d h2;
    for (int j = 0; j < 2; ++j) {
      const double step = 1e-6 * (1.0 + std::abs(x[j]));
      Vec5 xp = x;
      Vec5 xm = x;
      xp[j] += step;
      xm[j] -= step;
      double denom = 2.0 * step;
      if (xm[j] < b.lo[j]) {
        xm[j] = x[j];
        denom = step;
      }
      h2.col(j) = (prob.eval(xp).grad.head<2>() - prob.eval(xm).grad.head<2>()) / denom;
    }
    h2 = 0.5 * (h2 + h2.transpose());
    for (int j = 0; j < 2; ++j) {
      if (!free[j]) {
        g2[j] = 0.0;
        h2.row(j).setZero();
        h2.col(j).setZero();
        h2(j, j) = 1.0;
      }
    }
    const Vec2 d = damped_newton<2>(h2, g2);

    double t = 1.0;
    bool moved = false;
    for (int ls = 0; ls < 60; ++ls) {
      Vec5 xn = x;
      xn.head<2>() += t * d;
      xn = clamp(b, xn);
      const Vec2 step = xn.head<2>() - x.head<2>();
      if (step.norm() == 0.0) break;
      const Eval en = prob.eval(xn);
      if (en.value <= e.value + 1e-4 * e.grad.head<2>().dot(step)) {
        x = xn;
        e = en;
        moved = true;
        break;
      }
      t *= 0.5;
    }
    if (!moved) {
      // The Newton step is below roundoff in the value: accept it when it
      // still reduces stationarity.
      Vec5 xn = x;
      xn.head<2>() += d;
      xn = clamp(b, xn);
      const Eval en = prob.eval(xn);
      if (inner_stationarity(b, xn, en) < inner_stationarity(b, x, e)) {
        x = xn;
        e = en;
      } else {
        break;
      }
    }
  }
  InnerResult r;
  r.x = x;
  r.e = e;
  r.ok = inner_stationarity(b, x, e) < cfg.inner_tol;
  return r;
}

// Reduced Hessian of the outer value function Phi(w) = min_u R(u, w):
// R_ww - R_wu R_uu^{-1} R_uw over the free inner coordinates.
Eigen::Matrix3d outer_hessian(const Problem& prob, const Vec5& x) {
  const Box& b = prob.box();
  const Mat5 h = prob.hessian(x);
  Eigen::Matrix3d hww = h.block<3, 3>(2, 2);
  std::vector<int> free;
  for (int j = 0; j < 2; ++j) {
    if (!(at_lower(b, x, j) || at_upper(b, x, j))) free.push_back(j);
  }
  if (!free.empty()) {
    const int k = static_cast<int>(free.size());
    Eigen::MatrixXd huu(k, k);
    Eigen::MatrixXd huw(k, 3);
    for (int i = 0; i < k; ++i) {
      for (int j = 0; j < k; ++j) huu(i, j) = h(free[i], free[j]);
      for (int j = 0; j < 3; ++j) huw(i, j) = h(free[i], 2 + j);
    }
    Eigen::LDLT<Eigen::MatrixXd> ldlt(huu);
    hww -= huw.transpose() * ldlt.solve(huw);
  }
  return 0.5 * (hww + hww.transpose());
}

SaddlePoint finish(const Box& b, const Vec5& x, const Eval& e, int iters, bool converged) {
  const SaddleVariables v = to_vars(x);
  SaddlePoint s;
  s.alpha = v.alpha;
  s.tau_g = v.tau_g;
  s.beta = v.beta;
  s.gamma = v.gamma;
  s.tau_q = v.tau_q;
  s.lambda_star = e.raw.lambda;
  s.nu_star = e.raw.nu;
  s.objective = e.value;
  s.grad_norm = stationarity(b, x, e);
  s.converged = converged;
  s.iterations = iters;
  return s;
}

}  // namespace

SaddlePoint solve_saddle_from(const TheoryPoint& p, const SaddleVariables& start,
                              const SolverSettings& cfg) {
  Problem prob(p, cfg);
  const Box& b = prob.box();
  Vec5 x = clamp(b, to_coords(start));

  InnerResult in = minimize_inner(prob, x, cfg);
  x = in.x;
  Eval e = in.e;
  SaddlePoint best = finish(b, x, e, 0, false);

  int it = 0;
  for (; it < cfg.max_iters; ++it) {
    const double stat = stationarity(b, x, e);
    if (stat < cfg.tol && in.ok) return finish(b, x, e, it, true);
    if (stat < best.grad_norm) best = finish(b, x, e, it, false);

    // Ascent direction for the concave outer problem.
    Vec3 gw = e.grad.tail<3>();
    Eigen::Matrix3d hw = outer_hessian(prob, x);
    for (int j = 0; j < 3; ++j) {
      const int i = 2 + j;
      if ((at_lower(b, x, i) && gw[j] < 0.0) || (at_upper(b, x, i) && gw[j] > 0.0)) {
        gw[j] = 0.0;
        hw.row(j).setZero();
        hw.col(j).setZero();
        hw(j, j) = -1.0;
      }
    }
    Vec3 d = damped_newton<3>(-hw, -gw);
    // Trust region on the log scale: far from the saddle the inner problem can
    // be unbounded, and a long step lands on the artificial alpha bound.
    const double longest = d.cwiseAbs().maxCoeff();
    if (longest > kMaxLogStep) d *= kMaxLogStep / longest;
    const bool pinned_now = at_upper(b, x, 0);

    // Line search on Phi(w) = min_u R(u, w), re-solving the inner block at
    // every trial point. Near stationarity Phi moves below roundoff, so a
    // step is also accepted when it shrinks the stationarity measure.
    double t = 1.0;
    bool moved = false;
    for (int ls = 0; ls < 50; ++ls) {
      Vec5 xn = x;
      xn.tail<3>() += t * d;
      xn = clamp(b, xn);
      const Vec3 step = xn.tail<3>() - x.tail<3>();
      if (step.norm() == 0.0) break;
      InnerResult trial;
      try {
        trial = minimize_inner(prob, xn, cfg);
      } catch (const ObjectiveError&) {
        t *= 0.5;
        continue;
      }
      if (!pinned_now && at_upper(b, trial.x, 0)) {
        t *= 0.5;
        continue;
      }
      const double stat_new = stationarity(b, trial.x, trial.e);
      const bool armijo = trial.e.value >= e.value + 1e-4 * e.grad.tail<3>().dot(step);
      if ((armijo && stat_new < 10.0 * stat) || stat_new < 0.9 * stat) {
        x = trial.x;
        e = trial.e;
        in = trial;
        moved = true;
        break;
      }
      t *= 0.5;
    }
    if (!moved) break;
  }
  const SaddlePoint last = finish(b, x, e, it, false);
  if (last.grad_norm < cfg.tol && in.ok) {
    SaddlePoint s = last;
    s.converged = true;
    return s;
  }
  if (last.grad_norm < best.grad_norm) best = last;
  best.iterations = it;
  return best;
}


namespace {

std::vector<SaddleVariables> default_starts(const TheoryPoint& p, int count) {
  // Interior starts spread over an order of magnitude; gamma sits above the
  // indicator threshold so the adversarial branch is visible from the start.
  const std::array<SaddleVariables, 3> base{{
      {1.0, 1.0, 1.0, 1.0, 1.0},
      {0.5, 2.0, 0.7, 0.5, 1.5},
      {2.0, 0.5, 1.5, 1.5, 0.7},
  }};
  std::vector<SaddleVariables> out;
  for (int i = 0; i < count; ++i) {
    SaddleVariables v = base[static_cast<std::size_t>(i) % base.size()];
    if (i >= static_cast<int>(base.size())) {
      const double f = 1.0 + 0.3 * (i / static_cast<int>(base.size()));
      v.alpha *= f;
      v.tau_q /= f;
    }
    v.gamma *= p.eps;
    out.push_back(v);
  }
  return out;
}

double ratio_gap(const SaddlePoint& a, const SaddlePoint& b) {
  const double da = std::abs(a.alpha - b.alpha) / (1.0 + std::abs(a.alpha));
  const double ra = a.tau_g / a.beta;
  const double rb = b.tau_g / b.beta;
  const double dr = std::abs(ra - rb) / (1.0 + std::abs(ra));
  return std::max(da, dr);
}

void check_bounds(SaddlePoint& s, const SolverSettings& cfg) {
  const double hi = cfg.box_upper * (1.0 - 1e-9);
  std::ostringstream os;
  if (s.alpha >= hi) os << "alpha ";
  if (s.tau_g >= hi) os << "tau_g ";
  if (s.beta >= hi) os << "beta ";
  if (s.tau_q >= hi) os << "tau_q ";
  if (s.gamma >= hi) os << "gamma ";
  const std::string pinned = os.str();
  if (!pinned.empty()) {
    throw ConvergenceError("solve_saddle: solution pinned at the upper box bound: " + pinned, s);
  }
}

}  // namespace

SaddlePoint solve_saddle(const TheoryPoint& p, const SolverSettings& cfg,
                         std::optional<SaddleVariables> warm) {
  std::vector<SaddleVariables> starts;
  if (warm) starts.push_back(*warm);
  for (const auto& s : default_starts(p, cfg.starts)) starts.push_back(s);

  std::vector<SaddlePoint> converged;
  SaddlePoint best_failed;
  best_failed.grad_norm = std::numeric_limits<double>::infinity();
  for (const auto& st : starts) {
    SaddlePoint s;
    try {
      s = solve_saddle_from(p, st, cfg);
    } catch (const ObjectiveError&) {
      continue;
    } catch (const DomainError&) {
      continue;
    }
    if (s.converged) {
      converged.push_back(s);
    } else if (s.grad_norm < best_failed.grad_norm) {
      best_failed = s;
    }
  }
  if (converged.empty()) {
    std::ostringstream os;
    os << "solve_saddle: no start converged (psi1=" << p.psi1 << ", psi2=" << p.psi2
       << ", eps=" << p.eps << ", tau2=" << p.tau2 << "); best grad_norm " << best_failed.grad_norm;
    throw ConvergenceError(os.str(), best_failed);
  }
  auto best = std::min_element(converged.begin(), converged.end(),
                               [](const SaddlePoint& a, const SaddlePoint& b) {
                                 return a.grad_norm < b.grad_norm;
                               });
  SaddlePoint out = *best;
  double spread = 0.0;
  for (const auto& s : converged) spread = std::max(spread, ratio_gap(out, s));
  out.start_spread = spread;
  if (spread > cfg.start_agreement) {
    std::ostringstream os;
    os << "restarts disagree on (alpha, tau_g/beta) by " << spread;
    out.warnings.push_back(os.str());
  }
  if (static_cast<int>(converged.size()) < static_cast<int>(starts.size())) {
    std::ostringstream os;
    os << (starts.size() - converged.size()) << " of " << starts.size()
       << " starts failed to converge";
    out.warnings.push_back(os.str());
  }
  check_bounds(out, cfg);
  return out;
}

RiskPrediction risk_from_saddle(const TheoryPoint& p, const SaddlePoint& s) {
  RiskPrediction r;
  r.point = p;
  r.saddle = s;
  r.standard_component = s.alpha * s.alpha + p.sigma2;
  const double ratio = s.beta * s.nu_star / s.tau_g;
  r.adversarial_risk =
      r.standard_component * (1.0 + ratio * ratio + 2.0 * sm::kSqrt2OverPi * ratio);
  return r;
}

RiskPrediction predict_adversarial_risk(const TheoryPoint& p, const SolverSettings& cfg,
                                        std::optional<SaddleVariables> warm) {
  return risk_from_saddle(p, solve_saddle(p, cfg, warm));
}

std::vector<SweepEntry> sweep_theory(SweepAxis axis, const std::vector<double>& grid,
                                     double psi1, double psi2, double eps, double tau2,
                                     const SolverSettings& cfg, bool warm_start) {
  if (grid.empty()) throw DomainError("sweep_theory: empty grid");
  std::vector<SweepEntry> out;
  out.reserve(grid.size());
  std::optional<SaddleVariables> warm;
  for (double v : grid) {
    SweepEntry entry;
    entry.value = v;
    try {
      double a = psi1, e = eps, t = tau2;
      switch (axis) {
        case SweepAxis::psi1: a = v; break;
        case SweepAxis::eps: e = v; break;
        case SweepAxis::tau2: t = v; break;
      }
      const TheoryPoint p = make_theory_point(a, psi2, e, t);
      entry.prediction = predict_adversarial_risk(p, cfg, warm_start ? warm : std::nullopt);
      warm = entry.prediction->saddle.variables();
    } catch (const std::exception& ex) {
      entry.error = ex.what();
    }
    out.push_back(std::move(entry));
  }
  return out;
}

}  // namespace rfadv
