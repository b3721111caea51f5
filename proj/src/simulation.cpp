#include "rfadv/simulation.hpp"

#include <Eigen/Eigenvalues>
#include <ceres/gradient_problem.h>
#include <ceres/gradient_problem_solver.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>

#include "rfadv/special_math.hpp"

namespace rfadv {

namespace {

constexpr double kShift = special::kInvSqrt2Pi;

class Fnv1a {
 public:
  template <typename T>
  void add(const T& v) {
    const auto* p = reinterpret_cast<const unsigned char*>(&v);
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      h_ ^= p[i];
      h_ *= 0x100000001b3ull;
    }
  }
  std::uint64_t value() const { return h_; }

 private:
  std::uint64_t h_ = 0xcbf29ce484222325ull;
};

// Largest eigenvalue of M^{-1} A^T A (M = I when null) by power iteration
// from a fixed start. The iteration is self-adjoint in the M inner product.
double top_eigenvalue(const Matrix& A, const Eigen::LLT<Matrix>* metric, int iters = 60) {
  Vector v = Vector::Ones(A.cols()) / std::sqrt(static_cast<double>(A.cols()));
  double lam = 0.0;
  for (int k = 0; k < iters; ++k) {
    Vector w = A.transpose() * (A * v);
    if (metric) w = metric->solve(w);
    lam = w.norm() / v.norm();
    if (lam == 0.0) return 0.0;
    v = w / w.norm();
  }
  return lam;
}

}  // namespace

std::string to_string(LossVariant v) {
  switch (v) {
    case LossVariant::exact_minimax: return "exact_minimax";
    case LossVariant::l_circle: return "l_circle";
    case LossVariant::l_double_circle: return "l_double_circle";
  }
  return "unknown";
}

LossVariant parse_loss_variant(std::string_view name) {
  if (name == "exact_minimax") return LossVariant::exact_minimax;
  if (name == "l_circle") return LossVariant::l_circle;
  if (name == "l_double_circle") return LossVariant::l_double_circle;
  throw std::invalid_argument("unknown loss variant: " + std::string(name));
}

std::string to_string(OptimizerMethod m) {
  return m == OptimizerMethod::lbfgs ? "lbfgs" : "gradient_descent";
}

OptimizerMethod parse_optimizer_method(std::string_view name) {
  if (name == "lbfgs") return OptimizerMethod::lbfgs;
  if (name == "gradient_descent" || name == "gd") return OptimizerMethod::gradient_descent;
  throw std::invalid_argument("unknown optimizer method: " + std::string(name));
}

void ExperimentConfig::validate() const {
  if (d < 1 || n < 1 || N < 1) throw std::invalid_argument("d, n and N must be at least 1");
  if (!(eps >= 0.0) || !std::isfinite(eps)) throw std::invalid_argument("eps must be finite and >= 0");
  if (!(tau2 >= 0.0) || !std::isfinite(tau2)) throw std::invalid_argument("tau2 must be finite and >= 0");
  if (trials < 1) throw std::invalid_argument("trials must be at least 1");
  if (!(optimizer.step >= 0.0)) throw std::invalid_argument("optimizer step must be >= 0");
  if (optimizer.max_iters < 1) throw std::invalid_argument("optimizer max_iters must be at least 1");
  if (!(optimizer.grad_tol > 0.0)) throw std::invalid_argument("optimizer grad_tol must be > 0");
  if (!(optimizer.smoothing > 0.0) || optimizer.smoothing > 0.1)
    throw std::invalid_argument("optimizer smoothing must be in (0, 0.1]");
}

std::uint64_t ExperimentConfig::hash() const {
  Fnv1a h;
  h.add(d);
  h.add(n);
  h.add(N);
  h.add(eps);
  h.add(tau2);
  h.add(trials);
  h.add(seed);
  h.add(static_cast<int>(optimizer.method));
  h.add(optimizer.smoothing);
  h.add(optimizer.step);
  h.add(optimizer.max_iters);
  h.add(optimizer.grad_tol);
  h.add(optimizer.backtracking);
  h.add(optimizer.precondition);
  h.add(static_cast<int>(loss_variant));
  return h.value();
}

double shifted_relu(double x) { return std::max(x, 0.0) - kShift; }

KernelJ::KernelJ(Matrix gram) : gram_(std::move(gram)), root_(std::make_shared<Root>()) {}

const KernelJ::Root& KernelJ::root() const {
  std::call_once(root_->once, [this] {
    Eigen::SelfAdjointEigenSolver<Matrix> es(gram_);
    if (es.info() != Eigen::Success) throw std::runtime_error("KernelJ: eigendecomposition failed");
    root_->min_eig = es.eigenvalues().minCoeff();
    Vector s = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    root_->sqrt = es.eigenvectors() * s.asDiagonal() * es.eigenvectors().transpose();
  });
  return *root_;
}

const Matrix& KernelJ::sqrt() const { return root().sqrt; }

double KernelJ::min_eigenvalue() const { return root().min_eig; }

double KernelJ::j_norm(const Vector& theta) const {
  return std::sqrt(std::max(0.0, theta.dot(gram_ * theta)));
}

FeatureMap sample_sphere_rows(int N, int d, RandomStream& rng) {
  if (N < 1 || d < 1) throw std::invalid_argument("sample_sphere_rows: N and d must be >= 1");
  FeatureMap map;
  map.W.resize(N, d);
  for (int i = 0; i < N; ++i) {
    for (int j = 0; j < d; ++j) map.W(i, j) = rng.normal();
    map.W.row(i) /= map.W.row(i).norm();
  }
  return map;
}

Dataset gen_dataset(int d, int n, double tau2, RandomStream& rng) {
  if (d < 1 || n < 1) throw std::invalid_argument("gen_dataset: d and n must be >= 1");
  if (!(tau2 >= 0.0)) throw std::invalid_argument("gen_dataset: tau2 must be >= 0");
  Dataset ds;
  ds.tau2 = tau2;
  ds.beta.resize(d);
  rng.fill_normal({ds.beta.data(), static_cast<std::size_t>(d)});
  ds.beta /= ds.beta.norm();
  ds.X.resize(n, d);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) ds.X(i, j) = rng.normal();
  ds.y = ds.X * ds.beta;
  const double tau = std::sqrt(tau2);
  for (int i = 0; i < n; ++i) ds.y(i) += tau * rng.normal();
  return ds;
}

Vector features(const FeatureMap& map, const Vector& x) {
  return (map.W * x).unaryExpr([](double v) { return shifted_relu(v); });
}

Matrix feature_matrix(const FeatureMap& map, const Matrix& X) {
  return (X * map.W.transpose()).unaryExpr([](double v) { return shifted_relu(v); });
}

Vector noisy_linear_features(const FeatureMap& map, const Vector& x, const Vector& u) {
  using A = special::ActivationDecomposition;
  return A::mu1 * (map.W * x) + A::mu2 * u;
}

KernelJ compute_kernel_j(const FeatureMap& map) {
  const Matrix inner = map.W * map.W.transpose();
  const Eigen::Index N = inner.rows();
  Matrix gram(N, N);
  // Lower triangle, mirrored so gram is exactly symmetric. A row against
  // itself has angle 0; acos of a rounded 1 - 1e-16 would be off by 1e-8.
  for (Eigen::Index j = 0; j < N; ++j) {
    gram(j, j) = inner(j, j) / 2.0;
    for (Eigen::Index i = j + 1; i < N; ++i) {
      const double c = std::clamp(inner(i, j), -1.0, 1.0);
      gram(i, j) = inner(i, j) * (special::kPi - std::acos(c)) / (2.0 * special::kPi);
      gram(j, i) = gram(i, j);
    }
  }
  return KernelJ(std::move(gram));
}

Perturbation worst_case_perturbation(const Vector& theta, const FeatureMap& map, const Vector& x,
                                     double y, double eps) {
  if (!(eps >= 0.0)) throw std::invalid_argument("worst_case_perturbation: eps must be >= 0");
  const Vector pre = map.W * x;
  const Vector gate = (pre.array() > 0.0).cast<double>();
  const double r = y - theta.dot(pre.unaryExpr([](double v) { return shifted_relu(v); }));
  const Vector g = map.W.transpose() * gate.cwiseProduct(theta);
  const double gn = g.norm();

  Perturbation out;
  out.delta = Vector::Zero(x.size());
  if (gn > 0.0 && eps > 0.0) out.delta = (r >= 0.0 ? -eps : eps) / gn * g;
  out.attained = std::abs(y - theta.dot(features(map, x + out.delta)));
  return out;
}

RobustObjective::RobustObjective(const Dataset& data, const FeatureMap& map, double eps,
                                 LossVariant variant, std::shared_ptr<const KernelJ> kernel)
    : data_(data), map_(map), eps_(eps), variant_(variant), kernel_(std::move(kernel)) {
  if (data.X.cols() != map.W.cols()) throw std::invalid_argument("RobustObjective: dimension mismatch");
  pre_ = data.X * map.W.transpose();
  feats_ = pre_.unaryExpr([](double v) { return shifted_relu(v); });
  mask_ = (pre_.array() > 0.0).cast<double>();
  if (variant_ == LossVariant::l_double_circle && !kernel_)
    kernel_ = std::make_shared<const KernelJ>(compute_kernel_j(map));
}

double RobustObjective::loss(const Vector& theta) const { return evaluate(theta, nullptr); }

LossAndGrad RobustObjective::loss_and_grad(const Vector& theta) const {
  LossAndGrad out;
  out.loss = evaluate(theta, &out.grad);
  return out;
}

void RobustObjective::set_smoothing(double mu) {
  if (!(mu >= 0.0)) throw std::invalid_argument("RobustObjective: smoothing must be >= 0");
  mu_ = mu;
}

double RobustObjective::evaluate(const Vector& theta, Vector* grad) const {
  const double n = static_cast<double>(data_.X.rows());
  const double mu2 = mu_ * mu_;
  const Vector r = data_.y - feats_ * theta;
  // a = |r| (smoothed) and its derivative; sign(0) = 0.
  const Vector a = r.unaryExpr([mu2](double v) { return std::sqrt(v * v + mu2); });
  const Vector da = r.binaryExpr(a, [](double v, double av) { return av > 0.0 ? v / av : 0.0; });

  if (variant_ == LossVariant::l_double_circle) {
    const Vector gt = kernel_->gram() * theta;
    const double eta = std::sqrt(std::max(0.0, theta.dot(gt)) + mu2);
    const Vector t = a.array() + eps_ * eta;
    if (grad) {
      *grad = -(feats_.transpose() * t.cwiseProduct(da)) / n;
      if (eta > 0.0) *grad += (eps_ * t.sum() / (n * eta)) * gt;
    }
    return t.squaredNorm() / (2.0 * n);
  }

  // Rows of G are g_i = W^T diag(1(W x_i > 0)) theta.
  const Matrix G = (mask_.array().rowwise() * theta.transpose().array()).matrix() * map_.W;
  const Vector gn = G.rowwise().squaredNorm().unaryExpr([mu2](double v) { return std::sqrt(v + mu2); });

  if (variant_ == LossVariant::exact_minimax) {
    // delta_i = -eps sign(r_i) g_i / ||g_i||, with the smoothed sign and norm when mu > 0.
    Vector scale(gn.size());
    for (Eigen::Index i = 0; i < gn.size(); ++i) {
      const double sr = mu_ > 0.0 ? da(i) : (r(i) >= 0.0 ? 1.0 : -1.0);
      scale(i) = gn(i) > 0.0 ? -eps_ * sr / gn(i) : 0.0;
    }
    const Matrix shifted = pre_ + scale.asDiagonal() * (G * map_.W.transpose());
    const Matrix F = shifted.unaryExpr([](double v) { return shifted_relu(v); });
    const Vector rp = data_.y - F * theta;
    if (grad) {
      // delta_i moves with theta (it is not an exact maximizer), so chain
      // through it: h_i = W^T (1(shifted_i > 0) * theta) is the input gradient.
      const Matrix H = ((shifted.array() > 0.0).cast<double>().rowwise() * theta.transpose().array()).matrix() * map_.W;
      const Vector gh = G.cwiseProduct(H).rowwise().sum();
      Vector sign_term = Vector::Zero(gn.size());
      Vector c1(gn.size()), c2(gn.size());
      for (Eigen::Index i = 0; i < gn.size(); ++i) {
        c1(i) = scale(i);
        c2(i) = gn(i) > 0.0 ? scale(i) * gh(i) / (gn(i) * gn(i)) : 0.0;
        // Smoothed sign r / a depends on theta through r.
        if (mu_ > 0.0 && gn(i) > 0.0) sign_term(i) = eps_ * mu2 / (a(i) * a(i) * a(i)) * gh(i) / gn(i);
      }
      const Matrix P = c1.asDiagonal() * H - c2.asDiagonal() * G;
      const Matrix back = mask_.cwiseProduct(P * map_.W.transpose());
      *grad = -(F.transpose() * rp + back.transpose() * rp + feats_.transpose() * rp.cwiseProduct(sign_term)) / n;
    }
    return rp.squaredNorm() / (2.0 * n);
  }

  const Vector t = a + eps_ * gn;
  if (grad) {
    *grad = -(feats_.transpose() * t.cwiseProduct(da));
    Vector w(gn.size());
    for (Eigen::Index i = 0; i < gn.size(); ++i) w(i) = gn(i) > 0.0 ? t(i) / gn(i) : 0.0;
    const Matrix back = (w.asDiagonal() * G) * map_.W.transpose();
    *grad += eps_ * mask_.cwiseProduct(back).transpose() * Vector::Ones(gn.size());
    *grad /= n;
  }
  return t.squaredNorm() / (2.0 * n);
}

double RobustObjective::lipschitz_estimate(const Eigen::LLT<Matrix>* metric) const {
  const double n = static_cast<double>(data_.X.rows());
  const double lf = top_eigenvalue(feats_, metric) / n;
  // Each eta_i^2 is at most theta^T diag(1) W W^T theta, and ||J||^2 <= ||W||^2 / 2.
  const double lj = 0.5 * top_eigenvalue(map_.W.transpose(), metric);
  const double root = std::sqrt(lf) + eps_ * std::sqrt(lj);
  return 1.05 * root * root;
}

LossAndGrad robust_loss_and_grad(const Vector& theta, const Dataset& data, const FeatureMap& map,
                                 double eps, LossVariant variant) {
  return RobustObjective(data, map, eps, variant).loss_and_grad(theta);
}

namespace {

// Plain or preconditioned gradient descent with Armijo backtracking.
void descend(const RobustObjective& obj, const Eigen::LLT<Matrix>* metric,
             const OptimizerSettings& opt, TrainedModel& model) {
  const double base = opt.step > 0.0 ? opt.step : 0.5 / obj.lipschitz_estimate(metric);
  auto direction = [metric](const Vector& g) { return metric ? Vector(metric->solve(g)) : g; };

  LossAndGrad cur = obj.loss_and_grad(model.theta);
  std::vector<double>& trace = model.training_trace;
  trace.push_back(cur.loss);
  std::vector<double> grads(trace.size(), std::numeric_limits<double>::infinity());
  grads.back() = cur.grad.norm();
  model.status = "max_iters";

  constexpr int kStallWindow = 200;
  constexpr double kStallRel = 1e-13;
  // Backtracking restarts from twice the last accepted step (capped at the
  // base step) so that steps shrunk at a kink recover quickly.
  double last = base;
  int it = 0;
  for (; it < opt.max_iters; ++it) {
    if (cur.grad.norm() <= opt.grad_tol) {
      model.status = "converged";
      model.converged = true;
      break;
    }
    double t = opt.backtracking ? std::min(base, 2.0 * last) : base;
    const Vector dir = direction(cur.grad);
    const double slope = cur.grad.dot(dir);
    LossAndGrad next;
    Vector cand;
    bool accepted = false;
    for (int k = 0; k < 50; ++k) {
      cand = model.theta - t * dir;
      next = obj.loss_and_grad(cand);
      if (!opt.backtracking || next.loss <= cur.loss - 1e-4 * t * slope) {
        accepted = true;
        break;
      }
      // Decrease below the rounding of the loss: judge by the gradient instead.
      if (std::abs(next.loss - cur.loss) <= 1e-14 * std::max(1.0, std::abs(cur.loss)) &&
          next.grad.norm() < cur.grad.norm()) {
        accepted = true;
        break;
      }
      t *= 0.5;
    }
    if (!std::isfinite(next.loss)) throw TrainingError("train_robust_erm: loss diverged", trace);
    if (!accepted) {
      model.status = "stalled";
      break;
    }
    last = t;
    model.theta = std::move(cand);
    cur = std::move(next);
    trace.push_back(cur.loss);
    grads.push_back(cur.grad.norm());
    // Near a smooth optimum the loss stops resolving progress before the
    // gradient does, so a stall also needs the gradient to stop shrinking.
    const std::size_t m = trace.size();
    if (m > kStallWindow &&
        trace[m - 1 - kStallWindow] - cur.loss <= kStallRel * std::max(1.0, cur.loss) &&
        grads[m - 1] > 0.5 * grads[m - 1 - kStallWindow]) {
      model.status = "stalled";
      ++it;
      break;
    }
  }
  model.iterations += it;
  model.grad_norm = cur.grad.norm();
}

// The loss as a function of z with theta = L^{-T} z, gram = L L^T.
class WhitenedLoss final : public ceres::FirstOrderFunction {
 public:
  WhitenedLoss(const RobustObjective& obj, const Eigen::LLT<Matrix>* metric)
      : obj_(obj), metric_(metric) {}

  bool Evaluate(const double* z, double* cost, double* gradient) const override {
    const Eigen::Map<const Vector> zv(z, obj_.num_features());
    const Vector theta = to_theta(zv);
    if (!gradient) {
      *cost = obj_.loss(theta);
      return std::isfinite(*cost);
    }
    const LossAndGrad lg = obj_.loss_and_grad(theta);
    *cost = lg.loss;
    Eigen::Map<Vector> gz(gradient, obj_.num_features());
    gz = metric_ ? Vector(metric_->matrixL().solve(lg.grad)) : lg.grad;
    return std::isfinite(*cost) && gz.allFinite();
  }
  int NumParameters() const override { return obj_.num_features(); }

  Vector to_theta(const Vector& z) const { return metric_ ? Vector(metric_->matrixU().solve(z)) : z; }

 private:
  const RobustObjective& obj_;
  const Eigen::LLT<Matrix>* metric_;
};

void smoothed_lbfgs(RobustObjective& obj, const Eigen::LLT<Matrix>* metric,
                    const OptimizerSettings& opt, TrainedModel& model) {
  std::vector<double>& trace = model.training_trace;
  Vector z = Vector::Zero(obj.num_features());
  int used = 0;
  ceres::TerminationType last = ceres::NO_CONVERGENCE;

  for (double mu = 0.1;; mu /= 10.0) {
    const bool final_stage = mu <= opt.smoothing * 1.0000001;
    if (final_stage) mu = opt.smoothing;
    obj.set_smoothing(mu);
    // Owned by the problem, which deletes it.
    auto* fn = new WhitenedLoss(obj, metric);
    ceres::GradientProblem problem(fn);

    ceres::GradientProblemSolver::Options o;
    o.line_search_direction_type = ceres::LBFGS;
    o.max_lbfgs_rank = 20;
    o.max_num_iterations = std::max(1, opt.max_iters - used);
    o.gradient_tolerance = final_stage ? opt.grad_tol : std::max(opt.grad_tol, 1e-2 * mu);
    o.function_tolerance = 1e-15;
    o.parameter_tolerance = 1e-14;
    o.logging_type = ceres::SILENT;
    ceres::GradientProblemSolver::Summary sum;
    ceres::Solve(o, problem, z.data(), &sum);

    for (std::size_t k = trace.empty() ? 0 : 1; k < sum.iterations.size(); ++k)
      trace.push_back(sum.iterations[k].cost);
    used += static_cast<int>(sum.iterations.size()) - 1;
    last = sum.termination_type;
    if (!std::isfinite(sum.final_cost) || last == ceres::USER_FAILURE)
      throw TrainingError("train_robust_erm: loss diverged", trace);
    if (final_stage || used >= opt.max_iters) break;
  }

  model.theta = WhitenedLoss(obj, metric).to_theta(z);
  model.iterations += used;
  model.grad_norm = obj.loss_and_grad(model.theta).grad.norm();
  obj.set_smoothing(0.0);
  if (last == ceres::CONVERGENCE && used < opt.max_iters) {
    model.status = "converged";
    model.converged = true;
  } else {
    model.status = last == ceres::FAILURE ? "stalled" : "max_iters";
  }
}

}  // namespace

TrainedModel train_robust_erm(const Dataset& data, std::shared_ptr<const FeatureMap> map,
                              const ExperimentConfig& cfg) {
  cfg.validate();
  if (!map) throw std::invalid_argument("train_robust_erm: null feature map");
  const OptimizerSettings& opt = cfg.optimizer;
  std::shared_ptr<const KernelJ> kernel;
  if (opt.precondition || cfg.loss_variant == LossVariant::l_double_circle)
    kernel = std::make_shared<const KernelJ>(compute_kernel_j(*map));
  RobustObjective obj(data, *map, cfg.eps, cfg.loss_variant, kernel);

  std::optional<Eigen::LLT<Matrix>> metric;
  if (opt.precondition) {
    metric.emplace(kernel->gram());
    if (metric->info() != Eigen::Success)
      throw std::runtime_error("train_robust_erm: gram(J) is not positive definite");
  }
  const Eigen::LLT<Matrix>* mp = metric ? &*metric : nullptr;

  TrainedModel model;
  model.feature_map = map;
  model.config_hash = cfg.hash();
  model.theta = Vector::Zero(map->num_features());
  if (opt.method == OptimizerMethod::gradient_descent) {
    descend(obj, mp, opt, model);
    return model;
  }
  if (cfg.loss_variant != LossVariant::exact_minimax) {
    smoothed_lbfgs(obj, mp, opt, model);
    return model;
  }
  // The perturbed ReLU gates make exact_minimax nonconvex and piecewise
  // smooth, so solve the convex first-order form (l_circle) first and finish
  // with descent on the exact loss.
  RobustObjective surrogate(data, *map, cfg.eps, LossVariant::l_circle, kernel);
  smoothed_lbfgs(surrogate, mp, opt, model);
  OptimizerSettings rest = opt;
  rest.max_iters = std::max(1, opt.max_iters - model.iterations);
  descend(obj, mp, rest, model);
  return model;
}

}  // namespace rfadv
