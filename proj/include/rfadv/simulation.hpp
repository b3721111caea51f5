#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <memory>
#include <mutex>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "rfadv/rng.hpp"

namespace rfadv {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

enum class LossVariant { exact_minimax, l_circle, l_double_circle };

std::string to_string(LossVariant v);
/// Throws std::invalid_argument on an unknown name.
LossVariant parse_loss_variant(std::string_view name);

enum class OptimizerMethod { lbfgs, gradient_descent };

std::string to_string(OptimizerMethod m);
OptimizerMethod parse_optimizer_method(std::string_view name);

struct OptimizerSettings {
  /// lbfgs minimizes a sequence of smoothed losses (|r| -> sqrt(r^2 + mu^2),
  /// same for the norms) with mu shrinking tenfold from 0.1 to `smoothing`.
  /// GD stalls at the kinks |r_i| = 0 that the minimizer sits on once the
  /// model interpolates, and stops well short of the optimum there.
  OptimizerMethod method = OptimizerMethod::lbfgs;
  double smoothing = 1e-6;
  double step = 0.0;  // GD only; 0 selects 0.5 / L_hat
  int max_iters = 50000;
  double grad_tol = 1e-7;
  bool backtracking = true;  // GD only
  /// Work in the metric of gram(J). From theta = 0 this selects the
  /// interpolator of least ||J theta|| when eps is tiny, which is the limit
  /// of the robust minimizers; the Euclidean metric picks the least-l2 one.
  bool precondition = true;
};

struct ExperimentConfig {
  int d = 100;
  int n = 300;
  int N = 450;
  double eps = 1.0;
  double tau2 = 0.5;
  int trials = 20;
  std::uint64_t seed = 0;
  OptimizerSettings optimizer;
  LossVariant loss_variant = LossVariant::exact_minimax;

  /// Throws std::invalid_argument when a field is out of range.
  void validate() const;
  double psi1() const { return static_cast<double>(N) / d; }
  double psi2() const { return static_cast<double>(n) / d; }
  /// Stable FNV-1a digest of every field.
  std::uint64_t hash() const;
};

struct Dataset {
  Matrix X;     // n x d
  Vector y;     // n
  Vector beta;  // d, unit norm
  double tau2 = 0.0;
};

/// Random first layer. Rows of W have unit norm; the activation is the
/// shifted ReLU max(x, 0) - 1/sqrt(2 pi).
struct FeatureMap {
  Matrix W;  // N x d
  int num_features() const { return static_cast<int>(W.rows()); }
  int dim() const { return static_cast<int>(W.cols()); }
};

double shifted_relu(double x);

/// (W W^T) .* (pi - arccos(W W^T)) / (2 pi) and its PSD square root.
/// The root is computed on first use; concurrent readers are safe.
class KernelJ {
 public:
  explicit KernelJ(Matrix gram);
  const Matrix& gram() const { return gram_; }
  const Matrix& sqrt() const;
  /// Smallest eigenvalue of gram before clamping (computed with the root).
  double min_eigenvalue() const;
  /// ||J theta|| = sqrt(theta^T gram theta).
  double j_norm(const Vector& theta) const;

 private:
  struct Root {
    std::once_flag once;
    Matrix sqrt;
    double min_eig = 0.0;
  };
  const Root& root() const;

  Matrix gram_;
  std::shared_ptr<Root> root_;
};

struct TrainedModel {
  Vector theta;
  std::shared_ptr<const FeatureMap> feature_map;
  std::vector<double> training_trace;
  std::uint64_t config_hash = 0;
  bool converged = false;
  int iterations = 0;
  double grad_norm = 0.0;
  std::string status;  // "converged", "max_iters" or "stalled"
};

class TrainingError : public std::runtime_error {
 public:
  TrainingError(const std::string& what, std::vector<double> trace)
      : std::runtime_error(what), trace_(std::move(trace)) {}
  const std::vector<double>& trace() const { return trace_; }

 private:
  std::vector<double> trace_;
};

FeatureMap sample_sphere_rows(int N, int d, RandomStream& rng);

/// Draws beta (normalized Gaussian), then the rows of X, then the noise.
Dataset gen_dataset(int d, int n, double tau2, RandomStream& rng);

Vector features(const FeatureMap& map, const Vector& x);
/// sigma(X W^T), one row per sample.
Matrix feature_matrix(const FeatureMap& map, const Matrix& X);

/// (1/2) W x + mu2 u: the Gaussian-equivalent surrogate of sigma(W x).
Vector noisy_linear_features(const FeatureMap& map, const Vector& x, const Vector& u);

KernelJ compute_kernel_j(const FeatureMap& map);

struct Perturbation {
  Vector delta;
  double attained = 0.0;  // |y - theta^T sigma(W (x + delta))|
};

/// delta = -eps sign(r) g / ||g|| with g = W^T diag(1(Wx > 0)) theta and
/// r = y - theta^T sigma(W x). sign(0) is taken as +1.
Perturbation worst_case_perturbation(const Vector& theta, const FeatureMap& map, const Vector& x,
                                     double y, double eps);

struct LossAndGrad {
  double loss = 0.0;
  Vector grad;
};

/// Robust empirical loss with the data-dependent products precomputed, so
/// repeated evaluations cost two matrix products at most.
class RobustObjective {
 public:
  /// `kernel` is needed only for l_double_circle; it is built when null.
  RobustObjective(const Dataset& data, const FeatureMap& map, double eps, LossVariant variant,
                  std::shared_ptr<const KernelJ> kernel = nullptr);

  /// Replaces |r| and ||v|| by sqrt(r^2 + mu^2) and sqrt(||v||^2 + mu^2).
  /// The default 0 gives the exact loss with its subgradient.
  void set_smoothing(double mu);
  double smoothing() const { return mu_; }

  double loss(const Vector& theta) const;
  LossAndGrad loss_and_grad(const Vector& theta) const;
  /// Upper estimate of the gradient's Lipschitz constant on smooth pieces,
  /// measured in the metric of `metric` (Euclidean when null).
  double lipschitz_estimate(const Eigen::LLT<Matrix>* metric = nullptr) const;
  const std::shared_ptr<const KernelJ>& kernel() const { return kernel_; }
  int num_features() const { return static_cast<int>(map_.W.rows()); }

 private:
  double evaluate(const Vector& theta, Vector* grad) const;

  const Dataset& data_;
  const FeatureMap& map_;
  double eps_;
  LossVariant variant_;
  double mu_ = 0.0;
  std::shared_ptr<const KernelJ> kernel_;
  Matrix pre_;    // X W^T
  Matrix feats_;  // sigma(X W^T)
  Matrix mask_;   // 1(X W^T > 0) as 0/1
};

LossAndGrad robust_loss_and_grad(const Vector& theta, const Dataset& data, const FeatureMap& map,
                                 double eps, LossVariant variant);

/// Minimizes the robust loss from theta = 0. Throws TrainingError when the
/// loss becomes non-finite.
TrainedModel train_robust_erm(const Dataset& data, std::shared_ptr<const FeatureMap> map,
                              const ExperimentConfig& cfg);

}  // namespace rfadv
