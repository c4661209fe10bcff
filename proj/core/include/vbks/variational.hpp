#ifndef VBKS_VARIATIONAL_HPP
#define VBKS_VARIATIONAL_HPP

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <stdexcept>

#include "vbks/gp_core.hpp"
#include "vbks/kernel.hpp"

namespace vbks {

class VariationalError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

double softplus(double x);
double softplus_inverse(double y);

/// N(m, C C^T) written as the affine map x = C * eta + m of eta ~ N(0, I).
///
/// C is lower triangular with a positive diagonal; the diagonal is stored raw
/// and mapped through softplus. The flat parameter vector is the raw lower
/// triangle of C in row-major order followed by m. In point-estimate mode C is
/// fixed at zero and only m is a parameter.
class GaussianVariational {
 public:
  enum class Mode { Full, PointEstimate };

  GaussianVariational() = default;
  static GaussianVariational full(Eigen::VectorXd mean, const Eigen::MatrixXd& scale);
  static GaussianVariational point(Eigen::VectorXd mean);

  Mode mode() const { return mode_; }
  bool is_full() const { return mode_ == Mode::Full; }
  Eigen::Index dim() const { return mean_.size(); }

  const Eigen::VectorXd& mean() const { return mean_; }
  const Eigen::MatrixXd& scale() const { return scale_; }
  Eigen::MatrixXd covariance() const { return scale_ * scale_.transpose(); }

  Eigen::VectorXd sample(const Eigen::VectorXd& eta) const;

  Eigen::Index num_params() const;
  Eigen::VectorXd params() const;
  void set_params(const Eigen::VectorXd& phi);
  /// Chain rule from (dL/dC, dL/dm) to dL/dphi. Only the lower triangle of dC
  /// is read; point-estimate mode ignores dC.
  Eigen::VectorXd pack_gradient(const Eigen::MatrixXd& dC, const Eigen::VectorXd& dm) const;

 private:
  void refresh_scale();

  Mode mode_ = Mode::Full;
  Eigen::VectorXd mean_;
  Eigen::MatrixXd raw_scale_;  // lower triangle; diagonal in softplus space
  Eigen::MatrixXd scale_;
};

/// KL(N(m, C C^T) || N(p_mean, P P^T)) with P = p_chol lower triangular.
double kl_gaussian(const GaussianVariational& q, const Eigen::VectorXd& p_mean,
                   const Eigen::MatrixXd& p_chol);

struct ScaleMeanGradient {
  Eigen::MatrixXd dC;
  Eigen::VectorXd dm;
};

/// Gradient of kl_gaussian with respect to C (lower triangle) and m.
ScaleMeanGradient kl_gaussian_grad(const GaussianVariational& q, const Eigen::VectorXd& p_mean,
                                   const Eigen::MatrixXd& p_chol);

/// (n/2) log(2 pi e) + sum log |C_ii|.
double entropy(const GaussianVariational& q);
/// d entropy / d C = diag(1 / C_ii).
Eigen::MatrixXd entropy_grad(const GaussianVariational& q);

/// log N(x; mean, L L^T).
double log_normal_density(const Eigen::VectorXd& x, const Eigen::VectorXd& mean,
                          const CholeskyFactor& chol);

/// (1/S) sum_s log N(u_s; 0, K_UU(theta_s)) with (u_s, theta_s) drawn by the
/// affine reparameterization of q_u and q_theta.
double cross_entropy_prior_u(const GaussianVariational& q_u, const GaussianVariational& q_theta,
                             const KernelExpr& expr, const InducingSet& inducing, int n_samples,
                             std::mt19937_64& rng);

Eigen::VectorXd standard_normal(Eigen::Index n, std::mt19937_64& rng);

}  // namespace vbks

#endif  // VBKS_VARIATIONAL_HPP
