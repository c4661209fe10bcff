#ifndef VBKS_GP_CORE_HPP
#define VBKS_GP_CORE_HPP

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <optional>
#include <stdexcept>

#include "vbks/kernel.hpp"

namespace vbks {

/// Raised when a kernel matrix cannot be factorized even at maximum jitter.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DataError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Relative jitter ladder, multiplied by mean(diag A).
inline constexpr std::array<double, 4> kJitterLadder{0.0, 1e-8, 1e-6, 1e-4};

/// L * L^T = A + jitter * I.
struct CholeskyFactor {
  Eigen::MatrixXd L;
  double jitter = 0.0;
  double relative_jitter = 0.0;  // rung of kJitterLadder that succeeded

  Eigen::Index size() const { return L.rows(); }
  Eigen::MatrixXd solve(const Eigen::MatrixXd& B) const;
  Eigen::VectorXd solve(const Eigen::VectorXd& b) const;
  /// L^{-1} B
  Eigen::MatrixXd solve_lower(const Eigen::MatrixXd& B) const;
  double log_det() const;
};

CholeskyFactor chol_jitter(const Eigen::MatrixXd& A);

struct Normalization {
  Eigen::RowVectorXd x_mean;
  Eigen::RowVectorXd x_scale;
  double y_mean = 0.0;
  double y_scale = 1.0;
};

/// Inputs X (one row per point) and outputs y.
struct Dataset {
  Eigen::MatrixXd X;
  Eigen::VectorXd y;
  std::optional<Normalization> normalization;

  Eigen::Index size() const { return X.rows(); }
  Eigen::Index dim() const { return X.cols(); }
  void validate() const;
};

/// Inducing inputs, one row per point.
struct InducingSet {
  Eigen::MatrixXd Z;

  Eigen::Index size() const { return Z.rows(); }
};

/// Uniformly random subset of m pairwise-distinct training inputs.
InducingSet choose_inducing(const Dataset& data, Eigen::Index m, std::uint64_t seed);

struct Moments {
  double mean = 0.0;
  double variance = 0.0;
};

struct BatchMoments {
  Eigen::VectorXd mean;
  Eigen::VectorXd variance;
};

/// Full-rank GP posterior of the latent f at each row of Xstar.
BatchMoments full_gp_predict(const KernelExpr& expr, const Eigen::VectorXd& raw_theta,
                             const Dataset& data, const Eigen::MatrixXd& Xstar);
Moments full_gp_predict(const KernelExpr& expr, const Eigen::VectorXd& raw_theta,
                        const Dataset& data, const Eigen::RowVectorXd& xstar);

struct GaussianConditional {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

/// p(f_X | u): mean K_XU K_UU^{-1} u, covariance K_XX - K_XU K_UU^{-1} K_UX.
GaussianConditional dtc_train_conditional(const KernelExpr& expr, const Eigen::VectorXd& raw_theta,
                                          const InducingSet& inducing, const Eigen::VectorXd& u,
                                          const Eigen::MatrixXd& X);
Moments dtc_test_conditional(const KernelExpr& expr, const Eigen::VectorXd& raw_theta,
                             const InducingSet& inducing, const Eigen::VectorXd& u,
                             const Eigen::RowVectorXd& xstar);

}  // namespace vbks

#endif  // VBKS_GP_CORE_HPP
