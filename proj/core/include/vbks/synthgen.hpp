#ifndef VBKS_SYNTHGEN_HPP
#define VBKS_SYNTHGEN_HPP

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <vector>

#include "vbks/gp_core.hpp"
#include "vbks/kernel.hpp"

namespace vbks {

struct SyntheticSpec {
  KernelExpr kernel = KernelExpr::base(BaseKernel::SE);
  Eigen::VectorXd raw_theta;  // the noise slot sets the seed-sample noise
  Eigen::Index n_seed = 256;
  Eigen::Index n_data = 1000;
  Eigen::VectorXd lower = Eigen::VectorXd::Constant(1, -10.0);
  Eigen::VectorXd upper = Eigen::VectorXd::Constant(1, 10.0);
  std::uint64_t seed = 0;
};

/// One draw of y ~ N(0, K(X, X) + sigma_n^2 I).
Eigen::VectorXd sample_gp_prior(const KernelExpr& kernel, const Eigen::VectorXd& raw_theta,
                                const Eigen::MatrixXd& X, std::mt19937_64& rng);

/// Samples n_seed inputs uniformly on the box and their outputs from the GP
/// prior with noise, then returns n_data fresh uniform inputs paired with the
/// full-GP posterior mean given the seed set.
Dataset generate_synthetic(const SyntheticSpec& spec);

/// (PER + RQ) * LIN at the reference hyperparameters, noise variance 1e-4.
SyntheticSpec preset_per_plus_rq_times_lin();
/// PER * LIN * RQ at the reference hyperparameters, noise variance 1e-4.
SyntheticSpec preset_per_lin_rq();

/// The twelve-kernel candidate set used for the recovery experiment.
std::vector<KernelExpr> recovery_kernel_set();

}  // namespace vbks

#endif  // VBKS_SYNTHGEN_HPP
