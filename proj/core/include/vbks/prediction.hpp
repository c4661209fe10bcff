#ifndef VBKS_PREDICTION_HPP
#define VBKS_PREDICTION_HPP

#include <Eigen/Dense>

#include <cstdint>
#include <span>
#include <vector>

#include "vbks/gp_core.hpp"
#include "vbks/local_elbo.hpp"

namespace vbks {

/// Latent predictive moments at fixed theta with u ~ q(u) marginalized:
/// mean = K_*U A^-1 m_u, variance = Nystrom residual + K_*U A^-1 S_u A^-1 K_U*.
BatchMoments predict_given_theta(const SgprState& state, const Eigen::VectorXd& raw_theta,
                                 const Eigen::MatrixXd& Xstar);

/// Mixture moments over the given theta draws, equally weighted.
BatchMoments predict_over_thetas(const SgprState& state, const Eigen::MatrixXd& Xstar,
                                 std::span<const Eigen::VectorXd> thetas);

/// Marginalizes q(theta) with s_theta draws (law of total variance). A
/// point-estimate theta uses m_theta once and ignores s_theta and seed.
BatchMoments predict_kernel(const SgprState& state, const Eigen::MatrixXd& Xstar, int s_theta,
                            std::uint64_t seed);

/// E_q[sigma_n^2] under q(theta); add it to a latent variance for the
/// observation-space predictive.
double expected_noise_variance(const SgprState& state);

/// Moments of the mixture sum_i q_i N(mean_i, var_i). Zero weights are skipped,
/// so a one-hot q returns that component unchanged.
BatchMoments mix_moments(std::span<const BatchMoments> components, const Eigen::VectorXd& q);

/// Every kernel's predict_kernel (same s_theta and seed) mixed by q.
BatchMoments predict_bma(std::span<const SgprState> states, const Eigen::VectorXd& q,
                         const Eigen::MatrixXd& Xstar, int s_theta, std::uint64_t seed);

double rmse(const Eigen::VectorXd& predictions, const Eigen::VectorXd& truth);

}  // namespace vbks

#endif  // VBKS_PREDICTION_HPP
