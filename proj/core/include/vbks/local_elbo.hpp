#ifndef VBKS_LOCAL_ELBO_HPP
#define VBKS_LOCAL_ELBO_HPP

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <stdexcept>
#include <vector>

#include "vbks/adam.hpp"
#include "vbks/gp_core.hpp"
#include "vbks/kernel.hpp"
#include "vbks/variational.hpp"

namespace vbks {

/// Indices into a dataset plus the |D| / |batch| factor that makes the batch
/// likelihood an unbiased estimate of the full-data term.
struct MiniBatch {
  std::vector<Eigen::Index> indices;
  double scale = 1.0;

  Eigen::Index size() const { return static_cast<Eigen::Index>(indices.size()); }
};

/// Uniform with replacement.
MiniBatch sample_batch(Eigen::Index n_data, Eigen::Index batch_size, std::mt19937_64& rng);
MiniBatch full_batch(Eigen::Index n_data);

enum class ThetaMode { Full, PointEstimate };

/// Training state of one candidate kernel.
struct SgprState {
  KernelExpr kernel = KernelExpr::base(BaseKernel::SE);
  InducingSet inducing;
  GaussianVariational q_u;
  GaussianVariational q_theta;
  AdamMoments moments;
  std::uint64_t step = 0;
  std::uint64_t seed = 0;
  // Exponentially smoothed local ELBO (L*), bias corrected.
  double elbo_ema = 0.0;
  std::uint64_t n_evals = 0;
  double elbo_star = std::numeric_limits<double>::quiet_NaN();
  std::uint32_t rejected_in_row = 0;

  Eigen::Index num_params() const { return q_u.num_params() + q_theta.num_params(); }
  /// vec(C_v, m_v, C_theta, m_theta) in the raw parameterization, where
  /// m_u = L m_v, C_u = L C_v and L = u_basis(). This is a one-to-one change
  /// of coordinates for the optimizer; q(u) q(theta) is still the family.
  Eigen::VectorXd params() const;
  /// Strong guarantee: on a throw the state is unchanged.
  void set_params(const Eigen::VectorXd& phi);
  /// chol(K_UU) at the mean of q(theta). Throws NumericalError if K_UU cannot
  /// be factorized.
  Eigen::MatrixXd u_basis() const;
};

/// Moment-matched starting hyperparameters (raw, log scale): lengthscales and
/// periods at the median pairwise input distance, the prior amplitude split
/// across leaves to match the output variance, noise at 10% of it.
Eigen::VectorXd heuristic_theta(const KernelExpr& kernel, const Dataset& data);

/// m_theta = heuristic_theta, C_theta = 0.1 I (full mode), m_u = 0 and
/// C_u = 0.1 u_basis(), so q(u) starts as a shrunken prior. If K_UU cannot be
/// factorized at m_theta, C_u = 0.1 I and training will abort on this kernel.
SgprState init_state(const KernelExpr& kernel, const Dataset& data, InducingSet inducing,
                     ThetaMode mode, std::uint64_t seed);

/// Standard-normal draws of theta for the likelihood term and the
/// cross-entropy term. u needs none: both terms are quadratic in u and are
/// averaged over q(u) exactly.
struct EtaDraws {
  std::vector<Eigen::VectorXd> lik_theta;
  std::vector<Eigen::VectorXd> ce_theta;
};

EtaDraws draw_etas(const SgprState& state, int lik_draws, int ce_draws, std::mt19937_64& rng);

/// E_{p(f_B | u, theta)}[log p(y_B | f_B)] over the batch, in closed form.
double expected_loglik(const KernelExpr& expr, const Eigen::VectorXd& raw_theta,
                       const Eigen::VectorXd& u, const InducingSet& inducing,
                       const MiniBatch& batch, const Dataset& data);

struct TermGradient {
  double value = 0.0;
  Eigen::VectorXd d_u;
  Eigen::VectorXd d_theta;
};

TermGradient expected_loglik_grad(const KernelExpr& expr, const Eigen::VectorXd& raw_theta,
                                  const Eigen::VectorXd& u, const InducingSet& inducing,
                                  const MiniBatch& batch, const Dataset& data);

/// log N(u; 0, K_UU(theta)) and its gradient.
TermGradient log_prior_u_grad(const KernelExpr& expr, const Eigen::VectorXd& raw_theta,
                              const InducingSet& inducing, const Eigen::VectorXd& u);

/// Value and gradient of a term averaged over u ~ q(u), at fixed theta.
struct QuTermGradient {
  double value = 0.0;
  Eigen::VectorXd d_m;
  Eigen::MatrixXd d_C;  // lower triangle; zero for a point-estimate q(u)
  Eigen::VectorXd d_theta;
};

/// E_{q(u)}[expected_loglik]: the u-mean value minus tr(A S A^T) / (2 sigma^2),
/// A = K_bU K_UU^-1, S = C C^T.
QuTermGradient expected_loglik_over_q(const KernelExpr& expr, const Eigen::VectorXd& raw_theta,
                                      const GaussianVariational& q_u, const InducingSet& inducing,
                                      const MiniBatch& batch, const Dataset& data);

/// E_{q(u)}[log N(u; 0, K_UU)] = log N(m; 0, K_UU) - tr(K_UU^-1 S) / 2.
QuTermGradient log_prior_over_q(const KernelExpr& expr, const Eigen::VectorXd& raw_theta,
                                const GaussianVariational& q_u, const InducingSet& inducing);

/// scale * mean over theta draws of E_{q(u)}[expected_loglik] + H[q(u)]
/// - KL[q(theta) || p(theta)] + mean over theta draws of E_{q(u)}[log p(u | theta)].
/// With a point-estimate q(theta) the theta term is log p(m_theta); with a
/// point-estimate q(u) the entropy term is dropped.
double local_elbo_estimate(const SgprState& state, const MiniBatch& batch, const Dataset& data,
                           const EtaDraws& draws);

struct ElboGradient {
  double value = 0.0;
  Eigen::VectorXd gradient;  // over SgprState::params()
};

ElboGradient local_gradient(const SgprState& state, const MiniBatch& batch, const Dataset& data,
                            const EtaDraws& draws);

struct LocalConfig {
  std::uint64_t steps = 2000;  // step budget
  /// Pause once state.step reaches this (0: run the whole budget).
  std::uint64_t pause_at = 0;
  Eigen::Index batch_size = 32;
  bool full_batch = false;
  AdamOptions adam{};
  /// Learning rate decays exponentially to adam.learning_rate * final_lr_ratio
  /// at the end of the budget; 1 keeps it constant.
  double final_lr_ratio = 1.0;
  int lik_draws = 1;
  int ce_draws = 4;
  int eval_every = 10;
  Eigen::Index eval_batch_size = 0;  // 0: same as batch_size
  double smoothing = 0.99;
};

struct TraceRow {
  std::uint64_t step = 0;
  double elbo = 0.0;       // evaluation-batch estimate
  double elbo_star = 0.0;  // smoothed
  double grad_norm = 0.0;
};

class TrainingAborted : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Adam ascent on the local ELBO until the budget (or pause_at) is reached. Each
/// step's randomness derives from (state.seed, step), so training resumed
/// from a saved state replays the same trajectory.
SgprState optimize_local(SgprState state, const Dataset& data, const LocalConfig& config,
                         const std::function<void(const TraceRow&)>& on_eval = {});

/// Deterministic per-step generator.
std::mt19937_64 step_rng(std::uint64_t seed, std::uint64_t step, std::uint64_t stream);

}  // namespace vbks

#endif  // VBKS_LOCAL_ELBO_HPP
