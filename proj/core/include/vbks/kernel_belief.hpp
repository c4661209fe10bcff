#ifndef VBKS_KERNEL_BELIEF_HPP
#define VBKS_KERNEL_BELIEF_HPP

#include <Eigen/Dense>

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "vbks/adam.hpp"
#include "vbks/local_elbo.hpp"
#include "vbks/variational.hpp"

namespace vbks {

/// q(g) over the K-vector of kernel logits, the frozen local optima L* it is
/// fitted against, and the Monte Carlo posterior over kernels.
struct KernelBeliefState {
  std::vector<std::string> kernel_names;
  GaussianVariational q_g;
  Eigen::VectorXd prior_mean;
  Eigen::MatrixXd prior_chol;  // p(g) = N(prior_mean, prior_chol prior_chol^T)
  Eigen::VectorXd local_elbos;
  Eigen::VectorXd posterior;  // q*(k); empty until estimated
  int posterior_samples = 2000;
  AdamMoments moments;
  std::uint64_t step = 0;
  std::uint64_t seed = 0;

  Eigen::Index size() const { return local_elbos.size(); }
};

/// exp(g_i) / sum_j exp(g_j), max-shifted.
Eigen::VectorXd softmax_kernel_prob(const Eigen::VectorXd& g);

/// q(g) starts at the prior N(prior_mean, I). An empty prior_mean means zero.
KernelBeliefState make_belief(std::vector<std::string> kernel_names, Eigen::VectorXd local_elbos,
                              std::uint64_t seed, Eigen::VectorXd prior_mean = {});

/// (1/S) sum_s sum_i p(k_i | g_s) L*_i - KL[q(g) || p(g)], g_s = C eta_s + m.
double global_elbo_estimate(const KernelBeliefState& belief, std::span<const Eigen::VectorXd> etas);

ElboGradient global_gradient(const KernelBeliefState& belief, std::span<const Eigen::VectorXd> etas);

struct BeliefConfig {
  std::uint64_t steps = 2000;  // run until belief.step reaches this
  int draws = 8;
  AdamOptions adam{0.05, 0.9, 0.999, 1e-8};
  int posterior_samples = 2000;
};

/// Adam ascent on the global ELBO, then refreshes belief.posterior.
KernelBeliefState optimize_belief(KernelBeliefState belief, const BeliefConfig& config);

/// (1/S) sum_s softmax(g_s), g_s ~ q(g).
Eigen::VectorXd posterior_mc(const KernelBeliefState& belief, int samples, std::uint64_t seed);

/// Indices of the m largest posterior entries; ties go to the smaller name.
std::vector<std::size_t> top_kernels(const KernelBeliefState& belief, std::size_t m);

/// Fresh belief over the top-m kernels reusing their L*, re-optimized.
KernelBeliefState prune_and_rebuild(const KernelBeliefState& belief, std::size_t m,
                                    const BeliefConfig& config);

}  // namespace vbks

#endif  // VBKS_KERNEL_BELIEF_HPP
