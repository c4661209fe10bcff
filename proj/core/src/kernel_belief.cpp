#include "vbks/kernel_belief.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace vbks {

namespace {

void check_belief(const KernelBeliefState& b) {
  const Eigen::Index k = b.size();
  if (k < 1) throw std::invalid_argument("kernel belief needs at least one kernel");
  if (!b.local_elbos.allFinite()) throw std::invalid_argument("local ELBO optima must be finite");
  if (b.q_g.dim() != k || b.prior_mean.size() != k || b.prior_chol.rows() != k ||
      static_cast<Eigen::Index>(b.kernel_names.size()) != k) {
    throw std::invalid_argument("kernel belief dimension mismatch");
  }
}

void check_etas(const KernelBeliefState& b, std::span<const Eigen::VectorXd> etas) {
  if (etas.empty()) throw std::invalid_argument("need at least one eta draw");
  for (const auto& e : etas) {
    if (e.size() != b.size()) throw std::invalid_argument("eta draw dimension mismatch");
  }
}

}  // namespace

Eigen::VectorXd softmax_kernel_prob(const Eigen::VectorXd& g) {
  if (g.size() == 0) throw std::invalid_argument("softmax of an empty vector");
  const Eigen::ArrayXd e = (g.array() - g.maxCoeff()).exp();
  return (e / e.sum()).matrix();
}

KernelBeliefState make_belief(std::vector<std::string> kernel_names, Eigen::VectorXd local_elbos,
                              std::uint64_t seed, Eigen::VectorXd prior_mean) {
  const Eigen::Index k = local_elbos.size();
  if (k < 1) throw std::invalid_argument("kernel belief needs at least one kernel");
  if (prior_mean.size() == 0) prior_mean = Eigen::VectorXd::Zero(k);
  KernelBeliefState b;
  b.kernel_names = std::move(kernel_names);
  b.local_elbos = std::move(local_elbos);
  b.prior_chol = Eigen::MatrixXd::Identity(k, k);
  b.q_g = GaussianVariational::full(prior_mean, b.prior_chol);
  b.prior_mean = std::move(prior_mean);
  b.seed = seed;
  check_belief(b);
  b.moments.reset(b.q_g.num_params());
  return b;
}

double global_elbo_estimate(const KernelBeliefState& belief, std::span<const Eigen::VectorXd> etas) {
  check_belief(belief);
  check_etas(belief, etas);
  double acc = 0.0;
  for (const auto& eta : etas) acc += softmax_kernel_prob(belief.q_g.sample(eta)).dot(belief.local_elbos);
  return acc / static_cast<double>(etas.size()) -
         kl_gaussian(belief.q_g, belief.prior_mean, belief.prior_chol);
}

ElboGradient global_gradient(const KernelBeliefState& belief, std::span<const Eigen::VectorXd> etas) {
  check_belief(belief);
  check_etas(belief, etas);
  const Eigen::Index k = belief.size();
  const Eigen::VectorXd& L = belief.local_elbos;
  Eigen::MatrixXd dC = Eigen::MatrixXd::Zero(k, k);
  Eigen::VectorXd dm = Eigen::VectorXd::Zero(k);
  double value = 0.0;
  const double w = 1.0 / static_cast<double>(etas.size());
  for (const auto& eta : etas) {
    const Eigen::VectorXd p = softmax_kernel_prob(belief.q_g.sample(eta));
    const double mean_l = p.dot(L);
    value += w * mean_l;
    // Softmax Jacobian applied to L: diag(p) L - p p^T L.
    const Eigen::VectorXd dg = w * (p.array() * (L.array() - mean_l)).matrix();
    dm += dg;
    for (Eigen::Index i = 0; i < k; ++i)
      for (Eigen::Index j = 0; j <= i; ++j) dC(i, j) += dg[i] * eta[j];
  }
  const ScaleMeanGradient kl = kl_gaussian_grad(belief.q_g, belief.prior_mean, belief.prior_chol);
  ElboGradient out;
  out.value = value - kl_gaussian(belief.q_g, belief.prior_mean, belief.prior_chol);
  out.gradient = belief.q_g.pack_gradient(dC - kl.dC, dm - kl.dm);
  return out;
}

KernelBeliefState optimize_belief(KernelBeliefState belief, const BeliefConfig& config) {
  check_belief(belief);
  if (config.draws < 1) throw std::invalid_argument("belief draws must be positive");
  if (config.posterior_samples < 1) throw std::invalid_argument("posterior sample count must be positive");
  Eigen::VectorXd phi = belief.q_g.params();
  std::uint32_t rejected = 0;
  std::vector<Eigen::VectorXd> etas(static_cast<std::size_t>(config.draws));
  while (belief.step < config.steps) {
    std::mt19937_64 rng = step_rng(belief.seed, belief.step, 2);
    for (auto& e : etas) e = standard_normal(belief.size(), rng);
    const ElboGradient g = global_gradient(belief, etas);
    ++belief.step;
    if (!std::isfinite(g.value) || !g.gradient.allFinite()) {
      if (++rejected >= 3) {
        std::ostringstream os;
        os << "belief optimization aborted at step " << belief.step
           << ": three consecutive non-finite steps";
        throw TrainingAborted(os.str());
      }
      continue;
    }
    rejected = 0;
    adam_ascend(phi, g.gradient, belief.moments, config.adam);
    belief.q_g.set_params(phi);
  }
  belief.posterior_samples = config.posterior_samples;
  belief.posterior = posterior_mc(belief, config.posterior_samples, belief.seed);
  return belief;
}

Eigen::VectorXd posterior_mc(const KernelBeliefState& belief, int samples, std::uint64_t seed) {
  if (samples < 1) throw std::invalid_argument("posterior sample count must be positive");
  const Eigen::Index k = belief.q_g.dim();
  std::mt19937_64 rng = step_rng(seed, 0, 3);
  Eigen::VectorXd acc = Eigen::VectorXd::Zero(k);
  for (int s = 0; s < samples; ++s) acc += softmax_kernel_prob(belief.q_g.sample(standard_normal(k, rng)));
  return acc / acc.sum();
}

std::vector<std::size_t> top_kernels(const KernelBeliefState& belief, std::size_t m) {
  const auto k = static_cast<std::size_t>(belief.size());
  if (m < 1 || m > k) throw std::invalid_argument("subset size must be in [1, K]");
  if (static_cast<std::size_t>(belief.posterior.size()) != k) {
    throw std::invalid_argument("posterior has not been estimated");
  }
  std::vector<std::size_t> order(k);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const double pa = belief.posterior[static_cast<Eigen::Index>(a)];
    const double pb = belief.posterior[static_cast<Eigen::Index>(b)];
    if (pa != pb) return pa > pb;
    return belief.kernel_names[a] < belief.kernel_names[b];
  });
  order.resize(m);
  return order;
}

KernelBeliefState prune_and_rebuild(const KernelBeliefState& belief, std::size_t m,
                                    const BeliefConfig& config) {
  const std::vector<std::size_t> keep = top_kernels(belief, m);
  std::vector<std::string> names;
  Eigen::VectorXd elbos(static_cast<Eigen::Index>(m));
  Eigen::VectorXd prior(static_cast<Eigen::Index>(m));
  for (std::size_t i = 0; i < m; ++i) {
    const auto src = static_cast<Eigen::Index>(keep[i]);
    names.push_back(belief.kernel_names[keep[i]]);
    elbos[static_cast<Eigen::Index>(i)] = belief.local_elbos[src];
    prior[static_cast<Eigen::Index>(i)] = belief.prior_mean[src];
  }
  return optimize_belief(make_belief(std::move(names), std::move(elbos), belief.seed, std::move(prior)),
                         config);
}

}  // namespace vbks
