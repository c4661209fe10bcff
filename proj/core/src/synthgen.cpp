#include "vbks/synthgen.hpp"

#include <cmath>
#include <numbers>
#include <random>

#include "vbks/variational.hpp"

namespace vbks {

namespace {

Eigen::MatrixXd uniform_box(Eigen::Index n, const Eigen::VectorXd& lo, const Eigen::VectorXd& hi,
                            std::mt19937_64& rng) {
  Eigen::MatrixXd X(n, lo.size());
  for (Eigen::Index j = 0; j < lo.size(); ++j) {
    std::uniform_real_distribution<double> u(lo[j], hi[j]);
    for (Eigen::Index i = 0; i < n; ++i) X(i, j) = u(rng);
  }
  return X;
}

SyntheticSpec make_preset(const char* name, std::initializer_list<double> constrained) {
  SyntheticSpec s;
  s.kernel = parse_kernel(name);
  Eigen::VectorXd c(static_cast<Eigen::Index>(constrained.size()));
  Eigen::Index i = 0;
  for (double v : constrained) c[i++] = v;
  s.raw_theta = raw_from_constrained(c);
  return s;
}

}  // namespace

Eigen::VectorXd sample_gp_prior(const KernelExpr& kernel, const Eigen::VectorXd& raw_theta,
                                const Eigen::MatrixXd& X, std::mt19937_64& rng) {
  const double noise = std::exp(raw_theta[static_cast<Eigen::Index>(kernel.noise_index())]);
  Eigen::MatrixXd K = gram_matrix(kernel, raw_theta, X, X);
  K.diagonal().array() += noise;
  const CholeskyFactor chol = chol_jitter(K);
  return chol.L * standard_normal(X.rows(), rng);
}

Dataset generate_synthetic(const SyntheticSpec& spec) {
  if (spec.n_seed < 1 || spec.n_data < 1) throw DataError("n_seed and n_data must be positive");
  if (spec.lower.size() < 1 || spec.lower.size() != spec.upper.size()) {
    throw DataError("domain bounds must be non-empty and of equal length");
  }
  if (((spec.upper - spec.lower).array() <= 0.0).any()) {
    throw DataError("domain upper bound must exceed the lower bound");
  }
  check_hyper(spec.kernel, spec.raw_theta);
  std::mt19937_64 rng(spec.seed);
  Dataset seed_set;
  seed_set.X = uniform_box(spec.n_seed, spec.lower, spec.upper, rng);
  seed_set.y = sample_gp_prior(spec.kernel, spec.raw_theta, seed_set.X, rng);

  Dataset out;
  out.X = uniform_box(spec.n_data, spec.lower, spec.upper, rng);
  out.y = full_gp_predict(spec.kernel, spec.raw_theta, seed_set, out.X).mean;
  return out;
}

SyntheticSpec preset_per_plus_rq_times_lin() {
  // PER(sf2, l, p), RQ(sf2, l, alpha), LIN(l), noise
  return make_preset("(PER+RQ)*LIN", {0.01, 2.0, 2.0 * std::numbers::pi, 0.01, 3.0, 1.0, 5.0, 1e-4});
}

SyntheticSpec preset_per_lin_rq() {
  return make_preset("PER*LIN*RQ", {0.01, 1.0, 2.0 * std::numbers::pi, 3.0, 0.01, 8.0, 1.0, 1e-4});
}

std::vector<KernelExpr> recovery_kernel_set() {
  return parse_kernel_list(
      "LIN+RQ\nLIN*RQ+LIN\nLIN*RQ+PER\nPER+RQ+SE\nPER+LIN+RQ\nPER+PER+SE\n"
      "PER*SE+SE\nPER*RQ+SE\nPER*LIN+SE\nPER*LIN*SE\nPER*LIN*RQ\n(PER+RQ)*LIN\n");
}

}  // namespace vbks
