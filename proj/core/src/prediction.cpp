#include "vbks/prediction.hpp"

#include <cmath>
#include <stdexcept>

namespace vbks {

BatchMoments predict_given_theta(const SgprState& state, const Eigen::VectorXd& raw_theta,
                                 const Eigen::MatrixXd& Xstar) {
  if (Xstar.cols() != state.inducing.Z.cols()) throw DataError("test inputs have the wrong dimension");
  const KernelEvaluator k(state.kernel, raw_theta);
  const CholeskyFactor chol = chol_jitter(gram_matrix(k, state.inducing.Z, state.inducing.Z));
  const Eigen::MatrixXd Ksu = gram_matrix(k, Xstar, state.inducing.Z);
  const Eigen::MatrixXd V = chol.solve_lower(Ksu.transpose());      // L^-1 K_U*
  const Eigen::MatrixXd Wt = chol.solve(Eigen::MatrixXd(Ksu.transpose()));  // A^-1 K_U*

  BatchMoments out;
  out.mean = Wt.transpose() * state.q_u.mean();
  out.variance = gram_diagonal(k, Xstar) - V.colwise().squaredNorm().transpose();
  if (state.q_u.is_full()) {
    const Eigen::MatrixXd S = state.q_u.scale().triangularView<Eigen::Lower>().transpose() * Wt;
    out.variance += S.colwise().squaredNorm().transpose();
  }
  return out;
}

BatchMoments predict_over_thetas(const SgprState& state, const Eigen::MatrixXd& Xstar,
                                 std::span<const Eigen::VectorXd> thetas) {
  if (thetas.empty()) throw std::invalid_argument("need at least one theta draw");
  const Eigen::Index n = Xstar.rows();
  Eigen::VectorXd m1 = Eigen::VectorXd::Zero(n), m2 = Eigen::VectorXd::Zero(n);
  for (const auto& theta : thetas) {
    const BatchMoments c = predict_given_theta(state, theta, Xstar);
    m1 += c.mean;
    m2 += (c.variance.array() + c.mean.array().square()).matrix();
  }
  const auto s = static_cast<double>(thetas.size());
  BatchMoments out;
  out.mean = m1 / s;
  out.variance = (m2 / s).array() - out.mean.array().square();
  return out;
}

BatchMoments predict_kernel(const SgprState& state, const Eigen::MatrixXd& Xstar, int s_theta,
                            std::uint64_t seed) {
  if (!state.q_theta.is_full()) return predict_given_theta(state, state.q_theta.mean(), Xstar);
  if (s_theta < 1) throw std::invalid_argument("s_theta must be positive");
  std::mt19937_64 rng = step_rng(seed, 0, 4);
  std::vector<Eigen::VectorXd> thetas;
  for (int s = 0; s < s_theta; ++s) {
    thetas.push_back(state.q_theta.sample(standard_normal(state.q_theta.dim(), rng)));
  }
  return predict_over_thetas(state, Xstar, thetas);
}

double expected_noise_variance(const SgprState& state) {
  const auto slot = static_cast<Eigen::Index>(state.kernel.noise_index());
  const double m = state.q_theta.mean()[slot];
  if (!state.q_theta.is_full()) return std::exp(m);
  return std::exp(m + 0.5 * state.q_theta.scale().row(slot).squaredNorm());
}

BatchMoments mix_moments(std::span<const BatchMoments> components, const Eigen::VectorXd& q) {
  if (components.empty() || static_cast<Eigen::Index>(components.size()) != q.size()) {
    throw std::invalid_argument("mixture weights must match the number of components");
  }
  if ((q.array() < 0.0).any() || std::abs(q.sum() - 1.0) > 1e-6) {
    throw std::invalid_argument("mixture weights are not on the probability simplex");
  }
  const Eigen::Index n = components.front().mean.size();
  for (const auto& c : components) {
    if (c.mean.size() != n || c.variance.size() != n) {
      throw std::invalid_argument("mixture components have different lengths");
    }
  }
  BatchMoments out;
  out.mean = Eigen::VectorXd::Zero(n);
  out.variance = Eigen::VectorXd::Zero(n);
  for (std::size_t i = 0; i < components.size(); ++i) {
    const double w = q[static_cast<Eigen::Index>(i)];
    if (w == 0.0) continue;
    out.mean += w * components[i].mean;
  }
  for (std::size_t i = 0; i < components.size(); ++i) {
    const double w = q[static_cast<Eigen::Index>(i)];
    if (w == 0.0) continue;
    out.variance +=
        w * (components[i].variance.array() + (components[i].mean - out.mean).array().square()).matrix();
  }
  return out;
}

BatchMoments predict_bma(std::span<const SgprState> states, const Eigen::VectorXd& q,
                         const Eigen::MatrixXd& Xstar, int s_theta, std::uint64_t seed) {
  if (static_cast<Eigen::Index>(states.size()) != q.size()) {
    throw std::invalid_argument("posterior length must match the number of kernels");
  }
  std::vector<BatchMoments> parts(states.size());
  for (std::size_t i = 0; i < states.size(); ++i) {
    // Zero-weight kernels still need a placeholder of the right length.
    if (q[static_cast<Eigen::Index>(i)] == 0.0) {
      parts[i] = {Eigen::VectorXd::Zero(Xstar.rows()), Eigen::VectorXd::Zero(Xstar.rows())};
    } else {
      parts[i] = predict_kernel(states[i], Xstar, s_theta, seed);
    }
  }
  return mix_moments(parts, q);
}

double rmse(const Eigen::VectorXd& predictions, const Eigen::VectorXd& truth) {
  if (truth.size() == 0) throw std::invalid_argument("rmse of an empty test set");
  if (predictions.size() != truth.size()) throw std::invalid_argument("rmse: length mismatch");
  return std::sqrt((predictions - truth).squaredNorm() / static_cast<double>(truth.size()));
}

}  // namespace vbks
