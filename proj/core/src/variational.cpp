#include "vbks/variational.hpp"

#include <cmath>
#include <numbers>

namespace vbks {

double softplus(double x) {
  return x > 30.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

double softplus_inverse(double y) {
  if (!(y > 0.0)) throw VariationalError("softplus_inverse: argument must be positive");
  return y > 30.0 ? y + std::log(-std::expm1(-y)) : std::log(std::expm1(y));
}

namespace {

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

void require_full(const GaussianVariational& q, const char* what) {
  if (!q.is_full()) {
    throw VariationalError(std::string(what) + " is undefined for a point-estimate distribution");
  }
}

}  // namespace

GaussianVariational GaussianVariational::full(Eigen::VectorXd mean, const Eigen::MatrixXd& scale) {
  const Eigen::Index n = mean.size();
  if (scale.rows() != n || scale.cols() != n) {
    throw VariationalError("scale matrix must be n x n");
  }
  GaussianVariational q;
  q.mode_ = Mode::Full;
  q.mean_ = std::move(mean);
  q.raw_scale_ = Eigen::MatrixXd::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < i; ++j) q.raw_scale_(i, j) = scale(i, j);
    q.raw_scale_(i, i) = softplus_inverse(scale(i, i));
  }
  q.refresh_scale();
  return q;
}

GaussianVariational GaussianVariational::point(Eigen::VectorXd mean) {
  GaussianVariational q;
  q.mode_ = Mode::PointEstimate;
  const Eigen::Index n = mean.size();
  q.mean_ = std::move(mean);
  q.raw_scale_ = Eigen::MatrixXd::Zero(n, n);
  q.scale_ = Eigen::MatrixXd::Zero(n, n);
  return q;
}

void GaussianVariational::refresh_scale() {
  scale_ = raw_scale_.triangularView<Eigen::StrictlyLower>();
  for (Eigen::Index i = 0; i < raw_scale_.rows(); ++i) scale_(i, i) = softplus(raw_scale_(i, i));
}

Eigen::VectorXd GaussianVariational::sample(const Eigen::VectorXd& eta) const {
  if (eta.size() != dim()) throw VariationalError("sample: eta dimension mismatch");
  if (!is_full()) return mean_;
  return scale_.triangularView<Eigen::Lower>() * eta + mean_;
}

Eigen::Index GaussianVariational::num_params() const {
  const Eigen::Index n = dim();
  return is_full() ? n * (n + 1) / 2 + n : n;
}

Eigen::VectorXd GaussianVariational::params() const {
  Eigen::VectorXd phi(num_params());
  Eigen::Index k = 0;
  if (is_full()) {
    for (Eigen::Index i = 0; i < dim(); ++i)
      for (Eigen::Index j = 0; j <= i; ++j) phi[k++] = raw_scale_(i, j);
  }
  phi.tail(dim()) = mean_;
  return phi;
}

void GaussianVariational::set_params(const Eigen::VectorXd& phi) {
  if (phi.size() != num_params()) throw VariationalError("set_params: length mismatch");
  Eigen::Index k = 0;
  if (is_full()) {
    for (Eigen::Index i = 0; i < dim(); ++i)
      for (Eigen::Index j = 0; j <= i; ++j) raw_scale_(i, j) = phi[k++];
    refresh_scale();
  }
  mean_ = phi.tail(dim());
}

Eigen::VectorXd GaussianVariational::pack_gradient(const Eigen::MatrixXd& dC,
                                                   const Eigen::VectorXd& dm) const {
  Eigen::VectorXd g(num_params());
  Eigen::Index k = 0;
  if (is_full()) {
    for (Eigen::Index i = 0; i < dim(); ++i) {
      for (Eigen::Index j = 0; j < i; ++j) g[k++] = dC(i, j);
      g[k++] = dC(i, i) * sigmoid(raw_scale_(i, i));
    }
  }
  g.tail(dim()) = dm;
  return g;
}

double kl_gaussian(const GaussianVariational& q, const Eigen::VectorXd& p_mean,
                   const Eigen::MatrixXd& p_chol) {
  require_full(q, "KL divergence");
  const Eigen::Index n = q.dim();
  if (p_mean.size() != n || p_chol.rows() != n || p_chol.cols() != n) {
    throw VariationalError("kl_gaussian: dimension mismatch");
  }
  const auto P = p_chol.triangularView<Eigen::Lower>();
  const Eigen::MatrixXd A = P.solve(q.scale());
  const Eigen::VectorXd d = P.solve(q.mean() - p_mean);
  const double log_det_p = p_chol.diagonal().array().abs().log().sum();
  const double log_det_q = q.scale().diagonal().array().abs().log().sum();
  return 0.5 * (A.squaredNorm() + d.squaredNorm() - static_cast<double>(n)) + log_det_p - log_det_q;
}

ScaleMeanGradient kl_gaussian_grad(const GaussianVariational& q, const Eigen::VectorXd& p_mean,
                                   const Eigen::MatrixXd& p_chol) {
  require_full(q, "KL divergence");
  const auto P = p_chol.triangularView<Eigen::Lower>();
  ScaleMeanGradient g;
  Eigen::MatrixXd A = P.solve(q.scale());
  P.transpose().solveInPlace(A);
  g.dC = A.triangularView<Eigen::Lower>();
  g.dC.diagonal() -= q.scale().diagonal().cwiseInverse();
  Eigen::VectorXd d = P.solve(q.mean() - p_mean);
  P.transpose().solveInPlace(d);
  g.dm = d;
  return g;
}

double entropy(const GaussianVariational& q) {
  require_full(q, "entropy");
  const auto diag = q.scale().diagonal().array().abs();
  if ((diag == 0.0).any()) throw VariationalError("entropy: zero diagonal entry in scale");
  const double n = static_cast<double>(q.dim());
  return 0.5 * n * std::log(2.0 * std::numbers::pi * std::numbers::e) + diag.log().sum();
}

Eigen::MatrixXd entropy_grad(const GaussianVariational& q) {
  require_full(q, "entropy");
  Eigen::MatrixXd g = Eigen::MatrixXd::Zero(q.dim(), q.dim());
  g.diagonal() = q.scale().diagonal().cwiseInverse();
  return g;
}

double log_normal_density(const Eigen::VectorXd& x, const Eigen::VectorXd& mean,
                          const CholeskyFactor& chol) {
  const Eigen::VectorXd z = chol.solve_lower(x - mean);
  const double n = static_cast<double>(x.size());
  return -0.5 * n * std::log(2.0 * std::numbers::pi) - 0.5 * chol.log_det() - 0.5 * z.squaredNorm();
}

Eigen::VectorXd standard_normal(Eigen::Index n, std::mt19937_64& rng) {
  std::normal_distribution<double> normal;
  Eigen::VectorXd v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = normal(rng);
  return v;
}

double cross_entropy_prior_u(const GaussianVariational& q_u, const GaussianVariational& q_theta,
                             const KernelExpr& expr, const InducingSet& inducing, int n_samples,
                             std::mt19937_64& rng) {
  if (n_samples < 1) throw VariationalError("cross_entropy_prior_u: n_samples must be >= 1");
  if (q_u.dim() != inducing.size()) throw VariationalError("q_u dimension must equal |U|");
  const Eigen::VectorXd zero = Eigen::VectorXd::Zero(q_u.dim());
  double acc = 0.0;
  for (int s = 0; s < n_samples; ++s) {
    const Eigen::VectorXd u = q_u.sample(standard_normal(q_u.dim(), rng));
    const Eigen::VectorXd theta = q_theta.sample(standard_normal(q_theta.dim(), rng));
    const CholeskyFactor chol = chol_jitter(gram_matrix(expr, theta, inducing.Z, inducing.Z));
    acc += log_normal_density(u, zero, chol);
  }
  return acc / n_samples;
}

}  // namespace vbks
