#include "vbks/gp_core.hpp"

#include <algorithm>
#include <numeric>
#include <random>
#include <sstream>

namespace vbks {

Eigen::MatrixXd CholeskyFactor::solve(const Eigen::MatrixXd& B) const {
  Eigen::MatrixXd X = L.triangularView<Eigen::Lower>().solve(B);
  L.triangularView<Eigen::Lower>().transpose().solveInPlace(X);
  return X;
}

Eigen::VectorXd CholeskyFactor::solve(const Eigen::VectorXd& b) const {
  Eigen::VectorXd x = L.triangularView<Eigen::Lower>().solve(b);
  L.triangularView<Eigen::Lower>().transpose().solveInPlace(x);
  return x;
}

Eigen::MatrixXd CholeskyFactor::solve_lower(const Eigen::MatrixXd& B) const {
  return L.triangularView<Eigen::Lower>().solve(B);
}

double CholeskyFactor::log_det() const { return 2.0 * L.diagonal().array().log().sum(); }

CholeskyFactor chol_jitter(const Eigen::MatrixXd& A) {
  if (A.rows() != A.cols() || A.rows() == 0) {
    throw NumericalError("chol_jitter: expected a non-empty square matrix");
  }
  if (!A.allFinite()) throw NumericalError("chol_jitter: non-finite matrix entries");
  const double scale = A.diagonal().mean();
  const auto n = A.rows();
  for (double rung : kJitterLadder) {
    const double jitter = rung * scale;
    if (rung > 0.0 && !(jitter > 0.0)) continue;
    Eigen::LLT<Eigen::MatrixXd> llt(A + jitter * Eigen::MatrixXd::Identity(n, n));
    if (llt.info() != Eigen::Success) continue;
    CholeskyFactor f{llt.matrixL(), jitter, rung};
    if (f.L.diagonal().minCoeff() > 0.0 && f.L.allFinite()) return f;
  }
  std::ostringstream os;
  os << "ill-conditioned kernel matrix: Cholesky failed at maximum jitter ("
     << kJitterLadder.back() << " x mean diagonal " << scale << ", n = " << n << ")";
  throw NumericalError(os.str());
}

void Dataset::validate() const {
  if (X.rows() == 0) throw DataError("dataset is empty");
  if (X.cols() < 1) throw DataError("dataset needs at least one input column");
  if (X.rows() != y.size()) throw DataError("input and output row counts differ");
  if (!X.allFinite() || !y.allFinite()) throw DataError("dataset contains NaN or Inf");
}

InducingSet choose_inducing(const Dataset& data, Eigen::Index m, std::uint64_t seed) {
  data.validate();
  if (m < 1 || m > data.size()) {
    throw DataError("inducing set size must be in [1, |D|]");
  }
  std::vector<Eigen::Index> order(static_cast<std::size_t>(data.size()));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  InducingSet out{Eigen::MatrixXd(m, data.dim())};
  Eigen::Index filled = 0;
  for (Eigen::Index idx : order) {
    if (filled == m) break;
    bool duplicate = false;
    for (Eigen::Index r = 0; r < filled && !duplicate; ++r) {
      duplicate = out.Z.row(r) == data.X.row(idx);
    }
    if (!duplicate) out.Z.row(filled++) = data.X.row(idx);
  }
  if (filled < m) throw DataError("not enough distinct inputs for the requested inducing set");
  return out;
}

BatchMoments full_gp_predict(const KernelExpr& expr, const Eigen::VectorXd& raw_theta,
                             const Dataset& data, const Eigen::MatrixXd& Xstar) {
  data.validate();
  const KernelEvaluator k(expr, raw_theta);
  const double noise = std::exp(raw_theta[static_cast<Eigen::Index>(expr.noise_index())]);
  Eigen::MatrixXd Kdd = gram_matrix(k, data.X, data.X);
  Kdd.diagonal().array() += noise;
  const CholeskyFactor chol = chol_jitter(Kdd);

  const Eigen::MatrixXd Ksd = gram_matrix(k, Xstar, data.X);
  const Eigen::VectorXd alpha = chol.solve(data.y);
  const Eigen::MatrixXd V = chol.solve_lower(Ksd.transpose());

  BatchMoments out;
  out.mean = Ksd * alpha;
  out.variance = gram_diagonal(k, Xstar) - V.colwise().squaredNorm().transpose();
  return out;
}

Moments full_gp_predict(const KernelExpr& expr, const Eigen::VectorXd& raw_theta,
                        const Dataset& data, const Eigen::RowVectorXd& xstar) {
  const BatchMoments b = full_gp_predict(expr, raw_theta, data, Eigen::MatrixXd(xstar));
  return {b.mean[0], b.variance[0]};
}

GaussianConditional dtc_train_conditional(const KernelExpr& expr, const Eigen::VectorXd& raw_theta,
                                          const InducingSet& inducing, const Eigen::VectorXd& u,
                                          const Eigen::MatrixXd& X) {
  if (u.size() != inducing.size()) throw DataError("inducing value length must equal |U|");
  const KernelEvaluator k(expr, raw_theta);
  const CholeskyFactor chol = chol_jitter(gram_matrix(k, inducing.Z, inducing.Z));
  const Eigen::MatrixXd Kxu = gram_matrix(k, X, inducing.Z);
  const Eigen::MatrixXd V = chol.solve_lower(Kxu.transpose());

  GaussianConditional out;
  out.mean = Kxu * chol.solve(u);
  out.cov = gram_matrix(k, X, X) - V.transpose() * V;
  return out;
}

Moments dtc_test_conditional(const KernelExpr& expr, const Eigen::VectorXd& raw_theta,
                             const InducingSet& inducing, const Eigen::VectorXd& u,
                             const Eigen::RowVectorXd& xstar) {
  const GaussianConditional c =
      dtc_train_conditional(expr, raw_theta, inducing, u, Eigen::MatrixXd(xstar));
  return {c.mean[0], c.cov(0, 0)};
}

}  // namespace vbks
