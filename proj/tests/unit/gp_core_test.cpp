#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include <vbks/gp_core.hpp>

#include "oracles.hpp"

using namespace vbks;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

VectorXd se_theta(double sf2, double l, double noise) {
  return raw_from_constrained((VectorXd(3) << sf2, l, noise).finished());
}

Dataset noise_data(Eigen::Index n, std::mt19937_64& rng) {
  Dataset d;
  d.X = oracle::uniform_points(n, 1, -3, 3, rng);
  d.y = oracle::randn(n, rng);
  return d;
}

}  // namespace

TEST(CholJitter, IdentityNeedsNoJitter) {
  const CholeskyFactor f = chol_jitter(MatrixXd::Identity(3, 3));
  EXPECT_EQ(f.jitter, 0.0);
  EXPECT_EQ(f.L, MatrixXd::Identity(3, 3));
}

TEST(CholJitter, RankOneNeedsJitter) {
  const VectorXd v = (VectorXd(4) << 1.0, -2.0, 0.5, 3.0).finished();
  const MatrixXd A = v * v.transpose();
  const CholeskyFactor f = chol_jitter(A);
  EXPECT_GT(f.jitter, 0.0);
  const double err = (f.L * f.L.transpose() - A).norm();
  EXPECT_LE(err, f.jitter * std::sqrt(4.0) * (1.0 + 1e-9) + 1e-12 * A.trace());
  EXPECT_LE(f.jitter, kJitterLadder.back() * A.trace() / 4.0);
}

TEST(CholJitter, SeGramReconstruction) {
  std::mt19937_64 rng(2);
  const MatrixXd X = oracle::uniform_points(10, 1, -5, 5, rng);
  const MatrixXd K = gram_matrix(parse_kernel("SE"), se_theta(1.0, 1.0, 0.1), X, X);
  const CholeskyFactor f = chol_jitter(K);
  const MatrixXd R = f.L * f.L.transpose() - f.jitter * MatrixXd::Identity(10, 10);
  EXPECT_LE((R - K).norm() / K.norm(), 1e-10);
}

TEST(CholJitter, Failures) {
  EXPECT_THROW(chol_jitter(-MatrixXd::Identity(2, 2)), NumericalError);
  EXPECT_THROW(chol_jitter(MatrixXd(0, 0)), NumericalError);
  MatrixXd bad = MatrixXd::Identity(2, 2);
  bad(0, 1) = std::nan("");
  EXPECT_THROW(chol_jitter(bad), NumericalError);
}

TEST(CholJitter, SolvesAndLogDet) {
  std::mt19937_64 rng(4);
  const MatrixXd L = oracle::random_lower(5, rng);
  const MatrixXd A = L * L.transpose();
  const CholeskyFactor f = chol_jitter(A);
  const VectorXd b = oracle::randn(5, rng);
  EXPECT_LT((A * f.solve(b) - b).norm(), 1e-10);
  EXPECT_NEAR(f.log_det(), std::log(A.determinant()), 1e-10);
}

TEST(FullGp, InterpolatesWithTinyNoise) {
  std::mt19937_64 rng(6);
  const Dataset d = noise_data(6, rng);
  const auto e = parse_kernel("SE");
  const Moments m = full_gp_predict(e, se_theta(1.0, 0.7, 1e-10), d, Eigen::RowVectorXd(d.X.row(2)));
  EXPECT_NEAR(m.mean, d.y[2], 1e-5);
  EXPECT_NEAR(m.variance, 0.0, 1e-5);
}

TEST(FullGp, RevertsToPriorFarAway) {
  std::mt19937_64 rng(7);
  const Dataset d = noise_data(6, rng);
  const Moments m = full_gp_predict(parse_kernel("SE"), se_theta(2.5, 0.5, 0.1), d,
                                    Eigen::RowVectorXd(Eigen::RowVectorXd::Constant(1, 100.0)));
  EXPECT_NEAR(m.mean, 0.0, 1e-12);
  EXPECT_NEAR(m.variance, 2.5, 1e-12);
}

TEST(FullGp, MatchesExplicitInverse) {
  std::mt19937_64 rng(8);
  const Dataset d = noise_data(5, rng);
  const auto e = parse_kernel("PER+SE");
  const VectorXd th = raw_from_constrained((VectorXd(6) << 0.8, 1.1, 2.0, 0.6, 1.5, 0.05).finished());
  const MatrixXd Xs = oracle::uniform_points(7, 1, -4, 4, rng);
  const BatchMoments got = full_gp_predict(e, th, d, Xs);
  const BatchMoments want = oracle::gp_posterior_inverse(e, th, d, Xs);
  EXPECT_LT((got.mean - want.mean).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_LT((got.variance - want.variance).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Dtc, ConditionalOnInducingInputs) {
  std::mt19937_64 rng(9);
  const InducingSet U{oracle::uniform_points(4, 1, -2, 2, rng)};
  const VectorXd u = oracle::randn(4, rng);
  const auto e = parse_kernel("SE");
  const VectorXd th = se_theta(1.0, 1.0, 0.1);
  const GaussianConditional c = dtc_train_conditional(e, th, U, u, U.Z);
  EXPECT_LT((c.mean - u).norm(), 1e-9);
  EXPECT_LT(c.cov.cwiseAbs().maxCoeff(), 1e-9);

  const Moments m = dtc_test_conditional(e, th, U, u, U.Z.row(1));
  EXPECT_NEAR(m.mean, u[1], 1e-9);
  EXPECT_NEAR(m.variance, 0.0, 1e-9);
}

TEST(Dtc, InducingEqualsDataIsExact) {
  std::mt19937_64 rng(10);
  const Dataset d = noise_data(8, rng);
  const InducingSet U{d.X};
  const auto e = parse_kernel("RQ");
  const VectorXd th = raw_from_constrained((VectorXd(4) << 1.0, 0.8, 1.5, 0.1).finished());
  const VectorXd u = oracle::randn(8, rng);
  const GaussianConditional c = dtc_train_conditional(e, th, U, u, d.X);
  EXPECT_LT(c.cov.cwiseAbs().maxCoeff(), 1e-8);
  EXPECT_LT((c.mean - u).norm(), 1e-8);
}

TEST(Dtc, MatchesJointConditioning) {
  std::mt19937_64 rng(12);
  const auto e = parse_kernel("PER*SE+LIN");
  const VectorXd th = raw_from_constrained((VectorXd(7) << 1.0, 1.2, 2.5, 1.0, 2.0, 3.0, 0.1).finished());
  const MatrixXd X = oracle::uniform_points(9, 1, -3, 3, rng);
  const InducingSet U{X.topRows(4)};
  const VectorXd u = oracle::randn(4, rng);
  const GaussianConditional got = dtc_train_conditional(e, th, U, u, X);
  const GaussianConditional want = oracle::joint_condition(e, th, U.Z, u, X);
  EXPECT_LT((got.mean - want.mean).cwiseAbs().maxCoeff(), 1e-8);
  EXPECT_LT((got.cov - want.cov).cwiseAbs().maxCoeff(), 1e-8);

  const Eigen::RowVectorXd xs = Eigen::RowVectorXd::Constant(1, 0.37);
  const Moments m = dtc_test_conditional(e, th, U, u, xs);
  const GaussianConditional w1 = oracle::joint_condition(e, th, U.Z, u, MatrixXd(xs));
  EXPECT_NEAR(m.mean, w1.mean[0], 1e-8);
  EXPECT_NEAR(m.variance, w1.cov(0, 0), 1e-8);
}

TEST(Dtc, ZeroUGivesNystromResidual) {
  std::mt19937_64 rng(13);
  const InducingSet U{oracle::uniform_points(5, 1, -2, 2, rng)};
  const auto e = parse_kernel("SE");
  const VectorXd th = se_theta(1.3, 0.9, 0.1);
  const Eigen::RowVectorXd xs = Eigen::RowVectorXd::Constant(1, 0.25);
  const Moments m = dtc_test_conditional(e, th, U, VectorXd::Zero(5), xs);
  const MatrixXd Kuu = oracle::gram(e, th, U.Z, U.Z);
  const VectorXd kus = oracle::gram(e, th, U.Z, MatrixXd(xs));
  EXPECT_EQ(m.mean, 0.0);
  EXPECT_NEAR(m.variance, 1.3 - kus.dot(Kuu.inverse() * kus), 1e-10);
}

TEST(Dtc, WrongULength) {
  const InducingSet U{MatrixXd::Zero(2, 1)};
  EXPECT_THROW(dtc_train_conditional(parse_kernel("SE"), VectorXd::Zero(3), U, VectorXd::Zero(3), U.Z), DataError);
}

TEST(Inducing, DistinctRowsFromData) {
  std::mt19937_64 rng(14);
  Dataset d = noise_data(20, rng);
  d.X.row(3) = d.X.row(4);
  const InducingSet U = choose_inducing(d, 19, 1);
  for (Eigen::Index i = 0; i < U.size(); ++i) {
    for (Eigen::Index j = 0; j < i; ++j) EXPECT_NE(U.Z.row(i), U.Z.row(j));
    bool found = false;
    for (Eigen::Index r = 0; r < d.size(); ++r) found |= d.X.row(r) == U.Z.row(i);
    EXPECT_TRUE(found);
  }
  EXPECT_THROW(choose_inducing(d, 20, 1), DataError);
  EXPECT_EQ(choose_inducing(d, 5, 9).Z, choose_inducing(d, 5, 9).Z);
}

TEST(DatasetValidate, Errors) {
  Dataset d;
  EXPECT_THROW(d.validate(), DataError);
  d.X = MatrixXd::Zero(3, 1);
  d.y = VectorXd::Zero(2);
  EXPECT_THROW(d.validate(), DataError);
  d.y = VectorXd::Zero(3);
  d.y[0] = std::nan("");
  EXPECT_THROW(d.validate(), DataError);
}
