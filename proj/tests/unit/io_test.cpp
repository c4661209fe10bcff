#include <gtest/gtest.h>

#include <nlohmann/json.hpp>

#include <cmath>
#include <filesystem>
#include <random>

#include <vbks/io.hpp>

#include "oracles.hpp"

using namespace vbks;
using Eigen::MatrixXd;
using Eigen::VectorXd;
namespace fs = std::filesystem;

namespace {

class TempDir {
 public:
  TempDir() {
    std::random_device rd;
    path_ = fs::temp_directory_path() / ("vbks_io_" + std::to_string(rd()));
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

}  // namespace

TEST(Csv, HandWrittenRows) {
  const Dataset d = parse_csv("x0,x1,y\n1.5,2,3\n-4,5e-1,6\n7,8,-0.25\n");
  ASSERT_EQ(d.size(), 3);
  ASSERT_EQ(d.dim(), 2);
  EXPECT_EQ(d.X(0, 0), 1.5);
  EXPECT_EQ(d.X(1, 1), 0.5);
  EXPECT_EQ(d.y[2], -0.25);
  EXPECT_FALSE(d.normalization.has_value());

  const Dataset noheader = parse_csv("1,2\n3,4\r\n");
  EXPECT_EQ(noheader.size(), 2);
  EXPECT_EQ(noheader.y[1], 4.0);
}

TEST(Csv, Errors) {
  EXPECT_THROW(parse_csv(""), IoError);
  EXPECT_THROW(parse_csv("a,b\n"), IoError);
  EXPECT_THROW(parse_csv("1,2\n3\n"), IoError);
  EXPECT_THROW(parse_csv("1,2\n3,abc\n"), IoError);
  EXPECT_THROW(parse_csv("1,2\n3,\n"), IoError);
  EXPECT_THROW(parse_csv("1\n2\n"), IoError);
  EXPECT_THROW(ingest_csv("/nonexistent/file.csv"), IoError);
}

TEST(Csv, NormalizeStandardizesEveryColumn) {
  std::mt19937_64 rng(1);
  Dataset raw;
  raw.X = oracle::uniform_points(50, 2, 3, 9, rng);
  raw.y = (4.0 + 2.0 * oracle::randn(50, rng).array()).matrix();
  const Dataset d = normalize_dataset(raw);
  for (Eigen::Index j = 0; j < 2; ++j) {
    EXPECT_NEAR(d.X.col(j).mean(), 0.0, 1e-10);
    EXPECT_NEAR(std::sqrt(d.X.col(j).array().square().mean()), 1.0, 1e-10);
  }
  EXPECT_NEAR(d.y.mean(), 0.0, 1e-10);
  EXPECT_NEAR(std::sqrt(d.y.array().square().mean()), 1.0, 1e-10);
  ASSERT_TRUE(d.normalization);

  const BatchMoments back = denormalize({d.y, VectorXd::Ones(50)}, *d.normalization);
  EXPECT_LT((back.mean - raw.y).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_NEAR(back.variance[0], d.normalization->y_scale * d.normalization->y_scale, 1e-15);
}

TEST(Csv, WriteThenIngestRoundTrips) {
  TempDir tmp;
  std::mt19937_64 rng(2);
  Dataset d;
  d.X = oracle::uniform_points(30, 3, -1e3, 1e3, rng);
  d.y = 1e-7 * oracle::randn(30, rng);
  write_csv(d, tmp.path() / "d.csv");
  const Dataset r = ingest_csv(tmp.path() / "d.csv");
  EXPECT_LE((r.X - d.X).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LE((r.y - d.y).cwiseAbs().maxCoeff(), 1e-12);

  const Dataset n = ingest_csv(tmp.path() / "d.csv", true);
  EXPECT_NEAR(n.y.mean(), 0.0, 1e-10);
}

TEST(Split, DisjointAndComplete) {
  std::mt19937_64 rng(3);
  Dataset d;
  d.X = MatrixXd(20, 1);
  for (int i = 0; i < 20; ++i) d.X(i, 0) = i;
  d.y = d.X.col(0);
  const auto [train, test] = split_dataset(d, 5, 9);
  EXPECT_EQ(train.size(), 15);
  EXPECT_EQ(test.size(), 5);
  std::vector<int> seen(20, 0);
  for (Eigen::Index i = 0; i < train.size(); ++i) seen[static_cast<std::size_t>(train.y[i])]++;
  for (Eigen::Index i = 0; i < test.size(); ++i) seen[static_cast<std::size_t>(test.y[i])]++;
  for (int c : seen) EXPECT_EQ(c, 1);
  EXPECT_THROW(split_dataset(d, 20, 1), DataError);
}

TEST(Checkpoint, KernelStateRoundTrip) {
  std::mt19937_64 rng(4);
  Dataset d;
  d.X = oracle::uniform_points(30, 1, -2, 2, rng);
  d.y = oracle::randn(30, rng);
  for (ThetaMode mode : {ThetaMode::Full, ThetaMode::PointEstimate}) {
    SgprState s = init_state(parse_kernel("(PER+RQ)*LIN"), d, InducingSet{d.X.topRows(4)}, mode, 77);
    LocalConfig c;
    c.steps = 30;
    s = optimize_local(s, d, c);
    const SgprState r = state_from_json(state_to_json(s));
    EXPECT_EQ(r.kernel, s.kernel);
    EXPECT_EQ(r.inducing.Z, s.inducing.Z);
    EXPECT_EQ(r.params(), s.params());
    EXPECT_EQ(r.q_theta.mode(), s.q_theta.mode());
    EXPECT_EQ(r.moments.first, s.moments.first);
    EXPECT_EQ(r.moments.second, s.moments.second);
    EXPECT_EQ(r.moments.updates, s.moments.updates);
    EXPECT_EQ(r.step, s.step);
    EXPECT_EQ(r.seed, s.seed);
    EXPECT_EQ(r.elbo_star, s.elbo_star);
    EXPECT_EQ(r.elbo_ema, s.elbo_ema);
    EXPECT_EQ(r.n_evals, s.n_evals);
  }
}

TEST(Checkpoint, NanSmoothedElboSurvives) {
  Dataset d;
  d.X = MatrixXd::Random(5, 1);
  d.y = VectorXd::Random(5);
  const SgprState s = init_state(parse_kernel("SE"), d, InducingSet{d.X.topRows(2)}, ThetaMode::Full, 1);
  ASSERT_TRUE(std::isnan(s.elbo_star));
  EXPECT_TRUE(std::isnan(state_from_json(state_to_json(s)).elbo_star));
}

TEST(Checkpoint, BeliefRoundTrip) {
  KernelBeliefState b = make_belief({"SE", "PER*LIN"}, (VectorXd(2) << -3.5, 1.25).finished(), 9,
                                    (VectorXd(2) << 0.5, 0.0).finished());
  BeliefConfig c;
  c.steps = 40;
  c.posterior_samples = 100;
  b = optimize_belief(b, c);
  const KernelBeliefState r = belief_from_json(belief_to_json(b));
  EXPECT_EQ(r.kernel_names, b.kernel_names);
  EXPECT_EQ(r.q_g.params(), b.q_g.params());
  EXPECT_EQ(r.prior_mean, b.prior_mean);
  EXPECT_EQ(r.local_elbos, b.local_elbos);
  EXPECT_EQ(r.posterior, b.posterior);
  EXPECT_EQ(r.step, b.step);
  EXPECT_EQ(r.moments.first, b.moments.first);
}

TEST(Checkpoint, RejectsForeignDocuments) {
  EXPECT_THROW(state_from_json("not json"), IoError);
  EXPECT_THROW(state_from_json(R"({"format":"something-else"})"), IoError);
  KernelBeliefState b = make_belief({"SE"}, VectorXd::Zero(1), 1);
  EXPECT_THROW(state_from_json(belief_to_json(b)), IoError);
  auto j = nlohmann::json::parse(belief_to_json(b));
  EXPECT_EQ(j.at("format"), kCheckpointFormat);
}

TEST(TextFiles, AtomicWriteAndRead) {
  TempDir tmp;
  const fs::path p = tmp.path() / "a.txt";
  write_text(p, "hello\n");
  write_text(p, "world\n");
  EXPECT_EQ(read_text(p), "world\n");
  EXPECT_THROW(read_text(tmp.path() / "missing.txt"), IoError);
}
