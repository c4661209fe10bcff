#ifndef VBKS_HARNESS_HPP
#define VBKS_HARNESS_HPP

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "vbks/gp_core.hpp"
#include "vbks/kernel.hpp"
#include "vbks/kernel_belief.hpp"
#include "vbks/local_elbo.hpp"

namespace vbks {

struct RunConfig {
  std::vector<KernelExpr> kernels;
  Eigen::Index inducing = 16;
  LocalConfig local{};
  BeliefConfig belief{};
  ThetaMode theta_mode = ThetaMode::Full;
  int s_theta = 100;
  Eigen::VectorXd prior_mean;  // empty: zero
  std::uint64_t seed = 0;
  int workers = 1;
  /// Posterior trace cadence as a fraction of the local step budget.
  double checkpoint_fraction = 0.0128;
  /// Re-optimize the belief over the top-m kernels; 0 disables.
  std::size_t prune_top = 0;
  bool observation_noise = false;
  /// Artifacts are written here when set.
  std::optional<std::filesystem::path> output_dir;
  bool resume = false;
  /// Stop local training at the first checkpoint at or after this step and
  /// skip the later stages (0: run to completion).
  std::uint64_t stop_after = 0;

  void validate(Eigen::Index n_data) const;
};

struct ExcludedKernel {
  std::string kernel;
  std::string reason;
};

struct RunResult {
  std::vector<KernelExpr> kernels;  // survivors, in input order
  std::vector<SgprState> states;
  std::vector<ExcludedKernel> excluded;
  std::vector<std::uint64_t> checkpoint_steps;
  /// One posterior over survivors per checkpoint that had finite L* everywhere.
  std::vector<std::pair<std::size_t, Eigen::VectorXd>> posterior_trace;
  std::optional<KernelBeliefState> belief;
  std::optional<KernelBeliefState> pruned;
  std::optional<BatchMoments> predictions;
  std::optional<double> rmse_bma;
  std::optional<double> rmse_single;
  std::map<std::string, double> stage_seconds;
  bool complete = false;

  /// Posterior used for prediction: the pruned one if present, over
  /// `prediction_kernels()`.
  const KernelBeliefState& final_belief() const;
  std::vector<std::size_t> prediction_kernels() const;
};

/// Checkpoint indices at which the posterior trace is taken.
std::vector<std::uint64_t> checkpoint_schedule(std::uint64_t steps, double fraction);

/// Seed derived from the run seed and a label (a kernel name, or a stage
/// name). Keying by name keeps one kernel's run independent of which other
/// kernels are in the set.
std::uint64_t derive_seed(std::uint64_t run_seed, std::string_view label);

/// Trains every kernel (worker pool), fits the belief, predicts on test data
/// if given, and writes artifacts to config.output_dir.
RunResult run_vbks(const RunConfig& config, const Dataset& train, const Dataset* test = nullptr);

/// "(PER+RQ)*LIN" -> "_PER+RQ_xLIN", safe for file names.
std::string sanitize_kernel_name(const std::string& name);

}  // namespace vbks

#endif  // VBKS_HARNESS_HPP
