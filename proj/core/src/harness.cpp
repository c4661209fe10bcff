#include "vbks/harness.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "vbks/io.hpp"
#include "vbks/prediction.hpp"

namespace vbks {

using nlohmann::json;

namespace {

struct KernelRun {
  SgprState state;
  std::vector<double> snapshots;  // L* at each reached checkpoint
  std::vector<TraceRow> trace;
  std::optional<std::string> abort_reason;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

json nullable(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

double from_nullable(const json& j) {
  return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>();
}

std::filesystem::path kernel_checkpoint_path(const std::filesystem::path& dir, std::size_t i) {
  return dir / ("checkpoint_kernel_" + std::to_string(i) + ".json");
}

void save_kernel_run(const std::filesystem::path& path, const KernelRun& run) {
  json j;
  j["format"] = kCheckpointFormat;
  j["state"] = json::parse(state_to_json(run.state));
  json snaps = json::array();
  for (double v : run.snapshots) snaps.push_back(nullable(v));
  j["elbo_snapshots"] = snaps;
  json rows = json::array();
  for (const auto& r : run.trace) rows.push_back({r.step, nullable(r.elbo), nullable(r.elbo_star), r.grad_norm});
  j["trace"] = rows;
  j["aborted"] = run.abort_reason ? json(*run.abort_reason) : json(nullptr);
  write_text(path, j.dump());
}

KernelRun load_kernel_run(const std::filesystem::path& path, const KernelExpr& expected) {
  const json j = json::parse(read_text(path), nullptr, false);
  if (j.is_discarded() || !j.is_object() || j.value("format", "") != kCheckpointFormat) {
    throw IoError(path.string() + ": not a " + kCheckpointFormat + " document");
  }
  try {
    KernelRun run;
    run.state = state_from_json(j.at("state").dump());
    if (run.state.kernel.name() != expected.name()) {
      throw IoError(path.string() + ": checkpoint holds kernel " + run.state.kernel.name() +
                    ", expected " + expected.name());
    }
    for (const auto& v : j.at("elbo_snapshots")) run.snapshots.push_back(from_nullable(v));
    for (const auto& r : j.at("trace")) {
      run.trace.push_back({r.at(0).get<std::uint64_t>(), from_nullable(r.at(1)), from_nullable(r.at(2)),
                           r.at(3).get<double>()});
    }
    if (!j.at("aborted").is_null()) run.abort_reason = j.at("aborted").get<std::string>();
    return run;
  } catch (const json::exception& e) {
    throw IoError(path.string() + ": malformed checkpoint: " + e.what());
  }
}

void train_kernel(KernelRun& run, const Dataset& train, const RunConfig& config,
                  const std::vector<std::uint64_t>& schedule,
                  const std::optional<std::filesystem::path>& ckpt_path) {
  LocalConfig segment = config.local;
  auto record = [&run](const TraceRow& r) { run.trace.push_back(r); };
  for (std::size_t c = run.snapshots.size(); c < schedule.size(); ++c) {
    segment.pause_at = schedule[c];
    try {
      run.state = optimize_local(std::move(run.state), train, segment, record);
    } catch (const TrainingAborted& e) {
      run.abort_reason = e.what();
    } catch (const NumericalError& e) {
      run.abort_reason = e.what();
    }
    if (run.abort_reason) {
      if (ckpt_path) save_kernel_run(*ckpt_path, run);
      return;
    }
    run.snapshots.push_back(run.state.elbo_star);
    if (ckpt_path) save_kernel_run(*ckpt_path, run);
    if (config.stop_after > 0 && schedule[c] >= config.stop_after) return;
  }
}

void write_trace_csv(const std::filesystem::path& path, const std::vector<TraceRow>& rows) {
  std::ostringstream os;
  os.precision(17);
  os << "step,elbo,grad_norm,elbo_smoothed\n";
  for (const auto& r : rows) os << r.step << "," << r.elbo << "," << r.grad_norm << "," << r.elbo_star << "\n";
  write_text(path, os.str());
}

}  // namespace

void RunConfig::validate(Eigen::Index n_data) const {
  if (kernels.empty()) throw std::invalid_argument("kernel set is empty");
  std::set<std::string> names;
  for (const auto& k : kernels) {
    if (!names.insert(k.name()).second) throw std::invalid_argument("duplicate kernel " + k.name());
  }
  if (inducing < 1 || inducing > n_data) throw std::invalid_argument("inducing set size must be in [1, |D|]");
  if (!local.full_batch && (local.batch_size < 1 || local.batch_size > n_data)) {
    throw std::invalid_argument("batch size must be in [1, |D|]");
  }
  if (local.steps < 1 || belief.steps < 1) throw std::invalid_argument("step budgets must be positive");
  if (local.lik_draws < 1 || local.ce_draws < 1 || belief.draws < 1) {
    throw std::invalid_argument("draw counts must be positive");
  }
  if (belief.posterior_samples < 1 || s_theta < 1) throw std::invalid_argument("sample counts must be positive");
  if (workers < 1) throw std::invalid_argument("worker count must be positive");
  if (!(checkpoint_fraction > 0.0 && checkpoint_fraction <= 1.0)) {
    throw std::invalid_argument("checkpoint fraction must be in (0, 1]");
  }
  if (prior_mean.size() != 0 && prior_mean.size() != static_cast<Eigen::Index>(kernels.size())) {
    throw std::invalid_argument("prior mean length must equal the number of kernels");
  }
  if (prune_top > kernels.size()) throw std::invalid_argument("prune size exceeds the kernel count");
}

const KernelBeliefState& RunResult::final_belief() const {
  if (pruned) return *pruned;
  if (!belief) throw std::logic_error("run has no belief state");
  return *belief;
}

std::vector<std::size_t> RunResult::prediction_kernels() const {
  if (pruned) return top_kernels(*belief, static_cast<std::size_t>(pruned->size()));
  std::vector<std::size_t> all(states.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return all;
}

std::vector<std::uint64_t> checkpoint_schedule(std::uint64_t steps, double fraction) {
  std::vector<std::uint64_t> out;
  for (std::uint64_t j = 1;; ++j) {
    const auto c = std::min<std::uint64_t>(
        steps, static_cast<std::uint64_t>(std::ceil(static_cast<double>(j) * fraction * static_cast<double>(steps) - 1e-9)));
    if (c == 0) continue;
    if (out.empty() || c > out.back()) out.push_back(c);
    if (c >= steps) break;
  }
  return out;
}

std::uint64_t derive_seed(std::uint64_t run_seed, std::string_view label) {
  // FNV-1a over the label, then a splitmix64 finalizer mixed with the seed.
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : label) h = (h ^ c) * 0x100000001B3ULL;
  std::uint64_t z = run_seed + 0x9E3779B97F4A7C15ULL * (h | 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::string sanitize_kernel_name(const std::string& name) {
  std::string out = name;
  for (char& c : out) {
    if (c == '*') c = 'x';
    else if (c == '(' || c == ')') c = '_';
  }
  return out;
}

RunResult run_vbks(const RunConfig& config, const Dataset& train, const Dataset* test) {
  train.validate();
  config.validate(train.size());
  if (test) {
    test->validate();
    if (test->dim() != train.dim()) throw DataError("test inputs have the wrong dimension");
  }
  const auto& out_dir = config.output_dir;
  if (out_dir) std::filesystem::create_directories(*out_dir);

  RunResult result;
  result.checkpoint_steps = checkpoint_schedule(config.local.steps, config.checkpoint_fraction);
  const std::size_t K = config.kernels.size();
  const InducingSet inducing = choose_inducing(train, config.inducing, config.seed);

  // Local stage: one independent optimization per kernel.
  auto t0 = std::chrono::steady_clock::now();
  std::vector<KernelRun> runs(K);
  for (std::size_t i = 0; i < K; ++i) {
    const auto path = out_dir ? std::optional(kernel_checkpoint_path(*out_dir, i)) : std::nullopt;
    if (config.resume && path && std::filesystem::exists(*path)) {
      runs[i] = load_kernel_run(*path, config.kernels[i]);
    } else {
      runs[i].state = init_state(config.kernels[i], train, inducing, config.theta_mode,
                                 derive_seed(config.seed, config.kernels[i].name()));
    }
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (std::size_t i = next++; i < K; i = next++) {
      if (runs[i].abort_reason) continue;
      try {
        const auto path = out_dir ? std::optional(kernel_checkpoint_path(*out_dir, i)) : std::nullopt;
        train_kernel(runs[i], train, config, result.checkpoint_steps, path);
      } catch (...) {
        std::lock_guard<std::mutex> lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const int n_workers = std::min<int>(config.workers, static_cast<int>(K));
  if (n_workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < n_workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);
  result.stage_seconds["local"] = seconds_since(t0);

  std::vector<std::size_t> alive;
  for (std::size_t i = 0; i < K; ++i) {
    if (runs[i].abort_reason) {
      result.excluded.push_back({config.kernels[i].name(), *runs[i].abort_reason});
    } else if (!std::isfinite(runs[i].state.elbo_star) && runs[i].snapshots.size() == result.checkpoint_steps.size()) {
      result.excluded.push_back({config.kernels[i].name(), "no finite local ELBO estimate"});
    } else {
      alive.push_back(i);
    }
  }
  for (std::size_t i : alive) {
    result.kernels.push_back(config.kernels[i]);
    result.states.push_back(runs[i].state);
    if (out_dir) {
      write_trace_csv(*out_dir / ("elbo_trace_" + sanitize_kernel_name(config.kernels[i].name()) + ".csv"),
                      runs[i].trace);
    }
  }
  const bool finished = std::all_of(alive.begin(), alive.end(), [&](std::size_t i) {
    return runs[i].state.step >= config.local.steps;
  });
  if (!finished) return result;  // interrupted on purpose; resume later
  if (alive.empty()) throw TrainingAborted("every kernel's training was aborted");

  // Belief stage.
  t0 = std::chrono::steady_clock::now();
  std::vector<std::string> names;
  Eigen::VectorXd prior(static_cast<Eigen::Index>(alive.size()));
  for (std::size_t a = 0; a < alive.size(); ++a) {
    names.push_back(config.kernels[alive[a]].name());
    prior[static_cast<Eigen::Index>(a)] =
        config.prior_mean.size() ? config.prior_mean[static_cast<Eigen::Index>(alive[a])] : 0.0;
  }
  const std::uint64_t belief_seed = derive_seed(config.seed, "belief");
  for (std::size_t c = 0; c < result.checkpoint_steps.size(); ++c) {
    Eigen::VectorXd L(static_cast<Eigen::Index>(alive.size()));
    for (std::size_t a = 0; a < alive.size(); ++a) L[static_cast<Eigen::Index>(a)] = runs[alive[a]].snapshots[c];
    if (!L.allFinite()) continue;
    const KernelBeliefState b = optimize_belief(make_belief(names, L, belief_seed, prior), config.belief);
    result.posterior_trace.emplace_back(c, b.posterior);
  }
  Eigen::VectorXd L(static_cast<Eigen::Index>(alive.size()));
  for (std::size_t a = 0; a < alive.size(); ++a) L[static_cast<Eigen::Index>(a)] = runs[alive[a]].state.elbo_star;
  result.belief = optimize_belief(make_belief(names, L, belief_seed, prior), config.belief);
  if (config.prune_top > 0 && config.prune_top < alive.size()) {
    result.pruned = prune_and_rebuild(*result.belief, config.prune_top, config.belief);
  }
  result.stage_seconds["belief"] = seconds_since(t0);

  // Prediction stage.
  if (test) {
    t0 = std::chrono::steady_clock::now();
    const std::vector<std::size_t> idx = result.prediction_kernels();
    std::vector<SgprState> used;
    for (std::size_t i : idx) used.push_back(result.states[i]);
    const KernelBeliefState& fb = result.final_belief();
    const std::uint64_t pred_seed = derive_seed(config.seed, "prediction");
    BatchMoments bma = predict_bma(used, fb.posterior, test->X, config.s_theta, pred_seed);
    const std::size_t top = top_kernels(fb, 1).front();
    BatchMoments single = predict_kernel(used[top], test->X, config.s_theta, pred_seed);
    if (config.observation_noise) {
      for (std::size_t i = 0; i < used.size(); ++i) {
        bma.variance.array() += fb.posterior[static_cast<Eigen::Index>(i)] * expected_noise_variance(used[i]);
      }
      single.variance.array() += expected_noise_variance(used[top]);
    }
    Eigen::VectorXd truth = test->y;
    Eigen::MatrixXd x_raw = test->X;
    if (test->normalization) {
      const Normalization& n = *test->normalization;
      bma = denormalize(bma, n);
      single = denormalize(single, n);
      truth = (truth.array() * n.y_scale + n.y_mean).matrix();
      x_raw = ((x_raw.array().rowwise() * n.x_scale.array()).rowwise() + n.x_mean.array()).matrix();
    }
    result.rmse_bma = rmse(bma.mean, truth);
    result.rmse_single = rmse(single.mean, truth);
    result.predictions = bma;
    result.stage_seconds["prediction"] = seconds_since(t0);

    if (out_dir) {
      std::ostringstream os;
      os.precision(17);
      for (Eigen::Index j = 0; j < x_raw.cols(); ++j) os << "x" << j << ",";
      os << "mean,variance,single_mean,single_variance,y\n";
      for (Eigen::Index r = 0; r < x_raw.rows(); ++r) {
        for (Eigen::Index j = 0; j < x_raw.cols(); ++j) os << x_raw(r, j) << ",";
        os << bma.mean[r] << "," << bma.variance[r] << "," << single.mean[r] << ","
           << single.variance[r] << "," << truth[r] << "\n";
      }
      write_text(*out_dir / "predictions.csv", os.str());
    }
  }
  result.complete = true;

  if (out_dir) {
    std::ostringstream trace;
    trace.precision(17);
    trace << "checkpoint,step,kernel,probability\n";
    for (const auto& [c, q] : result.posterior_trace) {
      for (std::size_t a = 0; a < names.size(); ++a) {
        trace << c << "," << result.checkpoint_steps[c] << "," << names[a] << ","
              << q[static_cast<Eigen::Index>(a)] << "\n";
      }
    }
    write_text(*out_dir / "posterior_trace.csv", trace.str());
    write_text(*out_dir / "checkpoint_belief.json", belief_to_json(*result.belief));
    if (result.pruned) write_text(*out_dir / "checkpoint_belief_pruned.json", belief_to_json(*result.pruned));

    json m;
    m["rmse_bma"] = result.rmse_bma ? json(*result.rmse_bma) : json(nullptr);
    m["rmse_single"] = result.rmse_single ? json(*result.rmse_single) : json(nullptr);
    const KernelBeliefState& fb = result.final_belief();
    m["top_kernel"] = fb.kernel_names[top_kernels(fb, 1).front()];
    json post = json::object();
    for (Eigen::Index a = 0; a < fb.size(); ++a) post[fb.kernel_names[static_cast<std::size_t>(a)]] = fb.posterior[a];
    m["posterior"] = post;
    json local = json::object();
    for (std::size_t a = 0; a < names.size(); ++a) local[names[a]] = result.belief->local_elbos[static_cast<Eigen::Index>(a)];
    m["local_elbos"] = local;
    m["stage_seconds"] = result.stage_seconds;
    json ex = json::array();
    for (const auto& e : result.excluded) ex.push_back({{"kernel", e.kernel}, {"reason", e.reason}});
    m["excluded"] = ex;
    write_text(*out_dir / "metrics.json", m.dump(2));
  }
  return result;
}

}  // namespace vbks
