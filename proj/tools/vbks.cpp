#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <filesystem>
#include <iostream>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include <vbks/harness.hpp>
#include <vbks/io.hpp>
#include <vbks/prediction.hpp>
#include <vbks/synthgen.hpp>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace vbks;

namespace {

struct TrainArgs {
  std::string data, test, out, kernels_file, bases = "SE,PER,LIN,RQ", theta_mode = "full", prior_mean;
  int grammar_level = 0;
  bool normalize = false;
  RunConfig run;
};

struct PredictArgs {
  std::string run_dir, data, out;
};

std::vector<BaseKernel> parse_bases(const std::string& text) {
  std::vector<BaseKernel> out;
  std::stringstream ss(text);
  for (std::string tok; std::getline(ss, tok, ',');) {
    if (tok.empty()) continue;
    const KernelExpr k = parse_kernel(tok);
    if (!k.is_leaf()) throw CLI::ValidationError("--bases", "expected base kernel names, got " + tok);
    out.push_back(k.base_kind());
  }
  return out;
}

Eigen::VectorXd parse_vector(const std::string& text) {
  std::vector<double> v;
  std::stringstream ss(text);
  for (std::string tok; std::getline(ss, tok, ',');) v.push_back(std::stod(tok));
  return Eigen::Map<Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

json normalization_json(const Normalization& n) {
  return {{"x_mean", std::vector<double>(n.x_mean.data(), n.x_mean.data() + n.x_mean.size())},
          {"x_scale", std::vector<double>(n.x_scale.data(), n.x_scale.data() + n.x_scale.size())},
          {"y_mean", n.y_mean},
          {"y_scale", n.y_scale}};
}

Normalization normalization_from_json(const json& j) {
  Normalization n;
  const auto xm = j.at("x_mean").get<std::vector<double>>();
  const auto xs = j.at("x_scale").get<std::vector<double>>();
  n.x_mean = Eigen::Map<const Eigen::RowVectorXd>(xm.data(), static_cast<Eigen::Index>(xm.size()));
  n.x_scale = Eigen::Map<const Eigen::RowVectorXd>(xs.data(), static_cast<Eigen::Index>(xs.size()));
  n.y_mean = j.at("y_mean").get<double>();
  n.y_scale = j.at("y_scale").get<double>();
  return n;
}

int run_generate(const std::string& preset, SyntheticSpec spec, const std::string& out) {
  SyntheticSpec base = preset == "per_lin_rq" ? preset_per_lin_rq() : preset_per_plus_rq_times_lin();
  base.n_data = spec.n_data;
  base.n_seed = spec.n_seed;
  base.seed = spec.seed;
  write_csv(generate_synthetic(base), out);
  std::cout << "wrote " << base.n_data << " rows to " << out << "\n";
  return 0;
}

int run_train(TrainArgs a) {
  RunConfig& c = a.run;
  if (!a.kernels_file.empty()) {
    c.kernels = parse_kernel_list(read_text(a.kernels_file));
  } else if (a.grammar_level > 0) {
    c.kernels = expand_grammar(parse_bases(a.bases), a.grammar_level);
  } else {
    throw CLI::ValidationError("train", "give --kernels or --grammar-level");
  }
  if (a.theta_mode == "point") c.theta_mode = ThetaMode::PointEstimate;
  if (!a.prior_mean.empty()) c.prior_mean = parse_vector(a.prior_mean);

  Dataset train = ingest_csv(a.data);
  std::optional<Dataset> test;
  if (!a.test.empty()) test = ingest_csv(a.test);
  if (a.normalize) {
    train = normalize_dataset(train);
    if (test) test = apply_normalization(*test, *train.normalization);
  }
  c.output_dir = a.out;
  fs::create_directories(a.out);

  json meta;
  meta["format"] = kCheckpointFormat;
  json names = json::array();
  for (const auto& k : c.kernels) names.push_back(k.name());
  meta["kernels"] = names;
  meta["seed"] = c.seed;
  meta["s_theta"] = c.s_theta;
  meta["observation_noise"] = c.observation_noise;
  meta["normalization"] = train.normalization ? normalization_json(*train.normalization) : json(nullptr);
  write_text(fs::path(a.out) / "run.json", meta.dump(2));

  const RunResult r = run_vbks(c, train, test ? &*test : nullptr);
  for (const auto& e : r.excluded) std::cerr << "excluded " << e.kernel << ": " << e.reason << "\n";
  if (!r.complete) {
    std::cout << "stopped after step " << r.states.front().step << "; rerun with --resume to continue\n";
    return 0;
  }
  const KernelBeliefState& fb = r.final_belief();
  const std::size_t top = top_kernels(fb, 1).front();
  std::cout << "top kernel " << fb.kernel_names[top] << " q=" << fb.posterior[static_cast<Eigen::Index>(top)] << "\n";
  if (r.rmse_bma) std::cout << "rmse_bma " << *r.rmse_bma << " rmse_single " << *r.rmse_single << "\n";
  return 0;
}

struct LoadedRun {
  std::vector<SgprState> states;
  KernelBeliefState belief;
  std::optional<Normalization> norm;
  std::uint64_t seed = 0;
  int s_theta = 1;
  bool observation_noise = false;
};

LoadedRun load_run(const fs::path& dir) {
  const json meta = json::parse(read_text(dir / "run.json"));
  LoadedRun run;
  run.seed = meta.at("seed").get<std::uint64_t>();
  run.s_theta = meta.at("s_theta").get<int>();
  run.observation_noise = meta.at("observation_noise").get<bool>();
  if (!meta.at("normalization").is_null()) run.norm = normalization_from_json(meta.at("normalization"));
  const auto all = meta.at("kernels").get<std::vector<std::string>>();

  const fs::path pruned = dir / "checkpoint_belief_pruned.json";
  run.belief = belief_from_json(read_text(fs::exists(pruned) ? pruned : dir / "checkpoint_belief.json"));
  for (const auto& name : run.belief.kernel_names) {
    const auto it = std::find(all.begin(), all.end(), name);
    if (it == all.end()) throw IoError("belief names unknown kernel " + name);
    const auto i = static_cast<std::size_t>(it - all.begin());
    const json ck = json::parse(read_text(dir / ("checkpoint_kernel_" + std::to_string(i) + ".json")));
    run.states.push_back(state_from_json(ck.at("state").dump()));
  }
  return run;
}

BatchMoments predict_run(const LoadedRun& run, Eigen::MatrixXd X) {
  if (run.norm) {
    X = ((X.rowwise() - run.norm->x_mean).array().rowwise() / run.norm->x_scale.array()).matrix();
  }
  BatchMoments m = predict_bma(run.states, run.belief.posterior, X, run.s_theta, derive_seed(run.seed, "prediction"));
  if (run.observation_noise) {
    for (std::size_t i = 0; i < run.states.size(); ++i) {
      m.variance.array() += run.belief.posterior[static_cast<Eigen::Index>(i)] * expected_noise_variance(run.states[i]);
    }
  }
  return run.norm ? denormalize(m, *run.norm) : m;
}

// Input-only CSV: every column is an input.
Eigen::MatrixXd read_inputs(const std::string& path) {
  std::stringstream in(read_text(path)), padded;
  for (std::string line; std::getline(in, line);) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    padded << line << ",0\n";
  }
  return parse_csv(padded.str()).X;
}

int run_predict(const PredictArgs& a) {
  const LoadedRun run = load_run(a.run_dir);
  const Eigen::MatrixXd X = read_inputs(a.data);
  const BatchMoments m = predict_run(run, X);
  std::ostringstream os;
  os.precision(17);
  for (Eigen::Index j = 0; j < X.cols(); ++j) os << "x" << j << ",";
  os << "mean,variance\n";
  for (Eigen::Index r = 0; r < X.rows(); ++r) {
    for (Eigen::Index j = 0; j < X.cols(); ++j) os << X(r, j) << ",";
    os << m.mean[r] << "," << m.variance[r] << "\n";
  }
  if (a.out.empty()) {
    std::cout << os.str();
  } else {
    write_text(a.out, os.str());
  }
  return 0;
}

int run_evaluate(const PredictArgs& a) {
  const LoadedRun run = load_run(a.run_dir);
  const Dataset d = ingest_csv(a.data);
  const BatchMoments m = predict_run(run, d.X);
  const double nlpd =
      0.5 * ((2.0 * std::numbers::pi * m.variance.array()).log() +
             (d.y - m.mean).array().square() / m.variance.array()).mean();
  json out{{"rmse", rmse(m.mean, d.y)}, {"n", d.size()}};
  if (run.observation_noise) out["mean_nlpd"] = nlpd;
  std::cout << out.dump(2) << "\n";
  if (!a.out.empty()) write_text(a.out, out.dump(2));
  return 0;
}

void add_train_options(CLI::App* cmd, TrainArgs& a) {
  RunConfig& c = a.run;
  cmd->set_config("--config", "", "flat key = value file; flags override it");
  cmd->add_option("--data", a.data, "training CSV (inputs..., y)")->required()->check(CLI::ExistingFile);
  cmd->add_option("--test", a.test, "test CSV for RMSE")->check(CLI::ExistingFile);
  cmd->add_option("--out", a.out, "output directory")->required();
  cmd->add_option("--kernels", a.kernels_file, "kernel list file, one expression per line")->check(CLI::ExistingFile);
  cmd->add_option("--grammar-level", a.grammar_level, "expand the grammar to this level instead");
  cmd->add_option("--bases", a.bases, "comma-separated base kernels for --grammar-level");
  cmd->add_flag("--normalize", a.normalize, "standardize inputs and outputs with training statistics");
  cmd->add_option("--inducing", c.inducing, "inducing set size")->capture_default_str();
  cmd->add_option("--batch-size", c.local.batch_size)->capture_default_str();
  cmd->add_flag("--full-batch", c.local.full_batch);
  cmd->add_option("--steps", c.local.steps, "local step budget")->capture_default_str();
  cmd->add_option("--lr", c.local.adam.learning_rate)->capture_default_str();
  cmd->add_option("--final-lr-ratio", c.local.final_lr_ratio)->capture_default_str();
  cmd->add_option("--lik-draws", c.local.lik_draws)->capture_default_str();
  cmd->add_option("--ce-draws", c.local.ce_draws)->capture_default_str();
  cmd->add_option("--eval-every", c.local.eval_every)->capture_default_str();
  cmd->add_option("--eval-batch-size", c.local.eval_batch_size)->capture_default_str();
  cmd->add_option("--belief-steps", c.belief.steps)->capture_default_str();
  cmd->add_option("--belief-lr", c.belief.adam.learning_rate)->capture_default_str();
  cmd->add_option("--belief-draws", c.belief.draws)->capture_default_str();
  cmd->add_option("--posterior-samples", c.belief.posterior_samples)->capture_default_str();
  cmd->add_option("--s-theta", c.s_theta)->capture_default_str();
  cmd->add_option("--theta-mode", a.theta_mode)->check(CLI::IsMember({"full", "point"}))->capture_default_str();
  cmd->add_option("--prior-mean", a.prior_mean, "comma-separated prior mean of g, one per kernel");
  cmd->add_option("--seed", c.seed)->capture_default_str();
  cmd->add_option("--workers", c.workers)->capture_default_str();
  cmd->add_option("--checkpoint-fraction", c.checkpoint_fraction)->capture_default_str();
  cmd->add_option("--prune-top", c.prune_top, "re-fit the belief over the top m kernels");
  cmd->add_flag("--observation-noise", c.observation_noise, "add the expected noise variance to predictions");
  cmd->add_flag("--resume", c.resume, "continue from checkpoints in --out");
  cmd->add_option("--stop-after", c.stop_after, "stop local training at the first checkpoint past this step");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Variational Bayesian kernel selection for sparse GP regression"};
  app.require_subcommand(1);

  std::string preset = "per_plus_rq_times_lin", gen_out;
  SyntheticSpec gen;
  auto* generate = app.add_subcommand("generate", "write a synthetic data set");
  generate->add_option("--preset", preset)->check(CLI::IsMember({"per_plus_rq_times_lin", "per_lin_rq"}))
      ->capture_default_str();
  generate->add_option("--n-data", gen.n_data)->capture_default_str();
  generate->add_option("--n-seed", gen.n_seed)->capture_default_str();
  generate->add_option("--seed", gen.seed)->capture_default_str();
  generate->add_option("--out", gen_out)->required();

  TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "train every kernel and fit the kernel belief");
  add_train_options(train_cmd, train);

  PredictArgs pred, eval;
  auto* predict = app.add_subcommand("predict", "BMA predictions from a finished run");
  predict->add_option("--run", pred.run_dir, "run directory written by train")->required()->check(CLI::ExistingDirectory);
  predict->add_option("--inputs", pred.data, "CSV of input columns only")->required()->check(CLI::ExistingFile);
  predict->add_option("--out", pred.out, "output CSV (default stdout)");

  auto* evaluate = app.add_subcommand("evaluate", "RMSE of a finished run on a labelled CSV");
  evaluate->add_option("--run", eval.run_dir)->required()->check(CLI::ExistingDirectory);
  evaluate->add_option("--data", eval.data)->required()->check(CLI::ExistingFile);
  evaluate->add_option("--out", eval.out, "also write the metrics JSON here");

  int level = 3;
  std::string bases = "SE,PER,LIN,RQ";
  bool count_only = false;
  auto* expand = app.add_subcommand("expand-kernels", "print the kernel grammar up to a level");
  expand->add_option("--level", level)->capture_default_str();
  expand->add_option("--bases", bases)->capture_default_str();
  expand->add_flag("--count", count_only, "print only the number of kernels");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*generate) return run_generate(preset, gen, gen_out);
    if (*train_cmd) return run_train(train);
    if (*predict) return run_predict(pred);
    if (*evaluate) return run_evaluate(eval);
    if (*expand) {
      const auto kernels = expand_grammar(parse_bases(bases), level);
      if (count_only) {
        std::cout << kernels.size() << "\n";
      } else {
        for (const auto& k : kernels) std::cout << k.name() << "\n";
      }
      return 0;
    }
  } catch (const CLI::Error& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "vbks: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
