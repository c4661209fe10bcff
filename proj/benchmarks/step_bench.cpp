#include <benchmark/benchmark.h>

#include <cmath>
#include <random>

#include <vbks/local_elbo.hpp>
#include <vbks/synthgen.hpp>

using namespace vbks;

namespace {

Dataset sine_data(Eigen::Index n) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-10.0, 10.0);
  std::normal_distribution<double> e(0.0, 0.1);
  Dataset d;
  d.X.resize(n, 1);
  d.y.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    d.X(i, 0) = u(rng);
    d.y[i] = std::sin(d.X(i, 0)) + e(rng);
  }
  return d;
}

// Ten local steps per iteration; the step cost should not depend on |D|.
void BM_LocalSteps(benchmark::State& st) {
  const Dataset data = sine_data(st.range(0));
  const KernelExpr k = parse_kernel(st.range(1) == 0 ? "SE" : "(PER+RQ)*LIN");
  SgprState s = init_state(k, data, choose_inducing(data, 64, 2), ThetaMode::Full, 3);
  LocalConfig cfg;
  cfg.batch_size = 128;
  cfg.steps = 1u << 30;
  cfg.eval_every = 0;
  for (auto _ : st) {
    cfg.pause_at = s.step + 10;
    s = optimize_local(std::move(s), data, cfg);
    benchmark::DoNotOptimize(s.q_u.mean().data());
  }
  st.SetItemsProcessed(st.iterations() * 10);
}

void BM_GenerateSynthetic(benchmark::State& st) {
  SyntheticSpec spec = preset_per_plus_rq_times_lin();
  spec.n_data = st.range(0);
  for (auto _ : st) benchmark::DoNotOptimize(generate_synthetic(spec).y.data());
}

}  // namespace

BENCHMARK(BM_LocalSteps)->ArgsProduct({{1000, 100000}, {0, 1}})->Unit(benchmark::kMillisecond);
BENCHMARK(BM_GenerateSynthetic)->Arg(1000)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
