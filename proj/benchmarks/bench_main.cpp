#include <benchmark/benchmark.h>

#include "admeta/simulate.hpp"
#include "admeta/variance.hpp"
#include "admeta/weight_fit.hpp"

namespace {

using namespace admeta;

struct Fixture {
  DgpConfig cfg;
  std::vector<IpdTrial> trials;
  OutcomeModelSpec spec;

  explicit Fixture(int n) {
    cfg = DgpConfig::defaults();
    cfg.n = n;
    trials = simulate_dgp(cfg, 99);
    spec = cfg.model();
  }
};

void bm_logistic_fit(benchmark::State& state) {
  const Fixture fx(static_cast<int>(state.range(0)));
  for (auto _ : state) {
    TrialFit fit = fit_trial_mle(fx.trials[3], fx.spec);
    benchmark::DoNotOptimize(fit.tp.phi1);
  }
}

void bm_weight_and_solve(benchmark::State& state) {
  const Fixture fx(static_cast<int>(state.range(0)));
  const AdSummary ad = summarize_to_ad(fx.trials[0]);
  const TrialFit fit = fit_trial_mle(fx.trials[3], fx.spec);
  const WeightModelSpec wspec =
      WeightModelSpec::default_linear(fx.spec.n_covariates());
  for (auto _ : state) {
    WeightFit wf = fit_weight_model(fx.trials[3], ad, wspec);
    PairEstimate pe = solve_pair(fx.trials[3], ad, wf, fx.spec, fit.sp);
    benchmark::DoNotOptimize(pe.params.phi1);
  }
}

void bm_sandwich(benchmark::State& state) {
  const Fixture fx(static_cast<int>(state.range(0)));
  std::vector<IpdTrial> ipd;
  std::vector<AdSummary> ad;
  for (const IpdTrial& t : fx.trials) {
    if (t.study <= 3)
      ad.push_back(summarize_to_ad(t));
    else
      ipd.push_back(t);
  }
  PipelineOptions opt;
  opt.pooling = PoolingRule::equal;
  PipelineResult pr = run_pipeline(ipd, ad, fx.spec, opt);
  SandwichOptions sopt;
  sopt.wspec = pr.wspec;
  for (auto _ : state) {
    SandwichParts sw = sandwich(pr.spec, pr.ipd, pr.pseudo, pr.state, sopt);
    benchmark::DoNotOptimize(sw.cond_a);
  }
}

void bm_replication(benchmark::State& state) {
  ReplicationConfig cfg;
  cfg.dgp = DgpConfig::defaults();
  cfg.dgp.n = static_cast<int>(state.range(0));
  cfg.pipeline.pooling = PoolingRule::equal;
  std::uint64_t seed = 0;
  for (auto _ : state) {
    ReplicationOutput out = run_replication(cfg, ++seed);
    benchmark::DoNotOptimize(out.ok);
  }
}

BENCHMARK(bm_logistic_fit)->Arg(5000)->Arg(15000)->Unit(benchmark::kMillisecond);
BENCHMARK(bm_weight_and_solve)->Arg(5000)->Arg(15000)->Unit(benchmark::kMillisecond);
BENCHMARK(bm_sandwich)->Arg(5000)->Arg(15000)->Unit(benchmark::kMillisecond);
BENCHMARK(bm_replication)->Arg(5000)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
