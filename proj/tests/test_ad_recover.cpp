#include <cmath>
#include <functional>
#include <vector>

#include <doctest.h>

#include "admeta/ad_recover.hpp"
#include "admeta/errors.hpp"
#include "admeta/pipeline.hpp"
#include "admeta/simulate.hpp"
#include "admeta/weight_fit.hpp"

using namespace admeta;

namespace {

ErrorCategory category_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.category();
  }
  return ErrorCategory::internal;
}

PairEstimate pair_of(int ad_study, double phi0, double phi1) {
  PairEstimate pe;
  pe.ad_study = ad_study;
  pe.params.phi0 = phi0;
  pe.params.phi1 = phi1;
  return pe;
}

}  // namespace

TEST_CASE("a trial recovers its own fit from its own summary") {
  DgpConfig cfg = DgpConfig::defaults();
  cfg.n = 10000;
  const OutcomeModelSpec spec = cfg.model();
  const std::vector<IpdTrial> trials = simulate_dgp(cfg, 31);
  const IpdTrial& k = trials[3];

  const TrialFit tf = fit_trial_mle(k, spec);
  const AdSummary ad = summarize_to_ad(k);
  const WeightFit wf = fit_weight_model(k, ad);
  // identical case mix: the tilt is flat and every weight is 1
  CHECK((wf.weights.array() - 1.0).abs().maxCoeff() < 1e-6);

  const PairEstimate pe = solve_pair(k, ad, wf, spec, tf.sp);
  CHECK(pe.params.phi0 == doctest::Approx(tf.tp.phi0).epsilon(1e-6));
  CHECK(pe.params.phi1 == doctest::Approx(tf.tp.phi1).epsilon(1e-6));
  CHECK(pe.params.phi0 == pe.intercepts(0));
  CHECK(pe.params.phi1 ==
        doctest::Approx(pe.intercepts(1) - pe.intercepts(0)).epsilon(1e-15));
}

TEST_CASE("self recovery also holds under a designed arm probability") {
  DgpConfig cfg = DgpConfig::defaults();
  cfg.n = 4000;
  const OutcomeModelSpec spec = cfg.model();
  std::vector<ObservationRow> rows = simulate_dgp(cfg, 33)[4].rows;
  // force exact balance so the designed probability matches the counts
  rows.resize(rows.size() - rows.size() % 2);
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i].x = i % 2;
  const IpdTrial k = IpdTrial::from_rows(5, std::move(rows), 0.5);

  const TrialFit tf = fit_trial_mle(k, spec);
  const AdSummary ad = summarize_to_ad(k);
  const WeightFit wf = fit_weight_model(k, ad);
  const PairEstimate pe = solve_pair(k, ad, wf, spec, tf.sp);
  CHECK(pe.params.phi0 == doctest::Approx(tf.tp.phi0).epsilon(1e-6));
  CHECK(pe.params.phi1 == doctest::Approx(tf.tp.phi1).epsilon(1e-6));
}

TEST_CASE("pair solutions satisfy their equations with positive slopes") {
  DgpConfig cfg = DgpConfig::defaults();
  cfg.n = 15000;
  const OutcomeModelSpec spec = cfg.model();
  const std::vector<IpdTrial> trials = simulate_dgp(cfg, 37);
  const IpdFit fit = fit_per_trial({trials[3], trials[4]}, spec);

  for (int j = 0; j < 3; ++j) {
    const AdSummary ad = summarize_to_ad(trials[j]);
    for (int k = 0; k < 2; ++k) {
      const IpdTrial& ipd = trials[3 + k];
      const WeightFit wf = fit_weight_model(ipd, ad);
      const PairEstimate pe = solve_pair(ipd, ad, wf, spec, fit.shared_for(k));
      CHECK(pe.ad_study == ad.study);
      CHECK(pe.ipd_study == ipd.study);
      CHECK(pe.residual.cwiseAbs().maxCoeff() <= 1e-8);
      CHECK(pe.lhs_slope.minCoeff() > 0.0);
      CHECK(std::abs(pe.params.phi1) < 3.0);
    }
  }
}

TEST_CASE("aggregate outcome means on the boundary are rejected") {
  DgpConfig cfg = DgpConfig::defaults();
  cfg.n = 5000;
  const OutcomeModelSpec spec = cfg.model();
  const std::vector<IpdTrial> trials = simulate_dgp(cfg, 41);
  const IpdTrial& k = trials[4];
  const TrialFit tf = fit_trial_mle(k, spec);

  AdSummary zero = summarize_to_ad(trials[0]);
  const WeightFit wf = fit_weight_model(k, zero);
  zero.arms[0].y_mean = 0.0;
  CHECK(category_of([&] { solve_pair(k, zero, wf, spec, tf.sp); }) ==
        ErrorCategory::boundary);

  AdSummary one = summarize_to_ad(trials[0]);
  one.arms[1].y_mean = 1.0;
  CHECK(category_of([&] { solve_pair(k, one, wf, spec, tf.sp); }) ==
        ErrorCategory::boundary);
}

TEST_CASE("a target above the attainable supremum reports non-convergence") {
  DgpConfig cfg = DgpConfig::defaults();
  cfg.n = 5000;
  const OutcomeModelSpec spec = cfg.model();
  const std::vector<IpdTrial> trials = simulate_dgp(cfg, 43);
  const IpdTrial& k = trials[4];
  const TrialFit tf = fit_trial_mle(k, spec);

  const AdSummary ad = summarize_to_ad(trials[0]);
  WeightFit wf = fit_weight_model(k, ad);
  wf.weights *= 0.5;  // caps the weighted average of means at one half
  CHECK(category_of([&] { solve_pair(k, ad, wf, spec, tf.sp); }) ==
        ErrorCategory::convergence);
}

TEST_CASE("pair pooling is a checked weighted average") {
  const std::vector<PairEstimate> pairs = {pair_of(7, 0.1, 0.2),
                                           pair_of(7, 0.3, 0.6)};

  PooledAdEstimate equal = pool_pairs(pairs, {0.5, 0.5});
  CHECK(equal.ad_study == 7);
  CHECK(equal.params.phi0 == doctest::Approx(0.2).epsilon(1e-15));
  CHECK(equal.params.phi1 == doctest::Approx(0.4).epsilon(1e-15));

  PooledAdEstimate tilted = pool_pairs(pairs, {0.25, 0.75});
  CHECK(tilted.params.phi0 == doctest::Approx(0.25).epsilon(1e-15));
  CHECK(tilted.params.phi1 == doctest::Approx(0.5).epsilon(1e-15));

  const PooledAdEstimate same =
      pool_pairs({pairs[0], pairs[0]}, {0.3, 0.7});
  CHECK(same.params.phi0 == doctest::Approx(0.1).epsilon(1e-15));
  CHECK(same.params.phi1 == doctest::Approx(0.2).epsilon(1e-15));

  SUBCASE("affine equivariance") {
    std::vector<PairEstimate> shifted = pairs;
    for (PairEstimate& pe : shifted) {
      pe.params.phi0 += 0.7;
      pe.params.phi1 -= 0.3;
    }
    const PooledAdEstimate moved = pool_pairs(shifted, {0.25, 0.75});
    CHECK(moved.params.phi0 ==
          doctest::Approx(tilted.params.phi0 + 0.7).epsilon(1e-15));
    CHECK(moved.params.phi1 ==
          doctest::Approx(tilted.params.phi1 - 0.3).epsilon(1e-15));
  }
  SUBCASE("input checks") {
    CHECK(category_of([&] { pool_pairs({}, {}); }) == ErrorCategory::schema);
    CHECK(category_of([&] { pool_pairs(pairs, {0.5}); }) ==
          ErrorCategory::dimension);
    CHECK(category_of([&] { pool_pairs(pairs, {0.5, 0.6}); }) ==
          ErrorCategory::domain);
    CHECK(category_of([&] { pool_pairs(pairs, {-0.5, 1.5}); }) ==
          ErrorCategory::domain);
    std::vector<PairEstimate> mixed = pairs;
    mixed[1].ad_study = 8;
    CHECK(category_of([&] { pool_pairs(mixed, {0.5, 0.5}); }) ==
          ErrorCategory::schema);
  }
}

TEST_CASE("sample-size pooling weights reproduce the pipeline default") {
  DgpConfig cfg = DgpConfig::defaults();
  cfg.n = 6000;
  const OutcomeModelSpec spec = cfg.model();
  const std::vector<IpdTrial> trials = simulate_dgp(cfg, 47);
  const std::vector<IpdTrial> ipd = {trials[3], trials[4]};
  const std::vector<AdSummary> ad = {summarize_to_ad(trials[0]),
                                     summarize_to_ad(trials[1]),
                                     summarize_to_ad(trials[2])};
  PipelineOptions opt;
  opt.compute_variance = false;
  const PipelineResult pr = run_pipeline(ipd, ad, spec, opt);

  const double total = ipd[0].n() + ipd[1].n();
  const std::vector<double> w = {ipd[0].n() / total, ipd[1].n() / total};
  REQUIRE(pr.pool_w.size() == 2);
  CHECK(pr.pool_w[0] == doctest::Approx(w[0]).epsilon(1e-12));
  for (std::size_t j = 0; j < ad.size(); ++j) {
    const PooledAdEstimate byhand = pool_pairs(pr.pairs[j], w);
    CHECK(pr.ad_pooled[j].phi0 ==
          doctest::Approx(byhand.params.phi0).epsilon(1e-12));
    CHECK(pr.ad_pooled[j].phi1 ==
          doctest::Approx(byhand.params.phi1).epsilon(1e-12));
  }
}

TEST_CASE("random-effect summary arithmetic") {
  SUBCASE("equal-weight mean of the benchmark treatment effects") {
    std::vector<TrialParams> tps;
    const double phi0[] = {0.25, 0.50, 0.25, 0.25, 0.50};
    const double phi1[] = {1.00, 0.50, 0.00, 0.50, 1.00};
    for (int s = 0; s < 5; ++s) tps.push_back({phi0[s], phi1[s]});
    const RandomEffectSummary re =
        pool_random_effects(tps, std::vector<double>(5, 0.2));
    CHECK(re.phi1_bar == doctest::Approx(0.6).epsilon(1e-15));
    CHECK(re.mean(0) == doctest::Approx(0.35).epsilon(1e-15));
    CHECK(re.mean(1) == re.phi1_bar);
    CHECK(re.cov_identified);
  }
  SUBCASE("identical trials have zero dispersion") {
    const std::vector<TrialParams> tps(4, TrialParams{0.3, 0.9});
    const RandomEffectSummary re =
        pool_random_effects(tps, std::vector<double>(4, 0.25));
    CHECK(re.cov.cwiseAbs().maxCoeff() <= 1e-14);
    CHECK(re.cov_identified);
  }
  SUBCASE("a single trial leaves the covariance unidentified") {
    const RandomEffectSummary re = pool_random_effects({{0.3, 0.9}}, {1.0});
    CHECK_FALSE(re.cov_identified);
    CHECK(re.phi1_bar == doctest::Approx(0.9).epsilon(1e-15));
  }
  SUBCASE("bias-corrected dispersion, equal and unequal weights") {
    const std::vector<TrialParams> tps = {{0.0, 0.0}, {1.0, 2.0}};
    const RandomEffectSummary eq =
        pool_random_effects(tps, std::vector<double>(2, 0.5));
    CHECK(eq.cov(0, 0) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(eq.cov(0, 1) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(eq.cov(1, 1) == doctest::Approx(2.0).epsilon(1e-12));

    const RandomEffectSummary uneq = pool_random_effects(tps, {0.3, 0.7});
    CHECK(uneq.phi1_bar == doctest::Approx(1.4).epsilon(1e-12));
    CHECK(uneq.cov(0, 0) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(uneq.cov(1, 1) == doctest::Approx(2.0).epsilon(1e-12));
  }
  SUBCASE("sampling-noise correction floors at zero") {
    const std::vector<TrialParams> tps = {{0.0, 0.0}, {1.0, 2.0}};
    const std::vector<double> w(2, 0.5);

    std::vector<Eigen::Matrix2d> big(2, 10.0 * Eigen::Matrix2d::Identity());
    const RandomEffectSummary swamped = pool_random_effects(tps, w, &big);
    CHECK(swamped.cov.cwiseAbs().maxCoeff() <= 1e-12);

    std::vector<Eigen::Matrix2d> mild(2, 0.1 * Eigen::Matrix2d::Identity());
    const RandomEffectSummary part = pool_random_effects(tps, w, &mild);
    CHECK(part.cov(0, 0) == doctest::Approx(0.48).epsilon(1e-10));
    CHECK(part.cov(0, 1) == doctest::Approx(0.96).epsilon(1e-10));
    CHECK(part.cov(1, 1) == doctest::Approx(1.92).epsilon(1e-10));
    const Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> es(part.cov);
    CHECK(es.eigenvalues().minCoeff() >= -1e-12);
  }
}

TEST_CASE("recovered coefficients are consistent at benchmark scale") {
  DgpConfig cfg = DgpConfig::defaults();
  const OutcomeModelSpec spec = cfg.model();
  PipelineOptions opt;
  opt.compute_variance = false;

  double sum11 = 0.0, sum_bar = 0.0;
  const int reps = 10;
  for (int r = 0; r < reps; ++r) {
    const std::vector<IpdTrial> trials = simulate_dgp(cfg, 900 + r);
    const std::vector<IpdTrial> ipd = {trials[3], trials[4]};
    const std::vector<AdSummary> ad = {summarize_to_ad(trials[0]),
                                       summarize_to_ad(trials[1]),
                                       summarize_to_ad(trials[2])};
    const PipelineResult pr = run_pipeline(ipd, ad, spec, opt);
    sum11 += pr.ad_pooled[0].phi1;
    sum_bar += pr.phi1_bar;
  }
  CHECK(std::abs(sum11 / reps - 1.0) < 0.12);
  CHECK(std::abs(sum_bar / reps - 0.6) < 0.09);
}
