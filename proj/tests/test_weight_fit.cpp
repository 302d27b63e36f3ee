#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include <doctest.h>

#include "admeta/errors.hpp"
#include "admeta/rng.hpp"
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

// l1 = unif^power stretches the case mix; p2 shifts the binary covariate
IpdTrial make_trial(int study, int n, double power, double p2,
                    std::uint64_t seed) {
  std::mt19937_64 eng = make_engine(seed, 0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<ObservationRow> rows;
  for (int i = 0; i < n; ++i) {
    ObservationRow r;
    r.study = study;
    const double l1 = std::pow(unif(eng), power);
    const double l2 = unif(eng) < p2 ? 1.0 : 0.0;
    r.x = unif(eng) < 0.5 ? 1 : 0;
    r.y = unif(eng) < expit(0.2 + 0.5 * r.x + l1 - l2) ? 1 : 0;
    r.l = Eigen::Vector2d(l1, l2);
    rows.push_back(std::move(r));
  }
  return IpdTrial::from_rows(study, std::move(rows));
}

// independent root: cyclic one-dimensional Newton on the convex potential
// (1/n_j) sum_i exp(beta' g_i) - beta' t, whose gradient is the moment gap
Eigen::VectorXd oracle_tilt(const Eigen::MatrixXd& g, double n_j,
                            const Eigen::VectorXd& t) {
  Eigen::VectorXd beta = Eigen::VectorXd::Zero(g.cols());
  for (int sweep = 0; sweep < 20000; ++sweep) {
    double moved = 0.0;
    for (Eigen::Index c = 0; c < g.cols(); ++c) {
      double grad = -t(c);
      double hess = 0.0;
      for (Eigen::Index i = 0; i < g.rows(); ++i) {
        const double m = std::exp(g.row(i).dot(beta)) / n_j;
        grad += g(i, c) * m;
        hess += g(i, c) * g(i, c) * m;
      }
      const double step = grad / hess;
      beta(c) -= step;
      moved = std::max(moved, std::abs(step));
    }
    if (moved < 1e-13) break;
  }
  return beta;
}

Eigen::MatrixXd regressor_matrix(const IpdTrial& trial,
                                 const WeightModelSpec& wspec) {
  Eigen::MatrixXd g(trial.n(), wspec.dim());
  for (int i = 0; i < trial.n(); ++i)
    for (int c = 0; c < wspec.dim(); ++c)
      g(i, c) = wspec.regressors[c].eval(trial.rows[i].l);
  return g;
}

}  // namespace

TEST_CASE("tilt solve agrees with a coordinate-Newton oracle") {
  const IpdTrial ipd = make_trial(4, 900, 1.0, 0.5, 51);
  const AdSummary ad = summarize_to_ad(make_trial(1, 1400, 1.6, 0.35, 52));
  const WeightFit wf = fit_weight_model(ipd, ad);

  const Eigen::VectorXd ref =
      oracle_tilt(regressor_matrix(ipd, wf.spec), wf.n_j, wf.targets);
  REQUIRE(wf.beta.size() == 3);
  for (int c = 0; c < 3; ++c)
    CHECK(wf.beta(c) == doctest::Approx(ref(c)).epsilon(1e-7));

  CHECK(wf.n_j == 1400.0);
  CHECK(wf.weights.size() == ipd.n());
  CHECK(wf.weights.minCoeff() > 0.0);
  CHECK_FALSE(wf.overidentified);
  CHECK_FALSE(wf.truncated);
}

TEST_CASE("fitted weights reproduce the aggregate moments") {
  const IpdTrial ipd = make_trial(4, 700, 1.0, 0.5, 61);
  const AdSummary ad = summarize_to_ad(make_trial(1, 1100, 1.4, 0.4, 62));
  const WeightFit wf = fit_weight_model(ipd, ad);

  CHECK(balance_gap(wf) <= 1e-8);
  for (int r = 0; r < wf.targets.size(); ++r)
    CHECK(wf.achieved(r) == doctest::Approx(wf.targets(r)).epsilon(1e-8));
  // leading constant regressor pins the total weight to the aggregate size
  CHECK(wf.weights.sum() == doctest::Approx(wf.n_j).epsilon(1e-8));
}

TEST_CASE("identical case mix forces a constant density ratio") {
  const IpdTrial ipd = make_trial(2, 20000, 1.0, 0.5, 71);
  const AdSummary ad = summarize_to_ad(make_trial(1, 30000, 1.0, 0.5, 72));
  const WeightFit wf = fit_weight_model(ipd, ad);

  CHECK(std::abs(wf.beta(0) - std::log(30000.0 / 20000.0)) < 0.1);
  CHECK(std::abs(wf.beta(1)) < 0.1);
  CHECK(std::abs(wf.beta(2)) < 0.1);
}

TEST_CASE("benchmark generator pair (1,4) recovers the membership tilt") {
  DgpConfig cfg = DgpConfig::defaults();
  cfg.n = 200000;
  const std::vector<IpdTrial> trials = simulate_dgp(cfg, 20240815);
  const AdSummary ad1 = summarize_to_ad(trials[0]);
  const WeightFit wf = fit_weight_model(trials[3], ad1);

  // log density ratio of trial 1 to trial 4 has slopes minus the trial-4
  // membership coefficients (trial 1 is the logit reference)
  CHECK(std::abs(wf.beta(1) - (-0.15)) < 0.075);
  CHECK(std::abs(wf.beta(2) - (-0.15)) < 0.075);
}

TEST_CASE("a redundant moment target leaves the tilt unchanged") {
  const IpdTrial ipd = make_trial(4, 800, 1.0, 0.5, 81);
  const AdSummary ad = summarize_to_ad(make_trial(1, 1000, 1.3, 0.45, 82));

  const WeightFit just = fit_weight_model(ipd, ad);

  WeightModelSpec wspec = WeightModelSpec::default_linear(2);
  wspec.moments.push_back(MomentFn::linear(0));  // repeats an existing target
  const WeightFit over = fit_weight_model(ipd, ad, wspec);

  CHECK(over.overidentified);
  CHECK(over.residual_norm <= 1e-5);
  CHECK_FALSE(over.compat_warning);
  for (int c = 0; c < 3; ++c)
    CHECK(over.beta(c) == doctest::Approx(just.beta(c)).epsilon(1e-6));
}

TEST_CASE("irreconcilable extra target sets the compatibility warning") {
  const IpdTrial ipd = make_trial(4, 4000, 1.0, 0.5, 91);
  const AdSummary ad = summarize_to_ad(make_trial(1, 6000, 1.0, 0.9, 92));

  WeightModelSpec wspec;
  wspec.regressors = {MomentFn::constant_term(), MomentFn::linear(0)};
  wspec.moments = {MomentFn::constant_term(), MomentFn::linear(0),
                   MomentFn::linear(1)};
  const WeightFit wf = fit_weight_model(ipd, ad, wspec);

  CHECK(wf.overidentified);
  CHECK(wf.residual_norm > 4.0);
  CHECK(wf.compat_warning);
}

TEST_CASE("targets outside the covariate support raise the overlap error") {
  // IPD support is [0, 0.5] but the aggregate mean sits near 0.99
  std::mt19937_64 eng = make_engine(101, 0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<ObservationRow> narrow, high;
  for (int i = 0; i < 400; ++i) {
    ObservationRow r;
    r.study = 4;
    r.x = i % 2;
    r.y = unif(eng) < 0.5 ? 1 : 0;
    r.l = Eigen::Vector2d(0.5 * unif(eng), unif(eng) < 0.5 ? 1.0 : 0.0);
    narrow.push_back(r);
    r.study = 1;
    r.l(0) = 0.98 + 0.02 * unif(eng);
    high.push_back(r);
  }
  const IpdTrial ipd = IpdTrial::from_rows(4, std::move(narrow));
  const AdSummary ad = summarize_to_ad(IpdTrial::from_rows(1, std::move(high)));

  CHECK(category_of([&] { fit_weight_model(ipd, ad); }) ==
        ErrorCategory::overlap);
}

TEST_CASE("truncation caps the tail and breaks exact balance") {
  DgpConfig cfg = DgpConfig::defaults();
  cfg.n = 20000;
  const std::vector<IpdTrial> trials = simulate_dgp(cfg, 5);
  const AdSummary ad1 = summarize_to_ad(trials[0]);
  WeightFit wf = fit_weight_model(trials[3], ad1);
  const double max_before = wf.weights.maxCoeff();

  truncate_weights(wf, 0.9, trials[3]);
  CHECK(wf.truncated);
  CHECK(wf.weights.maxCoeff() < max_before);
  CHECK(wf.weights.minCoeff() > 0.0);
  CHECK(balance_gap(wf) > 1e-6);

  CHECK(category_of([&] { truncate_weights(wf, 1.1, trials[3]); }) ==
        ErrorCategory::domain);
}

TEST_CASE("effective sample size hits its equality and limit cases") {
  WeightFit wf;
  wf.weights = Eigen::VectorXd::Constant(250, 3.7);
  wf.labels = {"1"};
  wf.targets = Eigen::VectorXd::Constant(1, 1.0);
  wf.achieved = Eigen::VectorXd::Constant(1, 1.0);

  WeightDiagnostics d = weight_diagnostics(wf);
  CHECK(d.ess == doctest::Approx(250.0).epsilon(1e-12));
  CHECK(d.max_min_ratio == doctest::Approx(1.0).epsilon(1e-12));
  REQUIRE(d.balance.size() == 1);
  CHECK(d.balance[0].label == "1");
  CHECK(d.balance[0].target == 1.0);

  wf.weights = Eigen::VectorXd::Constant(250, 1e-9);
  wf.weights(0) = 1e6;
  d = weight_diagnostics(wf);
  CHECK(d.ess == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(d.max_min_ratio == doctest::Approx(1e15).epsilon(1e-9));
}

TEST_CASE("benchmark pair (1,4) keeps most of the effective sample") {
  DgpConfig cfg = DgpConfig::defaults();
  cfg.n = 3000;
  const std::vector<IpdTrial> trials = simulate_dgp(cfg, 9);
  const WeightFit wf = fit_weight_model(trials[3], summarize_to_ad(trials[0]));
  const WeightDiagnostics d = weight_diagnostics(wf);

  CHECK(d.ess / trials[3].n() > 0.9);
  CHECK(d.ess / trials[3].n() <= 1.0);
  CHECK(d.max_min_ratio > 1.0);
}

TEST_CASE("summaries use the divide-by-n variance convention") {
  std::vector<ObservationRow> rows(5);
  auto set = [&](int i, int x, int y, double l1, double l2) {
    rows[i].study = 9;
    rows[i].x = x;
    rows[i].y = y;
    rows[i].l = Eigen::Vector2d(l1, l2);
  };
  set(0, 0, 1, 0.2, 1.0);
  set(1, 0, 0, 0.6, 0.0);
  set(2, 1, 1, 0.4, 1.0);
  set(3, 1, 1, 0.8, 1.0);
  set(4, 1, 0, 0.0, 0.0);
  const IpdTrial trial = IpdTrial::from_rows(9, std::move(rows));

  const AdSummary ad = summarize_to_ad(trial, true, 1);
  CHECK(ad.study == 9);
  CHECK(ad.arms[0].n == 2);
  CHECK(ad.arms[1].n == 3);
  CHECK(ad.arm_prob[0] == doctest::Approx(0.4).epsilon(1e-15));
  CHECK(ad.arm_prob[1] == doctest::Approx(0.6).epsilon(1e-15));

  CHECK(ad.arms[0].y_mean == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(ad.arms[1].y_mean == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(ad.arms[0].l_mean(0) == doctest::Approx(0.4).epsilon(1e-15));
  CHECK(ad.arms[0].l_var(0) == doctest::Approx(0.04).epsilon(1e-12));
  CHECK(ad.arms[1].l_var(0) == doctest::Approx(0.32 / 3.0).epsilon(1e-12));
  CHECK(ad.arms[1].l_var(1) == doctest::Approx(2.0 / 9.0).epsilon(1e-12));
  CHECK(ad.arms[0].cross.at({0, 1}) == doctest::Approx(0.1).epsilon(1e-15));
  CHECK(ad.arms[1].cross.at({0, 1}) == doctest::Approx(0.4).epsilon(1e-15));

  REQUIRE(ad.subgroup.has_value());
  CHECK(ad.subgroup->covariate == 1);
  CHECK(ad.subgroup->fraction[0] == doctest::Approx(0.4).epsilon(1e-15));
  CHECK(ad.subgroup->fraction[1] == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(ad.subgroup->y_mean[0][1] == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(ad.subgroup->y_mean[0][0] == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(ad.subgroup->y_mean[1][1] == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(ad.subgroup->y_mean[1][0] == doctest::Approx(0.0).epsilon(1e-15));
}

TEST_CASE("summaries reject degenerate subgroup requests") {
  std::vector<ObservationRow> rows(4);
  for (int i = 0; i < 4; ++i) {
    rows[i].study = 3;
    rows[i].x = i % 2;
    rows[i].y = i / 2;
    rows[i].l = Eigen::Vector2d(0.1 * i, 1.0);  // l2 constant
  }
  std::vector<ObservationRow> frac = rows;
  frac[1].l(1) = 0.5;

  CHECK(category_of([&] {
          summarize_to_ad(IpdTrial::from_rows(3, std::move(rows)), false, 1);
        }) == ErrorCategory::size);
  CHECK(category_of([&] {
          summarize_to_ad(IpdTrial::from_rows(3, std::move(frac)), false, 1);
        }) == ErrorCategory::domain);
}

TEST_CASE("aggregate moment lookups and mixtures") {
  const IpdTrial trial = make_trial(7, 300, 1.0, 0.5, 111);
  const AdSummary with_cross = summarize_to_ad(trial, true);
  const AdSummary plain = summarize_to_ad(trial);

  CHECK(with_cross.arm_moment(0, MomentFn::constant_term()) == 1.0);
  const double mean = plain.arms[1].l_mean(0);
  const double var = plain.arms[1].l_var(0);
  CHECK(plain.arm_moment(1, MomentFn::linear(0)) == mean);
  CHECK(plain.arm_moment(1, MomentFn::square(0)) ==
        doctest::Approx(var + mean * mean).epsilon(1e-14));
  CHECK(with_cross.arm_moment(1, MomentFn::product(0, 1)) ==
        with_cross.arms[1].cross.at({0, 1}));
  CHECK(category_of([&] { plain.arm_moment(1, MomentFn::product(0, 1)); }) ==
        ErrorCategory::missing_moment);

  const MomentFn l1 = MomentFn::linear(0);
  CHECK(plain.combined_moment(l1) ==
        doctest::Approx(plain.arm_prob[0] * plain.arm_moment(0, l1) +
                        plain.arm_prob[1] * plain.arm_moment(1, l1))
            .epsilon(1e-14));
}

TEST_CASE("weight model specs are validated") {
  WeightModelSpec no_const;
  no_const.regressors = {MomentFn::linear(0)};
  no_const.moments = no_const.regressors;
  CHECK(category_of([&] { no_const.validate(2); }) == ErrorCategory::schema);

  WeightModelSpec two_const = WeightModelSpec::default_linear(2);
  two_const.regressors.push_back(MomentFn::constant_term());
  two_const.moments = two_const.regressors;
  CHECK(category_of([&] { two_const.validate(2); }) == ErrorCategory::schema);

  WeightModelSpec short_moments = WeightModelSpec::default_linear(2);
  short_moments.moments.pop_back();
  CHECK(category_of([&] { short_moments.validate(2); }) ==
        ErrorCategory::schema);

  WeightModelSpec bad_index = WeightModelSpec::default_linear(2);
  bad_index.moments.push_back(MomentFn::linear(5));
  CHECK(category_of([&] { bad_index.validate(2); }) ==
        ErrorCategory::dimension);
}

TEST_CASE("aggregate summaries are validated") {
  const AdSummary good = summarize_to_ad(make_trial(1, 200, 1.0, 0.5, 121));
  CHECK_NOTHROW(good.validate());

  AdSummary empty_arm = good;
  empty_arm.arms[1].n = 0;
  CHECK(category_of([&] { empty_arm.validate(); }) == ErrorCategory::schema);

  AdSummary bad_mean = good;
  bad_mean.arms[0].y_mean = 1.5;
  CHECK(category_of([&] { bad_mean.validate(); }) == ErrorCategory::domain);

  AdSummary bad_var = good;
  bad_var.arms[0].l_var(0) = -0.1;
  CHECK(category_of([&] { bad_var.validate(); }) == ErrorCategory::domain);

  AdSummary bad_prob = good;
  bad_prob.arm_prob = {0.7, 0.7};
  CHECK(category_of([&] { bad_prob.validate(); }) == ErrorCategory::domain);

  const IpdTrial one_cov = make_trial(2, 150, 1.0, 0.5, 122);
  CHECK(category_of([&] { fit_weight_model(one_cov, good,
                                           WeightModelSpec::default_linear(3)); }) ==
        ErrorCategory::dimension);
}
