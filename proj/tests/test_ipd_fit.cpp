#include <algorithm>
#include <cmath>
#include <random>

#include <doctest.h>

#include "admeta/errors.hpp"
#include "admeta/ipd_fit.hpp"
#include "admeta/rng.hpp"
#include "admeta/simulate.hpp"

using namespace admeta;

namespace {

double loglik(const Eigen::MatrixXd& design, const Eigen::VectorXd& y,
              const Eigen::VectorXd& beta) {
  double ll = 0.0;
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    const double eta = design.row(i).dot(beta);
    // log expit via the stable branch
    ll += y(i) * (eta < 0 ? eta - std::log1p(std::exp(eta))
                          : -std::log1p(std::exp(-eta)));
    ll += (1 - y(i)) * (eta < 0 ? -std::log1p(std::exp(eta))
                                : -eta - std::log1p(std::exp(-eta)));
  }
  return ll;
}

// independent oracle: cyclic one-dimensional Newton ascent on the concave
// log-likelihood, run to stagnation
Eigen::VectorXd oracle_logistic(const Eigen::MatrixXd& design,
                                const Eigen::VectorXd& y) {
  Eigen::VectorXd beta = Eigen::VectorXd::Zero(design.cols());
  for (int sweep = 0; sweep < 4000; ++sweep) {
    double moved = 0.0;
    for (Eigen::Index c = 0; c < design.cols(); ++c) {
      double g = 0.0, h = 0.0;
      for (Eigen::Index i = 0; i < y.size(); ++i) {
        const double p = expit(design.row(i).dot(beta));
        g += design(i, c) * (y(i) - p);
        h += design(i, c) * design(i, c) * p * (1.0 - p);
      }
      const double step = g / h;
      beta(c) += step;
      moved = std::max(moved, std::abs(step));
    }
    if (moved < 1e-12) break;
  }
  return beta;
}

OutcomeModelSpec base_spec() { return DgpConfig::defaults().model(); }

IpdTrial make_trial(int study, int n, double phi0, double phi1,
                    const Eigen::Vector3d& phi_c, std::uint64_t seed) {
  std::mt19937_64 eng = make_engine(seed, 0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<ObservationRow> rows;
  for (int i = 0; i < n; ++i) {
    ObservationRow r;
    r.study = study;
    const double l1 = unif(eng);
    const double l2 = unif(eng) < 0.5 ? 1.0 : 0.0;
    r.x = unif(eng) < 0.5 ? 1 : 0;
    const double eta =
        phi0 + phi1 * r.x + phi_c(0) * l1 + phi_c(1) * l2 + phi_c(2) * r.x * l2;
    r.y = unif(eng) < expit(eta) ? 1 : 0;
    r.l = Eigen::Vector2d(l1, l2);
    rows.push_back(std::move(r));
  }
  return IpdTrial::from_rows(study, std::move(rows));
}

}  // namespace

TEST_CASE("logistic MLE agrees with a coordinate-ascent oracle") {
  const OutcomeModelSpec spec = base_spec();
  const IpdTrial trial =
      make_trial(1, 600, 0.25, 0.5, Eigen::Vector3d(1.5, -1.5, 2.0), 11);
  const Eigen::MatrixXd design = trial_design(trial, spec);
  const Eigen::VectorXd y = trial_outcomes(trial);

  const LogisticFit fit = logistic_mle(design, y);
  const Eigen::VectorXd want = oracle_logistic(design, y);
  CHECK((fit.beta - want).cwiseAbs().maxCoeff() < 1e-6);
  CHECK(fit.score_max <= 1e-8);
  CHECK(loglik(design, y, fit.beta) >=
        loglik(design, y, want) - 1e-9);

  // covariance: symmetric positive definite inverse information
  CHECK((fit.cov - fit.cov.transpose()).cwiseAbs().maxCoeff() < 1e-12);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(fit.cov);
  CHECK(es.eigenvalues().minCoeff() > 0.0);
}

TEST_CASE("trial fit recovers the generating coefficients") {
  DgpConfig cfg = DgpConfig::defaults();
  cfg.n = 15000;
  const std::vector<IpdTrial> trials = simulate_dgp(cfg, 42);
  const IpdTrial& t4 = trials[3];
  const TrialFit fit = fit_trial_mle(t4, cfg.model());

  const auto se = [&](int i) { return 3.0 * std::sqrt(fit.cov(i, i)); };
  CHECK(std::abs(fit.tp.phi0 - 0.25) < se(0));
  CHECK(std::abs(fit.tp.phi1 - 0.50) < se(1));
  CHECK(std::abs(fit.sp.phi_c(0) - 1.5) < se(2));
  CHECK(std::abs(fit.sp.phi_c(1) + 1.5) < se(3));
  CHECK(std::abs(fit.sp.phi_c(2) - 2.0) < se(4));
}

TEST_CASE("degenerate outcomes raise a separation error") {
  std::vector<ObservationRow> rows;
  std::mt19937_64 eng = make_engine(5, 0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  for (int i = 0; i < 200; ++i) {
    ObservationRow r;
    r.study = 1;
    r.x = i % 2;
    r.y = 0;
    r.l = Eigen::Vector2d(unif(eng), unif(eng) < 0.5);
    rows.push_back(std::move(r));
  }
  const IpdTrial trial = IpdTrial::from_rows(1, std::move(rows));
  CHECK_THROWS_AS(fit_trial_mle(trial, base_spec()), Error);
  try {
    fit_trial_mle(trial, base_spec());
  } catch (const Error& e) {
    CHECK(e.category() == ErrorCategory::separation);
  }
}

TEST_CASE("rank-deficient design raises a singular error") {
  // duplicate covariate column: l2 appears as a shared term twice
  OutcomeModelSpec spec;
  spec.covariate_names = {"l1", "l2"};
  spec.shared_terms = {SharedTerm{false, {1}}, SharedTerm{false, {1}}};
  spec.validate();
  const IpdTrial trial =
      make_trial(1, 300, 0.2, 0.4, Eigen::Vector3d(0.5, -0.5, 0.0), 17);
  CHECK_THROWS_AS(fit_trial_mle(trial, spec), Error);
}

TEST_CASE("iteration cap raises a convergence error") {
  const IpdTrial trial =
      make_trial(1, 400, 0.25, 0.5, Eigen::Vector3d(1.5, -1.5, 2.0), 3);
  LogisticOptions opt;
  opt.max_iter = 1;
  CHECK_THROWS_AS(fit_trial_mle(trial, base_spec(), opt), Error);
}

TEST_CASE("single-trial stacked fit coincides with the per-trial fit") {
  const IpdTrial trial =
      make_trial(4, 800, 0.25, 0.5, Eigen::Vector3d(1.5, -1.5, 2.0), 23);
  const OutcomeModelSpec spec = base_spec();
  const IpdFit a = fit_per_trial({trial}, spec);
  const IpdFit b = fit_stacked({trial}, spec);
  CHECK(std::abs(a.trial_params[0].phi0 - b.trial_params[0].phi0) < 1e-9);
  CHECK(std::abs(a.trial_params[0].phi1 - b.trial_params[0].phi1) < 1e-9);
  CHECK((a.shared[0].phi_c - b.shared.front().phi_c).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("stacked strategy pools shared information") {
  // two trials, common shared coefficients; the stacked estimate of phi_c
  // should be less variable than either per-trial estimate
  const Eigen::Vector3d phi_c(1.5, -1.5, 2.0);
  const int reps = 120;
  std::vector<double> a_est, b_est;
  for (int r = 0; r < reps; ++r) {
    const IpdTrial t1 = make_trial(1, 700, 0.25, 0.5, phi_c, 100 + 2 * r);
    const IpdTrial t2 = make_trial(2, 700, 0.50, 1.0, phi_c, 101 + 2 * r);
    const OutcomeModelSpec spec = base_spec();
    const IpdFit a = fit_per_trial({t1, t2}, spec);
    const IpdFit b = fit_stacked({t1, t2}, spec);
    a_est.push_back(a.shared[0].phi_c(0));
    b_est.push_back(b.shared.front().phi_c(0));
    CHECK(b.score_max <= 1e-8);
  }
  const auto var = [](const std::vector<double>& v) {
    double m = 0.0, s = 0.0;
    for (double x : v) m += x / static_cast<double>(v.size());
    for (double x : v) s += (x - m) * (x - m) / (static_cast<double>(v.size()) - 1);
    return s;
  };
  const double mean_b = [&] {
    double m = 0.0;
    for (double x : b_est) m += x / b_est.size();
    return m;
  }();
  CHECK(std::abs(mean_b - 1.5) < 3.0 * std::sqrt(var(b_est) / reps));
  CHECK(var(b_est) < 0.8 * var(a_est));
}

TEST_CASE("row order never affects the estimates") {
  IpdTrial trial =
      make_trial(1, 500, 0.25, 0.5, Eigen::Vector3d(1.5, -1.5, 2.0), 31);
  const OutcomeModelSpec spec = base_spec();
  const TrialFit fit = fit_trial_mle(trial, spec);
  std::mt19937_64 eng = make_engine(31, 1);
  std::shuffle(trial.rows.begin(), trial.rows.end(), eng);
  const TrialFit shuffled = fit_trial_mle(trial, spec);
  CHECK(std::abs(fit.tp.phi0 - shuffled.tp.phi0) < 1e-10);
  CHECK(std::abs(fit.tp.phi1 - shuffled.tp.phi1) < 1e-10);
  CHECK((fit.sp.phi_c - shuffled.sp.phi_c).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("trial construction validates its rows") {
  std::vector<ObservationRow> rows(3);
  for (int i = 0; i < 3; ++i) {
    rows[i].study = 1;
    rows[i].x = 1;  // single arm
    rows[i].y = i % 2;
    rows[i].l = Eigen::Vector2d(0.1 * i, 0.0);
  }
  CHECK_THROWS_AS(IpdTrial::from_rows(1, rows), Error);
  rows[0].x = 0;
  CHECK_NOTHROW(IpdTrial::from_rows(1, rows));
  rows[1].study = 2;
  CHECK_THROWS_AS(IpdTrial::from_rows(1, rows), Error);
}

TEST_CASE("stacked score sums to zero at the solution") {
  const IpdTrial t1 =
      make_trial(4, 400, 0.25, 0.5, Eigen::Vector3d(1.5, -1.5, 2.0), 57);
  const IpdTrial t2 =
      make_trial(5, 400, 0.50, 1.0, Eigen::Vector3d(1.5, -1.5, 2.0), 58);
  const OutcomeModelSpec spec = base_spec();
  const IpdFit fit = fit_stacked({t1, t2}, spec);
  Eigen::VectorXd total = Eigen::VectorXd::Zero(2 * 2 + 3);
  for (const IpdTrial* t : {&t1, &t2})
    for (const ObservationRow& r : t->rows)
      total += score_contributions(spec, fit.studies, fit.trial_params,
                                   fit.shared.front(), r);
  CHECK(total.cwiseAbs().maxCoeff() <= 1e-6);
}
