#include "admeta/ipd_fit.hpp"

#include <cmath>
#include <string>

namespace admeta {

namespace {

// log(1 + exp(eta)) without overflow
double softplus(double eta) {
  if (eta > 0.0) return eta + std::log1p(std::exp(-eta));
  return std::log1p(std::exp(eta));
}

double bernoulli_loglik(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                        const Eigen::VectorXd& beta) {
  const Eigen::VectorXd eta = X * beta;
  double ll = 0.0;
  for (Eigen::Index i = 0; i < eta.size(); ++i) ll += y(i) * eta(i) - softplus(eta(i));
  return ll;
}

}  // namespace

IpdTrial IpdTrial::from_rows(int study, std::vector<ObservationRow> rows,
                             std::optional<double> design_arm_probability) {
  IpdTrial t;
  t.study = study;
  t.rows = std::move(rows);
  if (t.rows.empty()) fail(ErrorCategory::schema, "trial " + std::to_string(study) + ": no rows");
  long n1 = 0;
  const Eigen::Index d = t.rows.front().l.size();
  for (const ObservationRow& r : t.rows) {
    if (r.study != study)
      fail(ErrorCategory::schema, "trial " + std::to_string(study) + ": row carries study id " +
                                      std::to_string(r.study));
    if (r.x != 0 && r.x != 1) fail(ErrorCategory::schema, "arm indicator must be 0/1");
    if (r.y != 0 && r.y != 1) fail(ErrorCategory::schema, "outcome must be 0/1");
    if (r.l.size() != d) fail(ErrorCategory::dimension, "ragged covariate rows");
    if (!r.l.allFinite()) fail(ErrorCategory::domain, "non-finite covariate");
    n1 += r.x;
  }
  if (n1 == 0 || n1 == t.n())
    fail(ErrorCategory::schema, "trial " + std::to_string(study) + ": single-arm data");
  t.arm_probability = design_arm_probability
                          ? *design_arm_probability
                          : static_cast<double>(n1) / static_cast<double>(t.n());
  if (!(t.arm_probability > 0.0 && t.arm_probability < 1.0))
    fail(ErrorCategory::domain, "arm probability outside (0,1)");
  return t;
}

LogisticFit logistic_mle(const Eigen::MatrixXd& design, const Eigen::VectorXd& y,
                         const LogisticOptions& opt) {
  const Eigen::Index n = design.rows();
  const Eigen::Index p = design.cols();
  if (y.size() != n) fail(ErrorCategory::dimension, "logistic_mle: outcome length mismatch");
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(design);
  if (qr.rank() < p)
    fail(ErrorCategory::singular, "design matrix rank " + std::to_string(qr.rank()) +
                                      " < " + std::to_string(p) + " columns");

  Eigen::VectorXd beta = Eigen::VectorXd::Zero(p);
  double ll = bernoulli_loglik(design, y, beta);
  Eigen::VectorXd prob(n);
  Eigen::MatrixXd info(p, p);
  LogisticFit fit;

  for (int iter = 1; iter <= opt.max_iter; ++iter) {
    const Eigen::VectorXd eta = design * beta;
    double worst_residual = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      prob(i) = expit(eta(i));
      worst_residual = std::max(worst_residual, std::abs(y(i) - prob(i)));
    }
    // every outcome fitted to machine level: the likelihood has no interior
    // maximum, the iterates are running off to a separating direction
    if (worst_residual < 1e-6)
      fail(ErrorCategory::separation,
           "separation detected: outcomes perfectly classified");
    const Eigen::VectorXd score = design.transpose() * (y - prob);
    fit.iterations = iter - 1;
    fit.score_max = score.lpNorm<Eigen::Infinity>();
    if (fit.score_max <= opt.tol) break;

    const Eigen::VectorXd w = prob.array() * (1.0 - prob.array());
    info.noalias() = design.transpose() * w.asDiagonal() * design;
    Eigen::LDLT<Eigen::MatrixXd> ldlt(info);
    if (ldlt.info() != Eigen::Success)
      fail(ErrorCategory::singular, "observed information not factorizable");
    const Eigen::VectorXd step = ldlt.solve(score);

    double t = 1.0;
    int halvings = 0;
    // near the optimum the likelihood difference sinks below the rounding
    // floor of |ll|; accept ties within that floor so full steps go through
    const double slack = 1e-10 * (std::abs(ll) + 1.0);
    double ll_new = bernoulli_loglik(design, y, beta + t * step);
    while (ll_new < ll - slack && halvings < opt.max_halvings) {
      t *= 0.5;
      ++halvings;
      ll_new = bernoulli_loglik(design, y, beta + t * step);
    }
    if (ll_new < ll - slack)
      fail(ErrorCategory::convergence, "line search failed to improve the likelihood");
    beta += t * step;
    ll = ll_new;

    if (beta.norm() > opt.separation_norm) {
      const Eigen::VectorXd eta_new = design * beta;
      double pmin = 1.0, pmax = 0.0;
      for (Eigen::Index i = 0; i < n; ++i) {
        const double pi = expit(eta_new(i));
        pmin = std::min(pmin, pi);
        pmax = std::max(pmax, pi);
      }
      if (pmin < opt.separation_prob || pmax > 1.0 - opt.separation_prob)
        fail(ErrorCategory::separation,
             "separation detected: diverging coefficients with boundary fitted probabilities");
    }
    if (iter == opt.max_iter)
      fail(ErrorCategory::convergence,
           "logistic fit did not converge in " + std::to_string(opt.max_iter) + " iterations");
  }

  const Eigen::VectorXd w = prob.array() * (1.0 - prob.array());
  info.noalias() = design.transpose() * w.asDiagonal() * design;
  Eigen::LDLT<Eigen::MatrixXd> ldlt(info);
  if (ldlt.info() != Eigen::Success)
    fail(ErrorCategory::singular, "observed information not factorizable at the solution");
  fit.beta = beta;
  fit.cov = ldlt.solve(Eigen::MatrixXd::Identity(p, p));
  fit.cov = 0.5 * (fit.cov + fit.cov.transpose()).eval();
  fit.loglik = ll;
  return fit;
}

Eigen::MatrixXd trial_design(const IpdTrial& trial, const OutcomeModelSpec& spec) {
  const int tb = spec.trial_block_dim();
  const int c = spec.n_shared();
  Eigen::MatrixXd X(trial.n(), tb + c);
  for (int i = 0; i < trial.n(); ++i) {
    const ObservationRow& r = trial.rows[i];
    X(i, 0) = 1.0;
    X(i, 1) = r.x;
    if (spec.extended()) {
      const double l1 = r.l(*spec.subgroup_covariate);
      X(i, 2) = l1;
      X(i, 3) = r.x * l1;
    }
    X.row(i).tail(c) = spec.shared_regressors(r.x, r.l).transpose();
  }
  return X;
}

Eigen::VectorXd trial_outcomes(const IpdTrial& trial) {
  Eigen::VectorXd y(trial.n());
  for (int i = 0; i < trial.n(); ++i) y(i) = trial.rows[i].y;
  return y;
}

TrialFit fit_trial_mle(const IpdTrial& trial, const OutcomeModelSpec& spec,
                       const LogisticOptions& opt) {
  spec.validate();
  const LogisticFit lf = logistic_mle(trial_design(trial, spec), trial_outcomes(trial), opt);
  TrialFit out;
  out.tp.phi0 = lf.beta(0);
  out.tp.phi1 = lf.beta(1);
  if (spec.extended()) out.tp.extra = {{lf.beta(2), lf.beta(3)}};
  out.sp.phi_c = lf.beta.tail(spec.n_shared());
  out.cov = lf.cov;
  out.iterations = lf.iterations;
  out.score_max = lf.score_max;
  return out;
}

IpdFit fit_per_trial(const std::vector<IpdTrial>& trials, const OutcomeModelSpec& spec,
                     const LogisticOptions& opt) {
  if (trials.empty()) fail(ErrorCategory::schema, "no IPD trials");
  IpdFit out;
  out.strategy = SharedFit::per_trial;
  for (const IpdTrial& t : trials) {
    const TrialFit tf = fit_trial_mle(t, spec, opt);
    out.studies.push_back(t.study);
    out.trial_params.push_back(tf.tp);
    out.shared.push_back(tf.sp);
    out.cov.push_back(tf.cov);
    out.iterations = std::max(out.iterations, tf.iterations);
    out.score_max = std::max(out.score_max, tf.score_max);
  }
  return out;
}

IpdFit fit_stacked(const std::vector<IpdTrial>& trials, const OutcomeModelSpec& spec,
                   const LogisticOptions& opt) {
  if (trials.empty()) fail(ErrorCategory::schema, "no IPD trials");
  spec.validate();
  const int K = static_cast<int>(trials.size());
  const int tb = spec.trial_block_dim();
  const int c = spec.n_shared();
  Eigen::Index n = 0;
  for (const IpdTrial& t : trials) n += t.n();

  Eigen::MatrixXd X = Eigen::MatrixXd::Zero(n, tb * K + c);
  Eigen::VectorXd y(n);
  Eigen::Index row = 0;
  for (int k = 0; k < K; ++k) {
    const Eigen::MatrixXd Xk = trial_design(trials[k], spec);
    const Eigen::VectorXd yk = trial_outcomes(trials[k]);
    X.block(row, tb * k, Xk.rows(), tb) = Xk.leftCols(tb);
    X.block(row, tb * K, Xk.rows(), c) = Xk.rightCols(c);
    y.segment(row, yk.size()) = yk;
    row += Xk.rows();
  }

  const LogisticFit lf = logistic_mle(X, y, opt);
  IpdFit out;
  out.strategy = SharedFit::stacked;
  SharedParams sp{lf.beta.tail(c)};
  for (int k = 0; k < K; ++k) {
    TrialParams tp;
    tp.phi0 = lf.beta(tb * k);
    tp.phi1 = lf.beta(tb * k + 1);
    if (spec.extended()) tp.extra = {{lf.beta(tb * k + 2), lf.beta(tb * k + 3)}};
    out.studies.push_back(trials[k].study);
    out.trial_params.push_back(tp);
  }
  out.shared.push_back(sp);
  out.cov.push_back(lf.cov);
  out.iterations = lf.iterations;
  out.score_max = lf.score_max;
  return out;
}

IpdFit fit_ipd(const std::vector<IpdTrial>& trials, const OutcomeModelSpec& spec,
               SharedFit strategy, const LogisticOptions& opt) {
  return strategy == SharedFit::per_trial ? fit_per_trial(trials, spec, opt)
                                          : fit_stacked(trials, spec, opt);
}

}  // namespace admeta
