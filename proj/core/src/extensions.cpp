#include "admeta/extensions.hpp"

#include <cmath>

#include "admeta/errors.hpp"
#include "arm_solve.hpp"

namespace admeta {

double PropensityFit::prob(const Eigen::VectorXd& l) const {
  double eta = gamma(0);
  for (std::size_t c = 0; c < covariates.size(); ++c)
    eta += gamma(static_cast<int>(c) + 1) * l(covariates[c]);
  return expit(eta);
}

PropensityFit fit_propensity(const IpdTrial& trial, std::vector<int> covariates) {
  const int d = static_cast<int>(trial.rows.front().l.size());
  if (covariates.empty())
    for (int c = 0; c < d; ++c) covariates.push_back(c);
  for (int c : covariates)
    if (c < 0 || c >= d)
      fail(ErrorCategory::dimension, "propensity covariate index out of range");

  const int n = trial.n();
  Eigen::MatrixXd design(n, static_cast<int>(covariates.size()) + 1);
  Eigen::VectorXd resp(n);
  for (int i = 0; i < n; ++i) {
    design(i, 0) = 1.0;
    for (std::size_t c = 0; c < covariates.size(); ++c)
      design(i, static_cast<int>(c) + 1) = trial.rows[i].l(covariates[c]);
    resp(i) = trial.rows[i].x;
  }
  LogisticFit lf = logistic_mle(design, resp, {});
  PropensityFit pf;
  pf.study = trial.study;
  pf.covariates = std::move(covariates);
  pf.gamma = lf.beta;
  pf.cov = lf.cov;
  pf.iterations = lf.iterations;
  return pf;
}

JointWeightFit fit_joint_weight_model(const IpdTrial& ipd_k, const AdSummary& ad_j,
                                      int x, const std::vector<MomentFn>& moments) {
  const int d = static_cast<int>(ipd_k.rows.front().l.size());
  if (ad_j.n_cov() != d)
    fail(ErrorCategory::dimension, "aggregate and IPD covariate dimensions differ");
  if (x != 0 && x != 1) fail(ErrorCategory::domain, "arm must be 0 or 1");
  if (static_cast<int>(moments.size()) != d + 1)
    fail(ErrorCategory::schema,
         "joint weight model is just-identified: need one moment per (1, L) column");

  JointWeightFit jwf;
  jwf.ad_study = ad_j.study;
  jwf.ipd_study = ipd_k.study;
  jwf.arm = x;
  jwf.moments = moments;
  const double n_xj = ad_j.n() * ad_j.arm_prob[x];
  jwf.n_xj = n_xj;

  std::vector<int> rows;
  for (int i = 0; i < ipd_k.n(); ++i)
    if (ipd_k.rows[i].x == x) rows.push_back(i);
  if (rows.empty())
    fail(ErrorCategory::size, "IPD trial arm " + std::to_string(x) + " is empty");
  const int m = static_cast<int>(rows.size());

  Eigen::MatrixXd g(m, d + 1);  // tilt regressors: (1, L)
  Eigen::MatrixXd p(m, d + 1);  // moment functions
  for (int r = 0; r < m; ++r) {
    const Eigen::VectorXd& l = ipd_k.rows[rows[r]].l;
    g(r, 0) = 1.0;
    g.row(r).tail(d) = l.transpose();
    for (int c = 0; c <= d; ++c) p(r, c) = moments[c].eval(l);
  }
  jwf.targets.resize(d + 1);
  for (int c = 0; c <= d; ++c) {
    jwf.targets(c) = ad_j.arm_moment(x, moments[c]);
    jwf.labels.push_back(moments[c].label(ad_j.covariate_names));
  }
  Eigen::VectorXd scale(d + 1);
  for (int c = 0; c <= d; ++c) scale(c) = std::max(1.0, std::abs(jwf.targets(c)));

  Eigen::VectorXd beta = Eigen::VectorXd::Zero(d + 1);
  beta(0) = std::log(n_xj / m);
  auto discrepancy = [&](const Eigen::VectorXd& b, Eigen::VectorXd& w_out) {
    w_out = (g * b).array().exp().matrix();
    return Eigen::VectorXd(p.transpose() * w_out / n_xj - jwf.targets);
  };
  Eigen::VectorXd w;
  Eigen::VectorXd h = discrepancy(beta, w);
  int iter = 0;
  for (iter = 1; iter <= 200; ++iter) {
    if (h.cwiseQuotient(scale).cwiseAbs().maxCoeff() <= 1e-11) break;
    Eigen::MatrixXd jac = p.transpose() * w.asDiagonal() * g / n_xj;
    Eigen::VectorXd step = Eigen::PartialPivLU<Eigen::MatrixXd>(jac).solve(-h);
    if (!step.allFinite())
      fail(ErrorCategory::singular, "joint weight model Jacobian is singular");
    double t = 1.0;
    double h0 = h.cwiseQuotient(scale).norm();
    bool improved = false;
    for (int half = 0; half < 40; ++half) {
      Eigen::VectorXd cand = beta + t * step;
      Eigen::VectorXd w_cand;
      Eigen::VectorXd h_cand = discrepancy(cand, w_cand);
      if (h_cand.allFinite() && h_cand.cwiseQuotient(scale).norm() < h0) {
        beta = cand;
        h = h_cand;
        w = w_cand;
        improved = true;
        break;
      }
      t *= 0.5;
    }
    if (!improved)
      fail(ErrorCategory::convergence, "joint weight model stalled for aggregate trial " +
                                           std::to_string(ad_j.study));
    if (beta.norm() > 50.0 || !beta.allFinite())
      fail(ErrorCategory::overlap,
           "joint weight model diverged; covariate overlap looks insufficient");
    if (iter == 200)
      fail(ErrorCategory::convergence, "joint weight model hit the iteration cap");
  }
  jwf.iterations = iter - 1;
  jwf.beta = beta;
  jwf.achieved = p.transpose() * w / n_xj;
  jwf.weights = Eigen::VectorXd::Zero(ipd_k.n());
  for (int r = 0; r < m; ++r) jwf.weights(rows[r]) = w(r);
  return jwf;
}

JointWeightFit fit_joint_weight_model(const IpdTrial& ipd_k, const AdSummary& ad_j,
                                      int x) {
  const int d = static_cast<int>(ipd_k.rows.front().l.size());
  std::vector<MomentFn> moments;
  moments.push_back(MomentFn::constant_term());
  for (int c = 0; c < d; ++c) moments.push_back(MomentFn::linear(c));
  return fit_joint_weight_model(ipd_k, ad_j, x, moments);
}

PairEstimate solve_pair_observational(const IpdTrial& ipd_k, const AdSummary& ad_j,
                                      const JointWeightFit& jwf0,
                                      const JointWeightFit& jwf1,
                                      const OutcomeModelSpec& spec,
                                      const SharedParams& shared) {
  if (spec.extended())
    fail(ErrorCategory::internal,
         "solve_pair_observational expects the two-parameter trial block");
  if (jwf0.arm != 0 || jwf1.arm != 1 || jwf0.ad_study != ad_j.study ||
      jwf1.ad_study != ad_j.study || jwf0.ipd_study != ipd_k.study ||
      jwf1.ipd_study != ipd_k.study)
    fail(ErrorCategory::schema, "joint weight fits do not match the trial pair");
  ad_j.validate();
  const double n_j = ad_j.n();

  PairEstimate pe;
  pe.ad_study = ad_j.study;
  pe.ipd_study = ipd_k.study;
  for (int x = 0; x < 2; ++x) {
    const JointWeightFit& jwf = x == 0 ? jwf0 : jwf1;
    detail::ArmProblem prob;
    prob.target = ad_j.arms[x].y_mean * ad_j.arm_prob[x];
    for (int i = 0; i < ipd_k.n(); ++i) {
      const ObservationRow& row = ipd_k.rows[i];
      if (row.x != x) continue;
      prob.v.push_back(shared.phi_c.dot(spec.shared_regressors(x, row.l)));
      prob.wgt.push_back(jwf.weights(i) / n_j);
    }
    if (prob.v.empty())
      fail(ErrorCategory::size, "IPD trial arm " + std::to_string(x) + " is empty");
    prob.finish();
    // targets sit on the boundary only if the arm outcome mean does
    if (!(ad_j.arms[x].y_mean > 0.0) || !(ad_j.arms[x].y_mean < 1.0))
      fail(ErrorCategory::boundary,
           "aggregate trial " + std::to_string(ad_j.study) + " arm " +
               std::to_string(x) + " has outcome mean on the boundary");
    int iters = 0;
    const std::string what = "aggregate trial " + std::to_string(ad_j.study) +
                             " arm " + std::to_string(x) + " (observational)";
    pe.intercepts(x) =
        detail::solve_arm(prob, what, pe.residual(x), pe.lhs_slope(x), iters);
    pe.iterations = std::max(pe.iterations, iters);
  }
  pe.params.phi0 = pe.intercepts(0);
  pe.params.phi1 = pe.intercepts(1) - pe.intercepts(0);
  return pe;
}

Eigen::Vector4d subgroup_cell_means(const AdSummary& ad_j, int sc) {
  if (!ad_j.subgroup)
    fail(ErrorCategory::missing_moment,
         "aggregate trial " + std::to_string(ad_j.study) + " lacks a subgroup block");
  const SubgroupBlock& sub = *ad_j.subgroup;
  if (sub.covariate != sc)
    fail(ErrorCategory::schema,
         "subgroup blocks use a different covariate than the model");
  Eigen::Vector4d c;
  for (int x = 0; x < 2; ++x) {
    const ArmSummary& arm = ad_j.arms[x];
    const double p1 = arm.l_mean(sc);
    if (!(p1 > 0.0) || !(p1 < 1.0))
      fail(ErrorCategory::boundary,
           "subgroup covariate is constant within an arm of aggregate trial " +
               std::to_string(ad_j.study));
    c(x + 2) = sub.y_mean[x][1];
    c(x) = (arm.y_mean - sub.y_mean[x][1] * p1) / (1.0 - p1);
  }
  return c;
}

SubgroupPairEstimate solve_subgroup_pair(const IpdTrial& ipd_k,
                                         const AdSummary& ad_j,
                                         const WeightFit& wf,
                                         const OutcomeModelSpec& spec,
                                         const SharedParams& shared) {
  if (!spec.extended())
    fail(ErrorCategory::schema,
         "subgroup recovery needs an outcome model with a subgroup covariate");
  if (wf.weights.size() != ipd_k.n())
    fail(ErrorCategory::dimension, "weight vector does not match the IPD trial");
  ad_j.validate();
  const int sc = *spec.subgroup_covariate;
  const Eigen::Vector4d cmeans = subgroup_cell_means(ad_j, sc);

  SubgroupPairEstimate se;
  se.ad_study = ad_j.study;
  se.ipd_study = ipd_k.study;

  for (int l = 0; l < 2; ++l)
    for (int x = 0; x < 2; ++x) {
      const int cell = x + 2 * l;
      detail::ArmProblem prob;
      if (!(cmeans(cell) > 0.0) || !(cmeans(cell) < 1.0))
        fail(ErrorCategory::boundary, "subgroup outcome mean on the boundary");
      prob.target = cmeans(cell);
      double mass = 0.0;
      for (int i = 0; i < ipd_k.n(); ++i) {
        const ObservationRow& row = ipd_k.rows[i];
        double lv = row.l(sc);
        if (lv != 0.0 && lv != 1.0)
          fail(ErrorCategory::domain, "subgroup covariate must be binary");
        if (row.x != x || static_cast<int>(lv) != l) continue;
        prob.v.push_back(shared.phi_c.dot(spec.shared_regressors(x, row.l)));
        prob.wgt.push_back(wf.weights(i));
        mass += wf.weights(i);
      }
      if (prob.v.empty() || !(mass > 0.0))
        fail(ErrorCategory::size, "empty treatment-by-subgroup cell in trial " +
                                      std::to_string(ipd_k.study));
      for (double& w : prob.wgt) w /= mass;
      prob.finish();
      int iters = 0;
      const std::string what = "aggregate trial " + std::to_string(ad_j.study) +
                               " cell x=" + std::to_string(x) +
                               " l=" + std::to_string(l);
      se.intercepts(cell) = detail::solve_arm(prob, what, se.residual(cell),
                                              se.lhs_slope(cell), iters);
      se.iterations = std::max(se.iterations, iters);
    }

  const double a00 = se.intercepts(0), a10 = se.intercepts(1);
  const double a01 = se.intercepts(2), a11 = se.intercepts(3);
  se.params.phi0 = a00;
  se.params.phi1 = a10 - a00;
  se.params.extra = {{a01 - a00, a11 - a10 - a01 + a00}};
  return se;
}

}  // namespace admeta
