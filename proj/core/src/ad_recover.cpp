#include "admeta/ad_recover.hpp"

#include <cmath>

#include "admeta/errors.hpp"
#include "admeta/extensions.hpp"
#include "arm_solve.hpp"

namespace admeta {

PairEstimate solve_pair(const IpdTrial& ipd_k, const AdSummary& ad_j,
                        const WeightFit& wf, const OutcomeModelSpec& spec,
                        const SharedParams& shared,
                        const PropensityFit* propensity) {
  if (spec.extended())
    fail(ErrorCategory::internal,
         "solve_pair expects the two-parameter trial block; use the subgroup solver");
  if (wf.weights.size() != ipd_k.n())
    fail(ErrorCategory::dimension, "weight vector does not match the IPD trial");
  ad_j.validate();
  const double n_j = ad_j.n();

  PairEstimate pe;
  pe.ad_study = ad_j.study;
  pe.ipd_study = ipd_k.study;

  for (int x = 0; x < 2; ++x) {
    detail::ArmProblem prob;
    prob.target = ad_j.arms[x].y_mean;
    const double arm_p = ipd_k.arm_prob(x);
    for (int i = 0; i < ipd_k.n(); ++i) {
      const ObservationRow& row = ipd_k.rows[i];
      if (row.x != x) continue;
      double px = arm_p;
      if (propensity) {
        double e1 = propensity->prob(row.l);
        px = x == 1 ? e1 : 1.0 - e1;
        if (px < 1e-12)
          fail(ErrorCategory::overlap, "fitted propensity vanishes for some rows");
      }
      prob.v.push_back(shared.phi_c.dot(spec.shared_regressors(x, row.l)));
      prob.wgt.push_back(wf.weights(i) / (n_j * px));
    }
    if (prob.v.empty())
      fail(ErrorCategory::size, "IPD trial arm " + std::to_string(x) + " is empty");
    prob.finish();
    int iters = 0;
    const std::string what = "aggregate trial " + std::to_string(ad_j.study) +
                             " arm " + std::to_string(x);
    pe.intercepts(x) =
        detail::solve_arm(prob, what, pe.residual(x), pe.lhs_slope(x), iters);
    pe.iterations = std::max(pe.iterations, iters);
  }

  pe.params.phi0 = pe.intercepts(0);
  pe.params.phi1 = pe.intercepts(1) - pe.intercepts(0);
  return pe;
}

PooledAdEstimate pool_pairs(const std::vector<PairEstimate>& pairs,
                            const std::vector<double>& weights) {
  if (pairs.empty()) fail(ErrorCategory::schema, "no pair estimates to pool");
  if (weights.size() != pairs.size())
    fail(ErrorCategory::dimension, "pooling weight count does not match pairs");
  double sum = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0)) fail(ErrorCategory::domain, "pooling weights must be nonnegative");
    sum += w;
  }
  if (std::abs(sum - 1.0) > 1e-8)
    fail(ErrorCategory::domain, "pooling weights must sum to 1");
  PooledAdEstimate pooled;
  pooled.ad_study = pairs.front().ad_study;
  pooled.weights = weights;
  pooled.params.phi0 = 0.0;
  pooled.params.phi1 = 0.0;
  for (std::size_t s = 0; s < pairs.size(); ++s) {
    if (pairs[s].ad_study != pooled.ad_study)
      fail(ErrorCategory::schema, "pair estimates pool across one aggregate trial only");
    pooled.params.phi0 += weights[s] * pairs[s].params.phi0;
    pooled.params.phi1 += weights[s] * pairs[s].params.phi1;
  }
  return pooled;
}

RandomEffectSummary pool_random_effects(
    const std::vector<TrialParams>& trials, const std::vector<double>& weights,
    const std::vector<Eigen::Matrix2d>* sampling_cov) {
  const std::size_t k = trials.size();
  if (k == 0) fail(ErrorCategory::schema, "no trials to summarize");
  if (weights.size() != k)
    fail(ErrorCategory::dimension, "summary weight count does not match trials");
  if (sampling_cov && sampling_cov->size() != k)
    fail(ErrorCategory::dimension, "sampling covariance count does not match trials");
  double sum = 0.0, sumsq = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0)) fail(ErrorCategory::domain, "summary weights must be nonnegative");
    sum += w;
    sumsq += w * w;
  }
  if (std::abs(sum - 1.0) > 1e-8)
    fail(ErrorCategory::domain, "summary weights must sum to 1");

  RandomEffectSummary re;
  re.mean.setZero();
  for (std::size_t s = 0; s < k; ++s) {
    re.mean(0) += weights[s] * trials[s].phi0;
    re.mean(1) += weights[s] * trials[s].phi1;
  }
  re.phi1_bar = re.mean(1);

  const double denom = 1.0 - sumsq;
  if (k < 2 || denom <= 1e-12) {
    re.cov.setZero();
    re.cov_identified = false;
    return re;
  }
  Eigen::Matrix2d disp = Eigen::Matrix2d::Zero();
  for (std::size_t s = 0; s < k; ++s) {
    Eigen::Vector2d d(trials[s].phi0 - re.mean(0), trials[s].phi1 - re.mean(1));
    disp += weights[s] * d * d.transpose();
  }
  disp /= denom;
  if (sampling_cov)
    for (std::size_t s = 0; s < k; ++s) disp -= weights[s] * (*sampling_cov)[s];
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> es(disp);
  Eigen::Vector2d ev = es.eigenvalues().cwiseMax(0.0);
  re.cov = es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
  re.cov = 0.5 * (re.cov + re.cov.transpose()).eval();
  re.cov_identified = true;
  return re;
}

}  // namespace admeta
