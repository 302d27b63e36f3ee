#pragma once

#include <Eigen/Dense>

#include <optional>
#include <vector>

#include "admeta/ipd_fit.hpp"
#include "admeta/model.hpp"
#include "admeta/weight_fit.hpp"

namespace admeta {

struct PropensityFit;  // extensions.hpp

struct PairEstimate {
  int ad_study = 0;
  int ipd_study = 0;
  TrialParams params;           // trial-specific coefficients of the AD trial
  Eigen::Vector2d intercepts;   // per-arm solves a_x, params derived from them
  Eigen::Vector2d residual;     // per-arm equation residuals at the solution
  Eigen::Vector2d lhs_slope;    // per-arm derivative of the solved equation, > 0
  int iterations = 0;
};

// Recover the AD trial's coefficients from one weighted IPD trial by solving
// the per-arm mean equations.  Monotonicity in the intercept makes each root
// unique.  An optional propensity fit replaces the constant arm probability
// with fitted P(X=x | L) row by row (observational IPD trial).
PairEstimate solve_pair(const IpdTrial& ipd_k, const AdSummary& ad_j,
                        const WeightFit& wf, const OutcomeModelSpec& spec,
                        const SharedParams& shared,
                        const PropensityFit* propensity = nullptr);

struct PooledAdEstimate {
  int ad_study = 0;
  TrialParams params;
  std::vector<double> weights;  // over contributing IPD trials, sum to 1
};

PooledAdEstimate pool_pairs(const std::vector<PairEstimate>& pairs,
                            const std::vector<double>& weights);

// Between-trial summary of (phi0_s, phi1_s) across all trials.  The
// dispersion uses the weighted bias-corrected divisor 1 - sum(w^2); with one
// trial (or degenerate weights) the covariance is not identified and the flag
// says so.  Optional sampling covariances subtract the mean within-trial
// noise (method-of-moments correction), floored at zero.
RandomEffectSummary pool_random_effects(
    const std::vector<TrialParams>& trials, const std::vector<double>& weights,
    const std::vector<Eigen::Matrix2d>* sampling_cov = nullptr);

}  // namespace admeta
