#pragma once

#include <Eigen/Dense>

#include <string>
#include <vector>

#include "admeta/ad_recover.hpp"
#include "admeta/ipd_fit.hpp"
#include "admeta/model.hpp"
#include "admeta/weight_fit.hpp"

namespace admeta {

// Logistic model for P(X=1 | L) inside one IPD trial, used when that trial is
// observational: the recovery equations divide by the fitted probability row
// by row instead of the constant arm share.
struct PropensityFit {
  int study = 0;
  std::vector<int> covariates;  // design is (1, L[covariates])
  Eigen::VectorXd gamma;
  Eigen::MatrixXd cov;
  int iterations = 0;

  double prob(const Eigen::VectorXd& l) const;
};

// covariates empty -> all covariates enter the propensity design
PropensityFit fit_propensity(const IpdTrial& trial,
                             std::vector<int> covariates = {});

// Weight model for the joint odds P(X=x, S=j | L) / P(X=x, S=k | L): the
// tilt exp(beta' (1, L)) is fitted on the arm-x rows of trial k against the
// arm-x aggregate moments of trial j.  Just-identified by construction.
struct JointWeightFit {
  int ad_study = 0;
  int ipd_study = 0;
  int arm = 0;
  Eigen::VectorXd beta;     // over (1, L)
  Eigen::VectorXd weights;  // full trial length, zero off-arm
  Eigen::VectorXd targets;  // Ê(p(L) | x, j) per moment fn
  Eigen::VectorXd achieved;
  double n_xj = 0.0;
  int iterations = 0;
  std::vector<std::string> labels;
  std::vector<MomentFn> moments;
};

JointWeightFit fit_joint_weight_model(const IpdTrial& ipd_k, const AdSummary& ad_j,
                                      int x, const std::vector<MomentFn>& moments);
JointWeightFit fit_joint_weight_model(const IpdTrial& ipd_k, const AdSummary& ad_j,
                                      int x);

// Observational recovery: per arm, solve
//   (1/n_j) Σ_{i: X=x, S=k} expit{a_x + v(x, L_i)} e(β̂ᵀL̃_i) = Ê(Y|x,j)·P̂(X=x|j)
PairEstimate solve_pair_observational(const IpdTrial& ipd_k, const AdSummary& ad_j,
                                      const JointWeightFit& jwf0,
                                      const JointWeightFit& jwf1,
                                      const OutcomeModelSpec& spec,
                                      const SharedParams& shared);

// Cell outcome means of an AD trial, recovered from its summary via the
// arm-wise identity E(Y|x) = sum_l E(Y|x,l) P(l|x): order (x,l) = (0,0),
// (1,0), (0,1), (1,1).  The l=1 means come from the subgroup block, the l=0
// means from subtracting their arm contribution, so the result stays exact
// even when the block's trial-level fraction disagrees with the arm shares.
Eigen::Vector4d subgroup_cell_means(const AdSummary& ad_j, int sc);

// Subgroup recovery under the four-coefficient trial block: the
// self-normalized cell systems
//   Σ_{i: X=x, L1=l} expit{a_xl + v(x, L_i)} m_i / Σ_{i: X=x, L1=l} m_i
//     = Ê(Y|x, l, j)
// for the four (x, l) cells, mapped back to (phi0, phi1, phi2, phi3).
struct SubgroupPairEstimate {
  int ad_study = 0;
  int ipd_study = 0;
  TrialParams params;          // extra holds (phi2, phi3)
  Eigen::Vector4d intercepts;  // cell order (x,l) = (0,0), (1,0), (0,1), (1,1)
  Eigen::Vector4d residual;
  Eigen::Vector4d lhs_slope;
  int iterations = 0;
};

SubgroupPairEstimate solve_subgroup_pair(const IpdTrial& ipd_k,
                                         const AdSummary& ad_j,
                                         const WeightFit& wf,
                                         const OutcomeModelSpec& spec,
                                         const SharedParams& shared);

}  // namespace admeta
