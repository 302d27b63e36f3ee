#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "admeta/ad_recover.hpp"
#include "admeta/extensions.hpp"
#include "admeta/ipd_fit.hpp"
#include "admeta/variance.hpp"
#include "admeta/weight_fit.hpp"

namespace admeta {

enum class PoolingRule { sample_size, equal };

struct PipelineOptions {
  SharedFit strategy = SharedFit::per_trial;
  PoolingRule pooling = PoolingRule::sample_size;
  std::optional<WeightModelSpec> wspec;  // default: constant + linear moments
  bool compute_variance = true;
  bool mom_sigma_correction = false;  // subtract mean sampling noise from Sigma
  std::optional<double> weight_truncation_quantile;
  std::uint64_t seed = 20240801;  // pseudo-data streams
  bool propensity = false;        // observational IPD trials, fitted P(X=1|L)
  bool observational = false;     // joint treatment-and-membership weights
  bool subgroup = false;          // four-coefficient trial blocks
  LogisticOptions logistic;
};

struct PipelineResult {
  OutcomeModelSpec spec;
  WeightModelSpec wspec;
  PipelineOptions options;
  std::vector<IpdTrial> ipd;
  std::vector<AdSummary> ad;

  IpdFit fit;
  std::vector<PropensityFit> propensity;  // per IPD trial when enabled
  std::vector<std::vector<WeightFit>> wfits;
  std::vector<std::vector<std::array<JointWeightFit, 2>>> jwfits;
  std::vector<std::vector<PairEstimate>> pairs;
  std::vector<std::vector<SubgroupPairEstimate>> sub_pairs;

  std::vector<double> pool_w;          // over IPD trials, within each AD solve
  std::vector<double> shared_w;        // over IPD trials, for shared pooling
  std::vector<double> ad_w, ipd_w;     // across-trial weights (sum to 1 jointly)
  std::vector<TrialParams> ad_pooled;  // per AD trial
  Eigen::VectorXd shared_pooled;
  double phi1_bar = 0.0;
  RandomEffectSummary ranef;

  bool has_variance = false;
  std::string variance_note;  // why the sandwich was skipped, if it was
  std::vector<AdSecondMoments> second_moments;
  std::vector<PseudoTrial> pseudo;
  ParamState state;
  SandwichParts sw;

  int ad_index(int study) const;
  int ipd_index(int study) const;
  // sandwich-based variances of the reported quantities
  double var_star(int j, int coord) const;    // pooled AD-trial coefficient
  double var_trial_phi(int k, int coord) const;
  double var_shared(int r) const;
  double var_phi1_bar() const;
};

PipelineResult run_pipeline(std::vector<IpdTrial> ipd, std::vector<AdSummary> ad,
                            OutcomeModelSpec spec, PipelineOptions options = {});

}  // namespace admeta
