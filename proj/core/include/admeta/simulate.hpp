#pragma once

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "admeta/ipd_fit.hpp"
#include "admeta/pipeline.hpp"

namespace admeta {

// Five-trial benchmark generator: L1 ~ U(0,1), L2 ~ Bern(1/2), X ~ Bern(1/2),
// trial membership by a multinomial logit in (1, L1, L2), binary outcome from
// the trial-specific logistic model.
struct DgpConfig {
  int n = 15000;
  int n_trials = 5;
  std::vector<Eigen::Vector3d> membership;  // one per trial after the first
  std::vector<double> phi0;
  std::vector<double> phi1;
  Eigen::VectorXd shared_coefs;
  // per-trial (main, interaction) effects of the binary covariate; switches
  // the outcome model to the four-coefficient variant
  std::optional<std::vector<std::array<double, 2>>> subgroup_effects;

  static DgpConfig defaults();
  static DgpConfig subgroup_defaults();
  OutcomeModelSpec model() const;
  void validate() const;
};

// P(S = j | L) for j = 1..n_trials
Eigen::VectorXd membership_probs(const DgpConfig& cfg, double l1, double l2);

// true outcome probability for trial s (1-based), arm x
double dgp_mean_response(const DgpConfig& cfg, int s, int x, double l1, double l2);

std::vector<IpdTrial> simulate_dgp(const DgpConfig& cfg, std::uint64_t seed);

struct ReplicationConfig {
  DgpConfig dgp;
  PipelineOptions pipeline;
  std::vector<int> masked = {1, 2, 3};  // study ids reported as AD
  bool cross_moments = false;
  bool include_comparator = false;  // IPD-only benchmark on the same data
};

struct ReplicationOutput {
  bool ok = false;
  std::string error;
  std::map<std::string, double> est;
  std::map<std::string, double> var;
};

ReplicationOutput run_replication(const ReplicationConfig& cfg,
                                  std::uint64_t rep_seed);

// IPD-only benchmark: per-trial ML fits, equal-weight averages, naive
// variance from the ML covariances.
struct ComparatorOutput {
  double phi1_bar = 0.0;
  double var_phi1_bar = 0.0;
  Eigen::VectorXd shared;
  Eigen::VectorXd var_shared;
};

ComparatorOutput ipd_only_comparator(const std::vector<IpdTrial>& trials,
                                     const OutcomeModelSpec& spec,
                                     const LogisticOptions& opt = {});

// expected parameter values implied by a DGP configuration, keyed like the
// replication outputs
std::map<std::string, double> dgp_truth(const DgpConfig& cfg,
                                        const std::vector<int>& masked);

std::vector<ReplicationOutput> run_monte_carlo(const ReplicationConfig& cfg,
                                               std::uint64_t master_seed,
                                               int replications, int threads = 1);

struct McRow {
  std::string name;
  double truth = 0.0;
  int n_used = 0;
  double bias = 0.0;
  double emp_var = 0.0;       // across replications, n-1 divisor
  double mean_est_var = 0.0;  // average reported sandwich variance
  double coverage_pct = 0.0;  // nominal-95% interval coverage
};

struct McSummary {
  int requested = 0;
  int failures = 0;
  std::vector<McRow> rows;
};

McSummary summarize_mc(const std::vector<ReplicationOutput>& outputs,
                       const std::map<std::string, double>& truth);

}  // namespace admeta
