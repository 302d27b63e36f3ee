#pragma once

#include <Eigen/Dense>

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "admeta/errors.hpp"

namespace admeta {

// Stable two-branch logistic link; throws on non-finite input, never clips.
double expit(double eta);

// One multiplicative term of the shared predictor v(x, l, phi_c): an optional
// treatment factor times one or two covariates (degree <= 2 in total).
struct SharedTerm {
  bool with_treatment = false;
  std::vector<int> covariates;

  double eval(double x, const Eigen::VectorXd& l) const;
  std::string label(const std::vector<std::string>& names) const;
};

// Logistic outcome model: trial-specific {intercept, treatment} block plus
// shared coefficients on the declared product terms. subgroup_covariate
// switches on the heterogeneous-subgroup variant, whose trial block gains a
// main effect and a treatment interaction for that binary covariate.
struct OutcomeModelSpec {
  std::vector<std::string> covariate_names;
  std::vector<SharedTerm> shared_terms;
  std::optional<int> subgroup_covariate;

  int n_covariates() const { return static_cast<int>(covariate_names.size()); }
  int n_shared() const { return static_cast<int>(shared_terms.size()); }
  bool extended() const { return subgroup_covariate.has_value(); }
  int trial_block_dim() const { return extended() ? 4 : 2; }

  // f(x, l): regressor vector of the shared terms.
  Eigen::VectorXd shared_regressors(double x, const Eigen::VectorXd& l) const;
  void validate() const;
};

struct TrialParams {
  double phi0 = 0.0;
  double phi1 = 0.0;
  std::optional<std::array<double, 2>> extra;  // subgroup main, interaction
};

struct SharedParams {
  Eigen::VectorXd phi_c;
};

struct RandomEffectSummary {
  Eigen::Vector2d mean = Eigen::Vector2d::Zero();
  Eigen::Matrix2d cov = Eigen::Matrix2d::Zero();
  double phi1_bar = 0.0;
  bool cov_identified = false;  // false when fewer than two trials were pooled
};

struct ObservationRow {
  int study = 0;
  int x = 0;
  int y = 0;
  Eigen::VectorXd l;
};

double linear_predictor(const OutcomeModelSpec& spec, const TrialParams& tp,
                        const SharedParams& sp, double x,
                        const Eigen::VectorXd& l);

double mean_response(const OutcomeModelSpec& spec, const TrialParams& tp,
                     const SharedParams& sp, double x,
                     const Eigen::VectorXd& l);

// Per-observation value of the stacked score system: one (1, X) block per
// listed IPD study plus the shared f(X, L) block, all times the residual.
// Blocks of studies other than obs.study are structurally zero.
Eigen::VectorXd score_contributions(const OutcomeModelSpec& spec,
                                    const std::vector<int>& studies,
                                    const std::vector<TrialParams>& tp_all,
                                    const SharedParams& sp,
                                    const ObservationRow& obs);

}  // namespace admeta
