#pragma once

#include <Eigen/Dense>

#include <array>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "admeta/ipd_fit.hpp"
#include "admeta/model.hpp"

namespace admeta {

enum class MomentKind { constant, linear, square, product };

struct MomentFn {
  MomentKind kind = MomentKind::constant;
  int a = -1;
  int b = -1;

  static MomentFn constant_term() { return {MomentKind::constant, -1, -1}; }
  static MomentFn linear(int a) { return {MomentKind::linear, a, -1}; }
  static MomentFn square(int a) { return {MomentKind::square, a, -1}; }
  static MomentFn product(int a, int b) { return {MomentKind::product, a, b}; }

  double eval(const Eigen::VectorXd& l) const;
  std::string label(const std::vector<std::string>& names) const;
  bool operator==(const MomentFn&) const = default;
};

// m(L, beta) = exp(beta' g(L)) with g the regressors (constant first).
// The moment functions p(L) are the balance targets; they default to the
// regressors (just-identified) but may be a longer list (over-identified).
struct WeightModelSpec {
  std::vector<MomentFn> regressors;
  std::vector<MomentFn> moments;

  static WeightModelSpec default_linear(int n_cov);
  bool just_identified() const { return moments.size() == regressors.size(); }
  int dim() const { return static_cast<int>(regressors.size()); }
  void validate(int n_cov) const;
};

struct ArmSummary {
  int n = 0;
  double y_mean = 0.0;
  Eigen::VectorXd l_mean;
  Eigen::VectorXd l_var;  // divide-by-n convention throughout the project
  std::map<std::pair<int, int>, double> cross;  // optional E(L_a L_b | x, j), a < b
};

struct SubgroupBlock {
  int covariate = 0;
  std::array<double, 2> fraction{{0.0, 0.0}};            // P(L1 = l | S=j)
  std::array<std::array<double, 2>, 2> y_mean{};         // [x][l1]
};

struct AdSummary {
  int study = 0;
  std::array<ArmSummary, 2> arms;
  std::array<double, 2> arm_prob{{0.5, 0.5}};  // P(X=x|S=j), from counts by default
  std::optional<SubgroupBlock> subgroup;
  std::vector<std::string> covariate_names;  // optional, for file-level validation

  int n() const { return arms[0].n + arms[1].n; }
  int n_cov() const { return static_cast<int>(arms[0].l_mean.size()); }
  void validate() const;
  // E(p_r(L) | x, S=j) from the arm block; throws missing_moment when the
  // needed statistic is absent.
  double arm_moment(int x, const MomentFn& fn) const;
  // combined-trial moment: arm-probability-weighted mixture of arm moments
  double combined_moment(const MomentFn& fn) const;
};

// AD summary computed from IPD rows (the masking step and the write path).
AdSummary summarize_to_ad(const IpdTrial& trial, bool include_cross = false,
                          std::optional<int> subgroup_covariate = {});

struct BalanceRow {
  std::string label;
  double target = 0.0;
  double achieved = 0.0;
};

struct WeightFit {
  int ad_study = 0;
  int ipd_study = 0;
  WeightModelSpec spec;
  Eigen::VectorXd beta;
  Eigen::VectorXd weights;  // m(L_i, beta), aligned with trial-k row order
  Eigen::VectorXd targets;  // Ê(p(L)|S=j) per moment fn
  Eigen::VectorXd achieved; // (1/n_j) Σ_{S=k} p(L_i) m(L_i, beta)
  double n_j = 0.0;
  double residual_norm = 0.0;  // standardized, over-identified case only
  bool overidentified = false;
  bool compat_warning = false;
  bool truncated = false;
  int iterations = 0;
  std::vector<std::string> labels;
};

WeightFit fit_weight_model(const IpdTrial& ipd_k, const AdSummary& ad_j,
                           const WeightModelSpec& wspec);
WeightFit fit_weight_model(const IpdTrial& ipd_k, const AdSummary& ad_j);

// Clamp weights above the given empirical quantile (ad-hoc option, off by
// default in every pipeline; breaks the exact-balance identity).  The trial
// supplies the moment values so the achieved column stays truthful.
void truncate_weights(WeightFit& wf, double quantile, const IpdTrial& ipd_k);

struct WeightDiagnostics {
  double ess = 0.0;
  double max_min_ratio = 0.0;
  std::vector<BalanceRow> balance;
};

WeightDiagnostics weight_diagnostics(const WeightFit& wf);

// max_r |achieved_r - target_r| / max(1, |target_r|)
double balance_gap(const WeightFit& wf);

}  // namespace admeta
