#pragma once

#include <Eigen/Dense>

#include <optional>
#include <vector>

#include "admeta/model.hpp"

namespace admeta {

struct IpdTrial {
  int study = 0;
  std::vector<ObservationRow> rows;
  double arm_probability = 0.5;  // P(X=1|S=k)
  std::vector<std::string> covariate_names;  // filled by ingestion, optional

  // Validates rows and fills arm_probability with the empirical arm fraction
  // unless a design value is supplied.
  static IpdTrial from_rows(int study, std::vector<ObservationRow> rows,
                            std::optional<double> design_arm_probability = {});

  int n() const { return static_cast<int>(rows.size()); }
  double arm_prob(int x) const { return x ? arm_probability : 1.0 - arm_probability; }
};

struct LogisticOptions {
  double tol = 1e-8;  // max-norm of the score at the solution
  int max_iter = 100;
  int max_halvings = 30;
  double separation_prob = 1e-10;
  double separation_norm = 50.0;
};

struct LogisticFit {
  Eigen::VectorXd beta;
  Eigen::MatrixXd cov;  // inverse observed information
  int iterations = 0;
  double score_max = 0.0;
  double loglik = 0.0;
};

// Damped Newton (IRLS) logistic maximum likelihood from a zero start.
LogisticFit logistic_mle(const Eigen::MatrixXd& design, const Eigen::VectorXd& y,
                         const LogisticOptions& opt = {});

struct TrialFit {
  TrialParams tp;
  SharedParams sp;
  Eigen::MatrixXd cov;  // over (trial block, shared block)
  int iterations = 0;
  double score_max = 0.0;
};

// Per-trial design: [trial block | shared regressors f(X, L)].
Eigen::MatrixXd trial_design(const IpdTrial& trial, const OutcomeModelSpec& spec);
Eigen::VectorXd trial_outcomes(const IpdTrial& trial);

TrialFit fit_trial_mle(const IpdTrial& trial, const OutcomeModelSpec& spec,
                       const LogisticOptions& opt = {});

enum class SharedFit { per_trial, stacked };

struct IpdFit {
  SharedFit strategy = SharedFit::per_trial;
  std::vector<int> studies;
  std::vector<TrialParams> trial_params;
  // per_trial: one shared estimate and covariance per trial;
  // stacked: shared.front() common to all trials, cov.front() over the full
  // stacked parameter (trial blocks in order, then the shared block).
  std::vector<SharedParams> shared;
  std::vector<Eigen::MatrixXd> cov;
  int iterations = 0;
  double score_max = 0.0;

  const SharedParams& shared_for(int trial_index) const {
    return strategy == SharedFit::per_trial ? shared[trial_index] : shared.front();
  }
};

IpdFit fit_per_trial(const std::vector<IpdTrial>& trials, const OutcomeModelSpec& spec,
                     const LogisticOptions& opt = {});

// Stacked score system: trial-specific blocks plus a common shared block,
// solved as one Newton system (equivalently one logistic regression on the
// expanded design).
IpdFit fit_stacked(const std::vector<IpdTrial>& trials, const OutcomeModelSpec& spec,
                   const LogisticOptions& opt = {});

IpdFit fit_ipd(const std::vector<IpdTrial>& trials, const OutcomeModelSpec& spec,
               SharedFit strategy, const LogisticOptions& opt = {});

}  // namespace admeta
