#include "admeta/model.hpp"

#include <cmath>
#include <sstream>

namespace admeta {

double expit(double eta) {
  if (!std::isfinite(eta)) fail(ErrorCategory::domain, "expit: non-finite input");
  if (eta >= 0.0) {
    return 1.0 / (1.0 + std::exp(-eta));
  }
  const double e = std::exp(eta);
  return e / (1.0 + e);
}

double SharedTerm::eval(double x, const Eigen::VectorXd& l) const {
  double v = with_treatment ? x : 1.0;
  for (int c : covariates) v *= l(c);
  return v;
}

std::string SharedTerm::label(const std::vector<std::string>& names) const {
  std::ostringstream os;
  bool first = true;
  if (with_treatment) {
    os << "x";
    first = false;
  }
  for (int c : covariates) {
    if (!first) os << "*";
    os << (c >= 0 && c < static_cast<int>(names.size()) ? names[c]
                                                        : "l" + std::to_string(c));
    first = false;
  }
  return os.str();
}

Eigen::VectorXd OutcomeModelSpec::shared_regressors(double x,
                                                    const Eigen::VectorXd& l) const {
  if (l.size() != n_covariates())
    fail(ErrorCategory::dimension, "shared_regressors: covariate vector has " +
                                       std::to_string(l.size()) + " entries, spec declares " +
                                       std::to_string(n_covariates()));
  Eigen::VectorXd f(n_shared());
  for (int r = 0; r < n_shared(); ++r) f(r) = shared_terms[r].eval(x, l);
  return f;
}

void OutcomeModelSpec::validate() const {
  for (const SharedTerm& t : shared_terms) {
    if (t.covariates.empty())
      fail(ErrorCategory::schema,
           "shared term without covariates collides with the trial-specific block");
    const int degree = static_cast<int>(t.covariates.size()) + (t.with_treatment ? 1 : 0);
    if (degree > 2)
      fail(ErrorCategory::schema, "shared term exceeds degree-2 product algebra");
    for (int c : t.covariates)
      if (c < 0 || c >= n_covariates())
        fail(ErrorCategory::schema,
             "shared term references undeclared covariate index " + std::to_string(c));
  }
  if (subgroup_covariate &&
      (*subgroup_covariate < 0 || *subgroup_covariate >= n_covariates()))
    fail(ErrorCategory::schema, "subgroup covariate index out of range");
}

double linear_predictor(const OutcomeModelSpec& spec, const TrialParams& tp,
                        const SharedParams& sp, double x,
                        const Eigen::VectorXd& l) {
  if (sp.phi_c.size() != spec.n_shared())
    fail(ErrorCategory::dimension, "linear_predictor: phi_c has " +
                                       std::to_string(sp.phi_c.size()) + " entries, spec declares " +
                                       std::to_string(spec.n_shared()) + " shared terms");
  if (l.size() != spec.n_covariates())
    fail(ErrorCategory::dimension, "linear_predictor: covariate dimension mismatch");
  double eta = tp.phi0 + tp.phi1 * x;
  if (spec.extended()) {
    if (!tp.extra)
      fail(ErrorCategory::dimension,
           "linear_predictor: subgroup spec requires the extra trial coefficients");
    const double l1 = l(*spec.subgroup_covariate);
    eta += (*tp.extra)[0] * l1 + (*tp.extra)[1] * x * l1;
  }
  for (int r = 0; r < spec.n_shared(); ++r)
    eta += sp.phi_c(r) * spec.shared_terms[r].eval(x, l);
  return eta;
}

double mean_response(const OutcomeModelSpec& spec, const TrialParams& tp,
                     const SharedParams& sp, double x,
                     const Eigen::VectorXd& l) {
  return expit(linear_predictor(spec, tp, sp, x, l));
}

Eigen::VectorXd score_contributions(const OutcomeModelSpec& spec,
                                    const std::vector<int>& studies,
                                    const std::vector<TrialParams>& tp_all,
                                    const SharedParams& sp,
                                    const ObservationRow& obs) {
  if (studies.size() != tp_all.size())
    fail(ErrorCategory::dimension, "score_contributions: study/parameter count mismatch");
  int idx = -1;
  for (std::size_t k = 0; k < studies.size(); ++k)
    if (studies[k] == obs.study) idx = static_cast<int>(k);
  if (idx < 0)
    fail(ErrorCategory::schema,
         "score_contributions: unknown study id " + std::to_string(obs.study));

  const int tb = spec.trial_block_dim();
  Eigen::VectorXd g = Eigen::VectorXd::Zero(tb * static_cast<int>(studies.size()) +
                                            spec.n_shared());
  const double q = mean_response(spec, tp_all[idx], sp, obs.x, obs.l);
  const double r = static_cast<double>(obs.y) - q;
  const int off = tb * idx;
  g(off) = r;
  g(off + 1) = obs.x * r;
  if (spec.extended()) {
    const double l1 = obs.l(*spec.subgroup_covariate);
    g(off + 2) = l1 * r;
    g(off + 3) = obs.x * l1 * r;
  }
  g.tail(spec.n_shared()) = spec.shared_regressors(obs.x, obs.l) * r;
  return g;
}

}  // namespace admeta
