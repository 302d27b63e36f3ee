#include "admeta/weight_fit.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "admeta/errors.hpp"

namespace admeta {

double MomentFn::eval(const Eigen::VectorXd& l) const {
  switch (kind) {
    case MomentKind::constant:
      return 1.0;
    case MomentKind::linear:
      return l(a);
    case MomentKind::square:
      return l(a) * l(a);
    case MomentKind::product:
      return l(a) * l(b);
  }
  fail(ErrorCategory::internal, "unhandled moment kind");
}

std::string MomentFn::label(const std::vector<std::string>& names) const {
  auto name = [&](int i) {
    return i >= 0 && i < static_cast<int>(names.size()) ? names[i]
                                                        : "l" + std::to_string(i);
  };
  switch (kind) {
    case MomentKind::constant:
      return "1";
    case MomentKind::linear:
      return name(a);
    case MomentKind::square:
      return name(a) + "^2";
    case MomentKind::product:
      return name(a) + "*" + name(b);
  }
  fail(ErrorCategory::internal, "unhandled moment kind");
}

WeightModelSpec WeightModelSpec::default_linear(int n_cov) {
  WeightModelSpec spec;
  spec.regressors.push_back(MomentFn::constant_term());
  for (int c = 0; c < n_cov; ++c) spec.regressors.push_back(MomentFn::linear(c));
  spec.moments = spec.regressors;
  return spec;
}

void WeightModelSpec::validate(int n_cov) const {
  if (regressors.empty() || regressors.front().kind != MomentKind::constant)
    fail(ErrorCategory::schema, "weight model needs a leading constant regressor");
  if (moments.size() < regressors.size())
    fail(ErrorCategory::schema, "fewer moment targets than weight regressors");
  auto check = [&](const MomentFn& fn) {
    int need = fn.kind == MomentKind::constant ? -1 : fn.a;
    if (fn.kind != MomentKind::constant && (need < 0 || need >= n_cov))
      fail(ErrorCategory::dimension, "moment function covariate index out of range");
    if (fn.kind == MomentKind::product && (fn.b < 0 || fn.b >= n_cov || fn.b == fn.a))
      fail(ErrorCategory::dimension, "moment product indices invalid");
  };
  for (const auto& fn : regressors) check(fn);
  for (const auto& fn : moments) check(fn);
  int n_const = 0;
  for (const auto& fn : regressors) n_const += fn.kind == MomentKind::constant;
  if (n_const != 1)
    fail(ErrorCategory::schema, "weight model must have exactly one constant regressor");
}

void AdSummary::validate() const {
  if (arms[0].n < 1 || arms[1].n < 1)
    fail(ErrorCategory::schema, "aggregate trial " + std::to_string(study) +
                                    " must report both arms");
  if (arms[0].l_mean.size() != arms[1].l_mean.size())
    fail(ErrorCategory::dimension, "aggregate arm covariate blocks differ in size");
  for (int x = 0; x < 2; ++x) {
    const ArmSummary& arm = arms[x];
    if (arm.l_var.size() != arm.l_mean.size())
      fail(ErrorCategory::dimension, "aggregate means/variances differ in size");
    if (arm.y_mean < 0.0 || arm.y_mean > 1.0 || !std::isfinite(arm.y_mean))
      fail(ErrorCategory::domain, "aggregate outcome mean outside [0,1]");
    for (int c = 0; c < arm.l_var.size(); ++c) {
      if (!std::isfinite(arm.l_mean(c)))
        fail(ErrorCategory::domain, "aggregate covariate mean not finite");
      if (!(arm.l_var(c) >= 0.0))
        fail(ErrorCategory::domain, "aggregate covariate variance negative");
    }
  }
  if (!(arm_prob[0] > 0.0) || !(arm_prob[1] > 0.0) ||
      std::abs(arm_prob[0] + arm_prob[1] - 1.0) > 1e-8)
    fail(ErrorCategory::domain, "aggregate arm probabilities must be positive and sum to 1");
  if (subgroup) {
    if (subgroup->covariate < 0 || subgroup->covariate >= n_cov())
      fail(ErrorCategory::dimension, "subgroup covariate index out of range");
    if (std::abs(subgroup->fraction[0] + subgroup->fraction[1] - 1.0) > 1e-8 ||
        !(subgroup->fraction[0] >= 0.0) || !(subgroup->fraction[1] >= 0.0))
      fail(ErrorCategory::domain, "subgroup fractions must sum to 1");
    for (int x = 0; x < 2; ++x)
      for (int l = 0; l < 2; ++l) {
        double y = subgroup->y_mean[x][l];
        if (!(y >= 0.0) || !(y <= 1.0))
          fail(ErrorCategory::domain, "subgroup outcome mean outside [0,1]");
      }
  }
}

double AdSummary::arm_moment(int x, const MomentFn& fn) const {
  const ArmSummary& arm = arms[x];
  switch (fn.kind) {
    case MomentKind::constant:
      return 1.0;
    case MomentKind::linear:
      return arm.l_mean(fn.a);
    case MomentKind::square:
      return arm.l_var(fn.a) + arm.l_mean(fn.a) * arm.l_mean(fn.a);
    case MomentKind::product: {
      auto key = std::minmax(fn.a, fn.b);
      auto it = arm.cross.find({key.first, key.second});
      if (it == arm.cross.end())
        fail(ErrorCategory::missing_moment,
             "aggregate trial " + std::to_string(study) +
                 " lacks the cross moment for covariates " + std::to_string(fn.a) +
                 "," + std::to_string(fn.b));
      return it->second;
    }
  }
  fail(ErrorCategory::internal, "unhandled moment kind");
}

double AdSummary::combined_moment(const MomentFn& fn) const {
  return arm_prob[0] * arm_moment(0, fn) + arm_prob[1] * arm_moment(1, fn);
}

AdSummary summarize_to_ad(const IpdTrial& trial, bool include_cross,
                          std::optional<int> subgroup_covariate) {
  if (trial.rows.empty()) fail(ErrorCategory::schema, "cannot summarize an empty trial");
  const int d = static_cast<int>(trial.rows.front().l.size());
  AdSummary ad;
  ad.study = trial.study;
  ad.covariate_names = trial.covariate_names;
  ad.arm_prob = {trial.arm_prob(0), trial.arm_prob(1)};
  for (int x = 0; x < 2; ++x) {
    ArmSummary& arm = ad.arms[x];
    arm.l_mean = Eigen::VectorXd::Zero(d);
    arm.l_var = Eigen::VectorXd::Zero(d);
    Eigen::MatrixXd second = Eigen::MatrixXd::Zero(d, d);
    for (const ObservationRow& r : trial.rows) {
      if (r.x != x) continue;
      ++arm.n;
      arm.y_mean += r.y;
      arm.l_mean += r.l;
      second.selfadjointView<Eigen::Lower>().rankUpdate(r.l);
    }
    if (arm.n == 0) fail(ErrorCategory::schema, "trial arm has no rows");
    arm.y_mean /= arm.n;
    arm.l_mean /= arm.n;
    second = Eigen::MatrixXd(second.selfadjointView<Eigen::Lower>());
    second /= arm.n;
    arm.l_var = second.diagonal() - arm.l_mean.cwiseProduct(arm.l_mean);
    arm.l_var = arm.l_var.cwiseMax(0.0);
    if (include_cross)
      for (int a = 0; a < d; ++a)
        for (int b = a + 1; b < d; ++b) arm.cross[{a, b}] = second(a, b);
  }
  if (subgroup_covariate) {
    const int c = *subgroup_covariate;
    if (c < 0 || c >= d)
      fail(ErrorCategory::dimension, "subgroup covariate index out of range");
    SubgroupBlock sub;
    sub.covariate = c;
    std::array<std::array<double, 2>, 2> ysum{};
    std::array<std::array<int, 2>, 2> count{};
    int n1 = 0;
    for (const ObservationRow& r : trial.rows) {
      double lv = r.l(c);
      if (lv != 0.0 && lv != 1.0)
        fail(ErrorCategory::domain, "subgroup covariate must be binary");
      int l = static_cast<int>(lv);
      n1 += l;
      ysum[r.x][l] += r.y;
      ++count[r.x][l];
    }
    sub.fraction[1] = static_cast<double>(n1) / trial.n();
    sub.fraction[0] = 1.0 - sub.fraction[1];
    for (int x = 0; x < 2; ++x)
      for (int l = 0; l < 2; ++l) {
        if (count[x][l] == 0)
          fail(ErrorCategory::size, "empty treatment-by-subgroup cell in trial " +
                                        std::to_string(trial.study));
        sub.y_mean[x][l] = ysum[x][l] / count[x][l];
      }
    ad.subgroup = sub;
  }
  ad.validate();
  return ad;
}

namespace {

constexpr int kMaxIter = 200;
constexpr int kMaxHalvings = 40;
constexpr double kOverlapNorm = 50.0;
constexpr double kTol = 1e-11;

struct MomentData {
  Eigen::MatrixXd g;  // n x dim regressor values
  Eigen::MatrixXd p;  // n x n_moments moment values
};

MomentData evaluate_moments(const IpdTrial& trial, const WeightModelSpec& wspec) {
  const int n = trial.n();
  MomentData md;
  md.g.resize(n, static_cast<int>(wspec.regressors.size()));
  md.p.resize(n, static_cast<int>(wspec.moments.size()));
  for (int i = 0; i < n; ++i) {
    const Eigen::VectorXd& l = trial.rows[i].l;
    for (int r = 0; r < md.g.cols(); ++r) md.g(i, r) = wspec.regressors[r].eval(l);
    for (int r = 0; r < md.p.cols(); ++r) md.p(i, r) = wspec.moments[r].eval(l);
  }
  return md;
}

void check_overlap(const Eigen::VectorXd& beta, int ad_study, int ipd_study) {
  if (beta.norm() > kOverlapNorm || !beta.allFinite())
    fail(ErrorCategory::overlap,
         "weight model for aggregate trial " + std::to_string(ad_study) +
             " against trial " + std::to_string(ipd_study) +
             " diverged; covariate overlap looks insufficient");
}

}  // namespace

WeightFit fit_weight_model(const IpdTrial& ipd_k, const AdSummary& ad_j,
                           const WeightModelSpec& wspec) {
  ad_j.validate();
  const int d = static_cast<int>(ipd_k.rows.front().l.size());
  if (ad_j.n_cov() != d)
    fail(ErrorCategory::dimension, "aggregate and IPD covariate dimensions differ");
  wspec.validate(d);

  const int n_mom = static_cast<int>(wspec.moments.size());
  const int dim = wspec.dim();
  const double n_j = ad_j.n();
  const MomentData md = evaluate_moments(ipd_k, wspec);

  WeightFit wf;
  wf.ad_study = ad_j.study;
  wf.ipd_study = ipd_k.study;
  wf.spec = wspec;
  wf.n_j = n_j;
  wf.overidentified = !wspec.just_identified();
  wf.targets.resize(n_mom);
  for (int r = 0; r < n_mom; ++r) wf.targets(r) = ad_j.combined_moment(wspec.moments[r]);
  for (const auto& fn : wspec.moments)
    wf.labels.push_back(fn.label(ad_j.covariate_names));

  // scale for the convergence test: the moment equations divided by n_j
  Eigen::VectorXd scale(n_mom);
  for (int r = 0; r < n_mom; ++r) scale(r) = std::max(1.0, std::abs(wf.targets(r)));

  Eigen::VectorXd beta = Eigen::VectorXd::Zero(dim);
  beta(0) = std::log(n_j / ipd_k.n());

  auto discrepancy = [&](const Eigen::VectorXd& b, Eigen::VectorXd& m_out) {
    m_out = (md.g * b).array().exp().matrix();
    Eigen::VectorXd h = md.p.transpose() * m_out / n_j - wf.targets;
    return h;
  };

  Eigen::VectorXd m;
  Eigen::VectorXd h = discrepancy(beta, m);

  if (!wf.overidentified) {
    // square system: damped Newton on the raw moment equations
    int iter = 0;
    for (iter = 1; iter <= kMaxIter; ++iter) {
      if ((h.cwiseQuotient(scale)).cwiseAbs().maxCoeff() <= kTol) break;
      Eigen::MatrixXd jac = md.p.transpose() * m.asDiagonal() * md.g / n_j;
      Eigen::PartialPivLU<Eigen::MatrixXd> lu(jac);
      Eigen::VectorXd step = lu.solve(-h);
      if (!step.allFinite())
        fail(ErrorCategory::singular, "weight model moment Jacobian is singular");
      double t = 1.0;
      double h0 = h.cwiseQuotient(scale).norm();
      bool improved = false;
      for (int half = 0; half < kMaxHalvings; ++half) {
        Eigen::VectorXd cand = beta + t * step;
        Eigen::VectorXd m_cand;
        Eigen::VectorXd h_cand = discrepancy(cand, m_cand);
        if (h_cand.allFinite() && h_cand.cwiseQuotient(scale).norm() < h0) {
          beta = cand;
          h = h_cand;
          m = m_cand;
          improved = true;
          break;
        }
        t *= 0.5;
      }
      if (!improved)
        fail(ErrorCategory::convergence,
             "weight model stalled for aggregate trial " + std::to_string(ad_j.study));
      check_overlap(beta, ad_j.study, ipd_k.study);
      if (iter == kMaxIter)
        fail(ErrorCategory::convergence,
             "weight model hit the iteration cap for aggregate trial " +
                 std::to_string(ad_j.study));
    }
    wf.iterations = iter - 1;
  } else {
    // standardized residuals: sd of each moment function over the IPD trial
    Eigen::VectorXd sd(n_mom);
    for (int r = 0; r < n_mom; ++r) {
      double mean = md.p.col(r).mean();
      double var = (md.p.col(r).array() - mean).square().mean();
      sd(r) = var > 1e-12 ? std::sqrt(var) : 1.0;
    }
    auto standardized = [&](const Eigen::VectorXd& hh) {
      return Eigen::VectorXd(hh.cwiseQuotient(sd));
    };
    Eigen::VectorXd z = standardized(h);
    int iter = 0;
    for (iter = 1; iter <= kMaxIter; ++iter) {
      Eigen::MatrixXd jz =
          sd.cwiseInverse().asDiagonal() * (md.p.transpose() * m.asDiagonal() * md.g) / n_j;
      Eigen::VectorXd grad = jz.transpose() * z;
      if (grad.norm() <= kTol) break;
      Eigen::MatrixXd normal = jz.transpose() * jz;
      normal.diagonal().array() += 1e-12 * (1.0 + normal.diagonal().maxCoeff());
      Eigen::VectorXd step = normal.ldlt().solve(-grad);
      if (!step.allFinite())
        fail(ErrorCategory::singular, "weight model normal equations are singular");
      double t = 1.0;
      double z0 = z.norm();
      bool improved = false;
      for (int half = 0; half < kMaxHalvings; ++half) {
        Eigen::VectorXd cand = beta + t * step;
        Eigen::VectorXd m_cand;
        Eigen::VectorXd z_cand = standardized(discrepancy(cand, m_cand));
        if (z_cand.allFinite() && z_cand.norm() < z0) {
          beta = cand;
          z = z_cand;
          m = m_cand;
          improved = true;
          break;
        }
        t *= 0.5;
      }
      if (!improved) break;  // local minimum of the residual norm
      check_overlap(beta, ad_j.study, ipd_k.study);
      if (iter == kMaxIter)
        fail(ErrorCategory::convergence,
             "weight model hit the iteration cap for aggregate trial " +
                 std::to_string(ad_j.study));
    }
    wf.iterations = iter - 1;
    wf.residual_norm = std::sqrt(static_cast<double>(ipd_k.n())) * z.norm();
    wf.compat_warning = wf.residual_norm > 4.0;
  }

  check_overlap(beta, ad_j.study, ipd_k.study);
  wf.beta = beta;
  wf.weights = m;
  wf.achieved = md.p.transpose() * m / n_j;
  return wf;
}

WeightFit fit_weight_model(const IpdTrial& ipd_k, const AdSummary& ad_j) {
  return fit_weight_model(ipd_k, ad_j,
                          WeightModelSpec::default_linear(ad_j.n_cov()));
}

void truncate_weights(WeightFit& wf, double quantile, const IpdTrial& ipd_k) {
  if (!(quantile > 0.0) || !(quantile < 1.0))
    fail(ErrorCategory::domain, "truncation quantile must lie in (0,1)");
  if (wf.weights.size() != ipd_k.n())
    fail(ErrorCategory::dimension, "weights do not align with the trial rows");
  std::vector<double> sorted(wf.weights.data(), wf.weights.data() + wf.weights.size());
  std::sort(sorted.begin(), sorted.end());
  const double pos = quantile * (sorted.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(pos);
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double cut = sorted[lo] + (pos - lo) * (sorted[hi] - sorted[lo]);
  wf.weights = wf.weights.cwiseMin(cut);
  wf.truncated = true;
  for (int r = 0; r < wf.achieved.size(); ++r) {
    double sum = 0.0;
    for (int i = 0; i < ipd_k.n(); ++i)
      sum += wf.spec.moments[r].eval(ipd_k.rows[i].l) * wf.weights(i);
    wf.achieved(r) = sum / wf.n_j;
  }
}

double balance_gap(const WeightFit& wf) {
  double gap = 0.0;
  for (int r = 0; r < wf.targets.size(); ++r)
    gap = std::max(gap, std::abs(wf.achieved(r) - wf.targets(r)) /
                            std::max(1.0, std::abs(wf.targets(r))));
  return gap;
}

WeightDiagnostics weight_diagnostics(const WeightFit& wf) {
  WeightDiagnostics diag;
  const double sum = wf.weights.sum();
  const double sumsq = wf.weights.squaredNorm();
  diag.ess = sumsq > 0.0 ? sum * sum / sumsq : 0.0;
  const double wmin = wf.weights.minCoeff();
  diag.max_min_ratio = wmin > 0.0 ? wf.weights.maxCoeff() / wmin
                                  : std::numeric_limits<double>::infinity();
  for (int r = 0; r < wf.targets.size(); ++r)
    diag.balance.push_back({wf.labels[r], wf.targets(r), wf.achieved(r)});
  return diag;
}

}  // namespace admeta
