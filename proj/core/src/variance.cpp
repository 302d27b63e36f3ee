#include "admeta/variance.hpp"

#include <cmath>
#include <random>

#include "admeta/errors.hpp"
#include "admeta/rng.hpp"

namespace admeta {

namespace {

void check_alignment(const std::vector<IpdTrial>& ipd,
                     const std::vector<AdSummary>& ad, const IpdFit& fit,
                     std::size_t inner, std::size_t outer) {
  if (fit.studies.size() != ipd.size())
    fail(ErrorCategory::dimension, "IPD fit does not cover the trial list");
  for (std::size_t k = 0; k < ipd.size(); ++k)
    if (fit.studies[k] != ipd[k].study)
      fail(ErrorCategory::internal, "IPD fit order does not match the trial list");
  if (outer != ad.size())
    fail(ErrorCategory::dimension, "per-pair inputs do not cover the AD trials");
  if (inner != ipd.size())
    fail(ErrorCategory::dimension, "per-pair inputs do not cover the IPD trials");
}

}  // namespace

std::vector<AdSecondMoments> ad_second_moments(
    const OutcomeModelSpec& spec, const std::vector<IpdTrial>& ipd,
    const std::vector<AdSummary>& ad, const IpdFit& fit,
    const std::vector<std::vector<WeightFit>>& wfits,
    const std::vector<std::vector<TrialParams>>& star_params,
    const std::vector<double>& pool_w) {
  check_alignment(ipd, ad, fit, wfits.empty() ? ipd.size() : wfits.front().size(),
                  wfits.size());
  if (star_params.size() != ad.size() || pool_w.size() != ipd.size())
    fail(ErrorCategory::dimension, "second-moment inputs misaligned");
  const int d = spec.n_covariates();

  std::vector<AdSecondMoments> out;
  for (std::size_t ji = 0; ji < ad.size(); ++ji) {
    const AdSummary& adj = ad[ji];
    const double n_j = adj.n();
    AdSecondMoments sm;
    sm.study = adj.study;
    sm.ll = Eigen::MatrixXd::Zero(d, d);
    sm.ly = {Eigen::VectorXd::Zero(d), Eigen::VectorXd::Zero(d)};
    for (std::size_t ki = 0; ki < ipd.size(); ++ki) {
      const IpdTrial& trial = ipd[ki];
      const WeightFit& wf = wfits[ji][ki];
      if (wf.weights.size() != trial.n())
        fail(ErrorCategory::dimension, "weight fit does not match its IPD trial");
      const TrialParams& star = star_params[ji][ki];
      const SharedParams& sp = fit.shared_for(static_cast<int>(ki));
      const double wk = pool_w[ki];
      if (wk == 0.0) continue;
      for (int i = 0; i < trial.n(); ++i) {
        const ObservationRow& row = trial.rows[i];
        const double m = wf.weights(i);
        sm.ll.selfadjointView<Eigen::Lower>().rankUpdate(row.l, wk * m / n_j);
        const double q = mean_response(spec, star, sp, row.x, row.l);
        sm.ly[row.x] += (wk * m * q / (n_j * trial.arm_prob(row.x))) * row.l;
      }
    }
    sm.ll = Eigen::MatrixXd(sm.ll.selfadjointView<Eigen::Lower>());
    Eigen::VectorXd mean_l =
        adj.arm_prob[0] * adj.arms[0].l_mean + adj.arm_prob[1] * adj.arms[1].l_mean;
    for (int t = 0; t < d; ++t)
      if (sm.ll(t, t) < mean_l(t) * mean_l(t) - 1e-12) sm.jensen_warning = true;
    out.push_back(std::move(sm));
  }
  return out;
}

std::vector<AdSecondMoments> ad_second_moments_joint(
    const OutcomeModelSpec& spec, const std::vector<IpdTrial>& ipd,
    const std::vector<AdSummary>& ad, const IpdFit& fit,
    const std::vector<std::vector<std::array<JointWeightFit, 2>>>& jwfits,
    const std::vector<std::vector<TrialParams>>& star_params,
    const std::vector<double>& pool_w) {
  check_alignment(ipd, ad, fit,
                  jwfits.empty() ? ipd.size() : jwfits.front().size(), jwfits.size());
  if (star_params.size() != ad.size() || pool_w.size() != ipd.size())
    fail(ErrorCategory::dimension, "second-moment inputs misaligned");
  const int d = spec.n_covariates();

  std::vector<AdSecondMoments> out;
  for (std::size_t ji = 0; ji < ad.size(); ++ji) {
    const AdSummary& adj = ad[ji];
    const double n_j = adj.n();
    AdSecondMoments sm;
    sm.study = adj.study;
    sm.ll = Eigen::MatrixXd::Zero(d, d);
    sm.ly = {Eigen::VectorXd::Zero(d), Eigen::VectorXd::Zero(d)};
    for (std::size_t ki = 0; ki < ipd.size(); ++ki) {
      const IpdTrial& trial = ipd[ki];
      const TrialParams& star = star_params[ji][ki];
      const SharedParams& sp = fit.shared_for(static_cast<int>(ki));
      const double wk = pool_w[ki];
      if (wk == 0.0) continue;
      for (int i = 0; i < trial.n(); ++i) {
        const ObservationRow& row = trial.rows[i];
        const double e = jwfits[ji][ki][row.x].weights(i);
        sm.ll.selfadjointView<Eigen::Lower>().rankUpdate(row.l, wk * e / n_j);
        const double q = mean_response(spec, star, sp, row.x, row.l);
        sm.ly[row.x] += (wk * e * q / (n_j * adj.arm_prob[row.x])) * row.l;
      }
    }
    sm.ll = Eigen::MatrixXd(sm.ll.selfadjointView<Eigen::Lower>());
    Eigen::VectorXd mean_l =
        adj.arm_prob[0] * adj.arms[0].l_mean + adj.arm_prob[1] * adj.arms[1].l_mean;
    for (int t = 0; t < d; ++t)
      if (sm.ll(t, t) < mean_l(t) * mean_l(t) - 1e-12) sm.jensen_warning = true;
    out.push_back(std::move(sm));
  }
  return out;
}

Eigen::MatrixXd match_moments_sample(int n, const Eigen::VectorXd& mean,
                                     const Eigen::MatrixXd& cov,
                                     std::uint64_t seed) {
  const int dim = static_cast<int>(mean.size());
  if (cov.rows() != dim || cov.cols() != dim)
    fail(ErrorCategory::dimension, "mean and covariance dimensions differ");
  if (n <= dim)
    fail(ErrorCategory::size,
         "cannot match a rank-" + std::to_string(dim) + " covariance with " +
             std::to_string(n) + " rows");

  std::mt19937_64 engine(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd g(n, dim);
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < dim; ++c) g(i, c) = normal(engine);
  const Eigen::RowVectorXd col_mean = g.colwise().mean();
  g.rowwise() -= col_mean;

  Eigen::MatrixXd emp = g.transpose() * g / n;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es_emp(emp);
  if (es_emp.eigenvalues().minCoeff() <= 0.0)
    fail(ErrorCategory::internal, "degenerate normal draw in moment matching");
  Eigen::MatrixXd whiten = es_emp.eigenvectors() *
                           es_emp.eigenvalues().cwiseSqrt().cwiseInverse().asDiagonal() *
                           es_emp.eigenvectors().transpose();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es_tgt(cov);
  Eigen::VectorXd ev = es_tgt.eigenvalues().cwiseMax(0.0);
  Eigen::MatrixXd recolor = es_tgt.eigenvectors() * ev.cwiseSqrt().asDiagonal() *
                            es_tgt.eigenvectors().transpose();
  Eigen::MatrixXd out = g * whiten * recolor;
  out.rowwise() += mean.transpose();
  return out;
}

PseudoTrial make_pseudo_trial(const AdSummary& ad_j, const AdSecondMoments& sm,
                              std::uint64_t seed, const PseudoOptions& opt) {
  ad_j.validate();
  if (sm.study != ad_j.study)
    fail(ErrorCategory::internal, "second moments belong to a different trial");
  const int d = ad_j.n_cov();
  if (sm.ll.rows() != d)
    fail(ErrorCategory::dimension, "second-moment block has the wrong size");
  PseudoTrial pt;
  pt.study = ad_j.study;

  for (int x = 0; x < 2; ++x) {
    const ArmSummary& arm = ad_j.arms[x];
    Eigen::VectorXd mu(d + 1);
    mu.head(d) = arm.l_mean;
    mu(d) = arm.y_mean;

    // second-moment target: diagonal from the reported per-arm variances,
    // off-diagonal covariate entries from the reported cross moments when
    // present, otherwise the trial-level weighted recovery
    Eigen::MatrixXd second(d + 1, d + 1);
    second.topLeftCorner(d, d) = sm.ll;
    for (int a = 0; a < d; ++a)
      second(a, a) = arm.l_var(a) + arm.l_mean(a) * arm.l_mean(a);
    for (const auto& [key, value] : arm.cross) {
      second(key.first, key.second) = value;
      second(key.second, key.first) = value;
    }
    Eigen::VectorXd ly = sm.ly[x];
    if (opt.subgroup_ly_covariate) {
      if (!ad_j.subgroup)
        fail(ErrorCategory::missing_moment, "subgroup override without a subgroup block");
      const int sc = *opt.subgroup_ly_covariate;
      ly(sc) = ad_j.subgroup->y_mean[x][1] * arm.l_mean(sc);
    }
    second.topRightCorner(d, 1) = ly;
    second.bottomLeftCorner(1, d) = ly.transpose();
    second(d, d) = arm.y_mean;  // binary outcome in the source data

    Eigen::MatrixXd cov = second - mu * mu.transpose();
    cov = 0.5 * (cov + cov.transpose()).eval();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
    const double top = std::max(es.eigenvalues().maxCoeff(), 0.0);
    if (es.eigenvalues().minCoeff() < -1e-8 * std::max(1.0, top))
      fail(ErrorCategory::incompatible,
           "recovered covariance for aggregate trial " + std::to_string(ad_j.study) +
               " arm " + std::to_string(x) + " is not positive semidefinite");
    Eigen::VectorXd ev = es.eigenvalues().cwiseMax(1e-10);
    cov = es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();

    pt.t[x] = match_moments_sample(arm.n, mu, cov, derive_seed(seed, x));
  }
  return pt;
}

namespace {

template <typename PerPair>
void check_pair_grid(const ParamLayout& lay,
                     const std::vector<std::vector<PerPair>>& grid) {
  if (static_cast<int>(grid.size()) != lay.n_ad())
    fail(ErrorCategory::dimension, "per-pair grid does not cover the AD trials");
  for (const auto& inner : grid)
    if (static_cast<int>(inner.size()) != lay.n_ipd())
      fail(ErrorCategory::dimension, "per-pair grid does not cover the IPD trials");
}

void check_state(const ParamLayout& lay, const IpdFit& fit) {
  if (static_cast<int>(fit.studies.size()) != lay.n_ipd())
    fail(ErrorCategory::dimension, "layout does not match the IPD fit");
  for (int k = 0; k < lay.n_ipd(); ++k)
    if (fit.studies[k] != lay.ipd_studies[k])
      fail(ErrorCategory::internal, "layout study order differs from the fit");
  if ((fit.strategy == SharedFit::per_trial) !=
      (lay.strategy == SharedFit::per_trial))
    fail(ErrorCategory::internal, "layout strategy differs from the fit");
}

// AD outcome means the phi* equations center on, ordered like the star
// components.  They are the exact roots of the pseudo-row equations: the
// pseudo sample matches the arm mean of Y and, in the subgroup case, the
// arm-wise E(L1 Y | x) exactly, so the roots are the arm or cell means.
Eigen::VectorXd target_means(const AdSummary& adj, int sc) {
  if (sc < 0) {
    Eigen::VectorXd c(2);
    c(0) = adj.arms[1].y_mean;
    c(1) = adj.arms[0].y_mean;
    return c;
  }
  return subgroup_cell_means(adj, sc);
}

void check_ad(const ParamLayout& lay, const std::vector<AdSummary>& ad) {
  if (static_cast<int>(ad.size()) != lay.n_ad())
    fail(ErrorCategory::dimension, "AD summary count differs from the layout");
  for (int j = 0; j < lay.n_ad(); ++j)
    if (ad[j].study != lay.ad_studies[j])
      fail(ErrorCategory::internal, "AD summary order differs from the layout");
}

void fill_phi(const ParamLayout& lay, const IpdFit& fit, Eigen::VectorXd& psi) {
  for (int k = 0; k < lay.n_ipd(); ++k) {
    const TrialParams& tp = fit.trial_params[k];
    const int off = lay.phi_offset(k);
    psi(off) = tp.phi0;
    psi(off + 1) = tp.phi1;
    if (lay.trial_block == 4) {
      if (!tp.extra)
        fail(ErrorCategory::internal, "extended layout without subgroup estimates");
      psi(off + 2) = (*tp.extra)[0];
      psi(off + 3) = (*tp.extra)[1];
    }
    if (lay.strategy == SharedFit::per_trial)
      psi.segment(lay.shared_offset(k), lay.n_shared) = fit.shared[k].phi_c;
  }
  if (lay.strategy == SharedFit::stacked)
    psi.segment(lay.shared_offset(0), lay.n_shared) = fit.shared.front().phi_c;
}

}  // namespace

ParamState assemble_state(const ParamLayout& layout, const IpdFit& fit,
                          const std::vector<std::vector<WeightFit>>& wfits,
                          const std::vector<std::vector<PairEstimate>>& pairs,
                          const std::vector<AdSummary>& ad) {
  check_state(layout, fit);
  check_pair_grid(layout, wfits);
  check_pair_grid(layout, pairs);
  check_ad(layout, ad);
  if (layout.star_dim != 2 || layout.n_beta_per_pair != 1)
    fail(ErrorCategory::internal, "layout does not describe the standard stack");
  ParamState st;
  st.layout = layout;
  st.psi = Eigen::VectorXd::Zero(layout.dim());
  fill_phi(layout, fit, st.psi);
  for (int j = 0; j < layout.n_ad(); ++j) {
    for (int k = 0; k < layout.n_ipd(); ++k) {
      const WeightFit& wf = wfits[j][k];
      if (wf.beta.size() != layout.n_wreg)
        fail(ErrorCategory::dimension, "weight fit size differs from the layout");
      st.psi.segment(layout.beta_offset(j, k), layout.n_wreg) = wf.beta;
      const PairEstimate& pe = pairs[j][k];
      const int so = layout.star_offset(j, k);
      st.psi(so) = pe.params.phi0;
      st.psi(so + 1) = pe.params.phi1;
    }
    st.psi.segment(layout.target_offset(j), 2) = target_means(ad[j], -1);
  }
  return st;
}

ParamState assemble_state_subgroup(
    const ParamLayout& layout, const IpdFit& fit,
    const std::vector<std::vector<WeightFit>>& wfits,
    const std::vector<std::vector<SubgroupPairEstimate>>& pairs,
    const std::vector<AdSummary>& ad, const OutcomeModelSpec& spec) {
  check_state(layout, fit);
  check_pair_grid(layout, wfits);
  check_pair_grid(layout, pairs);
  check_ad(layout, ad);
  if (layout.star_dim != 4 || layout.n_beta_per_pair != 1 || layout.trial_block != 4)
    fail(ErrorCategory::internal, "layout does not describe the subgroup stack");
  if (!spec.extended())
    fail(ErrorCategory::internal, "subgroup stack needs a subgroup outcome model");
  ParamState st;
  st.layout = layout;
  st.psi = Eigen::VectorXd::Zero(layout.dim());
  fill_phi(layout, fit, st.psi);
  for (int j = 0; j < layout.n_ad(); ++j) {
    for (int k = 0; k < layout.n_ipd(); ++k) {
      const WeightFit& wf = wfits[j][k];
      if (wf.beta.size() != layout.n_wreg)
        fail(ErrorCategory::dimension, "weight fit size differs from the layout");
      st.psi.segment(layout.beta_offset(j, k), layout.n_wreg) = wf.beta;
      const SubgroupPairEstimate& pe = pairs[j][k];
      if (!pe.params.extra)
        fail(ErrorCategory::internal, "subgroup pair estimate lacks extra coefficients");
      const int so = layout.star_offset(j, k);
      st.psi(so) = pe.params.phi0;
      st.psi(so + 1) = pe.params.phi1;
      st.psi(so + 2) = (*pe.params.extra)[0];
      st.psi(so + 3) = (*pe.params.extra)[1];
    }
    st.psi.segment(layout.target_offset(j), 4) =
        target_means(ad[j], *spec.subgroup_covariate);
  }
  return st;
}

ParamState assemble_state_joint(
    const ParamLayout& layout, const IpdFit& fit,
    const std::vector<std::vector<std::array<JointWeightFit, 2>>>& jwfits,
    const std::vector<std::vector<PairEstimate>>& pairs,
    const std::vector<AdSummary>& ad) {
  check_state(layout, fit);
  check_pair_grid(layout, jwfits);
  check_pair_grid(layout, pairs);
  check_ad(layout, ad);
  if (layout.star_dim != 2 || layout.n_beta_per_pair != 2)
    fail(ErrorCategory::internal, "layout does not describe the joint stack");
  ParamState st;
  st.layout = layout;
  st.psi = Eigen::VectorXd::Zero(layout.dim());
  fill_phi(layout, fit, st.psi);
  for (int j = 0; j < layout.n_ad(); ++j) {
    for (int k = 0; k < layout.n_ipd(); ++k) {
      for (int x = 0; x < 2; ++x) {
        const JointWeightFit& jwf = jwfits[j][k][x];
        if (jwf.beta.size() != layout.n_wreg)
          fail(ErrorCategory::dimension, "joint weight fit size differs from the layout");
        st.psi.segment(layout.beta_offset(j, k, x), layout.n_wreg) = jwf.beta;
      }
      const PairEstimate& pe = pairs[j][k];
      const int so = layout.star_offset(j, k);
      st.psi(so) = pe.params.phi0;
      st.psi(so + 1) = pe.params.phi1;
    }
    st.psi.segment(layout.target_offset(j), 2) = target_means(ad[j], -1);
  }
  return st;
}

SandwichParts sandwich(const OutcomeModelSpec& spec,
                       const std::vector<IpdTrial>& ipd,
                       const std::vector<PseudoTrial>& pseudo,
                       const ParamState& state, const SandwichOptions& opt) {
  const ParamLayout& lay = state.layout;
  if (static_cast<int>(ipd.size()) != lay.n_ipd() ||
      static_cast<int>(pseudo.size()) != lay.n_ad())
    fail(ErrorCategory::dimension, "sandwich inputs do not match the layout");
  for (int k = 0; k < lay.n_ipd(); ++k)
    if (ipd[k].study != lay.ipd_studies[k])
      fail(ErrorCategory::internal, "IPD order differs from the layout");
  for (int j = 0; j < lay.n_ad(); ++j)
    if (pseudo[j].study != lay.ad_studies[j])
      fail(ErrorCategory::internal, "pseudo-trial order differs from the layout");
  if (opt.mode == WeightingMode::standard) {
    if (!opt.wspec.just_identified())
      fail(ErrorCategory::schema,
           "sandwich variance requires a just-identified weight model");
    if (lay.n_wreg != opt.wspec.dim())
      fail(ErrorCategory::dimension, "weight model size differs from the layout");
  } else {
    if (lay.n_beta_per_pair != 2)
      fail(ErrorCategory::internal, "joint sandwich needs two beta blocks per pair");
    if (static_cast<int>(opt.wspec.moments.size()) != lay.n_wreg)
      fail(ErrorCategory::dimension, "moment count differs from the joint layout");
  }
  const int d = spec.n_covariates();
  const int nsh = spec.n_shared();
  if (nsh != lay.n_shared)
    fail(ErrorCategory::dimension, "shared-term count differs from the layout");
  const int tb = lay.trial_block;
  if (tb != spec.trial_block_dim())
    fail(ErrorCategory::dimension, "trial block size differs from the outcome model");
  const int sc = spec.extended() ? *spec.subgroup_covariate : -1;
  if (lay.star_dim != (spec.extended() ? 4 : 2))
    fail(ErrorCategory::dimension, "star block size differs from the outcome model");
  const int dim = lay.dim();
  if (state.psi.size() != dim)
    fail(ErrorCategory::dimension, "parameter vector size differs from the layout");

  SandwichParts sw;
  sw.a = Eigen::MatrixXd::Zero(dim, dim);
  Eigen::MatrixXd bl = Eigen::MatrixXd::Zero(dim, dim);  // lower triangle of B
  Eigen::VectorXd fvec(dim);
  Eigen::VectorXd tvec(tb);
  Eigen::VectorXd dcell(lay.star_dim);

  long n_total = 0;
  for (const IpdTrial& t : ipd) n_total += t.n();
  for (const PseudoTrial& p : pseudo) n_total += p.n();
  sw.n_total = n_total;

  // --- real IPD rows: every estimating function and the whole Jacobian ---
  for (int ki = 0; ki < lay.n_ipd(); ++ki) {
    const IpdTrial& trial = ipd[ki];
    const int poff = lay.phi_offset(ki);
    const int soff = lay.shared_offset(ki);
    for (const ObservationRow& row : trial.rows) {
      const double x = row.x;
      tvec(0) = 1.0;
      tvec(1) = x;
      double l1 = 0.0;
      if (tb == 4) {
        l1 = row.l(sc);
        tvec(2) = l1;
        tvec(3) = x * l1;
      }
      Eigen::VectorXd fsh = spec.shared_regressors(x, row.l);
      double eta = state.psi.segment(poff, tb).dot(tvec) +
                   state.psi.segment(soff, nsh).dot(fsh);
      const double q = expit(eta);
      const double r = row.y - q;
      const double w = q * (1.0 - q);

      fvec.setZero();
      for (int a = 0; a < tb; ++a) fvec(poff + a) = tvec(a) * r;
      for (int s = 0; s < nsh; ++s) fvec(soff + s) = fsh(s) * r;

      // outcome block of A: C C' w over the (trial, shared) columns
      for (int a = 0; a < tb; ++a) {
        const double ca = tvec(a);
        for (int b = 0; b < tb; ++b) sw.a(poff + a, poff + b) += ca * tvec(b) * w;
        for (int s = 0; s < nsh; ++s) {
          sw.a(poff + a, soff + s) += ca * fsh(s) * w;
          sw.a(soff + s, poff + a) += fsh(s) * ca * w;
        }
      }
      for (int s = 0; s < nsh; ++s)
        for (int s2 = 0; s2 < nsh; ++s2)
          sw.a(soff + s, soff + s2) += fsh(s) * fsh(s2) * w;

      for (int ji = 0; ji < lay.n_ad(); ++ji) {
        const int so = lay.star_offset(ji, ki);
        const int coff = lay.target_offset(ji);
        // weight value and its block derivative
        double m;
        int boff;
        Eigen::VectorXd greg;
        Eigen::VectorXd pmom(lay.n_wreg);
        if (opt.mode == WeightingMode::standard) {
          boff = lay.beta_offset(ji, ki);
          greg.resize(lay.n_wreg);
          for (int c = 0; c < lay.n_wreg; ++c) {
            greg(c) = opt.wspec.regressors[c].eval(row.l);
            pmom(c) = opt.wspec.moments[c].eval(row.l);
          }
          m = std::exp(state.psi.segment(boff, lay.n_wreg).dot(greg));
        } else {
          boff = lay.beta_offset(ji, ki, row.x);
          greg.resize(lay.n_wreg);  // joint tilt regressors: (1, L)
          greg(0) = 1.0;
          greg.tail(d) = row.l;
          for (int c = 0; c < lay.n_wreg; ++c)
            pmom(c) = opt.wspec.moments[c].eval(row.l);
          m = std::exp(state.psi.segment(boff, lay.n_wreg).dot(greg));
        }

        // f_beta = p(L) m and its Jacobian -p g' m
        for (int c = 0; c < lay.n_wreg; ++c) {
          fvec(boff + c) = pmom(c) * m;
          for (int c2 = 0; c2 < lay.n_wreg; ++c2)
            sw.a(boff + c, boff + c2) -= pmom(c) * greg(c2) * m;
        }

        // f_phi*: the row's own cell equation, weighted by m and centered on
        // the cell's target mean so the AD side enters only through the
        // estimated target, not through the row count of the cell
        if (lay.star_dim == 2) {
          dcell(0) = 1.0;
          dcell(1) = x;
        } else {
          dcell(0) = 1.0;
          dcell(1) = x;
          dcell(2) = l1;
          dcell(3) = x * l1;
        }
        double eta_star = state.psi.segment(so, lay.star_dim).dot(dcell) +
                          state.psi.segment(soff, nsh).dot(fsh);
        const double qs = expit(eta_star);
        const double ws = qs * (1.0 - qs);
        int comp;
        if (lay.star_dim == 2)
          comp = row.x == 1 ? 0 : 1;
        else
          comp = row.x + 2 * static_cast<int>(l1);
        const double cme = state.psi(coff + comp);
        fvec(so + comp) = m * (qs - cme);
        for (int c = 0; c < lay.star_dim; ++c)
          sw.a(so + comp, so + c) -= m * ws * dcell(c);
        for (int c = 0; c < lay.n_wreg; ++c)
          sw.a(so + comp, boff + c) -= (qs - cme) * m * greg(c);
        for (int s = 0; s < nsh; ++s) sw.a(so + comp, soff + s) -= m * ws * fsh(s);
        sw.a(so + comp, coff + comp) += m;
      }

      bl.selfadjointView<Eigen::Lower>().rankUpdate(fvec);
      ++sw.bread_rows_ipd;
      ++sw.meat_rows;
    }
  }

  // --- pseudo rows: weight-model functions plus the target-mean equations;
  // the only Jacobian entries they carry sit on the target diagonal ---
  for (int ji = 0; ji < lay.n_ad(); ++ji) {
    const PseudoTrial& pt = pseudo[ji];
    if (pt.dim() != d + 1)
      fail(ErrorCategory::dimension, "pseudo trial has the wrong column count");
    const int coff = lay.target_offset(ji);
    for (int x = 0; x < 2; ++x)
      for (int r = 0; r < pt.n(x); ++r) {
        Eigen::VectorXd lstar = pt.t[x].row(r).head(d);
        const double ystar = pt.t[x](r, d);
        fvec.setZero();
        for (int ki = 0; ki < lay.n_ipd(); ++ki) {
          const int boff = opt.mode == WeightingMode::standard
                               ? lay.beta_offset(ji, ki)
                               : lay.beta_offset(ji, ki, x);
          for (int c = 0; c < lay.n_wreg; ++c)
            fvec(boff + c) = -opt.wspec.moments[c].eval(lstar);
        }
        if (lay.star_dim == 2) {
          const int comp = x == 1 ? 0 : 1;
          fvec(coff + comp) = ystar - state.psi(coff + comp);
          sw.a(coff + comp, coff + comp) += 1.0;
        } else {
          const double l1s = lstar(sc);
          fvec(coff + x) = (1.0 - l1s) * (ystar - state.psi(coff + x));
          fvec(coff + x + 2) = l1s * (ystar - state.psi(coff + x + 2));
          sw.a(coff + x, coff + x) += 1.0 - l1s;
          sw.a(coff + x + 2, coff + x + 2) += l1s;
        }
        bl.selfadjointView<Eigen::Lower>().rankUpdate(fvec);
        ++sw.meat_rows;
      }
  }

  sw.a /= static_cast<double>(n_total);
  sw.b = Eigen::MatrixXd(bl.selfadjointView<Eigen::Lower>());
  sw.b /= static_cast<double>(n_total);

  Eigen::JacobiSVD<Eigen::MatrixXd> svd(sw.a);
  const double smax = svd.singularValues().maxCoeff();
  const double smin = svd.singularValues().minCoeff();
  sw.cond_a = smin > 0.0 ? smax / smin : std::numeric_limits<double>::infinity();
  if (!(sw.cond_a < opt.cond_limit))
    fail(ErrorCategory::singular,
         "bread matrix is numerically singular (condition " +
             std::to_string(sw.cond_a) + ")");

  Eigen::FullPivLU<Eigen::MatrixXd> lu(sw.a);
  Eigen::MatrixXd m1 = lu.solve(sw.b);
  sw.v = lu.solve(m1.transpose()).transpose() / static_cast<double>(n_total);
  sw.v = 0.5 * (sw.v + sw.v.transpose()).eval();
  return sw;
}

double delta_variance(const SandwichParts& sw, const Eigen::VectorXd& c) {
  if (c.size() != sw.v.rows())
    fail(ErrorCategory::dimension, "contrast length differs from the parameter stack");
  return c.dot(sw.v * c);
}

Eigen::VectorXd contrast_unit(const ParamLayout& lay, int index) {
  if (index < 0 || index >= lay.dim())
    fail(ErrorCategory::dimension, "contrast index out of range");
  Eigen::VectorXd c = Eigen::VectorXd::Zero(lay.dim());
  c(index) = 1.0;
  return c;
}

Eigen::VectorXd contrast_star(const ParamLayout& lay, int j, int coord,
                              const std::vector<double>& pool_w) {
  if (j < 0 || j >= lay.n_ad() || coord < 0 || coord >= lay.star_dim)
    fail(ErrorCategory::dimension, "contrast index out of range");
  if (static_cast<int>(pool_w.size()) != lay.n_ipd())
    fail(ErrorCategory::dimension, "pooling weight count differs from the layout");
  Eigen::VectorXd c = Eigen::VectorXd::Zero(lay.dim());
  for (int k = 0; k < lay.n_ipd(); ++k)
    c(lay.star_offset(j, k) + coord) = pool_w[k];
  return c;
}

Eigen::VectorXd contrast_shared(const ParamLayout& lay, int r,
                                const std::vector<double>& ipd_w) {
  if (r < 0 || r >= lay.n_shared)
    fail(ErrorCategory::dimension, "contrast index out of range");
  Eigen::VectorXd c = Eigen::VectorXd::Zero(lay.dim());
  if (lay.strategy == SharedFit::stacked) {
    c(lay.shared_offset(0) + r) = 1.0;
  } else {
    if (static_cast<int>(ipd_w.size()) != lay.n_ipd())
      fail(ErrorCategory::dimension, "trial weight count differs from the layout");
    for (int k = 0; k < lay.n_ipd(); ++k) c(lay.shared_offset(k) + r) = ipd_w[k];
  }
  return c;
}

Eigen::VectorXd contrast_phi1_bar(const ParamLayout& lay,
                                  const std::vector<double>& ad_w,
                                  const std::vector<double>& pool_w,
                                  const std::vector<double>& ipd_w) {
  if (static_cast<int>(ad_w.size()) != lay.n_ad() ||
      static_cast<int>(pool_w.size()) != lay.n_ipd() ||
      static_cast<int>(ipd_w.size()) != lay.n_ipd())
    fail(ErrorCategory::dimension, "weight counts differ from the layout");
  Eigen::VectorXd c = Eigen::VectorXd::Zero(lay.dim());
  for (int j = 0; j < lay.n_ad(); ++j)
    for (int k = 0; k < lay.n_ipd(); ++k)
      c(lay.star_offset(j, k) + 1) += ad_w[j] * pool_w[k];
  for (int k = 0; k < lay.n_ipd(); ++k) c(lay.phi_offset(k) + 1) += ipd_w[k];
  return c;
}

}  // namespace admeta
