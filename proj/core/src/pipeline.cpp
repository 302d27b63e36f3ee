#include "admeta/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "admeta/errors.hpp"
#include "admeta/rng.hpp"

namespace admeta {

namespace {

std::vector<double> pooling_weights(PoolingRule rule, const std::vector<double>& sizes) {
  std::vector<double> w(sizes.size());
  if (rule == PoolingRule::equal) {
    std::fill(w.begin(), w.end(), 1.0 / sizes.size());
    return w;
  }
  double total = 0.0;
  for (double s : sizes) total += s;
  for (std::size_t i = 0; i < sizes.size(); ++i) w[i] = sizes[i] / total;
  return w;
}

ParamLayout make_layout(const PipelineResult& pr) {
  ParamLayout lay;
  lay.strategy = pr.fit.strategy;
  lay.trial_block = pr.spec.trial_block_dim();
  lay.n_shared = pr.spec.n_shared();
  lay.n_wreg = pr.options.observational ? pr.spec.n_covariates() + 1 : pr.wspec.dim();
  lay.star_dim = pr.spec.extended() ? 4 : 2;
  lay.n_beta_per_pair = pr.options.observational ? 2 : 1;
  for (const IpdTrial& t : pr.ipd) lay.ipd_studies.push_back(t.study);
  for (const AdSummary& a : pr.ad) lay.ad_studies.push_back(a.study);
  return lay;
}

}  // namespace

int PipelineResult::ad_index(int study) const {
  for (std::size_t j = 0; j < ad.size(); ++j)
    if (ad[j].study == study) return static_cast<int>(j);
  fail(ErrorCategory::schema, "unknown aggregate study " + std::to_string(study));
}

int PipelineResult::ipd_index(int study) const {
  for (std::size_t k = 0; k < ipd.size(); ++k)
    if (ipd[k].study == study) return static_cast<int>(k);
  fail(ErrorCategory::schema, "unknown IPD study " + std::to_string(study));
}

double PipelineResult::var_star(int j, int coord) const {
  if (!has_variance) fail(ErrorCategory::internal, "sandwich variance unavailable");
  return delta_variance(sw, contrast_star(state.layout, j, coord, pool_w));
}

double PipelineResult::var_trial_phi(int k, int coord) const {
  if (!has_variance) fail(ErrorCategory::internal, "sandwich variance unavailable");
  return delta_variance(sw,
                        contrast_unit(state.layout, state.layout.phi_offset(k) + coord));
}

double PipelineResult::var_shared(int r) const {
  if (!has_variance) fail(ErrorCategory::internal, "sandwich variance unavailable");
  return delta_variance(sw, contrast_shared(state.layout, r, shared_w));
}

double PipelineResult::var_phi1_bar() const {
  if (!has_variance) fail(ErrorCategory::internal, "sandwich variance unavailable");
  return delta_variance(sw,
                        contrast_phi1_bar(state.layout, ad_w, pool_w, ipd_w));
}

PipelineResult run_pipeline(std::vector<IpdTrial> ipd, std::vector<AdSummary> ad,
                            OutcomeModelSpec spec, PipelineOptions options) {
  spec.validate();
  if (ipd.empty()) fail(ErrorCategory::schema, "at least one IPD trial is required");
  if (options.observational && options.subgroup)
    fail(ErrorCategory::schema,
         "subgroup recovery with joint weighting is not supported");
  if (options.observational && options.propensity)
    fail(ErrorCategory::schema,
         "joint weighting already models treatment; drop the propensity flag");
  if (options.subgroup != spec.extended())
    fail(ErrorCategory::schema,
         "subgroup mode requires (exactly) an outcome model with a subgroup covariate");

  const int d = spec.n_covariates();
  std::set<int> ids;
  for (const IpdTrial& t : ipd) {
    if (!ids.insert(t.study).second)
      fail(ErrorCategory::schema, "duplicate study id " + std::to_string(t.study));
    if (!t.rows.empty() && t.rows.front().l.size() != d)
      fail(ErrorCategory::dimension, "IPD covariate dimension differs from the model");
  }
  for (const AdSummary& a : ad) {
    if (!ids.insert(a.study).second)
      fail(ErrorCategory::schema, "duplicate study id " + std::to_string(a.study));
    a.validate();
    if (a.n_cov() != d)
      fail(ErrorCategory::dimension, "AD covariate dimension differs from the model");
    if (!a.covariate_names.empty() && a.covariate_names != spec.covariate_names)
      fail(ErrorCategory::schema, "AD covariate names differ from the model");
  }

  PipelineResult pr;
  pr.spec = spec;
  pr.wspec = options.wspec ? *options.wspec : WeightModelSpec::default_linear(d);
  pr.wspec.validate(d);
  pr.options = options;
  pr.ipd = std::move(ipd);
  pr.ad = std::move(ad);

  // step 1: trial-specific and shared outcome coefficients from the IPD
  pr.fit = fit_ipd(pr.ipd, spec, options.strategy, options.logistic);

  std::vector<double> ipd_sizes, ad_sizes;
  for (const IpdTrial& t : pr.ipd) ipd_sizes.push_back(t.n());
  for (const AdSummary& a : pr.ad) ad_sizes.push_back(a.n());
  pr.pool_w = pooling_weights(options.pooling, ipd_sizes);
  pr.shared_w = pr.pool_w;

  if (options.propensity)
    for (const IpdTrial& t : pr.ipd) pr.propensity.push_back(fit_propensity(t));

  // steps 2 and 3 per (AD trial, IPD trial) pair
  bool any_truncated = false;
  for (std::size_t j = 0; j < pr.ad.size(); ++j) {
    std::vector<WeightFit> wrow;
    std::vector<std::array<JointWeightFit, 2>> jwrow;
    std::vector<PairEstimate> prow;
    std::vector<SubgroupPairEstimate> srow;
    for (std::size_t k = 0; k < pr.ipd.size(); ++k) {
      const SharedParams& sp = pr.fit.shared_for(static_cast<int>(k));
      if (options.observational) {
        std::array<JointWeightFit, 2> jw = {
            fit_joint_weight_model(pr.ipd[k], pr.ad[j], 0, pr.wspec.moments),
            fit_joint_weight_model(pr.ipd[k], pr.ad[j], 1, pr.wspec.moments)};
        prow.push_back(
            solve_pair_observational(pr.ipd[k], pr.ad[j], jw[0], jw[1], spec, sp));
        jwrow.push_back(std::move(jw));
        continue;
      }
      WeightFit wf = fit_weight_model(pr.ipd[k], pr.ad[j], pr.wspec);
      if (options.weight_truncation_quantile) {
        truncate_weights(wf, *options.weight_truncation_quantile, pr.ipd[k]);
        any_truncated = true;
      }
      if (options.subgroup) {
        srow.push_back(solve_subgroup_pair(pr.ipd[k], pr.ad[j], wf, spec, sp));
      } else {
        const PropensityFit* pf = options.propensity ? &pr.propensity[k] : nullptr;
        prow.push_back(solve_pair(pr.ipd[k], pr.ad[j], wf, spec, sp, pf));
      }
      wrow.push_back(std::move(wf));
    }
    if (!wrow.empty()) pr.wfits.push_back(std::move(wrow));
    if (!jwrow.empty()) pr.jwfits.push_back(std::move(jwrow));
    if (!prow.empty()) pr.pairs.push_back(std::move(prow));
    if (!srow.empty()) pr.sub_pairs.push_back(std::move(srow));
  }

  // pooled coefficients per AD trial
  for (std::size_t j = 0; j < pr.ad.size(); ++j) {
    TrialParams pooled;
    if (options.subgroup) {
      std::array<double, 2> extra{{0.0, 0.0}};
      for (std::size_t k = 0; k < pr.ipd.size(); ++k) {
        const SubgroupPairEstimate& pe = pr.sub_pairs[j][k];
        pooled.phi0 += pr.pool_w[k] * pe.params.phi0;
        pooled.phi1 += pr.pool_w[k] * pe.params.phi1;
        extra[0] += pr.pool_w[k] * (*pe.params.extra)[0];
        extra[1] += pr.pool_w[k] * (*pe.params.extra)[1];
      }
      pooled.extra = extra;
    } else {
      pooled = pool_pairs(pr.pairs[j], pr.pool_w).params;
    }
    pr.ad_pooled.push_back(pooled);
  }

  // shared coefficients pooled across IPD trials
  pr.shared_pooled = Eigen::VectorXd::Zero(spec.n_shared());
  if (pr.fit.strategy == SharedFit::stacked) {
    pr.shared_pooled = pr.fit.shared.front().phi_c;
  } else {
    for (std::size_t k = 0; k < pr.ipd.size(); ++k)
      pr.shared_pooled += pr.shared_w[k] * pr.fit.shared[k].phi_c;
  }

  // across-trial summary in study-id order
  struct Entry {
    int study;
    double size;
    TrialParams params;
    bool is_ad;
    int index;
  };
  std::vector<Entry> entries;
  for (std::size_t j = 0; j < pr.ad.size(); ++j)
    entries.push_back({pr.ad[j].study, ad_sizes[j], pr.ad_pooled[j], true,
                       static_cast<int>(j)});
  for (std::size_t k = 0; k < pr.ipd.size(); ++k)
    entries.push_back({pr.ipd[k].study, ipd_sizes[k], pr.fit.trial_params[k], false,
                       static_cast<int>(k)});
  std::sort(entries.begin(), entries.end(),
            [](const Entry& a, const Entry& b) { return a.study < b.study; });
  std::vector<double> sizes, all_w;
  std::vector<TrialParams> all_params;
  for (const Entry& e : entries) {
    sizes.push_back(e.size);
    all_params.push_back(e.params);
  }
  all_w = pooling_weights(options.pooling, sizes);
  pr.ad_w.assign(pr.ad.size(), 0.0);
  pr.ipd_w.assign(pr.ipd.size(), 0.0);
  for (std::size_t s = 0; s < entries.size(); ++s) {
    if (entries[s].is_ad)
      pr.ad_w[entries[s].index] = all_w[s];
    else
      pr.ipd_w[entries[s].index] = all_w[s];
  }

  // variance stack
  if (!options.compute_variance) {
    pr.variance_note = "variance not requested";
  } else if (any_truncated) {
    pr.variance_note = "weight truncation breaks the estimating equations";
  } else if (!options.observational && !pr.wspec.just_identified()) {
    pr.variance_note = "sandwich variance needs a just-identified weight model";
  } else {
    std::vector<std::vector<TrialParams>> star_params;
    for (std::size_t j = 0; j < pr.ad.size(); ++j) {
      std::vector<TrialParams> row;
      for (std::size_t k = 0; k < pr.ipd.size(); ++k)
        row.push_back(options.subgroup ? pr.sub_pairs[j][k].params
                                       : pr.pairs[j][k].params);
      star_params.push_back(std::move(row));
    }
    pr.second_moments =
        options.observational
            ? ad_second_moments_joint(spec, pr.ipd, pr.ad, pr.fit, pr.jwfits,
                                      star_params, pr.pool_w)
            : ad_second_moments(spec, pr.ipd, pr.ad, pr.fit, pr.wfits, star_params,
                                pr.pool_w);
    PseudoOptions popt;
    if (options.subgroup) popt.subgroup_ly_covariate = spec.subgroup_covariate;
    for (std::size_t j = 0; j < pr.ad.size(); ++j)
      pr.pseudo.push_back(make_pseudo_trial(pr.ad[j], pr.second_moments[j],
                                            derive_seed(options.seed, j), popt));
    ParamLayout lay = make_layout(pr);
    if (options.subgroup)
      pr.state = assemble_state_subgroup(lay, pr.fit, pr.wfits, pr.sub_pairs,
                                         pr.ad, spec);
    else if (options.observational)
      pr.state = assemble_state_joint(lay, pr.fit, pr.jwfits, pr.pairs, pr.ad);
    else
      pr.state = assemble_state(lay, pr.fit, pr.wfits, pr.pairs, pr.ad);
    SandwichOptions sopt;
    sopt.mode = options.observational ? WeightingMode::joint : WeightingMode::standard;
    sopt.wspec = pr.wspec;
    pr.sw = sandwich(spec, pr.ipd, pr.pseudo, pr.state, sopt);
    pr.has_variance = true;
    if (options.propensity)
      pr.variance_note = "propensity parameters enter as plug-ins";
  }

  // between-trial summary (optionally noise-corrected)
  if (options.mom_sigma_correction && pr.has_variance) {
    std::vector<Eigen::Matrix2d> sampling;
    for (const Entry& e : entries) {
      Eigen::Matrix2d v;
      if (e.is_ad) {
        Eigen::VectorXd c0 = contrast_star(pr.state.layout, e.index, 0, pr.pool_w);
        Eigen::VectorXd c1 = contrast_star(pr.state.layout, e.index, 1, pr.pool_w);
        v(0, 0) = delta_variance(pr.sw, c0);
        v(1, 1) = delta_variance(pr.sw, c1);
        v(0, 1) = v(1, 0) = c0.dot(pr.sw.v * c1);
      } else {
        const int off = pr.state.layout.phi_offset(e.index);
        v = pr.sw.v.block(off, off, 2, 2);
      }
      sampling.push_back(v);
    }
    pr.ranef = pool_random_effects(all_params, all_w, &sampling);
  } else {
    pr.ranef = pool_random_effects(all_params, all_w);
  }
  pr.phi1_bar = pr.ranef.phi1_bar;
  return pr;
}

}  // namespace admeta
