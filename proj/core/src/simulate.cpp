#include "admeta/simulate.hpp"

#include <algorithm>
#include <cmath>
#include <thread>

#include "admeta/errors.hpp"
#include "admeta/rng.hpp"
#include "admeta/weight_fit.hpp"

namespace admeta {

DgpConfig DgpConfig::defaults() {
  DgpConfig cfg;
  cfg.membership = {Eigen::Vector3d(0.15, -0.15, -0.15),
                    Eigen::Vector3d(0.15, -0.15, -0.15),
                    Eigen::Vector3d(-0.15, 0.15, 0.15),
                    Eigen::Vector3d(-0.15, 0.15, 0.15)};
  cfg.phi0 = {0.25, 0.50, 0.25, 0.25, 0.50};
  cfg.phi1 = {1.00, 0.50, 0.00, 0.50, 1.00};
  cfg.shared_coefs = Eigen::Vector3d(1.5, -1.5, 2.0);
  return cfg;
}

DgpConfig DgpConfig::subgroup_defaults() {
  DgpConfig cfg = defaults();
  cfg.phi0 = {0.20, 0.40, 0.30, 0.25, 0.50};
  cfg.phi1 = {0.80, 0.50, 0.60, 0.50, 1.00};
  cfg.shared_coefs = Eigen::VectorXd::Constant(1, 1.5);
  cfg.subgroup_effects = std::vector<std::array<double, 2>>{
      {{-0.5, 0.6}}, {{-0.3, 0.2}}, {{0.1, -0.2}}, {{-0.4, 0.3}}, {{0.2, 0.1}}};
  return cfg;
}

OutcomeModelSpec DgpConfig::model() const {
  OutcomeModelSpec spec;
  spec.covariate_names = {"l1", "l2"};
  if (subgroup_effects) {
    spec.subgroup_covariate = 1;
    spec.shared_terms = {SharedTerm{false, {0}}};
  } else {
    spec.shared_terms = {SharedTerm{false, {0}}, SharedTerm{false, {1}},
                         SharedTerm{true, {1}}};
  }
  spec.validate();
  return spec;
}

void DgpConfig::validate() const {
  if (n_trials < 2) fail(ErrorCategory::domain, "need at least two trials");
  if (static_cast<int>(membership.size()) != n_trials - 1)
    fail(ErrorCategory::dimension, "membership coefficients must cover trials 2..K");
  if (static_cast<int>(phi0.size()) != n_trials ||
      static_cast<int>(phi1.size()) != n_trials)
    fail(ErrorCategory::dimension, "trial coefficient lists must cover all trials");
  if (subgroup_effects && static_cast<int>(subgroup_effects->size()) != n_trials)
    fail(ErrorCategory::dimension, "subgroup effects must cover all trials");
  const int want = subgroup_effects ? 1 : 3;
  if (shared_coefs.size() != want)
    fail(ErrorCategory::dimension, "shared coefficient count does not match the model");
  if (n < 10 * n_trials) fail(ErrorCategory::size, "sample too small for the trial count");
}

Eigen::VectorXd membership_probs(const DgpConfig& cfg, double l1, double l2) {
  Eigen::VectorXd p(cfg.n_trials);
  const Eigen::Vector3d lt(1.0, l1, l2);
  double denom = 1.0;
  for (int j = 1; j < cfg.n_trials; ++j) denom += std::exp(cfg.membership[j - 1].dot(lt));
  p(0) = 1.0 / denom;
  for (int j = 1; j < cfg.n_trials; ++j)
    p(j) = p(0) * std::exp(cfg.membership[j - 1].dot(lt));
  return p;
}

double dgp_mean_response(const DgpConfig& cfg, int s, int x, double l1, double l2) {
  double eta = cfg.phi0[s - 1] + cfg.phi1[s - 1] * x;
  if (cfg.subgroup_effects) {
    const auto& e = (*cfg.subgroup_effects)[s - 1];
    eta += e[0] * l2 + e[1] * x * l2 + cfg.shared_coefs(0) * l1;
  } else {
    eta += cfg.shared_coefs(0) * l1 + cfg.shared_coefs(1) * l2 +
           cfg.shared_coefs(2) * x * l2;
  }
  return expit(eta);
}

std::vector<IpdTrial> simulate_dgp(const DgpConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 engine = make_engine(seed, 0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<std::vector<ObservationRow>> rows(cfg.n_trials);
  for (int i = 0; i < cfg.n; ++i) {
    const double l1 = unif(engine);
    const double l2 = unif(engine) < 0.5 ? 1.0 : 0.0;
    const Eigen::VectorXd p = membership_probs(cfg, l1, l2);
    double u = unif(engine);
    int s = cfg.n_trials;
    double cum = 0.0;
    for (int j = 0; j < cfg.n_trials; ++j) {
      cum += p(j);
      if (u < cum) {
        s = j + 1;
        break;
      }
    }
    if (s > cfg.n_trials) s = cfg.n_trials;
    const int x = unif(engine) < 0.5 ? 1 : 0;
    const double q = dgp_mean_response(cfg, s, x, l1, l2);
    const int y = unif(engine) < q ? 1 : 0;
    ObservationRow row;
    row.study = s;
    row.x = x;
    row.y = y;
    row.l = Eigen::Vector2d(l1, l2);
    rows[s - 1].push_back(std::move(row));
  }
  std::vector<IpdTrial> trials;
  // empirical arm fractions, not the design 0.5: the recovery equations
  // normalize weighted arm sums by the arm probability, and the realized
  // fraction cancels the arm-share sampling noise that a fixed 0.5 leaves in
  for (int j = 0; j < cfg.n_trials; ++j)
    trials.push_back(IpdTrial::from_rows(j + 1, std::move(rows[j])));
  return trials;
}

ReplicationOutput run_replication(const ReplicationConfig& cfg,
                                  std::uint64_t rep_seed) {
  ReplicationOutput out;
  try {
    const OutcomeModelSpec spec = cfg.dgp.model();
    std::vector<IpdTrial> all = simulate_dgp(cfg.dgp, derive_seed(rep_seed, 0));
    std::vector<IpdTrial> ipd;
    std::vector<AdSummary> ad;
    for (IpdTrial& t : all) {
      if (std::find(cfg.masked.begin(), cfg.masked.end(), t.study) !=
          cfg.masked.end())
        ad.push_back(summarize_to_ad(t, cfg.cross_moments,
                                     cfg.dgp.subgroup_effects
                                         ? spec.subgroup_covariate
                                         : std::optional<int>{}));
      else
        ipd.push_back(std::move(t));
    }
    PipelineOptions popts = cfg.pipeline;
    popts.subgroup = cfg.dgp.subgroup_effects.has_value();
    popts.seed = derive_seed(rep_seed, 1);
    PipelineResult pr = run_pipeline(ipd, ad, spec, popts);

    // solver contracts, enforced per replication
    for (const auto& wrow : pr.wfits)
      for (const WeightFit& wf : wrow)
        if (balance_gap(wf) > 1e-8)
          fail(ErrorCategory::internal, "weight balance violation");
    for (const auto& prow : pr.pairs)
      for (const PairEstimate& pe : prow)
        if (pe.residual.cwiseAbs().maxCoeff() > 1e-8)
          fail(ErrorCategory::internal, "pair equation residual violation");
    for (const auto& srow : pr.sub_pairs)
      for (const SubgroupPairEstimate& pe : srow)
        if (pe.residual.cwiseAbs().maxCoeff() > 1e-8)
          fail(ErrorCategory::internal, "subgroup equation residual violation");

    for (std::size_t j = 0; j < pr.ad.size(); ++j) {
      const std::string sid = std::to_string(pr.ad[j].study);
      out.est["phi0_" + sid] = pr.ad_pooled[j].phi0;
      out.est["phi1_" + sid] = pr.ad_pooled[j].phi1;
      if (pr.has_variance) {
        out.var["phi0_" + sid] = pr.var_star(static_cast<int>(j), 0);
        out.var["phi1_" + sid] = pr.var_star(static_cast<int>(j), 1);
      }
      if (pr.ad_pooled[j].extra) {
        out.est["phi2_" + sid] = (*pr.ad_pooled[j].extra)[0];
        out.est["phi3_" + sid] = (*pr.ad_pooled[j].extra)[1];
        if (pr.has_variance) {
          out.var["phi2_" + sid] = pr.var_star(static_cast<int>(j), 2);
          out.var["phi3_" + sid] = pr.var_star(static_cast<int>(j), 3);
        }
      }
    }
    out.est["phi1_bar"] = pr.phi1_bar;
    if (pr.has_variance) out.var["phi1_bar"] = pr.var_phi1_bar();
    for (int r = 0; r < spec.n_shared(); ++r) {
      const std::string name = "c_" + spec.shared_terms[r].label(spec.covariate_names);
      out.est[name] = pr.shared_pooled(r);
      if (pr.has_variance) out.var[name] = pr.var_shared(r);
    }

    if (cfg.include_comparator) {
      ComparatorOutput cmp = ipd_only_comparator(pr.ipd, spec, popts.logistic);
      out.est["cmp_phi1_bar"] = cmp.phi1_bar;
      out.var["cmp_phi1_bar"] = cmp.var_phi1_bar;
      for (int r = 0; r < spec.n_shared(); ++r) {
        const std::string name =
            "cmp_c_" + spec.shared_terms[r].label(spec.covariate_names);
        out.est[name] = cmp.shared(r);
        out.var[name] = cmp.var_shared(r);
      }
    }
    out.ok = true;
  } catch (const Error& e) {
    out.error = std::string(category_name(e.category())) + ": " + e.what();
  } catch (const std::exception& e) {
    out.error = std::string("unexpected: ") + e.what();
  }
  return out;
}

ComparatorOutput ipd_only_comparator(const std::vector<IpdTrial>& trials,
                                     const OutcomeModelSpec& spec,
                                     const LogisticOptions& opt) {
  if (trials.empty()) fail(ErrorCategory::schema, "no IPD trials for the benchmark");
  ComparatorOutput out;
  const int tb = spec.trial_block_dim();
  const int nsh = spec.n_shared();
  out.shared = Eigen::VectorXd::Zero(nsh);
  out.var_shared = Eigen::VectorXd::Zero(nsh);
  const double k = static_cast<double>(trials.size());
  for (const IpdTrial& t : trials) {
    TrialFit tf = fit_trial_mle(t, spec, opt);
    out.phi1_bar += tf.tp.phi1 / k;
    out.var_phi1_bar += tf.cov(1, 1) / (k * k);
    for (int r = 0; r < nsh; ++r) {
      out.shared(r) += tf.sp.phi_c(r) / k;
      out.var_shared(r) += tf.cov(tb + r, tb + r) / (k * k);
    }
  }
  return out;
}

std::map<std::string, double> dgp_truth(const DgpConfig& cfg,
                                        const std::vector<int>& masked) {
  cfg.validate();
  std::map<std::string, double> truth;
  for (int id : masked) {
    const std::string sid = std::to_string(id);
    truth["phi0_" + sid] = cfg.phi0[id - 1];
    truth["phi1_" + sid] = cfg.phi1[id - 1];
    if (cfg.subgroup_effects) {
      truth["phi2_" + sid] = (*cfg.subgroup_effects)[id - 1][0];
      truth["phi3_" + sid] = (*cfg.subgroup_effects)[id - 1][1];
    }
  }
  double bar = 0.0;
  for (double p : cfg.phi1) bar += p / cfg.n_trials;
  truth["phi1_bar"] = bar;
  truth["cmp_phi1_bar"] = bar;
  const OutcomeModelSpec spec = cfg.model();
  for (int r = 0; r < spec.n_shared(); ++r) {
    const std::string label = spec.shared_terms[r].label(spec.covariate_names);
    truth["c_" + label] = cfg.shared_coefs(r);
    truth["cmp_c_" + label] = cfg.shared_coefs(r);
  }
  return truth;
}

std::vector<ReplicationOutput> run_monte_carlo(const ReplicationConfig& cfg,
                                               std::uint64_t master_seed,
                                               int replications, int threads) {
  if (replications < 1) fail(ErrorCategory::domain, "need at least one replication");
  std::vector<ReplicationOutput> outputs(replications);
  auto work = [&](int begin, int end) {
    for (int r = begin; r < end; ++r)
      outputs[r] = run_replication(cfg, derive_seed(master_seed, r));
  };
  threads = std::max(1, std::min(threads, replications));
  if (threads == 1) {
    work(0, replications);
  } else {
    std::vector<std::thread> pool;
    const int chunk = (replications + threads - 1) / threads;
    for (int t = 0; t < threads; ++t) {
      const int begin = t * chunk;
      const int end = std::min(replications, begin + chunk);
      if (begin < end) pool.emplace_back(work, begin, end);
    }
    for (std::thread& th : pool) th.join();
  }
  return outputs;
}

McSummary summarize_mc(const std::vector<ReplicationOutput>& outputs,
                       const std::map<std::string, double>& truth) {
  McSummary mc;
  mc.requested = static_cast<int>(outputs.size());
  for (const ReplicationOutput& out : outputs) mc.failures += out.ok ? 0 : 1;
  for (const auto& [name, target] : truth) {
    McRow row;
    row.name = name;
    row.truth = target;
    double sum = 0.0, sumsq = 0.0, var_sum = 0.0;
    int n_var = 0, covered = 0, with_var = 0;
    for (const ReplicationOutput& out : outputs) {
      if (!out.ok) continue;
      auto it = out.est.find(name);
      if (it == out.est.end()) continue;
      ++row.n_used;
      sum += it->second;
      sumsq += it->second * it->second;
      auto vt = out.var.find(name);
      if (vt != out.var.end() && vt->second >= 0.0) {
        var_sum += vt->second;
        ++n_var;
        ++with_var;
        if (std::abs(it->second - target) <= 1.959963984540054 * std::sqrt(vt->second))
          ++covered;
      }
    }
    if (row.n_used == 0) continue;
    const double mean = sum / row.n_used;
    row.bias = mean - target;
    row.emp_var = row.n_used > 1
                      ? (sumsq - row.n_used * mean * mean) / (row.n_used - 1)
                      : 0.0;
    row.mean_est_var = n_var > 0 ? var_sum / n_var : 0.0;
    row.coverage_pct = with_var > 0 ? 100.0 * covered / with_var : 0.0;
    mc.rows.push_back(std::move(row));
  }
  return mc;
}

}  // namespace admeta
