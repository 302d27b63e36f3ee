#pragma once

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <optional>
#include <vector>

#include "admeta/ad_recover.hpp"
#include "admeta/extensions.hpp"
#include "admeta/ipd_fit.hpp"
#include "admeta/weight_fit.hpp"

namespace admeta {

// Inverse-weighted second moments of an AD trial recovered from the IPD
// trials: E(L L' | S=j) and E(L Y | x, S=j).
struct AdSecondMoments {
  int study = 0;
  Eigen::MatrixXd ll;
  std::array<Eigen::VectorXd, 2> ly;
  bool jensen_warning = false;  // some diag(ll) below the squared AD mean
};

std::vector<AdSecondMoments> ad_second_moments(
    const OutcomeModelSpec& spec, const std::vector<IpdTrial>& ipd,
    const std::vector<AdSummary>& ad, const IpdFit& fit,
    const std::vector<std::vector<WeightFit>>& wfits,
    const std::vector<std::vector<TrialParams>>& star_params,
    const std::vector<double>& pool_w);

// Joint-weight (observational) analogue: arm-specific tilts replace m/P(x|k).
std::vector<AdSecondMoments> ad_second_moments_joint(
    const OutcomeModelSpec& spec, const std::vector<IpdTrial>& ipd,
    const std::vector<AdSummary>& ad, const IpdFit& fit,
    const std::vector<std::vector<std::array<JointWeightFit, 2>>>& jwfits,
    const std::vector<std::vector<TrialParams>>& star_params,
    const std::vector<double>& pool_w);

// Synthetic rows standing in for the unavailable AD rows: per arm x, a block
// of T = (L', Y) values whose sample mean and divide-by-n covariance hit the
// recovered targets exactly.  Y is real-valued here.
struct PseudoTrial {
  int study = 0;
  std::array<Eigen::MatrixXd, 2> t;

  int n(int x) const { return static_cast<int>(t[x].rows()); }
  int n() const { return n(0) + n(1); }
  int dim() const { return static_cast<int>(t[0].cols()); }
};

// Draw n rows, center, whiten by the empirical covariance root, recolor by
// the target root, shift by the target mean.  Deterministic by seed.
Eigen::MatrixXd match_moments_sample(int n, const Eigen::VectorXd& mean,
                                     const Eigen::MatrixXd& cov,
                                     std::uint64_t seed);

struct PseudoOptions {
  // replace the recovered E(L1 Y | x, j) with the subgroup block's direct
  // arm-wise value E(Y|x,l=1,j) * P(l=1|x,j); used by the subgroup pipeline
  std::optional<int> subgroup_ly_covariate;
};

PseudoTrial make_pseudo_trial(const AdSummary& ad_j, const AdSecondMoments& sm,
                              std::uint64_t seed, const PseudoOptions& opt = {});

// Stacked-parameter index map.  psi = (phi blocks for the IPD trials,
// beta blocks per (j,k) pair, phi* blocks per (j,k) pair, target-mean blocks
// per AD trial), j-major.  The target block carries the AD outcome means the
// phi* equations are centered on, estimated from the pseudo rows.
struct ParamLayout {
  SharedFit strategy = SharedFit::per_trial;
  int trial_block = 2;      // 4 when the outcome model carries a subgroup
  int n_shared = 0;
  int n_wreg = 0;           // weight-model block size
  int star_dim = 2;         // 4 for subgroup recovery
  int n_beta_per_pair = 1;  // 2 for joint (observational) weighting
  std::vector<int> ipd_studies;
  std::vector<int> ad_studies;

  int n_ipd() const { return static_cast<int>(ipd_studies.size()); }
  int n_ad() const { return static_cast<int>(ad_studies.size()); }
  int phi_dim() const {
    return trial_block + (strategy == SharedFit::per_trial ? n_shared : 0);
  }
  int phi_section() const {
    return n_ipd() * phi_dim() + (strategy == SharedFit::stacked ? n_shared : 0);
  }
  int phi_offset(int k) const { return k * phi_dim(); }
  int shared_offset(int k) const {
    return strategy == SharedFit::per_trial ? phi_offset(k) + trial_block
                                            : n_ipd() * trial_block;
  }
  int beta_offset(int j, int k, int x = 0) const {
    return phi_section() + ((j * n_ipd() + k) * n_beta_per_pair + x) * n_wreg;
  }
  int beta_section() const { return n_ad() * n_ipd() * n_beta_per_pair * n_wreg; }
  int star_offset(int j, int k) const {
    return phi_section() + beta_section() + (j * n_ipd() + k) * star_dim;
  }
  int star_section() const { return n_ad() * n_ipd() * star_dim; }
  int target_offset(int j) const {
    return phi_section() + beta_section() + star_section() + j * star_dim;
  }
  int dim() const {
    return phi_section() + beta_section() + star_section() + n_ad() * star_dim;
  }
};

struct ParamState {
  ParamLayout layout;
  Eigen::VectorXd psi;
};

ParamState assemble_state(const ParamLayout& layout, const IpdFit& fit,
                          const std::vector<std::vector<WeightFit>>& wfits,
                          const std::vector<std::vector<PairEstimate>>& pairs,
                          const std::vector<AdSummary>& ad);
ParamState assemble_state_subgroup(
    const ParamLayout& layout, const IpdFit& fit,
    const std::vector<std::vector<WeightFit>>& wfits,
    const std::vector<std::vector<SubgroupPairEstimate>>& pairs,
    const std::vector<AdSummary>& ad, const OutcomeModelSpec& spec);
ParamState assemble_state_joint(
    const ParamLayout& layout, const IpdFit& fit,
    const std::vector<std::vector<std::array<JointWeightFit, 2>>>& jwfits,
    const std::vector<std::vector<PairEstimate>>& pairs,
    const std::vector<AdSummary>& ad);

struct SandwichParts {
  Eigen::MatrixXd a;  // minus the mean Jacobian of f
  Eigen::MatrixXd b;  // mean outer product of f over all rows
  Eigen::MatrixXd v;  // A^{-1} B A^{-T} / n
  double cond_a = 0.0;
  long n_total = 0;
  long bread_rows_ipd = 0;
  // pseudo-row Jacobian writes outside the target-mean diagonal: structurally
  // zero (pseudo rows only locate the AD outcome means); instrumented
  long bread_rows_pseudo = 0;
  long meat_rows = 0;
};

enum class WeightingMode { standard, joint };

struct SandwichOptions {
  WeightingMode mode = WeightingMode::standard;
  // moment functions p and tilt regressors g of the weight model; must be
  // just-identified (the estimating-function stack needs a square block)
  WeightModelSpec wspec;
  double cond_limit = 1e12;
};

SandwichParts sandwich(const OutcomeModelSpec& spec,
                       const std::vector<IpdTrial>& ipd,
                       const std::vector<PseudoTrial>& pseudo,
                       const ParamState& state, const SandwichOptions& opt);

// c' V c for a linear functional of psi
double delta_variance(const SandwichParts& sw, const Eigen::VectorXd& c);

// contrast builders for the pooled outputs
Eigen::VectorXd contrast_unit(const ParamLayout& lay, int index);
// pooled AD-trial coefficient: coord 0..star_dim-1 of phi*_j, pooled over k
Eigen::VectorXd contrast_star(const ParamLayout& lay, int j, int coord,
                              const std::vector<double>& pool_w);
// shared coefficient r pooled over IPD trials (weights ignored for stacked)
Eigen::VectorXd contrast_shared(const ParamLayout& lay, int r,
                                const std::vector<double>& ipd_w);
// weighted mean of the treatment coefficient across all trials:
// sum_j ad_w[j] * (pooled phi*1_j) + sum_k ipd_w[k] * phi1_k
Eigen::VectorXd contrast_phi1_bar(const ParamLayout& lay,
                                  const std::vector<double>& ad_w,
                                  const std::vector<double>& pool_w,
                                  const std::vector<double>& ipd_w);

}  // namespace admeta
