#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "admeta/errors.hpp"
#include "admeta/model.hpp"

namespace admeta::detail {

struct ArmProblem {
  double target = 0.0;
  std::vector<double> v;    // shared linear-predictor part per row
  std::vector<double> wgt;  // weight / normalizer per row
  double sup = 0.0;         // limit of the equation LHS as the intercept grows

  void finish() {
    sup = 0.0;
    for (double w : wgt) sup += w;
  }
  double value(double a) const {
    double s = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) s += expit(a + v[i]) * wgt[i];
    return s;
  }
  double slope(double a) const {
    double s = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
      double q = expit(a + v[i]);
      s += q * (1.0 - q) * wgt[i];
    }
    return s;
  }
};

// Unique root of value(a) = target: the map is strictly increasing from 0 to
// sup, so a bracketed Newton iteration cannot miss.
inline double solve_arm(const ArmProblem& prob, const std::string& what,
                        double& out_resid, double& out_slope, int& out_iter) {
  constexpr int kMaxIter = 200;
  constexpr double kTol = 1e-12;
  const double tau = prob.target;
  if (!(tau > 0.0) || !(tau < 1.0))
    fail(ErrorCategory::boundary, what + ": outcome target on the boundary");
  if (tau >= prob.sup)
    fail(ErrorCategory::convergence,
         what + ": no root, target " + std::to_string(tau) +
             " >= attainable supremum " + std::to_string(prob.sup));

  double a = std::log(tau / (1.0 - tau));
  double lo, hi;
  if (prob.value(a) < tau) {
    lo = a;
    hi = a;
    double step = 1.0;
    while (prob.value(hi) < tau) {
      hi += step;
      step *= 2.0;
      if (hi > 1e6) fail(ErrorCategory::convergence, what + ": bracket expansion failed");
    }
  } else {
    hi = a;
    lo = a;
    double step = 1.0;
    while (prob.value(lo) > tau) {
      lo -= step;
      step *= 2.0;
      if (lo < -1e6) fail(ErrorCategory::convergence, what + ": bracket expansion failed");
    }
  }

  int iter = 0;
  for (iter = 0; iter < kMaxIter; ++iter) {
    double f = prob.value(a);
    if (std::abs(f - tau) <= kTol) break;
    if (f < tau)
      lo = a;
    else
      hi = a;
    double d = prob.slope(a);
    double cand = d > 0.0 ? a - (f - tau) / d : a;
    if (!(cand > lo) || !(cand < hi)) cand = 0.5 * (lo + hi);
    if (cand == a) break;  // interval exhausted at machine precision
    a = cand;
  }
  out_resid = prob.value(a) - tau;
  out_slope = prob.slope(a);
  out_iter = iter;
  if (std::abs(out_resid) > 1e-8)
    fail(ErrorCategory::convergence, what + ": equation did not reach tolerance");
  if (!(out_slope > 0.0))
    fail(ErrorCategory::internal, what + ": slope not positive at the root");
  return a;
}

}  // namespace admeta::detail
