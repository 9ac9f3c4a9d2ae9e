#pragma once

// Inverse conditional probability weighted estimators of potential-outcome
// means and the average treatment effect, the unweighted comparator, and
// effect contrasts for binary outcomes.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "icpw/cmle.hpp"
#include "icpw/cond_prob.hpp"
#include "icpw/data_model.hpp"
#include "icpw/error.hpp"

namespace icpw {

enum class Method { naive, ipw_fixed, ipw_random, icpw };

inline std::string to_string(Method m) {
  switch (m) {
    case Method::naive: return "naive";
    case Method::ipw_fixed: return "ipw_fixed";
    case Method::ipw_random: return "ipw_random";
    case Method::icpw: return "icpw";
  }
  return "unknown";
}

inline Method parse_method(const std::string& s) {
  if (s == "naive") return Method::naive;
  if (s == "ipw_fixed") return Method::ipw_fixed;
  if (s == "ipw_random") return Method::ipw_random;
  if (s == "icpw") return Method::icpw;
  fail(ErrorCode::invalid_argument, "unknown method '" + s + "'");
}

enum class EstimandKind { mean_potential, tau, risk_difference, relative_risk, odds_ratio };

struct Estimand {
  EstimandKind kind = EstimandKind::tau;
  int level = 1;  ///< treatment level for mean_potential

  bool operator==(const Estimand&) const = default;
};

inline std::string to_string(const Estimand& e) {
  switch (e.kind) {
    case EstimandKind::mean_potential: return "mean_potential(" + std::to_string(e.level) + ")";
    case EstimandKind::tau: return "tau";
    case EstimandKind::risk_difference: return "risk_difference";
    case EstimandKind::relative_risk: return "relative_risk";
    case EstimandKind::odds_ratio: return "odds_ratio";
  }
  return "unknown";
}

struct Interval {
  double lower = 0.0;
  double upper = 0.0;

  bool contains(double x) const { return lower <= x && x <= upper; }
  bool operator==(const Interval&) const = default;
};

struct EffectEstimate {
  Method method = Method::icpw;
  Estimand estimand;
  double point = 0.0;
  std::optional<double> se;
  std::optional<Interval> ci;
  double ci_level = 0.95;
  int n_used = 0;
  int clusters_dropped = 0;
  std::vector<std::string> warnings;
};

/// Per-unit conditional probability of the observed treatment and its
/// inverse, in cluster-major unit order.
struct WeightTable {
  std::vector<double> prob;
  std::vector<double> weight;
};

inline constexpr double kDefaultProbFloor = 1e-12;

struct WeightingOptions {
  double prob_floor = kDefaultProbFloor;      ///< below this, an extreme-weight warning is recorded
  std::optional<double> truncate_quantile;    ///< cap weights at this quantile of the used weights; off by default
};

/// Conditional probabilities of all levels for every unit, at beta.
/// Returns one n_i x (K+1) matrix per cluster.
inline std::vector<Eigen::MatrixXd> conditional_probabilities(const Dataset& data, const Eigen::VectorXd& beta) {
  std::vector<Eigen::MatrixXd> out;
  out.reserve(static_cast<std::size_t>(data.m()));
  for (const auto& c : data.clusters()) {
    detail::require_retained(c);
    const auto lp = linear_predictors(c, beta, data.K());
    out.push_back(cluster_cond_probs(lp, sufficient_stat(c, data.K()), false).log_prob.array().exp().matrix());
  }
  return out;
}

inline WeightTable icpw_weights(const Dataset& data, const CondFit& fit) {
  WeightTable w;
  const auto probs = conditional_probabilities(data, fit.beta);
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const auto& c = data.cluster(i);
    for (int j = 0; j < c.size(); ++j) {
      const double pr = probs[i](j, c.treatments()(j));
      w.prob.push_back(pr);
      w.weight.push_back(1.0 / pr);
    }
  }
  return w;
}

namespace detail {

inline double quantile_type7(std::vector<double> v, double q) {
  if (v.empty()) fail(ErrorCode::invalid_argument, "quantile of empty sample");
  std::sort(v.begin(), v.end());
  const double h = (static_cast<double>(v.size()) - 1.0) * q;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (h - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

/// sum over units with A = a of Y / P(A = a), weights optionally truncated.
inline double weighted_arm_sum(const Dataset& data, const std::vector<Eigen::MatrixXd>& probs, int a,
                               const WeightingOptions& opt, std::vector<std::string>& warnings) {
  std::vector<double> weights, outcomes;
  int extreme = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const auto& c = data.cluster(i);
    for (int j = 0; j < c.size(); ++j) {
      if (c.treatments()(j) != a) continue;
      const double pr = probs[i](j, a);
      if (pr < opt.prob_floor) ++extreme;
      weights.push_back(1.0 / pr);
      outcomes.push_back(c.outcomes()(j));
    }
  }
  if (extreme > 0)
    warnings.push_back("extreme weights: " + std::to_string(extreme) + " unit(s) at level " + std::to_string(a) +
                       " have conditional probability below " + std::to_string(opt.prob_floor));
  if (opt.truncate_quantile && !weights.empty()) {
    const double cap = quantile_type7(weights, *opt.truncate_quantile);
    for (auto& w : weights) w = std::min(w, cap);
  }
  double sum = 0.0;
  for (std::size_t k = 0; k < weights.size(); ++k) sum += weights[k] * outcomes[k];
  return sum;
}

}  // namespace detail

/// (1/n) sum_ij 1{A_ij = a} Y_ij / P(A_ij = a | X_i, T_i; beta_hat), with n
/// the retained unit count.
inline EffectEstimate icpw_mean_potential(const Dataset& data, const CondFit& fit, int a, const WeightingOptions& opt = {}) {
  if (a < 0 || a > data.K()) fail(ErrorCode::invalid_argument, "treatment level out of range");
  EffectEstimate e;
  e.method = Method::icpw;
  e.estimand = {EstimandKind::mean_potential, a};
  if (!fit.converged) e.warnings.push_back("treatment model fit did not converge");
  const auto probs = conditional_probabilities(data, fit.beta);
  e.point = detail::weighted_arm_sum(data, probs, a, opt, e.warnings) / data.n();
  e.n_used = data.n();
  return e;
}

inline EffectEstimate icpw_tau(const Dataset& data, const CondFit& fit, const WeightingOptions& opt = {}) {
  if (!data.binary()) fail(ErrorCode::invalid_argument, "average treatment effect needs binary treatment");
  const auto y1 = icpw_mean_potential(data, fit, 1, opt);
  const auto y0 = icpw_mean_potential(data, fit, 0, opt);
  EffectEstimate e = y1;
  e.estimand = {EstimandKind::tau, 1};
  e.point = y1.point - y0.point;
  e.warnings.insert(e.warnings.end(), y0.warnings.begin(), y0.warnings.end());
  std::sort(e.warnings.begin(), e.warnings.end());
  e.warnings.erase(std::unique(e.warnings.begin(), e.warnings.end()), e.warnings.end());
  return e;
}

enum class NaiveVariant {
  printed,      ///< (1/n) sum {A Y - (1 - A) Y}
  group_means,  ///< mean(Y | A = 1) - mean(Y | A = 0)
};

inline EffectEstimate naive_tau(const Dataset& data, NaiveVariant variant = NaiveVariant::printed) {
  if (!data.binary()) fail(ErrorCode::invalid_argument, "naive estimator needs binary treatment");
  double s1 = 0.0, s0 = 0.0;
  int n1 = 0, n0 = 0;
  for (const auto& c : data.clusters())
    for (int j = 0; j < c.size(); ++j) {
      if (c.treatments()(j) == 1) {
        s1 += c.outcomes()(j);
        ++n1;
      } else {
        s0 += c.outcomes()(j);
        ++n0;
      }
    }
  EffectEstimate e;
  e.method = Method::naive;
  e.estimand = {EstimandKind::tau, 1};
  e.n_used = data.n();
  if (variant == NaiveVariant::printed) {
    e.point = (s1 - s0) / data.n();
  } else {
    if (n1 == 0 || n0 == 0) fail(ErrorCode::estimability, "a treatment arm is empty");
    e.point = s1 / n1 - s0 / n0;
  }
  return e;
}

/// Joint bootstrap draws of (p1, p0) for delta-method standard errors.
struct JointDraws {
  std::vector<double> p1;
  std::vector<double> p0;
};

/// Risk difference, relative risk or odds ratio of two potential-outcome
/// means. With joint draws, se follows from the delta method using their
/// empirical covariance.
inline EffectEstimate effect_contrast(const EffectEstimate& p1, const EffectEstimate& p0, EstimandKind kind,
                                      const JointDraws* joint = nullptr) {
  const double a = p1.point, b = p0.point;
  double value = 0.0, d1 = 0.0, d0 = 0.0;
  switch (kind) {
    case EstimandKind::risk_difference:
      value = a - b;
      d1 = 1.0;
      d0 = -1.0;
      break;
    case EstimandKind::relative_risk:
      if (!(b > 0.0)) fail(ErrorCode::domain, "relative risk needs a positive reference mean");
      value = a / b;
      d1 = 1.0 / b;
      d0 = -a / (b * b);
      break;
    case EstimandKind::odds_ratio:
      if (!(a > 0.0 && a < 1.0 && b > 0.0 && b < 1.0)) fail(ErrorCode::domain, "odds ratio needs means in (0, 1)");
      value = (a / (1.0 - a)) / (b / (1.0 - b));
      d1 = value / (a * (1.0 - a));
      d0 = -value / (b * (1.0 - b));
      break;
    default:
      fail(ErrorCode::invalid_argument, "contrast kind must be risk_difference, relative_risk or odds_ratio");
  }
  EffectEstimate e;
  e.method = p1.method;
  e.estimand = {kind, 1};
  e.point = value;
  e.n_used = p1.n_used;
  e.clusters_dropped = p1.clusters_dropped;
  if (joint) {
    const auto B = joint->p1.size();
    if (B < 2 || joint->p0.size() != B) fail(ErrorCode::invalid_argument, "joint draws must be paired with at least two replicates");
    double m1 = 0.0, m0 = 0.0;
    for (std::size_t r = 0; r < B; ++r) {
      m1 += joint->p1[r];
      m0 += joint->p0[r];
    }
    m1 /= static_cast<double>(B);
    m0 /= static_cast<double>(B);
    double v11 = 0.0, v00 = 0.0, v10 = 0.0;
    for (std::size_t r = 0; r < B; ++r) {
      const double x = joint->p1[r] - m1, y = joint->p0[r] - m0;
      v11 += x * x;
      v00 += y * y;
      v10 += x * y;
    }
    const double denom = static_cast<double>(B) - 1.0;
    const double var = (d1 * d1 * v11 + d0 * d0 * v00 + 2.0 * d1 * d0 * v10) / denom;
    e.se = std::sqrt(std::max(0.0, var));
  }
  return e;
}

}  // namespace icpw
